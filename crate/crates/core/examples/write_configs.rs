//! Writes the desk and tiny run configurations as JSON.
use pairedinv::config::RunConfig;

fn main() -> pairedinv::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "configs".into());
    std::fs::create_dir_all(&dir)?;
    for (name, cfg) in [("desk", RunConfig::desk()), ("tiny", RunConfig::tiny())] {
        let path = format!("{dir}/{name}.json");
        std::fs::write(&path, cfg.to_json()? + "\n")?;
        println!("{path}");
    }
    Ok(())
}
