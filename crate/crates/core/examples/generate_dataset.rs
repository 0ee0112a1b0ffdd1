//! Builds a small paired dataset, saves it in shards and reloads it.
use pairedinv::config::{RunConfig, SetKind};
use pairedinv::datagen::{build_dataset, PairedDataset, Split};
use pairedinv::wave::WaveSolver;

fn main() -> pairedinv::Result<()> {
    let cfg = RunConfig::tiny();
    let acq = cfg.acquisition()?;
    let solver = WaveSolver::default();
    let ds = build_dataset(64, &cfg.style.train, &cfg.grid, &acq, cfg.noise(), cfg.set_seed(SetKind::Train), Split::Train, &solver)?;
    println!("{} pairs, noise sigma {:.3e}, {} solver calls", ds.len(), ds.noise_sigma, solver.calls());

    let dir = std::env::temp_dir().join("pairedinv-example-data");
    let manifest = ds.save(&dir, "train")?;
    let back = PairedDataset::load(&manifest)?;
    assert_eq!(back, ds);
    println!("round trip through {} ok", manifest.display());
    Ok(())
}
