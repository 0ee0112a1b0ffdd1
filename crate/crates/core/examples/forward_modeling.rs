//! Simulates one layered model and writes the velocity and first shot gather as PGM images.
use pairedinv::cli::pgm_bytes;
use pairedinv::config::RunConfig;
use pairedinv::datagen::{pair_rng, sample_model};
use pairedinv::wave::{cfl_check, WaveSolver};

fn main() -> pairedinv::Result<()> {
    let cfg = RunConfig::desk();
    let acq = cfg.acquisition()?;
    let model = sample_model::<f64>(&cfg.style.train, &cfg.grid, &mut pair_rng(7, 0))?;
    println!("CFL ratio {:.3}", cfl_check(&model, acq.dt)?);

    let t = std::time::Instant::now();
    let data = WaveSolver::default().simulate(&model, &acq)?;
    println!("simulate {:?}, data shape {:?}", t.elapsed(), data.shape());

    let out = std::path::Path::new("target/examples-out");
    std::fs::create_dir_all(out)?;
    let c = model.velocity();
    std::fs::write(out.join("velocity.pgm"), pgm_bytes(c.data(), cfg.grid.nz, cfg.grid.nx)?)?;
    // receivers down, time across, for the first shot
    let (nr, nt) = (acq.nr(), acq.nt);
    let shot: Vec<f64> = data.shot(0).iter().map(|v| v.signum() * v.abs().sqrt()).collect();
    std::fs::write(out.join("shot0.pgm"), pgm_bytes(&shot, nr, nt)?)?;
    println!("wrote {}/velocity.pgm and shot0.pgm", out.display());
    Ok(())
}
