//! Trains the paired autoencoders on the tiny configuration and saves a checkpoint.
//!
//! `cargo run --release --example train_paired -- [epochs]`
use pairedinv::config::{RunConfig, SetKind};
use pairedinv::datagen::{build_dataset, Split};
use pairedinv::paired::{Normalizer, PairedModel};
use pairedinv::training::{train, NormalizedSet, LOG_HEADER};
use pairedinv::wave::WaveSolver;

fn main() -> pairedinv::Result<()> {
    let mut cfg = RunConfig::tiny();
    cfg.train.n_train = 256;
    cfg.train.n_val = 64;
    cfg.train.epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let acq = cfg.acquisition()?;
    let solver = WaveSolver::default();
    let gen = |kind: SetKind, split| {
        build_dataset(cfg.set_size(kind), &cfg.style.train, &cfg.grid, &acq, cfg.noise(), cfg.set_seed(kind), split, &solver)
    };
    let tr = gen(SetKind::Train, Split::Train)?;
    let va = gen(SetKind::Val, Split::Validation)?;

    let (c_min, c_max) = cfg.c_range();
    let norm = Normalizer::fit(c_min, c_max, cfg.train.time_factor, &tr.data)?;
    let model = PairedModel::<f32>::new(cfg.arch(), norm, cfg.seed)?;
    println!("{} parameters", model.num_params());
    println!("{LOG_HEADER}");
    let out = train(
        model,
        &NormalizedSet::new(&norm, &tr)?,
        &NormalizedSet::new(&norm, &va)?,
        &cfg.train_config(),
        &mut |r| println!("{}", r.csv_row()),
    )?;
    let path = std::env::temp_dir().join("pairedinv-example.pairinv");
    out.best.save(&path)?;
    println!("best epoch {} saved to {}", out.best_epoch, path.display());
    Ok(())
}
