//! A trained tiny problem shared by the examples that need a model.
#![allow(dead_code)]
use pairedinv::config::{RunConfig, SetKind};
use pairedinv::datagen::{build_dataset, PairedDataset, Split};
use pairedinv::paired::{Normalizer, PairedModel};
use pairedinv::training::{train, NormalizedSet};
use pairedinv::wave::{Acquisition, WaveSolver};

pub struct Tiny {
    pub cfg: RunConfig,
    pub acq: Acquisition,
    pub solver: WaveSolver,
    pub model: PairedModel<f32>,
    pub val: PairedDataset,
    pub test: PairedDataset,
    pub ood: PairedDataset,
}

pub fn trained_tiny(epochs: usize) -> pairedinv::Result<Tiny> {
    let mut cfg = RunConfig::tiny();
    cfg.train.n_train = 192;
    cfg.train.n_val = 64;
    cfg.inversion.n_test = 64;
    cfg.diagnostics.n_ood = 64;
    cfg.train.epochs = epochs;
    let acq = cfg.acquisition()?;
    let solver = WaveSolver::default();
    let gen = |kind: SetKind, split| {
        build_dataset(cfg.set_size(kind), cfg.set_style(kind), &cfg.grid, &acq, cfg.noise(), cfg.set_seed(kind), split, &solver)
    };
    let tr = gen(SetKind::Train, Split::Train)?;
    let val = gen(SetKind::Val, Split::Validation)?;
    let test = gen(SetKind::Test, Split::Test)?;
    let ood = gen(SetKind::Ood, Split::Ood)?;
    let (c_min, c_max) = cfg.c_range();
    let norm = Normalizer::fit(c_min, c_max, cfg.train.time_factor, &tr.data)?;
    let m = PairedModel::<f32>::new(cfg.arch(), norm, cfg.seed)?;
    let out = train(m, &NormalizedSet::new(&norm, &tr)?, &NormalizedSet::new(&norm, &val)?, &cfg.train_config(), &mut |_| {})?;
    let solver = WaveSolver::default();
    Ok(Tiny { cfg, acq, solver, model: out.best, val, test, ood })
}
