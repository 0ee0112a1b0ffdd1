use pairedinv::config::{RunConfig, SetKind};
use pairedinv::inversion::{Method, Start};
use pairedinv::paired::ArchConfig;
use pairedinv::Error;

#[test]
fn shipped_configs_match_the_builders() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    let desk = RunConfig::load(format!("{dir}/desk.json")).unwrap();
    let mut want = RunConfig::desk();
    want.paths.resolve(std::path::Path::new(dir));
    assert_eq!(desk, want);
    let tiny = RunConfig::load(format!("{dir}/tiny.json")).unwrap();
    assert_eq!(tiny.grid.nz, 16);
}

#[test]
fn json_round_trip() {
    for c in [RunConfig::desk(), RunConfig::tiny()] {
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}

#[test]
fn unknown_keys_and_versions_rejected() {
    let mut v = serde_json::to_value(RunConfig::tiny()).unwrap();
    v["inversion"]["iterations"] = 5.into();
    assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Json(_))));
    let mut v = serde_json::to_value(RunConfig::tiny()).unwrap();
    v["extra"] = true.into();
    assert!(RunConfig::from_json(&v.to_string()).is_err());
    let mut v = serde_json::to_value(RunConfig::tiny()).unwrap();
    v.as_object_mut().unwrap().remove("config_version");
    assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
}

#[test]
fn minimal_document_takes_defaults() {
    let text = r#"{
        "config_version": 1,
        "grid": {"nz": 16, "nx": 16, "dz": 10.0, "dx": 10.0},
        "acquisition": {"sources": 2, "receivers": 8, "nt": 128, "peak_freq": 20.0},
        "style": {
            "train": {"family": "flat_layers", "layers": [3, 6], "c_min": 1500.0, "c_max": 4000.0},
            "ood": {"family": "faulted_layers", "layers": [3, 6], "c_min": 1500.0, "c_max": 4000.0}
        },
        "train": {"n_train": 8, "n_val": 4, "epochs": 1},
        "inversion": {"n_test": 2, "iters": 3},
        "diagnostics": {"n_ood": 2}
    }"#;
    let c = RunConfig::from_json(text).unwrap();
    assert_eq!(c.train.time_factor, 4);
    assert_eq!(c.acquisition.depth, 1);
    assert_eq!(c.style.noise_relative, 0.01);
    assert_eq!(c.paths.out_dir, std::path::PathBuf::from("out"));
    let acq = c.acquisition().unwrap();
    assert_eq!(acq.data_shape(), [2, 8, 128]);
    let arch = c.arch();
    assert_eq!(arch.data_hw, [8, 32]);
    assert_eq!(arch.enc_widths, ArchConfig::desk_widths().enc_widths);
}

#[test]
fn validation_failures_are_config_errors() {
    let bad = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = RunConfig::tiny();
        f(&mut c);
        c.validate().unwrap_err()
    };
    assert!(bad(&|c| c.train.time_factor = 3).is_usage());
    assert!(bad(&|c| c.train.batch_size = 1).is_usage());
    assert!(bad(&|c| c.inversion.iters = 0).is_usage());
    assert!(bad(&|c| c.acquisition.cfl_fraction = 1.5).is_usage());
    assert!(bad(&|c| c.diagnostics.threshold = 1.0).is_usage());
    assert!(bad(&|c| {
        c.inversion.job.method = Method::Bi;
        c.inversion.job.alpha = 1.0;
    })
    .is_usage());
}

#[test]
fn suite_and_seeds() {
    let c = RunConfig::tiny();
    let s = c.suite_configs();
    let labels: Vec<_> = s.iter().map(|x| (x.method, x.start, x.alpha)).collect();
    assert_eq!(
        labels,
        [
            (Method::Bi, Start::Basic, 0.0),
            (Method::Bi, Start::Warm, 0.0),
            (Method::Lsi, Start::Basic, 0.0),
            (Method::Lsi, Start::Warm, 1.0)
        ]
    );
    assert!(s.iter().all(|x| x.iters == 3));
    let seeds: std::collections::BTreeSet<u64> = SetKind::ALL.iter().map(|&k| c.set_seed(k)).collect();
    assert_eq!(seeds.len(), 4);
    let mut d = c.clone();
    d.seed = 1;
    assert!(SetKind::ALL.iter().all(|&k| d.set_seed(k) != c.set_seed(k)));
}
