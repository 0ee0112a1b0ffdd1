use std::path::{Path, PathBuf};

use pairedinv::cli::{pgm_bytes, run};
use pairedinv::config::RunConfig;
use pairedinv::container::Container;
use pairedinv::inversion::SUITE_HEADER;
use pairedinv::training::LOG_HEADER;

fn pairedinv(args: &[&str]) -> i32 {
    let mut v = vec!["pairedinv"];
    v.extend_from_slice(args);
    run(v)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(pairedinv(&["--help"]), 0);
    assert_eq!(pairedinv(&["gen", "--help"]), 0);
    assert_eq!(pairedinv(&[]), 2);
    assert_eq!(pairedinv(&["frobnicate"]), 2);
    assert_eq!(pairedinv(&["gen", "--config", "/nonexistent/missing.json"]), 2);
}

#[test]
fn config_faults_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(RunConfig::tiny()).unwrap();
    v["grid"]["colour"] = "blue".into();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, v.to_string()).unwrap();
    assert_eq!(pairedinv(&["gen", "--config", p.to_str().unwrap()]), 2);

    let mut v = serde_json::to_value(RunConfig::tiny()).unwrap();
    v["config_version"] = 2.into();
    std::fs::write(&p, v.to_string()).unwrap();
    assert_eq!(pairedinv(&["gen", "--config", p.to_str().unwrap()]), 2);

    // valid config, datasets never generated
    let p = write_config(dir.path(), &RunConfig::tiny());
    assert_eq!(pairedinv(&["train", "--config", p.to_str().unwrap()]), 2);
    assert_eq!(pairedinv(&["infer", "--config", p.to_str().unwrap(), "--checkpoint", "/nonexistent/ckpt.pairinv"]), 2);
}

#[test]
fn full_pipeline_on_the_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RunConfig::tiny());
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    for cmd in ["gen", "train", "infer", "invert", "suite", "ood", "bounds"] {
        assert_eq!(pairedinv(&[cmd, "--config", c, "--threads", "1"]), 0, "{cmd}");
    }
    assert!(dir.path().join("data/ood.manifest.json").exists());
    assert!(read(out.join("train_log.csv")).starts_with(LOG_HEADER));
    let suite = read(out.join("suite.csv"));
    assert_eq!(suite.lines().next().unwrap(), SUITE_HEADER);
    assert_eq!(suite.lines().count(), 5);
    assert_eq!(read(out.join("infer.csv")).lines().count(), 33);
    assert!(read(out.join("invert_trace.csv")).starts_with("iter,misfit,reg,model_err"));
    let summary: serde_json::Value = serde_json::from_str(&read(out.join("ood_summary.json"))).unwrap();
    assert_eq!(summary["solver_calls"], 0);
    assert!(read(out.join("bounds.csv")).lines().count() == 33);
    assert!(read(out.join("infer.timing.log")).contains("solver calls 0"));
    assert!(read(out.join("ood.timing.log")).contains("solver calls 0"));

    // rerun into a second directory with the same checkpoint: identical CSVs
    let ckpt = out.join("model.pairinv");
    let out2 = dir.path().join("out2");
    for cmd in ["infer", "suite", "ood", "bounds"] {
        let code = pairedinv(&[cmd, "--config", c, "--checkpoint", ckpt.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
        assert_eq!(code, 0, "{cmd}");
    }
    for f in ["infer.csv", "suite.csv", "suite_traces.csv", "ood_test.csv", "ood_ood.csv", "bounds.csv", "constants.json", "ood_summary.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(out2.join(f)).unwrap(), "{f}");
    }

    let pgm = dir.path().join("img/q.pgm");
    let lfe = out.join("lfe.pairinv");
    assert_eq!(pairedinv(&["img", lfe.to_str().unwrap(), "--index", "3", "--out", pgm.to_str().unwrap()]), 0);
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(bytes.len(), 13 + 256);
    assert_eq!(pairedinv(&["img", lfe.to_str().unwrap(), "--index", "32", "--out", pgm.to_str().unwrap()]), 2);
    assert_eq!(pairedinv(&["img", ckpt.to_str().unwrap(), "--out", pgm.to_str().unwrap()]), 2);
}

#[test]
fn seed_override_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut tiny = RunConfig::tiny();
    tiny.train.n_train = 2;
    tiny.train.n_val = 2;
    tiny.inversion.n_test = 1;
    tiny.diagnostics.n_ood = 1;
    let c = write_config(dir.path(), &tiny);
    let c = c.to_str().unwrap();
    let d = |p: &str| Container::load(dir.path().join(p)).unwrap();
    assert_eq!(pairedinv(&["gen", "--config", c]), 0);
    let a = d("data/train-000.pairinv");
    assert_eq!(pairedinv(&["gen", "--config", c]), 0);
    assert_eq!(d("data/train-000.pairinv"), a);
    assert_eq!(pairedinv(&["gen", "--config", c, "--seed", "9"]), 0);
    assert_ne!(d("data/train-000.pairinv"), a);
}

#[test]
fn pgm_scaling() {
    let b = pgm_bytes(&[1.0, 2.0, 3.0, 5.0], 2, 2).unwrap();
    assert_eq!(&b[..11], b"P5\n2 2\n255\n");
    assert_eq!(&b[11..], &[0, 64, 128, 255]);
    assert_eq!(&pgm_bytes(&[7.0; 3], 1, 3).unwrap()[11..], &[0, 0, 0]);
    assert!(pgm_bytes(&[1.0; 3], 2, 2).is_err());
    assert!(pgm_bytes(&[f64::NAN, 1.0], 1, 2).is_err());
}
