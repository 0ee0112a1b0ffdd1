//! Container files and model checkpoints round-trip bit for bit.
use pairedinv::config::RunConfig;
use pairedinv::container::Container;
use pairedinv::paired::{Normalizer, PairedModel};
use pairedinv::Tensor;
use serde_json::json;

fn main() -> pairedinv::Result<()> {
    let dir = std::env::temp_dir();
    let mut c = Container::new(json!({"note": "example"}));
    c.insert("a", Tensor::<f32>::from_fn(&[3, 4], |i| i as f32 * 0.1));
    c.insert("b", Tensor::<f64>::from_fn(&[5], |i| (i as f64).sqrt()));
    let path = dir.join("pairedinv-example-container.pairinv");
    c.save(&path)?;
    assert_eq!(Container::load(&path)?, c);
    println!("container with {} tensors: {} bytes", c.tensors.len(), std::fs::metadata(&path)?.len());

    let cfg = RunConfig::tiny();
    let norm = Normalizer { q_offset: 1e7, q_scale: 6e6, b_scale: 1e-3, time_factor: cfg.train.time_factor };
    let m = PairedModel::<f32>::new(cfg.arch(), norm, 3)?;
    let path = dir.join("pairedinv-example-ckpt.pairinv");
    m.save(&path)?;
    let back = PairedModel::<f32>::load(&path)?;
    assert_eq!(back.params(), m.params());
    let wide: PairedModel<f64> = m.cast()?;
    println!("checkpoint with {} parameters round-trips; f64 copy has {}", m.num_params(), wide.num_params());
    Ok(())
}
