//! Density of (RRE, RMA) on validation data used to flag out-of-distribution inputs.
mod common;

use pairedinv::diagnostics::{auroc, evaluate, fit_density, ood_score, DEFAULT_OOD_THRESHOLD};

fn main() -> pairedinv::Result<()> {
    let t = common::trained_tiny(8)?;
    let (c_min, c_max) = t.cfg.c_range();
    let val = evaluate(&t.model, &t.val.data, c_min, c_max, 16)?;
    let map = fit_density(&val.points, t.cfg.diagnostics.bins, t.cfg.diagnostics.smooth_sigma)?;
    let score = |ds: &pairedinv::datagen::PairedDataset| -> pairedinv::Result<Vec<f64>> {
        let ev = evaluate(&t.model, &ds.data, c_min, c_max, 16)?;
        Ok(ev.points.iter().map(|&p| ood_score(&map, p, DEFAULT_OOD_THRESHOLD).percentile).collect())
    };
    let (inside, outside) = (score(&t.test)?, score(&t.ood)?);
    let flagged = |v: &[f64]| v.iter().filter(|&&s| s >= DEFAULT_OOD_THRESHOLD).count();
    println!("flagged: {} of {} in-distribution, {} of {} OOD", flagged(&inside), inside.len(), flagged(&outside), outside.len());
    println!("AUROC {:.3}, solver calls {}", auroc(&outside, &inside)?, t.solver.calls());
    Ok(())
}
