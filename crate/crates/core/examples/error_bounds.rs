//! Estimates the constants of the error bounds on validation data and checks them on test data.
mod common;

use pairedinv::diagnostics::{bound_report, estimate_constants};

fn main() -> pairedinv::Result<()> {
    let t = common::trained_tiny(8)?;
    let (c_min, c_max) = t.cfg.c_range();
    let c = estimate_constants(&t.model, &t.val, 2000, 0, c_min, c_max)?;
    println!("{}", serde_json::to_string_pretty(&c)?);
    let r = bound_report(&t.model, &t.test, &c, &t.solver, &t.cfg.grid, &t.acq, c_min, c_max)?;
    println!("residual bound (first)  holds on {:.1}%", 100.0 * r.prop1_rate1());
    println!("residual bound (second) holds on {:.1}%", 100.0 * r.prop1_rate2());
    println!("model error bound       holds on {:.1}%", 100.0 * r.theorem_rate());
    Ok(())
}
