//! Likelihood-free estimates with the solver-free RRE and RMA metrics.
mod common;

use pairedinv::diagnostics::evaluate;
use pairedinv::wave::relative_velocity_error;

fn main() -> pairedinv::Result<()> {
    let t = common::trained_tiny(8)?;
    let (c_min, c_max) = t.cfg.c_range();
    let start = std::time::Instant::now();
    let ev = evaluate(&t.model, &t.test.data, c_min, c_max, 16)?;
    let per = start.elapsed().as_secs_f64() / t.test.len() as f64;
    println!("sample  rre     rma     model_err");
    for (i, p) in ev.points.iter().enumerate().take(8) {
        let err = relative_velocity_error(ev.q_hat.batch_item(i), t.test.models.batch_item(i));
        println!("{i:>6}  {:.4}  {:.4}  {:.4}", p.rre, p.rma, err);
    }
    println!("{:.3} ms per sample, solver calls {}", 1e3 * per, t.solver.calls());
    Ok(())
}
