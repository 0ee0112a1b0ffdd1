//! Basic and latent-space inversion from basic and warm starts on one test sample.
mod common;

use pairedinv::inversion::{run_config, Problem};

fn main() -> pairedinv::Result<()> {
    let mut t = common::trained_tiny(8)?;
    t.cfg.inversion.iters = 40;
    let b = t.test.data(0)?;
    let truth = t.test.model(0)?.into_qsq();
    let p = Problem { solver: &t.solver, grid: t.cfg.grid, acq: &t.acq, b_obs: &b, truth: Some(&truth) };
    println!("method start alpha  misfit0   misfitN   err0     errN");
    for c in t.cfg.suite_configs() {
        let tr = run_config(&p, &t.model, &c)?;
        let e = tr.model_err.as_ref().expect("truth given");
        println!(
            "{:<6} {:<5} {:<5}  {:.3e} {:.3e} {:.4}   {:.4}",
            c.method.label(),
            c.start.label(),
            c.alpha,
            tr.misfit[0],
            tr.misfit[tr.len() - 1],
            e[0],
            e[tr.len() - 1]
        );
    }
    println!("solver calls {}", t.solver.calls());
    Ok(())
}
