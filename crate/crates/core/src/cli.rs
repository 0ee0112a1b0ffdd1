//! The `pairedinv` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{RunConfig, SetKind};
use crate::container::Container;
use crate::datagen::{build_dataset, PairedDataset, Split};
use crate::diagnostics::{auroc, bound_report, estimate_constants, evaluate, fit_density, ood_csv, ood_score};
use crate::inversion::{run_config, run_suite, write_suite_csv, Problem};
use crate::paired::{Normalizer, PairedModel};
use crate::training::{train, write_log_csv, NormalizedSet};
use crate::wave::{relative_velocity_error, WaveSolver};
use crate::{Error, Result, Tensor};

pub const ENV_THREADS: &str = "PAIREDINV_THREADS";

#[derive(Parser, Debug)]
#[command(name = "pairedinv", version, about = "Paired autoencoders for likelihood-free seismic inversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker thread cap (also read from PAIREDINV_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train, validation, test and OOD datasets.
    Gen(RunArgs),
    /// Train the paired autoencoders; writes a checkpoint and train_log.csv.
    Train(RunArgs),
    /// Likelihood-free estimates with RRE/RMA for the test set.
    Infer(RunArgs),
    /// One BI or LSI job on one test sample.
    Invert(RunArgs),
    /// The four-configuration inversion comparison.
    Suite(RunArgs),
    /// Fit the (RRE, RMA) density on validation data and score test and OOD sets.
    Ood(RunArgs),
    /// Estimate constants on validation data and check the error bounds on test data.
    Bounds(RunArgs),
    /// Dump a 2D slice of a container tensor as an 8-bit PGM image.
    Img(ImgArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `<out>/model.pairinv`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct ImgArgs {
    /// Container file.
    pub input: PathBuf,
    /// Tensor name; may be omitted when the container holds one tensor.
    #[arg(long)]
    pub tensor: Option<String>,
    /// Index of the slice over the leading dimensions.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Output `.pgm` file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pairedinv: {e}");
            if e.is_usage() {
                2
            } else {
                3
            }
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(ENV_THREADS) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{ENV_THREADS}={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    if threads == Some(0) {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Img(a) => img(a),
        Command::Gen(a) => with_ctx(a, "gen", gen),
        Command::Train(a) => with_ctx(a, "train", train_cmd),
        Command::Infer(a) => with_ctx(a, "infer", infer),
        Command::Invert(a) => with_ctx(a, "invert", invert),
        Command::Suite(a) => with_ctx(a, "suite", suite),
        Command::Ood(a) => with_ctx(a, "ood", ood),
        Command::Bounds(a) => with_ctx(a, "bounds", bounds),
    })
}

/// Resolved inputs of one subcommand.
pub struct Ctx {
    pub cfg: RunConfig,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub solver: WaveSolver,
    timing: String,
    start: Instant,
}

impl Ctx {
    pub fn from_args(a: &RunArgs) -> Result<Self> {
        let mut cfg = RunConfig::load(&a.config)?;
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(o) = &a.out {
            cfg.paths.out_dir = o.clone();
        }
        let out = cfg.paths.out_dir.clone();
        let checkpoint = a.checkpoint.clone().unwrap_or_else(|| out.join("model.pairinv"));
        Ok(Ctx {
            cfg,
            checkpoint,
            out,
            solver: WaveSolver::default(),
            timing: String::new(),
            start: Instant::now(),
        })
    }

    fn note(&mut self, msg: impl AsRef<str>) {
        let line = format!("[{:9.2}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref());
        eprintln!("{line}");
        self.timing.push_str(&line);
        self.timing.push('\n');
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::file(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.out_file(name)?;
        std::fs::write(&p, text).map_err(|e| Error::file(&p, e))?;
        Ok(p)
    }

    fn dataset(&self, kind: SetKind) -> Result<PairedDataset> {
        let p = self.cfg.manifest_path(kind);
        if !p.exists() {
            return Err(Error::Config(format!(
                "{}: dataset not found (run `pairedinv gen` first)",
                p.display()
            )));
        }
        PairedDataset::load(p)
    }

    fn model(&self) -> Result<PairedModel<f32>> {
        let m = PairedModel::<f32>::load(&self.checkpoint)?;
        if m.arch.model_hw != self.cfg.grid.shape() {
            return Err(Error::Config(format!(
                "{}: checkpoint grid {:?} does not match config grid {:?}",
                self.checkpoint.display(),
                m.arch.model_hw,
                self.cfg.grid.shape()
            )));
        }
        Ok(m)
    }

    /// Fails when a solver-free command has touched the solver.
    fn audit_no_solver(&self) -> Result<()> {
        match self.solver.calls() {
            0 => Ok(()),
            n => Err(Error::Contract(format!("solver-free command made {n} solver calls"))),
        }
    }
}

fn with_ctx(a: &RunArgs, name: &str, f: fn(&mut Ctx) -> Result<()>) -> Result<()> {
    let mut ctx = Ctx::from_args(a)?;
    ctx.note(format!("{name}: config {}", a.config.display()));
    f(&mut ctx)?;
    let calls = ctx.solver.calls();
    ctx.note(format!("{name}: done, solver calls {calls}"));
    let text = std::mem::take(&mut ctx.timing);
    ctx.write(&format!("{name}.timing.log"), &text)?;
    Ok(())
}

fn split_of(kind: SetKind) -> Split {
    match kind {
        SetKind::Train => Split::Train,
        SetKind::Val => Split::Validation,
        SetKind::Test => Split::Test,
        SetKind::Ood => Split::Ood,
    }
}

fn gen(ctx: &mut Ctx) -> Result<()> {
    let acq = ctx.cfg.acquisition()?;
    for kind in SetKind::ALL {
        let ds = build_dataset(
            ctx.cfg.set_size(kind),
            ctx.cfg.set_style(kind),
            &ctx.cfg.grid,
            &acq,
            ctx.cfg.noise(),
            ctx.cfg.set_seed(kind),
            split_of(kind),
            &ctx.solver,
        )?;
        let p = ds.save(&ctx.cfg.paths.data_dir, kind.name())?;
        ctx.note(format!("{}: {} pairs -> {}", kind.name(), ds.len(), p.display()));
    }
    Ok(())
}

fn train_cmd(ctx: &mut Ctx) -> Result<()> {
    let tr = ctx.dataset(SetKind::Train)?;
    let va = ctx.dataset(SetKind::Val)?;
    let (c_min, c_max) = ctx.cfg.c_range();
    let norm = Normalizer::fit(c_min, c_max, ctx.cfg.train.time_factor, &tr.data)?;
    let m = PairedModel::<f32>::new(ctx.cfg.arch(), norm, ctx.cfg.seed)?;
    ctx.note(format!("model with {} parameters", m.num_params()));
    let ts = NormalizedSet::new(&norm, &tr)?;
    let vs = NormalizedSet::new(&norm, &va)?;
    let mut lines = Vec::new();
    let out = train(m, &ts, &vs, &ctx.cfg.train_config(), &mut |r| {
        let l = format!("epoch {} total {:.4e} val_lfe_err {:.4} ({:.1}s)", r.epoch, r.train.total, r.val_lfe_err, r.seconds);
        eprintln!("{l}");
        lines.push(l);
    })?;
    for l in lines {
        ctx.timing.push_str(&l);
        ctx.timing.push('\n');
    }
    if let Some(p) = ctx.checkpoint.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::file(p, e))?;
    }
    out.best.save(&ctx.checkpoint)?;
    write_log_csv(ctx.out_file("train_log.csv")?, &out.log)?;
    ctx.note(format!("best epoch {} -> {}", out.best_epoch, ctx.checkpoint.display()));
    Ok(())
}

fn infer(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.model()?;
    let test = ctx.dataset(SetKind::Test)?;
    let (c_min, c_max) = ctx.cfg.c_range();
    let t = Instant::now();
    let ev = evaluate(&m, &test.data, c_min, c_max, 16)?;
    let secs = t.elapsed().as_secs_f64();
    ctx.audit_no_solver()?;
    let mut s = String::from("sample,rre,rma,model_err\n");
    for (i, p) in ev.points.iter().enumerate() {
        let err = relative_velocity_error(ev.q_hat.batch_item(i), test.models.batch_item(i));
        let _ = writeln!(s, "{i},{:.9e},{:.9e},{:.9e}", p.rre, p.rma, err);
    }
    ctx.write("infer.csv", &s)?;
    let mut c = Container::new(json!({"kind": "lfe", "n": test.len()}));
    c.insert("q_hat", ev.q_hat);
    c.save(ctx.out_file("lfe.pairinv")?)?;
    ctx.note(format!("{} samples, {:.3} ms per sample including RRE/RMA", test.len(), 1e3 * secs / test.len() as f64));
    Ok(())
}

fn invert(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.model()?;
    let test = ctx.dataset(SetKind::Test)?;
    let acq = ctx.cfg.acquisition()?;
    let job = ctx.cfg.inversion.job.clone();
    if job.sample >= test.len() {
        return Err(Error::Config(format!("job sample {} outside test set of {}", job.sample, test.len())));
    }
    let cfg = ctx.cfg.job_config();
    let b = test.data(job.sample)?;
    let truth = test.model(job.sample)?.into_qsq();
    let p = Problem {
        solver: &ctx.solver,
        grid: ctx.cfg.grid,
        acq: &acq,
        b_obs: &b,
        truth: Some(&truth),
    };
    let trace = run_config(&p, &m, &cfg)?;
    trace.write_csv(ctx.out_file("invert_trace.csv")?)?;
    let mut c = Container::new(json!({"kind": "inversion", "method": cfg.method.label(), "start": cfg.start.label(), "sample": job.sample}));
    c.insert("q", trace.final_model.clone());
    c.save(ctx.out_file("invert_model.pairinv")?)?;
    ctx.note(format!(
        "{} {} sample {}: misfit {:.4e} -> {:.4e}",
        cfg.method.label(),
        cfg.start.label(),
        job.sample,
        trace.misfit[0],
        trace.misfit.last().copied().unwrap_or(f64::NAN)
    ));
    Ok(())
}

fn suite(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.model()?;
    let test = ctx.dataset(SetKind::Test)?;
    let acq = ctx.cfg.acquisition()?;
    let cfgs = ctx.cfg.suite_configs();
    let out = run_suite(&ctx.solver, &ctx.cfg.grid, &acq, &test, &m, &cfgs, ctx.cfg.suite_samples())?;
    write_suite_csv(ctx.out_file("suite.csv")?, &out.rows)?;
    let mut s = String::from("method,start,alpha,sample,iter,misfit,reg,model_err\n");
    for (i, per) in out.traces.iter().enumerate() {
        for (c, t) in cfgs.iter().zip(per) {
            let Some(t) = t else { continue };
            for k in 0..t.len() {
                let err = t.model_err.as_ref().map_or(f64::NAN, |e| e[k]);
                let _ = writeln!(
                    s,
                    "{},{},{},{i},{k},{:.9e},{:.9e},{:.9e}",
                    c.method.label(),
                    c.start.label(),
                    c.alpha,
                    t.misfit[k],
                    t.reg[k],
                    err
                );
            }
        }
    }
    ctx.write("suite_traces.csv", &s)?;
    for f in &out.failures {
        ctx.note(format!("sample {} config {} failed: {}", f.sample, f.config, f.message));
    }
    Ok(())
}

fn ood(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.model()?;
    let (c_min, c_max) = ctx.cfg.c_range();
    let d = &ctx.cfg.diagnostics;
    let (bins, sigma, threshold) = (d.bins, d.smooth_sigma, d.threshold);
    let val = evaluate(&m, &ctx.dataset(SetKind::Val)?.data, c_min, c_max, 16)?;
    let map = fit_density(&val.points, bins, sigma)?;
    map.save(ctx.out_file("density.pairinv")?)?;
    let mut scores = Vec::new();
    for kind in [SetKind::Test, SetKind::Ood] {
        let ev = evaluate(&m, &ctx.dataset(kind)?.data, c_min, c_max, 16)?;
        let sc: Vec<_> = ev.points.iter().map(|&p| ood_score(&map, p, threshold)).collect();
        ctx.write(&format!("ood_{}.csv", kind.name()), &ood_csv(&ev.points, &sc))?;
        scores.push(sc);
    }
    ctx.audit_no_solver()?;
    let pct = |v: &[crate::diagnostics::OodScore]| v.iter().map(|s| s.percentile).collect::<Vec<_>>();
    let a = auroc(&pct(&scores[1]), &pct(&scores[0]))?;
    let flagged = |v: &[crate::diagnostics::OodScore]| v.iter().filter(|s| s.is_ood).count();
    let summary = json!({
        "auroc": a,
        "n_in": scores[0].len(),
        "n_ood": scores[1].len(),
        "flagged_in": flagged(&scores[0]),
        "flagged_ood": flagged(&scores[1]),
        "threshold": threshold,
        "solver_calls": ctx.solver.calls(),
    });
    ctx.write("ood_summary.json", &serde_json::to_string_pretty(&summary)?)?;
    ctx.note(format!("AUROC {a:.4}"));
    Ok(())
}

fn bounds(ctx: &mut Ctx) -> Result<()> {
    let m = ctx.model()?;
    let (c_min, c_max) = ctx.cfg.c_range();
    let acq = ctx.cfg.acquisition()?;
    let val = ctx.dataset(SetKind::Val)?;
    let test = ctx.dataset(SetKind::Test)?;
    let c = estimate_constants(&m, &val, ctx.cfg.diagnostics.pair_samples, ctx.cfg.seed, c_min, c_max)?;
    ctx.write("constants.json", &serde_json::to_string_pretty(&c)?)?;
    let r = bound_report(&m, &test, &c, &ctx.solver, &ctx.cfg.grid, &acq, c_min, c_max)?;
    r.write_csv(ctx.out_file("bounds.csv")?)?;
    ctx.note(format!(
        "prop1 (second) {:.3}, theorem {:.3}, xi_M {:e}",
        r.prop1_rate2(),
        r.theorem_rate(),
        c.xi_m
    ));
    Ok(())
}

/// Binary 8-bit PGM, min-max scaled; a constant image maps to 0.
pub fn pgm_bytes(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::shape(format!("{} values for a {height}x{width} image", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = hi - lo;
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

fn img(a: &ImgArgs) -> Result<()> {
    let c = Container::load(&a.input)?;
    let name = match &a.tensor {
        Some(n) => n.clone(),
        None if c.tensors.len() == 1 => c.tensors.keys().next().cloned().unwrap_or_default(),
        None => {
            return Err(Error::Config(format!(
                "{} holds several tensors; pick one with --tensor ({})",
                a.input.display(),
                c.tensors.keys().cloned().collect::<Vec<_>>().join(", ")
            )))
        }
    };
    let t: Tensor<f64> = c.get(&name).map_err(|_| Error::Config(format!("{}: no tensor '{name}'", a.input.display())))?.to();
    let shape = t.shape();
    if shape.len() < 2 {
        return Err(Error::Config(format!("tensor '{name}' has rank {}; need at least 2", shape.len())));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let slices = t.len() / (h * w);
    if a.index >= slices {
        return Err(Error::Config(format!("index {} outside {slices} slices of '{name}'", a.index)));
    }
    let bytes = pgm_bytes(&t.data()[a.index * h * w..(a.index + 1) * h * w], h, w)?;
    write_file(&a.out, &bytes)
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }
    std::fs::write(p, bytes).map_err(|e| Error::file(p, e))
}
