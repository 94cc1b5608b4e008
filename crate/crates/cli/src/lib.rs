//! The `r2u3d` command line: model summaries, gradient verification,
//! preprocessing, phantom generation, training, evaluation and
//! segmentation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use r2u3d_core::data::{phantom_set, preprocess_pair, resample_depth, write_internal, PhantomConfig, Volume};
use r2u3d_core::losses::threshold;
use r2u3d_core::model::{read_checkpoint, write_checkpoint, Model};
use r2u3d_core::parallel::set_deterministic;
use r2u3d_core::train::{self, evaluate, EvalReport, OracleStub, Segmenter, SmokeConfig};
use r2u3d_core::verify::{run_with_progress, VerifyOptions};
use r2u3d_core::OpKind;
use serde_json::json;

pub mod config;
pub mod dataset;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "r2u3d", version, about = "Recurrent residual 3D U-Net for CT lung segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Architecture preset.
    #[arg(long, global = true, value_parser = ["default", "dynamic"])]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single worker, fixed reduction order.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Leave wall-clock values out of reports so reruns are byte-identical.
    #[arg(long, global = true)]
    pub no_timestamps: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the layer table, parameter total and delta against the published count.
    Summarize {
        /// Input extents used for the shape column.
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
        input: Option<Vec<usize>>,
        /// Also write the summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every backward rule against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Only run checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
        /// Corrupt one operation's backward rule (self-test of the checker).
        #[arg(long, hide = true)]
        fault: Option<String>,
        /// JSON-lines report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample and normalise a scan (and its mask) into a dataset directory.
    Preprocess {
        /// MetaImage header or internal volume.
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        target_depth: Option<usize>,
        /// Scan id; defaults to the image file stem.
        #[arg(long)]
        id: Option<String>,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic ellipsoid phantoms into a dataset directory.
    Phantoms {
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
        dims: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the pool-sampling strategy.
    Train {
        /// Dataset directory (the training pool).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where the trained model is written.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Training log (JSON lines); defaults to the checkpoint path with a `.jsonl` extension.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Score a model on a dataset directory.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// JSON-lines report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Write a binary lung mask for one scan.
    Segment {
        /// MetaImage header (normalised on load) or preprocessed internal volume.
        scan: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        target_depth: Option<usize>,
        /// Output mask (internal format).
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw probability volume here.
        #[arg(long)]
        probabilities: Option<PathBuf>,
        /// Return this mask instead of running a model.
        #[arg(long, hide = true)]
        oracle_mask: Option<PathBuf>,
    },
    /// Overfit a toy model on synthetic phantoms and report Soft-DSC.
    Smoke {
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let c = &cli.common;
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set_deterministic(c.deterministic || cfg.deterministic);
    let ctx = Ctx { common: c.clone(), cfg };
    match &cli.command {
        Command::Summarize { input, out: json_out } => summarize(&ctx, input.as_deref(), json_out.as_deref(), out),
        Command::Gradcheck { tolerance, filter, fault, out: report } => {
            gradcheck(&ctx, *tolerance, filter.clone(), fault.as_deref(), report.as_deref(), out)
        }
        Command::Preprocess { image, mask, target_depth, id, out: dir } => {
            preprocess(&ctx, image, mask.as_deref(), *target_depth, id.as_deref(), dir, out)
        }
        Command::Phantoms { count, dims, noise, out: dir } => phantoms(&ctx, *count, dims.as_deref(), *noise, dir, out),
        Command::Train { data, checkpoint, init, out: log, iterations, checkpoint_every } => {
            let args = TrainArgs {
                data: data.clone(),
                checkpoint: checkpoint.clone(),
                init: init.clone(),
                log: log.clone(),
                iterations: *iterations,
                checkpoint_every: *checkpoint_every,
            };
            train_cmd(&ctx, args, out)
        }
        Command::Eval { data, checkpoint, threshold, out: report, oracle } => {
            eval_cmd(&ctx, data.as_deref(), checkpoint.as_deref(), *threshold, report.as_deref(), *oracle, out)
        }
        Command::Segment { scan, checkpoint, threshold, target_depth, out: mask_out, probabilities, oracle_mask } => {
            let args = SegmentArgs {
                scan,
                checkpoint: checkpoint.as_deref(),
                threshold: *threshold,
                target_depth: *target_depth,
                out: mask_out,
                probabilities: probabilities.as_deref(),
                oracle_mask: oracle_mask.as_deref(),
            };
            segment(&ctx, args, out)
        }
        Command::Smoke { iterations } => smoke(&ctx, *iterations, out),
    }
}

struct Ctx {
    common: Common,
    cfg: RunConfig,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.seed(self.common.seed)
    }

    fn threshold(&self, flag: Option<f64>) -> CliResult<f64> {
        let t = flag.unwrap_or(self.cfg.eval.threshold);
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::Usage(format!("threshold must lie in (0, 1), got {t}")));
        }
        Ok(t)
    }

    fn path(&self, flag: Option<&Path>, configured: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| configured.clone())
            .ok_or_else(|| CliError::Usage(format!("no {what} given (flag or [paths] in the config)")))
    }

    /// `# generated at ...` header line, unless timestamps are off.
    fn stamp(&self, out: &mut dyn Write) -> CliResult<()> {
        if !self.common.no_timestamps {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            emit(out, format_args!("# generated at unix time {secs}\n"))?;
        }
        Ok(())
    }
}

fn emit(out: &mut dyn Write, args: std::fmt::Arguments<'_>) -> CliResult<()> {
    out.write_fmt(args).map_err(|e| CliError::Io(format!("writing report: {e}")))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn json_lines<I: IntoIterator<Item = serde_json::Value>>(values: I) -> String {
    values.into_iter().map(|v| v.to_string() + "\n").collect()
}

// ── summarize ──────────────────────────────────────────────────────────

fn summarize(ctx: &Ctx, input: Option<&[usize]>, json_out: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let mc = ctx.cfg.model_config(ctx.common.preset.as_deref())?;
    let arch = r2u3d_core::model::Architecture::new(&mc)?;
    let extents = match input {
        Some(&[d, h, w]) => [d, h, w],
        _ => mc.required_divisor().map(|v| v.max(64)),
    };
    arch.check_input(r2u3d_core::Shape::new(1, 1, extents[0], extents[1], extents[2]))?;
    let s = arch.summarize(extents);
    emit(out, format_args!("{s}\n"))?;
    if let Some(p) = json_out {
        let v = json!({
            "variant": s.variant,
            "input": s.input,
            "total": s.total,
            "row_sum": s.row_sum(),
            "reference": s.reference(),
            "delta": s.delta(),
            "rows": s.rows,
        });
        write_file(p, &(v.to_string() + "\n"))?;
    }
    Ok(())
}

// ── gradcheck ──────────────────────────────────────────────────────────

fn gradcheck(
    ctx: &Ctx,
    tolerance: f64,
    filter: Option<String>,
    fault: Option<&str>,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown operation `{name}`")))?),
    };
    let opts = VerifyOptions { tolerance, seed: ctx.seed(), fault, filter };
    ctx.stamp(out)?;
    let timed = !ctx.common.no_timestamps;
    let mut io_err = None;
    let rep = run_with_progress(&opts, |c| {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        let line = match &c.error {
            Some(e) => format!("{tag} {:<30} error: {e}", c.name),
            None => format!("{tag} {:<30} max_rel_err {:.3e}  coords {:>5}  kinks {:>2}", c.name, c.max_rel_error, c.coords, c.kinks_skipped),
        };
        let line = if timed && c.error.is_none() { format!("{line}  {:.2}s", c.seconds) } else { line };
        if let Err(e) = writeln!(out, "{line}") {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(CliError::Io(format!("writing report: {e}")));
    }
    if rep.checks.is_empty() {
        return Err(CliError::Usage("no check matches the filter".into()));
    }
    let failed: Vec<&str> = rep.failures().map(|c| c.name.as_str()).collect();
    emit(
        out,
        format_args!(
            "{} of {} checks passed (tolerance {:.0e}, worst {:.3e})\n",
            rep.checks.len() - failed.len(),
            rep.checks.len(),
            tolerance,
            rep.max_rel_error()
        ),
    )?;
    if let Some(p) = report {
        let lines = rep.checks.iter().map(|c| {
            let mut v = json!({
                "check": c.name,
                "passed": c.passed,
                "max_rel_error": if c.max_rel_error.is_finite() { json!(c.max_rel_error) } else { json!(null) },
                "coords": c.coords,
                "kinks_skipped": c.kinks_skipped,
            });
            if let Some(e) = &c.error {
                v["error"] = json!(e);
            }
            if timed {
                v["seconds"] = json!(c.seconds);
            }
            v
        });
        write_file(p, &json_lines(lines))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(format!("gradient check failed: {}", failed.join(", "))))
    }
}

// ── preprocess / phantoms ──────────────────────────────────────────────

fn preprocess(
    ctx: &Ctx,
    image: &Path,
    mask: Option<&Path>,
    target_depth: Option<usize>,
    id: Option<&str>,
    dir: &Path,
    out: &mut dyn Write,
) -> CliResult<()> {
    let target = target_depth.or(ctx.cfg.preprocess.target_depth);
    let id = id.map(str::to_string).unwrap_or_else(|| dataset::id_from_path(image));
    let raw = read_raw(image)?;
    match mask {
        Some(m) => {
            let pair = preprocess_pair(&id, &raw, &read_raw(m)?, target)?;
            dataset::write_pair(dir, &pair)?;
            emit(out, format_args!("{id}: {:?} -> {:?}, image and mask written to {}\n", raw.dims, pair.image.dims, dir.display()))
        }
        None => {
            let depth = target.unwrap_or(raw.depth());
            let vol = r2u3d_core::data::normalize(&resample_depth(&raw, depth)?);
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            write_internal(dataset::image_path(dir, &id), &vol)?;
            emit(out, format_args!("{id}: {:?} -> {:?}, image written to {}\n", raw.dims, vol.dims, dir.display()))
        }
    }
}

/// Reads a volume without normalising it.
fn read_raw(path: &Path) -> CliResult<Volume> {
    Ok(if dataset::is_metaimage(path) {
        r2u3d_core::data::read_metaimage(path)?
    } else {
        r2u3d_core::data::read_internal(path)?
    })
}

fn phantoms(ctx: &Ctx, count: usize, dims: Option<&[usize]>, noise: f64, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let mut pc = PhantomConfig { noise_std: noise, ..Default::default() };
    if let Some(&[d, h, w]) = dims {
        pc.dims = [d, h, w];
    }
    if pc.dims.contains(&0) || !noise.is_finite() || noise < 0.0 {
        return Err(CliError::Usage("phantom dims must be positive and noise finite and non-negative".into()));
    }
    for pair in phantom_set(count, &pc, ctx.seed()) {
        dataset::write_pair(dir, &pair)?;
    }
    emit(out, format_args!("wrote {count} phantoms of {:?} to {}\n", pc.dims, dir.display()))
}

// ── train ──────────────────────────────────────────────────────────────

struct TrainArgs {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    init: Option<PathBuf>,
    log: Option<PathBuf>,
    iterations: Option<usize>,
    checkpoint_every: Option<usize>,
}

fn train_cmd(ctx: &Ctx, a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let data = ctx.path(a.data.as_deref(), &ctx.cfg.paths.data, "data directory")?;
    let ckpt = ctx.path(a.checkpoint.as_deref(), &ctx.cfg.paths.checkpoint, "checkpoint path")?;
    let log_path = a.log.or_else(|| ctx.cfg.paths.out.clone()).unwrap_or_else(|| ckpt.with_extension("jsonl"));
    let every = a.checkpoint_every.or(ctx.cfg.checkpoint_every);
    if every == Some(0) {
        return Err(CliError::Usage("checkpoint_every must be at least 1".into()));
    }

    let seed = ctx.seed();
    let mut tc = ctx.cfg.train.clone();
    tc.seed = seed;
    tc.wall_time = !ctx.common.no_timestamps;
    if let Some(n) = a.iterations {
        tc.iterations = n;
    }
    let pool = dataset::load_dataset(&data)?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let model = match &a.init {
        Some(p) => read_checkpoint(p)?,
        None => Model::<f32>::build(&ctx.cfg.model_config(ctx.common.preset.as_deref())?, seed)?,
    };
    ctx.stamp(out)?;
    emit(
        out,
        format_args!(
            "training {:?} model ({} parameters) on {} scans: {} iterations of {} scans x {} epochs\n",
            model.config().variant,
            model.count_parameters(),
            pool.len(),
            tc.iterations,
            tc.sample_size,
            tc.epochs_per_iteration
        ),
    )?;
    let mut sink_err = None;
    let (model, log) = train::train_with(model, &pool, &tc, |r, m| {
        let line = format!("iter {:>4}  lr {:.1e}  loss {:.4}  scans {}", r.iteration, r.lr, r.mean_loss, r.scan_ids.join(","));
        if let Err(e) = writeln!(out, "{line}") {
            sink_err.get_or_insert(e);
        }
        if every.is_some_and(|n| (r.iteration + 1) % n == 0) {
            write_checkpoint(m, &ckpt)?;
        }
        Ok(())
    })?;
    if let Some(e) = sink_err {
        return Err(CliError::Io(format!("writing report: {e}")));
    }
    write_checkpoint(&model, &ckpt)?;
    write_file(&log_path, &log.to_jsonl())?;
    emit(
        out,
        format_args!("{} gradient steps; checkpoint {}; log {}\n", log.total_steps(), ckpt.display(), log_path.display()),
    )
}

// ── eval / segment ─────────────────────────────────────────────────────

fn load_model(ctx: &Ctx, flag: Option<&Path>) -> CliResult<Model<f32>> {
    Ok(read_checkpoint(ctx.path(flag, &ctx.cfg.paths.checkpoint, "checkpoint")?)?)
}

fn eval_cmd(
    ctx: &Ctx,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    threshold: Option<f64>,
    report: Option<&Path>,
    oracle: bool,
    out: &mut dyn Write,
) -> CliResult<()> {
    let tau = ctx.threshold(threshold)?;
    let scans = dataset::load_dataset(&ctx.path(data, &ctx.cfg.paths.data, "data directory")?)?;
    let rep = if oracle {
        evaluate(&OracleStub::new(&scans), &scans, tau)?
    } else {
        evaluate(&load_model(ctx, checkpoint)?, &scans, tau)?
    };
    ctx.stamp(out)?;
    emit(out, format_args!("{}", eval_table(&rep)))?;
    if let Some(p) = report.or(ctx.cfg.paths.out.as_deref()) {
        write_file(p, &eval_jsonl(&rep))?;
    }
    Ok(())
}

/// Per-scan rows plus a mean row, metrics at 4 decimals.
pub fn eval_table(rep: &EvalReport) -> String {
    let w = rep.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
    let mut s = format!("{:<w$}  {:>8}  {:>8}\n", "scan", "soft_dsc", format!("dsc@{}", rep.threshold));
    for r in &rep.rows {
        s += &format!("{:<w$}  {:>8.4}  {:>8.4}\n", r.id, r.soft_dsc, r.dsc);
    }
    match (rep.mean_soft_dsc(), rep.mean_dsc()) {
        (Some(a), Some(b)) => s += &format!("{:<w$}  {:>8.4}  {:>8.4}\n", "mean", a, b),
        _ => s += &format!("{:<w$}  {:>8}  {:>8}\n", "mean", "-", "-"),
    }
    s
}

/// One object per scan, then a summary object with the means.
pub fn eval_jsonl(rep: &EvalReport) -> String {
    let rows = rep.rows.iter().map(|r| json!({ "scan": r.id, "soft_dsc": r.soft_dsc, "dsc": r.dsc }));
    let mean = json!({
        "mean": { "soft_dsc": rep.mean_soft_dsc(), "dsc": rep.mean_dsc() },
        "scans": rep.rows.len(),
        "threshold": rep.threshold,
    });
    json_lines(rows.chain(std::iter::once(mean)))
}

struct SegmentArgs<'a> {
    scan: &'a Path,
    checkpoint: Option<&'a Path>,
    threshold: Option<f64>,
    target_depth: Option<usize>,
    out: &'a Path,
    probabilities: Option<&'a Path>,
    oracle_mask: Option<&'a Path>,
}

fn segment(ctx: &Ctx, a: SegmentArgs<'_>, out: &mut dyn Write) -> CliResult<()> {
    let tau = ctx.threshold(a.threshold)?;
    let mut image = dataset::read_scan(a.scan)?;
    if let Some(t) = a.target_depth.or(ctx.cfg.preprocess.target_depth) {
        image = resample_depth(&image, t)?;
    }
    let id = dataset::id_from_path(a.scan);
    let probs = match a.oracle_mask {
        Some(m) => {
            let mut stub = OracleStub::default();
            stub.insert(id.clone(), dataset::read_scan(m)?);
            stub.predict(&id, &image)?
        }
        None => load_model(ctx, a.checkpoint)?.predict(&id, &image)?,
    };
    let binary = threshold(&probs.to_tensor(), tau);
    let mask = Volume::from_tensor(&binary, image.spacing)?;
    for p in [Some(a.out), a.probabilities].into_iter().flatten() {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    write_internal(a.out, &mask)?;
    if let Some(p) = a.probabilities {
        write_internal(p, &probs)?;
    }
    let fg = mask.voxels.iter().filter(|&&v| v > 0.5).count();
    emit(
        out,
        format_args!("{id}: {fg} of {} voxels foreground at threshold {tau}; mask {}\n", mask.voxels.len(), a.out.display()),
    )
}

// ── smoke ──────────────────────────────────────────────────────────────

fn smoke(ctx: &Ctx, iterations: Option<usize>, out: &mut dyn Write) -> CliResult<()> {
    let mut sc = SmokeConfig { seed: ctx.seed(), ..SmokeConfig::default() };
    if let Some(n) = iterations {
        sc.train.iterations = n;
    }
    let r = train::overfit_smoke(&sc)?;
    emit(out, format_args!("baseline soft_dsc {:.4}\nfinal soft_dsc    {:.4}\nsteps {}\n", r.baseline_soft_dsc, r.final_soft_dsc, r.steps))?;
    if !ctx.common.no_timestamps {
        emit(out, format_args!("seconds {:.1}\n", r.seconds))?;
    }
    Ok(())
}
