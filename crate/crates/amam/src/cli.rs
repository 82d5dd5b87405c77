//! The `amam` command line. Exit codes: 0 success, 1 failed check or
//! invariant, 2 usage or IO error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use amam_core::eval::{evaluate, pr_curve};
use amam_core::train::TrainOptions;
use amam_core::{Amam, AmamConfig, FeaturePyramid, FusionMode, LrSchedule, ParamStore};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::format::csv_num;
use crate::{ablate, amtn, config, detections, params, report, suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "amam",
    version,
    about = "Adaptive multi-hierarchical attention: verification and tooling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite and print one line per invariant.
    Check,
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Added to every analytic gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Run AMAM over a pyramid of AMTN files. Parameters are held at f32,
    /// the precision of parameter files.
    Forward {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding level0.amtn, level1.amtn, ...
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Parameter directory to load instead of seeded initialization.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Write the parameters used to this directory.
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the `recall,precision` curve at --iou here.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Toy-train every ablation cell and emit `heads,fusion,me,aa,final_loss`.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16])]
        heads: Vec<usize>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "adaptive,average,add,concat"
        )]
        fusion: Vec<String>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Emit the learning-rate curve, one row per iteration.
    Schedule {
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long)]
        iters_per_epoch: usize,
        #[arg(long, default_value_t = 3)]
        warmup_epochs: usize,
        #[arg(long, value_enum, default_value_t = Emit::Csv)]
        emit: Emit,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// A failed command: `Fail` maps to exit 1, `Usage` to exit 2.
#[derive(Debug)]
pub enum CliError {
    Fail(String),
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Fail(_) => EXIT_FAIL,
            CliError::Usage(_) => EXIT_USAGE,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Fail(m) | CliError::Usage(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn write_or_print(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => out.write_all(text.as_bytes()).map_err(usage),
    }
}

/// Runs a parsed command, writing reports to `out`; returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Check => cmd_check(out),
        Command::Gradcheck { seed, eps, corrupt } => cmd_gradcheck(out, seed, eps, corrupt),
        Command::Forward {
            config,
            input,
            output,
            params,
            save_params,
        } => cmd_forward(
            out,
            &config,
            &input,
            &output,
            params.as_deref(),
            save_params.as_deref(),
        ),
        Command::Eval {
            pred,
            gt,
            iou,
            conf,
            report,
            pr_csv,
        } => cmd_eval(
            out,
            &pred,
            &gt,
            iou,
            conf,
            report.as_deref(),
            pr_csv.as_deref(),
        ),
        Command::Ablate {
            heads,
            fusion,
            steps,
            seed,
            output,
        } => cmd_ablate(out, err, &heads, &fusion, steps, seed, output.as_deref()),
        Command::Schedule {
            epochs,
            iters_per_epoch,
            warmup_epochs,
            emit: Emit::Csv,
            output,
        } => cmd_schedule(
            out,
            epochs,
            iters_per_epoch,
            warmup_epochs,
            output.as_deref(),
        ),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = out.write_all(rendered.as_bytes());
            } else {
                let _ = err.write_all(rendered.as_bytes());
            }
            code
        }
    }
}

fn status(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn cmd_check(out: &mut dyn Write) -> Result<(), CliError> {
    let results = suite::run_checks();
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        writeln!(out, "{}  {:width$}  {}", status(r.passed), r.name, r.detail).map_err(usage)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(
        out,
        "{} of {} invariants passed",
        results.len() - failed,
        results.len()
    )
    .map_err(usage)?;
    if failed > 0 {
        return Err(CliError::Fail(format!("{failed} invariant(s) failed")));
    }
    Ok(())
}

pub fn cmd_gradcheck(
    out: &mut dyn Write,
    seed: u64,
    eps: f64,
    corrupt: Option<f64>,
) -> Result<(), CliError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(usage(format!("--eps must be a positive number, got {eps}")));
    }
    writeln!(out, "gradcheck seed={seed} eps={eps:e}").map_err(usage)?;
    let results = suite::run_gradchecks(seed, eps, corrupt).map_err(usage)?;
    for g in &results {
        let class = match g.class {
            suite::TargetClass::Primitive => "primitive",
            suite::TargetClass::Composite => "composite",
        };
        writeln!(
            out,
            "{}  {:<10} {:<9}  max_rel_error={:.3e}  tol={:e}  coords={}  worst={}",
            status(g.passed()),
            g.target,
            class,
            g.report.max_rel_error,
            g.class.tolerance(),
            g.report.coordinates,
            g.report.worst
        )
        .map_err(usage)?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|g| !g.passed())
        .map(|g| g.target)
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Fail(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ShapeEntry {
    file: String,
    shape: [usize; 4],
}

#[derive(Debug, Serialize)]
struct ShapeManifest {
    config: AmamConfig,
    levels: Vec<ShapeEntry>,
}

pub fn level_file(i: usize) -> String {
    format!("level{i}.amtn")
}

pub fn cmd_forward(
    out: &mut dyn Write,
    config_path: &Path,
    input: &Path,
    output: &Path,
    params_dir: Option<&Path>,
    save_params: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = config::load_config(config_path).map_err(usage)?;
    let mut maps = Vec::with_capacity(cfg.levels.len());
    for i in 0..cfg.levels.len() {
        maps.push(amtn::read(&input.join(level_file(i))).map_err(usage)?);
    }
    let extra = input.join(level_file(cfg.levels.len()));
    if extra.exists() {
        return Err(CliError::Fail(format!(
            "{}: config describes {} levels but the input has more",
            extra.display(),
            cfg.levels.len()
        )));
    }
    for (i, (m, &c)) in maps.iter().zip(&cfg.levels).enumerate() {
        if m.shape().c != c {
            return Err(CliError::Fail(format!(
                "{}: {} channels, config expects {c}",
                input.join(level_file(i)).display(),
                m.shape().c
            )));
        }
    }
    let pyramid = FeaturePyramid::new(maps)
        .map_err(|e| CliError::Fail(format!("{}: {e}", input.display())))?;

    let mut store = ParamStore::new();
    let amam = Amam::new(&mut store, "amam", &cfg).map_err(usage)?;
    match params_dir {
        Some(dir) => {
            params::load_params(dir, &mut store).map_err(usage)?;
        }
        None => params::round_to_f32(&mut store),
    }
    let enhanced = amam
        .apply(&store, &pyramid)
        .map_err(|e| CliError::Fail(e.to_string()))?;

    fs::create_dir_all(output).map_err(|e| usage(format!("{}: {e}", output.display())))?;
    let mut levels = Vec::with_capacity(enhanced.maps.len());
    for (i, m) in enhanced.maps.iter().enumerate() {
        let file = level_file(i);
        amtn::write(m, &output.join(&file)).map_err(usage)?;
        writeln!(out, "{file}  {}", m.shape()).map_err(usage)?;
        levels.push(ShapeEntry {
            file,
            shape: m.shape().dims(),
        });
    }
    let manifest = ShapeManifest {
        config: cfg,
        levels,
    };
    let mpath = output.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&mpath, text).map_err(|e| usage(format!("{}: {e}", mpath.display())))?;
    if let Some(dir) = save_params {
        params::save_params(dir, &store, &amam).map_err(usage)?;
    }
    Ok(())
}

pub fn cmd_eval(
    out: &mut dyn Write,
    pred: &Path,
    gt: &Path,
    iou: f64,
    conf: f64,
    report_path: Option<&Path>,
    pr_path: Option<&Path>,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&iou) || iou == 0.0 {
        return Err(usage(format!("--iou must lie in (0, 1], got {iou}")));
    }
    if !(0.0..=1.0).contains(&conf) {
        return Err(usage(format!("--conf must lie in [0, 1], got {conf}")));
    }
    let p = detections::load(pred)
        .map_err(usage)?
        .to_records(pred)
        .map_err(usage)?;
    let g = detections::load(gt)
        .map_err(usage)?
        .to_records(gt)
        .map_err(usage)?;
    let images = detections::merge(&p, &g);
    let r = evaluate(&images, iou, conf).map_err(|e| usage(format!("{}: {e}", gt.display())))?;
    let json = report::report_json(&r);
    match report_path {
        Some(path) => {
            write_or_print(out, Some(path), &json)?;
            out.write_all(report::report_text(&r).as_bytes())
                .map_err(usage)?;
        }
        None => out.write_all(json.as_bytes()).map_err(usage)?,
    }
    if let Some(path) = pr_path {
        let curve = pr_curve(&images, iou).map_err(usage)?;
        write_or_print(out, Some(path), &report::pr_csv(&curve))?;
    }
    Ok(())
}

pub fn cmd_ablate(
    out: &mut dyn Write,
    err: &mut dyn Write,
    heads: &[usize],
    fusion: &[String],
    steps: usize,
    seed: u64,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let base = AmamConfig::default();
    if heads.is_empty() {
        return Err(usage("--heads must list at least one head count"));
    }
    ablate::validate_heads(&base, heads).map_err(|e| usage(format!("invalid head count: {e}")))?;
    let modes = fusion
        .iter()
        .map(|s| FusionMode::parse(s).ok_or_else(|| usage(format!("unknown fusion mode {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err(usage("--fusion must list at least one mode"));
    }
    if steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    let cells = ablate::grid(heads, &modes);
    let _ = writeln!(err, "training {} cells for {steps} steps each", cells.len());
    let rows = ablate::run(&base, &cells, steps, seed, &TrainOptions::default())
        .map_err(|e| CliError::Fail(e.to_string()))?;
    write_or_print(out, output, &ablate::to_csv(&rows))?;
    if let Some(bad) = rows.iter().find(|r| !r.final_loss.is_finite()) {
        return Err(CliError::Fail(format!(
            "non-finite loss in cell {:?}",
            bad.cell
        )));
    }
    Ok(())
}

pub fn schedule_csv(schedule: &LrSchedule) -> String {
    let mut s = String::from("iter,lr,loss\n");
    for i in 0..=schedule.total_iters {
        let lr = schedule.lr_at(i).expect("iteration within the schedule");
        s += &format!("{i},{},\n", csv_num(lr));
    }
    s
}

pub fn cmd_schedule(
    out: &mut dyn Write,
    epochs: usize,
    iters_per_epoch: usize,
    warmup_epochs: usize,
    output: Option<&Path>,
) -> Result<(), CliError> {
    if epochs == 0 || iters_per_epoch == 0 {
        return Err(usage("--epochs and --iters-per-epoch must be positive"));
    }
    let schedule =
        LrSchedule::from_epochs(epochs, iters_per_epoch, warmup_epochs).map_err(usage)?;
    write_or_print(out, output, &schedule_csv(&schedule))
}
