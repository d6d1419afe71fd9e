//! The `iat` command line: `train`, `eval`, `compare` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage, config or input error,
//! 3 divergence.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attack::AttackConfig;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    accuracy_curve, curve_difference, natural_accuracy, parse_grid, robust_accuracy,
    write_curve_csv, write_difference_csv, CurvePoint, CurveSpec,
};
use crate::gradcheck::run_suite;
use crate::model::{Classifier, NetworkState};
use crate::trace::OpKind;
use crate::trainer::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable that replaces `run.seed`.
pub const SEED_ENV: &str = "IAT_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "iat",
    version,
    about = "Inverse adversarial training on a small autodiff engine"
)]
struct Cli {
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and epoch report.
    Train(TrainArgs),
    /// Natural and robust accuracy of a checkpoint, optionally over an ε grid.
    Eval(EvalArgs),
    /// Accuracy curves of two checkpoints and their difference.
    Compare(CompareArgs),
    /// Finite-difference check of every primitive and objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set objective.lambda=3.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CurveArgs {
    /// ε grid `start:stop:step`; negative radii run inverse perturbations.
    #[arg(long, allow_hyphen_values = true)]
    curve: Option<String>,
    /// Add accuracies of the low-loss and high-loss halves.
    #[arg(long)]
    groups: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Attack radius; shorthand for `--set eval.epsilon=E`.
    #[arg(long, allow_hyphen_values = true)]
    eps: Option<f32>,
    #[command(flatten)]
    curve: CurveArgs,
    /// Output directory; the curve goes to stdout without it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    curve: CurveArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First seed; the suite runs `seeds` consecutive seeds from here.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Perturb one primitive's backward rule.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } | Error::TrainingDiverged { .. } => EXIT_DIVERGED,
        _ => EXIT_INPUT,
    }
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    if cli.threads == 0 {
        let _ = writeln!(err, "error: --threads must be at least 1");
        return EXIT_INPUT;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_INPUT;
        }
    };
    let threads = cli.threads;
    let result = pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, threads, out),
        Command::Compare(a) => cmd_compare(a, threads, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            EXIT_CHECK
        }
        Err(Failure::Lib(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_config(args: &ConfigArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.set("run.seed", seed.trim())
            .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn echo(out: &mut dyn Write, lines: &str) -> Result<()> {
    let stdout = Path::new("<stdout>");
    writeln!(out, "# effective configuration").map_err(io_err(stdout))?;
    write!(out, "{lines}").map_err(io_err(stdout))?;
    writeln!(out, "#").map_err(io_err(stdout))
}

/// Writes `bytes` to `dir/name` and records the relative path.
fn emit(dir: &Path, name: &str, bytes: &[u8], produced: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    produced.push(name.to_string());
    Ok(())
}

fn write_manifest(dir: &Path, produced: &[String]) -> Result<()> {
    let mut text = String::new();
    for p in produced {
        text.push_str(p);
        text.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(io_err(&path))
}

fn csv<F>(write: F) -> Vec<u8>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> Outcome {
    let cfg = resolve_config(&args.cfg, &[])?;
    echo(out, &format!("{cfg}output.dir = {}\n", args.out.display()))?;
    let (train_set, test_set) = cfg.datasets()?;
    let spec = cfg.network_spec(&train_set)?;
    let ckpt_dir = args.out.join("checkpoints");
    let tc = cfg.train_config(Some(&ckpt_dir))?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    if tc.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    }
    let outcome = train(&train_set, spec, &tc)?;

    let mut produced = Vec::new();
    emit(
        &args.out,
        "config.txt",
        cfg.to_string().as_bytes(),
        &mut produced,
    )?;
    let model_path = args.out.join("model.ckpt");
    checkpoint::save(&outcome.state, outcome.bank.as_ref(), &model_path)?;
    produced.push("model.ckpt".into());
    if tc.checkpoint_every > 0 {
        let mut names: Vec<String> = fs::read_dir(&ckpt_dir)
            .map_err(io_err(&ckpt_dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".ckpt"))
            .collect();
        names.sort();
        produced.extend(names.into_iter().map(|n| format!("checkpoints/{n}")));
    }
    let report = csv(|b| outcome.report.write_csv(b, cfg.timing()));
    emit(&args.out, "report.csv", &report, &mut produced)?;
    if cfg.dump_momentum() {
        if let Some(store) = &outcome.store {
            emit(
                &args.out,
                "momentum.csv",
                &csv(|b| store.write_csv(b)),
                &mut produced,
            )?;
        }
    }
    write_manifest(&args.out, &produced)?;

    let attack = cfg.eval_attack(test_set.domain.clamp())?;
    let nat = natural_accuracy(&outcome.state, &test_set)?;
    let rob = robust_accuracy(&outcome.state, &test_set, &attack, cfg.seed())?;
    let stdout = Path::new("<stdout>");
    writeln!(out, "natural_accuracy = {nat:.4}").map_err(io_err(stdout))?;
    writeln!(out, "robust_accuracy = {rob:.4} (eps = {})", attack.epsilon)
        .map_err(io_err(stdout))?;
    Ok(())
}

fn check_compatible(model: &NetworkState, data: &Dataset, what: &str) -> Result<()> {
    if model.input_shape() != data.input_shape() || model.num_classes() != data.classes {
        return Err(Error::Config(format!(
            "{what} expects inputs {:?} with {} classes, data has {:?} with {}",
            model.input_shape(),
            model.num_classes(),
            data.input_shape(),
            data.classes
        )));
    }
    Ok(())
}

fn curve_spec(cfg: &RunConfig, args: &CurveArgs, grid: &str) -> Result<CurveSpec> {
    let eval = cfg.eval_attack(None)?;
    let ratio = if eval.epsilon > 0.0 {
        eval.step_size / eval.epsilon
    } else {
        0.25
    };
    let template = AttackConfig {
        epsilon: 1.0,
        step_size: ratio,
        ..eval
    };
    let spec = CurveSpec::new(parse_grid(grid)?, template, cfg.seed()).with_groups(args.groups);
    spec.validate()?;
    Ok(spec)
}

fn curve_echo(args: &CurveArgs) -> String {
    format!(
        "curve.grid = {}\ncurve.groups = {}\n",
        args.curve.as_deref().unwrap_or("none"),
        args.groups
    )
}

fn cmd_eval(args: EvalArgs, threads: usize, out: &mut dyn Write) -> Outcome {
    let extra: Vec<(&str, String)> = args
        .eps
        .map(|e| ("eval.epsilon", e.to_string()))
        .into_iter()
        .collect();
    let cfg = resolve_config(&args.cfg, &extra)?;
    echo(
        out,
        &format!(
            "{cfg}checkpoint = {}\n{}threads = {threads}\n",
            args.checkpoint.display(),
            curve_echo(&args.curve)
        ),
    )?;
    let (state, _) = checkpoint::load(&args.checkpoint)?;
    let (_, test) = cfg.datasets()?;
    check_compatible(&state, &test, "checkpoint")?;
    let spec = match &args.curve.curve {
        Some(g) => Some(curve_spec(&cfg, &args.curve, g)?),
        None => None,
    };

    let attack = cfg.eval_attack(test.domain.clamp())?;
    let nat = natural_accuracy(&state, &test)?;
    let rob = robust_accuracy(&state, &test, &attack, cfg.seed())?;
    let stdout = Path::new("<stdout>");
    writeln!(out, "natural_accuracy = {nat:.4}").map_err(io_err(stdout))?;
    writeln!(out, "robust_accuracy = {rob:.4} (eps = {})", attack.epsilon)
        .map_err(io_err(stdout))?;

    if let Some(spec) = spec {
        let curve = accuracy_curve(&state, &test, &spec)?;
        let bytes = csv(|b| write_curve_csv(b, &curve));
        match &args.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let mut produced = Vec::new();
                emit(dir, "curve.csv", &bytes, &mut produced)?;
                write_manifest(dir, &produced)?;
            }
            None => out.write_all(&bytes).map_err(io_err(stdout))?,
        }
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs, threads: usize, out: &mut dyn Write) -> Outcome {
    let cfg = resolve_config(&args.cfg, &[])?;
    let grid = args
        .curve
        .curve
        .clone()
        .unwrap_or_else(|| "0:0.1:0.025".into());
    echo(
        out,
        &format!(
            "{cfg}a = {}\nb = {}\ncurve.grid = {grid}\ncurve.groups = {}\nthreads = {threads}\n",
            args.a.display(),
            args.b.display(),
            args.curve.groups
        ),
    )?;
    let (a, _) = checkpoint::load(&args.a)?;
    let (b, _) = checkpoint::load(&args.b)?;
    if a.input_shape() != b.input_shape() || a.num_classes() != b.num_classes() {
        return Err(Error::Config(format!(
            "incompatible checkpoints: {:?}/{} classes vs {:?}/{} classes",
            a.input_shape(),
            a.num_classes(),
            b.input_shape(),
            b.num_classes()
        ))
        .into());
    }
    let (_, test) = cfg.datasets()?;
    check_compatible(&a, &test, "checkpoint a")?;
    let spec = curve_spec(&cfg, &args.curve, &grid)?;
    let curve_a = accuracy_curve(&a, &test, &spec)?;
    let curve_b = accuracy_curve(&b, &test, &spec)?;
    let diff = curve_difference(&curve_a, &curve_b)?;

    let stdout = Path::new("<stdout>");
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let mut produced = Vec::new();
            emit(
                dir,
                "curve_a.csv",
                &csv(|w| write_curve_csv(w, &curve_a)),
                &mut produced,
            )?;
            emit(
                dir,
                "curve_b.csv",
                &csv(|w| write_curve_csv(w, &curve_b)),
                &mut produced,
            )?;
            emit(
                dir,
                "difference.csv",
                &csv(|w| write_difference_csv(w, &diff)),
                &mut produced,
            )?;
            write_manifest(dir, &produced)?;
        }
        None => {
            let table = side_by_side(&curve_a, &curve_b, &diff);
            out.write_all(table.as_bytes()).map_err(io_err(stdout))?;
        }
    }
    Ok(())
}

fn side_by_side(a: &[CurvePoint], b: &[CurvePoint], diff: &[(f32, f32)]) -> String {
    let mut s = String::from("epsilon,accuracy_a,accuracy_b,delta\n");
    for ((p, q), (e, d)) in a.iter().zip(b).zip(diff) {
        s.push_str(&format!("{e},{},{},{d}\n", p.accuracy, q.accuracy));
    }
    s
}

fn cmd_gradcheck(args: GradcheckArgs, out: &mut dyn Write) -> Outcome {
    let fault = match &args.inject_fault {
        Some(name) => Some(
            OpKind::parse(name)
                .ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))?,
        ),
        None => None,
    };
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let listed: Vec<String> = seeds.iter().map(u64::to_string).collect();
    echo(
        out,
        &format!(
            "seeds = {}\nstep = {}\ntolerance = {}\n",
            listed.join(","),
            crate::gradcheck::STEP,
            crate::gradcheck::TOLERANCE
        ),
    )?;
    let report = run_suite(&seeds, fault)?;
    let stdout = Path::new("<stdout>");
    write!(out, "{report}").map_err(io_err(stdout))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(report.failing().join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("iat").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_args(&["frobnicate"]).0, EXIT_INPUT);
        assert_eq!(run_args(&["train"]).0, EXIT_INPUT);
        assert_eq!(run_args(&["--threads", "0", "gradcheck"]).0, EXIT_INPUT);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("gradcheck"));
        assert!(!out.contains("inject-fault"));
    }

    #[test]
    fn missing_config_is_an_input_error() {
        let (code, _, err) = run_args(&[
            "train",
            "--config",
            "/nonexistent/run.cfg",
            "--out",
            "/tmp/x",
        ]);
        assert_eq!(code, EXIT_INPUT);
        assert!(err.contains("nonexistent"));
    }

    #[test]
    fn divergence_maps_to_three() {
        let e = Error::TrainingDiverged {
            epoch: 1,
            batch: 0,
            reason: "nan".into(),
        };
        assert_eq!(exit_code(&e), EXIT_DIVERGED);
        assert_eq!(exit_code(&Error::Truncated("x")), EXIT_INPUT);
    }
}
