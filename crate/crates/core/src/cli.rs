//! Command-line front end. Every command writes its resolved configuration
//! as `config.toml` next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::ablation::run_grid;
use crate::config::{ConfigError, RunConfig};
use crate::datagen::{self, DatasetError, DatasetManifest};
use crate::evaluate::{self, evaluate, EvalError, EvalReport};
use crate::gradcheck::run_suite;
use crate::kernel::OpKind;
use crate::objective::ModelParams;
use crate::trainer::{Checkpoint, CheckpointError, TrainError, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "weakpair",
    version,
    about = "Weak-pair metric learning for cross-modal retrieval"
)]
pub struct Cli {
    /// TOML config with [gen], [split], [train], [eval], [ablate], [gradcheck] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Sets gen.seed and train.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and write identity-disjoint train/test splits.
    Gen,
    /// Train on a dataset; writes checkpoint.json and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a test split; writes metrics and curves.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training split, to warn about identities shared with the test split.
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Run an ablation grid over the configured seeds; writes ablation.csv.
    Ablate {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
    },
    /// Check every backward rule and loss against central differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Re-emit PR, risk-coverage, uncertainty and margin data from a checkpoint.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Failure categories, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            DatasetError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write(&out.join("config.toml"), &cfg.to_toml())
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    cfg.gen.validate()?;
    let full = datagen::generate(&cfg.gen)?;
    let (train, test) = datagen::split(&full, cfg.split.train_fraction, cfg.split.seed)?;
    prepare_out(out, cfg)?;
    datagen::write(&train, &out.join("train.dataset"))?;
    datagen::write(&test, &out.join("test.dataset"))?;
    Ok(format!(
        "wrote {} train and {} test records to {}",
        train.records.len(),
        test.records.len(),
        out.display()
    ))
}

fn cmd_train(cfg: &RunConfig, out: &Path, data: &Path, resume: Option<&Path>) -> Result<String, CliError> {
    cfg.train.validate()?;
    let ds = datagen::read(data)?;
    let resumed;
    let mut t = match resume {
        Some(p) => {
            resumed = Checkpoint::load(p)?;
            Trainer::resume(&resumed, &ds)?
        }
        None => Trainer::new(cfg.train.clone(), &ds)?,
    };
    let effective = RunConfig {
        train: t.config().clone(),
        ..cfg.clone()
    };
    prepare_out(out, &effective)?;
    let result = t.run();
    // the log is written even when a step fails
    write(&out.join("loss.csv"), &t.log().to_csv())?;
    if let Err(TrainError::NonFinite(diag)) = &result {
        let dump = serde_json::to_string_pretty(diag).expect("diagnostic serializes");
        write(&out.join("diagnostic.json"), &dump)?;
    }
    result?;
    t.checkpoint().save(&out.join("checkpoint.json"))?;
    eprintln!("trained {} steps in {:.2?}", t.step_index(), t.log().elapsed);
    Ok(format!(
        "checkpoint at step {} written to {}",
        t.step_index(),
        out.display()
    ))
}

fn load_for_eval(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, DatasetManifest), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = datagen::read(data)?;
    let want = (ck.dims.raw_image, ck.dims.raw_text);
    let got = (ds.gen_config.raw_dim_image, ds.gen_config.raw_dim_text);
    if want != got {
        return Err(CliError::Runtime(format!(
            "checkpoint expects raw dims {want:?}, dataset has {got:?}"
        )));
    }
    Ok((ck, ds))
}

fn report(cfg: &RunConfig, ck: &Checkpoint, ds: &DatasetManifest) -> Result<EvalReport, CliError> {
    let init = ModelParams::init(ck.config.seed, &ck.dims, ck.config.tau_init);
    let init = cfg.eval.compare_init.then_some(&init);
    Ok(evaluate(&ck.params, init, ds, ck.config.mapping, &cfg.eval)?)
}

fn write_curves(out: &Path, r: &EvalReport) -> Result<(), CliError> {
    write(&out.join("pr_curve.csv"), &evaluate::pr_csv(r))?;
    write(&out.join("risk_coverage.csv"), &evaluate::risk_coverage_csv(r))?;
    write(&out.join("uncertainty.csv"), &evaluate::uncertainty_csv(r))?;
    write(&out.join("margins.csv"), &evaluate::margin_hist_csv(r))
}

fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data: &Path,
    train_data: Option<&Path>,
) -> Result<String, CliError> {
    let (ck, ds) = load_for_eval(checkpoint, data)?;
    if let Some(p) = train_data {
        let overlap = evaluate::identity_overlap(&datagen::read(p)?, &ds);
        if !overlap.is_empty() {
            eprintln!(
                "warning: {} identities appear in both the train and test splits",
                overlap.len()
            );
        }
    }
    let r = report(cfg, &ck, &ds)?;
    prepare_out(out, cfg)?;
    write(&out.join("metrics.csv"), &evaluate::metrics_csv(&r))?;
    write_curves(out, &r)?;
    let mut msg = String::new();
    for (k, m) in &r.recall {
        let _ = write!(msg, "R@{k} {:.4}  ", m.value);
    }
    let _ = write!(msg, "mAP {:.4}", r.map.value);
    Ok(msg)
}

fn cmd_diag(cfg: &RunConfig, out: &Path, checkpoint: &Path, data: &Path) -> Result<String, CliError> {
    let (ck, ds) = load_for_eval(checkpoint, data)?;
    let r = report(cfg, &ck, &ds)?;
    prepare_out(out, cfg)?;
    write_curves(out, &r)?;
    Ok(format!("diagnostics written to {}", out.display()))
}

fn cmd_ablate(cfg: &RunConfig, out: &Path, train: &Path, test: &Path) -> Result<String, CliError> {
    cfg.train.validate()?;
    if cfg.ablate.seeds.is_empty() {
        return Err(CliError::Config("ablate.seeds is empty".into()));
    }
    let tr = datagen::read(train)?;
    let te = datagen::read(test)?;
    prepare_out(out, cfg)?;
    let res = run_grid(&cfg.ablate, &cfg.train, &tr, &te, &cfg.eval, |run| match &run.outcome {
        Ok(m) => eprintln!("{} seed {}: mAP {:.4}", run.cell.id, run.seed, m.map),
        Err(e) => eprintln!("{} seed {}: failed: {e}", run.cell.id, run.seed),
    });
    write(&out.join("ablation.csv"), &res.to_csv())?;
    let failed = res.failures().len();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} cells failed; see ablation.csv",
            res.runs.len()
        )));
    }
    Ok(format!(
        "{} runs written to {}",
        res.runs.len(),
        out.join("ablation.csv").display()
    ))
}

fn cmd_gradcheck(cfg: &RunConfig, out: &Path, inject: Option<&str>) -> Result<String, CliError> {
    let fault = inject
        .map(|s| s.parse::<OpKind>())
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let gc = &cfg.gradcheck;
    if !(1e-7..=1e-3).contains(&gc.eps) {
        return Err(CliError::Config(format!(
            "gradcheck.eps must lie in [1e-7, 1e-3], got {}",
            gc.eps
        )));
    }
    if gc.batch < 3 {
        return Err(CliError::Config("gradcheck.batch must be at least 3".into()));
    }
    prepare_out(out, cfg)?;
    let s = run_suite(gc, fault).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut csv = String::from("kind,name,points,max_rel_error,tol,status\n");
    let mut text = String::new();
    let status = |ok: bool| if ok { "pass" } else { "FAIL" };
    for o in &s.ops {
        let _ = writeln!(
            csv,
            "op,{},1,{:e},{:e},{}",
            o.op,
            o.max_rel_error,
            o.tol,
            status(o.passed())
        );
    }
    for l in &s.losses {
        let _ = writeln!(
            csv,
            "loss,{},{},{:e},{:e},{}",
            l.loss.name(),
            l.points,
            l.max_rel_error,
            l.tol,
            status(l.passed())
        );
        let _ = writeln!(
            text,
            "{:<6} max rel err {:.3e} over {} points  {}",
            l.loss.name(),
            l.max_rel_error,
            l.points,
            status(l.passed())
        );
    }
    let sg_ok = s.stop_gradient_mismatches == 0;
    let _ = writeln!(
        csv,
        "stop_gradient,uitc,{},{},0,{}",
        s.stop_gradient_instances,
        s.stop_gradient_mismatches,
        status(sg_ok)
    );
    let _ = writeln!(
        text,
        "stop-gradient: {} of {} instances differ  {}",
        s.stop_gradient_mismatches,
        s.stop_gradient_instances,
        status(sg_ok)
    );
    write(&out.join("gradcheck.csv"), &csv)?;
    if s.passed() {
        Ok(text.trim_end().to_string())
    } else {
        let ops: Vec<String> = s.failing_ops().iter().map(|o| o.to_string()).collect();
        let _ = write!(
            text,
            "failing ops: {}",
            if ops.is_empty() { "none".into() } else { ops.join(", ") }
        );
        Err(CliError::Runtime(text))
    }
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, out),
        Command::Train { data, resume } => cmd_train(&cfg, out, data, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            train_data,
        } => cmd_eval(&cfg, out, checkpoint, data, train_data.as_deref()),
        Command::Ablate { train_data, test_data } => cmd_ablate(&cfg, out, train_data, test_data),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(&cfg, out, inject_fault.as_deref()),
        Command::Diag { checkpoint, data } => cmd_diag(&cfg, out, checkpoint, data),
    }
}

/// Parses arguments, runs, prints the outcome, and maps it to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
