//! Command-line front end: `rain simulate | train | evaluate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{RainError, Result};
use crate::generator::PredictionMode;
use crate::kv::KvDoc;
use crate::pipeline::{
    evaluate_run, load_pretrained, pretrain_encoder, pretrain_generator, run_ablation, run_formal_training,
    run_pretraining, Ablation, Dataset, RunDir, TrainConfig,
};
use crate::sim::{generate_dataset, DatasetSizes, ParticleConfig};

/// Environment variable consulted when no `--seed` flag is given.
pub const SEED_ENV: &str = "RAIN_SEED";

#[derive(Debug, Parser)]
#[command(name = "rain", version, about = "Relation-aware multi-agent trajectory forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a charged-particle dataset.
    Simulate(SimulateArgs),
    /// Pretrain, run the formal stage, or run an ablation.
    Train(TrainArgs),
    /// Evaluate a trained run on the test split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// key=value config file layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single key=value override, repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed; falls back to $RAIN_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Overrides {
    /// The layered override document: file, then `--set`, then the seed.
    fn document(&self) -> Result<KvDoc> {
        let mut doc = match &self.config {
            Some(p) => KvDoc::read(p)?,
            None => KvDoc::new(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| RainError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            doc.set(k.trim(), v.trim());
        }
        if let Some(seed) = resolve_seed(self.seed)? {
            doc.set("seed", seed);
        }
        Ok(doc)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DatasetSizes::DESK.train)]
    pub train: usize,
    #[arg(long, default_value_t = DatasetSizes::DESK.val)]
    pub val: usize,
    #[arg(long, default_value_t = DatasetSizes::DESK.test)]
    pub test: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pretrain,
    Formal,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    /// Defaults to `all`, or to whatever an ablation still needs.
    #[arg(long, value_enum)]
    pub stage: Option<Stage>,
    /// true+soft, full+soft, hybrid_static, hybrid_dynamic or supervised.
    #[arg(long)]
    pub ablation: Option<String>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Static,
    Dynamic,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Static)]
    pub mode: Mode,
    /// Re-inference interval in dynamic mode; defaults to the run's `eval.dynamic_tau`.
    #[arg(long)]
    pub tau: Option<usize>,
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| RainError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Only particle settings are accepted as overrides.
fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut doc = KvDoc::new();
    ParticleConfig::default().to_kv(&mut doc);
    let known = doc.keys().map(str::to_string).collect();
    let over = args.overrides.document()?;
    over.reject_unknown(&known)?;
    let config = ParticleConfig::from_kv(&over)?;
    let sizes = DatasetSizes {
        train: args.train,
        val: args.val,
        test: args.test,
    };
    let seed = config.seed;
    let handle = generate_dataset(&config, sizes, seed, &args.out)?;
    log::info!(
        "wrote {}/{}/{} cases to {} (seed {seed})",
        handle.sizes.train,
        handle.sizes.val,
        handle.sizes.test,
        args.out.display()
    );
    Ok(())
}

/// Defaults, then the run's echoed config, then the command's overrides.
fn train_config(run: &Path, over: &KvDoc, data: &Dataset) -> Result<TrainConfig> {
    let mut doc = KvDoc::new();
    let echoed = run.join("config.txt");
    if echoed.exists() {
        doc.merge(&KvDoc::read(&echoed)?);
    }
    doc.merge(over);
    TrainConfig::from_kv(&doc, &data.handle.config)
}

fn train(args: &TrainArgs) -> Result<()> {
    let ablation: Option<Ablation> = args.ablation.as_deref().map(str::parse).transpose()?;
    let data = Dataset::open(&args.data)?;
    let cfg = train_config(&args.run, &args.overrides.document()?, &data)?;
    let run = RunDir::create(&args.run)?;
    cfg.to_kv().write(&run.config_path())?;

    match args.stage {
        Some(Stage::Pretrain) => {
            run_pretraining(&data, &cfg, &run)?;
        }
        Some(Stage::Formal) => {
            run_formal_training(&data, &load_pretrained(&run)?, &cfg, &run, None)?;
        }
        Some(Stage::All) => {
            let pre = run_pretraining(&data, &cfg, &run)?;
            run_formal_training(&data, &pre, &cfg, &run, None)?;
        }
        None if ablation.is_none() => {
            let pre = run_pretraining(&data, &cfg, &run)?;
            run_formal_training(&data, &pre, &cfg, &run, None)?;
        }
        // An ablation alone trains only what it still lacks.
        None => {
            let a = ablation.expect("checked above");
            if !run.checkpoint("gmp").exists() {
                pretrain_encoder(&data, &cfg, &run)?;
            }
            if a != Ablation::Supervised && !run.checkpoint("generator_pretrained").exists() {
                pretrain_generator(&data, &cfg, &run)?;
            }
            let hybrid = matches!(a, Ablation::HybridStatic | Ablation::HybridDynamic);
            if hybrid && !(run.checkpoint("generator").exists() && run.checkpoint("policy").exists()) {
                run_formal_training(&data, &load_pretrained(&run)?, &cfg, &run, None)?;
            }
        }
    }
    if let Some(a) = ablation {
        let report = run_ablation(a, &data, &cfg, &run)?;
        print!("{report}");
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let run = RunDir::open(&args.run)?;
    let data = Dataset::open(&args.data)?;
    let cfg = train_config(&args.run, &KvDoc::new(), &data)?;
    let mode = match args.mode {
        Mode::Static => PredictionMode::Static,
        Mode::Dynamic => {
            let tau = args.tau.unwrap_or(cfg.dynamic_tau);
            if tau == 0 || tau > cfg.generator.horizon {
                return Err(RainError::Usage(format!("--tau must lie in [1, {}]", cfg.generator.horizon)));
            }
            PredictionMode::Dynamic { tau }
        }
    };
    let summary = evaluate_run(&data, &cfg, &run, mode)?;
    let mut doc = KvDoc::new();
    summary.to_kv(&mut doc);
    print!("{doc}");
    Ok(())
}

/// Runs a parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
