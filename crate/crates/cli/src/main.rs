//! `tabmtr`: runs the experiment families of `tabular-mtr` from TOML configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use tabular_mtr::data::write_table;
use tabular_mtr::experiment::{
    emit_report, make_synthetic, run_experiment_threads, ExperimentConfig, ExperimentKind, HpoModel, SynthConfig,
    SynthKind,
};
use tabular_mtr::numerics::Precision;
use tabular_mtr::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "tabmtr", version, about = "Contrastive pretraining experiments for tabular data")]
struct Cli {
    /// Comma-separated seeds, overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Seeds trained in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Print one line per epoch.
    #[arg(long, global = true)]
    progress: bool,
    /// -v for info, -vv for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic Gaussian-blob tables.
    Synth(SynthArgs),
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Pretrain and finetune once per mask rate.
    SweepMask {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Compare imputation strategies on test sets with synthetic missing values.
    SweepMissing {
        config: PathBuf,
        /// Test-time probability that a feature of an incomplete row is missing.
        #[arg(long, value_delimiter = ',')]
        missing_probs: Option<Vec<f64>>,
    },
    /// Two-table experiments.
    Duo {
        #[arg(value_enum)]
        mode: DuoMode,
        config: PathBuf,
    },
    /// Random hyperparameter search.
    Hpo {
        config: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum)]
        model: Option<HpoModelArg>,
    },
    /// Rebuild summary.csv (and sweep.csv) from results.csv.
    Report { dir: Option<PathBuf> },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DuoMode {
    Joint,
    Clip,
    Unmatched,
    CrossOmics,
    DuoVsWide,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HpoModelArg {
    Ftt,
    Mlp,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    kind: SynthKindArg,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    features: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Features carrying class signal; 0 means all.
    #[arg(long, default_value_t = 0)]
    informative: usize,
    /// Shared latent factor width of the two views; 0 disables it.
    #[arg(long, default_value_t = 0)]
    latent_dim: usize,
    /// Ratio of the largest to the smallest class.
    #[arg(long, default_value_t = 1.0)]
    imbalance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKindArg {
    Blobs,
    BimodalBlobs,
}

impl Cli {
    /// Applies the global flags on top of a loaded config.
    fn overlay(&self, cfg: &mut ExperimentConfig) {
        if let Some(seeds) = &self.seed_list {
            cfg.seeds = seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if self.progress {
            cfg.train.progress = true;
        }
    }
}

fn load(cli: &Cli, path: &Path, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(kind) = kind {
        if cfg.kind != kind {
            warn!("config kind {} replaced by {} for this command", cfg.kind.name(), kind.name());
            cfg.kind = kind;
        }
    }
    cli.overlay(&mut cfg);
    Ok(cfg)
}

fn run(cli: &Cli, cfg: ExperimentConfig) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    info!("running {} with seeds {:?}", cfg.experiment_name(), cfg.seeds);
    let out = run_experiment_threads(&cfg, cli.threads)?;
    for model in out.models() {
        println!(
            "{:<32} mean accuracy {:.4}",
            model,
            out.mean_accuracy(&model).unwrap_or(f64::NAN)
        );
    }
    println!("results written to {}", cfg.out_dir.display());
    Ok(())
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        kind: match args.kind {
            SynthKindArg::Blobs => SynthKind::Blobs,
            SynthKindArg::BimodalBlobs => SynthKind::BimodalBlobs,
        },
        n_samples: args.n,
        n_features: args.features,
        n_classes: args.classes,
        noise: args.noise,
        separation: args.separation,
        informative: args.informative,
        latent_dim: args.latent_dim,
        imbalance: args.imbalance,
        seed: args.seed,
        ..Default::default()
    };
    let tables = make_synthetic(&cfg)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let names: &[&str] = if tables.len() == 1 { &["blobs.csv"] } else { &["view_a.csv", "view_b.csv"] };
    for (table, name) in tables.iter().zip(names) {
        let path = dir.join(name);
        write_table(table, &path, "label")?;
        println!("wrote {} ({} samples, {} features)", path.display(), table.n_samples(), table.n_features());
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => synth(cli, args),
        Command::Run { config } => run(cli, load(cli, config, None)?),
        Command::SweepMask { config, rates } => {
            let mut cfg = load(cli, config, Some(ExperimentKind::MaskRateSweep))?;
            if let Some(r) = rates {
                cfg.mask_rates = r.clone();
            }
            run(cli, cfg)
        }
        Command::SweepMissing { config, missing_probs } => {
            let mut cfg = load(cli, config, Some(ExperimentKind::Missingness))?;
            if let Some(p) = missing_probs {
                cfg.missing_probs = p.clone();
            }
            run(cli, cfg)
        }
        Command::Duo { mode, config } => {
            let kind = match mode {
                DuoMode::Joint => ExperimentKind::DuoJoint,
                DuoMode::Clip => ExperimentKind::DuoClip,
                DuoMode::Unmatched => ExperimentKind::DuoUnmatched,
                DuoMode::CrossOmics => ExperimentKind::CrossOmics,
                DuoMode::DuoVsWide => ExperimentKind::DuoVsWide,
            };
            run(cli, load(cli, config, Some(kind))?)
        }
        Command::Hpo { config, trials, model } => {
            let mut cfg = load(cli, config, Some(ExperimentKind::Hpo))?;
            if let Some(n) = trials {
                cfg.hpo.n_trials = *n;
            }
            if let Some(m) = model {
                cfg.hpo.model = match m {
                    HpoModelArg::Ftt => HpoModel::Ftt,
                    HpoModelArg::Mlp => HpoModel::Mlp,
                };
            }
            run(cli, cfg)
        }
        Command::Report { dir } => {
            let dir = dir.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
            let summary = emit_report(&dir)?;
            for row in summary.iter().filter(|r| r.metric == "accuracy") {
                println!("{:<20} {:<32} {:.4} ± {:.4}", row.experiment, row.model, row.mean, row.sd);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
