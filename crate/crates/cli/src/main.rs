use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use synqt::accounting::{
    activation_ledger, count_params, entanglement_sweep, flop_count, sweep_csv, FlopConvention,
    LoraPlacement, Scheme, SchemeKind,
};
use synqt::backbone::BackboneConfig;
use synqt::config::TrainConfig;
use synqt::train::{
    compare, feature_weights, grad_check_model, train_with_models, Experiment, Trained,
    GRAD_CHECK_TOLERANCE,
};
use synqt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "synqt",
    version,
    about = "Query tuning on a frozen toy ViT: training, checks and accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Sectioned TOML config; missing keys keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Write the result here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured arms for one seed and write a JSON run report.
    Train(Common),
    /// Finite-difference check of every trainable tensor; fails above 1e-4.
    Gradcheck(Common),
    /// Trainable-parameter ledger of a scheme (JSON).
    Params(SchemeArgs),
    /// Stored activations of LoRA confined to block k, for every k (CSV).
    Memsweep(SweepArgs),
    /// FLOP ledger of a scheme's inference pass (JSON).
    Flops(FlopArgs),
    /// Train SynQT, then dump per-sample aggregation weights (JSON).
    WeightsDump(DumpArgs),
    /// Linear probe vs SynQT vs ablation arms over seeds and a grid.
    Compare(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Toy,
    Vitb16,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeName {
    Synqt,
    Full,
    Linear,
    Bitfit,
    Vpt,
    Lora,
    Adapter,
}

#[derive(Args)]
struct SchemeArgs {
    #[command(flatten)]
    common: Common,
    /// Architecture; defaults to the config's backbone.
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    #[arg(long, value_enum, default_value = "synqt")]
    scheme: SchemeName,
    /// SynQT bottleneck width.
    #[arg(long)]
    hidden: Option<usize>,
    /// SynQT attention bottleneck width.
    #[arg(long)]
    qkv: Option<usize>,
    /// SynQT query tokens per block.
    #[arg(long)]
    n: Option<usize>,
    /// VPT prompt tokens per block.
    #[arg(long, default_value_t = 10)]
    tokens: usize,
    /// LoRA rank, or adapter hidden width.
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Confine LoRA to this one-based block; all blocks when absent.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Batch size for the activation ledger.
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct FlopArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, value_enum, default_value = "mac")]
    convention: Convention,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Mac,
    MultiplyAdd,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    /// Test samples to dump.
    #[arg(long, default_value_t = 16)]
    count: usize,
}

fn load(common: &Common) -> Result<TrainConfig> {
    match &common.config {
        Some(path) => TrainConfig::load(path),
        None => Ok(TrainConfig::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn arch(choice: Option<Arch>, cfg: &TrainConfig) -> BackboneConfig {
    match choice {
        Some(Arch::Toy) => BackboneConfig::toy(),
        Some(Arch::Vitb16) => BackboneConfig::vit_b16(),
        None => cfg.backbone,
    }
}

fn scheme(args: &SchemeArgs, cfg: &TrainConfig) -> Result<Scheme> {
    let a = arch(args.arch, cfg);
    let mut synqt = match args.arch {
        Some(Arch::Vitb16) => synqt::blocks::SynqtConfig::default(),
        Some(Arch::Toy) => synqt::blocks::SynqtConfig::toy(),
        None => cfg.synqt,
    };
    synqt.hidden = args.hidden.unwrap_or(synqt.hidden);
    synqt.qkv_hidden = args.qkv.unwrap_or(synqt.qkv_hidden);
    synqt.n = args.n.unwrap_or(synqt.n);
    let kind = match args.scheme {
        SchemeName::Synqt => SchemeKind::Synqt {
            config: synqt,
            variant: cfg.variant,
        },
        SchemeName::Full => SchemeKind::FullFinetune,
        SchemeName::Linear => SchemeKind::LinearProbe,
        SchemeName::Bitfit => SchemeKind::Bitfit,
        SchemeName::Vpt => SchemeKind::VptDeep {
            tokens: args.tokens,
        },
        SchemeName::Lora => SchemeKind::Lora {
            rank: args.rank,
            placement: args.layer.map_or(LoraPlacement::All, LoraPlacement::Layer),
        },
        SchemeName::Adapter => SchemeKind::Adapter { hidden: args.rank },
    };
    let classes = args.classes.unwrap_or(cfg.data.num_classes);
    let s = Scheme::new(kind, a, classes);
    s.validate()?;
    Ok(s)
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let (report, models) = train_with_models(&cfg)?;
            for (r, m) in report.arms.iter().zip(&models) {
                let kind = match m {
                    Trained::LinearProbe(_) => "linear probe",
                    Trained::Synqt(_) => "synqt",
                };
                eprintln!(
                    "{:<24} {:<12} train {:6.2}%  test {:6.2}%  params {}",
                    r.arm,
                    kind,
                    100.0 * r.train_accuracy,
                    100.0 * r.test_accuracy,
                    r.trainable_params
                );
            }
            emit(c.out.as_deref(), &report.to_json())
        }
        Command::Gradcheck(c) => {
            let cfg = load(&c)?;
            let summary = grad_check_model(&cfg, 1e-5)?;
            emit(c.out.as_deref(), &json(&summary)?)?;
            eprintln!("max relative error: {:.3e}", summary.max_relative_error);
            if summary.passed(GRAD_CHECK_TOLERANCE) {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed: {:.3e} >= {GRAD_CHECK_TOLERANCE:e}",
                    summary.max_relative_error
                )))
            }
        }
        Command::Params(args) => {
            let cfg = load(&args.common)?;
            let s = scheme(&args, &cfg)?;
            let mut ledger = count_params(&s)?;
            ledger.absorb("", activation_ledger(&s, args.batch)?);
            emit(args.common.out.as_deref(), &json(&ledger)?)
        }
        Command::Flops(args) => {
            let cfg = load(&args.scheme.common)?;
            let s = scheme(&args.scheme, &cfg)?;
            let convention = match args.convention {
                Convention::Mac => FlopConvention::Mac,
                Convention::MultiplyAdd => FlopConvention::MultiplyAdd,
            };
            emit(
                args.scheme.common.out.as_deref(),
                &json(&flop_count(&s, convention)?)?,
            )
        }
        Command::Memsweep(args) => {
            let cfg = load(&args.common)?;
            let a = arch(args.arch, &cfg);
            let classes = args.classes.unwrap_or(cfg.data.num_classes);
            let points = entanglement_sweep(&a, args.rank, classes, args.batch)?;
            emit(args.common.out.as_deref(), &sweep_csv(&points))
        }
        Command::WeightsDump(args) => {
            let cfg = load(&args.common)?;
            let exp = Experiment::new(&cfg, cfg.train.seed)?;
            let arm = cfg
                .train
                .arms
                .iter()
                .find(|a| a.as_str() != "linear")
                .cloned();
            let arm = arm.ok_or_else(|| {
                Error::Config("weights-dump needs a SynQT arm in train.arms".into())
            })?;
            let (_, trained) = exp.run_arm(&arm, cfg.train.base_lr, None)?;
            let Trained::Synqt(model) = trained else {
                unreachable!("non-linear arms train SynQT models")
            };
            emit(
                args.common.out.as_deref(),
                &json(&feature_weights(&exp, &model, args.count)?)?,
            )
        }
        Command::Compare(c) => {
            let cfg = load(&c)?;
            let report = compare(&cfg)?;
            eprint!("{}", report.table());
            emit(c.out.as_deref(), &json(&report)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
