use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cfdr::attacks::{fsa_attack, gda_attack, pbs_attack, random_bit_flip, AttackOutcome, BitPolicy, FsaConfig, FsaNorm, GdaConfig};
use cfdr::detector::{build_reference, detect, ReferenceProfile};
use cfdr::harness::config::DataSource;
use cfdr::harness::data::Split;
use cfdr::harness::experiment::{prepare_workspace, recovery_config, train_clean, Workspace};
use cfdr::harness::{render_report, run_experiment, ExperimentConfig};
use cfdr::model::{load_checkpoint, load_checkpoint_with_extras, save_checkpoint, save_checkpoint_with_extras, Model};
use cfdr::recovery::recover;
use cfdr::{CfdrError, Result};

#[derive(Parser, Debug)]
#[command(name = "cfdr", version, about = "Fault-injection detection and recovery experiments")]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory with CIFAR-10 binary batches; synthetic blobs are used when absent.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Pbs,
    FsaL0,
    FsaL2,
    Gda,
    Random,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the clean model and build its reference profile.
    Train,
    /// Attack a checkpoint.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Layer for FSA, GDA and random flips.
        #[arg(long)]
        layer: Option<String>,
        /// Bits flipped by the random attack.
        #[arg(long, default_value_t = 64)]
        n_bits: usize,
    },
    /// Check a checkpoint against the clean reference.
    Detect {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        delta: Option<f32>,
        #[arg(long, default_value_t = 1)]
        batches: usize,
    },
    /// Retrain a checkpoint on the recovery images.
    Recover {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        labeled: bool,
        /// Split the recovery images come from.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Run the full protocol.
    Experiment,
    /// Summarize a finished experiment directory.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CfdrError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CfdrError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CfdrError::io(path, e))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json(&String::from_utf8_lossy(&read(p)?))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.sync_seeds();
    if let Some(d) = &cli.data_dir {
        cfg.data.source = DataSource::Cifar10;
        cfg.data.data_dir = Some(d.clone());
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_reference(path: &Path) -> Result<(Model, ReferenceProfile)> {
    let (model, extras) = load_checkpoint_with_extras(&read(path)?)?;
    let profile = extras
        .get("profile")
        .ok_or_else(|| CfdrError::InvalidInput(format!("{} carries no reference profile", path.display())))?;
    Ok((model, serde_json::from_value(profile.clone())?))
}

fn attack(cfg: &ExperimentConfig, ws: &Workspace, model: &Model, kind: Kind, layer: Option<String>, n_bits: usize) -> Result<AttackOutcome> {
    match kind {
        Kind::Pbs => pbs_attack(model, &ws.attack_batch, &ws.eval, &cfg.attack.pbs.config),
        Kind::FsaL0 | Kind::FsaL2 => {
            let plan = cfg.attack.fsa.first().cloned().unwrap_or_default();
            let set = ws.fsa_pool.subset(&(0..plan.r).collect::<Vec<_>>())?;
            let targets = set.labels[..plan.s].iter().map(|&y| (y + 1) % model.num_classes()).collect();
            let fcfg = FsaConfig {
                s: plan.s,
                r: plan.r,
                target_labels: targets,
                norm: if matches!(kind, Kind::FsaL0) { FsaNorm::L0 } else { FsaNorm::L2 },
                penalty: plan.penalty,
                max_iters: plan.max_iters,
                layer: layer.unwrap_or(plan.layer),
                ..Default::default()
            };
            fsa_attack(model, &set, &ws.eval, &fcfg)
        }
        Kind::Gda => {
            let plan = cfg.attack.gda.first().cloned().unwrap_or_default();
            let gcfg = GdaConfig {
                target_class: plan.target_class,
                lr: plan.lr,
                l2_coef: plan.l2_coef,
                max_iters: plan.max_iters,
                layer: layer.unwrap_or(plan.layer),
            };
            gda_attack(model, &ws.gda_sources.slice_rows(0, plan.sources)?, &ws.eval, &gcfg)
        }
        Kind::Random => {
            let layer = layer.unwrap_or_else(|| "encoder.conv1".into());
            let mut m = model.clone();
            m.quantize_layer(&layer)?;
            let seed = cfdr::rng::derive_seed(cfg.seed, "attack-random", 0);
            random_bit_flip(&m, &layer, n_bits, BitPolicy::Msb, seed, &ws.eval)
        }
    }
}

fn run(cli: Cli, cfg: ExperimentConfig) -> Result<()> {
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Train => {
            let ws = prepare_workspace(&cfg)?;
            let trained = train_clean(&cfg, &ws)?;
            let profile = build_reference(&trained.model, &ws.detect, cfg.detect.n_samples, &cfg.detect.detector)?;
            let mut extras = BTreeMap::new();
            extras.insert("profile".to_string(), serde_json::to_value(&profile)?);
            write(&out.join("clean.cfdr"), &save_checkpoint_with_extras(&trained.model, &extras))?;
            write(&out.join("phase_a.csv"), trained.log_a.to_csv()?.as_bytes())?;
            write(&out.join("phase_b.csv"), trained.log_b.to_csv()?.as_bytes())?;
            println!(
                "clean accuracy {:.4}  l_c {:.4}  sigma_c {:.4}",
                trained.model.accuracy_on(&ws.eval)?,
                profile.l_c,
                profile.sigma_c
            );
        }
        Command::Attack { model, kind, layer, n_bits } => {
            let ws = prepare_workspace(&cfg)?;
            let m = load_checkpoint(&read(&model)?)?;
            let outcome = attack(&cfg, &ws, &m, kind, layer, n_bits)?;
            write(&out.join("attacked.cfdr"), &save_checkpoint(&outcome.model))?;
            let report = outcome.report.to_json();
            write(&out.join("attack.json"), report.as_bytes())?;
            println!("{report}");
        }
        Command::Detect { reference, model, delta, batches } => {
            let ws = prepare_workspace(&cfg)?;
            let (_, profile) = load_reference(&reference)?;
            let m = load_checkpoint(&read(&model)?)?;
            let delta = delta.or(cfg.detect.delta).unwrap_or_else(|| profile.default_delta());
            let verdict = detect(&profile, &m, &ws.detect, &cfg.detect.detector, delta, batches, 0)?;
            println!("{}", verdict.to_json());
        }
        Command::Recover { reference, model, labeled, split } => {
            let mut cfg = cfg;
            if let Some(s) = split {
                cfg.recover.split = match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                };
            }
            let ws = prepare_workspace(&cfg)?;
            let (clean, profile) = load_reference(&reference)?;
            let mut m = load_checkpoint(&read(&model)?)?;
            let clean_ce = cfdr::contrastive::classifier_loss(
                &clean,
                &ws.train.to_tensor()?,
                &ws.train.labels_usize().unwrap_or_default(),
            )?;
            let rcfg = recovery_config(&cfg, &profile, clean_ce, labeled);
            let report = recover(&mut m, &ws.recover, &rcfg, Some(&ws.eval))?;
            write(&out.join("recovered.cfdr"), &save_checkpoint(&m))?;
            write(&out.join("recovery.json"), report.to_json().as_bytes())?;
            write(&out.join("recovery_epochs.csv"), report.epochs_csv()?.as_bytes())?;
            println!("{}", report.to_json());
        }
        Command::Experiment => {
            run_experiment(&cfg)?;
            log::info!("experiment written to {}", out.display());
            print!("{}", render_report(&out)?);
        }
        Command::Report => print!("{}", render_report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_data_error() { 2 } else { 1 });
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}
