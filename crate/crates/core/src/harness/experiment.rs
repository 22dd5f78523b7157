//! End-to-end experiment: train, attack, detect, recover, and write artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    fsa_attack, gda_attack, pbs_attack, random_bit_flip, AttackOutcome, AttackReport, BitPolicy, FsaConfig,
    GdaConfig,
};
use crate::contrastive::{train_phase_a, train_phase_b, TrainLog};
use crate::detector::{build_reference, sample_losses, ReferenceProfile, SampleStream};
use crate::error::{CfdrError, Result};
use crate::harness::config::{DataSource, ExperimentConfig};
use crate::harness::data::{load_cifar10, make_synthetic_blobs, Dataset, Split};
use crate::model::{save_checkpoint_with_extras, LabeledBatch, Model};
use crate::recovery::{recover, ReferenceLosses, RecoveryConfig, RecoveryReport};
use crate::rng;
use crate::tensor::Tensor;

/// Data subsets of one experiment. Evaluation, detection, recovery and
/// attack images are disjoint ranges of the test pool.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub train: Dataset,
    pub eval: LabeledBatch,
    pub detect: Tensor,
    pub recover: Dataset,
    pub fsa_pool: LabeledBatch,
    pub gda_sources: Tensor,
    pub attack_batch: LabeledBatch,
}

fn labeled(d: &Dataset) -> Result<LabeledBatch> {
    let labels = d
        .labels_usize()
        .ok_or_else(|| CfdrError::Data("dataset has no labels".into()))?;
    LabeledBatch::new(d.to_tensor()?, labels)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match d.source {
        DataSource::SyntheticBlobs => Ok((
            make_synthetic_blobs(d.train_subset, d.classes, cfg.seed, Split::Train)?,
            make_synthetic_blobs(d.synthetic_test, d.classes, cfg.seed, Split::Test)?,
        )),
        DataSource::Cifar10 => {
            let dir = d
                .data_dir
                .as_deref()
                .ok_or_else(|| CfdrError::Data("CIFAR-10 source needs a data directory".into()))?;
            let train = load_cifar10(dir, Split::Train)?;
            let test = load_cifar10(dir, Split::Test)?;
            if d.train_subset > train.len() {
                return Err(CfdrError::Data(format!(
                    "train_subset {} exceeds the {} training images",
                    d.train_subset,
                    train.len()
                )));
            }
            let mut picks = index::sample(&mut rng::substream(cfg.seed, "subset", 0), train.len(), d.train_subset).into_vec();
            picks.sort_unstable();
            Ok((train.subset(&picks)?, test))
        }
    }
}

pub fn prepare_workspace(cfg: &ExperimentConfig) -> Result<Workspace> {
    let (train, test) = load_data(cfg)?;
    let need = cfg.test_pool_needed();
    if test.len() < need {
        return Err(CfdrError::Data(format!(
            "test pool holds {} images but the configured subsets need {need}",
            test.len()
        )));
    }
    let mut at = 0;
    let mut take = |n: usize| -> Result<Dataset> {
        let d = test.range(at, at + n)?;
        at += n;
        Ok(d)
    };
    let eval = labeled(&take(cfg.eval_size)?)?;
    let detect = take(cfg.detect.data_size)?.unlabeled().to_tensor()?;
    let recover = match cfg.recover.split {
        Split::Test => take(cfg.recover.config.data_budget)?,
        Split::Train => train.range(0, cfg.recover.config.data_budget)?,
    };
    let fsa_r = cfg.attack.fsa.iter().map(|f| f.r).max().unwrap_or(0);
    let fsa_pool = if fsa_r > 0 { Some(labeled(&take(fsa_r)?)?) } else { None };
    let gda_n = cfg.attack.gda.iter().map(|g| g.sources).max().unwrap_or(0);
    let gda_sources = if gda_n > 0 { Some(take(gda_n)?.to_tensor()?) } else { None };
    let ab = cfg.attack.pbs.attack_batch.min(train.len());
    let attack_batch = labeled(&train.range(0, ab.max(1))?)?;
    Ok(Workspace {
        eval,
        detect,
        recover,
        fsa_pool: fsa_pool.unwrap_or_else(|| attack_batch.clone()),
        gda_sources: gda_sources.unwrap_or_else(|| attack_batch.images.clone()),
        attack_batch,
        train,
    })
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    /// Trained model with the attack layers already given int8 views.
    pub model: Model,
    pub log_a: TrainLog,
    pub log_b: TrainLog,
}

/// Trains the clean model and quantizes the layers bit-flip attacks target.
pub fn train_clean(cfg: &ExperimentConfig, ws: &Workspace) -> Result<TrainedModel> {
    let mut model = Model::build(cfg.model.clone())?;
    let images = ws.train.to_tensor()?;
    let labels = ws
        .train
        .labels_usize()
        .ok_or_else(|| CfdrError::Data("training data has no labels".into()))?;
    let log_a = train_phase_a(&mut model, &images, &cfg.train.phase_a)?;
    let log_b = train_phase_b(&mut model, &images, &labels, &cfg.train.phase_b)?;
    model.reset_optimizer_state();
    for layer in quantized_layers(cfg) {
        model.quantize_layer(&layer)?;
    }
    Ok(TrainedModel { model, log_a, log_b })
}

fn quantized_layers(cfg: &ExperimentConfig) -> Vec<String> {
    let mut layers = if cfg.attack.pbs.enabled { cfg.attack.pbs.layers.clone() } else { Vec::new() };
    for r in &cfg.attack.random {
        if !layers.contains(&r.layer) {
            layers.push(r.layer.clone());
        }
    }
    layers
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub name: String,
    pub outcome: AttackOutcome,
}

fn fsa_targets(labels: &[usize], classes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::substream(seed, "attack-fsa", 0);
    labels
        .iter()
        .map(|&y| (y + 1 + r.gen_range(0..classes - 1)) % classes)
        .collect()
}

fn slug(s: &str) -> String {
    s.replace('.', "-")
}

/// Every configured attack, each applied to its own copy of `clean`.
pub fn run_attacks(cfg: &ExperimentConfig, ws: &Workspace, clean: &Model) -> Result<Vec<AttackRun>> {
    let mut runs = Vec::new();
    if cfg.attack.pbs.enabled {
        let outcome = pbs_attack(clean, &ws.attack_batch, &ws.eval, &cfg.attack.pbs.config)?;
        runs.push(AttackRun {
            name: "pbs".into(),
            outcome,
        });
    }
    for plan in &cfg.attack.fsa {
        let set = ws.fsa_pool.subset(&(0..plan.r).collect::<Vec<_>>())?;
        let fcfg = FsaConfig {
            s: plan.s,
            r: plan.r,
            target_labels: fsa_targets(&set.labels[..plan.s], clean.num_classes(), cfg.seed),
            norm: plan.norm,
            penalty: plan.penalty,
            max_iters: plan.max_iters,
            layer: plan.layer.clone(),
            ..Default::default()
        };
        let outcome = fsa_attack(clean, &set, &ws.eval, &fcfg)?;
        let name = format!("{}_{}", outcome.report.attack_kind.as_str(), slug(&plan.layer));
        runs.push(AttackRun { name, outcome });
    }
    for plan in &cfg.attack.gda {
        let sources = ws.gda_sources.slice_rows(0, plan.sources)?;
        let gcfg = GdaConfig {
            target_class: plan.target_class,
            lr: plan.lr,
            l2_coef: plan.l2_coef,
            max_iters: plan.max_iters,
            layer: plan.layer.clone(),
        };
        let outcome = gda_attack(clean, &sources, &ws.eval, &gcfg)?;
        runs.push(AttackRun {
            name: format!("gda_{}", slug(&plan.layer)),
            outcome,
        });
    }
    for plan in &cfg.attack.random {
        let policy = if plan.msb_only { BitPolicy::Msb } else { BitPolicy::Uniform };
        let seed = rng::derive_seed(cfg.seed, "attack-random", 0);
        let outcome = random_bit_flip(clean, &plan.layer, plan.n_bits, policy, seed, &ws.eval)?;
        runs.push(AttackRun {
            name: format!("random_{}_{}", plan.n_bits, slug(&plan.layer)),
            outcome,
        });
    }
    let mut seen = BTreeMap::new();
    for run in &mut runs {
        let n = seen.entry(run.name.clone()).or_insert(0usize);
        *n += 1;
        if *n > 1 {
            run.name = format!("{}_{}", run.name, n);
        }
    }
    Ok(runs)
}

/// Recovery settings with the clean model's reference losses filled in.
pub fn recovery_config(cfg: &ExperimentConfig, profile: &ReferenceProfile, clean_ce: f32, labeled: bool) -> RecoveryConfig {
    RecoveryConfig {
        labeled,
        reference: ReferenceLosses {
            contrastive: Some(profile.l_c),
            contrastive_tolerance: profile.sigma_c,
            cross_entropy: Some(clean_ce),
            cross_entropy_tolerance: 0.0,
        },
        ..cfg.recover.config.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// "complete" or "partial".
    pub status: String,
    pub error: Option<String>,
    pub files: Vec<ManifestEntry>,
}

/// Every write goes through here so the manifest sees all files.
struct Artifacts {
    root: PathBuf,
    files: Vec<ManifestEntry>,
    timing: Vec<ManifestEntry>,
}

impl Artifacts {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("timing")).map_err(|e| CfdrError::io(root, e))?;
        Ok(Artifacts {
            root: root.to_path_buf(),
            files: Vec::new(),
            timing: Vec::new(),
        })
    }

    fn put(&self, rel: &str, bytes: &[u8]) -> Result<ManifestEntry> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CfdrError::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CfdrError::io(&path, e))?;
        Ok(ManifestEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let e = self.put(rel, bytes)?;
        self.files.push(e);
        Ok(())
    }

    /// Wall-clock files live under `timing/` with their own manifest.
    fn write_timing(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let e = self.put(&format!("timing/{name}"), bytes)?;
        self.timing.push(e);
        Ok(())
    }

    fn finish(&mut self, error: Option<&CfdrError>) -> Result<()> {
        let status = if error.is_some() { "partial" } else { "complete" };
        let timing = Manifest {
            status: status.into(),
            error: None,
            files: self.timing.clone(),
        };
        let t = serde_json::to_vec_pretty(&timing)?;
        self.put("timing/manifest.json", &t)?;
        let m = Manifest {
            status: status.into(),
            error: error.map(|e| e.to_string()),
            files: self.files.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&m)?;
        self.put("manifest.json", &bytes)?;
        Ok(())
    }
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CfdrError::Data(e.to_string()))
}

fn loss_csv(log: &TrainLog) -> Result<Vec<u8>> {
    let mut rows = vec![vec!["epoch".to_string(), "mean_loss".to_string()]];
    for e in &log.epochs {
        rows.push(vec![e.epoch.to_string(), e.mean_loss.to_string()]);
    }
    csv_string(rows)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn median(v: &[f32]) -> f32 {
    let mut s = v.to_vec();
    s.sort_by(f32::total_cmp);
    let n = s.len();
    if n == 0 {
        return f32::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub name: String,
    pub report: AttackReport,
    pub param_count: usize,
    pub median_loss: f32,
    /// Fraction of sampled batches with loss above `l_c + 3 sigma_c`.
    pub above_three_sigma: f32,
    /// Fraction flagged by the `|l_d - l_c| > delta` rule.
    pub flagged: f32,
    pub unlabeled: Option<RecoveryReport>,
    pub labeled: Option<RecoveryReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub clean_acc: f32,
    pub clean_ce: f32,
    pub l_c: f32,
    pub sigma_c: f32,
    pub delta: f32,
    pub n_samples: usize,
    /// Clean-model detection draws flagged by the rule.
    pub false_positive_rate: f32,
    pub attacks: Vec<AttackSummary>,
}

struct Timer(BTreeMap<String, u128>);

impl Timer {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.0.insert(stage.to_string(), start.elapsed().as_millis());
        out
    }
}

/// Runs the whole protocol and writes its artifacts under
/// `cfg.output_dir`. On failure the manifest is still written, marked
/// partial, before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let mut art = Artifacts::new(&cfg.output_dir)?;
    let mut timer = Timer(BTreeMap::new());
    let result = run_stages(cfg, &mut art, &mut timer);
    let timing: BTreeMap<String, u128> = timer.0;
    let finish = art
        .write_timing("timing.json", &json(&timing)?)
        .and_then(|_| art.finish(result.as_ref().err()));
    let summary = result?;
    finish?;
    Ok(summary)
}

fn run_stages(cfg: &ExperimentConfig, art: &mut Artifacts, timer: &mut Timer) -> Result<ExperimentSummary> {
    art.write("config.json", &json(cfg)?)?;
    let ws = timer.time("data", || prepare_workspace(cfg))?;
    let trained = timer.time("train", || train_clean(cfg, &ws))?;
    let clean = &trained.model;
    art.write("train/phase_a.csv", &loss_csv(&trained.log_a)?)?;
    art.write("train/phase_b.csv", &loss_csv(&trained.log_b)?)?;
    let mut times = Vec::new();
    trained.log_a.write_csv(&mut times)?;
    art.write_timing("phase_a.csv", &times)?;
    let mut times = Vec::new();
    trained.log_b.write_csv(&mut times)?;
    art.write_timing("phase_b.csv", &times)?;

    let det = &cfg.detect;
    let profile = timer.time("profile", || build_reference(clean, &ws.detect, det.n_samples, &det.detector))?;
    let delta = det.delta.unwrap_or_else(|| profile.default_delta());
    let mut extras = BTreeMap::new();
    extras.insert("profile".to_string(), serde_json::to_value(&profile)?);
    art.write("clean.cfdr", &save_checkpoint_with_extras(clean, &extras))?;
    art.write("profile.json", &json(&profile)?)?;

    let clean_acc = clean.accuracy_on(&ws.eval)?;
    let clean_ce = trained.log_b.last_loss().unwrap_or(f32::NEG_INFINITY);
    let mut detection_rows = vec![vec!["model".to_string(), "sample".into(), "loss".into(), "flagged".into()]];
    let mut push_rows = |name: &str, losses: &[f32]| {
        for (i, l) in losses.iter().enumerate() {
            let flagged = (l - profile.l_c).abs() > delta || !l.is_finite();
            detection_rows.push(vec![name.to_string(), i.to_string(), l.to_string(), flagged.to_string()]);
        }
    };
    let clean_losses = timer.time("detect_clean", || {
        sample_losses(clean, &ws.detect, &det.detector, SampleStream::Detect, 0, det.n_samples)
    })?;
    push_rows("clean", &clean_losses);
    let fp = clean_losses.iter().filter(|&&l| (l - profile.l_c).abs() > delta).count();

    let runs = timer.time("attacks", || run_attacks(cfg, &ws, clean))?;
    let mut attacks = Vec::new();
    let mut table = vec![[
        "attack",
        "param_count",
        "acc_after_attack",
        "unlabeled_acc",
        "unlabeled_epochs",
        "labeled_acc",
        "labeled_epochs",
    ]
    .map(String::from)
    .to_vec()];
    for run in runs {
        let r = &run.outcome.report;
        let m = &run.outcome.model;
        art.write(&format!("attacks/{}.cfdr", run.name), &crate::model::save_checkpoint(m))?;
        art.write(&format!("attacks/{}.json", run.name), &json(r)?)?;
        let losses = timer.time(&format!("detect_{}", run.name), || {
            sample_losses(m, &ws.detect, &det.detector, SampleStream::Detect, 0, det.n_samples)
        })?;
        push_rows(&run.name, &losses);
        let threshold = profile.l_c + 3.0 * profile.sigma_c;
        let n = losses.len() as f32;
        let above = losses.iter().filter(|&&l| l > threshold || !l.is_finite()).count() as f32 / n;
        let flagged = losses
            .iter()
            .filter(|&&l| (l - profile.l_c).abs() > delta || !l.is_finite())
            .count() as f32
            / n;

        let mut recoveries: Vec<Option<RecoveryReport>> = Vec::new();
        for labeled in [false, true] {
            if labeled && !cfg.recover.run_labeled {
                recoveries.push(None);
                continue;
            }
            let tag = if labeled { "labeled" } else { "unlabeled" };
            let rcfg = recovery_config(cfg, &profile, clean_ce, labeled);
            let mut repaired = m.clone();
            let rep = timer.time(&format!("recover_{}_{tag}", run.name), || {
                recover(&mut repaired, &ws.recover, &rcfg, Some(&ws.eval))
            })?;
            art.write(&format!("recovery/{}_{tag}.json", run.name), &json(&rep)?)?;
            art.write(&format!("recovery/{}_{tag}_epochs.csv", run.name), rep.epochs_csv()?.as_bytes())?;
            art.write(&format!("recovery/{}_{tag}.cfdr", run.name), &crate::model::save_checkpoint(&repaired))?;
            recoveries.push(Some(rep));
        }
        let labeled_rep = recoveries.pop().flatten();
        let unlabeled_rep = recoveries.pop().flatten();
        let fmt_acc = |r: &Option<RecoveryReport>| r.as_ref().and_then(|r| r.acc_after).map_or(String::new(), |a| a.to_string());
        let fmt_ep = |r: &Option<RecoveryReport>| r.as_ref().map_or(String::new(), |r| r.epochs_used.to_string());
        table.push(vec![
            run.name.clone(),
            r.total_params().to_string(),
            r.acc_after.to_string(),
            fmt_acc(&unlabeled_rep),
            fmt_ep(&unlabeled_rep),
            fmt_acc(&labeled_rep),
            fmt_ep(&labeled_rep),
        ]);
        attacks.push(AttackSummary {
            name: run.name.clone(),
            param_count: r.total_params(),
            report: r.clone(),
            median_loss: median(&losses),
            above_three_sigma: above,
            flagged,
            unlabeled: unlabeled_rep,
            labeled: labeled_rep,
        });
    }
    art.write("detection.csv", &csv_string(detection_rows)?)?;
    art.write("recovery.csv", &csv_string(table)?)?;
    let summary = ExperimentSummary {
        seed: cfg.seed,
        clean_acc,
        clean_ce,
        l_c: profile.l_c,
        sigma_c: profile.sigma_c,
        delta,
        n_samples: det.n_samples,
        false_positive_rate: fp as f32 / det.n_samples as f32,
        attacks,
    };
    art.write("summary.json", &json(&summary)?)?;
    Ok(summary)
}

/// Human-readable table of a finished experiment directory.
pub fn render_report(dir: &Path) -> Result<String> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| CfdrError::io(&path, e))?;
    let s: ExperimentSummary = serde_json::from_str(&text)?;
    let mut out = format!(
        "seed {}  clean acc {:.4}  l_c {:.3}  sigma_c {:.3}  delta {:.3}  false positives {:.4}\n",
        s.seed, s.clean_acc, s.l_c, s.sigma_c, s.delta, s.false_positive_rate
    );
    out += &format!(
        "{:<28} {:>8} {:>9} {:>8} {:>8} {:>9} {:>6} {:>9} {:>6}\n",
        "attack", "params", "acc_att", ">3sigma", "flagged", "unlab_acc", "ep", "lab_acc", "ep"
    );
    for a in &s.attacks {
        let acc = |r: &Option<RecoveryReport>| r.as_ref().and_then(|r| r.acc_after).map_or("-".into(), |v| format!("{v:.4}"));
        let ep = |r: &Option<RecoveryReport>| r.as_ref().map_or("-".into(), |r| r.epochs_used.to_string());
        out += &format!(
            "{:<28} {:>8} {:>9.4} {:>8.3} {:>8.3} {:>9} {:>6} {:>9} {:>6}\n",
            a.name,
            a.param_count,
            a.report.acc_after,
            a.above_three_sigma,
            a.flagged,
            acc(&a.unlabeled),
            ep(&a.unlabeled),
            acc(&a.labeled),
            ep(&a.labeled)
        );
    }
    Ok(out)
}
