//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 4 to 8 share one model trained with the default
//! configuration.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use cfdr::attacks::{fsa_attack, gda_attack, pbs_attack, random_bit_flip, AttackOutcome, BitPolicy, FsaConfig, GdaConfig, PbsConfig};
use cfdr::contrastive::{contrastive_loss, LossConfig, LossVariant, Reduction};
use cfdr::detector::{sample_losses, SampleStream};
use cfdr::harness::{run_experiment, ExperimentConfig};
use cfdr::model::{LabeledBatch, Model};
use cfdr::recovery::{recover, RecoveryConfig, RecoveryReport};
use cfdr::rng::derive_seed;
use cfdr::tensor::Tensor;
use common::fixture::{small_config, Fixture};
use common::{oracle, props};

type Outcome = (bool, String);

fn desk() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = ExperimentConfig::default().with_seed(0);
        let n = cfg.detect.n_samples;
        Fixture::build(cfg, n)
    })
}

fn median(v: &[f32]) -> f32 {
    let mut s = v.to_vec();
    s.sort_by(f32::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn c1() -> Outcome {
    let errs = oracle::gradcheck_all(100);
    let (name, worst) = errs.iter().fold(("", 0.0f64), |m, &(n, e)| if e > m.1 { (n, e) } else { m });
    (worst < 1e-3, format!("{} cases x 100 instances, worst {name} {worst:.2e}", errs.len()))
}

fn c2() -> Outcome {
    let (abs, rel) = oracle::loss_oracle_gap(100);
    let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let cfg = LossConfig {
        temperature: 1.0,
        reduction: Reduction::Sum,
        variant: LossVariant::CrossViewNegatives,
    };
    let got = contrastive_loss(&z, &z, &cfg).unwrap() as f64;
    let want = 2.0 * (2f64.ln() - 1.0);
    let ok = rel <= 1e-6 && (got - want).abs() <= 1e-6;
    (ok, format!("double-loop gap rel {rel:.1e} (abs {abs:.1e}); orthonormal {got:.7} vs {want:.7}"))
}

fn c3() -> Outcome {
    match props::run_all(1000) {
        Ok(()) => (true, "1000 cases each: view round trip, model double flip, checkpoint".into()),
        Err(e) => (false, e),
    }
}

fn c4() -> Outcome {
    let f = desk();
    let set = f.ws.fsa_pool.subset(&(0..20).collect::<Vec<_>>()).unwrap();
    let before = f.model.predict(&set.images).unwrap();
    let targets: Vec<usize> = before[..5].iter().map(|&y| (y + 1) % 10).collect();
    let cfg = FsaConfig {
        s: 5,
        r: 20,
        target_labels: targets.clone(),
        ..Default::default()
    };
    let out = fsa_attack(&f.model, &set, &f.ws.eval, &cfg).unwrap();
    let mut hit = 0;
    let mut kept = 0;
    for i in 0..20 {
        let one = set.images.slice_rows(i, i + 1).unwrap();
        let p = out.model.predict(&one).unwrap()[0];
        if i < 5 && p == targets[i] {
            hit += 1;
        }
        if i >= 5 && p == before[i] {
            kept += 1;
        }
    }
    let ok = out.report.success && hit == 5 && kept == 15;
    (
        ok,
        format!(
            "success {}, targets hit {hit}/5, keepers kept {kept}/15, {} params changed",
            out.report.success, out.report.params_modified
        ),
    )
}

fn batch_for(f: &Fixture, s: usize) -> LabeledBatch {
    let d = f.ws.train.range(128 * s, 128 * (s + 1)).unwrap();
    LabeledBatch::new(d.to_tensor().unwrap(), d.labels_usize().unwrap()).unwrap()
}

fn c5() -> Outcome {
    let f = desk();
    let out = pbs_attack(&f.model, &f.ws.attack_batch, &f.ws.eval, &PbsConfig::default()).unwrap();
    let r = &out.report;
    let ok = f.clean_acc >= 0.65 && r.acc_after < 0.11 && r.bits_flipped <= 50;
    (ok, format!("clean {:.3} -> {:.3} after {} flips", f.clean_acc, r.acc_after, r.bits_flipped))
}

fn c6() -> Outcome {
    let f = desk();
    let d = &f.cfg.detect.detector;
    let mut runs: Vec<(String, AttackOutcome)> = Vec::new();
    runs.push(("pbs".into(), pbs_attack(&f.model, &f.ws.attack_batch, &f.ws.eval, &PbsConfig::default()).unwrap()));
    let set = f.ws.fsa_pool.subset(&(0..20).collect::<Vec<_>>()).unwrap();
    let fcfg = FsaConfig {
        target_labels: set.labels[..5].iter().map(|&y| (y + 1) % 10).collect(),
        ..Default::default()
    };
    runs.push(("fsa".into(), fsa_attack(&f.model, &set, &f.ws.eval, &fcfg).unwrap()));
    let sources = f.ws.gda_sources.slice_rows(0, 64).unwrap();
    runs.push(("gda".into(), gda_attack(&f.model, &sources, &f.ws.eval, &GdaConfig::default()).unwrap()));
    let seed = derive_seed(0, "attack-random", 0);
    runs.push((
        "random".into(),
        random_bit_flip(&f.model, "encoder.conv1", 64, BitPolicy::Msb, seed, &f.ws.eval).unwrap(),
    ));
    let threshold = f.profile.l_c + 3.0 * f.profile.sigma_c;
    let mut ok = true;
    let mut applicable = 0;
    let mut parts = Vec::new();
    for (name, out) in &runs {
        let acc = out.report.acc_after;
        if acc >= 0.2 {
            parts.push(format!("{name} acc {acc:.2} n/a"));
            continue;
        }
        applicable += 1;
        let losses = sample_losses(&out.model, &f.ws.detect, d, SampleStream::Detect, 0, 100).unwrap();
        let above = losses.iter().filter(|&&l| l > threshold || !l.is_finite()).count() as f32 / 100.0;
        ok &= above >= 0.95;
        parts.push(format!("{name} acc {acc:.2} above {:.0}%", above * 100.0));
    }
    let n = f.cfg.detect.n_samples;
    let clean = sample_losses(&f.model, &f.ws.detect, d, SampleStream::Detect, 0, n).unwrap();
    let delta = f.profile.default_delta();
    let fpr = clean.iter().filter(|&&l| (l - f.profile.l_c).abs() > delta).count() as f32 / n as f32;
    ok &= applicable > 0 && fpr <= 0.01;
    parts.push(format!("clean FPR {:.2}% over {n}", fpr * 100.0));
    (ok, parts.join(", "))
}

fn seeded(mut cfg: RecoveryConfig, s: u64) -> RecoveryConfig {
    cfg.phase_a.seed = derive_seed(s, "recover", 0);
    cfg.phase_a.augment.seed = derive_seed(s, "recover-augment", 0);
    cfg.phase_b.seed = derive_seed(s, "recover", 1);
    cfg
}

fn recovered(f: &Fixture, attacked: &Model, labeled: bool, s: u64) -> RecoveryReport {
    let mut m = attacked.clone();
    recover(&mut m, &f.ws.recover, &seeded(f.recovery(labeled), s), Some(&f.ws.eval)).unwrap()
}

fn c7() -> Outcome {
    let f = desk();
    let mut unl = Vec::new();
    let mut lab = Vec::new();
    let mut within = 0;
    let mut parts = Vec::new();
    for s in 0..5u64 {
        let pbs = pbs_attack(&f.model, &batch_for(f, s as usize), &f.ws.eval, &PbsConfig::default()).unwrap();
        let u = recovered(f, &pbs.model, false, s);
        let l = recovered(f, &pbs.model, true, s);
        let ua = u.acc_after.unwrap();
        if ua >= f.clean_acc - 0.10 && u.epochs_used <= 30 {
            within += 1;
        }
        unl.push(ua);
        lab.push(l.acc_after.unwrap());
        parts.push(format!("{:.2}->{ua:.2}/{}ep", pbs.report.acc_after, u.epochs_used));
    }
    let (mu, ml) = (median(&unl), median(&lab));
    let ok = mu >= f.clean_acc - 0.10 && ml >= mu;
    (
        ok,
        format!(
            "unlabeled {} ({within}/5 within 10 pts), median {mu:.3}, labeled median {ml:.3}, clean {:.3}",
            parts.join(" "),
            f.clean_acc
        ),
    )
}

fn c8() -> Outcome {
    const FRACTION: f32 = 0.05;
    let f = desk();
    let sets: [&[&str]; 3] = [
        &["encoder.conv1"],
        &["encoder.conv1", "encoder.conv2"],
        &["encoder.conv1", "encoder.conv2", "encoder.conv3"],
    ];
    let mut medians = Vec::new();
    let mut parts = Vec::new();
    for layers in sets {
        let mut accs = Vec::new();
        let mut params = 0;
        for s in 0..5u64 {
            let mut m = f.model.clone();
            params = 0;
            for l in layers {
                let n = m.quantized_view(l).unwrap().len();
                params += n;
                let k = (n as f32 * FRACTION).round() as usize;
                m = random_bit_flip(&m, l, k, BitPolicy::Msb, derive_seed(s, "attack-random", 0), &f.ws.eval).unwrap().model;
            }
            accs.push(recovered(f, &m, false, s).acc_after.unwrap());
        }
        let med = median(&accs);
        parts.push(format!("{params} params median {med:.3}"));
        medians.push(med);
    }
    let ok = medians.windows(2).all(|w| w[1] <= w[0]);
    (ok, format!("{:.0}% MSB flips: {}", FRACTION * 100.0, parts.join(", ")))
}

fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel.starts_with("timing") {
                continue;
            }
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn c9() -> Outcome {
    let mut cfg = small_config(5);
    cfg.data.train_subset = 300;
    cfg.train.phase_a.epochs = 2;
    cfg.train.phase_b.epochs = 2;
    cfg.detect.n_samples = 40;
    cfg.recover.config.epoch_cap = 2;
    cfg.attack.pbs.config.max_flips = 3;
    for g in &mut cfg.attack.gda {
        g.max_iters = 5;
    }
    for p in &mut cfg.attack.fsa {
        p.max_iters = 10;
    }
    // Same output path both times: config.json records it.
    let tmp = tempfile::tempdir().unwrap();
    cfg.output_dir = tmp.path().join("run");
    let mut runs = Vec::new();
    for _ in 0..2 {
        run_experiment(&cfg).unwrap();
        runs.push(artifacts(&cfg.output_dir));
        fs::remove_dir_all(&cfg.output_dir).unwrap();
    }
    let differing: Vec<&String> = runs[0].keys().filter(|k| runs[1].get(*k) != runs[0].get(*k)).collect();
    let ok = !runs[0].is_empty() && runs[0].len() == runs[1].len() && differing.is_empty();
    (ok, format!("{} artifacts compared, differing {differing:?}", runs[0].len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", c1),
        ("loss oracle", c2),
        ("quantization exactness", c3),
        ("FSA constraint audit", c4),
        ("PBS efficacy", c5),
        ("detection separation", c6),
        ("recovery efficacy", c7),
        ("recovery difficulty gradient", c8),
        ("end-to-end determinism", c9),
    ];
    let filter: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = run();
        if !ok {
            failed += 1;
        }
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {verdict} {name} [{:.1}s]: {detail}",
            i + 1,
            start.elapsed().as_secs_f32()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
