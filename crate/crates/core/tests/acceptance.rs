//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use brltm::cohort::{generate_cohort, CohortConfig, PatientRecord, SentinelCodes};
use brltm::interpret::{association_scores, extract_attention, HeadAgg};
use brltm::metrics::{isotonic_regression, paired_t_test, pr_auc, roc_auc, ScoredLabels};
use brltm::model::{init_weights, Checkpoint, Model, ModelConfig};
use brltm::rng::{stream, Purpose};
use brltm::sequencer::{apply_mlm_mask, pretraining_sequence, TokenSequence, WindowSpec};
use brltm::trainer::{finetune, pretrain, FinetuneInit, FinetuneResult, TrainConfig};
use brltm::vocab::{Vocabulary, MASK, N_SPECIALS};
use common::{companion_accuracy, companion_probes, full_model_gradient_check, gradient_batch, oracles, Objective};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64, detail: String) -> Outcome {
    let detail = format!("{detail}; {:.0}s", elapsed.as_secs_f64());
    ensure(elapsed.as_secs() <= limit_secs, detail)
}

// 1

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let config = ModelConfig::preset("desk", 64, 32).unwrap();
    let mut details = Vec::new();
    let mut worst: f64 = 0.0;
    for (objective, lens, seed) in [(Objective::Mlm, [32, 23], 1), (Objective::Classification, [29, 32], 2)] {
        let weights = init_weights(&config, seed, true).unwrap();
        let batch = gradient_batch(&config, lens, objective, seed);
        let r = full_model_gradient_check(&config, &weights, &batch, objective, 1e-4, 1e-6);
        worst = worst.max(r.worst);
        details.push(format!("{objective:?}: {} params, worst {:.2e} at {}", r.checked, r.worst, r.worst_at));
    }
    let detail = details.join("; ");
    if worst >= 1e-4 {
        return Err(detail);
    }
    within(t.elapsed(), 300, detail)
}

// 2

fn masking_statistics() -> Outcome {
    let vocab_size = 20_000;
    let mut rng = stream(2, Purpose::Masking, 0);
    let (mut content, mut selected, mut masked, mut random, mut kept, mut special_hits) = (0usize, 0, 0, 0, 0, 0);
    while content < 200_000 {
        let seq = common::random_sequence(&mut rng, vocab_size, 256, 0);
        let out = apply_mlm_mask(&seq, vocab_size, &mut rng).unwrap();
        let targets = out.mlm_targets.as_ref().unwrap();
        for ((&token, &target), &corrupted) in seq.tokens.iter().zip(targets).zip(&out.tokens) {
            let special = token < N_SPECIALS;
            content += usize::from(!special);
            let Some(original) = target else { continue };
            if special {
                special_hits += 1;
                continue;
            }
            assert_eq!(original, token);
            selected += 1;
            match corrupted {
                MASK => masked += 1,
                t if t == original => kept += 1,
                _ => random += 1,
            }
        }
    }
    let rate = selected as f64 / content as f64;
    let share = |k: usize| k as f64 / selected as f64;
    let detail = format!(
        "{content} content tokens: selected {:.4}, mask/random/keep {:.4}/{:.4}/{:.4}, {special_hits} specials selected",
        rate,
        share(masked),
        share(random),
        share(kept)
    );
    ensure(
        (rate - 0.15).abs() <= 0.005
            && (share(masked) - 0.8).abs() <= 0.01
            && (share(random) - 0.1).abs() <= 0.01
            && (share(kept) - 0.1).abs() <= 0.01
            && special_hits == 0,
        detail,
    )
}

// 3

fn metric_oracles() -> Outcome {
    const GRID: [f64; 3] = [0.1, 0.5, 0.9];
    let mut auc_err: f64 = 0.0;
    let mut configurations = 0usize;
    for n in 1..=8usize {
        for mask in 0..(1u32 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            let pos = labels.iter().filter(|&&y| y == 1).count();
            for code in 0..3usize.pow(n as u32) {
                let scores: Vec<f64> = (0..n).map(|i| GRID[code / 3usize.pow(i as u32) % 3]).collect();
                configurations += 1;
                let sl = ScoredLabels::new(scores.clone(), labels.clone()).unwrap();
                if pos > 0 && pos < n {
                    auc_err = auc_err.max((roc_auc(&sl).unwrap() - oracles::roc_pairs(&scores, &labels)).abs());
                }
                if pos > 0 {
                    auc_err = auc_err.max((pr_auc(&sl).unwrap() - oracles::ap_rank_walk(&scores, &labels)).abs());
                }
            }
        }
    }

    let mut rng = stream(3, Purpose::Split, 0);
    let mut iso_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
        let got = isotonic_regression(&y, &w);
        for (a, b) in got.iter().zip(oracles::isotonic_minmax(&y, &w)) {
            iso_err = iso_err.max((a - b).abs());
        }
    }

    let mut t_err: f64 = 0.0;
    for _ in 0..5 {
        let a: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 0.1 + rng.gen_range(-0.2..0.2)).collect();
        let r = paired_t_test(&a, &b).unwrap();
        t_err = t_err.max((r.p - oracles::t_two_tailed(r.t, 9.0)).abs());
    }
    let detail = format!(
        "{configurations} configurations, AUC error {auc_err:.1e}; isotonic error {iso_err:.1e}; t-test p error {t_err:.1e}"
    );
    ensure(auc_err < 1e-12 && iso_err < 1e-9 && t_err < 1e-6, detail)
}

// 4 and 7

struct Planted {
    model: Model,
    vocab: Vocabulary,
    probes: Vec<(TokenSequence, usize)>,
    trigger: usize,
    companion: usize,
    elapsed: Duration,
    epochs: usize,
}

fn train_planted() -> Planted {
    let t = Instant::now();
    let cohort = CohortConfig::planted();
    let records = generate_cohort(&cohort).unwrap();
    let vocab = Vocabulary::build(&records);
    let model_cfg = ModelConfig::preset("desk", vocab.len(), 64).unwrap();
    let train_cfg = TrainConfig::desk_pretrain();
    let result = pretrain(&records, &vocab, &model_cfg, &train_cfg).unwrap();
    let elapsed = t.elapsed();

    // an independently generated cohort stands in for held-out patients
    let fresh = generate_cohort(&CohortConfig {
        n_patients: 1000,
        seed: 99,
        ..cohort.clone()
    })
    .unwrap();
    let seqs: Vec<TokenSequence> = fresh.iter().filter_map(|r| pretraining_sequence(r, &vocab, 64)).collect();
    let rule = &cohort.association_rules[0];
    let trigger = vocab.encode(&rule.trigger);
    let companion = vocab.encode(&rule.companion);
    Planted {
        probes: companion_probes(&seqs, trigger, companion),
        model: result.best,
        vocab,
        trigger,
        companion,
        elapsed,
        epochs: train_cfg.epochs,
    }
}

fn planted_recovery(p: &Planted) -> Outcome {
    let acc = companion_accuracy(&p.model, &p.probes, p.companion);
    let detail = format!("top-1 {acc:.4} on {} held-out probes after {} epochs", p.probes.len(), p.epochs);
    if acc < 0.90 || p.epochs > 30 {
        return Err(detail);
    }
    within(p.elapsed, 900, detail)
}

fn attention_recovery(p: &Planted) -> Outcome {
    let hits = p
        .probes
        .iter()
        .filter(|(s, q)| {
            let map = extract_attention(&p.model, s, &p.vocab).unwrap();
            let ranked = association_scores(&map, *q, None, HeadAgg::Mean).unwrap();
            ranked.iter().take(3).any(|a| s.tokens[a.position] == p.trigger)
        })
        .count();
    let share = hits as f64 / p.probes.len() as f64;
    ensure(share >= 0.80, format!("trigger in top 3 for {share:.4} of {} queries", p.probes.len()))
}

// 5 and 6

struct Precursor {
    records: Vec<PatientRecord>,
    vocab: Vocabulary,
    checkpoint: Checkpoint,
    pretrain_time: Duration,
}

/// Sequence length for the precursor records.
const PRECURSOR_MAX_LEN: usize = 32;

fn pretrain_precursor() -> Precursor {
    let t = Instant::now();
    let records = generate_cohort(&CohortConfig::precursor()).unwrap();
    let vocab = Vocabulary::build(&records);
    let model_cfg = ModelConfig::preset("desk", vocab.len(), PRECURSOR_MAX_LEN).unwrap();
    let result = pretrain(&records, &vocab, &model_cfg, &TrainConfig::desk_pretrain()).unwrap();
    Precursor {
        checkpoint: Checkpoint::new(&result.best, &vocab),
        records,
        vocab,
        pretrain_time: t.elapsed(),
    }
}

fn run_finetune(p: &Precursor, init: &FinetuneInit, specs: &[WindowSpec], n_splits: usize) -> FinetuneResult {
    let cfg = TrainConfig {
        n_splits,
        ..TrainConfig::desk_finetune()
    };
    finetune(init, &p.records, &p.vocab, specs, &SentinelCodes::default(), &cfg).unwrap()
}

fn planted_prediction(p: &Precursor) -> Outcome {
    let t = Instant::now();
    let result = run_finetune(p, &FinetuneInit::Pretrained(Box::new(p.checkpoint.clone())), &WindowSpec::standard(), 10);
    let elapsed = p.pretrain_time + t.elapsed();
    let means: Vec<f64> = result.windows.iter().map(|w| w.roc_auc.mean).collect();
    let shown: Vec<String> = result.windows.iter().map(|w| format!("{} {}", w.window, w.roc_auc.display())).collect();
    let detail = format!("ROC AUC {}", shown.join(", "));
    if means[0] < 0.95 || means.windows(2).any(|m| m[1] > m[0]) {
        return Err(detail);
    }
    within(elapsed, 1800, detail)
}

/// Splits averaged when comparing validation curves.
const TWO_STAGE_SPLITS: usize = 5;

fn two_stage_benefit(p: &Precursor) -> Outcome {
    let specs = [WindowSpec::new(14)];
    let pretrained = run_finetune(p, &FinetuneInit::Pretrained(Box::new(p.checkpoint.clone())), &specs, TWO_STAGE_SPLITS);
    let scratch = run_finetune(p, &FinetuneInit::Scratch(p.checkpoint.config.clone()), &specs, TWO_STAGE_SPLITS);
    let curve = |r: &FinetuneResult| {
        let splits = &r.windows[0].splits;
        (1..=5)
            .map(|e| splits.iter().map(|s| s.validation_pr_auc[e]).sum::<f64>() / splits.len() as f64)
            .collect::<Vec<f64>>()
    };
    let (a, b) = (curve(&pretrained), curve(&scratch));
    let violations = a.iter().zip(&b).filter(|(x, y)| x < y).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    ensure(
        violations <= 1,
        format!(
            "mean validation PR AUC over {TWO_STAGE_SPLITS} splits, epochs 1-5: pretrained [{}] vs scratch [{}], {violations} violations",
            fmt(&a),
            fmt(&b)
        ),
    )
}

// 8

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["brltm"];
    argv.extend_from_slice(args);
    match brltm::cli::run(argv.clone()) {
        0 => Ok(()),
        code => Err(format!("{argv:?} exited with {code}")),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let records = dir.join("records.jsonl");
    let vocab = dir.join("vocab.json");
    cli(&["gen-data", "--preset", "precursor", "--n-patients", "80", "--seed", "4", "--out", s(&records)])?;
    cli(&["build-vocab", "--records", s(&records), "--out", s(&vocab)])?;
    let pre = dir.join("pre");
    cli(&[
        "pretrain", "--records", s(&records), "--vocab", s(&vocab), "--epochs", "2", "--seed", "4", "--out-dir",
        s(&pre),
    ])?;
    let ft = dir.join("ft");
    cli(&[
        "finetune", "--records", s(&records), "--vocab", s(&vocab), "--checkpoint", s(&pre.join("best.ckpt")),
        "--window", "14d", "--epochs", "2", "--splits", "2", "--seed", "4", "--out-dir", s(&ft),
    ])?;
    cli(&[
        "evaluate", "--records", s(&records), "--vocab", s(&vocab), "--checkpoint", s(&ft.join("model.ckpt")),
        "--splits", "3", "--calibrate", "--out", s(&dir.join("eval.json")),
    ])
}

const PIPELINE_FILES: [&str; 10] = [
    "records.jsonl",
    "vocab.json",
    "pre/best.ckpt",
    "pre/last.ckpt",
    "pre/metrics.csv",
    "pre/summary.json",
    "ft/model.ckpt",
    "ft/metrics.csv",
    "ft/results.json",
    "eval.json",
];

const MANIFESTS: [&str; 5] = [
    "records.jsonl.manifest.json",
    "vocab.json.manifest.json",
    "pre/manifest.json",
    "ft/manifest.json",
    "eval.json.manifest.json",
];

/// Manifest text with the run directory replaced by a placeholder.
fn manifest(dir: &Path, name: &str) -> Result<String, String> {
    let text = fs::read_to_string(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
    Ok(text.replace(s(dir), "<run>"))
}

fn reproducibility() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let mut differing = Vec::new();
    for f in PIPELINE_FILES {
        let (x, y) = (fs::read(a.join(f)), fs::read(b.join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => differing.push(f.to_string()),
        }
    }
    for m in MANIFESTS {
        if manifest(&a, m)? != manifest(&b, m)? {
            differing.push(m.to_string());
        }
    }
    if differing.is_empty() {
        Ok(format!(
            "{} outputs byte-identical and {} manifests identical up to the run directory",
            PIPELINE_FILES.len(),
            MANIFESTS.len()
        ))
    } else {
        Err(format!("differing: {}", differing.join(", ")))
    }
}

// 9

/// Embedding size, layers, heads and intermediate size of each published configuration.
const PAPER_PRESETS: [(&str, [u64; 4]); 4] = [
    ("paper-all", [216, 9, 12, 512]),
    ("paper-no-topic", [240, 9, 12, 512]),
    ("paper-no-cpt", [252, 6, 12, 256]),
    ("paper-no-topic-cpt", [264, 6, 12, 256]),
];

fn configuration_parity() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = root.path();
    let records = d.join("records.jsonl");
    let vocab = d.join("vocab.json");
    cli(&["gen-data", "--n-patients", "12", "--out", s(&records)])?;
    cli(&["build-vocab", "--records", s(&records), "--out", s(&vocab)])?;
    let mut seen = Vec::new();
    for (preset, want) in PAPER_PRESETS {
        let out = d.join(preset);
        cli(&[
            "pretrain", "--preset", preset, "--records", s(&records), "--vocab", s(&vocab), "--epochs", "1",
            "--out-dir", s(&out),
        ])?;
        let text = fs::read_to_string(out.join("manifest.json")).map_err(|e| e.to_string())?;
        let m: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let a = &m["architecture"];
        let got: Vec<u64> = ["hidden_size", "n_layers", "n_heads", "intermediate_size"]
            .iter()
            .map(|k| a[k].as_u64().unwrap_or(0))
            .collect();
        if got != want || a["preset"] != preset {
            return Err(format!("{preset}: manifest reports {got:?}, expected {want:?}"));
        }
        seen.push(format!("{preset} {got:?}"));
    }
    Ok(seen.join(", "))
}

/// Criteria named on the command line, or all of them.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=9).collect()
    } else {
        picked
    }
}

fn main() {
    let wanted = selected();
    let want = |n: usize| wanted.contains(&n);
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !want(n) {
            return;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} {name}: PASS ({d}) [{secs:.0}s]"),
            Err(d) => {
                failures += 1;
                println!("criterion {n} {name}: FAIL ({d}) [{secs:.0}s]");
            }
        }
    };

    report(1, "gradient integrity", &mut gradient_integrity);
    report(2, "masking statistics", &mut masking_statistics);
    report(3, "metric oracles", &mut metric_oracles);

    if want(4) || want(7) {
        let planted = catch_unwind(train_planted).map_err(|_| "training failed".to_string());
        report(4, "planted MLM recovery", &mut || planted.as_ref().map_err(Clone::clone).and_then(planted_recovery));
        report(7, "attention associations", &mut || {
            planted.as_ref().map_err(Clone::clone).and_then(attention_recovery)
        });
    }

    if want(5) || want(6) {
        let precursor = catch_unwind(pretrain_precursor).map_err(|_| "pretraining failed".to_string());
        report(5, "planted prediction", &mut || {
            precursor.as_ref().map_err(Clone::clone).and_then(planted_prediction)
        });
        report(6, "two-stage benefit", &mut || {
            precursor.as_ref().map_err(Clone::clone).and_then(two_stage_benefit)
        });
    }

    report(8, "reproducibility", &mut reproducibility);
    report(9, "configuration parity", &mut configuration_parity);

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
