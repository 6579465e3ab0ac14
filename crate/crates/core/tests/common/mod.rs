//! Helpers shared by integration test targets.
#![allow(dead_code)]

pub mod oracles;

use brltm::model::{classification_loss, mlm_loss, ModelConfig, ParamKind, Weights};
use brltm::rng::{stream, Purpose};
use brltm::sequencer::{apply_mlm_mask, Batch, Segment, TokenSequence};
use brltm::tensor::{Graph, Tensor};
use brltm::vocab::{CLS, N_SPECIALS, SEP};
use rand::Rng as _;

/// Random well-formed sequence of exactly `len` tokens over `vocab_size` ids.
pub fn random_sequence(rng: &mut brltm::rng::Rng, vocab_size: usize, len: usize, label: u8) -> TokenSequence {
    let mut tokens = vec![CLS];
    let mut segments = vec![Segment::A];
    let mut ages = vec![rng.gen_range(20..90)];
    let mut visit = 0;
    let mut in_visit = 0;
    while tokens.len() < len {
        let remaining = len - tokens.len();
        let close = remaining == 1 || (in_visit > 0 && rng.gen_bool(0.3));
        let seg = if visit % 2 == 0 { Segment::A } else { Segment::B };
        if close {
            tokens.push(SEP);
            in_visit = 0;
        } else {
            tokens.push(rng.gen_range(N_SPECIALS..vocab_size));
            in_visit += 1;
        }
        segments.push(seg);
        ages.push(ages[0] + visit);
        if close {
            visit += 1;
        }
    }
    TokenSequence {
        tokens,
        positions: (0..len).collect(),
        segments,
        ages,
        gender: rng.gen_range(0..2),
        pad_mask: vec![true; len],
        mlm_targets: None,
        class_label: Some(label),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Mlm,
    Classification,
}

/// Worst relative gradient error over every trainable scalar.
pub struct GradientReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Two sequences of lengths `lens`, masked for the MLM objective.
pub fn gradient_batch(config: &ModelConfig, lens: [usize; 2], objective: Objective, seed: u64) -> Batch {
    let mut rng = stream(seed, Purpose::Split, 0);
    let seqs: Vec<TokenSequence> = lens
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let s = random_sequence(&mut rng, config.vocab_size, n, i as u8);
            match objective {
                Objective::Mlm => {
                    let mut s = apply_mlm_mask(&s, config.vocab_size, &mut rng).unwrap();
                    s.class_label = None;
                    s
                }
                Objective::Classification => s,
            }
        })
        .collect();
    Batch::from_sequences(&seqs.iter().collect::<Vec<_>>()).unwrap()
}

/// Central differences against reverse mode for the whole network. Dropout is
/// active with a fixed stream so every forward pass draws the same masks.
pub fn full_model_gradient_check(
    config: &ModelConfig,
    weights: &Weights<Tensor>,
    batch: &Batch,
    objective: Objective,
    step: f64,
    floor: f64,
) -> GradientReport {
    let loss_of = |w: &Weights<Tensor>, trainable: bool| {
        let mut g = Graph::new();
        let vars = w.register(&mut g, trainable);
        let mut rng = stream(77, Purpose::Dropout, 0);
        let mut dropout = Some(&mut rng);
        let loss = match objective {
            Objective::Mlm => mlm_loss(&mut g, &vars, config, batch, &mut dropout),
            Objective::Classification => classification_loss(&mut g, &vars, config, batch, &mut dropout),
        }
        .unwrap();
        (g, vars, loss)
    };
    let (mut g, vars, loss) = loss_of(weights, true);
    g.backward(loss).unwrap();
    let grads = vars.grads(&g);
    let mut analytic = Vec::new();
    grads.visit(&mut |name, kind, t| {
        if kind != ParamKind::Fixed {
            analytic.push((name.to_string(), t.clone()));
        }
    });

    let mut work = weights.clone();
    let mut report = GradientReport {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (name, grad) in &analytic {
        for j in 0..grad.len() {
            let probe = |w: &mut Weights<Tensor>, delta: f64| {
                w.visit_mut(&mut |n, _, t| {
                    if n == name {
                        t.data_mut()[j] += delta;
                    }
                });
            };
            let original = {
                let mut v = 0.0;
                work.visit(&mut |n, _, t| {
                    if n == name {
                        v = t.data()[j];
                    }
                });
                v
            };
            probe(&mut work, step);
            let (g1, _, l1) = loss_of(&work, false);
            let plus = g1.value(l1).item();
            probe(&mut work, -2.0 * step);
            let (g2, _, l2) = loss_of(&work, false);
            let minus = g2.value(l2).item();
            work.visit_mut(&mut |n, _, t| {
                if n == name {
                    t.data_mut()[j] = original;
                }
            });
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{name}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}

/// Held-out probes for a planted rule: one sequence per companion occurrence
/// whose visit also holds the trigger, with that occurrence replaced by MASK.
/// Returns `(sequence, masked position)`.
pub fn companion_probes(
    seqs: &[TokenSequence],
    trigger: usize,
    companion: usize,
) -> Vec<(TokenSequence, usize)> {
    let mut out = Vec::new();
    for s in seqs {
        // visit spans between SEP tokens
        let mut start = 1;
        for end in 1..s.len() {
            if s.tokens[end] != SEP {
                continue;
            }
            let span = start..end;
            if s.tokens[span.clone()].contains(&trigger) {
                for p in span.clone() {
                    if s.tokens[p] == companion {
                        let mut q = s.clone();
                        q.tokens[p] = brltm::vocab::MASK;
                        let mut targets = vec![None; q.len()];
                        targets[p] = Some(companion);
                        q.mlm_targets = Some(targets);
                        out.push((q, p));
                    }
                }
            }
            start = end + 1;
        }
    }
    out
}

/// Share of probes whose arg-max prediction is the companion.
pub fn companion_accuracy(model: &brltm::model::Model, probes: &[(TokenSequence, usize)], companion: usize) -> f64 {
    let hits = probes
        .iter()
        .filter(|(s, p)| {
            let logits = model.mlm_logits(s).unwrap();
            let row = logits.row(*p);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            best == companion
        })
        .count();
    hits as f64 / probes.len() as f64
}
