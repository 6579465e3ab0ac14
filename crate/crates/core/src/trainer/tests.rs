use super::*;
use crate::cohort::{generate_cohort, CohortConfig};
use crate::model::PositionalEncoding;

fn tiny_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        preset: "tiny".into(),
        vocab_size: vocab,
        hidden_size: 8,
        n_layers: 1,
        n_heads: 2,
        intermediate_size: 16,
        max_len: 32,
        max_age: 120,
        dropout: 0.1,
        tied_mlm: true,
        positional_encoding: PositionalEncoding::Sinusoidal,
    }
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::pretrain_default();
    let total = 1000;
    assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(10, total, &cfg).unwrap(), 1e-4);
    assert_eq!(lr_at(5, total, &cfg).unwrap(), 0.5e-4);
    assert_eq!(lr_at(total, total, &cfg).unwrap(), 0.0);
    assert!((lr_at(505, total, &cfg).unwrap() - 0.5e-4).abs() < 1e-18);
    assert!(matches!(lr_at(0, 0, &cfg), Err(Error::Config(_))));
    // warmup rounds up: ceil(0.01 · 150) = 2
    assert_eq!(lr_at(2, 150, &cfg).unwrap(), 1e-4);
    assert_eq!(lr_at(1, 150, &cfg).unwrap(), 0.5e-4);
}

#[test]
fn schedule_is_unimodal() {
    let cfg = TrainConfig::pretrain_default();
    let lrs: Vec<f64> = (0..=777).map(|s| lr_at(s, 777, &cfg).unwrap()).collect();
    let peak = lrs.iter().position(|&x| x == cfg.peak_lr).unwrap();
    assert!(lrs[..=peak].windows(2).all(|w| w[0] < w[1]));
    assert!(lrs[peak..].windows(2).all(|w| w[0] > w[1]));
}

fn no_decay() -> TrainConfig {
    TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::pretrain_default()
    }
}

#[test]
fn zero_gradient_leaves_parameters() {
    let m = Model::init(tiny_model(12), 0, true).unwrap();
    let mut w = m.weights.clone();
    let grads = w.zeros_like();
    let mut state = AdamState::new(&w);
    adam_step(&mut w, &grads, &mut state, 1e-3, &no_decay()).unwrap();
    assert_eq!(w, m.weights);
}

#[test]
fn adam_minimises_a_parabola() {
    let cfg = no_decay();
    let (mut x, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
    for t in 1..=500 {
        let g = [2.0 * (x[0] - 3.0)];
        adam_update(&mut x, &g, &mut m, &mut v, t, 0.1, 0.0, &cfg);
    }
    assert!((x[0] - 3.0).abs() < 1e-2, "{}", x[0]);
}

#[test]
fn first_step_is_scale_free() {
    let cfg = no_decay();
    for g in [1e-3, 0.5, 40.0, -7.0] {
        let (mut x, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        adam_update(&mut x, &[g], &mut m, &mut v, 1, 0.01, 0.0, &cfg);
        assert!(((1.0 - x[0]).abs() - 0.01).abs() < 1e-5, "g {g}: {}", x[0]);
    }
}

#[test]
fn decay_skips_biases_norms_and_positions() {
    let m = Model::init(tiny_model(12), 0, true).unwrap();
    let mut w = m.weights.clone();
    let grads = w.zeros_like();
    let mut state = AdamState::new(&w);
    let cfg = TrainConfig::pretrain_default();
    adam_step(&mut w, &grads, &mut state, 0.5, &cfg).unwrap();
    assert_eq!(w.position, m.weights.position);
    assert_eq!(w.layers[0].ffn_norm, m.weights.layers[0].ffn_norm);
    let before = m.weights.layers[0].query.weight.data()[3];
    assert!((w.layers[0].query.weight.data()[3] - before * 0.95).abs() < 1e-15);
    assert!((w.code.data()[7] - m.weights.code.data()[7] * 0.95).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let m = Model::init(tiny_model(12), 0, true).unwrap();
    let mut w = m.weights.clone();
    let mut grads = w.zeros_like();
    grads.layers[0].ffn_in.bias.data_mut()[2] = f64::NAN;
    let mut state = AdamState::new(&w);
    match adam_step(&mut w, &grads, &mut state, 1e-3, &no_decay()) {
        Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "layers.0.ffn.input.bias"),
        other => panic!("{other:?}"),
    }
    assert_eq!(w, m.weights);
    assert_eq!(state.t, 0);
}

#[test]
fn selection_takes_first_best_validation_epoch() {
    assert_eq!(select_epoch(&[0.2, 0.5, 0.4, 0.5]), 1);
    assert_eq!(select_epoch(&[0.9]), 0);
}

#[test]
fn splits_partition_by_fraction() {
    let cfg = TrainConfig::finetune_default();
    let s = make_split(101, 3, &cfg);
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (71, 10, 20));
    let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..101).collect::<Vec<_>>());
    assert_eq!(make_split(101, 3, &cfg), s);
    assert_ne!(make_split(101, 4, &cfg), s);
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::finetune_default();
    c.split_fractions = [0.7, 0.2, 0.2];
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    assert!(TrainConfig::preset("desk", true).is_ok());
    assert!(TrainConfig::preset("fast", true).is_err());
}

fn small_cohort(n: usize) -> (Vec<PatientRecord>, Vocabulary) {
    let cfg = CohortConfig {
        n_patients: n,
        ..CohortConfig::planted()
    };
    let records = generate_cohort(&cfg).unwrap();
    let vocab = Vocabulary::build(&records);
    (records, vocab)
}

fn quick_pretrain() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 2,
        eval_every: 3,
        peak_lr: 1e-3,
        ..TrainConfig::pretrain_default()
    }
}

#[test]
fn pretraining_is_deterministic_and_keeps_positions_fixed() {
    let (records, vocab) = small_cohort(80);
    let mc = tiny_model(vocab.len());
    let cfg = quick_pretrain();
    let a = pretrain(&records, &vocab, &mc, &cfg).unwrap();
    let b = pretrain(&records, &vocab, &mc, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.weights, b.best.weights);
    assert_eq!(a.last.weights.position, Model::init(mc.clone(), 0, false).unwrap().weights.position);
    assert_ne!(a.last.weights.code, Model::init(mc, 0, false).unwrap().weights.code);
    assert_eq!(a.epoch_losses.len(), 2);
    assert!(a.log.metric("heldout_loss").count() >= 2);
    assert!(!a.heldout.is_empty());
}

#[test]
fn logged_learning_rates_follow_the_schedule() {
    let (records, vocab) = small_cohort(60);
    let cfg = quick_pretrain();
    let r = pretrain(&records, &vocab, &tiny_model(vocab.len()), &cfg).unwrap();
    let steps: Vec<&LogRow> = r.log.metric("train_loss").collect();
    let total = steps.len();
    for (i, row) in steps.iter().enumerate() {
        assert_eq!(row.step, i);
        assert_eq!(row.lr.unwrap(), lr_at(i, total, &cfg).unwrap());
    }
}

#[test]
fn empty_corpus_is_a_config_error() {
    let (_, vocab) = small_cohort(10);
    let err = pretrain(&[], &vocab, &tiny_model(vocab.len()), &quick_pretrain()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn metric_log_csv_layout() {
    let mut log = MetricLog::default();
    assert_eq!(log.to_csv().unwrap(), b"stage,split,epoch,step,lr,loss,metric_name,value\n");
    log.push(LogRow {
        stage: "pretrain".into(),
        split: None,
        epoch: 1,
        step: 4,
        lr: Some(0.5),
        loss: None,
        metric_name: "train_loss".into(),
        value: 2.25,
    });
    let text = String::from_utf8(log.to_csv().unwrap()).unwrap();
    assert_eq!(text, "stage,split,epoch,step,lr,loss,metric_name,value\npretrain,,1,4,0.5,,train_loss,2.25\n");
}

#[test]
fn single_class_training_split_is_reported() {
    let (records, vocab) = small_cohort(60);
    // the planted cohort has a low onset rate; force every label negative
    let records: Vec<PatientRecord> = records
        .into_iter()
        .map(|mut r| {
            r.onset = None;
            r
        })
        .collect();
    let specs = [WindowSpec::new(14)];
    let cfg = TrainConfig {
        epochs: 1,
        n_splits: 1,
        ..TrainConfig::desk_finetune()
    };
    let err = finetune(
        &FinetuneInit::Scratch(tiny_model(vocab.len())),
        &records,
        &vocab,
        &specs,
        &SentinelCodes::default(),
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Split { split: 0, .. }), "{err}");
}
