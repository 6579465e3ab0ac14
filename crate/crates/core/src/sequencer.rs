//! From patient records to model-ready token sequences.
//!
//! A sequence is laid out as `CLS, v1 codes, SEP, v2 codes, SEP, …`. Five
//! index channels run alongside the tokens: position, segment (alternating
//! `A`/`B` per visit), age at the token's visit, and the patient's gender.

use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cohort::{PatientRecord, SentinelCodes, Visit};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::{TokenId, Vocabulary, CLS, MASK, N_SPECIALS, PAD, SEP};

pub const DEFAULT_MAX_LEN: usize = 256;
pub const PRETRAIN_BATCH_SIZE: usize = 256;
pub const FINETUNE_BATCH_SIZE: usize = 64;

pub const MASK_SELECT_PROB: f64 = 0.15;
pub const MASK_TOKEN_PROB: f64 = 0.8;
pub const MASK_RANDOM_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    A,
    B,
}

impl Segment {
    pub fn index(self) -> usize {
        match self {
            Segment::A => 0,
            Segment::B => 1,
        }
    }

    /// Segment of the 1-based `visit`th visit.
    fn of_visit(visit: usize) -> Self {
        if visit % 2 == 1 {
            Segment::A
        } else {
            Segment::B
        }
    }
}

/// Prediction window, data window and exclusion gap, in days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub prediction_days: i64,
    pub data_days: i64,
    pub exclusion_days: i64,
}

impl WindowSpec {
    pub const PREDICTION_WINDOWS: [i64; 4] = [14, 91, 182, 365];

    pub fn new(prediction_days: i64) -> Self {
        Self {
            prediction_days,
            data_days: 182,
            exclusion_days: 15,
        }
    }

    /// The two-week, three-month, six-month and one-year windows.
    pub fn standard() -> Vec<WindowSpec> {
        Self::PREDICTION_WINDOWS.iter().map(|&d| Self::new(d)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prediction_days <= 0 || self.data_days <= 0 || self.exclusion_days <= 0 {
            return Err(Error::Config(format!("window durations must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}d", self.prediction_days)
    }

    /// Inclusive date range of usable data before `reference`.
    pub fn bounds(&self, reference: NaiveDate) -> (NaiveDate, NaiveDate) {
        let end = reference - Duration::days(self.prediction_days.max(self.exclusion_days));
        (end - Duration::days(self.data_days), end)
    }
}

impl FromStr for WindowSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "14d" | "91d" | "182d" | "365d" => Ok(Self::new(s.trim_end_matches('d').parse().unwrap())),
            _ => Err(Error::Config(format!(
                "unknown prediction window {s:?}; expected one of 14d, 91d, 182d, 365d"
            ))),
        }
    }
}

/// A record restricted to the visits a model may see, plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Windowed {
    pub record: PatientRecord,
    pub label: u8,
}

/// Visits strictly before onset (all visits when there is none).
pub fn pre_onset(record: &PatientRecord) -> PatientRecord {
    let mut r = record.clone();
    if let Some(onset) = r.onset {
        r.visits.retain(|v| v.date < onset);
    }
    r
}

/// Restricts a record to the data a model may use.
///
/// With `for_prediction`, the reference time is the onset date (or the last
/// visit when there is none), the window ends `max(prediction, exclusion)`
/// days earlier and spans `data_days`; sentinel codes are stripped. Without
/// it, the full pre-onset history is kept as is. Returns `None` when nothing
/// remains.
pub fn select_window(
    record: &PatientRecord,
    spec: &WindowSpec,
    sentinels: &SentinelCodes,
    for_prediction: bool,
) -> Option<Windowed> {
    let label = u8::from(record.is_depressed());
    let mut r = pre_onset(record);
    if for_prediction {
        let reference = record.onset.or_else(|| record.visits.last().map(|v| v.date))?;
        let (start, end) = spec.bounds(reference);
        r.visits.retain(|v| v.date >= start && v.date <= end);
        for v in r.visits.iter_mut() {
            v.events.retain(|e| !sentinels.contains(e));
        }
        r.visits.retain(|v| !v.events.is_empty());
    }
    (!r.visits.is_empty()).then_some(Windowed { record: r, label })
}

/// Records with usable data under every window in `specs`.
pub fn eligibility_filter(records: &[PatientRecord], specs: &[WindowSpec], sentinels: &SentinelCodes) -> Vec<PatientRecord> {
    records
        .iter()
        .filter(|r| specs.iter().all(|s| select_window(r, s, sentinels, true).is_some()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub ages: Vec<i32>,
    pub gender: usize,
    pub pad_mask: Vec<bool>,
    /// Original token at positions chosen for masking, `None` elsewhere.
    pub mlm_targets: Option<Vec<Option<TokenId>>>,
    pub class_label: Option<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions holding codes (not CLS, SEP or PAD).
    pub fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| is_content_slot(t))
            .map(|(p, _)| p)
    }

    /// Checks the structural invariants of a sequence.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let n = self.tokens.len();
        let fail = |m: &str| Err(Error::Contract(format!("malformed sequence: {m}")));
        if n == 0 || n > max_len {
            return fail("length outside 1..=max_len");
        }
        if [self.positions.len(), self.segments.len(), self.ages.len(), self.pad_mask.len()]
            .iter()
            .any(|&l| l != n)
        {
            return fail("channel lengths differ");
        }
        if self.tokens[0] != CLS {
            return fail("first token is not CLS");
        }
        if self.positions.iter().enumerate().any(|(i, &p)| i != p) {
            return fail("positions are not 0..n");
        }
        let real = self.pad_mask.iter().take_while(|&&m| m).count();
        if self.pad_mask[real..].iter().any(|&m| m) {
            return fail("padding is not a suffix");
        }
        if self.tokens[..real].contains(&PAD) || self.tokens[real..].iter().any(|&t| t != PAD) {
            return fail("PAD tokens disagree with pad mask");
        }
        if real < 2 || self.tokens[real - 1] != SEP {
            return fail("last visit is not terminated by SEP");
        }
        if self.tokens[1..real].windows(2).any(|w| w[0] == SEP && w[1] == SEP) || self.tokens[1] == SEP {
            return fail("empty visit");
        }
        if let Some(targets) = &self.mlm_targets {
            if targets.len() != n {
                return fail("target length differs");
            }
            for (p, t) in targets.iter().enumerate() {
                if t.is_some() && (!self.pad_mask[p] || matches!(self.tokens[p], CLS | SEP)) {
                    return fail("target on a non-content position");
                }
            }
        }
        Ok(())
    }
}

fn is_content_slot(t: TokenId) -> bool {
    !matches!(t, PAD | CLS | SEP)
}

fn sorted_codes(visit: &Visit, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut events: Vec<(crate::cohort::Modality, String)> =
        visit.events.iter().map(|e| (e.modality, e.token())).collect();
    events.sort();
    events.iter().map(|(_, t)| vocab.id_of(t)).collect()
}

/// Lays out a windowed record as a sequence of at most `max_len` tokens.
///
/// Visits keep their codes ordered by modality (DIAG, PROC, MED, TOPIC) and
/// lexicographically within a modality. When the sequence is too long whole
/// visits are dropped from the oldest end; a single remaining visit that is
/// still too long keeps its first `max_len - 2` codes.
pub fn build_sequence(windowed: &Windowed, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let record = &windowed.record;
    if record.visits.iter().all(|v| v.events.is_empty()) {
        return Err(Error::Contract("cannot build a sequence from a record with no events".into()));
    }
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold CLS, a code and SEP")));
    }
    let visits: Vec<(&Visit, Vec<TokenId>)> = record
        .visits
        .iter()
        .filter(|v| !v.events.is_empty())
        .map(|v| (v, sorted_codes(v, vocab)))
        .collect();

    let mut first = 0;
    let mut length: usize = 1 + visits.iter().map(|(_, c)| c.len() + 1).sum::<usize>();
    while length > max_len && first + 1 < visits.len() {
        length -= visits[first].1.len() + 1;
        first += 1;
    }
    let kept = &visits[first..];

    let mut seq = TokenSequence {
        tokens: vec![CLS],
        positions: vec![],
        segments: vec![Segment::A],
        ages: vec![record.age_at(kept[0].0.date)],
        gender: record.gender.index(),
        pad_mask: vec![],
        mlm_targets: None,
        class_label: Some(windowed.label),
    };
    for (i, (visit, codes)) in kept.iter().enumerate() {
        let segment = Segment::of_visit(i + 1);
        let age = record.age_at(visit.date);
        let room = max_len - 1 - seq.tokens.len();
        for &c in codes.iter().take(room) {
            seq.tokens.push(c);
            seq.segments.push(segment);
            seq.ages.push(age);
        }
        seq.tokens.push(SEP);
        seq.segments.push(segment);
        seq.ages.push(age);
    }
    seq.positions = (0..seq.tokens.len()).collect();
    seq.pad_mask = vec![true; seq.tokens.len()];
    Ok(seq)
}

/// Sequence for masked-language-model pretraining: full pre-onset history,
/// no label.
pub fn pretraining_sequence(record: &PatientRecord, vocab: &Vocabulary, max_len: usize) -> Option<TokenSequence> {
    let r = pre_onset(record);
    if r.visits.iter().all(|v| v.events.is_empty()) {
        return None;
    }
    let w = Windowed { record: r, label: 0 };
    let mut seq = build_sequence(&w, vocab, max_len).ok()?;
    seq.class_label = None;
    Some(seq)
}

/// Selects content positions independently with probability 0.15; a selected
/// token becomes `MASK` 80% of the time, a uniformly random content token 10%
/// of the time, and is left alone otherwise. If nothing is selected, one
/// content position is chosen uniformly.
pub fn apply_mlm_mask(seq: &TokenSequence, vocab_size: usize, rng: &mut Rng) -> Result<TokenSequence> {
    if seq.mlm_targets.is_some() {
        return Err(Error::Contract("sequence is already masked".into()));
    }
    let candidates: Vec<usize> = seq
        .content_positions()
        .filter(|&p| seq.pad_mask[p])
        .collect();
    if candidates.is_empty() {
        return Err(Error::Contract("no content tokens to mask".into()));
    }
    if vocab_size <= N_SPECIALS {
        return Err(Error::Contract("vocabulary has no content tokens".into()));
    }
    let mut out = seq.clone();
    let mut targets = vec![None; seq.len()];
    let mut corrupt = |p: usize, rng: &mut Rng, out: &mut TokenSequence| {
        targets[p] = Some(seq.tokens[p]);
        let r: f64 = rng.gen();
        if r < MASK_TOKEN_PROB {
            out.tokens[p] = MASK;
        } else if r < MASK_TOKEN_PROB + MASK_RANDOM_PROB {
            out.tokens[p] = rng.gen_range(N_SPECIALS..vocab_size);
        }
    };
    let mut any = false;
    for &p in &candidates {
        if rng.gen_bool(MASK_SELECT_PROB) {
            corrupt(p, rng, &mut out);
            any = true;
        }
    }
    if !any {
        let p = candidates[rng.gen_range(0..candidates.len())];
        corrupt(p, rng, &mut out);
    }
    out.mlm_targets = Some(targets);
    Ok(out)
}

/// Sequences stacked into `[batch, len]` channels, padded to the longest.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub tokens: Vec<TokenId>,
    pub segments: Vec<usize>,
    pub ages: Vec<i32>,
    pub genders: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub mlm_targets: Option<Vec<Option<TokenId>>>,
    pub labels: Option<Vec<u8>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Batch> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut b = Batch {
            size: seqs.len(),
            len,
            tokens: Vec::with_capacity(seqs.len() * len),
            segments: Vec::with_capacity(seqs.len() * len),
            ages: Vec::with_capacity(seqs.len() * len),
            genders: Vec::with_capacity(seqs.len()),
            pad_mask: Vec::with_capacity(seqs.len() * len),
            mlm_targets: seqs[0].mlm_targets.as_ref().map(|_| Vec::with_capacity(seqs.len() * len)),
            labels: seqs[0].class_label.map(|_| Vec::with_capacity(seqs.len())),
        };
        for s in seqs {
            let pad = len - s.len();
            b.tokens.extend(s.tokens.iter().copied().chain(std::iter::repeat_n(PAD, pad)));
            b.segments.extend(s.segments.iter().map(|g| g.index()).chain(std::iter::repeat_n(0, pad)));
            b.ages.extend(s.ages.iter().copied().chain(std::iter::repeat_n(0, pad)));
            b.pad_mask.extend(s.pad_mask.iter().copied().chain(std::iter::repeat_n(false, pad)));
            b.genders.push(s.gender);
            match (&mut b.mlm_targets, &s.mlm_targets) {
                (Some(all), Some(t)) => all.extend(t.iter().copied().chain(std::iter::repeat_n(None, pad))),
                (None, None) => {}
                _ => return Err(Error::Contract("batch mixes masked and unmasked sequences".into())),
            }
            match (&mut b.labels, s.class_label) {
                (Some(all), Some(y)) => all.push(y),
                (None, None) => {}
                _ => return Err(Error::Contract("batch mixes labelled and unlabelled sequences".into())),
            }
        }
        Ok(b)
    }

    /// Position index `p` within row `b`.
    pub fn flat(&self, b: usize, p: usize) -> usize {
        b * self.len + p
    }
}

/// Consecutive batches of `batch_size` (the last may be smaller).
pub fn batchify(seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    seqs.chunks(batch_size)
        .map(|chunk| Batch::from_sequences(&chunk.iter().collect::<Vec<_>>()))
        .collect()
}

/// Aligned text rows (token, position, segment, age) for one sequence.
pub fn render_rows(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    let tokens: Vec<String> = seq
        .tokens
        .iter()
        .map(|&t| vocab.decode(t).unwrap_or("?").to_string())
        .collect();
    let rows: [(&str, Vec<String>); 4] = [
        ("token", tokens),
        ("position", seq.positions.iter().map(|p| p.to_string()).collect()),
        (
            "segment",
            seq.segments
                .iter()
                .map(|s| if *s == Segment::A { "A".into() } else { "B".into() })
                .collect(),
        ),
        ("age", seq.ages.iter().map(|a| a.to_string()).collect()),
    ];
    let widths: Vec<usize> = (0..seq.len())
        .map(|i| rows.iter().map(|(_, r)| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (name, cells) in &rows {
        let _ = write!(out, "{name:<9}");
        for (cell, w) in cells.iter().zip(&widths) {
            let _ = write!(out, " {cell:<w$}");
        }
        out = out.trim_end().to_string();
        out.push('\n');
    }
    let _ = writeln!(out, "gender    {}", if seq.gender == 0 { "F" } else { "M" });
    out
}
