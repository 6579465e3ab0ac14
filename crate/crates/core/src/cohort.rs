//! Patient records, the JSON-lines record file, and a synthetic cohort
//! generator with planted structure.
//!
//! The generator plants three kinds of signal:
//!
//! * association rules: whenever a trigger code lands in a visit, its
//!   companion is added to that visit with the rule's probability;
//! * precursor risk codes: each patient carries each risk code with a fixed
//!   probability, the number `k` of carried codes sets the onset probability
//!   `logistic(weight·k + bias)`, and carried codes are emitted into visits
//!   before the reference visit with intensity `exp(-Δt/decay)` where `Δt` is
//!   the number of days to the reference visit;
//! * sentinel codes: a depressed patient's onset visit holds one diagnosis,
//!   one medication and one topic sentinel, mirroring the three ways onset is
//!   identified in practice.
//!
//! Companion, risk and sentinel codes never appear as background codes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "DIAG")]
    Diag,
    #[serde(rename = "PROC")]
    Proc,
    #[serde(rename = "MED")]
    Med,
    #[serde(rename = "TOPIC")]
    Topic,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Diag, Modality::Proc, Modality::Med, Modality::Topic];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Diag => "DIAG",
            Modality::Proc => "PROC",
            Modality::Med => "MED",
            Modality::Topic => "TOPIC",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Deserialize)]
struct RawEvent {
    m: Modality,
    c: String,
}

/// A modality-tagged code. The raw string is non-empty and has no whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawEvent")]
pub struct EventCode {
    #[serde(rename = "m")]
    pub modality: Modality,
    #[serde(rename = "c")]
    pub raw: String,
}

impl TryFrom<RawEvent> for EventCode {
    type Error = Error;

    fn try_from(r: RawEvent) -> Result<Self> {
        EventCode::new(r.m, r.c)
    }
}

impl EventCode {
    pub fn new(modality: Modality, raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        if raw.is_empty() || raw.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!("invalid {modality} code {raw:?}")));
        }
        Ok(Self { modality, raw })
    }

    /// Vocabulary token, `MODALITY:code`, with diagnoses grouped to their
    /// pre-decimal prefix.
    pub fn token(&self) -> String {
        let code = match self.modality {
            Modality::Diag => crate::vocab::group_icd9_unchecked(&self.raw),
            _ => &self.raw,
        };
        format!("{}:{}", self.modality, code)
    }
}

impl fmt::Display for EventCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.modality, self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub date: NaiveDate,
    pub events: Vec<EventCode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    pub fn index(self) -> usize {
        match self {
            Gender::F => 0,
            Gender::M => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub gender: Gender,
    pub birth_year: i32,
    pub onset: Option<NaiveDate>,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn age_at(&self, date: NaiveDate) -> i32 {
        date.year() - self.birth_year
    }

    pub fn is_depressed(&self) -> bool {
        self.onset.is_some()
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRule {
    pub trigger: EventCode,
    pub companion: EventCode,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentinelCodes {
    pub diag: EventCode,
    pub med: EventCode,
    pub topic: EventCode,
}

impl SentinelCodes {
    pub fn all(&self) -> [&EventCode; 3] {
        [&self.diag, &self.med, &self.topic]
    }

    pub fn contains(&self, code: &EventCode) -> bool {
        let token = code.token();
        self.all().iter().any(|s| s.token() == token)
    }
}

impl Default for SentinelCodes {
    fn default() -> Self {
        Self {
            diag: EventCode::new(Modality::Diag, "296.20").unwrap(),
            med: EventCode::new(Modality::Med, "sertraline").unwrap(),
            topic: EventCode::new(Modality::Topic, "topic_depression").unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub codes_per_modality: BTreeMap<Modality, usize>,
    pub visits_range: [usize; 2],
    pub codes_per_visit_range: BTreeMap<Modality, [usize; 2]>,
    pub gap_days: [i64; 2],
    pub first_visit_years: [i32; 2],
    pub birth_years: [i32; 2],
    pub association_rules: Vec<AssociationRule>,
    pub risk_codes: Vec<EventCode>,
    pub risk_carry_probability: f64,
    pub risk_logit_weight: f64,
    pub risk_logit_bias: f64,
    /// Decay constant, in days, of risk-code emission before the reference visit.
    pub precursor_decay_days: f64,
    /// Visits generated after onset for depressed patients.
    pub post_onset_visits: [usize; 2],
    pub sentinel_codes: SentinelCodes,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self::planted()
    }
}

impl CohortConfig {
    fn desk_base() -> Self {
        let sizes = [(Modality::Diag, 4), (Modality::Proc, 15), (Modality::Med, 15), (Modality::Topic, 8)];
        let per_visit = [
            (Modality::Diag, [1, 2]),
            (Modality::Proc, [0, 2]),
            (Modality::Med, [0, 2]),
            (Modality::Topic, [0, 1]),
        ];
        Self {
            n_patients: 2000,
            codes_per_modality: sizes.into_iter().collect(),
            visits_range: [2, 6],
            codes_per_visit_range: per_visit.into_iter().collect(),
            gap_days: [7, 90],
            first_visit_years: [2006, 2010],
            birth_years: [1915, 1990],
            association_rules: Vec::new(),
            risk_codes: Vec::new(),
            risk_carry_probability: 0.5,
            risk_logit_weight: 0.0,
            risk_logit_bias: -1.0,
            precursor_decay_days: 150.0,
            post_onset_visits: [0, 2],
            sentinel_codes: SentinelCodes::default(),
            seed: 0,
        }
    }

    /// Short records with one deterministic association rule,
    /// `DIAG:250.00 → MED:metformin`.
    pub fn planted() -> Self {
        Self {
            association_rules: vec![AssociationRule {
                trigger: EventCode::new(Modality::Diag, "250.00").unwrap(),
                companion: EventCode::new(Modality::Med, "metformin").unwrap(),
                probability: 1.0,
            }],
            ..Self::desk_base()
        }
    }

    /// Long records whose depression label is driven by three precursor risk
    /// codes emitted with decaying intensity before the reference visit.
    pub fn precursor() -> Self {
        Self {
            n_patients: 1000,
            visits_range: [16, 26],
            risk_codes: vec![
                EventCode::new(Modality::Diag, "780.52").unwrap(),
                EventCode::new(Modality::Med, "zolpidem").unwrap(),
                EventCode::new(Modality::Proc, "90791").unwrap(),
            ],
            risk_carry_probability: 0.5,
            risk_logit_weight: 10.0,
            risk_logit_bias: -15.0,
            precursor_decay_days: 300.0,
            ..Self::planted()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "planted" | "desk" => Some(Self::planted()),
            "precursor" => Some(Self::precursor()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for m in Modality::ALL {
            if self.codes_per_modality.get(&m).copied().unwrap_or(0) == 0 {
                return bad(format!("empty {m} vocabulary"));
            }
            let [lo, hi] = self.codes_per_visit_range.get(&m).copied().unwrap_or([0, 0]);
            if lo > hi {
                return bad(format!("{m} codes per visit: min {lo} > max {hi}"));
            }
        }
        if self
            .codes_per_visit_range
            .values()
            .map(|r| r[1])
            .sum::<usize>()
            == 0
        {
            return bad("visits can never hold an event".into());
        }
        let ranges = [
            ("visits_range", self.visits_range[0] as i64, self.visits_range[1] as i64),
            ("gap_days", self.gap_days[0], self.gap_days[1]),
            ("first_visit_years", self.first_visit_years[0].into(), self.first_visit_years[1].into()),
            ("birth_years", self.birth_years[0].into(), self.birth_years[1].into()),
            ("post_onset_visits", self.post_onset_visits[0] as i64, self.post_onset_visits[1] as i64),
        ];
        for (name, lo, hi) in ranges {
            if lo > hi {
                return bad(format!("{name}: min {lo} > max {hi}"));
            }
        }
        if self.visits_range[0] < 1 || self.gap_days[0] < 0 {
            return bad("visits_range min must be ≥ 1 and gaps non-negative".into());
        }
        for r in &self.association_rules {
            if !(0.0..=1.0).contains(&r.probability) {
                return bad(format!("rule {} → {}: probability {} outside [0,1]", r.trigger, r.companion, r.probability));
            }
        }
        if !(0.0..=1.0).contains(&self.risk_carry_probability) {
            return bad("risk_carry_probability outside [0,1]".into());
        }
        if self.precursor_decay_days <= 0.0 {
            return bad("precursor_decay_days must be positive".into());
        }
        if self.risk_codes.iter().any(|c| self.sentinel_codes.contains(c)) {
            return bad("sentinel codes overlap risk codes".into());
        }
        let s = &self.sentinel_codes;
        if s.diag.modality != Modality::Diag || s.med.modality != Modality::Med || s.topic.modality != Modality::Topic {
            return bad("sentinel codes must be one DIAG, one MED and one TOPIC code".into());
        }
        Ok(())
    }

    /// Tokens reserved for planted structure.
    fn reserved_tokens(&self) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = self.sentinel_codes.all().iter().map(|c| c.token()).collect();
        set.extend(self.risk_codes.iter().map(EventCode::token));
        set.extend(self.association_rules.iter().map(|r| r.companion.token()));
        set
    }

    /// Background pool per modality: rule triggers first, then generated
    /// names, skipping anything that collides with reserved tokens.
    pub fn background_pool(&self, modality: Modality) -> Vec<EventCode> {
        let reserved = self.reserved_tokens();
        let target = self.codes_per_modality.get(&modality).copied().unwrap_or(0);
        let mut seen = BTreeSet::new();
        let mut pool = Vec::with_capacity(target);
        let triggers = self
            .association_rules
            .iter()
            .map(|r| r.trigger.clone())
            .filter(|t| t.modality == modality);
        let generated = (0..).map(|i| EventCode::new(modality, generated_name(modality, i)).unwrap());
        for code in triggers.chain(generated) {
            if pool.len() == target {
                break;
            }
            let token = code.token();
            if !reserved.contains(&token) && seen.insert(token) {
                pool.push(code);
            }
        }
        pool
    }
}

fn generated_name(modality: Modality, i: usize) -> String {
    match modality {
        Modality::Diag => format!("{}.{}", 400 + i, (i * 7) % 10),
        Modality::Proc => format!("{}", 10000 + i),
        Modality::Med => format!("med{i:04}"),
        Modality::Topic => format!("topic{i:03}"),
    }
}

// ---------------------------------------------------------------------------
// generation

/// Deterministic cohort for `config`; patient `i` draws from its own stream.
pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<PatientRecord>> {
    config.validate()?;
    let pools: BTreeMap<Modality, Vec<EventCode>> =
        Modality::ALL.iter().map(|&m| (m, config.background_pool(m))).collect();
    Ok((0..config.n_patients)
        .map(|i| generate_patient(config, &pools, i))
        .collect())
}

fn logistic(x: f64) -> f64 {
    crate::tensor::sigmoid(x)
}

/// Onset probability for a patient carrying `k` distinct risk codes.
pub fn onset_probability(config: &CohortConfig, k: usize) -> f64 {
    logistic(config.risk_logit_weight * k as f64 + config.risk_logit_bias)
}

fn generate_patient(config: &CohortConfig, pools: &BTreeMap<Modality, Vec<EventCode>>, index: usize) -> PatientRecord {
    let mut rng = rng::stream(config.seed, Purpose::Cohort, index as u64);
    let gender = if rng.gen_bool(0.5) { Gender::F } else { Gender::M };
    let birth_year = rng.gen_range(config.birth_years[0]..=config.birth_years[1]);

    let start = NaiveDate::from_ymd_opt(config.first_visit_years[0], 1, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(config.first_visit_years[1], 12, 31).unwrap();
    let mut date = start + chrono::Duration::days(rng.gen_range(0..=(end - start).num_days()));

    let n_visits = rng.gen_range(config.visits_range[0]..=config.visits_range[1]);
    let mut visits = Vec::with_capacity(n_visits);
    for v in 0..n_visits {
        if v > 0 {
            date += chrono::Duration::days(rng.gen_range(config.gap_days[0]..=config.gap_days[1]));
        }
        let mut events = Vec::new();
        for m in Modality::ALL {
            let [lo, hi] = config.codes_per_visit_range.get(&m).copied().unwrap_or([0, 0]);
            let count = rng.gen_range(lo..=hi);
            events.extend(pools[&m].choose_multiple(&mut rng, count).cloned());
        }
        visits.push(Visit { date, events });
    }

    let carried: Vec<&EventCode> = config
        .risk_codes
        .iter()
        .filter(|_| rng.gen_bool(config.risk_carry_probability))
        .collect();
    let depressed = rng.gen_bool(onset_probability(config, carried.len()));

    // Reference visit: onset for depressed patients, the last visit otherwise.
    let extra = rng.gen_range(config.post_onset_visits[0]..=config.post_onset_visits[1]);
    let reference = if depressed {
        n_visits.saturating_sub(1 + extra).max(1.min(n_visits - 1))
    } else {
        n_visits - 1
    };
    let reference_date = visits[reference].date;

    for code in &carried {
        let mut emitted = false;
        for visit in visits[..reference].iter_mut() {
            let days = (reference_date - visit.date).num_days() as f64;
            if rng.gen_bool((-days / config.precursor_decay_days).exp()) {
                visit.events.push((*code).clone());
                emitted = true;
            }
        }
        if !emitted && reference > 0 {
            visits[reference - 1].events.push((*code).clone());
        }
    }

    let onset = if depressed && reference > 0 {
        visits[reference]
            .events
            .extend(config.sentinel_codes.all().into_iter().cloned());
        Some(reference_date)
    } else {
        None
    };

    for visit in visits.iter_mut() {
        for rule in &config.association_rules {
            let fire = rng.gen_bool(rule.probability);
            if fire && visit.events.contains(&rule.trigger) && !visit.events.contains(&rule.companion) {
                visit.events.push(rule.companion.clone());
            }
        }
    }

    PatientRecord {
        id: format!("P{index:06}"),
        gender,
        birth_year,
        onset,
        visits,
    }
}

// ---------------------------------------------------------------------------
// record files

/// Drops empty visits, then patients with fewer than two visits.
pub fn preprocess(records: Vec<PatientRecord>) -> Vec<PatientRecord> {
    records
        .into_iter()
        .filter_map(|mut r| {
            r.visits.retain(|v| !v.events.is_empty());
            (r.visits.len() >= 2).then_some(r)
        })
        .collect()
}

fn check_record(r: &PatientRecord) -> std::result::Result<(), String> {
    if r.visits.windows(2).any(|w| w[1].date < w[0].date) {
        return Err(format!("patient {}: visit dates decrease", r.id));
    }
    if let (Some(onset), Some(first)) = (r.onset, r.visits.first()) {
        if onset < first.date {
            return Err(format!("patient {}: onset precedes first visit", r.id));
        }
    }
    Ok(())
}

/// Reads a JSON-lines record file and applies [`preprocess`].
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_record(&record).map_err(|message| Error::Parse { line: i + 1, message })?;
        records.push(record);
    }
    Ok(preprocess(records))
}

/// One record per line, keys in declaration order.
pub fn write_records(records: &[PatientRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CohortConfig {
        CohortConfig {
            n_patients: n,
            ..CohortConfig::planted()
        }
    }

    #[test]
    fn zero_patients_gives_empty_cohort() {
        assert!(generate_cohort(&small(0)).unwrap().is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(3);
        c.codes_per_modality.insert(Modality::Proc, 0);
        assert!(matches!(generate_cohort(&c), Err(Error::Config(_))));

        let mut c = small(3);
        c.visits_range = [5, 2];
        assert!(matches!(generate_cohort(&c), Err(Error::Config(_))));

        let mut c = small(3);
        c.codes_per_visit_range.insert(Modality::Med, [3, 1]);
        assert!(matches!(generate_cohort(&c), Err(Error::Config(_))));

        let mut c = small(3);
        c.association_rules[0].probability = 1.5;
        assert!(matches!(generate_cohort(&c), Err(Error::Config(_))));

        let mut c = CohortConfig::precursor();
        c.risk_codes.push(c.sentinel_codes.med.clone());
        assert!(matches!(generate_cohort(&c), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_rule_always_fires() {
        let c = small(300);
        let rule = &c.association_rules[0];
        let mut triggers = 0;
        for r in generate_cohort(&c).unwrap() {
            for v in &r.visits {
                if v.events.contains(&rule.trigger) {
                    triggers += 1;
                    assert!(v.events.contains(&rule.companion));
                }
            }
        }
        assert!(triggers > 50, "trigger placed only {triggers} times");
    }

    #[test]
    fn companions_only_follow_triggers() {
        let c = small(300);
        let rule = &c.association_rules[0];
        for r in generate_cohort(&c).unwrap() {
            for v in &r.visits {
                if v.events.contains(&rule.companion) {
                    assert!(v.events.contains(&rule.trigger));
                }
            }
        }
    }

    #[test]
    fn onset_iff_sentinels_at_onset_visit() {
        let c = CohortConfig {
            n_patients: 300,
            ..CohortConfig::precursor()
        };
        let cohort = generate_cohort(&c).unwrap();
        let sentinels = c.sentinel_codes.all();
        let mut depressed = 0;
        for r in &cohort {
            let full_visit = r
                .visits
                .iter()
                .find(|v| sentinels.iter().all(|s| v.events.contains(s)));
            match r.onset {
                Some(onset) => {
                    depressed += 1;
                    assert_eq!(full_visit.map(|v| v.date), Some(onset));
                    assert!(onset > r.visits[0].date);
                }
                None => assert!(full_visit.is_none()),
            }
        }
        assert!(depressed > 50 && depressed < 250, "{depressed}");
    }

    #[test]
    fn background_pool_has_configured_size_and_excludes_reserved() {
        let c = CohortConfig::precursor();
        for m in Modality::ALL {
            let pool = c.background_pool(m);
            assert_eq!(pool.len(), c.codes_per_modality[&m]);
            for code in &pool {
                assert!(!c.sentinel_codes.contains(code));
                assert!(!c.risk_codes.contains(code));
            }
        }
        assert!(c.background_pool(Modality::Diag).contains(&c.association_rules[0].trigger));
    }

    #[test]
    fn preprocessing_drops_short_records() {
        let d = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let e = EventCode::new(Modality::Diag, "401.9").unwrap();
        let r = PatientRecord {
            id: "x".into(),
            gender: Gender::F,
            birth_year: 1950,
            onset: None,
            visits: vec![
                Visit { date: d, events: vec![e.clone()] },
                Visit { date: d, events: vec![] },
            ],
        };
        assert!(preprocess(vec![r]).is_empty());
    }

    #[test]
    fn event_codes_reject_whitespace() {
        assert!(EventCode::new(Modality::Med, "two words").is_err());
        assert!(EventCode::new(Modality::Med, "").is_err());
        assert_eq!(EventCode::new(Modality::Diag, "296.20").unwrap().token(), "DIAG:296");
    }
}
