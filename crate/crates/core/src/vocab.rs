//! Token vocabulary over modality-tagged codes.
//!
//! Ids 0..5 are the special tokens `PAD`, `UNK`, `CLS`, `SEP`, `MASK`;
//! content tokens follow in sorted token-string order so that the same corpus
//! always yields the same ids. Content tokens are written `MODALITY:code`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{EventCode, Modality, PatientRecord};
use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const SPECIALS: [&str; 5] = ["PAD", "UNK", "CLS", "SEP", "MASK"];
pub const N_SPECIALS: usize = SPECIALS.len();

/// Demographic channels (gender, age) are embedded separately; they are
/// counted in reports only.
pub const DEMOGRAPHIC_FEATURES: usize = 2;

/// Three-character ICD-9 category: the part before the decimal point.
pub fn group_icd9(raw: &str) -> Result<String> {
    if raw.is_empty() {
        return Err(Error::Validation("empty diagnosis code".into()));
    }
    Ok(group_icd9_unchecked(raw).to_string())
}

pub(crate) fn group_icd9_unchecked(raw: &str) -> &str {
    raw.split_once('.').map_or(raw, |(head, _)| head)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

/// Per-modality token counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VocabReport {
    pub per_modality: BTreeMap<Modality, usize>,
    /// Sum over the four code modalities.
    pub content_tokens: usize,
    pub demographic_features: usize,
    pub special_tokens: usize,
    pub total_ids: usize,
}

impl Vocabulary {
    fn from_content(content: BTreeSet<String>) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// One token per distinct `(modality, grouped code)` in the corpus.
    pub fn build<'a>(records: impl IntoIterator<Item = &'a PatientRecord>) -> Self {
        let content = records
            .into_iter()
            .flat_map(|r| r.visits.iter())
            .flat_map(|v| v.events.iter())
            .map(EventCode::token)
            .collect();
        Self::from_content(content)
    }

    /// Vocabulary over an explicit code list.
    pub fn from_codes<'a>(codes: impl IntoIterator<Item = &'a EventCode>) -> Self {
        Self::from_content(codes.into_iter().map(EventCode::token).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn content_range(&self) -> std::ops::Range<TokenId> {
        N_SPECIALS..self.tokens.len()
    }

    pub fn encode(&self, event: &EventCode) -> TokenId {
        self.id_of(&event.token())
    }

    pub fn id_of(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Range { id, size: self.tokens.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: TokenId) -> bool {
        id < N_SPECIALS
    }

    pub fn report(&self) -> VocabReport {
        let mut per_modality: BTreeMap<Modality, usize> = Modality::ALL.iter().map(|&m| (m, 0)).collect();
        for token in &self.tokens[N_SPECIALS..] {
            if let Some(m) = Modality::ALL.iter().find(|m| token.starts_with(&format!("{}:", m.tag()))) {
                *per_modality.get_mut(m).unwrap() += 1;
            }
        }
        VocabReport {
            content_tokens: per_modality.values().sum(),
            per_modality,
            demographic_features: DEMOGRAPHIC_FEATURES,
            special_tokens: N_SPECIALS,
            total_ids: self.tokens.len(),
        }
    }

    /// Canonical file bytes: `{"tokens":[...]}` followed by a newline.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocabulary serialises");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 of the canonical file bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.tokens.len() < N_SPECIALS || file.tokens[..N_SPECIALS] != SPECIALS {
            return Err(Error::Validation("vocabulary file does not start with the special tokens".into()));
        }
        let content: BTreeSet<String> = file.tokens[N_SPECIALS..].iter().cloned().collect();
        let vocab = Self::from_content(content);
        if vocab.tokens != file.tokens {
            return Err(Error::Validation("vocabulary tokens are not sorted and distinct".into()));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Gender, Visit};
    use chrono::NaiveDate;

    fn code(m: Modality, c: &str) -> EventCode {
        EventCode::new(m, c).unwrap()
    }

    fn record(codes: Vec<EventCode>) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            gender: Gender::M,
            birth_year: 1950,
            onset: None,
            visits: vec![Visit {
                date: NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(),
                events: codes,
            }],
        }
    }

    #[test]
    fn icd9_grouping() {
        assert_eq!(group_icd9("296.20").unwrap(), "296");
        assert_eq!(group_icd9("V45.89").unwrap(), "V45");
        assert_eq!(group_icd9("008").unwrap(), "008");
        assert!(matches!(group_icd9(""), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocabulary::build(std::iter::empty());
        assert_eq!(v.len(), 5);
        assert_eq!(v.decode(PAD).unwrap(), "PAD");
        assert_eq!(v.decode(MASK).unwrap(), "MASK");
    }

    #[test]
    fn diagnosis_codes_collapse_to_groups() {
        let r = record(vec![
            code(Modality::Diag, "296.2"),
            code(Modality::Diag, "296.3"),
            code(Modality::Proc, "99213"),
        ]);
        let v = Vocabulary::build([&r]);
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[5..], &["DIAG:296", "PROC:99213"]);
    }

    #[test]
    fn encode_decode() {
        let r = record(vec![code(Modality::Diag, "296.2")]);
        let v = Vocabulary::build([&r]);
        assert_eq!(v.encode(&code(Modality::Med, "unseen")), UNK);
        assert_eq!(v.decode(v.encode(&code(Modality::Diag, "296"))).unwrap(), "DIAG:296");
        assert!(matches!(v.decode(6), Err(Error::Range { id: 6, size: 6 })));
        for id in 0..v.len() {
            assert_eq!(v.id_of(v.decode(id).unwrap()), id);
        }
    }

    #[test]
    fn same_modality_code_in_two_modalities_stays_distinct() {
        let r = record(vec![code(Modality::Proc, "100"), code(Modality::Diag, "100")]);
        let v = Vocabulary::build([&r]);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn file_round_trip_and_hash() {
        let r = record(vec![code(Modality::Topic, "t1"), code(Modality::Med, "m")]);
        let v = Vocabulary::build([&r]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        assert_eq!(std::fs::read(&p).unwrap(), v.to_bytes());
    }
}
