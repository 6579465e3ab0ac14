//! Attention extraction and code-association ranking.
//!
//! The exported report is JSON with this shape:
//!
//! ```json
//! {
//!   "layer": 1,
//!   "head_aggregation": "mean",
//!   "top_k": 5,
//!   "tokens": ["CLS", "DIAG:250", "MASK", "SEP"],
//!   "queries": [
//!     {
//!       "position": 2,
//!       "token": "MASK",
//!       "associations": [
//!         { "position": 1, "token": "DIAG:250", "score": 0.41, "normalized": 1.0 }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! `score` is the head-aggregated attention weight. `normalized` divides it
//! by the total over every ranked key of that query; a `top_k` list shows
//! the leading part of that distribution.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMap, Model};
use crate::sequencer::TokenSequence;
use crate::vocab::{self, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAgg {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for HeadAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown head aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub position: usize,
    pub token: String,
    pub score: f64,
}

/// All-layer attention for `seq` with decoded tokens.
pub fn extract_attention(model: &Model, seq: &TokenSequence, vocab: &Vocabulary) -> Result<AttentionMap> {
    let mut map = model.infer(seq)?.attention;
    map.tokens = map
        .token_ids
        .iter()
        .map(|&id| vocab.decode(id).map(str::to_string))
        .collect::<Result<_>>()?;
    Ok(map)
}

fn is_content(map: &AttentionMap, position: usize) -> bool {
    let id = map.token_ids[position];
    map.real[position] && id != vocab::PAD && id != vocab::CLS && id != vocab::SEP
}

fn token_at(map: &AttentionMap, position: usize) -> String {
    map.tokens
        .get(position)
        .cloned()
        .unwrap_or_else(|| format!("#{}", map.token_ids[position]))
}

/// Head-aggregated attention row of `query` at `layer`.
pub fn aggregated_row(map: &AttentionMap, query: usize, layer: usize, agg: HeadAgg) -> Result<Vec<f64>> {
    if layer >= map.n_layers() {
        return Err(Error::Config(format!("layer {layer} out of range for {} layers", map.n_layers())));
    }
    if query >= map.len() {
        return Err(Error::Contract(format!("query {query} beyond sequence length {}", map.len())));
    }
    let heads = map.n_heads();
    Ok((0..map.len())
        .map(|k| {
            let ws = (0..heads).map(|h| map.weight(layer, h, query, k));
            match agg {
                HeadAgg::Mean => ws.sum::<f64>() / heads as f64,
                HeadAgg::Max => ws.fold(0.0, f64::max),
            }
        })
        .collect())
}

/// Content keys ranked by attention from `query`, strongest first.
///
/// `layer` defaults to the last. CLS, SEP, PAD and the query itself are left
/// out; equal scores keep position order.
pub fn association_scores(
    map: &AttentionMap,
    query: usize,
    layer: Option<usize>,
    agg: HeadAgg,
) -> Result<Vec<Association>> {
    if query >= map.len() || !is_content(map, query) {
        return Err(Error::Contract(format!("query position {query} is not a content token")));
    }
    let layer = layer.unwrap_or(map.n_layers().saturating_sub(1));
    let row = aggregated_row(map, query, layer, agg)?;
    let mut ranked: Vec<Association> = (0..map.len())
        .filter(|&k| k != query && is_content(map, k))
        .map(|k| Association {
            position: k,
            token: token_at(map, k),
            score: row[k],
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub position: usize,
    pub token: String,
    pub score: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub position: usize,
    pub token: String,
    pub associations: Vec<ReportEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub layer: usize,
    pub head_aggregation: HeadAgg,
    pub top_k: usize,
    pub tokens: Vec<String>,
    pub queries: Vec<QueryReport>,
}

/// Report over every content query of `map`.
pub fn association_report(
    map: &AttentionMap,
    top_k: usize,
    layer: Option<usize>,
    agg: HeadAgg,
) -> Result<AssociationReport> {
    let layer = layer.unwrap_or(map.n_layers().saturating_sub(1));
    let queries = (0..map.len())
        .filter(|&q| is_content(map, q))
        .map(|q| {
            let ranked = association_scores(map, q, Some(layer), agg)?;
            let total: f64 = ranked.iter().map(|a| a.score).sum();
            let associations = ranked
                .into_iter()
                .take(top_k)
                .map(|a| ReportEntry {
                    normalized: if total > 0.0 { a.score / total } else { 0.0 },
                    position: a.position,
                    token: a.token,
                    score: a.score,
                })
                .collect();
            Ok(QueryReport {
                position: q,
                token: token_at(map, q),
                associations,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AssociationReport {
        layer,
        head_aggregation: agg,
        top_k,
        tokens: (0..map.len()).map(|p| token_at(map, p)).collect(),
        queries,
    })
}

/// Writes the last-layer, mean-over-heads report for `map` to `path`.
pub fn export_associations(map: &AttentionMap, path: impl AsRef<Path>, top_k: usize) -> Result<()> {
    let report = association_report(map, top_k, None, HeadAgg::Mean)?;
    write_report(&report, path)
}

pub fn write_report(report: &AssociationReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_report(path: impl AsRef<Path>) -> Result<AssociationReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}
