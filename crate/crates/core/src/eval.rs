//! Retrieval and zero-shot evaluation over embedding snapshots.
//!
//! Rankings are deterministic: candidates sort by descending cosine score
//! with ties broken by ascending candidate index, while the gold item's rank
//! is counted pessimistically (worst position within its tie group) so the
//! reported metrics are conservative.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding dimension mismatch: query {query} vs candidate {candidate}")]
    DimensionMismatch { query: usize, candidate: usize },
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("no rankings to aggregate")]
    NoRankings,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("gold index {gold} out of range (candidates {count})")]
    GoldOutOfRange { gold: usize, count: usize },
    #[error("prompt field empty: {0}")]
    EmptyPromptField(&'static str),
}

/// Normalize a vector to unit Euclidean norm (zero vectors pass through).
pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalRanking {
    pub query_id: String,
    pub gold_index: usize,
    /// Candidate indices by descending score, ties by ascending index.
    pub ranked: Vec<usize>,
    /// Scores aligned with `ranked` (non-increasing).
    pub scores: Vec<f64>,
    /// 1-based pessimistic rank of the gold candidate.
    pub gold_rank: usize,
}

/// Rank every candidate row of `candidates` against `query` by dot product
/// (cosine similarity when the caller passes normalized embeddings).
pub fn rank_images(
    query_id: &str,
    query: &[f64],
    candidates: &[Vec<f64>],
    gold_index: usize,
) -> Result<RetrievalRanking, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if gold_index >= candidates.len() {
        return Err(EvalError::GoldOutOfRange {
            gold: gold_index,
            count: candidates.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.iter().enumerate() {
        if cand.len() != query.len() {
            return Err(EvalError::DimensionMismatch {
                query: query.len(),
                candidate: cand.len(),
            });
        }
        let score: f64 = query.iter().zip(cand).map(|(a, b)| a * b).sum();
        scored.push((i, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let gold_score = scored
        .iter()
        .find(|(i, _)| *i == gold_index)
        .map(|(_, s)| *s)
        .expect("gold index validated above");
    // pessimistic: gold counts after every candidate scoring >= its score
    let ahead = scored
        .iter()
        .filter(|(i, s)| *i != gold_index && *s >= gold_score)
        .count();
    let (ranked, scores): (Vec<usize>, Vec<f64>) = scored.into_iter().unzip();
    Ok(RetrievalRanking {
        query_id: query_id.to_string(),
        gold_index,
        ranked,
        scores,
        gold_rank: ahead + 1,
    })
}

/// Mean over queries of `1 / gold_rank`, zeroed when the gold rank exceeds k.
pub fn mrr_at_k(rankings: &[RetrievalRanking], k: usize) -> Result<f64, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::NoRankings);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let total: f64 = rankings
        .iter()
        .map(|r| {
            if r.gold_rank <= k {
                1.0 / r.gold_rank as f64
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / rankings.len() as f64)
}

/// Fraction of queries whose gold rank is within k.
pub fn accuracy_at_k(rankings: &[RetrievalRanking], k: usize) -> Result<f64, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::NoRankings);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let hits = rankings.iter().filter(|r| r.gold_rank <= k).count();
    Ok(hits as f64 / rankings.len() as f64)
}

// ── Prompts and zero-shot classification ────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelPrompt {
    pub class_id: String,
    pub label: String,
    pub article: String,
    pub rendered: String,
}

/// Render the fixed Italian prompt: `una foto di <article> <label>`.
pub fn build_prompt(class_id: &str, label: &str, article: &str) -> Result<LabelPrompt, EvalError> {
    if label.trim().is_empty() {
        return Err(EvalError::EmptyPromptField("label"));
    }
    if article.trim().is_empty() {
        return Err(EvalError::EmptyPromptField("article"));
    }
    Ok(LabelPrompt {
        class_id: class_id.to_string(),
        label: label.to_string(),
        article: article.to_string(),
        rendered: format!("una foto di {article} {label}"),
    })
}

/// Rank class prompts for one image: the same machinery as caption→image
/// retrieval with the roles swapped.
pub fn zero_shot_classify(
    image_id: &str,
    image_embedding: &[f64],
    prompt_embeddings: &[Vec<f64>],
    gold_class: usize,
) -> Result<RetrievalRanking, EvalError> {
    rank_images(image_id, image_embedding, prompt_embeddings, gold_class)
}

// ── Reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub queries: usize,
}

/// Machine-parseable report: one JSON record per metric (values to 4
/// decimals as a separate field is avoided — the value is full precision;
/// the human footer prints 4 decimals), optional per-query top-10 dump,
/// then `#`-prefixed summary lines.
pub fn render_report(
    title: &str,
    records: &[MetricRecord],
    rankings: Option<&[RetrievalRanking]>,
) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metric record serializes"));
        out.push('\n');
    }
    if let Some(rankings) = rankings {
        for r in rankings {
            let top: Vec<usize> = r.ranked.iter().take(10).copied().collect();
            let dump = serde_json::json!({
                "query_id": r.query_id,
                "gold_rank": r.gold_rank,
                "top10": top,
            });
            out.push_str(&dump.to_string());
            out.push('\n');
        }
    }
    out.push_str(&format!("# {title}\n"));
    for r in records {
        out.push_str(&format!(
            "# {}@{} = {:.4} over {} queries\n",
            r.metric, r.k, r.value, r.queries
        ));
    }
    out
}
