//! Step scores, max-over-steps relevance, and the two ranking distributions
//! behind self-distillation.
//!
//! Everything here is a pure function over embedding values; the
//! gradient-carrying twins live in [`crate::loss`].

use crate::error::{Error, Result};
use crate::model::StepEmbeddings;
use crate::tensor::{cosine_similarity, softmax_slice};

/// Raw cosine similarities between a query and each thinking step, in step
/// order. Values sit in `[-1, 1]`; temperature is applied later, at softmax
/// time.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScores(pub Vec<f64>);

/// One query against its candidate pool. By convention the positive document
/// is index 0 of `docs`.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub query: Vec<f64>,
    pub docs: Vec<StepEmbeddings>,
    pub doc_ids: Vec<String>,
}

impl CandidateSet {
    pub fn new(query: Vec<f64>, docs: Vec<StepEmbeddings>, doc_ids: Vec<String>) -> Result<Self> {
        if docs.len() < 2 {
            return Err(Error::Input(format!(
                "a candidate set needs the positive plus at least one negative, got {} documents",
                docs.len()
            )));
        }
        if doc_ids.len() != docs.len() {
            return Err(Error::Input(format!(
                "{} doc ids for {} documents",
                doc_ids.len(),
                docs.len()
            )));
        }
        Ok(CandidateSet {
            query,
            docs,
            doc_ids,
        })
    }

    /// Pool size `k = 1 + |negatives|`.
    pub fn k(&self) -> usize {
        self.docs.len()
    }
}

/// Probabilities over the `k` candidates; sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RankDistribution(pub Vec<f64>);

impl RankDistribution {
    pub fn k(&self) -> usize {
        self.0.len()
    }
}

/// `scores[i] = cos(query, step_{i+1})`.
pub fn step_scores(query: &[f64], steps: &StepEmbeddings) -> Result<StepScores> {
    let mut scores = Vec::with_capacity(steps.steps());
    for s in &steps.0 {
        scores.push(cosine_similarity(query, s)?);
    }
    Ok(StepScores(scores))
}

/// Maximum step score and its 1-based argmax; ties take the lowest index.
pub fn f_max(scores: &StepScores) -> Result<(f64, usize)> {
    if scores.0.is_empty() {
        return Err(Error::Input("f_max over an empty score list".into()));
    }
    let mut best = scores.0[0];
    let mut arg = 0;
    for (i, &v) in scores.0.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            arg = i;
        }
    }
    Ok((best, arg + 1))
}

fn validate_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Softmax over `f_max(q, d_i) / tau` for every candidate: the distribution
/// that sees the best thinking step of each document.
pub fn teacher_distribution(cands: &CandidateSet, tau: f64) -> Result<RankDistribution> {
    validate_tau(tau)?;
    let mut scaled = Vec::with_capacity(cands.k());
    for steps in &cands.docs {
        let (fm, _) = f_max(&step_scores(&cands.query, steps)?)?;
        scaled.push(fm / tau);
    }
    Ok(RankDistribution(softmax_slice(&scaled)))
}

/// Softmax over the final-step score of each candidate: the distribution the
/// retrieval index actually sees.
pub fn student_distribution(cands: &CandidateSet, tau: f64) -> Result<RankDistribution> {
    validate_tau(tau)?;
    let mut scaled = Vec::with_capacity(cands.k());
    for steps in &cands.docs {
        scaled.push(cosine_similarity(&cands.query, steps.last())? / tau);
    }
    Ok(RankDistribution(softmax_slice(&scaled)))
}
