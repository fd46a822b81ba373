//! Ranking metrics (MAP, MRR, Precision@N) and a paired randomization test
//! for comparing two systems.
//!
//! All metrics take label sequences already sorted into ranked order:
//! element 0 is the top-ranked answer's label. Questions without any
//! positive answer are skipped and counted, never averaged.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Metrics for a single question.
#[derive(Debug, Clone, Serialize)]
pub struct QuestionMetrics {
    pub question_id: String,
    pub ap: f64,
    pub rr: f64,
    pub p_at: BTreeMap<usize, f64>,
}

/// Macro-averaged metrics over the evaluated questions.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub map: f64,
    pub mrr: f64,
    pub p_at: BTreeMap<usize, f64>,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    pub per_question: Vec<QuestionMetrics>,
}

/// Mean of the precision values at each relevant rank; 0 when nothing is
/// relevant.
pub fn average_precision(ranked_labels: &[u8]) -> f64 {
    let mut hits = 0u32;
    let mut total = 0.0;
    for (i, &y) in ranked_labels.iter().enumerate() {
        if y == 1 {
            hits += 1;
            total += f64::from(hits) / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / f64::from(hits)
    }
}

/// Inverse rank of the first relevant answer; 0 when nothing is relevant.
pub fn reciprocal_rank(ranked_labels: &[u8]) -> f64 {
    ranked_labels
        .iter()
        .position(|&y| y == 1)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Relevant fraction of the top `n`; the denominator is `min(n, len)` so
/// short lists are not penalized for answers they do not have.
pub fn precision_at(ranked_labels: &[u8], n: usize) -> f64 {
    let depth = n.min(ranked_labels.len());
    if depth == 0 {
        return 0.0;
    }
    let hits = ranked_labels[..depth].iter().filter(|&&y| y == 1).count();
    hits as f64 / depth as f64
}

/// Evaluate ranked label lists, one per question, macro-averaging over the
/// questions that have at least one positive answer.
pub fn evaluate_ranking(ranked: &[(String, Vec<u8>)], cutoffs: &[usize]) -> Result<MetricReport> {
    if ranked.is_empty() {
        return Err(Error::Argument(
            "evaluation needs at least one question".into(),
        ));
    }
    if let Some(&bad) = cutoffs.iter().find(|&&n| n == 0) {
        return Err(Error::Argument(format!(
            "precision cutoff must be positive, got {bad}"
        )));
    }
    let mut per_question = Vec::new();
    let mut n_skipped = 0usize;
    for (id, labels) in ranked {
        if labels.is_empty() {
            return Err(Error::Argument(format!(
                "question {id} has no ranked labels"
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Argument(format!(
                "question {id} has a non-binary label"
            )));
        }
        if !labels.contains(&1) {
            n_skipped += 1;
            continue;
        }
        let p_at = cutoffs
            .iter()
            .map(|&n| (n, precision_at(labels, n)))
            .collect();
        per_question.push(QuestionMetrics {
            question_id: id.clone(),
            ap: average_precision(labels),
            rr: reciprocal_rank(labels),
            p_at,
        });
    }
    let n_evaluated = per_question.len();
    let mean = |f: &dyn Fn(&QuestionMetrics) -> f64| {
        if n_evaluated == 0 {
            0.0
        } else {
            per_question.iter().map(f).sum::<f64>() / n_evaluated as f64
        }
    };
    let map = mean(&|q| q.ap);
    let mrr = mean(&|q| q.rr);
    let p_at = cutoffs
        .iter()
        .map(|&n| (n, mean(&|q| q.p_at[&n])))
        .collect();
    Ok(MetricReport {
        map,
        mrr,
        p_at,
        n_evaluated,
        n_skipped,
        per_question,
    })
}

/// Convenience wrapper for label lists without question ids.
pub fn evaluate_label_lists(labels: &[Vec<u8>], cutoffs: &[usize]) -> Result<MetricReport> {
    let ranked: Vec<(String, Vec<u8>)> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("q{i}"), l.clone()))
        .collect();
    evaluate_ranking(&ranked, cutoffs)
}

/// Two-tailed paired randomization test on per-question scores. Returns the
/// fraction of sign-flipped resamples whose absolute mean difference is at
/// least the observed one; identical inputs give exactly 1.0.
pub fn significance_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Argument(
            "paired test needs at least two questions".into(),
        ));
    }
    if iterations == 0 {
        return Err(Error::Argument(
            "paired test needs at least one iteration".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..iterations {
        let sum: f64 = diffs
            .iter()
            .map(|&d| if rng.random::<bool>() { d } else { -d })
            .sum();
        if (sum / n).abs() >= observed {
            hits += 1;
        }
    }
    Ok(hits as f64 / iterations as f64)
}
