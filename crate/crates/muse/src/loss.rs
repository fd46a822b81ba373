//! Training objectives: pointwise cross-entropy, listwise KL, and the joint
//! loss with L2 regularization.
//!
//! Each loss exists twice on purpose: a tape builder used during training,
//! and a plain-array version used for reporting. Unit tests pin the two
//! implementations to each other, so the differentiable path is checked
//! against the directly computed formula.

use ndarray::Array2;

use crate::config::Regularizer;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelVars, MuseModel, PredictionSet};
use crate::tape::{Tape, Var};

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_labels(n_answers: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != n_answers {
        return Err(Error::Argument(format!(
            "{} labels for {} answers",
            labels.len(),
            n_answers
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Argument(format!("labels must be 0 or 1, got {bad}")));
    }
    Ok(())
}

fn one_hot(labels: &[u8]) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), 2));
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y as usize]] = 1.0;
    }
    m
}

/// Smoothed target distribution: `(y + eps) / sum(y + eps)`.
fn smoothed_targets(labels: &[u8], eps: f64) -> Vec<f64> {
    let total: f64 = labels.iter().map(|&y| f64::from(y) + eps).sum();
    labels
        .iter()
        .map(|&y| (f64::from(y) + eps) / total)
        .collect()
}

/// Normalize the positive-class probabilities into a distribution with the
/// given vector norm; `p = 1` divides by the plain sum.
pub(crate) fn listwise_scores_t(tape: &mut Tape, probs: Var, p: f64) -> Var {
    let positives = tape.slice_cols(probs, 1, 2);
    let norm = if p == 1.0 {
        tape.sum_all(positives)
    } else {
        let powered = tape.pow_scalar(positives, p);
        let total = tape.sum_all(powered);
        tape.pow_scalar(total, 1.0 / p)
    };
    tape.div_by_scalar(positives, norm)
}

/// Mean negative log probability of each answer's true class.
pub(crate) fn pointwise_loss_t(tape: &mut Tape, probs: Var, labels: &[u8]) -> Var {
    let n = labels.len();
    debug_assert_eq!(tape.value(probs).nrows(), n);
    let picked = tape.mul_const(probs, one_hot(labels));
    let picked = tape.row_sums(picked);
    let clamped = tape.clamp_min(picked, PROB_FLOOR);
    let logs = tape.ln(clamped);
    let total = tape.sum_all(logs);
    tape.scale(total, -1.0 / n as f64)
}

/// `(1/|A|) * sum_i yhat_i * ln(yhat_i / y'_i)` where `yhat` is the
/// normalized positive-class distribution and `y'` the smoothed labels.
/// Threads without a positive answer contribute nothing: `None`.
pub(crate) fn listwise_loss_t(
    tape: &mut Tape,
    probs: Var,
    labels: &[u8],
    p: f64,
    eps: f64,
) -> Option<Var> {
    if !labels.contains(&1) {
        return None;
    }
    let n = labels.len();
    let yhat = listwise_scores_t(tape, probs, p);
    let clamped = tape.clamp_min(yhat, PROB_FLOOR);
    let ln_yhat = tape.ln(clamped);
    let model_term = tape.mul(yhat, ln_yhat);
    let model_term = tape.sum_all(model_term);
    let ln_targets = Array2::from_shape_vec(
        (n, 1),
        smoothed_targets(labels, eps)
            .iter()
            .map(|t| t.ln())
            .collect(),
    )
    .expect("target column shape");
    let target_term = tape.mul_const(yhat, ln_targets);
    let target_term = tape.sum_all(target_term);
    let neg_target = tape.scale(target_term, -1.0);
    let kl = tape.add(model_term, neg_target);
    Some(tape.scale(kl, 1.0 / n as f64))
}

/// Sum of squared entries over every trainable array, in visit order; the
/// literal-norm variant takes a square root at the end.
pub(crate) fn regularization_t(tape: &mut Tape, vars: &ModelVars, reg: Regularizer) -> Var {
    let mut handles = Vec::new();
    vars.visit(&mut |_, v| handles.push(v));
    let mut total: Option<Var> = None;
    for v in handles {
        let sq = tape.square(v);
        let part = tape.sum_all(sq);
        total = Some(match total {
            Some(t) => tape.add(t, part),
            None => part,
        });
    }
    let total = total.expect("model has parameters");
    match reg {
        Regularizer::SquaredL2 => total,
        Regularizer::L2 => tape.sqrt(total),
    }
}

/// Pointwise cross-entropy over one thread's predictions.
pub fn pointwise_loss(pred: &PredictionSet, labels: &[u8]) -> Result<f64> {
    check_labels(pred.n_answers(), labels)?;
    let n = labels.len() as f64;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| pred.probs[[i, y as usize]].max(PROB_FLOOR).ln())
        .sum();
    Ok(-total / n)
}

/// Listwise KL divergence between the predicted distribution and the
/// smoothed label distribution; 0 when the thread has no positive answer.
pub fn listwise_loss(pred: &PredictionSet, labels: &[u8], eps: f64) -> Result<f64> {
    check_labels(pred.n_answers(), labels)?;
    if eps <= 0.0 {
        return Err(Error::Argument("label smoothing must be positive".into()));
    }
    if !labels.contains(&1) {
        return Ok(0.0);
    }
    let targets = smoothed_targets(labels, eps);
    let n = labels.len() as f64;
    let total: f64 = pred
        .listwise
        .iter()
        .zip(&targets)
        .map(|(&yh, &t)| yh * (yh.max(PROB_FLOOR).ln() - t.ln()))
        .sum();
    Ok(total / n)
}

/// Sum of squared parameter entries (or its square root for the literal
/// norm), over all trainable arrays including the embedding table.
pub fn regularization(params: &ModelParams, reg: Regularizer) -> f64 {
    let mut total = 0.0;
    params.visit(&mut |_, a| {
        total += a.iter().map(|v| v * v).sum::<f64>();
    });
    match reg {
        Regularizer::SquaredL2 => total,
        Regularizer::L2 => total.sqrt(),
    }
}

/// Joint objective over a batch of threads:
/// mean over threads of (pointwise + lambda * listwise), plus eta times the
/// regularization term. Uses the model's configured lambda, eta, smoothing,
/// and norm order.
pub fn joint_loss(model: &MuseModel, threads: &[crate::corpus::QuestionThread]) -> Result<f64> {
    if threads.is_empty() {
        return Err(Error::Argument(
            "joint loss needs at least one thread".into(),
        ));
    }
    let cfg = &model.config;
    let mut total = 0.0;
    for thread in threads {
        let pred = model.predict(thread)?;
        let labels = thread.labels();
        let mut term = pointwise_loss(&pred, &labels)?;
        if cfg.lambda != 0.0 {
            term += cfg.lambda * listwise_loss(&pred, &labels, cfg.label_smoothing)?;
        }
        total += term;
    }
    let mut loss = total / threads.len() as f64;
    if cfg.eta != 0.0 {
        loss += cfg.eta * regularization(&model.params, cfg.regularizer);
    }
    Ok(loss)
}
