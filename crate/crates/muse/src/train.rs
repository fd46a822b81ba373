//! Adam training loop with early stopping on validation MAP.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{sub_seed, LossMode, TrainingConfig};
use crate::corpus::QuestionThread;
use crate::error::{Error, Result};
use crate::eval::evaluate_ranking;
use crate::loss::{listwise_loss_t, pointwise_loss_t, regularization_t};
use crate::model::{
    forward_prepared, forward_thread_t, rank_by_score, ModelParams, ModelVars, MuseModel,
    ThreadInputs,
};
use crate::tape::{Tape, Var};
use crate::text::{init_embeddings, Vocabulary};

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
    pub val_mrr: f64,
}

/// A trained model plus its training history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MuseModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 when no epoch ran).
    pub best_epoch: usize,
    pub best_val_map: f64,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, name: &str, param: &mut Array2<f64>, grad: &Array2<f64>) {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(grad.dim()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(grad.dim()));
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Sum of per-thread losses for one batch, divided by the batch size, plus
/// the regularization term when eta is nonzero. The lambda and eta branches
/// are skipped entirely when zero, so a joint loss with both at zero builds
/// exactly the same tape as the pointwise loss.
fn batch_loss_t(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &TrainingConfig,
    batch: &[&ThreadInputs],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let mut total: Option<Var> = None;
    for inputs in batch {
        let dropout = dropout_rng.as_deref_mut().map(|rng| (rng, config.dropout));
        let fwd = forward_thread_t(tape, vars, config, inputs, dropout);
        let term = match config.loss_mode {
            LossMode::Pointwise => Some(pointwise_loss_t(tape, fwd.probs, &inputs.labels)),
            LossMode::Listwise => listwise_loss_t(
                tape,
                fwd.probs,
                &inputs.labels,
                config.norm_order,
                config.label_smoothing,
            ),
            LossMode::Joint => {
                let point = pointwise_loss_t(tape, fwd.probs, &inputs.labels);
                if config.lambda == 0.0 {
                    Some(point)
                } else {
                    match listwise_loss_t(
                        tape,
                        fwd.probs,
                        &inputs.labels,
                        config.norm_order,
                        config.label_smoothing,
                    ) {
                        Some(list) => {
                            let scaled = tape.scale(list, config.lambda);
                            Some(tape.add(point, scaled))
                        }
                        None => Some(point),
                    }
                }
            }
        };
        if let Some(term) = term {
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
    }
    let mean = match total {
        Some(t) => tape.scale(t, 1.0 / batch.len() as f64),
        None => tape.constant(Array2::zeros((1, 1))),
    };
    if config.eta == 0.0 {
        mean
    } else {
        let reg = regularization_t(tape, vars, config.regularizer);
        let scaled = tape.scale(reg, config.eta);
        tape.add(mean, scaled)
    }
}

/// Batch loss and its analytic gradients at the model's current parameters,
/// under the model's configured loss mode. Gradients are keyed like
/// [`ModelParams::visit`]; parameters the loss never touches are absent, and
/// the pinned padding row of the embedding gradient is zero.
pub fn loss_and_gradients(
    model: &MuseModel,
    threads: &[QuestionThread],
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    if threads.is_empty() {
        return Err(Error::Argument(
            "cannot take gradients of an empty batch".into(),
        ));
    }
    let inputs = threads
        .iter()
        .map(|t| ThreadInputs::new(&model.vocab, t, model.config.num_snippets))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&ThreadInputs> = inputs.iter().collect();

    let mut tape = Tape::new();
    let vars = ModelVars::insert(&mut tape, &model.params, true);
    let loss = batch_loss_t(&mut tape, &vars, &model.config, &batch, None);
    let loss_value = tape.scalar(loss);
    tape.backward(loss);

    let mut grads = BTreeMap::new();
    vars.visit(&mut |name, v| {
        if let Some(g) = tape.grad(v) {
            grads.insert(name, g.clone());
        }
    });
    if let Some(g) = grads.get_mut("embedding") {
        g.row_mut(0).fill(0.0);
    }
    Ok((loss_value, grads))
}

/// Rank every thread with the current parameters and macro-average.
fn validate_params(
    config: &TrainingConfig,
    params: &ModelParams,
    inputs: &[ThreadInputs],
) -> Result<(f64, f64)> {
    let ranked: Vec<(String, Vec<u8>)> = inputs
        .iter()
        .map(|t| {
            let pred = forward_prepared(config, params, t);
            let order = rank_by_score(&pred.prediction.positive_probs());
            let labels = order.iter().map(|&(i, _)| t.labels[i]).collect();
            (t.question_id.clone(), labels)
        })
        .collect();
    let report = evaluate_ranking(&ranked, &[1])?;
    Ok((report.map, report.mrr))
}

/// Train a model from scratch on the given splits. Optional pretrained
/// embeddings seed the embedding table; everything else is Xavier-init.
pub fn train(
    config: &TrainingConfig,
    train_threads: &[QuestionThread],
    val_threads: &[QuestionThread],
    pretrained: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_threads.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    if val_threads.is_empty() {
        return Err(Error::Argument("validation split is empty".into()));
    }

    let vocab = Vocabulary::build(train_threads.iter().flat_map(|t| {
        std::iter::once(t.question.as_str())
            .chain(t.answers.iter().map(|a| a.text.as_str()))
            .chain(t.snippets.iter().map(|s| s.text.as_str()))
    }));
    let embedding = init_embeddings(
        &vocab,
        config.embed_dim,
        pretrained,
        sub_seed(config.seed, "embed"),
    )?;
    let mut params = ModelParams::init(config, embedding)?;

    let train_inputs = train_threads
        .iter()
        .map(|t| ThreadInputs::new(&vocab, t, config.num_snippets))
        .collect::<Result<Vec<_>>>()?;
    let val_inputs = val_threads
        .iter()
        .map(|t| ThreadInputs::new(&vocab, t, config.num_snippets))
        .collect::<Result<Vec<_>>>()?;

    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "batch"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "dropout"));
    let mut adam = Adam::new(config.learning_rate);

    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_val_map = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut patience_left = config.patience;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();
        order.shuffle(&mut batch_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ThreadInputs> = chunk.iter().map(|&i| &train_inputs[i]).collect();
            let mut tape = Tape::new();
            let vars = ModelVars::insert(&mut tape, &params, true);
            let dropout = (config.dropout > 0.0).then_some(&mut dropout_rng);
            let loss = batch_loss_t(&mut tape, &vars, config, &batch, dropout);
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss_value * batch.len() as f64;

            tape.backward(loss);
            adam.begin_step();
            let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            vars.visit(&mut |name, v| {
                if let Some(g) = tape.grad(v) {
                    grads.insert(name, g.clone());
                }
            });
            if let Some(g) = grads.get_mut("embedding") {
                // The padding vector is pinned at zero.
                g.row_mut(0).fill(0.0);
            }
            params.visit_mut(&mut |name, param| {
                if let Some(grad) = grads.get(&name) {
                    adam.update(&name, param, grad);
                }
            });
        }
        let train_loss = loss_sum / train_inputs.len() as f64;

        let (val_map, val_mrr) = validate_params(config, &params, &val_inputs)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_map,
            val_mrr,
        });

        if val_map > best_val_map {
            best_val_map = val_map;
            best_epoch = epoch;
            best_params = params.clone();
            patience_left = config.patience;
        } else {
            patience_left = patience_left.saturating_sub(1);
            if patience_left == 0 {
                break;
            }
        }
    }

    if best_epoch == 0 {
        // No epoch ran (epochs == 0): keep the initialization.
        best_params = params;
        best_val_map = 0.0;
    }
    let model = MuseModel::new(config.clone(), vocab, best_params)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_map,
    })
}
