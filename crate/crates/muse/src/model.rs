//! Model assembly: the full parameter set, Xavier initialization, the
//! end-to-end forward pass, and prediction/ranking entry points.
//!
//! The forward pass for one question thread:
//!   1. encode the question, each answer, and each snippet with the
//!      bidirectional recurrent encoder,
//!   2. derive x_q (max-pool), one x_a per answer (word-to-word attention),
//!      and one x_c per snippet (clip-rescale attention),
//!   3. build the three-relation graph over those vectors and run the
//!      stacked graph convolution,
//!   4. feed [x_a ; h_L] per answer through the MLP head to a 2-way score.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{sub_seed, TrainingConfig};
use crate::corpus::QuestionThread;
use crate::encoder::{
    clip_rescale_encode_t, encode_context_t, pool_question_t, question_attend_answer_t,
    EncoderParams, EncoderVars,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph_with, interaction_features_t, GcnParams, GcnVars, SemanticGraph};
use crate::loss::listwise_scores_t;
use crate::tape::{Tape, Var};
use crate::text::Vocabulary;

/// MLP prediction head: one ReLU hidden layer, two output scores per answer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl HeadParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        HeadParams {
            w1: Array2::zeros((input_dim, hidden)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, 2)),
            b2: Array2::zeros((1, 2)),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f("w1".into(), &self.w1);
        f("b1".into(), &self.b1);
        f("w2".into(), &self.w2);
        f("b2".into(), &self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f("w1".into(), &mut self.w1);
        f("b1".into(), &mut self.b1);
        f("w2".into(), &mut self.w2);
        f("b2".into(), &mut self.b2);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadVars {
    pub(crate) fn insert(tape: &mut Tape, p: &HeadParams, trainable: bool) -> Self {
        let mut put = |a: &Array2<f64>| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        HeadVars {
            w1: put(&p.w1),
            b1: put(&p.b1),
            w2: put(&p.w2),
            b2: put(&p.b2),
        }
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(String, Var)) {
        f("w1".into(), self.w1);
        f("b1".into(), self.b1);
        f("w2".into(), self.w2);
        f("b2".into(), self.b2);
    }
}

/// Every trainable array in the model, keyed for optimizers and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Word embeddings, `|V| x d_e`; row 0 is the fixed zero padding vector.
    pub embedding: Array2<f64>,
    pub encoder: EncoderParams,
    pub gcn: GcnParams,
    pub head: HeadParams,
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|leaf| leaf.starts_with('b'))
}

impl ModelParams {
    pub fn zeros(config: &TrainingConfig, vocab_len: usize) -> Self {
        let mut gcn_dims = vec![config.context_dim()];
        gcn_dims.extend_from_slice(&config.gcn_dims);
        ModelParams {
            embedding: Array2::zeros((vocab_len, config.embed_dim)),
            encoder: EncoderParams::zeros(config.embed_dim, config.hidden_dim, config.attn_dim),
            gcn: GcnParams::zeros(&gcn_dims),
            head: HeadParams::zeros(config.head_input_dim(), config.mlp_hidden),
        }
    }

    /// Xavier-uniform weights, zero biases, embeddings as given. The draw
    /// order is the fixed visit order, so initialization is deterministic.
    pub fn init(config: &TrainingConfig, embedding: Array2<f64>) -> Result<Self> {
        if embedding.ncols() != config.embed_dim {
            return Err(Error::Argument(format!(
                "embedding width {} does not match configured dimension {}",
                embedding.ncols(),
                config.embed_dim
            )));
        }
        let vocab_len = embedding.nrows();
        let mut params = ModelParams::zeros(config, vocab_len);
        params.embedding = embedding;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "init"));
        params.visit_mut(&mut |name, a| {
            if name == "embedding" || is_bias(&name) {
                return;
            }
            let (fan_in, fan_out) = a.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in a.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        });
        Ok(params)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f("embedding".into(), &self.embedding);
        self.encoder.visit(&mut |n, a| f(format!("enc.{n}"), a));
        self.gcn.visit(&mut |n, a| f(format!("gcn.{n}"), a));
        self.head.visit(&mut |n, a| f(format!("head.{n}"), a));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f("embedding".into(), &mut self.embedding);
        self.encoder.visit_mut(&mut |n, a| f(format!("enc.{n}"), a));
        self.gcn.visit_mut(&mut |n, a| f(format!("gcn.{n}"), a));
        self.head.visit_mut(&mut |n, a| f(format!("head.{n}"), a));
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ModelVars {
    pub embedding: Var,
    pub encoder: EncoderVars,
    pub gcn: GcnVars,
    pub head: HeadVars,
}

impl ModelVars {
    pub(crate) fn insert(tape: &mut Tape, p: &ModelParams, trainable: bool) -> Self {
        let embedding = if trainable {
            tape.param(p.embedding.clone())
        } else {
            tape.constant(p.embedding.clone())
        };
        ModelVars {
            embedding,
            encoder: EncoderVars::insert(tape, &p.encoder, trainable),
            gcn: GcnVars::insert(tape, &p.gcn, trainable),
            head: HeadVars::insert(tape, &p.head, trainable),
        }
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(String, Var)) {
        f("embedding".into(), self.embedding);
        self.encoder.visit(&mut |n, v| f(format!("enc.{n}"), v));
        self.gcn.visit(&mut |n, v| f(format!("gcn.{n}"), v));
        self.head.visit(&mut |n, v| f(format!("head.{n}"), v));
    }
}

/// A question thread reduced to token ids, ready for the encoder.
#[derive(Debug, Clone)]
pub struct ThreadInputs {
    pub question_id: String,
    pub question: Vec<usize>,
    pub answers: Vec<Vec<usize>>,
    pub snippets: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
}

impl ThreadInputs {
    /// Encode a thread. Snippets beyond `num_snippets` (the retrieval order
    /// is kept) and snippets that tokenize to nothing are dropped.
    pub fn new(vocab: &Vocabulary, thread: &QuestionThread, num_snippets: usize) -> Result<Self> {
        let question = vocab.encode(&thread.question);
        if question.is_empty() {
            return Err(Error::Argument(format!(
                "question {} has no tokens",
                thread.question_id
            )));
        }
        let mut answers = Vec::with_capacity(thread.answers.len());
        for (i, a) in thread.answers.iter().enumerate() {
            let ids = vocab.encode(&a.text);
            if ids.is_empty() {
                return Err(Error::Argument(format!(
                    "answer {i} of question {} has no tokens",
                    thread.question_id
                )));
            }
            answers.push(ids);
        }
        let snippets = thread
            .snippets
            .iter()
            .take(num_snippets)
            .map(|s| vocab.encode(&s.text))
            .filter(|ids| !ids.is_empty())
            .collect();
        Ok(ThreadInputs {
            question_id: thread.question_id.clone(),
            question,
            answers,
            snippets,
            labels: thread.labels(),
        })
    }
}

/// Tape handles produced by one thread's forward pass, plus the graph.
pub(crate) struct ThreadForward {
    pub x_q: Var,
    pub x_a: Var,
    pub x_c: Option<Var>,
    pub interaction: Var,
    pub logits: Var,
    pub probs: Var,
    pub graph: SemanticGraph,
}

pub(crate) fn head_t(tape: &mut Tape, z: Var, head: &HeadVars) -> Var {
    let hidden = tape.matmul(z, head.w1);
    let hidden = tape.add_row(hidden, head.b1);
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, head.w2);
    tape.add_row(out, head.b2)
}

/// Full forward pass for one thread. `dropout` carries the training-time
/// dropout rate and its random stream; inference passes `None`.
pub(crate) fn forward_thread_t(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &TrainingConfig,
    inputs: &ThreadInputs,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> ThreadForward {
    let v_q = encode_context_t(tape, vars.embedding, &inputs.question, &vars.encoder);
    let x_q = pool_question_t(tape, v_q);

    let x_a_parts: Vec<Var> = inputs
        .answers
        .iter()
        .map(|ids| {
            let v_a = encode_context_t(tape, vars.embedding, ids, &vars.encoder);
            question_attend_answer_t(tape, v_q, v_a, &vars.encoder).x_a
        })
        .collect();
    let x_a = tape.concat_rows(&x_a_parts);

    let x_c_parts: Vec<Var> = inputs
        .snippets
        .iter()
        .map(|ids| {
            let v_c = encode_context_t(tape, vars.embedding, ids, &vars.encoder);
            clip_rescale_encode_t(tape, v_c, x_q, &vars.encoder, config.clip_k).x_c
        })
        .collect();
    let x_c = (!x_c_parts.is_empty()).then(|| tape.concat_rows(&x_c_parts));

    // The adjacency structure depends only on node counts; features are the
    // freshly computed vectors.
    let answer_feats: Vec<Array2<f64>> = x_a_parts.iter().map(|&v| tape.value(v).clone()).collect();
    let snippet_feats: Vec<Array2<f64>> =
        x_c_parts.iter().map(|&v| tape.value(v).clone()).collect();
    let graph = build_graph_with(
        tape.value(x_q),
        &answer_feats,
        &snippet_feats,
        config.relations,
    )
    .expect("feature widths are uniform by construction");

    let mut node_parts = vec![x_q, x_a];
    if let Some(c) = x_c {
        node_parts.push(c);
    }
    let h0 = tape.concat_rows(&node_parts);
    let interaction = interaction_features_t(tape, &graph, h0, &vars.gcn);

    let z = match (config.features.textual, config.features.interaction) {
        (true, true) => tape.concat_cols(x_a, interaction),
        (true, false) => x_a,
        (false, true) => interaction,
        (false, false) => unreachable!("validated: at least one feature enabled"),
    };
    let z = match dropout {
        Some((rng, rate)) if rate > 0.0 => {
            let dim = tape.value(z).dim();
            let keep = 1.0 - rate;
            let mask = Array2::from_shape_fn(dim, |_| {
                if rng.random_range(0.0..1.0) < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            });
            tape.mul_const(z, mask)
        }
        _ => z,
    };

    let logits = head_t(tape, z, &vars.head);
    let probs = tape.softmax_rows(logits);
    ThreadForward {
        x_q,
        x_a,
        x_c,
        interaction,
        logits,
        probs,
        graph,
    }
}

/// Per-answer scores for one question: raw 2-way scores, their softmax, and
/// the normalized listwise vector over the positive-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `|A| x 2` raw scores.
    pub scores: Array2<f64>,
    /// Row-softmax of the scores.
    pub probs: Array2<f64>,
    /// `|A| x 1` normalized positive-class distribution.
    pub listwise: Array2<f64>,
}

impl PredictionSet {
    pub fn n_answers(&self) -> usize {
        self.scores.nrows()
    }

    /// Positive-class probability per answer.
    pub fn positive_probs(&self) -> Vec<f64> {
        self.probs.column(1).to_vec()
    }
}

/// Run the prediction head over externally supplied features. Disable a
/// feature block by passing `None`; at least one block is required and row
/// counts must agree.
pub fn predict_scores(
    x_a: Option<&Array2<f64>>,
    h_l: Option<&Array2<f64>>,
    head: &HeadParams,
    norm_order: f64,
) -> Result<PredictionSet> {
    let mut tape = Tape::new();
    let z = match (x_a, h_l) {
        (Some(a), Some(h)) => {
            if a.nrows() != h.nrows() {
                return Err(Error::Argument(format!(
                    "feature row counts differ: {} textual vs {} interaction",
                    a.nrows(),
                    h.nrows()
                )));
            }
            let av = tape.constant(a.clone());
            let hv = tape.constant(h.clone());
            tape.concat_cols(av, hv)
        }
        (Some(a), None) => tape.constant(a.clone()),
        (None, Some(h)) => tape.constant(h.clone()),
        (None, None) => {
            return Err(Error::Argument(
                "prediction needs at least one feature block".into(),
            ))
        }
    };
    if tape.value(z).ncols() != head.w1.nrows() {
        return Err(Error::Argument(format!(
            "head expects input width {}, got {}",
            head.w1.nrows(),
            tape.value(z).ncols()
        )));
    }
    if tape.value(z).nrows() == 0 {
        return Err(Error::Argument(
            "prediction needs at least one answer row".into(),
        ));
    }
    let head_vars = HeadVars::insert(&mut tape, head, false);
    let logits = head_t(&mut tape, z, &head_vars);
    let probs = tape.softmax_rows(logits);
    let listwise = listwise_scores_t(&mut tape, probs, norm_order);
    Ok(PredictionSet {
        scores: tape.value(logits).clone(),
        probs: tape.value(probs).clone(),
        listwise: tape.value(listwise).clone(),
    })
}

/// Inference-time byproducts for inspection and equivalence tests.
#[derive(Debug, Clone)]
pub struct ForwardDetails {
    pub x_q: Array2<f64>,
    pub x_a: Array2<f64>,
    /// `|C'| x d_h`; zero rows when the thread has no usable snippets.
    pub x_c: Array2<f64>,
    pub graph: SemanticGraph,
    pub interaction: Array2<f64>,
    pub prediction: PredictionSet,
}

/// The trained (or freshly initialized) MUSE model.
#[derive(Debug, Clone)]
pub struct MuseModel {
    pub config: TrainingConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl MuseModel {
    pub fn new(config: TrainingConfig, vocab: Vocabulary, params: ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(MuseModel {
            config,
            vocab,
            params,
        })
    }

    /// Fresh model with Xavier weights and the given initial embeddings.
    pub fn init(config: TrainingConfig, vocab: Vocabulary, embedding: Array2<f64>) -> Result<Self> {
        config.validate()?;
        if embedding.nrows() != vocab.len() {
            return Err(Error::Argument(format!(
                "embedding has {} rows for a {}-token vocabulary",
                embedding.nrows(),
                vocab.len()
            )));
        }
        let params = ModelParams::init(&config, embedding)?;
        Ok(MuseModel {
            config,
            vocab,
            params,
        })
    }

    pub fn predict(&self, thread: &QuestionThread) -> Result<PredictionSet> {
        Ok(self.forward_details(thread)?.prediction)
    }

    /// Rank answer indices by descending positive-class probability; equal
    /// scores keep input order.
    pub fn rank_answers(&self, thread: &QuestionThread) -> Result<Vec<(usize, f64)>> {
        let pred = self.predict(thread)?;
        Ok(rank_by_score(&pred.positive_probs()))
    }

    pub fn forward_details(&self, thread: &QuestionThread) -> Result<ForwardDetails> {
        let inputs = ThreadInputs::new(&self.vocab, thread, self.config.num_snippets)?;
        Ok(forward_prepared(&self.config, &self.params, &inputs))
    }
}

/// Forward pass over pre-encoded inputs with frozen parameters.
pub(crate) fn forward_prepared(
    config: &TrainingConfig,
    params: &ModelParams,
    inputs: &ThreadInputs,
) -> ForwardDetails {
    let mut tape = Tape::new();
    let vars = ModelVars::insert(&mut tape, params, false);
    let fwd = forward_thread_t(&mut tape, &vars, config, inputs, None);
    let listwise = listwise_scores_t(&mut tape, fwd.probs, config.norm_order);
    let x_c = match fwd.x_c {
        Some(v) => tape.value(v).clone(),
        None => Array2::zeros((0, config.context_dim())),
    };
    ForwardDetails {
        x_q: tape.value(fwd.x_q).clone(),
        x_a: tape.value(fwd.x_a).clone(),
        x_c,
        interaction: tape.value(fwd.interaction).clone(),
        prediction: PredictionSet {
            scores: tape.value(fwd.logits).clone(),
            probs: tape.value(fwd.probs).clone(),
            listwise: tape.value(listwise).clone(),
        },
        graph: fwd.graph,
    }
}

/// Descending stable sort of indices by score.
pub(crate) fn rank_by_score(scores: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
    ranked
}
