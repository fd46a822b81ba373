//! Context encoding and attention.
//!
//! A bidirectional LSTM turns a token-id sequence into a context matrix in
//! which row t concatenates the forward and backward hidden states at
//! position t. On top of that sit the word-to-word question/answer attention
//! (producing the textual answer feature x_a), question max-pooling (x_q),
//! and the clip-rescale attention over snippet positions (x_c).
//!
//! All math is expressed as [`Tape`] graph builders so that training and
//! inference share one implementation; the public functions wrap a builder
//! in a throwaway tape.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::text::PAD_ID;

/// One direction of the recurrent encoder. The four gates are laid out as
/// [input, forget, cell, output] along the 4h axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Input projection, `d_e x 4h`.
    pub w_ih: Array2<f64>,
    /// Recurrent projection, `h x 4h`.
    pub w_hh: Array2<f64>,
    /// Gate bias, `1 x 4h`.
    pub bias: Array2<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_ih: Array2::zeros((input_dim, 4 * hidden)),
            w_hh: Array2::zeros((hidden, 4 * hidden)),
            bias: Array2::zeros((1, 4 * hidden)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.nrows()
    }
}

/// All encoder-side trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    /// Answer-attention projection, `2 d_h x d_proj`.
    pub w_a: Array2<f64>,
    /// Scalar bias of the attention logits, `1 x 1`.
    pub b_a: Array2<f64>,
    /// Bias of the enriched answer projection, `1 x d_proj`.
    pub b_aa: Array2<f64>,
    /// Snippet-attention bilinear map, `d_h x d_h`.
    pub w_c: Array2<f64>,
    /// Scalar bias of the snippet-attention logits, `1 x 1`.
    pub b_c: Array2<f64>,
}

impl EncoderParams {
    pub fn zeros(embed_dim: usize, hidden: usize, proj_dim: usize) -> Self {
        let d_h = 2 * hidden;
        EncoderParams {
            fwd: LstmParams::zeros(embed_dim, hidden),
            bwd: LstmParams::zeros(embed_dim, hidden),
            w_a: Array2::zeros((2 * d_h, proj_dim)),
            b_a: Array2::zeros((1, 1)),
            b_aa: Array2::zeros((1, proj_dim)),
            w_c: Array2::zeros((d_h, d_h)),
            b_c: Array2::zeros((1, 1)),
        }
    }

    pub fn context_dim(&self) -> usize {
        2 * self.fwd.hidden_dim()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f("fwd.w_ih".into(), &self.fwd.w_ih);
        f("fwd.w_hh".into(), &self.fwd.w_hh);
        f("fwd.bias".into(), &self.fwd.bias);
        f("bwd.w_ih".into(), &self.bwd.w_ih);
        f("bwd.w_hh".into(), &self.bwd.w_hh);
        f("bwd.bias".into(), &self.bwd.bias);
        f("w_a".into(), &self.w_a);
        f("b_a".into(), &self.b_a);
        f("b_aa".into(), &self.b_aa);
        f("w_c".into(), &self.w_c);
        f("b_c".into(), &self.b_c);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f("fwd.w_ih".into(), &mut self.fwd.w_ih);
        f("fwd.w_hh".into(), &mut self.fwd.w_hh);
        f("fwd.bias".into(), &mut self.fwd.bias);
        f("bwd.w_ih".into(), &mut self.bwd.w_ih);
        f("bwd.w_hh".into(), &mut self.bwd.w_hh);
        f("bwd.bias".into(), &mut self.bwd.bias);
        f("w_a".into(), &mut self.w_a);
        f("b_a".into(), &mut self.b_a);
        f("b_aa".into(), &mut self.b_aa);
        f("w_c".into(), &mut self.w_c);
        f("b_c".into(), &mut self.b_c);
    }
}

/// Tape handles for the encoder weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    pub w_a: Var,
    pub b_a: Var,
    pub b_aa: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub hidden: usize,
}

impl EncoderVars {
    pub(crate) fn insert(tape: &mut Tape, p: &EncoderParams, trainable: bool) -> Self {
        let mut put = |a: &Array2<f64>| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        EncoderVars {
            fwd: LstmVars {
                w_ih: put(&p.fwd.w_ih),
                w_hh: put(&p.fwd.w_hh),
                bias: put(&p.fwd.bias),
            },
            bwd: LstmVars {
                w_ih: put(&p.bwd.w_ih),
                w_hh: put(&p.bwd.w_hh),
                bias: put(&p.bwd.bias),
            },
            w_a: put(&p.w_a),
            b_a: put(&p.b_a),
            b_aa: put(&p.b_aa),
            w_c: put(&p.w_c),
            b_c: put(&p.b_c),
            hidden: p.fwd.hidden_dim(),
        }
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(String, Var)) {
        f("fwd.w_ih".into(), self.fwd.w_ih);
        f("fwd.w_hh".into(), self.fwd.w_hh);
        f("fwd.bias".into(), self.fwd.bias);
        f("bwd.w_ih".into(), self.bwd.w_ih);
        f("bwd.w_hh".into(), self.bwd.w_hh);
        f("bwd.bias".into(), self.bwd.bias);
        f("w_a".into(), self.w_a);
        f("b_a".into(), self.b_a);
        f("b_aa".into(), self.b_aa);
        f("w_c".into(), self.w_c);
        f("b_c".into(), self.b_c);
    }
}

/// A token sequence with its context-aware vectors (`length x d_h`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub token_ids: Vec<usize>,
    pub context: Array2<f64>,
}

/// Intermediate quantities of the question/answer attention.
#[derive(Debug, Clone)]
pub struct AttentionState {
    /// Pre-softmax scores, `|a| x |q|`.
    pub raw_scores: Array2<f64>,
    /// Row-softmax of the scores, `|a| x |q|`.
    pub weights: Array2<f64>,
    /// Question summaries per answer position, `|a| x d_h`.
    pub attended: Array2<f64>,
}

/// Intermediate quantities of the clip-rescale attention.
#[derive(Debug, Clone)]
pub struct ClipState {
    /// Softmax weights before clipping, `1 x |c|`.
    pub raw_weights: Array2<f64>,
    /// Binary keep-mask over positions.
    pub mask: Vec<u8>,
    /// Clipped, renormalized weights, `1 x |c|`.
    pub weights: Array2<f64>,
}

fn lstm_step(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    p: LstmVars,
    hidden: usize,
) -> (Var, Var) {
    let xw = tape.matmul(x_t, p.w_ih);
    let hw = tape.matmul(h_prev, p.w_hh);
    let pre = tape.add(xw, hw);
    let z = tape.add(pre, p.bias);
    let i_gate = tape.slice_cols(z, 0, hidden);
    let f_gate = tape.slice_cols(z, hidden, 2 * hidden);
    let g_cand = tape.slice_cols(z, 2 * hidden, 3 * hidden);
    let o_gate = tape.slice_cols(z, 3 * hidden, 4 * hidden);
    let i_gate = tape.sigmoid(i_gate);
    let f_gate = tape.sigmoid(f_gate);
    let g_cand = tape.tanh(g_cand);
    let o_gate = tape.sigmoid(o_gate);
    let keep = tape.mul(f_gate, c_prev);
    let write = tape.mul(i_gate, g_cand);
    let c = tape.add(keep, write);
    let c_act = tape.tanh(c);
    let h = tape.mul(o_gate, c_act);
    (h, c)
}

fn run_direction(
    tape: &mut Tape,
    steps: &[Var],
    p: LstmVars,
    hidden: usize,
    reverse: bool,
) -> Vec<Var> {
    let mut h = tape.constant(Array2::zeros((1, hidden)));
    let mut c = tape.constant(Array2::zeros((1, hidden)));
    let order: Vec<usize> = if reverse {
        (0..steps.len()).rev().collect()
    } else {
        (0..steps.len()).collect()
    };
    let mut states = vec![h; steps.len()];
    for t in order {
        let (h_new, c_new) = lstm_step(tape, steps[t], h, c, p, hidden);
        states[t] = h_new;
        h = h_new;
        c = c_new;
    }
    states
}

/// Build the `T x 2h` context matrix for a token-id sequence.
pub(crate) fn encode_context_t(
    tape: &mut Tape,
    embedding: Var,
    ids: &[usize],
    enc: &EncoderVars,
) -> Var {
    assert!(!ids.is_empty(), "encode_context_t: empty sequence");
    let x = tape.gather_rows(embedding, ids);
    let steps: Vec<Var> = (0..ids.len())
        .map(|t| tape.slice_rows(x, t, t + 1))
        .collect();
    let fwd = run_direction(tape, &steps, enc.fwd, enc.hidden, false);
    let bwd = run_direction(tape, &steps, enc.bwd, enc.hidden, true);
    let fwd_mat = tape.concat_rows(&fwd);
    let bwd_mat = tape.concat_rows(&bwd);
    tape.concat_cols(fwd_mat, bwd_mat)
}

pub(crate) struct AttendBuild {
    pub x_a: Var,
    pub raw_scores: Var,
    pub weights: Var,
    pub attended: Var,
}

/// Word-to-word attention from answer positions over question positions,
/// ending in the max-pooled textual answer feature x_a.
pub(crate) fn question_attend_answer_t(
    tape: &mut Tape,
    v_q: Var,
    v_a: Var,
    enc: &EncoderVars,
) -> AttendBuild {
    let q_t = tape.transpose(v_q);
    let dots = tape.matmul(v_a, q_t);
    let shifted = tape.add_scalar_var(dots, enc.b_a);
    let raw_scores = tape.tanh(shifted);
    let weights = tape.softmax_rows(raw_scores);
    let attended = tape.matmul(weights, v_q);
    let cat = tape.concat_cols(v_a, attended);
    let proj = tape.matmul(cat, enc.w_a);
    let proj = tape.add_row(proj, enc.b_aa);
    let enriched = tape.tanh(proj);
    let x_a = tape.max_pool_rows(enriched);
    AttendBuild {
        x_a,
        raw_scores,
        weights,
        attended,
    }
}

/// Max-pool the question context into x_q.
pub(crate) fn pool_question_t(tape: &mut Tape, v_q: Var) -> Var {
    tape.max_pool_rows(v_q)
}

pub(crate) struct ClipBuild {
    pub x_c: Var,
    pub raw_weights: Var,
    pub weights: Var,
    pub mask: Vec<u8>,
}

/// Keep the indices of the `k` largest weights; ties favor lower indices.
fn top_k_mask(beta: &Array2<f64>, k: usize) -> Vec<u8> {
    let n = beta.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal weights keep their index order.
    order.sort_by(|&i, &j| {
        beta[[0, j]]
            .partial_cmp(&beta[[0, i]])
            .expect("finite weights")
    });
    let mut mask = vec![0u8; n];
    for &idx in order.iter().take(k.min(n)) {
        mask[idx] = 1;
    }
    mask
}

/// Clip-rescale attention over snippet positions guided by x_q, ending in
/// the snippet feature x_c.
pub(crate) fn clip_rescale_encode_t(
    tape: &mut Tape,
    v_c: Var,
    x_q: Var,
    enc: &EncoderVars,
    k: usize,
) -> ClipBuild {
    assert!(k >= 1, "clip_rescale_encode_t: k must be >= 1");
    let proj = tape.matmul(v_c, enc.w_c);
    let q_col = tape.transpose(x_q);
    let logits_col = tape.matmul(proj, q_col);
    let logits = tape.transpose(logits_col);
    let logits = tape.add_scalar_var(logits, enc.b_c);
    let raw_weights = tape.softmax_rows(logits);

    let mask = top_k_mask(tape.value(raw_weights), k);
    let mask_row = Array2::from_shape_fn((1, mask.len()), |(_, j)| f64::from(mask[j]));
    let kept = tape.mul_const(raw_weights, mask_row);
    // All entries are non-negative, so the L1 norm is a plain sum.
    let total = tape.sum_all(kept);
    let weights = tape.div_by_scalar(kept, total);
    let x_c = tape.matmul(weights, v_c);
    ClipBuild {
        x_c,
        raw_weights,
        weights,
        mask,
    }
}

// --- public array-level wrappers -------------------------------------------

/// Encode a token-id sequence; padding ids are dropped first.
pub fn encode_context(
    ids: &[usize],
    embedding: &Array2<f64>,
    params: &EncoderParams,
) -> Result<EncodedSequence> {
    let real: Vec<usize> = ids.iter().copied().filter(|&id| id != PAD_ID).collect();
    if real.is_empty() {
        return Err(Error::Argument("cannot encode an empty sequence".into()));
    }
    let mut tape = Tape::new();
    let emb = tape.constant(embedding.clone());
    let enc = EncoderVars::insert(&mut tape, params, false);
    let ctx = encode_context_t(&mut tape, emb, &real, &enc);
    Ok(EncodedSequence {
        token_ids: real,
        context: tape.value(ctx).clone(),
    })
}

/// Question-attended answer encoding (textual feature x_a, `1 x d_proj`).
pub fn question_attend_answer(
    question: &EncodedSequence,
    answer: &EncodedSequence,
    params: &EncoderParams,
) -> Result<(Array2<f64>, AttentionState)> {
    if question.context.nrows() == 0 || answer.context.nrows() == 0 {
        return Err(Error::Argument(
            "attention requires non-empty sequences".into(),
        ));
    }
    let mut tape = Tape::new();
    let v_q = tape.constant(question.context.clone());
    let v_a = tape.constant(answer.context.clone());
    let enc = EncoderVars::insert(&mut tape, params, false);
    let built = question_attend_answer_t(&mut tape, v_q, v_a, &enc);
    let x_a = tape.value(built.x_a).clone();
    if x_a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite attention output".into()));
    }
    Ok((
        x_a,
        AttentionState {
            raw_scores: tape.value(built.raw_scores).clone(),
            weights: tape.value(built.weights).clone(),
            attended: tape.value(built.attended).clone(),
        },
    ))
}

/// Coordinate-wise max over question positions (x_q, `1 x d_h`).
pub fn pool_question(question: &EncodedSequence) -> Array2<f64> {
    let mut tape = Tape::new();
    let v_q = tape.constant(question.context.clone());
    let pooled = pool_question_t(&mut tape, v_q);
    tape.value(pooled).clone()
}

/// Clip-rescale snippet encoding (x_c, `1 x d_h`).
pub fn clip_rescale_encode(
    snippet: &EncodedSequence,
    x_q: &Array2<f64>,
    params: &EncoderParams,
    k: usize,
) -> Result<(Array2<f64>, ClipState)> {
    if k < 1 {
        return Err(Error::Argument("clip size k must be >= 1".into()));
    }
    if snippet.context.nrows() == 0 {
        return Err(Error::Argument(
            "cannot attend over an empty snippet".into(),
        ));
    }
    let mut tape = Tape::new();
    let v_c = tape.constant(snippet.context.clone());
    let q = tape.constant(x_q.clone());
    let enc = EncoderVars::insert(&mut tape, params, false);
    let built = clip_rescale_encode_t(&mut tape, v_c, q, &enc, k);
    Ok((
        tape.value(built.x_c).clone(),
        ClipState {
            raw_weights: tape.value(built.raw_weights).clone(),
            mask: built.mask,
            weights: tape.value(built.weights).clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.5..0.5))
    }

    fn random_params(embed_dim: usize, hidden: usize, proj: usize, seed: u64) -> EncoderParams {
        let mut p = EncoderParams::zeros(embed_dim, hidden, proj);
        let mut i = 0u64;
        p.visit_mut(&mut |_, a| {
            let dim = a.dim();
            *a = mat(dim.0, dim.1, seed.wrapping_add(i));
            i += 1;
        });
        p
    }

    fn seq(context: Array2<f64>) -> EncodedSequence {
        EncodedSequence {
            token_ids: vec![2; context.nrows()],
            context,
        }
    }

    #[test]
    fn context_shape_is_length_by_two_hidden() {
        let params = random_params(8, 100, 200, 1);
        let embedding = mat(6, 8, 2);
        let out = encode_context(&[2, 3, 4, 5, 2], &embedding, &params).unwrap();
        assert_eq!(out.context.dim(), (5, 200));
        assert!(out.context.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weights_give_zero_context() {
        let params = EncoderParams::zeros(4, 3, 6);
        let embedding = Array2::zeros((5, 4));
        let out = encode_context(&[1, 2, 3], &embedding, &params).unwrap();
        assert!(out.context.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic_and_drops_padding() {
        let params = random_params(4, 3, 6, 3);
        let embedding = mat(6, 4, 4);
        let a = encode_context(&[2, 0, 3, 0], &embedding, &params).unwrap();
        let b = encode_context(&[2, 3], &embedding, &params).unwrap();
        assert_eq!(a, b);
        assert!(encode_context(&[0, 0], &embedding, &params).is_err());
        assert!(encode_context(&[], &embedding, &params).is_err());
    }

    #[test]
    fn singleton_question_gets_full_attention() {
        let params = random_params(4, 2, 4, 5);
        let question = seq(mat(1, 4, 6));
        let answer = seq(mat(3, 4, 7));
        let (_, state) = question_attend_answer(&question, &answer, &params).unwrap();
        for i in 0..3 {
            assert!((state.weights[[i, 0]] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!((state.attended[[i, j]] - question.context[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_hand_computation() {
        // d_h = 2, |q| = 2, |a| = 1, identity-padded W_a, zero biases.
        let mut params = EncoderParams::zeros(2, 1, 2);
        params.w_a = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]];
        let question = seq(array![[1.0, 0.0], [0.0, 1.0]]);
        let answer = seq(array![[1.0, 1.0]]);
        let (x_a, state) = question_attend_answer(&question, &answer, &params).unwrap();

        let t = 1.0f64.tanh();
        assert!((state.raw_scores[[0, 0]] - t).abs() < 1e-12);
        assert!((state.raw_scores[[0, 1]] - t).abs() < 1e-12);
        assert!((state.weights[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((state.attended[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((state.attended[[0, 1]] - 0.5).abs() < 1e-12);
        // cat = [1, 1, 0.5, 0.5], identity-padded W_a keeps [1, 1].
        assert!((x_a[[0, 0]] - t).abs() < 1e-12);
        assert!((x_a[[0, 1]] - t).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_normalized() {
        let params = random_params(4, 3, 6, 8);
        let question = seq(mat(5, 6, 9));
        let answer = seq(mat(4, 6, 10));
        let (_, state) = question_attend_answer(&question, &answer, &params).unwrap();
        for row in state.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn pool_question_takes_coordinate_max() {
        let single = seq(array![[0.4, -0.2]]);
        assert_eq!(pool_question(&single), array![[0.4, -0.2]]);

        let q = seq(array![[1.0, -2.0], [0.0, 3.0]]);
        assert_eq!(pool_question(&q), array![[1.0, 3.0]]);

        let permuted = seq(array![[0.0, 3.0], [1.0, -2.0]]);
        assert_eq!(pool_question(&permuted), pool_question(&q));
    }

    #[test]
    fn clip_rescale_matches_hand_fixture() {
        // Arrange logits = ln beta so the softmax reproduces beta exactly.
        let mut params = EncoderParams::zeros(2, 1, 2);
        params.w_c = array![[1.0, 0.0], [0.0, 1.0]];
        let x_q = array![[1.0, 0.0]];
        let v_c = array![[0.5f64.ln(), 1.0], [0.3f64.ln(), -1.0], [0.2f64.ln(), 2.0]];
        let snippet = seq(v_c.clone());
        let (x_c, state) = clip_rescale_encode(&snippet, &x_q, &params, 2).unwrap();

        let expect = [0.625, 0.375, 0.0];
        for (j, want) in expect.iter().enumerate() {
            assert!(
                (state.weights[[0, j]] - want).abs() < 1e-9,
                "weight {j}: {} vs {want}",
                state.weights[[0, j]]
            );
        }
        assert_eq!(state.mask, vec![1, 1, 0]);
        for j in 0..2 {
            let want = 0.625 * v_c[[0, j]] + 0.375 * v_c[[1, j]];
            assert!((x_c[[0, j]] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn clip_with_large_k_is_identity() {
        let params = random_params(4, 2, 4, 11);
        let snippet = seq(mat(3, 4, 12));
        let x_q = mat(1, 4, 13);
        let (_, state) = clip_rescale_encode(&snippet, &x_q, &params, 10).unwrap();
        for j in 0..3 {
            assert!((state.weights[[0, j]] - state.raw_weights[[0, j]]).abs() < 1e-9);
        }
        assert_eq!(state.mask, vec![1, 1, 1]);
    }

    #[test]
    fn clip_support_has_at_most_k_nonzeros() {
        let params = random_params(4, 2, 4, 14);
        let snippet = seq(mat(12, 4, 15));
        let x_q = mat(1, 4, 16);
        let (_, state) = clip_rescale_encode(&snippet, &x_q, &params, 8).unwrap();
        let nonzero = state.weights.iter().filter(|&&w| w > 0.0).count();
        assert_eq!(nonzero, 8);
        assert!((state.weights.sum() - 1.0).abs() < 1e-6);

        // The kept set is exactly the positions of the 8 largest raw weights.
        let mut order: Vec<usize> = (0..12).collect();
        order.sort_by(|&i, &j| {
            state.raw_weights[[0, j]]
                .partial_cmp(&state.raw_weights[[0, i]])
                .unwrap()
        });
        for &idx in order.iter().take(8) {
            assert_eq!(state.mask[idx], 1);
        }
    }

    #[test]
    fn clip_ties_keep_lowest_index() {
        let beta = array![[0.25, 0.25, 0.25, 0.25]];
        assert_eq!(top_k_mask(&beta, 2), vec![1, 1, 0, 0]);
    }

    #[test]
    fn clip_rejects_zero_k() {
        let params = EncoderParams::zeros(2, 1, 2);
        let snippet = seq(array![[0.1, 0.2]]);
        let x_q = array![[1.0, 0.0]];
        assert!(clip_rescale_encode(&snippet, &x_q, &params, 0).is_err());
    }

    /// End-to-end finite-difference check over every encoder parameter:
    /// scalarized x_a + x_c objective, tiny dimensions.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let embed_dim = 3;
        let hidden = 2;
        let proj = 4; // 2 * d_h
        let embedding = mat(6, embed_dim, 20);
        let q_ids = vec![2usize, 3, 4];
        let a_ids = vec![1usize, 5];
        let c_ids = vec![3usize, 2, 5];
        let w_xa = mat(1, proj, 21);
        let w_xc = mat(1, 2 * hidden, 22);

        let run = |p: &EncoderParams, trainable: bool| -> (f64, Tape, EncoderVars) {
            let mut tape = Tape::new();
            let emb = tape.constant(embedding.clone());
            let enc = EncoderVars::insert(&mut tape, p, trainable);
            let v_q = encode_context_t(&mut tape, emb, &q_ids, &enc);
            let v_a = encode_context_t(&mut tape, emb, &a_ids, &enc);
            let v_c = encode_context_t(&mut tape, emb, &c_ids, &enc);
            let att = question_attend_answer_t(&mut tape, v_q, v_a, &enc);
            let x_q = pool_question_t(&mut tape, v_q);
            let clip = clip_rescale_encode_t(&mut tape, v_c, x_q, &enc, 2);
            let sa = tape.mul_const(att.x_a, w_xa.clone());
            let sa = tape.sum_all(sa);
            let sc = tape.mul_const(clip.x_c, w_xc.clone());
            let sc = tape.sum_all(sc);
            let loss = tape.add(sa, sc);
            let value = tape.scalar(loss);
            tape.backward(loss);
            (value, tape, enc)
        };

        let params = random_params(embed_dim, hidden, proj, 23);
        let (_, tape, enc) = run(&params, true);
        let mut grads = std::collections::BTreeMap::new();
        enc.visit(&mut |name, var| {
            grads.insert(name, tape.grad(var).cloned());
        });

        let h = 1e-5;
        let names: Vec<String> = grads.keys().cloned().collect();
        for name in names {
            let analytic = grads[&name]
                .clone()
                .expect("all encoder params get gradients");
            let dim = analytic.dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let perturb = |delta: f64| -> f64 {
                        let mut p = params.clone();
                        p.visit_mut(&mut |n, a| {
                            if n == name {
                                a[[r, c]] += delta;
                            }
                        });
                        run(&p, false).0
                    };
                    let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                    let a = analytic[[r, c]];
                    assert!(
                        (a - numeric).abs() <= 1e-6 + 1e-3 * numeric.abs(),
                        "{name}[{r},{c}]: analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }
}
