//! Multi-relation semantic graph over {question, answers, snippets} and the
//! relational graph convolution that produces per-answer interaction
//! features.
//!
//! Node order is fixed: node 0 is the question, nodes 1..=|A| the answers,
//! and the remaining nodes the snippets. Three binary, symmetric relations
//! connect them:
//!   relevance   — question to every answer and every snippet,
//!   similarity  — every answer pair and every snippet pair,
//!   entailment  — every (answer, snippet) pair.
//! Ablating a relation zeroes its adjacency at graph construction, which is
//! exactly the same computation the convolution would see with that matrix
//! zeroed by hand.

use ndarray::Array2;

use crate::config::RelationToggles;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// The graph: initial node features, raw adjacencies, and their
/// symmetrically normalized forms.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    /// `H^(0)`, shape `(1 + |A| + |C|) x d_h`.
    pub features: Array2<f64>,
    pub a_rel: Array2<f64>,
    pub a_sim: Array2<f64>,
    pub a_ent: Array2<f64>,
    pub lam_rel: Array2<f64>,
    pub lam_sim: Array2<f64>,
    pub lam_ent: Array2<f64>,
    pub n_answers: usize,
    pub n_snippets: usize,
}

impl SemanticGraph {
    pub fn n_nodes(&self) -> usize {
        1 + self.n_answers + self.n_snippets
    }
}

/// Weights of one convolution layer: one matrix per relation plus the
/// self-connection. No biases (the propagation rule has none).
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayerParams {
    pub w_rel: Array2<f64>,
    pub w_sim: Array2<f64>,
    pub w_ent: Array2<f64>,
    pub w_self: Array2<f64>,
}

impl GcnLayerParams {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        GcnLayerParams {
            w_rel: Array2::zeros((input_dim, output_dim)),
            w_sim: Array2::zeros((input_dim, output_dim)),
            w_ent: Array2::zeros((input_dim, output_dim)),
            w_self: Array2::zeros((input_dim, output_dim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub layers: Vec<GcnLayerParams>,
}

impl GcnParams {
    /// Zero-initialized stack with the given dimension chain, e.g.
    /// `[200, 150, 100]` for the default two layers.
    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| GcnLayerParams::zeros(w[0], w[1]))
            .collect();
        GcnParams { layers }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            f(format!("{l}.rel"), &layer.w_rel);
            f(format!("{l}.sim"), &layer.w_sim);
            f(format!("{l}.ent"), &layer.w_ent);
            f(format!("{l}.self"), &layer.w_self);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(format!("{l}.rel"), &mut layer.w_rel);
            f(format!("{l}.sim"), &mut layer.w_sim);
            f(format!("{l}.ent"), &mut layer.w_ent);
            f(format!("{l}.self"), &mut layer.w_self);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GcnLayerVars {
    pub w_rel: Var,
    pub w_sim: Var,
    pub w_ent: Var,
    pub w_self: Var,
}

#[derive(Debug, Clone)]
pub(crate) struct GcnVars {
    pub layers: Vec<GcnLayerVars>,
}

impl GcnVars {
    pub(crate) fn insert(tape: &mut Tape, p: &GcnParams, trainable: bool) -> Self {
        let mut put = |a: &Array2<f64>| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        GcnVars {
            layers: p
                .layers
                .iter()
                .map(|l| GcnLayerVars {
                    w_rel: put(&l.w_rel),
                    w_sim: put(&l.w_sim),
                    w_ent: put(&l.w_ent),
                    w_self: put(&l.w_self),
                })
                .collect(),
        }
    }

    pub(crate) fn visit(&self, f: &mut dyn FnMut(String, Var)) {
        for (l, layer) in self.layers.iter().enumerate() {
            f(format!("{l}.rel"), layer.w_rel);
            f(format!("{l}.sim"), layer.w_sim);
            f(format!("{l}.ent"), layer.w_ent);
            f(format!("{l}.self"), layer.w_self);
        }
    }
}

/// Build the graph with every relation enabled.
pub fn build_graph(
    x_q: &Array2<f64>,
    answer_features: &[Array2<f64>],
    snippet_features: &[Array2<f64>],
) -> Result<SemanticGraph> {
    build_graph_with(
        x_q,
        answer_features,
        snippet_features,
        RelationToggles::default(),
    )
}

/// Build the graph, zeroing the adjacency of every disabled relation.
pub fn build_graph_with(
    x_q: &Array2<f64>,
    answer_features: &[Array2<f64>],
    snippet_features: &[Array2<f64>],
    relations: RelationToggles,
) -> Result<SemanticGraph> {
    if answer_features.is_empty() {
        return Err(Error::Argument(
            "graph needs at least one answer node".into(),
        ));
    }
    let d = x_q.ncols();
    if x_q.nrows() != 1 {
        return Err(Error::Argument(
            "question feature must be a single row".into(),
        ));
    }
    for (kind, list) in [("answer", answer_features), ("snippet", snippet_features)] {
        for (i, v) in list.iter().enumerate() {
            if v.dim() != (1, d) {
                return Err(Error::Argument(format!(
                    "{kind} feature {i} has shape {:?}, expected (1, {d})",
                    v.dim()
                )));
            }
        }
    }

    let n_a = answer_features.len();
    let n_c = snippet_features.len();
    let n = 1 + n_a + n_c;

    let mut features = Array2::zeros((n, d));
    features.row_mut(0).assign(&x_q.row(0));
    for (i, v) in answer_features.iter().enumerate() {
        features.row_mut(1 + i).assign(&v.row(0));
    }
    for (i, v) in snippet_features.iter().enumerate() {
        features.row_mut(1 + n_a + i).assign(&v.row(0));
    }

    let mut a_rel = Array2::zeros((n, n));
    let mut a_sim = Array2::zeros((n, n));
    let mut a_ent = Array2::zeros((n, n));
    let connect = |a: &mut Array2<f64>, i: usize, j: usize| {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    };

    if relations.relevance {
        for j in 1..n {
            connect(&mut a_rel, 0, j);
        }
    }
    if relations.similarity {
        for i in 1..=n_a {
            for j in (i + 1)..=n_a {
                connect(&mut a_sim, i, j);
            }
        }
        for i in (1 + n_a)..n {
            for j in (i + 1)..n {
                connect(&mut a_sim, i, j);
            }
        }
    }
    if relations.entailment {
        for i in 1..=n_a {
            for j in (1 + n_a)..n {
                connect(&mut a_ent, i, j);
            }
        }
    }

    let lam_rel = normalize_adjacency(&a_rel)?;
    let lam_sim = normalize_adjacency(&a_sim)?;
    let lam_ent = normalize_adjacency(&a_ent)?;
    Ok(SemanticGraph {
        features,
        a_rel,
        a_sim,
        a_ent,
        lam_rel,
        lam_sim,
        lam_ent,
        n_answers: n_a,
        n_snippets: n_c,
    })
}

/// Symmetric normalization `D^{-1/2} A D^{-1/2}`; zero-degree nodes keep
/// all-zero rows and columns.
pub fn normalize_adjacency(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Argument("adjacency must be square".into()));
    }
    for i in 0..n {
        if a[[i, i]] != 0.0 {
            return Err(Error::Argument(format!(
                "adjacency has a self-loop at node {i}"
            )));
        }
        for j in 0..n {
            let v = a[[i, j]];
            if v != 0.0 && v != 1.0 {
                return Err(Error::Argument(format!(
                    "adjacency entry ({i},{j}) = {v} is not binary"
                )));
            }
            if a[[i, j]] != a[[j, i]] {
                return Err(Error::Argument(format!(
                    "adjacency is asymmetric at ({i},{j})"
                )));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a.row(i).sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        a[[i, j]] * inv_sqrt_deg[i] * inv_sqrt_deg[j]
    }))
}

/// One propagation step on the tape:
/// `H' = ReLU(Λ_rel H W_rel + Λ_sim H W_sim + Λ_ent H W_ent + H W_self)`.
pub(crate) fn rgcn_layer_t(tape: &mut Tape, h: Var, lams: [Var; 3], w: GcnLayerVars) -> Var {
    let hw_rel = tape.matmul(h, w.w_rel);
    let agg_rel = tape.matmul(lams[0], hw_rel);
    let hw_sim = tape.matmul(h, w.w_sim);
    let agg_sim = tape.matmul(lams[1], hw_sim);
    let hw_ent = tape.matmul(h, w.w_ent);
    let agg_ent = tape.matmul(lams[2], hw_ent);
    let self_term = tape.matmul(h, w.w_self);
    let sum = tape.add(agg_rel, agg_sim);
    let sum = tape.add(sum, agg_ent);
    let sum = tape.add(sum, self_term);
    tape.relu(sum)
}

/// Insert the graph's normalized adjacencies as tape constants.
pub(crate) fn lam_constants(tape: &mut Tape, graph: &SemanticGraph) -> [Var; 3] {
    [
        tape.constant(graph.lam_rel.clone()),
        tape.constant(graph.lam_sim.clone()),
        tape.constant(graph.lam_ent.clone()),
    ]
}

/// Run the full stack and keep the answer rows (`|A| x dim_L`), on-tape.
pub(crate) fn interaction_features_t(
    tape: &mut Tape,
    graph: &SemanticGraph,
    h0: Var,
    gcn: &GcnVars,
) -> Var {
    let lams = lam_constants(tape, graph);
    let mut h = h0;
    for layer in &gcn.layers {
        h = rgcn_layer_t(tape, h, lams, *layer);
    }
    tape.slice_rows(h, 1, 1 + graph.n_answers)
}

fn check_layer_shapes(
    h: &Array2<f64>,
    graph: &SemanticGraph,
    layer: &GcnLayerParams,
) -> Result<()> {
    if h.nrows() != graph.n_nodes() {
        return Err(Error::Argument(format!(
            "feature matrix has {} rows for a {}-node graph",
            h.nrows(),
            graph.n_nodes()
        )));
    }
    let din = layer.w_rel.dim();
    for (name, w) in [
        ("w_sim", &layer.w_sim),
        ("w_ent", &layer.w_ent),
        ("w_self", &layer.w_self),
    ] {
        if w.dim() != din {
            return Err(Error::Argument(format!(
                "layer weight {name} has shape {:?}, expected {din:?}",
                w.dim()
            )));
        }
    }
    if h.ncols() != din.0 {
        return Err(Error::Argument(format!(
            "feature width {} does not match layer input dim {}",
            h.ncols(),
            din.0
        )));
    }
    Ok(())
}

/// One propagation step over plain arrays.
pub fn rgcn_layer(
    h: &Array2<f64>,
    graph: &SemanticGraph,
    layer: &GcnLayerParams,
) -> Result<Array2<f64>> {
    check_layer_shapes(h, graph, layer)?;
    let mut tape = Tape::new();
    let h0 = tape.constant(h.clone());
    let lams = lam_constants(&mut tape, graph);
    let vars = GcnVars::insert(
        &mut tape,
        &GcnParams {
            layers: vec![layer.clone()],
        },
        false,
    );
    let out = rgcn_layer_t(&mut tape, h0, lams, vars.layers[0]);
    Ok(tape.value(out).clone())
}

/// Apply every layer to the graph's own features and return the answer rows.
pub fn interaction_features(graph: &SemanticGraph, params: &GcnParams) -> Result<Array2<f64>> {
    if params.layers.is_empty() {
        return Err(Error::Argument("GCN needs at least one layer".into()));
    }
    let mut h = graph.features.clone();
    for layer in &params.layers {
        h = rgcn_layer(&h, graph, layer)?;
    }
    Ok(h.slice(ndarray::s![1..1 + graph.n_answers, ..]).to_owned())
}
