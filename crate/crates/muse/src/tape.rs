//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! The model's forward pass records every operation on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar output accumulates gradients for every
//! leaf created with [`Tape::param`]. All values are `Array2<f64>`: a vector
//! is a `1 x n` matrix and a scalar is `1 x 1`, which keeps the op set small
//! at the cost of an occasional explicit transpose.
//!
//! Shape mismatches are programmer errors and panic; they never depend on
//! user input.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddScalarVar(usize, usize),
    AddRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Ln(usize),
    Square(usize),
    Sqrt(usize),
    Pow(usize, f64),
    ClampMin(usize, f64),
    SoftmaxRows(usize),
    MaxPoolRows {
        parent: usize,
        argmax: Vec<usize>,
    },
    SumAll(usize),
    RowSums(usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceCols {
        parent: usize,
        start: usize,
        end: usize,
    },
    SliceRows {
        parent: usize,
        start: usize,
        end: usize,
    },
    GatherRows {
        parent: usize,
        rows: Vec<usize>,
    },
    MulConst(usize, Array2<f64>),
    DivByScalar {
        num: usize,
        den: usize,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients are accumulated for it during `backward`.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, adjacency matrices, masks).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Extract a `1 x 1` node as a plain float.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    /// Gradient accumulated by the latest `backward` call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    // --- elementwise and arithmetic ops -----------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "add: shape mismatch"
        );
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "mul: shape mismatch"
        );
        let value = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a.0, b.0), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).ncols(),
            self.value(b).nrows(),
            "matmul: inner dimensions differ"
        );
        let value = self.value(a).dot(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a.0, b.0), needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let needs = self.needs(a);
        self.push(value, Op::Scale(a.0, k), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a.0), needs)
    }

    /// Broadcast-add a `1 x 1` variable to every entry of `a`.
    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            self.value(s).dim(),
            (1, 1),
            "add_scalar_var: rhs must be 1x1"
        );
        let value = self.value(a) + self.value(s)[[0, 0]];
        let needs = self.needs(a) || self.needs(s);
        self.push(value, Op::AddScalarVar(a.0, s.0), needs)
    }

    /// Broadcast-add a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(
            self.value(row).nrows(),
            1,
            "add_row: rhs must be a row vector"
        );
        assert_eq!(
            self.value(a).ncols(),
            self.value(row).ncols(),
            "add_row: width mismatch"
        );
        let value = self.value(a) + self.value(row);
        let needs = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a.0, row.0), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let needs = self.needs(a);
        self.push(value, Op::Tanh(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a.0), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a.0), needs)
    }

    /// Natural log; the caller must keep inputs strictly positive
    /// (pair with [`Tape::clamp_min`] when needed).
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let needs = self.needs(a);
        self.push(value, Op::Ln(a.0), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let needs = self.needs(a);
        self.push(value, Op::Square(a.0), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let needs = self.needs(a);
        self.push(value, Op::Sqrt(a.0), needs)
    }

    /// Elementwise `x^p`; only valid on positive inputs for non-integer `p`.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).mapv(|x| x.powf(p));
        let needs = self.needs(a);
        self.push(value, Op::Pow(a.0, p), needs)
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(min));
        let needs = self.needs(a);
        self.push(value, Op::ClampMin(a.0, min), needs)
    }

    // --- reductions and structure ops --------------------------------------

    /// Row-wise softmax with the usual max-shift for numerical stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRows(a.0), needs)
    }

    /// Column-wise max over rows: `m x n -> 1 x n`. Ties go to the lowest
    /// row index so results do not depend on traversal order.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.nrows() > 0, "max_pool_rows: empty input");
        let mut value = Array2::zeros((1, x.ncols()));
        let mut argmax = vec![0usize; x.ncols()];
        for j in 0..x.ncols() {
            let mut best = 0usize;
            for i in 1..x.nrows() {
                if x[[i, j]] > x[[best, j]] {
                    best = i;
                }
            }
            argmax[j] = best;
            value[[0, j]] = x[[best, j]];
        }
        let needs = self.needs(a);
        self.push(
            value,
            Op::MaxPoolRows {
                parent: a.0,
                argmax,
            },
            needs,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, Op::SumAll(a.0), needs)
    }

    /// Sum each row: `m x n -> m x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(a);
        self.push(value, Op::RowSums(a.0), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a.0), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).nrows(),
            self.value(b).nrows(),
            "concat_cols: row count mismatch"
        );
        let value = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("checked shapes");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols(a.0, b.0), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let needs = parts.iter().any(|v| self.needs(*v));
        let ids = parts.iter().map(|v| v.0).collect();
        self.push(value, Op::ConcatRows(ids), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(
            start < end && end <= self.value(a).ncols(),
            "slice_cols: bad range"
        );
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let needs = self.needs(a);
        self.push(
            value,
            Op::SliceCols {
                parent: a.0,
                start,
                end,
            },
            needs,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(
            start < end && end <= self.value(a).nrows(),
            "slice_rows: bad range"
        );
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let needs = self.needs(a);
        self.push(
            value,
            Op::SliceRows {
                parent: a.0,
                start,
                end,
            },
            needs,
        )
    }

    /// Pick rows by index, duplicates allowed; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "gather_rows: empty index list");
        let max = *rows.iter().max().expect("non-empty");
        assert!(
            max < self.value(a).nrows(),
            "gather_rows: index out of range"
        );
        let value = self.value(a).select(Axis(0), rows);
        let needs = self.needs(a);
        self.push(
            value,
            Op::GatherRows {
                parent: a.0,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    /// Elementwise multiply by a fixed matrix (masks, label weights).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), c.dim(), "mul_const: shape mismatch");
        let value = self.value(a) * &c;
        let needs = self.needs(a);
        self.push(value, Op::MulConst(a.0, c), needs)
    }

    /// Divide every entry of `num` by the `1 x 1` variable `den`.
    pub fn div_by_scalar(&mut self, num: Var, den: Var) -> Var {
        assert_eq!(
            self.value(den).dim(),
            (1, 1),
            "div_by_scalar: denominator must be 1x1"
        );
        let d = self.value(den)[[0, 0]];
        let value = self.value(num) / d;
        let needs = self.needs(num) || self.needs(den);
        self.push(
            value,
            Op::DivByScalar {
                num: num.0,
                den: den.0,
            },
            needs,
        )
    }

    // --- backward pass ------------------------------------------------------

    /// Accumulate `d root / d leaf` into every reachable trainable leaf.
    /// `root` must be `1 x 1`. Clears any gradients from a previous call.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward: root must be scalar"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b].value;
                    let db = &g * &self.nodes[a].value;
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&g);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Scale(a, k) => {
                    let da = &g * k;
                    self.add_grad(a, &da);
                }
                Op::AddScalar(a) => {
                    self.add_grad(a, &g);
                }
                Op::AddScalarVar(a, sc) => {
                    self.add_grad(a, &g);
                    let ds = Array2::from_elem((1, 1), g.sum());
                    self.add_grad(sc, &ds);
                }
                Op::AddRow(a, row) => {
                    self.add_grad(a, &g);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(row, &dr);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = &g * &y.mapv(|v| 1.0 - v * v);
                    self.add_grad(a, &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = &g * &y.mapv(|v| v * (1.0 - v));
                    self.add_grad(a, &da);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a].value;
                    let da = &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.add_grad(a, &da);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a].value;
                    let da = &g / x;
                    self.add_grad(a, &da);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a].value;
                    let da = &g * &(x * 2.0);
                    self.add_grad(a, &da);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[i].value;
                    let da = &g / &(y * 2.0);
                    self.add_grad(a, &da);
                }
                Op::Pow(a, p) => {
                    let x = &self.nodes[a].value;
                    let da = &g * &x.mapv(|v| p * v.powf(p - 1.0));
                    self.add_grad(a, &da);
                }
                Op::ClampMin(a, min) => {
                    let x = &self.nodes[a].value;
                    let da = &g * &x.mapv(|v| if v >= min { 1.0 } else { 0.0 });
                    self.add_grad(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - rowwise_dot(g, y))
                    let y = &self.nodes[i].value;
                    let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let da = y * &(&g - &dots);
                    self.add_grad(a, &da);
                }
                Op::MaxPoolRows { parent, argmax } => {
                    let mut da = Array2::zeros(self.nodes[parent].value.dim());
                    for (j, &i_max) in argmax.iter().enumerate() {
                        da[[i_max, j]] = g[[0, j]];
                    }
                    self.add_grad(parent, &da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.nodes[a].value.dim(), g[[0, 0]]);
                    self.add_grad(a, &da);
                }
                Op::RowSums(a) => {
                    let dim = self.nodes[a].value.dim();
                    let mut da = Array2::zeros(dim);
                    for i_row in 0..dim.0 {
                        for j in 0..dim.1 {
                            da[[i_row, j]] = g[[i_row, 0]];
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    self.add_grad(a, &da);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a].value.ncols();
                    let da = g.slice(s![.., ..na]).to_owned();
                    let db = g.slice(s![.., na..]).to_owned();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p].value.nrows();
                        let dp = g.slice(s![offset..offset + rows, ..]).to_owned();
                        self.add_grad(p, &dp);
                        offset += rows;
                    }
                }
                Op::SliceCols { parent, start, end } => {
                    let mut da = Array2::zeros(self.nodes[parent].value.dim());
                    da.slice_mut(s![.., start..end]).assign(&g);
                    self.add_grad(parent, &da);
                }
                Op::SliceRows { parent, start, end } => {
                    let mut da = Array2::zeros(self.nodes[parent].value.dim());
                    da.slice_mut(s![start..end, ..]).assign(&g);
                    self.add_grad(parent, &da);
                }
                Op::GatherRows { parent, rows } => {
                    let mut da = Array2::zeros(self.nodes[parent].value.dim());
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        let mut dst = da.row_mut(src_row);
                        dst += &g.row(out_row);
                    }
                    self.add_grad(parent, &da);
                }
                Op::MulConst(a, c) => {
                    let da = &g * &c;
                    self.add_grad(a, &da);
                }
                Op::DivByScalar { num, den } => {
                    let d = self.nodes[den].value[[0, 0]];
                    let dn = &g / d;
                    self.add_grad(num, &dn);
                    let y = &self.nodes[i].value;
                    let dd = Array2::from_elem((1, 1), -(&g * y).sum() / d);
                    self.add_grad(den, &dd);
                }
            }
        }
    }

    fn add_grad(&mut self, i: usize, delta: &Array2<f64>) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut self.nodes[i].grad {
            Some(g) => *g += delta,
            slot @ None => *slot = Some(delta.clone()),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
