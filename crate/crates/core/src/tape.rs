//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Operations append nodes to a [`Tape`] in execution order; [`Tape::backward`]
//! replays them in exact reverse order, accumulating adjoints via the chain
//! rule. The recorded order is a topological order by construction, since an
//! operation can only reference already-recorded inputs.
//!
//! The op set is the minimum needed by the graph encoders and losses in this
//! crate: dense products, broadcasts, row softmaxes (plain and masked), the
//! scaled-cosine and cross-entropy losses, and a few aggregation helpers.
//! Every public op validates shapes and rejects non-finite results.

use crate::error::{Error, Result};
use crate::matrix::{dot, norm2, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Element-wise function kinds for [`Tape::elementwise`].
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    /// Leaky ReLU with the given negative-side slope.
    LeakyRelu(f64),
    /// ELU with alpha = 1.
    Elu,
}

impl Unary {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => stable_sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
        }
    }

    /// Local derivative given the input x and the output y = f(x).
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
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

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Elementwise(Var, Unary),
    RowSoftmax(Var),
    MaskedRowSoftmax(Var, Matrix),
    /// out[i][j] = col[i] + row[j]
    PairwiseSum(Var, Var),
    /// Broadcast a 1xM row onto every row of an NxM matrix.
    AddRow(Var, Var),
    MeanRows(Var),
    Sum(Var),
    StackScalars(Vec<Var>),
    /// out = sum_k weights[k] * mats[k]
    WeightedSum(Vec<Var>, Var),
    /// Constant base matrix with the listed rows replaced by a 1xM value.
    ReplaceRows {
        row: Var,
        rows: Vec<usize>,
    },
    ScaledCosine {
        pred: Var,
        target: Matrix,
        rows: Vec<usize>,
        gamma: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

/// Records a single forward computation; one tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant; never accumulates gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, false, Op::Leaf)
    }

    /// Record a trainable leaf; its gradient slot starts at zero.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; `None` for values that do not require gradient.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        let grad = if requires_grad {
            Some(Matrix::zeros(value.rows(), value.cols()))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Matrix, inputs: &[Var], op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", am.shape(), bm.shape()),
            });
        }
        let out = am.matmul(bm);
        self.record(out, &[a, b], Op::Matmul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.record(out, &[a], Op::Transpose(a), "transpose")
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &'static str) -> Result<()> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.shape() != bm.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", am.shape(), bm.shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.value(a).add(self.value(b));
        self.record(out, &[a, b], Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b));
        self.record(out, &[a, b], Op::Sub(a, b), "sub")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "hadamard")?;
        let out = self.value(a).hadamard(self.value(b));
        self.record(out, &[a, b], Op::Hadamard(a, b), "hadamard")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let out = self.value(a).scale(c);
        self.record(out, &[a], Op::Scale(a, c), "scale")
    }

    pub fn elementwise(&mut self, a: Var, kind: Unary) -> Result<Var> {
        if kind == Unary::Log {
            if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "elementwise(log)",
                    detail: format!("log requires positive entries, found {}", bad),
                });
            }
        }
        let out = self.value(a).map(|x| kind.apply(x));
        self.record(out, &[a], Op::Elementwise(a, kind), "elementwise")
    }

    /// Numerically-stabilized softmax over each row.
    pub fn rowwise_softmax(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::Contract {
                op: "rowwise_softmax",
                detail: "empty input".into(),
            });
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            softmax_row_in_place(out.row_mut(r));
        }
        self.record(out, &[a], Op::RowSoftmax(a), "rowwise_softmax")
    }

    /// Softmax per row restricted to positions where `mask` is nonzero;
    /// masked-out positions are exactly zero in the output.
    pub fn masked_rowwise_softmax(&mut self, a: Var, mask: &Matrix) -> Result<Var> {
        let m = self.value(a);
        if m.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_rowwise_softmax",
                detail: format!("input {:?} vs mask {:?}", m.shape(), mask.shape()),
            });
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            masked_softmax_row_in_place(out.row_mut(r), mask.row(r)).map_err(|_| Error::Contract {
                op: "masked_rowwise_softmax",
                detail: format!("row {} has no active entries", r),
            })?;
        }
        self.record(
            out,
            &[a],
            Op::MaskedRowSoftmax(a, mask.clone()),
            "masked_rowwise_softmax",
        )
    }

    /// out[i][j] = col[i] + row[j]; col is Nx1, row is 1xM.
    pub fn pairwise_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let (cm, rm) = (self.value(col), self.value(row));
        if cm.cols() != 1 || rm.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sum",
                detail: format!("need Nx1 and 1xM, got {:?} and {:?}", cm.shape(), rm.shape()),
            });
        }
        let (n, m) = (cm.rows(), rm.cols());
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let c = cm.get(i, 0);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                *o = c + rm.get(0, j);
            }
        }
        self.record(out, &[col, row], Op::PairwiseSum(col, row), "pairwise_sum")
    }

    /// Broadcast-add a 1xM row vector to every row of an NxM matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix {:?} vs row {:?}", am.shape(), rm.shape()),
            });
        }
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.row(0)) {
                *o += b;
            }
        }
        self.record(out, &[a, row], Op::AddRow(a, row), "add_row")
    }

    /// 1xM row of column means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::Contract {
                op: "mean_rows",
                detail: "empty input".into(),
            });
        }
        let n = m.rows() as f64;
        let mut out = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        for o in out.row_mut(0) {
            *o /= n;
        }
        self.record(out, &[a], Op::MeanRows(a), "mean_rows")
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let out = Matrix::from_vec(1, 1, vec![s]).map_err(|_| Error::NonFinite { op: "sum" })?;
        self.record(out, &[a], Op::Sum(a), "sum")
    }

    /// Stack 1x1 values into a single 1xK row.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract {
                op: "stack_scalars",
                detail: "empty input list".into(),
            });
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            data.push(self.value(x).scalar().map_err(|_| Error::ShapeMismatch {
                op: "stack_scalars",
                detail: "all inputs must be 1x1".into(),
            })?);
        }
        let out = Matrix::from_vec(1, xs.len(), data)?;
        self.record(out, xs, Op::StackScalars(xs.to_vec()), "stack_scalars")
    }

    /// Weighted sum of K same-shape matrices with a 1xK weight row.
    /// Gradients flow to both the matrices and the weights.
    pub fn weighted_sum(&mut self, mats: &[Var], weights: Var) -> Result<Var> {
        if mats.is_empty() {
            return Err(Error::Contract {
                op: "weighted_sum",
                detail: "empty matrix list".into(),
            });
        }
        let wm = self.value(weights);
        if wm.rows() != 1 || wm.cols() != mats.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("need 1x{} weights, got {:?}", mats.len(), wm.shape()),
            });
        }
        let shape = self.value(mats[0]).shape();
        for &m in &mats[1..] {
            if self.value(m).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    detail: "matrices must share a shape".into(),
                });
            }
        }
        let mut out = Matrix::zeros(shape.0, shape.1);
        for (k, &m) in mats.iter().enumerate() {
            let w = self.value(weights).get(0, k);
            out.add_assign(&self.value(m).scale(w));
        }
        let mut inputs = mats.to_vec();
        inputs.push(weights);
        self.record(out, &inputs, Op::WeightedSum(mats.to_vec(), weights), "weighted_sum")
    }

    /// Copy of `base` with each listed row replaced by the 1xM `row` value.
    pub fn replace_rows(&mut self, base: &Matrix, rows: &[usize], row: Var) -> Result<Var> {
        let rm = self.value(row);
        if rm.rows() != 1 || rm.cols() != base.cols() {
            return Err(Error::ShapeMismatch {
                op: "replace_rows",
                detail: format!("base {:?} vs row {:?}", base.shape(), rm.shape()),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= base.rows()) {
            return Err(Error::Contract {
                op: "replace_rows",
                detail: format!("row index {} out of range for {} rows", bad, base.rows()),
            });
        }
        let mut out = base.clone();
        for &r in rows {
            out.row_mut(r).copy_from_slice(rm.row(0));
        }
        self.record(
            out,
            &[row],
            Op::ReplaceRows {
                row,
                rows: rows.to_vec(),
            },
            "replace_rows",
        )
    }

    /// Mean over the selected rows of (1 - cos(pred_row, target_row))^gamma.
    ///
    /// The target is a constant: gradient flows to `pred` only. A zero-norm
    /// target row is an error; a zero-norm prediction row contributes
    /// cos = 0 with zero gradient.
    pub fn scaled_cosine_error(
        &mut self,
        pred: Var,
        target: &Matrix,
        rows: &[usize],
        gamma: f64,
    ) -> Result<Var> {
        let pm = self.value(pred);
        if pm.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "scaled_cosine_error",
                detail: format!("pred {:?} vs target {:?}", pm.shape(), target.shape()),
            });
        }
        if rows.is_empty() {
            return Err(Error::Contract {
                op: "scaled_cosine_error",
                detail: "empty row set".into(),
            });
        }
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(Error::Config(format!(
                "scaled_cosine_error requires gamma >= 1, got {}",
                gamma
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= pm.rows()) {
            return Err(Error::Contract {
                op: "scaled_cosine_error",
                detail: format!("row index {} out of range", bad),
            });
        }
        let mut total = 0.0;
        for &r in rows {
            let t = target.row(r);
            let nt = norm2(t);
            if nt == 0.0 {
                return Err(Error::Domain {
                    op: "scaled_cosine_error",
                    detail: format!("target row {} has zero norm", r),
                });
            }
            let p = pm.row(r);
            let np = norm2(p);
            let cos = if np == 0.0 {
                0.0
            } else {
                (dot(p, t) / (np * nt)).clamp(-1.0, 1.0)
            };
            total += (1.0 - cos).powf(gamma);
        }
        let loss = total / rows.len() as f64;
        let out = Matrix::from_vec(1, 1, vec![loss])
            .map_err(|_| Error::NonFinite { op: "scaled_cosine_error" })?;
        self.record(
            out,
            &[pred],
            Op::ScaledCosine {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
                gamma,
            },
            "scaled_cosine_error",
        )
    }

    /// Mean negative log softmax probability of the true class over `rows`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], rows: &[usize]) -> Result<Var> {
        let lm = self.value(logits);
        if labels.len() != lm.rows() {
            return Err(Error::Contract {
                op: "cross_entropy",
                detail: format!("{} labels for {} rows", labels.len(), lm.rows()),
            });
        }
        if rows.is_empty() {
            return Err(Error::Contract {
                op: "cross_entropy",
                detail: "empty row set".into(),
            });
        }
        let classes = lm.cols();
        let mut total = 0.0;
        for &r in rows {
            if r >= lm.rows() {
                return Err(Error::Contract {
                    op: "cross_entropy",
                    detail: format!("row index {} out of range", r),
                });
            }
            let label = labels[r];
            if label >= classes {
                return Err(Error::Contract {
                    op: "cross_entropy",
                    detail: format!("label {} out of range for {} classes", label, classes),
                });
            }
            total -= log_softmax_at(lm.row(r), label);
        }
        let loss = total / rows.len() as f64;
        let out =
            Matrix::from_vec(1, 1, vec![loss]).map_err(|_| Error::NonFinite { op: "cross_entropy" })?;
        self.record(
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                rows: rows.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar loss. Every reachable `requires_grad` value
    /// accumulates its total derivative; calling `backward` again without a
    /// fresh tape adds another full pass into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        adj[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("unit seed"));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            // Fold this pass into the persistent gradient slot.
            if let Some(slot) = self.nodes[i].grad.as_mut() {
                slot.add_assign(&g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].requires_grad {
                    self.accumulate(adj, *a, g.matmul(&bm.transpose()));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(adj, *b, am.transpose().matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                let (am, bm) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].requires_grad {
                    self.accumulate(adj, *a, g.hadamard(bm));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(adj, *b, g.hadamard(am));
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.scale(*c)),
            Op::Elementwise(a, kind) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[i].value;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        d.set(r, c, g.get(r, c) * kind.derivative(x.get(r, c), y.get(r, c)));
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::RowSoftmax(a) => {
                let s = &self.nodes[i].value;
                self.accumulate(adj, *a, softmax_backward(s, g));
            }
            Op::MaskedRowSoftmax(a, _mask) => {
                // Masked entries have s = 0, so the shared formula zeroes them.
                let s = &self.nodes[i].value;
                self.accumulate(adj, *a, softmax_backward(s, g));
            }
            Op::PairwiseSum(col, row) => {
                if self.nodes[col.0].requires_grad {
                    let mut d = Matrix::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        d.set(r, 0, g.row(r).iter().sum());
                    }
                    self.accumulate(adj, *col, d);
                }
                if self.nodes[row.0].requires_grad {
                    let mut d = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(adj, *row, d);
                }
            }
            Op::AddRow(a, row) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(adj, *a, g.clone());
                }
                if self.nodes[row.0].requires_grad {
                    let mut d = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(adj, *row, d);
                }
            }
            Op::MeanRows(a) => {
                let n = self.nodes[a.0].value.rows();
                let mut d = Matrix::zeros(n, g.cols());
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = v * inv;
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let shape = self.nodes[a.0].value.shape();
                let gs = g.get(0, 0);
                self.accumulate(adj, *a, Matrix::filled(shape.0, shape.1, gs));
            }
            Op::StackScalars(xs) => {
                for (k, x) in xs.iter().enumerate() {
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(
                            adj,
                            *x,
                            Matrix::filled(1, 1, g.get(0, k)),
                        );
                    }
                }
            }
            Op::WeightedSum(mats, weights) => {
                let wm = &self.nodes[weights.0].value;
                for (k, m) in mats.iter().enumerate() {
                    if self.nodes[m.0].requires_grad {
                        self.accumulate(adj, *m, g.scale(wm.get(0, k)));
                    }
                }
                if self.nodes[weights.0].requires_grad {
                    let mut d = Matrix::zeros(1, mats.len());
                    for (k, m) in mats.iter().enumerate() {
                        d.set(0, k, g.frobenius_dot(&self.nodes[m.0].value));
                    }
                    self.accumulate(adj, *weights, d);
                }
            }
            Op::ReplaceRows { row, rows } => {
                let mut d = Matrix::zeros(1, g.cols());
                for &r in rows {
                    for (o, v) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(adj, *row, d);
            }
            Op::ScaledCosine {
                pred,
                target,
                rows,
                gamma,
            } => {
                let pm = &self.nodes[pred.0].value;
                let gs = g.get(0, 0);
                let inv = 1.0 / rows.len() as f64;
                let mut d = Matrix::zeros(pm.rows(), pm.cols());
                for &r in rows {
                    let p = pm.row(r);
                    let t = target.row(r);
                    let np = norm2(p);
                    if np == 0.0 {
                        continue;
                    }
                    let nt = norm2(t);
                    let cos = (dot(p, t) / (np * nt)).clamp(-1.0, 1.0);
                    // d/dc (1-c)^gamma = -gamma (1-c)^(gamma-1)
                    let dloss_dcos = -gamma * (1.0 - cos).powf(gamma - 1.0) * inv * gs;
                    let drow = d.row_mut(r);
                    for j in 0..p.len() {
                        let dcos_dp = t[j] / (np * nt) - cos * p[j] / (np * np);
                        drow[j] = dloss_dcos * dcos_dp;
                    }
                }
                self.accumulate(adj, *pred, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                rows,
            } => {
                let lm = &self.nodes[logits.0].value;
                let gs = g.get(0, 0);
                let inv = 1.0 / rows.len() as f64;
                let mut d = Matrix::zeros(lm.rows(), lm.cols());
                for &r in rows {
                    let mut probs: Vec<f64> = lm.row(r).to_vec();
                    softmax_row_in_place(&mut probs);
                    let drow = d.row_mut(r);
                    for (j, p) in probs.iter().enumerate() {
                        let delta = if j == labels[r] { 1.0 } else { 0.0 };
                        drow[j] += (p - delta) * inv * gs;
                    }
                }
                self.accumulate(adj, *logits, d);
            }
        }
    }
}

/// dx = s * (g - sum(g * s)) per row, evaluated on the softmax output s.
fn softmax_backward(s: &Matrix, g: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let srow = s.row(r);
        let grow = g.row(r);
        let inner = dot(srow, grow);
        let drow = d.row_mut(r);
        for j in 0..srow.len() {
            drow[j] = srow[j] * (grow[j] - inner);
        }
    }
    d
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn masked_softmax_row_in_place(row: &mut [f64], mask: &[f64]) -> std::result::Result<(), ()> {
    let mut max = f64::NEG_INFINITY;
    for (v, m) in row.iter().zip(mask) {
        if *m != 0.0 {
            max = max.max(*v);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (v, m) in row.iter_mut().zip(mask) {
        if *m != 0.0 {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    (row[idx] - max) - log_sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_hand_values() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(2, 3, vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0]).unwrap());
        let s = t.rowwise_softmax(x).unwrap();
        let v = t.value(s);
        for j in 0..3 {
            assert!(close(v.get(0, j), 1.0 / 3.0, 1e-12));
        }
        assert!(v.get(1, 0) > 0.999999);
        assert!(v.all_finite());
    }

    #[test]
    fn softmax_frozen_values() {
        // softmax([1,2,3]) computed directly from exp/sum.
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let s = t.rowwise_softmax(x).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (j, e) in expect.iter().enumerate() {
            assert!(close(t.value(s).get(0, j), *e, 1e-8));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 4, vec![-3.0, 0.5, 9.0, 2.0]).unwrap());
        let s = t.rowwise_softmax(x).unwrap();
        let sum: f64 = t.value(s).row(0).iter().sum();
        assert!(close(sum, 1.0, 1e-12));
    }

    #[test]
    fn elementwise_trivial_points() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 3, vec![0.0, 0.0, -1.0]).unwrap());
        let tanh = t.elementwise(x, Unary::Tanh).unwrap();
        assert_eq!(t.value(tanh).get(0, 0), 0.0);
        let sig = t.elementwise(x, Unary::Sigmoid).unwrap();
        assert_eq!(t.value(sig).get(0, 0), 0.5);
        let lr = t.elementwise(x, Unary::LeakyRelu(0.2)).unwrap();
        assert!(close(t.value(lr).get(0, 2), -0.2, 1e-15));
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        assert!(matches!(
            t.elementwise(x, Unary::Log),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn scaled_cosine_trivial_cases() {
        let mut t = Tape::new();
        // Identical rows: contribution 0.
        let target = Matrix::from_vec(1, 2, vec![2.0, 1.0]).unwrap();
        let p = t.constant(target.clone());
        let l = t.scaled_cosine_error(p, &target, &[0], 2.0).unwrap();
        assert!(close(t.value(l).scalar().unwrap(), 0.0, 1e-12));

        // Orthogonal rows: contribution 1 for any gamma.
        let mut t = Tape::new();
        let p = t.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let target = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        for gamma in [1.0, 2.0] {
            let l = t.scaled_cosine_error(p, &target, &[0], gamma).unwrap();
            assert!(close(t.value(l).scalar().unwrap(), 1.0, 1e-12));
        }
    }

    #[test]
    fn scaled_cosine_frozen_value() {
        // pred [1,0] vs target [1,1], gamma 2: (1 - 1/sqrt(2))^2
        let mut t = Tape::new();
        let p = t.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let target = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let l = t.scaled_cosine_error(p, &target, &[0], 2.0).unwrap();
        let expect = (1.0 - 1.0 / 2.0_f64.sqrt()).powi(2); // 0.08578643762690485
        assert!(close(t.value(l).scalar().unwrap(), expect, 1e-12));
    }

    #[test]
    fn scaled_cosine_zero_target_errors_zero_pred_ok() {
        let mut t = Tape::new();
        let p = t.param(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let zero_target = Matrix::zeros(1, 2);
        assert!(matches!(
            t.scaled_cosine_error(p, &zero_target, &[0], 2.0),
            Err(Error::Domain { .. })
        ));

        let mut t = Tape::new();
        let p = t.param(Matrix::zeros(1, 2));
        let target = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let l = t.scaled_cosine_error(p, &target, &[0], 2.0).unwrap();
        assert!(close(t.value(l).scalar().unwrap(), 1.0, 1e-12));
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_and_margin() {
        let mut t = Tape::new();
        let logits = t.constant(Matrix::zeros(2, 4));
        let l = t.cross_entropy(logits, &[0, 3], &[0, 1]).unwrap();
        assert!(close(t.value(l).scalar().unwrap(), 4.0_f64.ln(), 1e-12));

        // Large margin on the true class drives the loss toward zero.
        let mut t = Tape::new();
        let logits = t.constant(Matrix::from_vec(1, 3, vec![50.0, 0.0, 0.0]).unwrap());
        let l = t.cross_entropy(logits, &[0], &[0]).unwrap();
        assert!(t.value(l).scalar().unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let mut t = Tape::new();
        let logits =
            t.constant(Matrix::from_vec(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap());
        let l = t.cross_entropy(logits, &[1, 2], &[0, 1]).unwrap();
        // Independent scalar evaluation of -log softmax at the labels.
        let r0: f64 = {
            let z: f64 = [1.0, 2.0, 0.5].iter().map(|v: &f64| v.exp()).sum();
            -(2.0 - z.ln())
        };
        let r1: f64 = {
            let z: f64 = [-1.0, 0.0, 3.0].iter().map(|v: &f64| v.exp()).sum();
            -(3.0 - z.ln())
        };
        assert!(close(t.value(l).scalar().unwrap(), (r0 + r1) / 2.0, 1e-10));
    }

    #[test]
    fn cross_entropy_empty_rows_errors() {
        let mut t = Tape::new();
        let logits = t.constant(Matrix::zeros(2, 3));
        assert!(t.cross_entropy(logits, &[0, 1], &[]).is_err());
    }

    #[test]
    fn mean_rows_values_and_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(2, 2, vec![1.0, 3.0, 3.0, 5.0]).unwrap());
        let m = t.mean_rows(x).unwrap();
        assert_eq!(t.value(m).data(), &[2.0, 4.0]);
        let s = t.sum(m).unwrap();
        t.backward(s).unwrap();
        for v in t.grad(x).unwrap().data() {
            assert!(close(*v, 0.5, 1e-15));
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 9.0]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_disconnected_grad_stays_zero() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let y = t.param(Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(y).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constant_never_accumulates() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).is_none());
        assert!(t.grad(s).is_none());
    }

    #[test]
    fn weighted_sum_values_and_grads() {
        let mut t = Tape::new();
        let a = t.param(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let b = t.param(Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap());
        let w = t.param(Matrix::from_vec(1, 2, vec![0.25, 0.75]).unwrap());
        let ws = t.weighted_sum(&[a, b], w).unwrap();
        assert_eq!(t.value(ws).data(), &[0.25, 0.75]);
        let s = t.sum(ws).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.25, 0.25]);
        assert_eq!(t.grad(b).unwrap().data(), &[0.75, 0.75]);
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn replace_rows_forward_and_grad() {
        let mut t = Tape::new();
        let base = Matrix::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let fill = t.param(Matrix::from_vec(1, 2, vec![9.0, 8.0]).unwrap());
        let out = t.replace_rows(&base, &[0, 2], fill).unwrap();
        assert_eq!(t.value(out).row(0), &[9.0, 8.0]);
        assert_eq!(t.value(out).row(1), &[2.0, 2.0]);
        assert_eq!(t.value(out).row(2), &[9.0, 8.0]);
        let s = t.sum(out).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(fill).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_inactive() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(1, 3, vec![5.0, 1.0, 2.0]).unwrap());
        let mask = Matrix::from_vec(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let s = t.masked_rowwise_softmax(x, &mask).unwrap();
        let v = t.value(s);
        assert_eq!(v.get(0, 1), 0.0);
        assert!(close(v.get(0, 0) + v.get(0, 2), 1.0, 1e-12));
    }

    #[test]
    fn masked_softmax_empty_row_errors() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(1, 2));
        let mask = Matrix::zeros(1, 2);
        assert!(t.masked_rowwise_softmax(x, &mask).is_err());
    }
}
