use std::collections::HashMap;

use crate::autodiff::params::{GradChannel, ParamId, ParamStore};
use crate::error::{shape_err, GrainError, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    Sum(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    BatchedMatMulNT {
        a: Var,
        b: Var,
        groups: usize,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        groups: usize,
    },
    SoftCrossEntropy {
        student: Var,
        teacher_probs: Tensor<S>,
        student_probs: Tensor<S>,
        tau: S,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
    Mse(Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A single-use reverse-mode computation graph.
///
/// Operations evaluate eagerly and record what is needed for the
/// vector-Jacobian products. Several scalar losses built on one graph may
/// each be differentiated; every call to [`Graph::backward`] is independent.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_leaves: HashMap<(u64, ParamId), Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn layer_norm_eps<S: Scalar>() -> S {
    S::of(1e-12)
}

fn gelu_cdf<S: Scalar>(x: S) -> S {
    S::of(0.5) * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<S: Scalar>(x: S) -> S {
    (-(x * x) * S::of(0.5)).exp() * S::of(0.398_942_280_401_432_7)
}

fn softmax_row<S: Scalar>(src: &[S], dst: &mut [S], scale: S) {
    let max = src.iter().fold(S::neg_infinity(), |m, &x| m.max(x * scale));
    let mut total = S::zero();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x * scale - max).exp();
        total = total + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

fn check_groups(op: &'static str, rows: usize, groups: usize, shape: &[usize]) -> Result<usize> {
    if groups == 0 || !rows.is_multiple_of(groups) {
        return Err(GrainError::Contract(format!(
            "{op}: {rows} rows of {shape:?} do not split into {groups} groups"
        )));
    }
    Ok(rows / groups)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf not tied to any parameter store.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf reading a parameter's current value. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.param_leaves.get(&key) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            p.value.clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            p.trainable,
        );
        self.param_leaves.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            out.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return shape_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            out.data_mut(),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    /// Per-group `a_g · b_gᵀ` where both inputs stack `groups` blocks of rows.
    pub fn batched_matmul_nt(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ra, k) = self.value(a).dims2();
        let (rb, k2) = self.value(b).dims2();
        if k != k2 || ra != rb {
            return shape_err("batched_matmul_nt", self.shape(a), self.shape(b));
        }
        let n = check_groups("batched_matmul_nt", ra, groups, self.shape(a))?;
        let mut out = Tensor::zeros(&[ra, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for g in 0..groups {
                gemm(
                    n,
                    k,
                    n,
                    &av[g * n * k..],
                    false,
                    &bv[g * n * k..],
                    true,
                    &mut od[g * n * n..],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::BatchedMatMulNT { a, b, groups }, rg))
    }

    /// Per-group `a_g · b_g` with `a: (G·n)×n`, `b: (G·n)×m`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ra, n) = self.value(a).dims2();
        let (rb, m) = self.value(b).dims2();
        if ra != rb || ra != groups * n {
            return shape_err("batched_matmul", self.shape(a), self.shape(b));
        }
        check_groups("batched_matmul", ra, groups, self.shape(a))?;
        let mut out = Tensor::zeros(&[ra, m]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for g in 0..groups {
                gemm(
                    n,
                    n,
                    m,
                    &av[g * n * n..],
                    false,
                    &bv[g * n * m..],
                    false,
                    &mut od[g * n * m..],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::BatchedMatMul { a, b, groups }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2();
        if self.value(bias).len() != n {
            return shape_err("add_row", self.shape(a), self.shape(bias));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(bias).data().to_vec();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(&bv) {
                *x = *x + b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = Tensor::zeros(av.shape());
        for i in 0..m {
            softmax_row(&av.data()[i * n..(i + 1) * n], out.row_mut(i), S::one());
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * gelu_cdf(x));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.value(x).dims2();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err("layer_norm", self.shape(x), self.shape(gain));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); m * d];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * d];
        let inv_d = S::of(1.0 / d as f64);
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let r = S::one() / (var + layer_norm_eps()).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stacks the listed rows of `src` (embedding lookup, position selection).
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let r = sv.rows();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(GrainError::Input(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let out = sv.select_rows(rows);
        let rg = self.rg(src);
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Batch mean of `-Σ_k p_teacher · log p_student`, both at temperature
    /// `tau`. The teacher side is treated as a fixed target.
    pub fn soft_cross_entropy(&mut self, student: Var, teacher: Var, tau: S) -> Result<Var> {
        if tau.is_nan() || tau <= S::zero() {
            return Err(GrainError::Param(format!(
                "temperature must be > 0, got {tau}"
            )));
        }
        self.same_shape("soft_cross_entropy", student, teacher)?;
        let (b, k) = self.value(student).dims2();
        let inv_tau = S::one() / tau;
        let mut ps = Tensor::zeros(&[b, k]);
        let mut pt = Tensor::zeros(&[b, k]);
        let mut loss = S::zero();
        for i in 0..b {
            let srow = self.value(student).row(i);
            let trow = self.value(teacher).row(i);
            softmax_row(trow, pt.row_mut(i), inv_tau);
            let max = srow
                .iter()
                .fold(S::neg_infinity(), |m, &x| m.max(x * inv_tau));
            let lse = srow
                .iter()
                .map(|&x| (x * inv_tau - max).exp())
                .sum::<S>()
                .ln()
                + max;
            for (j, &x) in srow.iter().enumerate() {
                let log_p = x * inv_tau - lse;
                ps.set(i, j, log_p.exp());
                loss = loss - pt.at(i, j) * log_p;
            }
        }
        loss = loss / S::of(b as f64);
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                student,
                teacher_probs: pt,
                student_probs: ps,
                tau,
            },
            rg,
        ))
    }

    /// Batch mean hard-label cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2();
        if labels.len() != b {
            return shape_err("cross_entropy", self.shape(logits), &[labels.len()]);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(GrainError::Input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Tensor::zeros(&[b, k]);
        let mut loss = S::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = self.value(logits).row(i);
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            for (j, &x) in row.iter().enumerate() {
                probs.set(i, j, (x - lse).exp());
            }
            loss = loss - (row[label] - lse);
        }
        loss = loss / S::of(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len().max(1);
        let total: S = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total / S::of(n as f64)), Op::Mse(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GrainError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(Tensor::filled(lv.shape(), S::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Param { store, id } => {
                    params.push((*store, *id, i));
                    adj[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            self.propagate(&node.op, &node.value, &g, &mut adj);
        }
        Ok(Gradients { adj, params })
    }

    /// Backward from `loss` straight into one channel of the given stores.
    pub fn backward_into(
        &self,
        loss: Var,
        channel: GradChannel,
        stores: &mut [&mut ParamStore<S>],
    ) -> Result<()> {
        let grads = self.backward(loss)?;
        for store in stores.iter_mut() {
            grads.accumulate(store, channel);
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, op: &Op<S>, out: &Tensor<S>, g: &Tensor<S>, adj: &mut [Option<Tensor<S>>]) {
        match op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let mut da = Tensor::zeros(self.shape(*a));
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        da.data_mut(),
                        false,
                    );
                    self.acc(adj, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        db.data_mut(),
                        false,
                    );
                    self.acc(adj, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).rows();
                if self.rg(*a) {
                    let mut da = Tensor::zeros(self.shape(*a));
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        false,
                        da.data_mut(),
                        false,
                    );
                    self.acc(adj, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        true,
                        self.value(*a).data(),
                        false,
                        db.data_mut(),
                        false,
                    );
                    self.acc(adj, *b, db);
                }
            }
            Op::BatchedMatMulNT { a, b, groups } => {
                let (rows, k) = self.value(*a).dims2();
                let n = rows / groups;
                let (av, bv, gv) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.rg(*a) {
                    let mut da = Tensor::zeros(self.shape(*a));
                    for gi in 0..*groups {
                        gemm(
                            n,
                            n,
                            k,
                            &gv[gi * n * n..],
                            false,
                            &bv[gi * n * k..],
                            false,
                            &mut da.data_mut()[gi * n * k..],
                            false,
                        );
                    }
                    self.acc(adj, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    for gi in 0..*groups {
                        gemm(
                            n,
                            n,
                            k,
                            &gv[gi * n * n..],
                            true,
                            &av[gi * n * k..],
                            false,
                            &mut db.data_mut()[gi * n * k..],
                            false,
                        );
                    }
                    self.acc(adj, *b, db);
                }
            }
            Op::BatchedMatMul { a, b, groups } => {
                let (rows, n) = self.value(*a).dims2();
                let m = self.value(*b).cols();
                debug_assert_eq!(rows, groups * n);
                let (av, bv, gv) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.rg(*a) {
                    let mut da = Tensor::zeros(self.shape(*a));
                    for gi in 0..*groups {
                        gemm(
                            n,
                            m,
                            n,
                            &gv[gi * n * m..],
                            false,
                            &bv[gi * n * m..],
                            true,
                            &mut da.data_mut()[gi * n * n..],
                            false,
                        );
                    }
                    self.acc(adj, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(self.shape(*b));
                    for gi in 0..*groups {
                        gemm(
                            n,
                            n,
                            m,
                            &av[gi * n * n..],
                            true,
                            &gv[gi * n * m..],
                            false,
                            &mut db.data_mut()[gi * n * m..],
                            false,
                        );
                    }
                    self.acc(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = self.zip_tensor(g, self.value(*b), |x, y| x * y);
                    self.acc(adj, *a, da);
                }
                if self.rg(*b) {
                    let db = self.zip_tensor(g, self.value(*a), |x, y| x * y);
                    self.acc(adj, *b, db);
                }
            }
            Op::Scale(a, c) => self.acc(adj, *a, g.map(|x| x * *c)),
            Op::AddRow(a, bias) => {
                self.acc(adj, *a, g.clone());
                if self.rg(*bias) {
                    let n = g.cols();
                    let mut db = Tensor::zeros(self.shape(*bias));
                    for chunk in g.data().chunks(n.max(1)) {
                        for (d, &x) in db.data_mut().iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    self.acc(adj, *bias, db);
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc(adj, *a, Tensor::filled(self.shape(*a), s));
            }
            Op::Softmax(a) => {
                let (m, n) = out.dims2();
                let mut da = Tensor::zeros(out.shape());
                for i in 0..m {
                    let (y, gr) = (out.row(i), g.row(i));
                    let dot: S = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    let dst = da.row_mut(i);
                    for j in 0..n {
                        dst[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.acc(adj, *a, da);
            }
            Op::Gelu(a) => {
                let da = self.zip_tensor(g, self.value(*a), |gi, x| {
                    gi * (gelu_cdf(x) + x * gelu_pdf(x))
                });
                self.acc(adj, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = out.dims2();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(out.shape());
                    let inv_d = S::of(1.0 / d as f64);
                    let mut dxhat = vec![S::zero(); d];
                    for i in 0..m {
                        let gr = g.row(i);
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_dxhat = mean_dxhat + dxhat[j];
                            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xh[j];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        let dst = dx.row_mut(i);
                        for j in 0..d {
                            dst[j] = rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    self.acc(adj, *x, dx);
                }
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dgain = Tensor::zeros(self.shape(*gain));
                    let mut dbias = Tensor::zeros(self.shape(*bias));
                    for i in 0..m {
                        let gr = g.row(i);
                        for j in 0..d {
                            dgain.data_mut()[j] = dgain.data()[j] + gr[j] * xhat[i * d + j];
                            dbias.data_mut()[j] = dbias.data()[j] + gr[j];
                        }
                    }
                    self.acc(adj, *gain, dgain);
                    self.acc(adj, *bias, dbias);
                }
            }
            Op::GatherRows { src, rows } => {
                if self.rg(*src) {
                    let mut ds = Tensor::zeros(self.shape(*src));
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &x) in ds.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d = *d + x;
                        }
                    }
                    self.acc(adj, *src, ds);
                }
            }
            Op::SoftCrossEntropy {
                student,
                teacher_probs,
                student_probs,
                tau,
            } => {
                let b = student_probs.rows();
                let c = g.item() / (*tau * S::of(b as f64));
                let ds = Tensor::from_fn(student_probs.shape(), |i| {
                    (student_probs.data()[i] - teacher_probs.data()[i]) * c
                });
                self.acc(adj, *student, ds);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, k) = probs.dims2();
                let c = g.item() / S::of(b as f64);
                let mut dl = probs.map(|p| p * c);
                for (i, &l) in labels.iter().enumerate() {
                    dl.data_mut()[i * k + l] = dl.data()[i * k + l] - c;
                }
                self.acc(adj, *logits, dl);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len().max(1);
                let c = g.item() * S::of(2.0 / n as f64);
                let da = self.zip_tensor(self.value(*a), self.value(*b), |x, y| (x - y) * c);
                if self.rg(*b) {
                    self.acc(adj, *b, da.map(|x| -x));
                }
                self.acc(adj, *a, da);
            }
        }
    }

    fn zip_tensor(&self, a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }
}

/// Result of one reverse sweep.
pub struct Gradients<S> {
    adj: Vec<Option<Tensor<S>>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of this store's parameters into `channel`.
    /// The other channel is never touched. Returns how many parameters
    /// received a gradient.
    pub fn accumulate(&self, store: &mut ParamStore<S>, channel: GradChannel) -> usize {
        let mut touched = 0;
        for &(uid, id, node) in &self.params {
            if uid != store.uid() {
                continue;
            }
            let Some(g) = self.adj[node].as_ref() else {
                continue;
            };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            p.grad_mut(channel).add_assign(g);
            touched += 1;
        }
        touched
    }
}
