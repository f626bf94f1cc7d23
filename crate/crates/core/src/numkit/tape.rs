use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, log_sigmoid, logsumexp_with, sigmoid};
use super::{NumError, Tensor};

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors. Tapes borrow it read-only, so one
/// store can back many concurrent forward passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradient of one parameter. Embedding-style ops only touch a few rows of
/// large tables, so those are kept sparse until something forces density.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl ParamGrad {
    fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            ParamGrad::Dense(d) => d.clone(),
            ParamGrad::Rows { width, rows } => {
                let mut d = vec![0.0; len];
                for (r, v) in rows {
                    d[r * width..(r + 1) * width].copy_from_slice(v);
                }
                d
            }
        }
    }
}

/// Per-parameter gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    lens: Vec<usize>,
    widths: Vec<usize>,
    grads: Vec<Option<ParamGrad>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        let lens = store.values.iter().map(Tensor::len).collect();
        let widths = store
            .values
            .iter()
            .map(|t| {
                let first = t.shape().first().copied().unwrap_or(1).max(1);
                t.len() / first
            })
            .collect();
        GradBuffer {
            lens,
            widths,
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.grads[id.0].as_ref()
    }

    /// Dense copy of a gradient; zeros if the parameter was never touched.
    pub fn dense(&self, id: ParamId) -> Vec<f64> {
        match &self.grads[id.0] {
            None => vec![0.0; self.lens[id.0]],
            Some(g) => g.to_dense(self.lens[id.0]),
        }
    }

    fn add_dense_owned(&mut self, id: ParamId, g: Vec<f64>) {
        if self.grads[id.0].is_none() {
            debug_assert_eq!(g.len(), self.lens[id.0]);
            self.grads[id.0] = Some(ParamGrad::Dense(g));
        } else {
            self.add_dense(id, &g);
        }
    }

    pub fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        let len = self.lens[id.0];
        debug_assert_eq!(g.len(), len);
        let slot = &mut self.grads[id.0];
        match slot {
            Some(ParamGrad::Dense(d)) => {
                for (a, b) in d.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Some(rows @ ParamGrad::Rows { .. }) => {
                let mut d = rows.to_dense(len);
                for (a, b) in d.iter_mut().zip(g) {
                    *a += b;
                }
                *slot = Some(ParamGrad::Dense(d));
            }
            None => *slot = Some(ParamGrad::Dense(g.to_vec())),
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: &[f64], scale: f64) {
        let width = self.widths[id.0];
        debug_assert_eq!(g.len(), width);
        let slot = &mut self.grads[id.0];
        if slot.is_none() {
            *slot = Some(ParamGrad::Rows {
                width,
                rows: BTreeMap::new(),
            });
        }
        match slot.as_mut().expect("initialized above") {
            ParamGrad::Dense(d) => {
                for (a, b) in d[row * width..(row + 1) * width].iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
            ParamGrad::Rows { rows, .. } => {
                let r = rows.entry(row).or_insert_with(|| vec![0.0; width]);
                for (a, b) in r.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }

    /// Adds `other` into `self`. Row-sparse entries are merged in row order,
    /// so the result only depends on the order of `merge` calls.
    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            let id = ParamId(i);
            match g {
                None => {}
                Some(ParamGrad::Dense(d)) => self.add_dense(id, d),
                Some(ParamGrad::Rows { rows, .. }) => {
                    for (r, v) in rows {
                        self.add_row(id, *r, v, 1.0);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            match g {
                ParamGrad::Dense(d) => d.iter_mut().for_each(|x| *x *= c),
                ParamGrad::Rows { rows, .. } => {
                    rows.values_mut().flatten().for_each(|x| *x *= c)
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.grads.iter().flatten() {
            match g {
                ParamGrad::Dense(d) => s += d.iter().map(|x| x * x).sum::<f64>(),
                ParamGrad::Rows { rows, .. } => {
                    s += rows.values().flatten().map(|x| x * x).sum::<f64>()
                }
            }
        }
        s.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| match g {
            ParamGrad::Dense(d) => d.iter().all(|x| x.is_finite()),
            ParamGrad::Rows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
        })
    }
}

/// Reference to a value on a tape: either a borrowed parameter or a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Param(ParamId),
    Node(usize),
}

#[derive(Debug)]
enum Op {
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    EmbeddingBag {
        table: Var,
        bags: Vec<Vec<(usize, f64)>>,
    },
    GatherScores {
        h: Var,
        w: Var,
        b: Option<Var>,
        cand: Vec<Vec<usize>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    /// Keeps the row softmax for the backward pass.
    LogSumExpRows(Var, Vec<f64>),
    BroadcastCols(Var),
    SumAll(Var),
    MeanAll(Var),
}

impl Op {
    fn name(&self) -> String {
        let full = format!("{self:?}");
        full.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_string()
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each op once.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match v {
            Var::Param(id) => self.params.get(id),
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        match v {
            Var::Param(_) => true,
            Var::Node(i) => self.nodes[i].requires_grad,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, NumError> {
        if !value.all_finite() {
            return Err(NumError::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var::Node(self.nodes.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> Var {
        Var::Param(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.push(value, Op::Constant, &[])
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), NumError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumError::Dimension(format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(NumError::Dimension(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(NumError::Dimension(format!(
                "matmul_nt inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumError> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[a, b])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumError> {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a length-`n` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(NumError::Dimension(format!(
                "bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let t = self.value(x);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        self.map(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumError> {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumError> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `j <= i`; disallowed entries come out exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, NumError> {
        let (m, n) = self.dims2(x);
        if m != n {
            return Err(NumError::Dimension(format!("causal softmax on {m}x{n}")));
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var, NumError> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            if causal {
                let (seen, future) = row.split_at_mut(i + 1);
                future.iter_mut().for_each(|v| *v = 0.0);
                super::tensor::softmax_in_place(seen);
            } else {
                super::tensor::softmax_in_place(row);
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Softmax(x), &[x])
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        if eps <= 0.0 {
            return Err(NumError::Config("layer norm eps must be positive".into()));
        }
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(NumError::Dimension("layer norm affine width".into()));
        }
        let t = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row `i` of the output is `Σ w · table[r]` over the `(r, w)` pairs of
    /// `bags[i]`; an empty bag yields a zero row.
    pub fn embedding_bag(&mut self, table: Var, bags: Vec<Vec<(usize, f64)>>) -> Result<Var, NumError> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; bags.len() * d];
        for (i, bag) in bags.iter().enumerate() {
            let orow = &mut out[i * d..(i + 1) * d];
            for &(r, w) in bag {
                if r >= v {
                    return Err(NumError::Index { index: r, bound: v });
                }
                for (o, x) in orow.iter_mut().zip(t.row(r)) {
                    *o += w * x;
                }
            }
        }
        let n = bags.len();
        self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::EmbeddingBag { table, bags },
            &[table],
        )
    }

    /// Row copies of `table[ids[i]]`; the gradient scatters back into the
    /// referenced rows only.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        self.embedding_bag(table, ids.iter().map(|&i| vec![(i, 1.0)]).collect())
    }

    /// `out[i][j] = h[i] · w[cand[i][j]] + b[cand[i][j]]`.
    pub fn gather_scores(
        &mut self,
        h: Var,
        w: Var,
        b: Option<Var>,
        cand: Vec<Vec<usize>>,
    ) -> Result<Var, NumError> {
        let (m, d) = self.dims2(h);
        let (v, d2) = self.dims2(w);
        if d != d2 || cand.len() != m {
            return Err(NumError::Dimension("gather_scores shapes".into()));
        }
        let c = cand.first().map_or(0, Vec::len);
        if cand.iter().any(|r| r.len() != c) {
            return Err(NumError::Dimension("ragged candidate lists".into()));
        }
        if let Some(b) = b {
            if self.value(b).len() != v {
                return Err(NumError::Dimension("gather_scores bias length".into()));
            }
        }
        let (ht, wt) = (self.value(h), self.value(w));
        let bt = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            for (j, &id) in cand[i].iter().enumerate() {
                if id >= v {
                    return Err(NumError::Index { index: id, bound: v });
                }
                let mut s = dot(ht.row(i), wt.row(id));
                if let Some(bt) = bt {
                    s += bt[id];
                }
                out[i * c + j] = s;
            }
        }
        let mut inputs = vec![h, w];
        inputs.extend(b);
        self.push(
            Tensor::from_parts(vec![m, c], out),
            Op::GatherScores { h, w, b, cand },
            &inputs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (m, n) = self.dims2(x);
        if start + len > n {
            return Err(NumError::Dimension(format!(
                "column slice {start}..{} of {n}",
                start + len
            )));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let m = parts.first().map_or(0, |&p| self.dims2(p).0);
        if parts.iter().any(|&p| self.dims2(p).0 != m) {
            return Err(NumError::Dimension("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let n = parts.first().map_or(0, |&p| self.dims2(p).1);
        if parts.iter().any(|&p| self.dims2(p).1 != n) {
            return Err(NumError::Dimension("concat_rows widths differ".into()));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            m += t.rows();
            out.extend_from_slice(t.data());
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Selects `x[i][idx[i]]` into an `[m, 1]` column.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NumError> {
        let (m, n) = self.dims2(x);
        if idx.len() != m {
            return Err(NumError::Dimension("pick index count".into()));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(m);
        for (r, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(NumError::Index { index: j, bound: n });
            }
            out.push(t.row(r)[j]);
        }
        self.push(Tensor::from_parts(vec![m, 1], out), Op::Pick { x, idx }, &[x])
    }

    /// Row-wise `log Σ exp`, as an `[m, 1]` column.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let (m, n) = self.dims2(x);
        let t = self.value(x);
        let mut probs = vec![0.0; m * n];
        let out = probs
            .chunks_mut(n.max(1))
            .enumerate()
            .map(|(r, p)| logsumexp_with(t.row(r), Some(p)))
            .collect();
        self.push(Tensor::from_parts(vec![m, 1], out), Op::LogSumExpRows(x, probs), &[x])
    }

    /// Repeats an `[m, 1]` column `n` times.
    pub fn broadcast_cols(&mut self, x: Var, n: usize) -> Result<Var, NumError> {
        let (m, c) = self.dims2(x);
        if c != 1 {
            return Err(NumError::Dimension("broadcast_cols needs one column".into()));
        }
        let t = self.value(x);
        let out = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        self.push(Tensor::from_parts(vec![m, n], out), Op::BroadcastCols(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(NumError::Dimension("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumError> {
        let mut acc = Accumulator {
            nodes: vec![None; self.nodes.len()],
            params: GradBuffer::new(self.params),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        match root {
            Var::Param(id) => {
                if self.params.get(id).len() != 1 {
                    return Err(NumError::Dimension("backward root must be scalar".into()));
                }
                acc.params.add_dense(id, &[1.0]);
                return Ok(Gradients { nodes: acc.nodes, params: acc.params });
            }
            Var::Node(i) => {
                if self.nodes[i].value.len() != 1 {
                    return Err(NumError::Dimension("backward root must be scalar".into()));
                }
                acc.nodes[i] = Some(vec![1.0]);
            }
        }
        let Var::Node(root_idx) = root else { unreachable!() };
        for i in (0..=root_idx).rev() {
            let Some(g) = acc.nodes[i].take() else { continue };
            self.backprop_node(i, &g, &mut acc);
            acc.nodes[i] = Some(g);
        }
        Ok(Gradients {
            nodes: acc.nodes,
            params: acc.params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], acc: &mut Accumulator) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = out.cols();
                if acc.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.value(*b).data(), &mut da, m, n, k);
                    acc.dense_owned(*a, da);
                }
                if acc.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), g, &mut db, m, k, n);
                    acc.dense_owned(*b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = out.cols();
                if acc.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, self.value(*b).data(), &mut da, m, n, k);
                    acc.dense_owned(*a, da);
                }
                if acc.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, self.value(*a).data(), &mut db, m, n, k);
                    acc.dense_owned(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc.dense(*a, g);
                acc.dense(*b, g);
            }
            Op::Sub(a, b) => {
                acc.dense(*a, g);
                if acc.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc.dense_owned(*b, neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if acc.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    acc.dense_owned(*a, d);
                }
                if acc.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    acc.dense_owned(*b, d);
                }
            }
            Op::Scale(x, c) => {
                if acc.wants(*x) {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::AddBias(x, b) => {
                acc.dense(*x, g);
                if acc.wants(*b) {
                    let n = out.cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc.dense_owned(*b, db);
                }
            }
            Op::Relu(x) => {
                if acc.wants(*x) {
                    let xv = self.value(*x).data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::Sigmoid(x) => {
                if acc.wants(*x) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::LogSigmoid(x) => {
                if acc.wants(*x) {
                    let xv = self.value(*x).data();
                    let d: Vec<f64> = g.iter().zip(xv).map(|(g, x)| g * sigmoid(-x)).collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::Square(x) => {
                if acc.wants(*x) {
                    let xv = self.value(*x).data();
                    let d: Vec<f64> = g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::Softmax(x) => {
                if acc.wants(*x) {
                    let n = out.cols();
                    let mut d = vec![0.0; out.len()];
                    for (r, (grow, yrow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            d[r * n + j] = yrow[j] * (grow[j] - s);
                        }
                    }
                    acc.dense_owned(*x, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gv = self.value(*gain).data();
                if acc.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    acc.dense_owned(*gain, dg);
                }
                if acc.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    acc.dense_owned(*bias, db);
                }
                if acc.wants(*x) {
                    let mut dx = vec![0.0; out.len()];
                    let mut dxh = vec![0.0; d];
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxh[j] = grow[j] * gv[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxh, xrow) / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dxh[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                    acc.dense_owned(*x, dx);
                }
            }
            Op::EmbeddingBag { table, bags } => {
                if acc.wants(*table) {
                    let d = out.cols();
                    for (i, bag) in bags.iter().enumerate() {
                        let grow = &g[i * d..(i + 1) * d];
                        for &(r, w) in bag {
                            acc.row(*table, r, grow, w, self);
                        }
                    }
                }
            }
            Op::GatherScores { h, w, b, cand } => {
                let c = out.cols();
                let (ht, wt) = (self.value(*h), self.value(*w));
                let d = ht.cols();
                if acc.wants(*h) {
                    let mut dh = vec![0.0; ht.len()];
                    for (i, ids) in cand.iter().enumerate() {
                        let dhrow = &mut dh[i * d..(i + 1) * d];
                        for (j, &id) in ids.iter().enumerate() {
                            let gij = g[i * c + j];
                            for (a, x) in dhrow.iter_mut().zip(wt.row(id)) {
                                *a += gij * x;
                            }
                        }
                    }
                    acc.dense_owned(*h, dh);
                }
                if acc.wants(*w) {
                    for (i, ids) in cand.iter().enumerate() {
                        for (j, &id) in ids.iter().enumerate() {
                            acc.row(*w, id, ht.row(i), g[i * c + j], self);
                        }
                    }
                }
                if let Some(b) = b {
                    if acc.wants(*b) {
                        for (i, ids) in cand.iter().enumerate() {
                            for (j, &id) in ids.iter().enumerate() {
                                acc.row(*b, id, &[1.0], g[i * c + j], self);
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if acc.wants(*x) {
                    let (m, n) = self.dims2(*x);
                    let len = out.cols();
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    acc.dense_owned(*x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    if acc.wants(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        acc.dense(p, &d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc.dense(p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::Dropout { x, mask } => {
                if acc.wants(*x) {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::Pick { x, idx } => {
                if acc.wants(*x) {
                    let (m, n) = self.dims2(*x);
                    let mut d = vec![0.0; m * n];
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * n + j] = g[r];
                    }
                    acc.dense_owned(*x, d);
                }
            }
            Op::LogSumExpRows(x, probs) => {
                if acc.wants(*x) {
                    let n = self.value(*x).cols();
                    let d = probs.iter().enumerate().map(|(i, p)| g[i / n] * p).collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::BroadcastCols(x) => {
                if acc.wants(*x) {
                    let n = out.cols();
                    let d: Vec<f64> = g.chunks(n).map(|r| r.iter().sum()).collect();
                    acc.dense_owned(*x, d);
                }
            }
            Op::SumAll(x) => {
                if acc.wants(*x) {
                    let d = vec![g[0]; self.value(*x).len()];
                    acc.dense_owned(*x, d);
                }
            }
            Op::MeanAll(x) => {
                if acc.wants(*x) {
                    let n = self.value(*x).len();
                    let d = vec![g[0] / n as f64; n];
                    acc.dense_owned(*x, d);
                }
            }
        }
    }
}

struct Accumulator {
    nodes: Vec<Option<Vec<f64>>>,
    params: GradBuffer,
    requires: Vec<bool>,
}

impl Accumulator {
    fn wants(&self, v: Var) -> bool {
        match v {
            Var::Param(_) => true,
            Var::Node(i) => self.requires[i],
        }
    }

    fn dense(&mut self, v: Var, g: &[f64]) {
        match v {
            Var::Param(id) => self.params.add_dense(id, g),
            Var::Node(i) => {
                if !self.requires[i] {
                    return;
                }
                match &mut self.nodes[i] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g.to_vec()),
                }
            }
        }
    }

    fn dense_owned(&mut self, v: Var, g: Vec<f64>) {
        match v {
            Var::Param(id) => self.params.add_dense_owned(id, g),
            Var::Node(i) if self.requires[i] && self.nodes[i].is_none() => self.nodes[i] = Some(g),
            _ => self.dense(v, &g),
        }
    }

    fn row(&mut self, v: Var, row: usize, g: &[f64], scale: f64, tape: &Tape) {
        match v {
            Var::Param(id) => self.params.add_row(id, row, g, scale),
            Var::Node(i) => {
                if !self.requires[i] {
                    return;
                }
                let len = tape.nodes[i].value.len();
                let w = g.len();
                let acc = self.nodes[i].get_or_insert_with(|| vec![0.0; len]);
                for (a, b) in acc[row * w..(row + 1) * w].iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: GradBuffer,
}

impl Gradients {
    /// Gradient with respect to a recorded node or parameter, densified.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Vec<f64> {
        match v {
            Var::Param(id) => self.params.dense(id),
            Var::Node(i) => self.nodes[i]
                .clone()
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()]),
        }
    }
}
