//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations as they are evaluated. Parameters live in a
//! [`ParamStore`] that the graph borrows, so building many graphs over the same
//! parameters (one per example, possibly on different threads) never copies
//! weights. [`Graph::backward`] accepts several seeded outputs at once, which
//! lets a caller inject upstream gradients computed on a different graph.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
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

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-parameter gradients; `None` where a parameter received no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        accumulate(&mut self.grads[id.0], g);
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn add_assign(&mut self, other: &Grads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = theirs {
                accumulate(mine, g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a `1 × n` row to every row.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * a + shift`
    Affine(NodeId, f64),
    /// Adds a constant matrix (e.g. an attention mask).
    AddConst(NodeId),
    Gelu(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    /// Clamps from below; gradient flows only where unclamped.
    ClampMin(NodeId, f64),
    /// Clamps from above; gradient flows only where unclamped.
    ClampMax(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    MaxRows(NodeId, Vec<usize>),
    FirstRow(NodeId),
    Sum(NodeId),
    Pick(NodeId, Vec<(usize, usize)>),
    Cosine {
        a: NodeId,
        b: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// A recording of one forward computation.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_K: f64 = 0.044_715;
pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax in place. Entries of `-inf` get probability zero.
pub(crate) fn softmax_rows_inplace(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn log_softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Layer normalisation over each row; returns `(output, xhat, rstd)`.
pub(crate) fn layer_norm_rows(
    x: ArrayView2<f64>,
    gamma: ArrayView2<f64>,
    beta: ArrayView2<f64>,
) -> (Matrix, Matrix, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    let out = &xhat * &gamma.row(0) + beta.row(0);
    (out, xhat, rstd)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match self.nodes[id.0].op {
            Op::Param(p) => self.store.get(p),
            _ => &self.nodes[id.0].value,
        }
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    /// The node for a parameter; one node per parameter per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(Matrix::zeros((0, 0)), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    /// A leaf whose gradient can be read back after [`Graph::backward`].
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.affine(a, factor, 0.0)
    }

    pub fn add_const(&mut self, a: NodeId, c: &Matrix) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(min));
        self.push(v, Op::ClampMin(a, min))
    }

    pub fn clamp_max(&mut self, a: NodeId, max: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.min(max));
        self.push(v, Op::ClampMax(a, max))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        softmax_rows_inplace(&mut v);
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (out, xhat, rstd) = layer_norm_rows(
            self.value(x).view(),
            self.value(gamma).view(),
            self.value(beta).view(),
        );
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of `table`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        self.push(
            v,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut arg = Vec::with_capacity(m.ncols());
        let mut v = Matrix::zeros((1, m.ncols()));
        for (j, col) in m.columns().into_iter().enumerate() {
            let (i, best) = col
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
                );
            arg.push(i);
            v[[0, j]] = best;
        }
        self.push(v, Op::MaxRows(a, arg))
    }

    pub fn first_row(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).slice(s![0..1, ..]).to_owned();
        self.push(v, Op::FirstRow(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Gathers the listed `(row, col)` entries into a `k × 1` column.
    pub fn pick(&mut self, a: NodeId, idx: &[(usize, usize)]) -> NodeId {
        let m = self.value(a);
        let v = Matrix::from_shape_fn((idx.len(), 1), |(i, _)| m[idx[i]]);
        self.push(v, Op::Pick(a, idx.to_vec()))
    }

    /// Cosine similarity of two `1 × n` rows, as a `1 × 1` node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let dot = (va * vb).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v = Matrix::from_elem((1, 1), dot / (na * nb));
        self.push(v, Op::Cosine { a, b })
    }

    /// Back-propagates from the seeded nodes. Each seed gives `∂L/∂node` for a
    /// node of the graph.
    pub fn backward(&self, seeds: &[(NodeId, Matrix)]) -> Backward {
        let mut g: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (n, s) in seeds {
            assert_eq!(self.value(*n).dim(), s.dim(), "seed shape mismatch");
            accumulate(&mut g[n.0], s);
        }
        let start = seeds.iter().map(|(n, _)| n.0).max().map_or(0, |m| m + 1);
        for i in (0..start).rev() {
            let Some(grad) = g[i].take() else { continue };
            self.backprop_node(i, &grad, &mut g);
            g[i] = Some(grad);
        }
        let mut params = Grads::zeros_like(self.store);
        for (&pid, &nid) in &self.param_nodes {
            if let Some(gp) = g[nid.0].take() {
                params.grads[pid.0] = Some(gp);
            }
        }
        Backward { nodes: g, params }
    }

    fn backprop_node(&self, i: usize, grad: &Matrix, g: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Param(_) | Op::Input => {}
            Op::MatMul(a, b) => {
                let ga = grad.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(grad);
                accumulate_owned(&mut g[a.0], ga);
                accumulate_owned(&mut g[b.0], gb);
            }
            Op::MatMulT(a, b) => {
                let ga = grad.dot(self.value(*b));
                let gb = grad.t().dot(self.value(*a));
                accumulate_owned(&mut g[a.0], ga);
                accumulate_owned(&mut g[b.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut g[a.0], grad);
                accumulate(&mut g[b.0], grad);
            }
            Op::AddRow(a, r) => {
                accumulate(&mut g[a.0], grad);
                accumulate_owned(&mut g[r.0], grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                let ga = grad * self.value(*b);
                let gb = grad * self.value(*a);
                accumulate_owned(&mut g[a.0], ga);
                accumulate_owned(&mut g[b.0], gb);
            }
            Op::Affine(a, scale) => accumulate_owned(&mut g[a.0], grad * *scale),
            Op::AddConst(a) => accumulate(&mut g[a.0], grad),
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(gelu_grad);
                ga *= grad;
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::Ln(a) => accumulate_owned(&mut g[a.0], grad / self.value(*a)),
            Op::Exp(a) => accumulate_owned(&mut g[a.0], grad * out),
            Op::ClampMin(a, min) => {
                let mut ga = grad.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| {
                    if x < *min {
                        *gv = 0.0
                    }
                });
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::ClampMax(a, max) => {
                let mut ga = grad.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| {
                    if x > *max {
                        *gv = 0.0
                    }
                });
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::Softmax(a) => {
                let mut ga = grad * out;
                for (mut row, y) in ga.rows_mut().into_iter().zip(out.rows()) {
                    let dot = row.sum();
                    row.zip_mut_with(&y, |r, &yv| *r -= yv * dot);
                }
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = grad.clone();
                for ((mut row, y), gr) in ga.rows_mut().into_iter().zip(out.rows()).zip(grad.rows())
                {
                    let total = gr.sum();
                    row.zip_mut_with(&y, |r, &ly| *r -= ly.exp() * total);
                }
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma);
                let n = xhat.ncols() as f64;
                let dxhat = grad * &gam.row(0);
                let mut gx = Matrix::zeros(xhat.raw_dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_dh = dh.sum();
                    let sum_dh_xh = (&dh * &xh).sum();
                    let k = rstd[r] / n;
                    for c in 0..xhat.ncols() {
                        gx[[r, c]] = k * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                    }
                }
                accumulate_owned(&mut g[x.0], gx);
                accumulate_owned(
                    &mut g[gamma.0],
                    (grad * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                accumulate_owned(&mut g[beta.0], grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Embed { table, ids } => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.raw_dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(id);
                    row += &grad.row(r);
                }
                accumulate_owned(&mut g[table.0], gt);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                ga.slice_mut(s![.., *start..*start + grad.ncols()])
                    .assign(grad);
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    accumulate_owned(&mut g[p.0], grad.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).nrows();
                let row = grad.row(0).mapv(|v| v / rows as f64);
                let ga = Matrix::from_shape_fn((rows, row.len()), |(_, c)| row[c]);
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::MaxRows(a, arg) => {
                let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                for (c, &r) in arg.iter().enumerate() {
                    ga[[r, c]] = grad[[0, c]];
                }
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::FirstRow(a) => {
                let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                ga.row_mut(0).assign(&grad.row(0));
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::Sum(a) => {
                let ga = Matrix::from_elem(self.value(*a).raw_dim(), grad[[0, 0]]);
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::Pick(a, idx) => {
                let mut ga = Matrix::zeros(self.value(*a).raw_dim());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    ga[[r, c]] += grad[[k, 0]];
                }
                accumulate_owned(&mut g[a.0], ga);
            }
            Op::Cosine { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
                let c = out[[0, 0]];
                let up = grad[[0, 0]];
                let ga = (vb / (na * nb) - va * (c / (na * na))) * up;
                let gb = (va / (na * nb) - vb * (c / (nb * nb))) * up;
                accumulate_owned(&mut g[a.0], ga);
                accumulate_owned(&mut g[b.0], gb);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Backward {
    nodes: Vec<Option<Matrix>>,
    params: Grads,
}

impl Backward {
    /// Gradient of a non-parameter node, if any reached it.
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].as_ref()
    }

    pub fn params(&self) -> &Grads {
        &self.params
    }

    pub fn into_params(self) -> Grads {
        self.params
    }
}
