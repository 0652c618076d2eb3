//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape of nodes appended in evaluation order. Each op
//! creates one node holding its forward value; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that (transitively)
//! depends on a parameter leaf. Constants never receive gradients, which is
//! what gives pseudo-targets their gradient isolation: re-entering a value
//! through [`Graph::constant`] severs it from its producers.
//!
//! Everything is single-threaded and evaluation order is fixed by construction,
//! so repeated runs produce bitwise-identical values and gradients.

use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

/// Handle to a node in a [`Graph`].
pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Backward is identity, so the added constant is not stored.
    AddScalar(NodeId),
    /// `(n, d) + (d)` broadcast over rows.
    AddRow(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Relu(NodeId),
    /// Row-wise softmax of a 2-D input.
    SoftmaxRows(NodeId),
    ClampMin(NodeId, f64),
    Ln(NodeId),
    /// Sum of all entries; produces a scalar (0-dim) node.
    SumAll(NodeId),
    /// Column sums of a 2-D input: `(n, d) -> (d)`.
    SumAxis0(NodeId),
    Slice1D {
        src: NodeId,
        start: usize,
        len: usize,
    },
    /// Row gather from a 2-D table; duplicate indices accumulate on backward.
    GatherRows {
        src: NodeId,
        idx: Vec<usize>,
    },
    /// Row-wise layer norm with learned scale/shift.
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Nearest-neighbour 2x upsampling of an `(h*w, d)` feature grid.
    Upsample2x {
        src: NodeId,
        h: usize,
        w: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn view2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("node value is not 2-D")
}

fn view2_mut(v: &mut ArrayD<f64>) -> ArrayViewMut2<'_, f64> {
    v.view_mut()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("node value is not 2-D")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a scalar (0-dim or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert!(v.len() == 1, "scalar() on node with {} elements", v.len());
        v.iter().next().copied().unwrap_or(0.0)
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Leaf that never receives a gradient. Feeding an existing node's value
    /// back in through this is a stop-gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf tracked for gradients (a trainable parameter binding).
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Detached copy of `id`'s value: same numbers, no gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value / &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `(n, d) + (d)`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = view2(&self.nodes[a].value);
        let bv = &self.nodes[b].value;
        assert_eq!(av.ncols(), bv.len());
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&av + &b1).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let av = view2(&self.nodes[a].value);
        let bv = view2(&self.nodes[b].value);
        let v = match (ta, tb) {
            (false, false) => av.dot(&bv),
            (false, true) => av.dot(&bv.t()),
            (true, false) => av.t().dot(&bv),
            (true, true) => av.t().dot(&bv.t()),
        }
        .into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = view2(&self.nodes[a].value);
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let rg = self.rg(a);
        self.push(v.into_dyn(), Op::SoftmaxRows(a), rg)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(lo));
        let rg = self.rg(a);
        self.push(v, Op::ClampMin(a, lo), rg)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), rg)
    }

    pub fn sum_axis0(&mut self, a: NodeId) -> NodeId {
        let av = view2(&self.nodes[a].value);
        let v = av.sum_axis(Axis(0)).into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::SumAxis0(a), rg)
    }

    pub fn slice1d(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let sv = &self.nodes[src].value;
        assert_eq!(sv.ndim(), 1);
        assert!(start + len <= sv.len());
        let v = sv
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .slice(ndarray::s![start..start + len])
            .to_owned()
            .into_dyn();
        let rg = self.rg(src);
        self.push(v, Op::Slice1D { src, start, len }, rg)
    }

    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let sv = view2(&self.nodes[src].value);
        let mut v = ndarray::Array2::<f64>::zeros((idx.len(), sv.ncols()));
        for (out, &i) in idx.iter().enumerate() {
            v.row_mut(out).assign(&sv.row(i));
        }
        let rg = self.rg(src);
        self.push(
            v.into_dyn(),
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = view2(&self.nodes[x].value);
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        assert_eq!(g.len(), xv.ncols());
        assert_eq!(b.len(), xv.ncols());
        let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let d = xv.ncols() as f64;
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let v = (&v * &g1 + &b1).into_dyn();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            v,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        )
    }

    pub fn upsample2x(&mut self, src: NodeId, h: usize, w: usize) -> NodeId {
        let sv = view2(&self.nodes[src].value);
        assert_eq!(sv.nrows(), h * w);
        let d = sv.ncols();
        let mut v = ndarray::Array2::<f64>::zeros((4 * h * w, d));
        for r in 0..h {
            for c in 0..w {
                let row = sv.row(r * w + c);
                for dr in 0..2 {
                    for dc in 0..2 {
                        v.row_mut((2 * r + dr) * (2 * w) + (2 * c + dc))
                            .assign(&row);
                    }
                }
            }
        }
        let rg = self.rg(src);
        self.push(v.into_dyn(), Op::Upsample2x { src, h, w }, rg)
    }

    /// Elementwise mean of same-shaped nodes.
    pub fn mean_of(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        self.scale(acc, 1.0 / ids.len() as f64)
    }

    /// Gradients of `loss` (a scalar node) w.r.t. every grad-tracked node.
    /// Entry `i` is `None` for nodes the loss does not depend on.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<ArrayD<f64>>> {
        assert!(self.nodes[loss].value.len() == 1, "backward on non-scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(self.nodes[loss].value.raw_dim(), 1.0));

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    Self::accumulate(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    Self::accumulate(grads, *a, g * &self.nodes[*b].value);
                }
                if self.rg(*b) {
                    Self::accumulate(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                if self.rg(*a) {
                    Self::accumulate(grads, *a, g / bv);
                }
                if self.rg(*b) {
                    let av = &self.nodes[*a].value;
                    let d = g * av / (bv * bv);
                    Self::accumulate(grads, *b, d.mapv(|x| -x));
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    Self::accumulate(grads, *a, g.mapv(|x| x * c));
                }
            }
            Op::AddScalar(a) => {
                if self.rg(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let gv = view2(g);
                    Self::accumulate(grads, *b, gv.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let gv = view2(g);
                let av = view2(&self.nodes[*a].value);
                let bv = view2(&self.nodes[*b].value);
                if self.rg(*a) {
                    // value = opA(a) . opB(b); grad wrt a per transpose case
                    let da = match (ta, tb) {
                        (false, false) => gv.dot(&bv.t()),
                        (false, true) => gv.dot(&bv),
                        (true, false) => bv.dot(&gv.t()),
                        (true, true) => bv.t().dot(&gv.t()),
                    };
                    Self::accumulate(grads, *a, da.into_dyn());
                }
                if self.rg(*b) {
                    let db = match (ta, tb) {
                        (false, false) => av.t().dot(&gv),
                        (false, true) => gv.t().dot(&av),
                        (true, false) => av.dot(&gv),
                        (true, true) => gv.t().dot(&av.t()),
                    };
                    Self::accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = g.clone();
                    d.zip_mut_with(av, |gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let y = view2(&self.nodes[id].value);
                    let gv = view2(g);
                    let mut d = gv.to_owned();
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(&gi, &yi)| gi * yi).sum();
                        for (di, &yi) in drow.iter_mut().zip(yrow.iter()) {
                            *di = yi * (*di - dot);
                        }
                    }
                    Self::accumulate(grads, *a, d.into_dyn());
                }
            }
            Op::ClampMin(a, lo) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = g.clone();
                    d.zip_mut_with(av, |gi, &x| {
                        if x < *lo {
                            *gi = 0.0;
                        }
                    });
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Ln(a) => {
                if self.rg(*a) {
                    let av = &self.nodes[*a].value;
                    Self::accumulate(grads, *a, g / av);
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let gs = g.iter().next().copied().unwrap_or(0.0);
                    let d = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gs);
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::SumAxis0(a) => {
                if self.rg(*a) {
                    let av = view2(&self.nodes[*a].value);
                    let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let mut d = ndarray::Array2::<f64>::zeros(av.raw_dim());
                    for mut row in d.rows_mut() {
                        row.assign(&g1);
                    }
                    Self::accumulate(grads, *a, d.into_dyn());
                }
            }
            Op::Slice1D { src, start, len } => {
                if self.rg(*src) {
                    let mut d = ArrayD::zeros(self.nodes[*src].value.raw_dim());
                    {
                        let mut d1 = d.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                        let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                        d1.slice_mut(ndarray::s![*start..*start + *len]).assign(&g1);
                    }
                    Self::accumulate(grads, *src, d);
                }
            }
            Op::GatherRows { src, idx } => {
                if self.rg(*src) {
                    let mut d = ArrayD::zeros(self.nodes[*src].value.raw_dim());
                    {
                        let mut d2 = view2_mut(&mut d);
                        let gv = view2(g);
                        for (out, &i) in idx.iter().enumerate() {
                            let mut r = d2.row_mut(i);
                            r += &gv.row(out);
                        }
                    }
                    Self::accumulate(grads, *src, d);
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = view2(&self.nodes[*x].value);
                let gv = view2(g);
                let gm = self.nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let d = xv.ncols() as f64;
                let mut dx = ndarray::Array2::<f64>::zeros(xv.raw_dim());
                let mut dgamma = ndarray::Array1::<f64>::zeros(xv.ncols());
                let mut dbeta = ndarray::Array1::<f64>::zeros(xv.ncols());
                for (r, xrow) in xv.rows().into_iter().enumerate() {
                    let mean = xrow.sum() / d;
                    let var = xrow.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&x| (x - mean) * inv).collect();
                    let grow = gv.row(r);
                    // d xhat = g * gamma; dx from the standard layer-norm backward
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(gm.iter())
                        .map(|(&gi, &gam)| gi * gam)
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / d;
                    for c in 0..xv.ncols() {
                        dx[[r, c]] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        dgamma[c] += grow[c] * xhat[c];
                        dbeta[c] += grow[c];
                    }
                }
                if self.rg(*x) {
                    Self::accumulate(grads, *x, dx.into_dyn());
                }
                if self.rg(*gamma) {
                    Self::accumulate(grads, *gamma, dgamma.into_dyn());
                }
                if self.rg(*beta) {
                    Self::accumulate(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::Upsample2x { src, h, w } => {
                if self.rg(*src) {
                    let gv = view2(g);
                    let d = gv.ncols();
                    let mut acc = ndarray::Array2::<f64>::zeros((h * w, d));
                    for r in 0..*h {
                        for c in 0..*w {
                            let mut row = acc.row_mut(r * w + c);
                            for dr in 0..2 {
                                for dc in 0..2 {
                                    row += &gv.row((2 * r + dr) * (2 * w) + (2 * c + dc));
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *src, acc.into_dyn());
                }
            }
        }
    }
}
