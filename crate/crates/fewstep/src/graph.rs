//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! The denoising network and its losses are expressed as a flat compute
//! graph. Nodes hold forward values; `backward` walks the graph once in
//! reverse, accumulating gradients for every leaf tagged as a parameter.
//! Gradients are exact, which is what the finite-difference oracle in the
//! model tests verifies.


#![allow(clippy::needless_range_loop)]
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Index of a parameter leaf within the owning parameter set.
pub type ParamId = usize;

enum Op {
    /// Constant or parameter leaf. `param` links back to the parameter set.
    Leaf { param: Option<ParamId> },
    MatMul(NodeId, NodeId),
    /// C = A * B^T (attention scores).
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// [m,n] + broadcast row [1,n].
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulElem(NodeId, NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    ConcatCols(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Row lookup into a table (embedding).
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Masked mean over rows -> [1, n].
    MeanRows {
        x: NodeId,
        keep: Vec<bool>,
    },
    /// out[l, m] = -||x_l - table_m||^2.
    NegSqDist {
        x: NodeId,
        table: NodeId,
    },
    /// Per-row scaling by a constant factor vector.
    RowScale {
        x: NodeId,
        factors: Vec<f64>,
    },
    /// Mean cross entropy of softmax(logits) rows against targets -> [1,1].
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: f64,
    },
    /// Mean squared difference over all entries -> [1,1].
    MseLoss(NodeId, NodeId),
    /// a + k * b.
    AddScaled(NodeId, NodeId, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Constant leaf: receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Parameter leaf: its gradient is collected under `param`.
    pub fn param(&mut self, value: Tensor, param: ParamId) -> NodeId {
        self.push(value, Op::Leaf { param: Some(param) })
    }

    /// Detach: re-enter a node's value as a constant (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, k: f64) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.add_assign_scaled(&self.nodes[b].value, k);
        self.push(v, Op::AddScaled(a, b, k))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let r = &self.nodes[row].value;
        assert_eq!(r.rows(), 1, "add_row expects a [1,n] bias");
        assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
        let v = Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + r.get(0, j));
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let y = &self.nodes[b].value;
        assert_eq!(x.shape(), y.shape(), "mul_elem shape mismatch");
        let v = Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
        );
        self.push(v, Op::MulElem(a, b))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let v = Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().map(|&p| gelu(p)).collect(),
        );
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        assert_eq!(g.rows(), 1);
        assert_eq!(b.rows(), 1);
        assert_eq!(g.cols(), xv.cols());
        assert_eq!(b.cols(), xv.cols());
        let mut v = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let (mean, var) = row_moments(xv.row(r));
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..xv.cols() {
                let xh = (xv.get(r, c) - mean) * inv;
                v.set(r, c, g.get(0, c) * xh + b.get(0, c));
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let y = &self.nodes[b].value;
        assert_eq!(x.rows(), y.rows(), "concat_cols row mismatch");
        let v = Tensor::from_fn(x.rows(), x.cols() + y.cols(), |i, j| {
            if j < x.cols() {
                x.get(i, j)
            } else {
                y.get(i, j - x.cols())
            }
        });
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let v = Tensor::from_fn(xv.rows(), len, |i, j| xv.get(i, start + j));
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut v = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.rows(), "gather id out of range");
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: NodeId, keep: &[bool]) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(keep.len(), xv.rows());
        let count = keep.iter().filter(|k| **k).count().max(1);
        let mut v = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            if keep[r] {
                for c in 0..xv.cols() {
                    v.set(0, c, v.get(0, c) + xv.get(r, c));
                }
            }
        }
        v.scale_in_place(1.0 / count as f64);
        self.push(
            v,
            Op::MeanRows {
                x,
                keep: keep.to_vec(),
            },
        )
    }

    pub fn neg_sq_dist(&mut self, x: NodeId, table: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let t = &self.nodes[table].value;
        assert_eq!(xv.cols(), t.cols(), "neg_sq_dist width mismatch");
        let mut v = Tensor::zeros(xv.rows(), t.rows());
        for l in 0..xv.rows() {
            let xr = xv.row(l);
            for m in 0..t.rows() {
                let tr = t.row(m);
                let mut d = 0.0;
                for h in 0..xv.cols() {
                    let e = xr[h] - tr[h];
                    d += e * e;
                }
                v.set(l, m, -d);
            }
        }
        self.push(v, Op::NegSqDist { x, table })
    }

    pub fn row_scale(&mut self, x: NodeId, factors: &[f64]) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(factors.len(), xv.rows(), "row_scale length mismatch");
        let v = Tensor::from_fn(xv.rows(), xv.cols(), |i, j| xv.get(i, j) * factors[i]);
        self.push(
            v,
            Op::RowScale {
                x,
                factors: factors.to_vec(),
            },
        )
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], smoothing: f64) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target mismatch");
        let classes = lv.cols();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < classes, "cross_entropy target out of range");
            let logp = log_softmax(lv.row(r));
            let uniform: f64 = logp.iter().sum::<f64>() / classes as f64;
            total += -(1.0 - smoothing) * logp[t] - smoothing * uniform;
        }
        let v = Tensor::from_vec(1, 1, vec![total / targets.len() as f64]);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
        )
    }

    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let y = &self.nodes[b].value;
        assert_eq!(x.shape(), y.shape(), "mse_loss shape mismatch");
        let n = (x.rows() * x.cols()) as f64;
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let v = Tensor::from_vec(1, 1, vec![s / n]);
        self.push(v, Op::MseLoss(a, b))
    }

    /// Backpropagate from a scalar loss node. Returns per-parameter gradients
    /// keyed by `ParamId`; parameters that do not influence the loss get None.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Vec<Option<Tensor>> {
        self.backward_probed(loss, n_params, None).0
    }

    /// Backward pass that additionally reports the gradient accumulated at a
    /// probe node (None if the loss never reaches it). Used by the
    /// stop-gradient tests.
    pub fn backward_probed(
        &self,
        loss: NodeId,
        n_params: usize,
        probe: Option<NodeId>,
    ) -> (Vec<Option<Tensor>>, Option<Tensor>) {
        assert_eq!(self.nodes[loss].value.shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut probe_grad = None;

        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if probe == Some(id) {
                probe_grad = Some(g.clone());
            }
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        match &mut out[*p] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(&self.nodes[*b].value);
                    let gb = self.nodes[*a].value.matmul_tn(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    // C = A B^T: dA = G B, dB = G^T A.
                    let ga = g.matmul(&self.nodes[*b].value);
                    let gb = g.matmul_tn(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddScaled(a, b, k) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(*k));
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gr.set(0, c, gr.get(0, c) + g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, g.scale(*k));
                }
                Op::MulElem(a, b) => {
                    let ga = hadamard(&g, &self.nodes[*b].value);
                    let gb = hadamard(&g, &self.nodes[*a].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = Tensor::from_vec(
                        x.rows(),
                        x.cols(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&p, &q)| q * gelu_grad(p))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[id].value;
                    let mut ga = Tensor::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let grow = g.row(r);
                        let dot: f64 = srow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        let out = ga.row_mut(r);
                        for c in 0..srow.len() {
                            out[c] = srow[c] * (grow[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let n = xv.cols() as f64;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let mut gg = Tensor::zeros(1, xv.cols());
                    let mut gb = Tensor::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        let (mean, var) = row_moments(xv.row(r));
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // dy/dxhat = gain; standard layer-norm backward.
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        let mut xhat = vec![0.0; xv.cols()];
                        let mut dxh = vec![0.0; xv.cols()];
                        for c in 0..xv.cols() {
                            xhat[c] = (xv.get(r, c) - mean) * inv;
                            dxh[c] = g.get(r, c) * gv.get(0, c);
                            sum_dxh += dxh[c];
                            sum_dxh_xh += dxh[c] * xhat[c];
                            gg.set(0, c, gg.get(0, c) + g.get(r, c) * xhat[c]);
                            gb.set(0, c, gb.get(0, c) + g.get(r, c));
                        }
                        for c in 0..xv.cols() {
                            let v = inv * (dxh[c] - sum_dxh / n - xhat[c] * sum_dxh_xh / n);
                            gx.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.nodes[*a].value.cols();
                    let wb = self.nodes[*b].value.cols();
                    let ga = Tensor::from_fn(g.rows(), wa, |i, j| g.get(i, j));
                    let gb = Tensor::from_fn(g.rows(), wb, |i, j| g.get(i, wa + j));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        for j in 0..*len {
                            gx.set(i, start + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let t = &self.nodes[*table].value;
                    let mut gt = Tensor::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..t.cols() {
                            gt.set(id, c, gt.get(id, c) + g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::MeanRows { x, keep } => {
                    let xv = &self.nodes[*x].value;
                    let count = keep.iter().filter(|k| **k).count().max(1) as f64;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        if keep[r] {
                            for c in 0..xv.cols() {
                                gx.set(r, c, g.get(0, c) / count);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::NegSqDist { x, table } => {
                    let xv = &self.nodes[*x].value;
                    let t = &self.nodes[*table].value;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    let mut gt = Tensor::zeros(t.rows(), t.cols());
                    for l in 0..xv.rows() {
                        for m in 0..t.rows() {
                            let w = g.get(l, m);
                            if w == 0.0 {
                                continue;
                            }
                            for h in 0..xv.cols() {
                                let diff = xv.get(l, h) - t.get(m, h);
                                gx.set(l, h, gx.get(l, h) - 2.0 * w * diff);
                                gt.set(m, h, gt.get(m, h) + 2.0 * w * diff);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *table, gt);
                }
                Op::RowScale { x, factors } => {
                    let gx = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * factors[i]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                } => {
                    let lv = &self.nodes[*logits].value;
                    let classes = lv.cols() as f64;
                    let upstream = g.get(0, 0) / targets.len() as f64;
                    let mut gl = Tensor::zeros(lv.rows(), lv.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        let logp = log_softmax(lv.row(r));
                        for c in 0..lv.cols() {
                            let p = logp[c].exp();
                            let q = if c == t { 1.0 - smoothing } else { 0.0 }
                                + smoothing / classes;
                            gl.set(r, c, upstream * (p - q));
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::MseLoss(a, b) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[*b].value;
                    let n = (x.rows() * x.cols()) as f64;
                    let k = 2.0 * g.get(0, 0) / n;
                    let ga = Tensor::from_vec(
                        x.rows(),
                        x.cols(),
                        x.data()
                            .iter()
                            .zip(y.data())
                            .map(|(p, q)| k * (p - q))
                            .collect(),
                    );
                    let gb = ga.scale(-1.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
            }
        }
        (out, probe_grad)
    }
}

const LN_EPS: f64 = 1e-5;

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect(),
    )
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn softmax_in_place(row: &mut [f64]) {
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

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
