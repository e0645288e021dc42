//! Reverse-mode differentiation over a fixed operation set.
//!
//! A `Tape` records primitive operations in execution order; `backward`
//! replays them in exact reverse order and accumulates gradients into every
//! node buffer. The op set is closed on purpose: every loss in this crate
//! decomposes into it, which keeps the kernel auditable.

use crate::error::{Error, Result};
use crate::kernel::tensor::Tensor;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    WeightedRowMean { input: NodeId, weights: Vec<f64> },
    Exp(NodeId),
    Log(NodeId),
    LogSumExp { input: NodeId, mask: Vec<bool> },
    L2NormalizeRows(NodeId),
    CosineRows(NodeId, NodeId),
    SquaredDistance(NodeId, NodeId),
    MaskedMean { input: NodeId, mask: Vec<bool> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient buffers produced by one backward pass, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to node `id`.
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id]
    }
}

/// Ordered record of primitive operations with per-node values.
#[derive(Debug, Default)]
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

    /// Value computed at node `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.nodes[id].value.as_scalar()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Trainable input node; `backward` reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { trainable: true }, value)
    }

    /// Non-trainable input node; gradients stop here.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Matrix product `a @ b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let (n, k, m) = (va.rows(), va.cols(), vb.cols());
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for p in 0..k {
                let aip = va.get(i, p);
                if aip == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out.data_mut()[i * m + j] += aip * vb.get(p, j);
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(op, value))
    }

    /// Multiply every entry by the constant `c`.
    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data).expect("same shape");
        self.push(Op::ScalarMul(a, c), value)
    }

    /// Weight-averaged rows: `sum_n w[n] * x[n, :] / sum_n w[n]`, a 1xD row.
    /// The weights are constants; gradients flow only through `x`.
    pub fn weighted_row_mean(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if weights.len() != vx.rows() {
            return Err(Error::ShapeMismatch {
                op: "weighted_row_mean",
                left: vx.shape(),
                right: [weights.len(), 1],
            });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroWeightSum { total });
        }
        let cols = vx.cols();
        let mut out = vec![0.0; cols];
        for (n, w) in weights.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * vx.get(n, j);
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        Ok(self.push(
            Op::WeightedRowMean {
                input: x,
                weights: weights.to_vec(),
            },
            Tensor::from_vec(1, cols, out)?,
        ))
    }

    /// Elementwise `exp`.
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data).expect("same shape");
        self.push(Op::Exp(a), value)
    }

    /// Elementwise natural log.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x.ln()).collect();
        let value = Tensor::from_vec(va.rows(), va.cols(), data).expect("same shape");
        self.push(Op::Log(a), value)
    }

    /// `log(sum(exp(x)))` over all entries, computed against the running max.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let mask = vec![true; self.nodes[a].value.len()];
        self.masked_log_sum_exp(a, &mask)
    }

    /// `log(sum_{mask} exp(x_i))` over the selected entries only.
    pub fn masked_log_sum_exp(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if mask.len() != va.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_log_sum_exp",
                left: va.shape(),
                right: [1, mask.len()],
            });
        }
        let mut max = f64::NEG_INFINITY;
        for (v, m) in va.data().iter().zip(mask) {
            if *m && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyMask {
                op: "masked_log_sum_exp",
            });
        }
        let mut acc = 0.0;
        for (v, m) in va.data().iter().zip(mask) {
            if *m {
                acc += (v - max).exp();
            }
        }
        let value = Tensor::scalar(max + acc.ln());
        Ok(self.push(
            Op::LogSumExp {
                input: a,
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    /// Scale every row to unit L2 norm; rows with norm <= 1e-30 are an error.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let n = row_norm(va, r);
            if n <= 1e-30 {
                return Err(Error::DegenerateNorm { norm: n });
            }
            for j in 0..cols {
                out.set(r, j, va.get(r, j) / n);
            }
        }
        Ok(self.push(Op::L2NormalizeRows(a), out))
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.cols() != vb.cols() {
            return Err(shape_err("cosine_rows", va, vb));
        }
        let (n, m) = (va.rows(), vb.rows());
        let norms_a: Vec<f64> = (0..n).map(|r| row_norm(va, r)).collect();
        let norms_b: Vec<f64> = (0..m).map(|r| row_norm(vb, r)).collect();
        for norm in norms_a.iter().chain(&norms_b) {
            if *norm <= 1e-30 {
                return Err(Error::DegenerateNorm { norm: *norm });
            }
        }
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let d = super::tensor::dot(va.row_slice(i), vb.row_slice(j));
                out.set(i, j, d / (norms_a[i] * norms_b[j]));
            }
        }
        Ok(self.push(Op::CosineRows(a, b), out))
    }

    /// Scalar `sum((a - b)^2)` over same-shape tensors.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("squared_distance", va, vb));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::SquaredDistance(a, b), Tensor::scalar(s)))
    }

    /// Mean over the selected entries; an empty mask yields 0 by convention
    /// and carries no gradient.
    pub fn masked_mean(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if mask.len() != va.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_mean",
                left: va.shape(),
                right: [1, mask.len()],
            });
        }
        let count = mask.iter().filter(|m| **m).count();
        let value = if count == 0 {
            Tensor::scalar(0.0)
        } else {
            let sum: f64 = va
                .data()
                .iter()
                .zip(mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| v)
                .sum();
            Tensor::scalar(sum / count as f64)
        };
        Ok(self.push(
            Op::MaskedMean {
                input: a,
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    /// Mean over all entries.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let mask = vec![true; self.nodes[a].value.len()];
        self.masked_mean(a, &mask)
    }

    /// Stack tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.cols() != cols {
                return Err(shape_err("concat_rows", &self.nodes[parts[0]].value, v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Stack tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.nodes[parts[0]].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.rows() != rows {
                return Err(shape_err("concat_cols", &self.nodes[parts[0]].value, v));
            }
            widths.push(v.cols());
        }
        let cols: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = &self.nodes[p].value;
                for j in 0..v.cols() {
                    out.set(r, offset + j, v.get(r, j));
                }
                offset += v.cols();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// `sum(x)` expressed as `mean(x) * len(x)`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let len = self.nodes[a].value.len();
        let m = self.mean(a)?;
        Ok(self.scalar_mul(m, len as f64))
    }

    /// Repeat a 1xD row `n` times via `ones(n,1) @ row`.
    pub fn tile_rows(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let v = &self.nodes[row].value;
        if v.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "tile_rows",
                left: v.shape(),
                right: [1, v.cols()],
            });
        }
        let ones = self.constant(Tensor::from_vec(n, 1, vec![1.0; n])?);
        self.matmul(ones, row)
    }

    /// Elementwise square root of a strictly positive tensor,
    /// as `exp(0.5 * log(x))`.
    pub fn sqrt_positive(&mut self, a: NodeId) -> NodeId {
        let lg = self.log(a);
        let half = self.scalar_mul(lg, 0.5);
        self.exp(half)
    }

    /// Reverse pass from a scalar loss node. Returns a gradient buffer per
    /// node; leaves that do not feed the loss keep a zero gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss].data_mut()[0] = 1.0;

        // Visit in exact reverse recording order; inputs always precede
        // outputs, so split_at_mut separates a node from its inputs.
        for i in (0..=loss).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let g = &rest[0];
            if g.data().iter().all(|v| *v == 0.0) {
                continue;
            }
            self.propagate(i, g, before);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Tensor]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                // dA += g @ B^T
                for i in 0..n {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g.get(i, j) * vb.get(p, j);
                        }
                        grads[*a].data_mut()[i * k + p] += acc;
                    }
                }
                // dB += A^T @ g
                for p in 0..k {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += va.get(i, p) * g.get(i, j);
                        }
                        grads[*b].data_mut()[p * m + j] += acc;
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], g.data(), 1.0);
                accumulate(&mut grads[*b], g.data(), 1.0);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], g.data(), 1.0);
                accumulate(&mut grads[*b], g.data(), -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                for (idx, gv) in g.data().iter().enumerate() {
                    grads[*a].data_mut()[idx] += gv * vb.data()[idx];
                    grads[*b].data_mut()[idx] += gv * va.data()[idx];
                }
            }
            Op::ScalarMul(a, c) => accumulate(&mut grads[*a], g.data(), *c),
            Op::WeightedRowMean { input, weights } => {
                let total: f64 = weights.iter().sum();
                let cols = node.value.cols();
                for (n, w) in weights.iter().enumerate() {
                    let scale = w / total;
                    for j in 0..cols {
                        grads[*input].data_mut()[n * cols + j] += scale * g.data()[j];
                    }
                }
            }
            Op::Exp(a) => {
                for (idx, gv) in g.data().iter().enumerate() {
                    grads[*a].data_mut()[idx] += gv * node.value.data()[idx];
                }
            }
            Op::Log(a) => {
                let va = &self.nodes[*a].value;
                for (idx, gv) in g.data().iter().enumerate() {
                    grads[*a].data_mut()[idx] += gv / va.data()[idx];
                }
            }
            Op::LogSumExp { input, mask } => {
                let lse = node.value.data()[0];
                let gv = g.data()[0];
                let vx = &self.nodes[*input].value;
                for (idx, m) in mask.iter().enumerate() {
                    if *m {
                        grads[*input].data_mut()[idx] += gv * (vx.data()[idx] - lse).exp();
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let va = &self.nodes[*a].value;
                let cols = va.cols();
                for r in 0..va.rows() {
                    let n = row_norm(va, r);
                    let y = node.value.row_slice(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let gy: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..cols {
                        grads[*a].data_mut()[r * cols + j] += (gr[j] - gy * y[j]) / n;
                    }
                }
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let cols = va.cols();
                let norms_a: Vec<f64> = (0..va.rows()).map(|r| row_norm(va, r)).collect();
                let norms_b: Vec<f64> = (0..vb.rows()).map(|r| row_norm(vb, r)).collect();
                for i in 0..va.rows() {
                    for j in 0..vb.rows() {
                        let gv = g.get(i, j);
                        if gv == 0.0 {
                            continue;
                        }
                        let c = node.value.get(i, j);
                        let (na, nb) = (norms_a[i], norms_b[j]);
                        let ra = va.row_slice(i);
                        let rb = vb.row_slice(j);
                        for t in 0..cols {
                            grads[*a].data_mut()[i * cols + t] +=
                                gv * (rb[t] / (na * nb) - c * ra[t] / (na * na));
                            grads[*b].data_mut()[j * cols + t] +=
                                gv * (ra[t] / (na * nb) - c * rb[t] / (nb * nb));
                        }
                    }
                }
            }
            Op::SquaredDistance(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let gv = g.data()[0];
                for idx in 0..va.len() {
                    let diff = va.data()[idx] - vb.data()[idx];
                    grads[*a].data_mut()[idx] += 2.0 * gv * diff;
                    grads[*b].data_mut()[idx] -= 2.0 * gv * diff;
                }
            }
            Op::MaskedMean { input, mask } => {
                let count = mask.iter().filter(|m| **m).count();
                if count > 0 {
                    let gv = g.data()[0] / count as f64;
                    for (idx, m) in mask.iter().enumerate() {
                        if *m {
                            grads[*input].data_mut()[idx] += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    let src = &g.data()[offset..offset + len];
                    accumulate(&mut grads[p], src, 1.0);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total_cols = node.value.cols();
                for r in 0..rows {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols();
                        for j in 0..pc {
                            grads[p].data_mut()[r * pc + j] +=
                                g.data()[r * total_cols + offset + j];
                        }
                        offset += pc;
                    }
                }
            }
        }
    }

    /// True when node `id` was created by `leaf`.
    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf { trainable: true })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn row_norm(t: &Tensor, r: usize) -> f64 {
    super::tensor::norm(t.row_slice(r))
}

fn accumulate(target: &mut Tensor, src: &[f64], scale: f64) {
    for (t, s) in target.data_mut().iter_mut().zip(src) {
        *t += scale * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gradcheck::check_scalar_fn;

    #[test]
    fn log_sum_exp_of_two_zeros_is_ln_two() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.0, 0.0]));
        let lse = tape.log_sum_exp(x).unwrap();
        let got = tape.scalar_value(lse).unwrap();
        assert!((got - 2.0f64.ln()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_rejects_vanishing_norm() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[0.0, 1e-31]));
        assert!(matches!(
            tape.l2_normalize_rows(x),
            Err(Error::DegenerateNorm { .. })
        ));
    }

    #[test]
    fn cosine_of_orthogonal_rows_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(&[1.0, 0.0]));
        let b = tape.constant(Tensor::row(&[0.0, 1.0]));
        let c = tape.cosine_rows(a, b).unwrap();
        assert_eq!(tape.scalar_value(c).unwrap(), 0.0);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).data();
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_the_anchor() {
        // cosine is scale-invariant in each argument, so at a == b the
        // gradient w.r.t. a must vanish entirely.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::row(&[1.0, 0.0]));
        let b = tape.constant(Tensor::row(&[1.0, 0.0]));
        let c = tape.cosine_rows(a, b).unwrap();
        let grads = tape.backward(c).unwrap();
        assert_eq!(grads.get(a).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn disconnected_subgraph_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let y = tape.leaf(Tensor::row(&[5.0, -3.0]));
        let _unused = tape.mul(y, y).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn replaying_the_same_ops_is_bit_identical() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::row(&[0.3, -1.7, 2.9]));
            let w = tape.leaf(Tensor::from_vec(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let e = tape.exp(h);
            let n = tape.l2_normalize_rows(e).unwrap();
            let loss = tape.log_sum_exp(n).unwrap();
            (tape.value(loss).data()[0], tape.value(n).data().to_vec())
        };
        let (l1, n1) = build();
        let (l2, n2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(n1.iter().zip(&n2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One composite circuit per primitive, checked at 10 random points.
        for seed in 0..10u64 {
            check_all_ops_at(seed);
        }
    }

    fn check_all_ops_at(seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x7a9e_0000 + seed);
        let mut randt = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect();
            Tensor::from_vec(rows, cols, data).unwrap()
        };

        // matmul + add + scalar_mul
        let a0 = randt(2, 3);
        let b0 = randt(3, 2);
        check_scalar_fn(&[a0, b0], 1e-3, 1e-4, |tape, leaves| {
            let p = tape.matmul(leaves[0], leaves[1])?;
            let s = tape.scalar_mul(p, 0.7);
            let q = tape.add(s, p)?;
            tape.sum(q)
        });

        // sub + mul + exp
        let a1 = randt(2, 2);
        let b1 = randt(2, 2);
        check_scalar_fn(&[a1, b1], 1e-3, 1e-4, |tape, leaves| {
            let d = tape.sub(leaves[0], leaves[1])?;
            let m = tape.mul(d, leaves[0])?;
            let e = tape.exp(m);
            tape.mean(e)
        });

        // log on strictly positive input
        let mut pos = randt(1, 4);
        for v in pos.data_mut() {
            *v = v.abs() + 0.5;
        }
        check_scalar_fn(&[pos], 1e-4, 1e-4, |tape, leaves| {
            let l = tape.log(leaves[0]);
            tape.sum(l)
        });

        // weighted_row_mean
        let x = randt(4, 3);
        check_scalar_fn(&[x], 1e-3, 1e-4, |tape, leaves| {
            let m = tape.weighted_row_mean(leaves[0], &[0.1, 0.4, 0.2, 0.3])?;
            let sq = tape.mul(m, m)?;
            tape.sum(sq)
        });

        // masked log_sum_exp
        let x = randt(1, 6);
        check_scalar_fn(&[x], 1e-3, 1e-4, |tape, leaves| {
            tape.masked_log_sum_exp(leaves[0], &[true, false, true, true, false, true])
        });

        // l2_normalize + cosine
        let a2 = randt(2, 4);
        let b2 = randt(3, 4);
        check_scalar_fn(&[a2, b2], 1e-3, 1e-4, |tape, leaves| {
            let na = tape.l2_normalize_rows(leaves[0])?;
            let c = tape.cosine_rows(na, leaves[1])?;
            tape.mean(c)
        });

        // squared_distance
        let a3 = randt(2, 3);
        let b3 = randt(2, 3);
        check_scalar_fn(&[a3, b3], 1e-3, 1e-4, |tape, leaves| {
            tape.squared_distance(leaves[0], leaves[1])
        });

        // masked_mean + concat
        let a4 = randt(1, 3);
        let b4 = randt(1, 3);
        check_scalar_fn(&[a4, b4], 1e-3, 1e-4, |tape, leaves| {
            let rows = tape.concat_rows(&[leaves[0], leaves[1]])?;
            let cols = tape.concat_cols(&[leaves[0], leaves[1]])?;
            let m1 = tape.masked_mean(rows, &[true, false, true, true, true, false])?;
            let m2 = tape.masked_mean(cols, &[false, true, true, false, true, true])?;
            tape.add(m1, m2)
        });

        // tile_rows + sqrt_positive composite helpers
        let mut v = randt(1, 3);
        for x in v.data_mut() {
            *x = x.abs() + 0.4;
        }
        check_scalar_fn(&[v], 1e-4, 1e-4, |tape, leaves| {
            let tiled = tape.tile_rows(leaves[0], 3)?;
            let s = tape.sqrt_positive(tiled);
            tape.sum(s)
        });
    }
}
