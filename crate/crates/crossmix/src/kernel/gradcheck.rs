//! Central finite-difference checking for tape gradients.
//!
//! The forward value is evaluated from scratch for every perturbed entry, so
//! the check exercises the recorded backward pass against nothing but the
//! forward arithmetic itself.

use crate::error::Result;
use crate::kernel::tape::{NodeId, Tape};
use crate::kernel::tensor::Tensor;

/// Rebuild-and-evaluate closure: the leaves are pushed onto a fresh tape in
/// order and the closure must return the scalar loss node.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

fn evaluate(leaves: &[Tensor], build: ScalarFn<'_>) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids).expect("forward build failed");
    tape.scalar_value(loss).expect("loss must be scalar")
}

/// Central finite-difference gradient of `build` w.r.t. every leaf entry.
pub fn central_difference(
    leaves: &[Tensor],
    step: f64,
    build: ScalarFn<'_>,
) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut grad = Tensor::zeros(leaf.rows(), leaf.cols());
        for idx in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[idx] += step;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[idx] -= step;
            grad.data_mut()[idx] =
                (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Compare the analytic gradient of `build` with central differences.
///
/// An entry passes when `|analytic - numeric| <= tol * max(1, |analytic|,
/// |numeric|)`; the unit floor keeps near-zero gradients from inflating the
/// relative error. Panics with the offending coordinates on mismatch.
pub fn check_scalar_fn(
    leaves: &[Tensor],
    step: f64,
    tol: f64,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) {
    let build: ScalarFn<'_> = &build;
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids).expect("forward build failed");
    let grads = tape.backward(loss).expect("backward failed");

    let numeric = central_difference(leaves, step, build);
    for (li, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for idx in 0..analytic.len() {
            let a = analytic.data()[idx];
            let n = numeric[li].data()[idx];
            let denom = 1.0f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() <= tol * denom,
                "gradient mismatch at leaf {li} entry {idx}: analytic {a}, numeric {n}"
            );
        }
    }
}
