//! Per-sample Gaussian mixture fitting and prototype construction.
//!
//! One mixture is fitted per sample over that sample's local descriptors,
//! with diagonal covariances and a fixed component count. EM runs with
//! gradients off; `soft_refit` then rebuilds the parameters on the tape from
//! frozen responsibilities so training losses backpropagate into whatever
//! produced the descriptors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::tape::{NodeId, Tape};
use crate::kernel::tensor::Tensor;
use crate::Modality;

/// Minimum per-dimension variance; keeps duplicate descriptors from
/// producing singular components.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Responsibility mass below which a component counts as empty.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-12;

/// Log-likelihood improvement below which EM stops.
pub const EM_TOLERANCE: f64 = 1e-7;

/// Hard cap on EM iterations.
pub const EM_MAX_ITERATIONS: usize = 200;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// The local descriptors one mixture is fitted over: an LxD matrix, one
/// descriptor per row.
#[derive(Debug, Clone)]
pub struct LocalFeatureSet {
    modality: Modality,
    features: Tensor,
}

impl LocalFeatureSet {
    pub fn new(modality: Modality, features: Tensor) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::InvalidShape {
                rows: features.rows(),
                cols: features.cols(),
                len: features.len(),
            });
        }
        if !features.all_finite() {
            return Err(Error::InvalidConfig {
                field: "features",
                reason: "descriptors must be finite".to_string(),
            });
        }
        Ok(LocalFeatureSet {
            modality,
            features,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Number of descriptors L.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Descriptor dimension d.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn descriptor(&self, n: usize) -> &[f64] {
        self.features.row_slice(n)
    }
}

/// Mixing weights, means, and diagonal covariances for one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Tensor,     // K x d
    variances: Tensor, // K x d, every entry >= VARIANCE_FLOOR
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Tensor, variances: Tensor) -> Result<Self> {
        let k = weights.len();
        if means.rows() != k || variances.shape() != means.shape() {
            return Err(Error::ShapeMismatch {
                op: "gmm_params",
                left: means.shape(),
                right: variances.shape(),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0 || *w > 1.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig {
                field: "weights",
                reason: format!("mixing weights must lie in [0,1] and sum to 1, got total {total}"),
            });
        }
        if variances.data().iter().any(|v| *v < VARIANCE_FLOOR) {
            return Err(Error::InvalidConfig {
                field: "variances",
                reason: format!("every variance must be >= {VARIANCE_FLOOR}"),
            });
        }
        Ok(GmmParams {
            weights,
            means,
            variances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means.row_slice(k)
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        self.variances.row_slice(k)
    }

    /// `[mean, per-dim std, weight]` of component `k`, L2-normalized.
    pub fn component_embedding(&self, k: usize) -> Vec<f64> {
        let d = self.dim();
        let mut v = Vec::with_capacity(2 * d + 1);
        v.extend_from_slice(self.mean(k));
        v.extend(self.variance(k).iter().map(|s| s.sqrt()));
        v.push(self.weights[k]);
        let norm = crate::kernel::tensor::norm(&v);
        for x in v.iter_mut() {
            *x /= norm;
        }
        v
    }

    /// Log density of one component at `x` (diagonal Gaussian).
    fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let mu = self.mean(k);
        let var = self.variance(k);
        let mut acc = 0.0;
        for j in 0..x.len() {
            let diff = x[j] - mu[j];
            acc += LN_2PI + var[j].ln() + diff * diff / var[j];
        }
        -0.5 * acc
    }
}

/// LxK posterior matrix; each row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    gamma: Tensor,
}

impl Responsibilities {
    pub fn new(gamma: Tensor) -> Result<Self> {
        for r in 0..gamma.rows() {
            let row = gamma.row_slice(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|g| *g < 0.0 || *g > 1.0) {
                return Err(Error::InvalidConfig {
                    field: "responsibilities",
                    reason: format!("row {r} is not a distribution (sum {sum})"),
                });
            }
        }
        Ok(Responsibilities { gamma })
    }

    pub fn descriptors(&self) -> usize {
        self.gamma.rows()
    }

    pub fn components(&self) -> usize {
        self.gamma.cols()
    }

    pub fn get(&self, n: usize, k: usize) -> f64 {
        self.gamma.get(n, k)
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.gamma.row_slice(n)
    }

    /// Total responsibility mass of component `k`.
    pub fn column_mass(&self, k: usize) -> f64 {
        (0..self.gamma.rows()).map(|n| self.gamma.get(n, k)).sum()
    }

    /// Column `k` as an owned vector.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.gamma.rows())
            .map(|n| self.gamma.get(n, k))
            .collect()
    }
}

/// The selected component's normalized embedding plus all per-component
/// embeddings, each of length 2d+1.
#[derive(Debug, Clone)]
pub struct PrototypeVector {
    pub component: usize,
    pub vector: Vec<f64>,
    pub component_embeddings: Vec<Vec<f64>>,
}

/// Converged fit: parameters, posteriors under those parameters, and the
/// per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: GmmParams,
    pub responsibilities: Responsibilities,
    pub log_likelihood: Vec<f64>,
}

/// `log p(x | params)` via log-sum-exp over component log densities.
pub fn log_density(params: &GmmParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: x.len(),
        });
    }
    let logs: Vec<f64> = (0..params.components())
        .map(|k| params.weights[k].ln() + params.component_log_density(k, x))
        .collect();
    Ok(log_sum_exp(&logs))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Posterior responsibilities of every descriptor, computed in the log
/// domain and row-normalized.
pub fn e_step(params: &GmmParams, features: &LocalFeatureSet) -> Result<Responsibilities> {
    e_step_with_ll(params, features).map(|(gamma, _)| gamma)
}

/// E-step plus the total log-likelihood under the same parameters.
pub fn e_step_with_ll(
    params: &GmmParams,
    features: &LocalFeatureSet,
) -> Result<(Responsibilities, f64)> {
    if features.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: features.dim(),
        });
    }
    let (l, k) = (features.len(), params.components());
    let mut gamma = Tensor::zeros(l, k);
    let mut total_ll = 0.0;
    for n in 0..l {
        let x = features.descriptor(n);
        let logs: Vec<f64> = (0..k)
            .map(|c| params.weights[c].ln() + params.component_log_density(c, x))
            .collect();
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Err(Error::DensityUnderflow { descriptor: n });
        }
        total_ll += lse;
        for (c, lg) in logs.iter().enumerate() {
            gamma.set(n, c, (lg - lse).exp());
        }
    }
    Ok((Responsibilities { gamma }, total_ll))
}

/// M-step: weights, means, and floored diagonal variances from frozen
/// responsibilities. Components whose mass collapses are reinitialized at
/// the descriptor the partial mixture explains worst.
pub fn m_step(features: &LocalFeatureSet, gamma: &Responsibilities) -> Result<GmmParams> {
    m_step_detailed(features, gamma).map(|(params, _)| params)
}

/// M-step that also reports which components were reinitialized.
pub fn m_step_detailed(
    features: &LocalFeatureSet,
    gamma: &Responsibilities,
) -> Result<(GmmParams, Vec<usize>)> {
    if gamma.descriptors() != features.len() {
        return Err(Error::ShapeMismatch {
            op: "m_step",
            left: [features.len(), features.dim()],
            right: [gamma.descriptors(), gamma.components()],
        });
    }
    let (l, d, k) = (features.len(), features.dim(), gamma.components());
    let mut weights = vec![0.0; k];
    let mut means = Tensor::zeros(k, d);
    let mut variances = Tensor::zeros(k, d);
    let mut empty = Vec::new();

    for c in 0..k {
        let mass = gamma.column_mass(c);
        if mass < EMPTY_COMPONENT_MASS {
            empty.push(c);
            continue;
        }
        weights[c] = mass / l as f64;
        // Mean: responsibility-weighted average, accumulated in row order so
        // the tape-side refit reproduces it bit for bit.
        for n in 0..l {
            let g = gamma.get(n, c);
            let x = features.descriptor(n);
            for j in 0..d {
                means.data_mut()[c * d + j] += g * x[j];
            }
        }
        for j in 0..d {
            means.data_mut()[c * d + j] /= mass;
        }
        // Diagonal second moment about the new mean, floored.
        for n in 0..l {
            let g = gamma.get(n, c);
            let x = features.descriptor(n);
            for j in 0..d {
                let diff = x[j] - means.get(c, j);
                variances.data_mut()[c * d + j] += g * diff * diff;
            }
        }
        for j in 0..d {
            let v = variances.get(c, j) / mass;
            variances.set(c, j, if v < VARIANCE_FLOOR { VARIANCE_FLOOR } else { v });
        }
    }

    if !empty.is_empty() {
        reinitialize_empty(features, &mut weights, &mut means, &mut variances, &empty);
    }

    Ok((
        GmmParams {
            weights,
            means,
            variances,
        },
        empty,
    ))
}

/// Place each empty component at the descriptor the healthy components
/// explain worst, give it a one-descriptor share of weight, and renormalize.
fn reinitialize_empty(
    features: &LocalFeatureSet,
    weights: &mut [f64],
    means: &mut Tensor,
    variances: &mut Tensor,
    empty: &[usize],
) {
    let (l, d) = (features.len(), features.dim());
    let global_var = global_variance(features);
    let healthy: Vec<usize> = (0..weights.len()).filter(|c| !empty.contains(c)).collect();

    for &c in empty {
        let mut worst = 0;
        let mut worst_ll = f64::INFINITY;
        for n in 0..l {
            let x = features.descriptor(n);
            let logs: Vec<f64> = healthy
                .iter()
                .map(|&h| {
                    let mut acc = 0.0;
                    for j in 0..d {
                        let diff = x[j] - means.get(h, j);
                        acc += LN_2PI + variances.get(h, j).ln() + diff * diff / variances.get(h, j);
                    }
                    weights[h].max(EMPTY_COMPONENT_MASS).ln() - 0.5 * acc
                })
                .collect();
            let ll = log_sum_exp(&logs);
            if ll < worst_ll {
                worst_ll = ll;
                worst = n;
            }
        }
        for j in 0..d {
            means.set(c, j, features.descriptor(worst)[j]);
            variances.set(c, j, global_var[j]);
        }
        weights[c] = 1.0 / l as f64;
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
}

fn global_variance(features: &LocalFeatureSet) -> Vec<f64> {
    let (l, d) = (features.len(), features.dim());
    let mut mean = vec![0.0; d];
    for n in 0..l {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += features.descriptor(n)[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= l as f64;
    }
    let mut var = vec![0.0; d];
    for n in 0..l {
        for (j, v) in var.iter_mut().enumerate() {
            let diff = features.descriptor(n)[j] - mean[j];
            *v += diff * diff;
        }
    }
    for v in var.iter_mut() {
        *v = (*v / l as f64).max(VARIANCE_FLOOR);
    }
    var
}

/// Fit a K-component mixture by EM with k-means++-style seeding.
///
/// Alternates E and M steps until the log-likelihood improves by less than
/// [`EM_TOLERANCE`] or [`EM_MAX_ITERATIONS`] is reached. The returned
/// responsibilities are consistent with the returned parameters, and the
/// trace is non-decreasing.
pub fn fit_em(features: &LocalFeatureSet, k: usize, seed: u64) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::InvalidConfig {
            field: "components",
            reason: "need at least one mixture component".to_string(),
        });
    }
    if k > features.len() {
        return Err(Error::TooFewDescriptors {
            descriptors: features.len(),
            components: k,
        });
    }

    let mut params = initialize(features, k, seed);
    let mut prev_ll = f64::NEG_INFINITY;
    let mut trace = Vec::new();

    for iter in 0..EM_MAX_ITERATIONS {
        let (gamma, ll) = e_step_with_ll(&params, features)?;
        trace.push(ll);
        if iter > 0 && ll - prev_ll < EM_TOLERANCE {
            return Ok(EmFit {
                params,
                responsibilities: gamma,
                log_likelihood: trace,
            });
        }
        prev_ll = ll;
        if iter == EM_MAX_ITERATIONS - 1 {
            return Ok(EmFit {
                params,
                responsibilities: gamma,
                log_likelihood: trace,
            });
        }
        params = m_step(features, &gamma)?;
    }
    unreachable!("loop always returns");
}

/// Seed means at descriptors (k-means++ style), variances at the global
/// per-dimension variance, weights uniform.
fn initialize(features: &LocalFeatureSet, k: usize, seed: u64) -> GmmParams {
    let (l, d) = (features.len(), features.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = vec![rng.random_range(0..l)];
    while chosen.len() < k {
        let dists: Vec<f64> = (0..l)
            .map(|n| {
                chosen
                    .iter()
                    .map(|&c| {
                        features
                            .descriptor(n)
                            .iter()
                            .zip(features.descriptor(c))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..l)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = l - 1;
            for (n, dist) in dists.iter().enumerate() {
                if r < *dist {
                    pick = n;
                    break;
                }
                r -= dist;
            }
            pick
        };
        chosen.push(next);
    }

    let global_var = global_variance(features);
    let mut means = Tensor::zeros(k, d);
    let mut variances = Tensor::zeros(k, d);
    for (c, &n) in chosen.iter().enumerate() {
        for j in 0..d {
            means.set(c, j, features.descriptor(n)[j]);
            variances.set(c, j, global_var[j]);
        }
    }
    GmmParams {
        weights: vec![1.0 / k as f64; k],
        means,
        variances,
    }
}

/// Component with the highest total responsibility mass; ties go to the
/// lowest index.
pub fn select_component(gamma: &Responsibilities) -> usize {
    component_order(gamma)[0]
}

/// Canonical component order: descending responsibility mass, ties by
/// original index. EM leaves component labels arbitrary; listing embeddings
/// in this order is what lets an index-matched cross-modal comparison pair
/// corresponding components (the dominant one first).
pub fn component_order(gamma: &Responsibilities) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gamma.components()).collect();
    let masses: Vec<f64> = order.iter().map(|&k| gamma.column_mass(k)).collect();
    order.sort_by(|&a, &b| {
        masses[b]
            .partial_cmp(&masses[a])
            .expect("responsibility masses are finite")
            .then(a.cmp(&b))
    });
    order
}

/// Normalized prototype of the dominant component plus all per-component
/// embeddings in canonical (mass-descending) order; the prototype is the
/// first entry and `component` records its original index.
pub fn build_prototype(params: &GmmParams, gamma: &Responsibilities) -> Result<PrototypeVector> {
    if gamma.components() != params.components() {
        return Err(Error::ShapeMismatch {
            op: "build_prototype",
            left: [params.components(), params.dim()],
            right: [gamma.descriptors(), gamma.components()],
        });
    }
    let order = component_order(gamma);
    let component_embeddings: Vec<Vec<f64>> = order
        .iter()
        .map(|&k| params.component_embedding(k))
        .collect();
    Ok(PrototypeVector {
        component: order[0],
        vector: component_embeddings[0].clone(),
        component_embeddings,
    })
}

/// Cross-modal joint feature: the image prototype concatenated with the
/// text prototype.
pub fn joint_feature(image: &PrototypeVector, text: &PrototypeVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(image.vector.len() + text.vector.len());
    out.extend_from_slice(&image.vector);
    out.extend_from_slice(&text.vector);
    out
}

/// Differentiable mixture parameters rebuilt on the tape from frozen
/// responsibilities: weights stay constants, means and variances are nodes.
#[derive(Debug, Clone)]
pub struct SoftGmm {
    pub weights: Vec<f64>,
    pub means: Vec<NodeId>,
    pub variances: Vec<NodeId>,
}

/// Recompute the M-step on the tape so losses backpropagate into the
/// features. `gamma` must come from a converged [`fit_em`] on the same
/// feature values and is treated as a constant.
pub fn soft_refit(
    tape: &mut Tape,
    features_node: NodeId,
    gamma: &Responsibilities,
) -> Result<SoftGmm> {
    let value = tape.value(features_node).clone();
    let l = value.rows();
    if gamma.descriptors() != l {
        return Err(Error::ShapeMismatch {
            op: "soft_refit",
            left: value.shape(),
            right: [gamma.descriptors(), gamma.components()],
        });
    }
    let feature_set = LocalFeatureSet::new(Modality::Image, value)?;
    let (plain, reinitialized) = m_step_detailed(&feature_set, gamma)?;

    let k = gamma.components();
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for c in 0..k {
        if reinitialized.contains(&c) {
            // A collapsed component carries no gradient; its refit values are
            // the plain M-step reinitialization.
            means.push(tape.constant(Tensor::row(plain.mean(c))));
            variances.push(tape.constant(Tensor::row(plain.variance(c))));
            continue;
        }
        let column = gamma.column(c);
        let mean = tape.weighted_row_mean(features_node, &column)?;
        let tiled = tape.tile_rows(mean, l)?;
        let diff = tape.sub(features_node, tiled)?;
        let sq = tape.mul(diff, diff)?;
        let raw_var = tape.weighted_row_mean(sq, &column)?;
        variances.push(floor_variance(tape, raw_var)?);
        means.push(mean);
    }
    Ok(SoftGmm {
        weights: plain.weights().to_vec(),
        means,
        variances,
    })
}

/// Clamp variances at the floor; the clamp mask is taken from the forward
/// values and carries no gradient on floored entries.
fn floor_variance(tape: &mut Tape, raw: NodeId) -> Result<NodeId> {
    let value = tape.value(raw).clone();
    let keep: Vec<f64> = value
        .data()
        .iter()
        .map(|v| if *v < VARIANCE_FLOOR { 0.0 } else { 1.0 })
        .collect();
    if keep.iter().all(|k| *k == 1.0) {
        return Ok(raw);
    }
    let floor: Vec<f64> = keep
        .iter()
        .map(|k| if *k == 0.0 { VARIANCE_FLOOR } else { 0.0 })
        .collect();
    let keep_node = tape.constant(Tensor::from_vec(1, value.cols(), keep)?);
    let floor_node = tape.constant(Tensor::from_vec(1, value.cols(), floor)?);
    let kept = tape.mul(raw, keep_node)?;
    tape.add(kept, floor_node)
}

/// Unit-norm `[mean, std, weight]` embedding of every component, on the tape.
pub fn component_embeddings(tape: &mut Tape, soft: &SoftGmm) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(soft.means.len());
    for k in 0..soft.means.len() {
        let std = tape.sqrt_positive(soft.variances[k]);
        let weight = tape.constant(Tensor::scalar(soft.weights[k]));
        let raw = tape.concat_cols(&[soft.means[k], std, weight])?;
        out.push(tape.l2_normalize_rows(raw)?);
    }
    Ok(out)
}
