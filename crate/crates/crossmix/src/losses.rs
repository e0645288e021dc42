//! Training losses over batches of component embeddings and prototypes.
//!
//! Three terms: a multi-positive contrastive loss where one component of a
//! sample anchors against its sibling components (positives) and other
//! samples' components (negatives); a cross-modal alignment term pushing
//! same-index image/text components together and different-index ones apart;
//! and a relative-distance-preservation term tying the text-side similarity
//! matrix to the image-side one on high-confidence pairs. Every term is
//! mean-reduced so the weights stay batch-size independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::tape::{NodeId, Tape};
use crate::kernel::tensor::Tensor;
use crate::Modality;

/// One aligned image-text sample: per-modality component embeddings, the
/// selected prototypes, and the class label.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub image_components: Vec<NodeId>,
    pub text_components: Vec<NodeId>,
    pub image_prototype: NodeId,
    pub text_prototype: NodeId,
    pub label: u32,
}

/// N aligned samples with validated unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct PairBatch {
    samples: Vec<PairSample>,
    k_image: usize,
    k_text: usize,
    dim: usize,
}

impl PairBatch {
    /// Validate sample count, component counts, and unit norms against the
    /// recorded node values.
    pub fn new(tape: &Tape, samples: Vec<PairSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::BatchTooSmall {
                size: samples.len(),
            });
        }
        let k_image = samples[0].image_components.len();
        let k_text = samples[0].text_components.len();
        let dim = tape.value(samples[0].image_components[0]).cols();
        for (i, sample) in samples.iter().enumerate() {
            if sample.image_components.len() != k_image
                || sample.text_components.len() != k_text
            {
                return Err(Error::InvalidConfig {
                    field: "batch",
                    reason: format!("sample {i} has a different component count"),
                });
            }
            let nodes = sample
                .image_components
                .iter()
                .chain(&sample.text_components)
                .chain([&sample.image_prototype, &sample.text_prototype]);
            for &node in nodes {
                let value = tape.value(node);
                if value.rows() != 1 || value.cols() != dim {
                    return Err(Error::InvalidConfig {
                        field: "batch",
                        reason: format!(
                            "sample {i}: embedding shape {:?} (expected 1x{dim})",
                            value.shape()
                        ),
                    });
                }
                let norm = value.norm();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::NotUnitNorm { sample: i, norm });
                }
            }
        }
        Ok(PairBatch {
            samples,
            k_image,
            k_text,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PairSample] {
        &self.samples
    }

    pub fn components(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.k_image,
            Modality::Text => self.k_text,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn component(&self, i: usize, k: usize, modality: Modality) -> NodeId {
        match modality {
            Modality::Image => self.samples[i].image_components[k],
            Modality::Text => self.samples[i].text_components[k],
        }
    }

    fn prototype(&self, i: usize, modality: Modality) -> NodeId {
        match modality {
            Modality::Image => self.samples[i].image_prototype,
            Modality::Text => self.samples[i].text_prototype,
        }
    }
}

/// Temperature, anchor seed, and optional negative subsampling for the
/// contrastive loss.
#[derive(Debug, Clone)]
pub struct ContrastConfig {
    /// Similarity scaling; must be positive.
    pub temperature: f64,
    /// Seed for per-batch anchor (and negative subset) draws.
    pub anchor_seed: u64,
    /// Negatives per anchor; `None` uses every component of the other
    /// samples.
    pub negatives_per_anchor: Option<usize>,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.1,
            anchor_seed: 0,
            negatives_per_anchor: None,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig {
                field: "temperature",
                reason: format!("must be positive, got {}", self.temperature),
            });
        }
        if self.negatives_per_anchor == Some(0) {
            return Err(Error::InvalidConfig {
                field: "negatives_per_anchor",
                reason: "need at least one negative".to_string(),
            });
        }
        Ok(())
    }
}

/// Term weights: `alpha` scales cross-modal alignment, `lambda` scales the
/// distance-preservation term, `theta` is its confidence threshold.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            lambda: 1.0,
            theta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::InvalidConfig {
                field: "loss_weights",
                reason: "alpha and lambda must be non-negative".to_string(),
            });
        }
        if !(self.theta > -1.0 && self.theta < 1.0) {
            return Err(Error::InvalidConfig {
                field: "theta",
                reason: format!("threshold must lie in (-1, 1), got {}", self.theta),
            });
        }
        Ok(())
    }
}

/// NxN intra-modal cosine similarity matrix over prototypes.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityMatrix {
    node: NodeId,
    n: usize,
}

impl SimilarityMatrix {
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Per-term values of one loss evaluation; the raw terms are unweighted.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub ence_image: f64,
    pub ence_text: f64,
    pub cross: f64,
    pub rdp: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombine the reported terms; matches `total` to float precision.
    pub fn weighted_sum(&self) -> f64 {
        self.ence_image + self.ence_text + self.alpha * self.cross + self.lambda * self.rdp
    }
}

/// Draw one anchor component per sample. Image and text draws decorrelate
/// through a modality tag mixed into the stream seed.
pub fn draw_anchors(cfg: &ContrastConfig, batch: &PairBatch, modality: Modality) -> Vec<usize> {
    let mut rng = anchor_rng(cfg, modality);
    let k = batch.components(modality);
    (0..batch.len()).map(|_| rng.random_range(0..k)).collect()
}

fn anchor_rng(cfg: &ContrastConfig, modality: Modality) -> ChaCha8Rng {
    let tag = match modality {
        Modality::Image => 0x696d_6167_6500_0000u64,
        Modality::Text => 0x7465_7874_0000_0000u64,
    };
    ChaCha8Rng::seed_from_u64(cfg.anchor_seed ^ tag)
}

/// Multi-positive contrastive loss with seeded anchors.
pub fn ence_loss(
    tape: &mut Tape,
    batch: &PairBatch,
    cfg: &ContrastConfig,
    modality: Modality,
) -> Result<NodeId> {
    cfg.validate()?;
    let anchors = draw_anchors(cfg, batch, modality);
    let negatives = draw_negative_sets(cfg, batch, modality, &anchors);
    ence_loss_at(
        tape,
        batch,
        modality,
        cfg.temperature,
        &anchors,
        negatives.as_deref(),
    )
}

/// Optional per-sample negative subsets, drawn without replacement from the
/// other samples' components.
fn draw_negative_sets(
    cfg: &ContrastConfig,
    batch: &PairBatch,
    modality: Modality,
    anchors: &[usize],
) -> Option<Vec<Vec<(usize, usize)>>> {
    let n_neg = cfg.negatives_per_anchor?;
    let mut rng = anchor_rng(cfg, modality);
    // Skip the anchor draws so subsets do not reuse their randomness.
    for _ in anchors {
        rng.random_range(0..batch.components(modality).max(1));
    }
    let k = batch.components(modality);
    let sets = (0..batch.len())
        .map(|i| {
            let mut pool: Vec<(usize, usize)> = (0..batch.len())
                .filter(|j| *j != i)
                .flat_map(|j| (0..k).map(move |c| (j, c)))
                .collect();
            let take = n_neg.min(pool.len());
            for t in 0..take {
                let swap = t + rng.random_range(0..pool.len() - t);
                pool.swap(t, swap);
            }
            pool.truncate(take);
            pool
        })
        .collect();
    Some(sets)
}

/// Contrastive loss with explicit anchors (and, optionally, explicit
/// negative sets): for each sample the other `K - 1` components of the same
/// sample are positives and components of the other samples are negatives.
/// Each per-positive softmax is computed in the log domain.
pub fn ence_loss_at(
    tape: &mut Tape,
    batch: &PairBatch,
    modality: Modality,
    temperature: f64,
    anchors: &[usize],
    negative_sets: Option<&[Vec<(usize, usize)>]>,
) -> Result<NodeId> {
    let n = batch.len();
    let k = batch.components(modality);
    if k < 2 {
        return Err(Error::NeedsMultipleComponents { modality });
    }
    if anchors.len() != n {
        return Err(Error::InvalidConfig {
            field: "anchors",
            reason: format!("need one anchor per sample, got {}", anchors.len()),
        });
    }

    // All components of the modality, sample-major: entry (i, k) at i*k + k.
    let stack_parts: Vec<NodeId> = (0..n)
        .flat_map(|i| (0..k).map(move |c| batch.component(i, c, modality)))
        .collect();
    let stack = tape.concat_rows(&stack_parts)?;

    let mut terms: Vec<NodeId> = Vec::with_capacity(n * (k - 1));
    for (i, &anchor) in anchors.iter().enumerate() {
        let anchor_node = batch.component(i, anchor, modality);
        let sims = tape.cosine_rows(anchor_node, stack)?;
        let scaled = tape.scalar_mul(sims, 1.0 / temperature);

        let mut negative_mask = vec![false; n * k];
        match negative_sets {
            Some(sets) => {
                for &(j, c) in &sets[i] {
                    negative_mask[j * k + c] = true;
                }
            }
            None => {
                for j in 0..n {
                    if j != i {
                        for c in 0..k {
                            negative_mask[j * k + c] = true;
                        }
                    }
                }
            }
        }

        for positive in 0..k {
            if positive == anchor {
                continue;
            }
            let mut denom_mask = negative_mask.clone();
            denom_mask[i * k + positive] = true;
            let mut pos_mask = vec![false; n * k];
            pos_mask[i * k + positive] = true;

            let log_denom = tape.masked_log_sum_exp(scaled, &denom_mask)?;
            let pos_score = tape.masked_log_sum_exp(scaled, &pos_mask)?;
            terms.push(tape.sub(log_denom, pos_score)?);
        }
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scalar_mul(total, 1.0 / (n as f64 * (k - 1) as f64)))
}

/// Cross-modal component alignment: the alignment indicator pairs the k-th
/// image component with the k-th text component (components arrive in
/// canonical mass order), and the loss is the mean squared distance between
/// the members of each selected pair, over `N * min(K_v, K_t)` pairs.
/// Unmatched index pairs contribute nothing.
pub fn cross_modal_loss(tape: &mut Tape, batch: &PairBatch) -> Result<NodeId> {
    let n = batch.len();
    let pairs = batch.k_image.min(batch.k_text);

    let mut terms: Vec<NodeId> = Vec::with_capacity(n * pairs);
    for i in 0..n {
        for k in 0..pairs {
            let v = batch.samples[i].image_components[k];
            let t = batch.samples[i].text_components[k];
            terms.push(tape.squared_distance(v, t)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scalar_mul(total, 1.0 / (n * pairs) as f64))
}

/// NxN cosine similarities between the prototypes of one modality.
pub fn similarity_matrix(
    tape: &mut Tape,
    batch: &PairBatch,
    modality: Modality,
) -> Result<SimilarityMatrix> {
    let protos: Vec<NodeId> = (0..batch.len())
        .map(|i| batch.prototype(i, modality))
        .collect();
    let stacked = tape.concat_rows(&protos)?;
    let node = tape.cosine_rows(stacked, stacked)?;
    Ok(SimilarityMatrix {
        node,
        n: batch.len(),
    })
}

/// Distance-preservation loss over high-confidence pairs: mean squared
/// difference of the two similarity matrices restricted to entries where the
/// image-side similarity exceeds `theta`. The mask comes from the image-side
/// values only and carries no gradient; an empty mask yields 0.
pub fn rdp_loss(
    tape: &mut Tape,
    image_sims: &SimilarityMatrix,
    text_sims: &SimilarityMatrix,
    theta: f64,
) -> Result<NodeId> {
    let (dv, dt) = (image_sims.node, text_sims.node);
    if tape.value(dv).shape() != tape.value(dt).shape() {
        return Err(Error::ShapeMismatch {
            op: "rdp_loss",
            left: tape.value(dv).shape(),
            right: tape.value(dt).shape(),
        });
    }
    let mask: Vec<bool> = tape.value(dv).data().iter().map(|v| *v > theta).collect();
    let diff = tape.sub(dv, dt)?;
    let sq = tape.mul(diff, diff)?;
    tape.masked_mean(sq, &mask)
}

/// Weighted sum of all terms with a per-term breakdown.
///
/// The contrastive term sums both modalities. A modality with a single
/// component has no sibling positives and contributes zero there, which is
/// what the mean-pooled ablation relies on.
pub fn total_loss(
    tape: &mut Tape,
    batch: &PairBatch,
    cfg: &ContrastConfig,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    cfg.validate()?;
    weights.validate()?;

    let mut ence_nodes = Vec::new();
    for modality in [Modality::Image, Modality::Text] {
        if batch.components(modality) >= 2 {
            ence_nodes.push(ence_loss(tape, batch, cfg, modality)?);
        } else {
            ence_nodes.push(tape.constant(Tensor::scalar(0.0)));
        }
    }
    let cross = cross_modal_loss(tape, batch)?;
    let image_sims = similarity_matrix(tape, batch, Modality::Image)?;
    let text_sims = similarity_matrix(tape, batch, Modality::Text)?;
    let rdp = rdp_loss(tape, &image_sims, &text_sims, weights.theta)?;

    let ence_sum = tape.add(ence_nodes[0], ence_nodes[1])?;
    let weighted_cross = tape.scalar_mul(cross, weights.alpha);
    let weighted_rdp = tape.scalar_mul(rdp, weights.lambda);
    let partial = tape.add(ence_sum, weighted_cross)?;
    let total = tape.add(partial, weighted_rdp)?;

    let breakdown = LossBreakdown {
        ence_image: tape.scalar_value(ence_nodes[0])?,
        ence_text: tape.scalar_value(ence_nodes[1])?,
        cross: tape.scalar_value(cross)?,
        rdp: tape.scalar_value(rdp)?,
        alpha: weights.alpha,
        lambda: weights.lambda,
        total: tape.scalar_value(total)?,
    };
    Ok((total, breakdown))
}
