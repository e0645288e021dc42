//! Two-stage training of the modality projections.
//!
//! Stage one minimizes the contrastive and cross-modal terms with the
//! distance-preservation weight forced to zero; stage two turns it on. Every
//! stochastic choice derives from the base seed plus integer tags (epoch,
//! sample id, purpose), so fixed-seed runs are bit-identical and a resumed
//! checkpoint continues exactly where an uninterrupted run would be.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, EpisodeSplit, SampleRecord};
use crate::error::{Error, Result};
use crate::gmm::{self, PrototypeVector};
use crate::kernel::adam::AdamState;
use crate::kernel::tape::{NodeId, Tape};
use crate::kernel::tensor::Tensor;
use crate::losses::{self, ContrastConfig, LossBreakdown, LossWeights, PairBatch, PairSample};
use crate::Modality;

/// Gradient clipping threshold on the joint norm of both projection
/// gradients; exp(s/tau) with a small tau can spike early steps.
const CLIP_NORM: f64 = 10.0;

/// Learning-rate factor applied while fine-tuning on support samples.
const FINETUNE_LR_FACTOR: f64 = 0.1;

mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const EM: u64 = 3;
    pub const ANCHOR: u64 = 4;
    pub const EMBED: u64 = 5;
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed derivation: base seed plus integer context tags.
pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x9e37_79b9_7f4a_7c15);
    for &p in parts {
        h = mix(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ p);
    }
    h
}

/// Full training configuration; all defaults are materialized here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Shared latent dimension d.
    pub latent_dim: usize,
    /// Mixture components on the image side (K_v).
    pub image_components: usize,
    /// Mixture components on the text side (K_t).
    pub text_components: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub theta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_epochs: u32,
    pub stage2_epochs: u32,
    pub finetune_epochs: u32,
    pub seed: u64,
    /// Ablation: replace the per-sample mixture by a single mean-pooled,
    /// normalized descriptor; the contrastive term then has no sibling
    /// positives and drops out.
    pub disable_gmm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 16,
            image_components: 3,
            text_components: 3,
            temperature: 0.1,
            alpha: 1.0,
            lambda: 1.0,
            theta: 0.5,
            learning_rate: 1e-4,
            batch_size: 8,
            stage1_epochs: 30,
            stage2_epochs: 30,
            finetune_epochs: 20,
            seed: 0,
            disable_gmm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig {
                field: "latent_dim",
                reason: "must be positive".to_string(),
            });
        }
        if self.image_components == 0 || self.text_components == 0 {
            return Err(Error::InvalidConfig {
                field: "components",
                reason: "component counts must be positive".to_string(),
            });
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig {
                field: "batch_size",
                reason: "a contrastive batch needs at least 2 samples".to_string(),
            });
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig {
                field: "learning_rate",
                reason: "must be positive".to_string(),
            });
        }
        self.contrast_config(0).validate()?;
        self.loss_weights(true).validate()
    }

    pub fn total_epochs(&self) -> u32 {
        self.stage1_epochs + self.stage2_epochs
    }

    fn contrast_config(&self, anchor_seed: u64) -> ContrastConfig {
        ContrastConfig {
            temperature: self.temperature,
            anchor_seed,
            negatives_per_anchor: None,
        }
    }

    /// Stage-two weights, or stage-one weights with the RDP term zeroed.
    fn loss_weights(&self, stage_two: bool) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda: if stage_two { self.lambda } else { 0.0 },
            theta: self.theta,
        }
    }
}

/// Learnable projections plus optimizer state and the epoch cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub image_projection: Tensor, // d_raw_v x d
    pub text_projection: Tensor,  // d_raw_t x d
    pub image_adam: AdamState,
    pub text_adam: AdamState,
    pub epoch: u32,
}

/// Per-epoch mean loss terms and wall time.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub stage: u8,
    pub lambda: f64,
    pub ence_image: f64,
    pub ence_text: f64,
    pub cross: f64,
    pub rdp: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

/// Scaled-uniform (fan-in) initialization of both projections.
pub fn init(config: &TrainConfig, image_dim: usize, text_dim: usize) -> Result<ModelState> {
    config.validate()?;
    if image_dim == 0 || text_dim == 0 {
        return Err(Error::InvalidConfig {
            field: "raw_dims",
            reason: "raw descriptor dimensions must be positive".to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[tag::INIT]));
    let mut projection = |rows: usize| {
        let bound = (6.0 / rows as f64).sqrt();
        let data: Vec<f64> = (0..rows * config.latent_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor::from_vec(rows, config.latent_dim, data)
    };
    let image_projection = projection(image_dim)?;
    let text_projection = projection(text_dim)?;
    Ok(ModelState {
        image_adam: AdamState::new(config.learning_rate, image_dim, config.latent_dim),
        text_adam: AdamState::new(config.learning_rate, text_dim, config.latent_dim),
        config: config.clone(),
        image_projection,
        text_projection,
        epoch: 0,
    })
}

/// Train from scratch for the configured stage-one plus stage-two epochs.
pub fn train(
    config: &TrainConfig,
    records: &[SampleRecord],
) -> Result<(ModelState, Vec<EpochMetrics>)> {
    let first = records.first().ok_or(Error::InvalidConfig {
        field: "records",
        reason: "training needs at least one record".to_string(),
    })?;
    let mut state = init(config, first.image.cols(), first.text.cols())?;
    let metrics = train_epochs(&mut state, records, config.total_epochs())?;
    Ok((state, metrics))
}

/// Run exactly `epochs` more epochs from the state's epoch cursor; the
/// stage (and therefore the RDP weight) follows the cursor.
pub fn train_epochs(
    state: &mut ModelState,
    records: &[SampleRecord],
    epochs: u32,
) -> Result<Vec<EpochMetrics>> {
    if records.len() < 2 {
        return Err(Error::InvalidConfig {
            field: "records",
            reason: format!("need at least 2 records to form batches, got {}", records.len()),
        });
    }
    let mut metrics = Vec::with_capacity(epochs as usize);
    for _ in 0..epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let stage_two = epoch >= state.config.stage1_epochs;
        let weights = state.config.loss_weights(stage_two);
        let batch_size = state.config.batch_size.min(records.len()).max(2);
        let batches = make_batches(
            records.len(),
            batch_size,
            derive_seed(state.config.seed, &[tag::SHUFFLE, epoch as u64]),
        )?;

        let mut sums = [0.0f64; 5];
        for (batch_idx, batch) in batches.iter().enumerate() {
            let breakdown = step(state, records, batch, epoch, batch_idx, &weights)?;
            sums[0] += breakdown.ence_image;
            sums[1] += breakdown.ence_text;
            sums[2] += breakdown.cross;
            sums[3] += breakdown.rdp;
            sums[4] += breakdown.total;
        }
        let count = batches.len().max(1) as f64;
        metrics.push(EpochMetrics {
            epoch,
            stage: if stage_two { 2 } else { 1 },
            lambda: weights.lambda,
            ence_image: sums[0] / count,
            ence_text: sums[1] / count,
            cross: sums[2] / count,
            rdp: sums[3] / count,
            total: sums[4] / count,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        state.epoch += 1;
    }
    Ok(metrics)
}

/// One optimization step: project, fit mixtures, rebuild differentiably,
/// evaluate the loss, backpropagate, clip, and update.
fn step(
    state: &mut ModelState,
    records: &[SampleRecord],
    batch: &[usize],
    epoch: u32,
    batch_idx: usize,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let w_image = tape.leaf(state.image_projection.clone());
    let w_text = tape.leaf(state.text_projection.clone());

    let mut samples = Vec::with_capacity(batch.len());
    for &idx in batch {
        let record = &records[idx];
        let (image_components, image_prototype) =
            embed_on_tape(&mut tape, state, record, Modality::Image, w_image, epoch)?;
        let (text_components, text_prototype) =
            embed_on_tape(&mut tape, state, record, Modality::Text, w_text, epoch)?;
        samples.push(PairSample {
            image_components,
            text_components,
            image_prototype,
            text_prototype,
            label: record.label,
        });
    }
    let pair_batch = PairBatch::new(&tape, samples)?;
    let cfg = state.config.contrast_config(derive_seed(
        state.config.seed,
        &[tag::ANCHOR, epoch as u64, batch_idx as u64],
    ));
    let (loss, breakdown) = losses::total_loss(&mut tape, &pair_batch, &cfg, weights)?;

    for (term, value) in [
        ("ence_image", breakdown.ence_image),
        ("ence_text", breakdown.ence_text),
        ("cross", breakdown.cross),
        ("rdp", breakdown.rdp),
        ("total", breakdown.total),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: batch_idx,
                term,
            });
        }
    }

    let grads = tape.backward(loss)?;
    let mut grad_image = grads.get(w_image).clone();
    let mut grad_text = grads.get(w_text).clone();
    let joint_norm = (grad_image.norm().powi(2) + grad_text.norm().powi(2)).sqrt();
    if joint_norm > CLIP_NORM {
        let scale = CLIP_NORM / joint_norm;
        for g in grad_image.data_mut() {
            *g *= scale;
        }
        for g in grad_text.data_mut() {
            *g *= scale;
        }
    }
    state
        .image_adam
        .apply(&mut state.image_projection, &grad_image, "image_projection")?;
    state
        .text_adam
        .apply(&mut state.text_projection, &grad_text, "text_projection")?;
    Ok(breakdown)
}

/// Project one record's descriptors and build its component embeddings and
/// prototype on the tape.
fn embed_on_tape(
    tape: &mut Tape,
    state: &ModelState,
    record: &SampleRecord,
    modality: Modality,
    projection: NodeId,
    epoch: u32,
) -> Result<(Vec<NodeId>, NodeId)> {
    let raw = match modality {
        Modality::Image => record.image.clone(),
        Modality::Text => record.text.clone(),
    };
    let l = raw.rows();
    let raw_node = tape.constant(raw);
    let projected = tape.matmul(raw_node, projection)?;

    if state.config.disable_gmm {
        // Mean-pooled baseline: one normalized global descriptor.
        let pooled = tape.weighted_row_mean(projected, &vec![1.0; l])?;
        let proto = tape.l2_normalize_rows(pooled)?;
        return Ok((vec![proto], proto));
    }

    let k = match modality {
        Modality::Image => state.config.image_components,
        Modality::Text => state.config.text_components,
    };
    let features = gmm::LocalFeatureSet::new(modality, tape.value(projected).clone())?;
    let em_seed = derive_seed(
        state.config.seed,
        &[tag::EM, epoch as u64, record.id, modality as u64],
    );
    let fit = gmm::fit_em(&features, k, em_seed)?;
    let soft = gmm::soft_refit(tape, projected, &fit.responsibilities)?;
    let embeddings = gmm::component_embeddings(tape, &soft)?;
    // Canonical mass order, matching the inference path: the prototype is
    // the dominant component and sits first.
    let components: Vec<NodeId> = gmm::component_order(&fit.responsibilities)
        .into_iter()
        .map(|k| embeddings[k])
        .collect();
    Ok((components.clone(), components[0]))
}

/// Continue the full objective on the support samples only, at a reduced
/// learning rate. Requires a populated support set (k >= 1).
pub fn finetune(
    state: &mut ModelState,
    records: &[SampleRecord],
    split: &EpisodeSplit,
) -> Result<Vec<EpochMetrics>> {
    if split.k == 0 {
        return Err(Error::FinetuneWithoutSupport);
    }
    if state.config.finetune_epochs == 0 {
        return Ok(Vec::new());
    }
    let support_ids = split.support_ids();
    let support: Vec<SampleRecord> = records
        .iter()
        .filter(|r| support_ids.contains(&r.id))
        .cloned()
        .collect();
    if support.len() < 2 {
        return Err(Error::InvalidConfig {
            field: "support",
            reason: format!("need at least 2 support samples, got {}", support.len()),
        });
    }
    let finetune_lr = state.config.learning_rate * FINETUNE_LR_FACTOR;
    state.image_adam.set_learning_rate(finetune_lr);
    state.text_adam.set_learning_rate(finetune_lr);
    train_epochs(state, &support, state.config.finetune_epochs)
}

/// Deterministic inference embedding of one record (no tape).
pub fn embed(state: &ModelState, record: &SampleRecord) -> Result<SampleEmbedding> {
    let image = embed_modality(state, record, Modality::Image)?;
    let text = embed_modality(state, record, Modality::Text)?;
    Ok(SampleEmbedding {
        id: record.id,
        label: record.label,
        image,
        text,
    })
}

/// Prototype and component embeddings for both modalities of one record.
#[derive(Debug, Clone)]
pub struct SampleEmbedding {
    pub id: u64,
    pub label: u32,
    pub image: PrototypeVector,
    pub text: PrototypeVector,
}

fn embed_modality(
    state: &ModelState,
    record: &SampleRecord,
    modality: Modality,
) -> Result<PrototypeVector> {
    let (raw, projection, k) = match modality {
        Modality::Image => (
            &record.image,
            &state.image_projection,
            state.config.image_components,
        ),
        Modality::Text => (
            &record.text,
            &state.text_projection,
            state.config.text_components,
        ),
    };
    if raw.cols() != projection.rows() {
        return Err(Error::DimensionMismatch {
            expected: projection.rows(),
            got: raw.cols(),
        });
    }
    let mut projected = Tensor::zeros(raw.rows(), projection.cols());
    for r in 0..raw.rows() {
        for c in 0..projection.cols() {
            let mut acc = 0.0;
            for j in 0..raw.cols() {
                acc += raw.get(r, j) * projection.get(j, c);
            }
            projected.set(r, c, acc);
        }
    }

    if state.config.disable_gmm {
        let mut pooled = vec![0.0; projected.cols()];
        for r in 0..projected.rows() {
            for (j, p) in pooled.iter_mut().enumerate() {
                *p += projected.get(r, j);
            }
        }
        for p in pooled.iter_mut() {
            *p /= projected.rows() as f64;
        }
        let norm = crate::kernel::tensor::norm(&pooled);
        if norm <= 1e-30 {
            return Err(Error::DegenerateNorm { norm });
        }
        for p in pooled.iter_mut() {
            *p /= norm;
        }
        return Ok(PrototypeVector {
            component: 0,
            vector: pooled.clone(),
            component_embeddings: vec![pooled],
        });
    }

    let features = gmm::LocalFeatureSet::new(modality, projected)?;
    let em_seed = derive_seed(
        state.config.seed,
        &[tag::EMBED, record.id, modality as u64],
    );
    let fit = gmm::fit_em(&features, k, em_seed)?;
    gmm::build_prototype(&fit.params, &fit.responsibilities)
}

// --- checkpointing ---

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize the full state: config echo, weights, optimizer moments, and
/// the epoch/seed cursor that drives every derived random stream.
pub fn save_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);

    let c = &state.config;
    push_u32(&mut buf, c.latent_dim as u32);
    push_u32(&mut buf, c.image_components as u32);
    push_u32(&mut buf, c.text_components as u32);
    push_f64(&mut buf, c.temperature);
    push_f64(&mut buf, c.alpha);
    push_f64(&mut buf, c.lambda);
    push_f64(&mut buf, c.theta);
    push_f64(&mut buf, c.learning_rate);
    push_u32(&mut buf, c.batch_size as u32);
    push_u32(&mut buf, c.stage1_epochs);
    push_u32(&mut buf, c.stage2_epochs);
    push_u32(&mut buf, c.finetune_epochs);
    push_u64(&mut buf, c.seed);
    buf.push(c.disable_gmm as u8);

    push_u32(&mut buf, state.image_projection.rows() as u32);
    push_u32(&mut buf, state.text_projection.rows() as u32);
    push_u32(&mut buf, state.epoch);

    push_tensor(&mut buf, &state.image_projection);
    push_tensor(&mut buf, &state.text_projection);
    push_adam(&mut buf, &state.image_adam);
    push_adam(&mut buf, &state.text_adam);
    buf
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(Error::BadMagic { found });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = TrainConfig {
        latent_dim: r.u32()? as usize,
        image_components: r.u32()? as usize,
        text_components: r.u32()? as usize,
        temperature: r.f64()?,
        alpha: r.f64()?,
        lambda: r.f64()?,
        theta: r.f64()?,
        learning_rate: r.f64()?,
        batch_size: r.u32()? as usize,
        stage1_epochs: r.u32()?,
        stage2_epochs: r.u32()?,
        finetune_epochs: r.u32()?,
        seed: r.u64()?,
        disable_gmm: r.take(1)?[0] != 0,
    };
    let image_rows = r.u32()? as usize;
    let text_rows = r.u32()? as usize;
    let epoch = r.u32()?;
    let image_projection = r.tensor(image_rows, config.latent_dim)?;
    let text_projection = r.tensor(text_rows, config.latent_dim)?;
    let image_adam = r.adam(image_rows, config.latent_dim)?;
    let text_adam = r.adam(text_rows, config.latent_dim)?;
    if r.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt {
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(ModelState {
        config,
        image_projection,
        text_projection,
        image_adam,
        text_adam,
        epoch,
    })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        push_f64(buf, *v);
    }
}

fn push_adam(buf: &mut Vec<u8>, adam: &AdamState) {
    push_f64(buf, adam.learning_rate());
    push_u64(buf, adam.step_count());
    push_tensor(buf, adam.first_moment());
    push_tensor(buf, adam.second_moment());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt {
                reason: format!(
                    "expected {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Tensor::from_vec(rows, cols, data)
    }

    fn adam(&mut self, rows: usize, cols: usize) -> Result<AdamState> {
        let lr = self.f64()?;
        let step = self.u64()?;
        let m = self.tensor(rows, cols)?;
        let v = self.tensor(rows, cols)?;
        Ok(AdamState::from_parts(lr, step, m, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_episode, SyntheticSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 4,
            batch_size: 4,
            stage1_epochs: 2,
            stage2_epochs: 2,
            finetune_epochs: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_records(seed: u64) -> Vec<crate::data::SampleRecord> {
        generate_synthetic(&SyntheticSpec {
            classes: 3,
            peaks_per_class: 2,
            samples_per_class: 4,
            latent_dim: 4,
            image_descriptors: 6,
            text_descriptors: 6,
            image_dim: 5,
            text_dim: 4,
            class_spread: 1.0,
            coupling_noise: 0.05,
            image_noise: 0.2,
            text_noise: 0.2,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let records = tiny_records(1);
        let config = tiny_config();
        let (state_a, metrics_a) = train(&config, &records).unwrap();
        let (state_b, metrics_b) = train(&config, &records).unwrap();
        assert_eq!(state_a, state_b);
        for (a, b) in metrics_a.iter().zip(&metrics_b) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn lambda_has_no_effect_during_stage_one() {
        let records = tiny_records(2);
        let stage1_only = TrainConfig {
            stage2_epochs: 0,
            lambda: 123.0,
            ..tiny_config()
        };
        let zeroed = TrainConfig {
            lambda: 0.0,
            ..stage1_only.clone()
        };
        let (state_a, metrics_a) = train(&stage1_only, &records).unwrap();
        let (state_b, _) = train(&zeroed, &records).unwrap();
        assert_eq!(state_a.image_projection, state_b.image_projection);
        assert_eq!(state_a.text_projection, state_b.text_projection);
        assert!(metrics_a.iter().all(|m| m.stage == 1 && m.lambda == 0.0));
    }

    #[test]
    fn degenerate_config_is_pure_contrastive_training() {
        let records = tiny_records(3);
        let config = TrainConfig {
            stage2_epochs: 0,
            alpha: 0.0,
            ..tiny_config()
        };
        let (_, metrics) = train(&config, &records).unwrap();
        for m in &metrics {
            assert!((m.total - (m.ence_image + m.ence_text)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_decreases_on_noiseless_data() {
        let records = generate_synthetic(&SyntheticSpec {
            classes: 3,
            peaks_per_class: 1,
            samples_per_class: 6,
            latent_dim: 4,
            image_descriptors: 4,
            text_descriptors: 4,
            image_dim: 5,
            text_dim: 5,
            class_spread: 1.0,
            coupling_noise: 0.0,
            image_noise: 0.0,
            text_noise: 0.0,
            seed: 4,
        })
        .unwrap();
        // Full-batch so the per-epoch loss is a deterministic function of
        // the weights rather than of the shuffle.
        let config = TrainConfig {
            stage1_epochs: 10,
            stage2_epochs: 0,
            learning_rate: 1e-3,
            batch_size: records.len(),
            ..tiny_config()
        };
        let (_, metrics) = train(&config, &records).unwrap();
        for window in metrics.windows(2) {
            assert!(
                window[1].total <= window[0].total * 1.05,
                "epoch {} rose too much: {} -> {}",
                window[1].epoch,
                window[0].total,
                window[1].total
            );
        }
        assert!(metrics.last().unwrap().total < metrics[0].total);
    }

    #[test]
    fn weight_shapes_never_change() {
        let records = tiny_records(5);
        let config = tiny_config();
        let (state, _) = train(&config, &records).unwrap();
        assert_eq!(state.image_projection.shape(), [5, 4]);
        assert_eq!(state.text_projection.shape(), [4, 4]);
    }

    #[test]
    fn finetune_without_support_is_an_error() {
        let records = tiny_records(6);
        let split = make_episode(&records, 0, 0, 0.5).unwrap();
        let (mut state, _) = train(&tiny_config(), &records).unwrap();
        assert!(matches!(
            finetune(&mut state, &records, &split),
            Err(Error::FinetuneWithoutSupport)
        ));
    }

    #[test]
    fn zero_finetune_epochs_change_nothing() {
        let records = tiny_records(7);
        let split = make_episode(&records, 1, 2, 0.5).unwrap();
        let config = TrainConfig {
            finetune_epochs: 0,
            ..tiny_config()
        };
        let (mut state, _) = train(&config, &records).unwrap();
        let before = state.clone();
        finetune(&mut state, &records, &split).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn finetune_is_deterministic() {
        let records = tiny_records(8);
        let split = make_episode(&records, 2, 2, 0.5).unwrap();
        let run = || {
            let (mut state, _) = train(&tiny_config(), &records).unwrap();
            finetune(&mut state, &records, &split).unwrap();
            state
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let records = tiny_records(9);
        let (state, _) = train(&tiny_config(), &records).unwrap();
        let a = embed(&state, &records[0]).unwrap();
        let b = embed(&state, &records[0]).unwrap();
        assert_eq!(a.image.vector, b.image.vector);
        assert_eq!(a.text.vector, b.text.vector);
        let d = state.config.latent_dim;
        assert_eq!(a.image.vector.len(), 2 * d + 1);
        assert_eq!(a.text.vector.len(), 2 * d + 1);
        assert!((crate::kernel::tensor::norm(&a.image.vector) - 1.0).abs() < 1e-12);
        assert!((crate::kernel::tensor::norm(&a.text.vector) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_ablation_embeds_one_component() {
        let records = tiny_records(10);
        let config = TrainConfig {
            disable_gmm: true,
            ..tiny_config()
        };
        let (state, _) = train(&config, &records).unwrap();
        let e = embed(&state, &records[0]).unwrap();
        assert_eq!(e.image.component_embeddings.len(), 1);
        assert_eq!(e.image.vector.len(), state.config.latent_dim);
        assert!((crate::kernel::tensor::norm(&e.image.vector) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let records = tiny_records(11);
        let (state, _) = train(&tiny_config(), &records).unwrap();
        let bytes_a = save_checkpoint(&state);
        let restored = load_checkpoint(&bytes_a).unwrap();
        assert_eq!(restored, state);
        assert_eq!(save_checkpoint(&restored), bytes_a);
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_training() {
        let records = tiny_records(12);
        let config = TrainConfig {
            stage1_epochs: 3,
            stage2_epochs: 2,
            ..tiny_config()
        };
        let first = records.first().unwrap();
        let mut full = init(&config, first.image.cols(), first.text.cols()).unwrap();
        train_epochs(&mut full, &records, 5).unwrap();

        let mut half = init(&config, first.image.cols(), first.text.cols()).unwrap();
        train_epochs(&mut half, &records, 2).unwrap();
        let bytes = save_checkpoint(&half);
        let mut resumed = load_checkpoint(&bytes).unwrap();
        train_epochs(&mut resumed, &records, 3).unwrap();

        assert_eq!(full, resumed);
        let fa = save_checkpoint(&full);
        let fb = save_checkpoint(&resumed);
        assert_eq!(fa, fb);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let records = tiny_records(13);
        let (state, _) = train(&tiny_config(), &records).unwrap();
        let bytes = save_checkpoint(&state);

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 3);
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(Error::CheckpointCorrupt { .. })
        ));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn derived_seeds_separate_contexts() {
        let a = derive_seed(7, &[tag::EM, 0, 1, 0]);
        let b = derive_seed(7, &[tag::EM, 0, 1, 1]);
        let c = derive_seed(7, &[tag::EM, 0, 2, 0]);
        let d = derive_seed(8, &[tag::EM, 0, 1, 0]);
        assert!(a != b && a != c && a != d && b != c);
        assert_eq!(a, derive_seed(7, &[tag::EM, 0, 1, 0]));
    }
}
