//! Dataset ingestion, synthetic generation, class splits, and batching.
//!
//! The on-disk format is little-endian throughout: magic `GCRD`, a fixed
//! header, then per sample an id, a label, and the raw descriptor blocks as
//! 32-bit floats (64-bit in memory). A JSON-lines importer exists for
//! interoperability but is lossy and non-canonical.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kernel::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GCRD";
pub const FORMAT_VERSION: u32 = 1;

/// One image-text pair: raw local descriptors for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub label: u32,
    /// L_v x d_raw_v image descriptors.
    pub image: Tensor,
    /// L_t x d_raw_t text descriptors.
    pub text: Tensor,
}

/// Shape metadata shared by every sample in a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub samples: u32,
    pub classes: u32,
    pub image_descriptors: u32,
    pub text_descriptors: u32,
    pub image_dim: u32,
    pub text_dim: u32,
}

impl DatasetHeader {
    /// Byte length of a file with this header.
    fn expected_len(&self) -> u64 {
        let per_sample = 8
            + 4
            + 4 * (self.image_descriptors as u64 * self.image_dim as u64
                + self.text_descriptors as u64 * self.text_dim as u64);
        4 + 4 * 7 + self.samples as u64 * per_sample
    }

    fn from_records(records: &[SampleRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidConfig {
                field: "records",
                reason: "cannot write an empty dataset".to_string(),
            });
        }
        let first = &records[0];
        for (i, r) in records.iter().enumerate() {
            if r.image.shape() != first.image.shape() || r.text.shape() != first.text.shape() {
                return Err(Error::InvalidConfig {
                    field: "records",
                    reason: format!("sample {i} has inconsistent descriptor shapes"),
                });
            }
        }
        let mut labels: Vec<u32> = records.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        Ok(DatasetHeader {
            version: FORMAT_VERSION,
            samples: records.len() as u32,
            classes: labels.len() as u32,
            image_descriptors: first.image.rows() as u32,
            text_descriptors: first.text.rows() as u32,
            image_dim: first.image.cols() as u32,
            text_dim: first.text.cols() as u32,
        })
    }
}

/// Serialize records to the binary format.
pub fn save_dataset(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let header = DatasetHeader::from_records(records)?;
    let mut buf: Vec<u8> = Vec::with_capacity(header.expected_len() as usize);
    buf.extend_from_slice(&MAGIC);
    for field in [
        header.version,
        header.samples,
        header.classes,
        header.image_descriptors,
        header.text_descriptors,
        header.image_dim,
        header.text_dim,
    ] {
        buf.write_u32::<LittleEndian>(field)?;
    }
    for record in records {
        buf.write_u64::<LittleEndian>(record.id)?;
        buf.write_u32::<LittleEndian>(record.label)?;
        for v in record.image.data() {
            buf.write_f32::<LittleEndian>(*v as f32)?;
        }
        for v in record.text.data() {
            buf.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Load a binary dataset; the magic and the declared byte length are checked
/// before any payload is interpreted.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < 4 + 4 * 7 {
        return Err(Error::Truncated {
            expected: (4 + 4 * 7) as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut cursor = Cursor::new(&bytes[4..]);
    let version = cursor.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header = DatasetHeader {
        version,
        samples: cursor.read_u32::<LittleEndian>()?,
        classes: cursor.read_u32::<LittleEndian>()?,
        image_descriptors: cursor.read_u32::<LittleEndian>()?,
        text_descriptors: cursor.read_u32::<LittleEndian>()?,
        image_dim: cursor.read_u32::<LittleEndian>()?,
        text_dim: cursor.read_u32::<LittleEndian>()?,
    };
    if header.image_descriptors == 0
        || header.text_descriptors == 0
        || header.image_dim == 0
        || header.text_dim == 0
    {
        return Err(Error::Malformed {
            offset: 4,
            reason: "zero descriptor counts or dimensions in header".to_string(),
        });
    }
    let expected = header.expected_len();
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }

    let image_len = (header.image_descriptors * header.image_dim) as usize;
    let text_len = (header.text_descriptors * header.text_dim) as usize;
    let mut records = Vec::with_capacity(header.samples as usize);
    for _ in 0..header.samples {
        let offset = 4 + cursor.position();
        let id = cursor.read_u64::<LittleEndian>()?;
        let label = cursor.read_u32::<LittleEndian>()?;
        let mut read_block = |len: usize, rows: u32, cols: u32| -> Result<Tensor> {
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let v = cursor.read_f32::<LittleEndian>()? as f64;
                if !v.is_finite() {
                    return Err(Error::Malformed {
                        offset,
                        reason: format!("non-finite descriptor in sample {id}"),
                    });
                }
                data.push(v);
            }
            Tensor::from_vec(rows as usize, cols as usize, data)
        };
        let image = read_block(image_len, header.image_descriptors, header.image_dim)?;
        let text = read_block(text_len, header.text_descriptors, header.text_dim)?;
        records.push(SampleRecord {
            id,
            label,
            image,
            text,
        });
    }
    Ok((header, records))
}

#[derive(Deserialize)]
struct JsonSample {
    id: u64,
    label: u32,
    image: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
}

/// Import JSON-lines records (one sample per line). Floats pass through
/// decimal text, so this path is lossy; the binary format is canonical.
pub fn import_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (line_no, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonSample = serde_json::from_str(line).map_err(|e| Error::Malformed {
            offset: line_no as u64 + 1,
            reason: format!("line {}: {e}", line_no + 1),
        })?;
        let to_tensor = |rows: &[Vec<f64>]| -> Result<Tensor> {
            if rows.is_empty() || rows[0].is_empty() {
                return Err(Error::Malformed {
                    offset: line_no as u64 + 1,
                    reason: format!("line {}: empty descriptor block", line_no + 1),
                });
            }
            let cols = rows[0].len();
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Malformed {
                    offset: line_no as u64 + 1,
                    reason: format!("line {}: ragged descriptor block", line_no + 1),
                });
            }
            Tensor::from_vec(rows.len(), cols, rows.concat())
        };
        records.push(SampleRecord {
            id: parsed.id,
            label: parsed.label,
            image: to_tensor(&parsed.image)?,
            text: to_tensor(&parsed.text)?,
        });
    }
    Ok(records)
}

/// Recipe for a synthetic multi-peak cross-modal dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: u32,
    pub peaks_per_class: usize,
    pub samples_per_class: usize,
    pub latent_dim: usize,
    /// Descriptors per sample, image side (L_v).
    pub image_descriptors: usize,
    /// Descriptors per sample, text side (L_t).
    pub text_descriptors: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Scale of the per-class anchor each class's peak set is centered on.
    /// At 0 classes are distinguishable only through their peak geometry,
    /// which defeats mean pooling.
    pub class_spread: f64,
    /// Cross-modal coupling noise: how far text latents drift from the image
    /// side's peak assignments.
    pub coupling_noise: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            peaks_per_class: 3,
            samples_per_class: 30,
            latent_dim: 8,
            image_descriptors: 12,
            text_descriptors: 12,
            image_dim: 12,
            text_dim: 10,
            class_spread: 1.0,
            coupling_noise: 0.1,
            image_noise: 0.3,
            text_noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig {
                field: "synthetic",
                reason: "need at least one class and one sample per class".to_string(),
            });
        }
        if self.peaks_per_class == 0 {
            return Err(Error::InvalidConfig {
                field: "peaks_per_class",
                reason: "need at least one peak".to_string(),
            });
        }
        if self.latent_dim == 0
            || self.image_descriptors == 0
            || self.text_descriptors == 0
            || self.image_dim == 0
            || self.text_dim == 0
        {
            return Err(Error::InvalidConfig {
                field: "synthetic",
                reason: "dimensions and descriptor counts must be positive".to_string(),
            });
        }
        if self.class_spread < 0.0
            || self.coupling_noise < 0.0
            || self.image_noise < 0.0
            || self.text_noise < 0.0
        {
            return Err(Error::InvalidConfig {
                field: "synthetic",
                reason: "noise scales must be non-negative".to_string(),
            });
        }
        Ok(())
    }
}

/// Per-sample latent descriptor sets before the modality maps are applied.
pub(crate) struct SyntheticLatents {
    pub labels: Vec<u32>,
    pub image: Vec<Tensor>, // each L_v x latent_dim
    pub text: Vec<Tensor>,  // each L_t x latent_dim
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-sample peak assignments: every descriptor lands on the dominant peak
/// with probability 0.6 and otherwise uniformly on any peak. The realized
/// proportions therefore vary from sample to sample, which is what gives
/// component-level modeling an edge over mean pooling.
fn draw_assignments(
    rng: &mut ChaCha8Rng,
    count: usize,
    peaks: usize,
    dominant: usize,
) -> Vec<usize> {
    (0..count)
        .map(|_| {
            if rng.random::<f64>() < 0.6 {
                dominant
            } else {
                rng.random_range(0..peaks)
            }
        })
        .collect()
}

/// Draw class peaks and per-sample latent descriptors. Each sample gets a
/// dominant peak shared by both modalities (the ground-truth cross-modal
/// correspondence); both modalities reuse the same realized peak
/// assignments when their descriptor counts match, up to the coupling
/// perturbation on the text side.
pub(crate) fn generate_latents(spec: &SyntheticSpec) -> SyntheticLatents {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.latent_dim;
    let p = spec.peaks_per_class;

    // Class peak sets, centered on a class anchor so the peak geometry, not
    // just the class mean, carries most of the class signal.
    let mut peaks: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.classes as usize);
    for _ in 0..spec.classes {
        let anchor: Vec<f64> = (0..d).map(|_| spec.class_spread * normal(&mut rng)).collect();
        let mut class_peaks: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..d).map(|_| 2.5 * normal(&mut rng)).collect())
            .collect();
        let mut centroid = vec![0.0; d];
        for peak in &class_peaks {
            for (j, v) in peak.iter().enumerate() {
                centroid[j] += v / p as f64;
            }
        }
        for peak in class_peaks.iter_mut() {
            for j in 0..d {
                peak[j] += anchor[j] - centroid[j];
            }
        }
        peaks.push(class_peaks);
    }

    let mut labels = Vec::new();
    let mut image = Vec::new();
    let mut text = Vec::new();
    for class in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            let dominant = rng.random_range(0..p);
            let image_assignments =
                draw_assignments(&mut rng, spec.image_descriptors, p, dominant);
            let text_assignments = if spec.text_descriptors == spec.image_descriptors {
                image_assignments.clone()
            } else {
                draw_assignments(&mut rng, spec.text_descriptors, p, dominant)
            };
            // One coupling offset per (sample, peak), shared by all text
            // descriptors assigned to that peak.
            let offsets: Vec<Vec<f64>> = (0..p)
                .map(|_| {
                    (0..d)
                        .map(|_| spec.coupling_noise * normal(&mut rng))
                        .collect()
                })
                .collect();
            let mut img = Tensor::zeros(spec.image_descriptors, d);
            for (n, &assignment) in image_assignments.iter().enumerate() {
                let peak = &peaks[class as usize][assignment];
                for j in 0..d {
                    img.set(n, j, peak[j] + spec.image_noise * normal(&mut rng));
                }
            }
            let mut txt = Tensor::zeros(spec.text_descriptors, d);
            for (n, &assignment) in text_assignments.iter().enumerate() {
                let peak = &peaks[class as usize][assignment];
                for j in 0..d {
                    txt.set(
                        n,
                        j,
                        peak[j] + offsets[assignment][j] + spec.text_noise * normal(&mut rng),
                    );
                }
            }
            labels.push(class);
            image.push(img);
            text.push(txt);
        }
    }
    SyntheticLatents {
        labels,
        image,
        text,
    }
}

/// Generate records: latent descriptors pushed through one fixed random
/// linear map per modality.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let latents = generate_latents(spec);

    // Map draws come after the latent draws in one stream; both are fixed by
    // the spec seed.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x6d61_7073));
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let mut draw_map = |rows: usize| -> Vec<f64> {
        (0..rows * spec.latent_dim)
            .map(|_| scale * normal(&mut rng))
            .collect()
    };
    let image_map = draw_map(spec.image_dim);
    let text_map = draw_map(spec.text_dim);

    let apply = |latent: &Tensor, map: &[f64], out_dim: usize| -> Tensor {
        let mut out = Tensor::zeros(latent.rows(), out_dim);
        for r in 0..latent.rows() {
            for o in 0..out_dim {
                let mut acc = 0.0;
                for j in 0..latent.cols() {
                    acc += map[o * latent.cols() + j] * latent.get(r, j);
                }
                out.set(r, o, acc);
            }
        }
        out
    };

    let mut records = Vec::with_capacity(latents.labels.len());
    for (i, label) in latents.labels.iter().enumerate() {
        records.push(SampleRecord {
            id: i as u64,
            label: *label,
            image: apply(&latents.image[i], &image_map, spec.image_dim),
            text: apply(&latents.text[i], &text_map, spec.text_dim),
        });
    }
    Ok(records)
}

/// Disjoint source/target class split with k-shot support selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub source_classes: Vec<u32>,
    pub target_classes: Vec<u32>,
    pub k: usize,
    /// Per target class, the k support sample ids.
    pub support: Vec<(u32, Vec<u64>)>,
    /// Per target class, the query sample ids.
    pub queries: Vec<(u32, Vec<u64>)>,
}

impl EpisodeSplit {
    pub fn is_source_class(&self, label: u32) -> bool {
        self.source_classes.binary_search(&label).is_ok()
    }

    pub fn is_target_class(&self, label: u32) -> bool {
        self.target_classes.binary_search(&label).is_ok()
    }

    /// All support ids across target classes, in class order.
    pub fn support_ids(&self) -> Vec<u64> {
        self.support.iter().flat_map(|(_, ids)| ids.clone()).collect()
    }

    /// All query ids across target classes, in class order.
    pub fn query_ids(&self) -> Vec<u64> {
        self.queries.iter().flat_map(|(_, ids)| ids.clone()).collect()
    }
}

/// Split classes into disjoint source/target sets and pick k support samples
/// per target class; deterministic under the seed.
pub fn make_episode(
    records: &[SampleRecord],
    seed: u64,
    k: usize,
    source_fraction: f64,
) -> Result<EpisodeSplit> {
    if !(0.0..=1.0).contains(&source_fraction) {
        return Err(Error::InvalidConfig {
            field: "source_fraction",
            reason: format!("must lie in [0, 1], got {source_fraction}"),
        });
    }
    let mut classes: Vec<u32> = records.iter().map(|r| r.label).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidConfig {
            field: "records",
            reason: "need at least two classes for a source/target split".to_string(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = classes.clone();
    shuffled.shuffle(&mut rng);
    let n_source = ((classes.len() as f64 * source_fraction).round() as usize)
        .clamp(1, classes.len() - 1);
    let mut source_classes: Vec<u32> = shuffled[..n_source].to_vec();
    let mut target_classes: Vec<u32> = shuffled[n_source..].to_vec();
    source_classes.sort_unstable();
    target_classes.sort_unstable();

    let mut support = Vec::new();
    let mut queries = Vec::new();
    for &class in &target_classes {
        let mut ids: Vec<u64> = records
            .iter()
            .filter(|r| r.label == class)
            .map(|r| r.id)
            .collect();
        ids.sort_unstable();
        if ids.len() < k + 1 {
            return Err(Error::InsufficientSamples {
                class,
                have: ids.len(),
                need: k + 1,
            });
        }
        ids.shuffle(&mut rng);
        let (sup, rest) = ids.split_at(k);
        let mut sup = sup.to_vec();
        let mut rest = rest.to_vec();
        sup.sort_unstable();
        rest.sort_unstable();
        support.push((class, sup));
        queries.push((class, rest));
    }
    Ok(EpisodeSplit {
        source_classes,
        target_classes,
        k,
        support,
        queries,
    })
}

/// Seeded shuffle of `0..count` chopped into batches; a trailing batch is
/// kept only when it still has at least two samples.
pub fn make_batches(count: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall { size: batch_size });
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    if let Some(last) = batches.last() {
        if last.len() < 2 {
            batches.pop();
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm;
    use crate::Modality;

    fn small_records() -> Vec<SampleRecord> {
        vec![
            SampleRecord {
                id: 1,
                label: 0,
                image: Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.125, -4.0]).unwrap(),
                text: Tensor::from_vec(1, 2, vec![1.5, -2.5]).unwrap(),
            },
            SampleRecord {
                id: 2,
                label: 1,
                image: Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                text: Tensor::from_vec(1, 2, vec![-0.75, 8.0]).unwrap(),
            },
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.gcrd");
        let path_b = dir.path().join("b.gcrd");
        let records = small_records();
        save_dataset(&path_a, &records).unwrap();
        let (header, loaded) = load_dataset(&path_a).unwrap();
        assert_eq!(header.samples, 2);
        assert_eq!(header.classes, 2);
        assert_eq!(loaded, records);
        save_dataset(&path_b, &loaded).unwrap();
        assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());
    }

    #[test]
    fn truncated_file_reports_expected_and_actual_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gcrd");
        save_dataset(&path, &small_records()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let full = bytes.len() as u64;
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, bytes).unwrap();
        match load_dataset(&path).unwrap_err() {
            Error::Truncated { expected, actual } => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected_before_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gcrd");
        save_dataset(&path, &small_records()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            Error::BadMagic { .. }
        ));
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.gcrd");
        save_dataset(&path, &small_records()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            Error::UnsupportedVersion { found: 99, .. }
        ));
    }

    #[test]
    fn jsonl_import_round_trips_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"id\":7,\"label\":2,\"image\":[[1.0,2.0]],\"text\":[[3.0],[4.0]]}\n",
                "{\"id\":8,\"label\":0,\"image\":[[5.0,6.0]],\"text\":[[7.0],[8.0]]}\n",
            ),
        )
        .unwrap();
        let records = import_jsonl(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, 7);
        assert_eq!(records[0].image.shape(), [1, 2]);
        assert_eq!(records[1].text.shape(), [2, 1]);
    }

    #[test]
    fn jsonl_import_names_the_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"id\":1,\"label\":0,\"image\":[[1.0]],\"text\":[[1.0]]}\nnot json\n",
        )
        .unwrap();
        match import_jsonl(&path).unwrap_err() {
            Error::Malformed { offset, .. } => assert_eq!(offset, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn noiseless_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            peaks_per_class: 1,
            samples_per_class: 4,
            latent_dim: 5,
            image_descriptors: 6,
            text_descriptors: 6,
            image_dim: 7,
            text_dim: 7,
            class_spread: 1.0,
            coupling_noise: 0.0,
            image_noise: 0.0,
            text_noise: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn noiseless_single_peak_collapses_each_class_to_a_point() {
        let spec = noiseless_spec();
        let latents = generate_latents(&spec);
        // Every descriptor of every sample in a class is the class peak, in
        // both modalities.
        for i in 0..latents.labels.len() {
            let img = &latents.image[i];
            let txt = &latents.text[i];
            for n in 0..img.rows() {
                assert_eq!(img.row_slice(n), img.row_slice(0));
            }
            assert_eq!(img.row_slice(0), txt.row_slice(0));
            for n in 0..txt.rows() {
                assert_eq!(txt.row_slice(n), txt.row_slice(0));
            }
        }
        // Identical projections of identical latents give prototype cosine 1.
        let feats = gmm::LocalFeatureSet::new(Modality::Image, latents.image[0].clone()).unwrap();
        let fit = gmm::fit_em(&feats, 1, 0).unwrap();
        let image_proto = gmm::build_prototype(&fit.params, &fit.responsibilities).unwrap();
        let feats = gmm::LocalFeatureSet::new(Modality::Text, latents.text[0].clone()).unwrap();
        let fit = gmm::fit_em(&feats, 1, 0).unwrap();
        let text_proto = gmm::build_prototype(&fit.params, &fit.responsibilities).unwrap();
        let cos = crate::kernel::tensor::cosine(&image_proto.vector, &text_proto.vector);
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multi_peak_samples_prefer_a_matching_component_count() {
        let spec = SyntheticSpec {
            peaks_per_class: 3,
            image_noise: 0.05,
            text_noise: 0.05,
            classes: 2,
            samples_per_class: 3,
            ..SyntheticSpec::default()
        };
        let records = generate_synthetic(&spec).unwrap();
        for record in records.iter().take(4) {
            let feats =
                gmm::LocalFeatureSet::new(Modality::Image, record.image.clone()).unwrap();
            let ll = |k: usize| {
                gmm::fit_em(&feats, k, 11)
                    .unwrap()
                    .log_likelihood
                    .last()
                    .copied()
                    .unwrap()
            };
            assert!(
                ll(3) > ll(1),
                "three components should explain three peaks better"
            );
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    fn episode_records(classes: u32, per_class: usize) -> Vec<SampleRecord> {
        let spec = SyntheticSpec {
            classes,
            samples_per_class: per_class,
            peaks_per_class: 1,
            latent_dim: 2,
            image_descriptors: 2,
            text_descriptors: 2,
            image_dim: 2,
            text_dim: 2,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn zero_shot_episode_has_only_queries() {
        let records = episode_records(4, 5);
        let split = make_episode(&records, 3, 0, 0.5).unwrap();
        assert!(split.support_ids().is_empty());
        let per_class = records.len() / 4;
        assert_eq!(split.query_ids().len(), split.target_classes.len() * per_class);
    }

    #[test]
    fn five_shot_on_six_samples_leaves_one_query() {
        let records = episode_records(4, 6);
        let split = make_episode(&records, 3, 5, 0.5).unwrap();
        for (_, ids) in &split.support {
            assert_eq!(ids.len(), 5);
        }
        for (_, ids) in &split.queries {
            assert_eq!(ids.len(), 1);
        }
        // Support and queries are disjoint within each class.
        for ((_, sup), (_, qry)) in split.support.iter().zip(&split.queries) {
            assert!(sup.iter().all(|id| !qry.contains(id)));
        }
    }

    #[test]
    fn ten_classes_split_five_and_five() {
        let records = episode_records(10, 3);
        let split = make_episode(&records, 9, 0, 0.5).unwrap();
        assert_eq!(split.source_classes.len(), 5);
        assert_eq!(split.target_classes.len(), 5);
        assert!(split
            .source_classes
            .iter()
            .all(|c| !split.target_classes.contains(c)));
    }

    #[test]
    fn insufficient_samples_name_the_class() {
        let records = episode_records(4, 3);
        match make_episode(&records, 3, 5, 0.5).unwrap_err() {
            Error::InsufficientSamples { have, need, .. } => {
                assert_eq!(have, 3);
                assert_eq!(need, 6);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn episodes_are_reproducible() {
        let records = episode_records(6, 8);
        let a = make_episode(&records, 17, 3, 0.5).unwrap();
        let b = make_episode(&records, 17, 3, 0.5).unwrap();
        assert_eq!(a, b);
        let c = make_episode(&records, 18, 3, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batching_keeps_pairs_and_drops_singletons() {
        // 10 samples at batch size 4: the remainder of 2 is kept.
        let batches = make_batches(10, 4, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        // 9 samples: the trailing singleton is dropped.
        let batches = make_batches(9, 4, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4]);
    }

    #[test]
    fn batch_order_is_seeded() {
        assert_eq!(make_batches(12, 4, 5).unwrap(), make_batches(12, 4, 5).unwrap());
        assert_ne!(make_batches(12, 4, 5).unwrap(), make_batches(12, 4, 6).unwrap());
    }

    #[test]
    fn batch_size_below_two_is_rejected() {
        assert!(matches!(
            make_batches(10, 1, 0),
            Err(Error::BatchTooSmall { size: 1 })
        ));
    }
}
