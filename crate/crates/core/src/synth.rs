//! Synthetic desk-scale dataset generator: records whose report text, frame
//! labels, pixel masks and per-blob pathology are all known, so every
//! pipeline stage can be scored against exact ground truth.
//!
//! Positive frames carry elliptical textured blobs on a structured
//! background; reports are templated from a fixed lexicon consistent with
//! the record label, including negation sentences that exercise the rule
//! extractor.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::derive_seed;
use crate::records::{self, ColonoscopyRecord, ImageSample};

/// Intensity palette for blobs and background. The gap between blob levels
/// and `background_level` is the separability knob for learnability tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureParams {
    pub background_level: f64,
    /// Amplitude of the smooth sinusoidal background structure.
    pub background_wave: f64,
    /// Uniform per-pixel noise amplitude.
    pub noise: f64,
    /// Fill level of benign blobs.
    pub benign_level: f64,
    /// Checkerboard levels of malignant blobs.
    pub malignant_low: f64,
    pub malignant_high: f64,
    /// Checkerboard cell size in pixels.
    pub malignant_cell: usize,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            background_level: 60.0,
            background_wave: 18.0,
            noise: 10.0,
            benign_level: 175.0,
            malignant_low: 110.0,
            malignant_high: 215.0,
            malignant_cell: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_records: usize,
    /// Inclusive range of frames per record.
    pub images_per_record: (usize, usize),
    pub image_side: usize,
    /// Fraction of records whose report is positive.
    pub positive_fraction: f64,
    /// Inclusive range of blobs on each positive frame.
    pub blobs_per_positive: (usize, usize),
    /// Inclusive range of the blob semi-major axis, in pixels.
    pub blob_radius: (f64, f64),
    /// Probability that a blob's pathology is malignant.
    pub malignant_fraction: f64,
    pub texture: TextureParams,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 20,
            images_per_record: (3, 6),
            image_side: 64,
            positive_fraction: 0.5,
            blobs_per_positive: (1, 2),
            blob_radius: (12.0, 20.0),
            malignant_fraction: 0.5,
            texture: TextureParams::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 {
            return Err(Error::Config("n_records must be >= 1".into()));
        }
        let (ilo, ihi) = self.images_per_record;
        if ilo < 1 || ilo > ihi {
            return Err(Error::Config(format!("empty images_per_record range {ilo}..={ihi}")));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction {} outside [0, 1]",
                self.positive_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.malignant_fraction) {
            return Err(Error::Config(format!(
                "malignant_fraction {} outside [0, 1]",
                self.malignant_fraction
            )));
        }
        let (blo, bhi) = self.blobs_per_positive;
        if blo < 1 || blo > bhi {
            return Err(Error::Config(format!("empty blobs_per_positive range {blo}..={bhi}")));
        }
        let (rlo, rhi) = self.blob_radius;
        if !(1.0 <= rlo && rlo <= rhi) {
            return Err(Error::Config(format!("bad blob_radius range {rlo}..={rhi}")));
        }
        if (self.image_side as f64) < 2.0 * rhi + 2.0 {
            return Err(Error::Config(format!(
                "image side {} too small for blob radius {rhi}",
                self.image_side
            )));
        }
        Ok(())
    }
}

/// One generated blob: geometry plus its Vienna pathology category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobTruth {
    pub vienna_category: u8,
    pub center_row: f64,
    pub center_col: f64,
    pub radius_major: f64,
    pub radius_minor: f64,
    pub angle: f64,
}

impl BlobTruth {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = r as f64 - self.center_row;
        let dx = c as f64 - self.center_col;
        let (sin, cos) = self.angle.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.radius_major).powi(2) + (v / self.radius_minor).powi(2) <= 1.0
    }

    /// Rasterize just this blob.
    pub fn mask(&self, image_id: &str, side: usize) -> BinaryMask {
        let data =
            Array2::from_shape_fn((side, side), |(r, c)| u8::from(self.contains(r, c)));
        BinaryMask::new(image_id, data)
    }

    pub fn malignant(&self) -> bool {
        matches!(self.vienna_category, 3..=5)
    }
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub image_id: String,
    pub frame_label: u8,
    pub height: usize,
    pub width: usize,
    /// Run-length encoding of the union of all blob masks.
    pub mask_rle: Vec<u32>,
    pub blobs: Vec<BlobTruth>,
}

impl FrameTruth {
    pub fn mask(&self) -> Result<BinaryMask> {
        BinaryMask::from_rle(self.image_id.clone(), self.height, self.width, &self.mask_rle)
    }

    /// Frame-level pathology: 1 if any blob is malignant, 0 if all benign,
    /// `None` for blob-free frames.
    pub fn malignant(&self) -> Option<u8> {
        if self.blobs.is_empty() {
            None
        } else {
            Some(u8::from(self.blobs.iter().any(BlobTruth::malignant)))
        }
    }
}

/// Ground truth for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordTruth {
    pub record_id: String,
    pub report_label: u8,
    pub frames: Vec<FrameTruth>,
}

/// The full truth sidecar: everything the generator knows, at every
/// granularity the pipeline distills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub records: Vec<RecordTruth>,
}

impl SynthTruth {
    /// Verify the defining invariants: a report is positive iff some frame
    /// is, and a frame is positive iff its mask has foreground.
    pub fn check_invariants(&self) -> Result<()> {
        for rec in &self.records {
            let any_frame = rec.frames.iter().any(|f| f.frame_label == 1);
            if (rec.report_label == 1) != any_frame {
                return Err(Error::Data(format!(
                    "record {}: report label {} but frame OR is {}",
                    rec.record_id, rec.report_label, any_frame
                )));
            }
            for f in &rec.frames {
                let area = f.mask()?.area();
                if (f.frame_label == 1) != (area > 0) {
                    return Err(Error::Data(format!(
                        "frame {}: label {} but mask area {area}",
                        f.image_id, f.frame_label
                    )));
                }
                if (f.frame_label == 1) != !f.blobs.is_empty() {
                    return Err(Error::Data(format!(
                        "frame {}: label {} but {} blobs",
                        f.image_id,
                        f.frame_label,
                        f.blobs.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frame(&self, image_id: &str) -> Option<&FrameTruth> {
        self.records.iter().flat_map(|r| &r.frames).find(|f| f.image_id == image_id)
    }

    pub fn record(&self, record_id: &str) -> Option<&RecordTruth> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("truth serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<SynthTruth> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// A generated dataset held in memory; [`write_dataset`] lays it on disk.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<ColonoscopyRecord>,
    pub images: Vec<ImageSample>,
    pub truth: SynthTruth,
}

const SEGMENTS: [&str; 5] =
    ["sigmoid colon", "ascending colon", "transverse colon", "rectum", "descending colon"];

fn positive_report(rng: &mut ChaCha8Rng) -> String {
    let segment = SEGMENTS[rng.random_range(0..SEGMENTS.len())];
    let size = rng.random_range(3..=12);
    match rng.random_range(0..3) {
        0 => format!(
            "The cecum was reached. A {size} mm sessile polyp was found in the {segment}. \
             No bleeding was observed."
        ),
        1 => format!(
            "Bowel preparation was adequate. Two small polyps were identified in the \
             {segment} and removed with a cold snare."
        ),
        _ => format!(
            "A pedunculated polyp was seen in the {segment}. The remaining mucosa \
             appeared normal."
        ),
    }
}

fn negative_report(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => "The cecum was reached. No polyps were identified. The mucosa was \
              unremarkable."
            .to_string(),
        1 => "Bowel preparation was adequate. The examined colon showed normal mucosa \
              throughout. No bleeding was observed."
            .to_string(),
        _ => "Withdrawal was uneventful. No polyp was seen; no masses were noted."
            .to_string(),
    }
}

fn render_frame(
    side: usize,
    blobs: &[BlobTruth],
    texture: &TextureParams,
    rng: &mut ChaCha8Rng,
) -> Array3<u8> {
    let fr = rng.random_range(1..=3) as f64;
    let fc = rng.random_range(1..=3) as f64;
    let phase_r: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_c: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let cell = texture.malignant_cell.max(1);
    let mut out = Array3::zeros((side, side, 3));
    for r in 0..side {
        for c in 0..side {
            let wave = (std::f64::consts::TAU * fr * r as f64 / side as f64 + phase_r).sin()
                * (std::f64::consts::TAU * fc * c as f64 / side as f64 + phase_c).cos();
            let mut base = texture.background_level + texture.background_wave * wave;
            for b in blobs {
                if b.contains(r, c) {
                    base = if b.malignant() {
                        if (r / cell + c / cell) % 2 == 0 {
                            texture.malignant_high
                        } else {
                            texture.malignant_low
                        }
                    } else {
                        texture.benign_level
                    };
                    break;
                }
            }
            for ch in 0..3 {
                let noise: f64 = rng.random_range(-texture.noise..=texture.noise);
                out[[r, c, ch]] = (base + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Generate a dataset. Fully deterministic: records derive independent
/// seeds from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let side = config.image_side;
    let n_positive = (config.positive_fraction * config.n_records as f64).round() as usize;

    let mut records = Vec::with_capacity(config.n_records);
    let mut images = Vec::new();
    let mut truth_records = Vec::with_capacity(config.n_records);

    for i in 0..config.n_records {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[31, i as u64]));
        let record_id = format!("r{i:04}");
        let positive = i < n_positive;
        let n_images =
            rng.random_range(config.images_per_record.0..=config.images_per_record.1);

        // which frames carry blobs
        let mut frame_positive = vec![false; n_images];
        if positive {
            let n_pos_frames = rng.random_range(1..=n_images);
            let mut idx: Vec<usize> = (0..n_images).collect();
            for k in 0..n_pos_frames {
                let j = rng.random_range(k..n_images);
                idx.swap(k, j);
            }
            for &f in &idx[..n_pos_frames] {
                frame_positive[f] = true;
            }
        }

        let mut image_refs = Vec::with_capacity(n_images);
        let mut frames = Vec::with_capacity(n_images);
        let mut worst_pathology: Option<u32> = None;
        for f in 0..n_images {
            let image_id = format!("images/{record_id}/f{f:02}.png");
            let mut blobs = Vec::new();
            if frame_positive[f] {
                let n_blobs = rng
                    .random_range(config.blobs_per_positive.0..=config.blobs_per_positive.1);
                for _ in 0..n_blobs {
                    let r_major = rng.random_range(config.blob_radius.0..=config.blob_radius.1);
                    let r_minor = r_major * rng.random_range(0.6..=1.0);
                    let margin = r_major + 1.0;
                    let center_row = rng.random_range(margin..=side as f64 - margin);
                    let center_col = rng.random_range(margin..=side as f64 - margin);
                    let angle = rng.random_range(0.0..std::f64::consts::PI);
                    let vienna_category = if rng.random_bool(config.malignant_fraction) {
                        rng.random_range(3..=5) as u8
                    } else {
                        1
                    };
                    worst_pathology = Some(
                        worst_pathology.unwrap_or(0).max(vienna_category as u32),
                    );
                    blobs.push(BlobTruth {
                        vienna_category,
                        center_row,
                        center_col,
                        radius_major: r_major,
                        radius_minor: r_minor,
                        angle,
                    });
                }
            }
            let pixels = render_frame(side, &blobs, &config.texture, &mut rng);
            let mask_data = Array2::from_shape_fn((side, side), |(r, c)| {
                u8::from(blobs.iter().any(|b| b.contains(r, c)))
            });
            let mask = BinaryMask::new(image_id.clone(), mask_data);
            frames.push(FrameTruth {
                image_id: image_id.clone(),
                frame_label: u8::from(!blobs.is_empty()),
                height: side,
                width: side,
                mask_rle: mask.to_rle(),
                blobs,
            });
            images.push(ImageSample {
                image_id: image_id.clone(),
                pixels,
                record_id: record_id.clone(),
            });
            image_refs.push(image_id);
        }

        let report_text = if positive {
            positive_report(&mut rng)
        } else {
            negative_report(&mut rng)
        };
        records.push(ColonoscopyRecord {
            record_id: record_id.clone(),
            center_id: format!("center{}", i % 3),
            report_text,
            image_refs,
            expert_report_label: None,
            expert_image_labels: None,
            pathology: worst_pathology,
        });
        truth_records.push(RecordTruth {
            record_id,
            report_label: u8::from(positive),
            frames,
        });
    }

    let truth = SynthTruth { records: truth_records };
    debug_assert!(truth.check_invariants().is_ok());
    Ok(SynthDataset { records, images, truth })
}

pub fn truth_path(dir: &Path) -> PathBuf {
    dir.join("truth.json")
}

/// Lay a generated dataset out on disk: PNG frames, the TSV manifest and
/// the JSON truth sidecar.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for img in &dataset.images {
        records::write_image(&img.pixels, &dir.join(&img.image_id))?;
    }
    records::write_manifest(&dataset.records, &records::manifest_path(dir))?;
    dataset.truth.save(&truth_path(dir))
}
