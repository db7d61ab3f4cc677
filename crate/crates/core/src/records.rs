//! Record-level data model: manifests, images, splits and MIL bags.
//!
//! A manifest is a UTF-8 TSV with one row per procedure. `report_text` is
//! JSON-escaped so reports can contain tabs and newlines; image paths are
//! `;`-joined and resolved relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One colonoscopy procedure: a report plus the frames captured during it.
#[derive(Debug, Clone, PartialEq)]
pub struct ColonoscopyRecord {
    pub record_id: String,
    pub center_id: String,
    pub report_text: String,
    /// Image paths relative to the manifest location; never empty.
    pub image_refs: Vec<String>,
    /// Manual report-level polyp label, when an expert provided one.
    pub expert_report_label: Option<u8>,
    /// Manual per-frame labels, aligned with `image_refs`.
    pub expert_image_labels: Option<Vec<u8>>,
    /// Raw Vienna classification category from pathology, if biopsied.
    pub pathology: Option<u32>,
}

/// A decoded RGB frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// Unique id; the manifest-relative path of the image.
    pub image_id: String,
    /// H x W x 3, 8-bit.
    pub pixels: Array3<u8>,
    pub record_id: String,
}

/// All frames of one record plus its (possibly distilled) report label.
#[derive(Debug, Clone)]
pub struct Bag {
    pub record_id: String,
    pub instances: Vec<ImageSample>,
    pub label: u8,
}

/// A named subset of record ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub record_ids: BTreeSet<String>,
}

const HEADER: [&str; 7] = [
    "record_id",
    "center_id",
    "report_text",
    "image_paths",
    "expert_report_label",
    "expert_image_labels",
    "pathology",
];

fn manifest_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Manifest { path: path.display().to_string(), line, msg: msg.into() }
}

fn parse_binary(field: &str, what: &str, path: &Path, line: usize) -> Result<u8> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(manifest_err(path, line, format!("{what} must be 0 or 1, got {other:?}"))),
    }
}

/// Parse a manifest, checking structure, label arity and that every image
/// file referenced actually exists next to the manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<ColonoscopyRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| manifest_err(path, 1, "empty manifest"))?;
    if header.split('\t').collect::<Vec<_>>() != HEADER {
        return Err(manifest_err(path, 1, format!("unexpected header {header:?}")));
    }

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.is_empty() {
            return Err(manifest_err(path, line, "blank line"));
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != HEADER.len() {
            return Err(manifest_err(
                path,
                line,
                format!("expected {} tab-separated fields, got {}", HEADER.len(), fields.len()),
            ));
        }
        let record_id = fields[0].to_string();
        if record_id.is_empty() {
            return Err(manifest_err(path, line, "empty record_id"));
        }
        if !seen.insert(record_id.clone()) {
            return Err(manifest_err(path, line, format!("duplicate record_id {record_id:?}")));
        }
        let report_text: String = serde_json::from_str(fields[2]).map_err(|e| {
            manifest_err(path, line, format!("report_text is not a JSON string: {e}"))
        })?;
        let image_refs: Vec<String> = fields[3]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if image_refs.is_empty() {
            return Err(manifest_err(path, line, "record has no images"));
        }
        for r in &image_refs {
            if !base.join(r).is_file() {
                return Err(Error::MissingImage { record_id, path: r.clone() });
            }
        }
        let expert_report_label = if fields[4].is_empty() {
            None
        } else {
            Some(parse_binary(fields[4], "expert_report_label", path, line)?)
        };
        let expert_image_labels = if fields[5].is_empty() {
            None
        } else {
            let labels = fields[5]
                .split(',')
                .map(|f| parse_binary(f, "expert_image_labels entry", path, line))
                .collect::<Result<Vec<u8>>>()?;
            if labels.len() != image_refs.len() {
                return Err(manifest_err(
                    path,
                    line,
                    format!("{} image labels for {} images", labels.len(), image_refs.len()),
                ));
            }
            Some(labels)
        };
        let pathology = if fields[6].is_empty() {
            None
        } else {
            Some(fields[6].parse::<u32>().map_err(|e| {
                manifest_err(path, line, format!("bad pathology category {:?}: {e}", fields[6]))
            })?)
        };
        records.push(ColonoscopyRecord {
            record_id,
            center_id: fields[1].to_string(),
            report_text,
            image_refs,
            expert_report_label,
            expert_image_labels,
            pathology,
        });
    }
    Ok(records)
}

/// Serialize records to the TSV manifest format (inverse of
/// [`load_manifest`], up to file-existence checks).
pub fn write_manifest(records: &[ColonoscopyRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&HEADER.join("\t"));
    out.push('\n');
    for r in records {
        assert!(!r.image_refs.is_empty(), "record {} has no images", r.record_id);
        if let Some(labels) = &r.expert_image_labels {
            assert_eq!(
                labels.len(),
                r.image_refs.len(),
                "record {}: image label arity",
                r.record_id
            );
        }
        let report_json = serde_json::to_string(&r.report_text).expect("string to JSON");
        let labels = r
            .expert_image_labels
            .as_ref()
            .map(|ls| ls.iter().map(u8::to_string).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.record_id,
            r.center_id,
            report_json,
            r.image_refs.join(";"),
            r.expert_report_label.map(|v| v.to_string()).unwrap_or_default(),
            labels,
            r.pathology.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Decode one RGB image from disk.
pub fn load_image(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        img.get_pixel(c as u32, r as u32)[ch]
    }))
}

/// Load every frame of a record, in manifest order.
pub fn load_record_images(record: &ColonoscopyRecord, base: &Path) -> Result<Vec<ImageSample>> {
    record
        .image_refs
        .iter()
        .map(|rel| {
            let pixels = load_image(&base.join(rel)).map_err(|_| Error::MissingImage {
                record_id: record.record_id.clone(),
                path: rel.clone(),
            })?;
            Ok(ImageSample {
                image_id: rel.clone(),
                pixels,
                record_id: record.record_id.clone(),
            })
        })
        .collect()
}

/// Deterministically partition records into named splits.
///
/// Sizes are assigned by largest remainder over the (sorted) split names,
/// then a seeded shuffle of the record ids is chunked in name order. The
/// result depends only on the record ids, the fractions and the seed.
pub fn split_dataset(
    records: &[ColonoscopyRecord],
    fractions: &BTreeMap<String, f64>,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    if fractions.is_empty() {
        return Err(Error::Config("split requires at least one fraction".into()));
    }
    for (name, &f) in fractions {
        if !(0.0..=1.0).contains(&f) || !f.is_finite() {
            return Err(Error::Config(format!("split fraction {name}={f} outside [0, 1]")));
        }
    }
    let total: f64 = fractions.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
    }

    let n = records.len();
    let mut sizes: Vec<(String, usize, f64)> = fractions
        .iter()
        .map(|(name, &f)| {
            let exact = f * n as f64;
            (name.clone(), exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = sizes.iter().map(|(_, b, _)| b).sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        sizes[b].2
            .partial_cmp(&sizes[a].2)
            .unwrap()
            .then_with(|| sizes[a].0.cmp(&sizes[b].0))
    });
    for k in 0..(n - assigned) {
        sizes[order[k % order.len()]].1 += 1;
    }

    let mut ids: Vec<&String> = records.iter().map(|r| &r.record_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let mut out = Vec::new();
    let mut cursor = 0;
    for (name, size, _) in sizes {
        let chunk: BTreeSet<String> =
            ids[cursor..cursor + size].iter().map(|s| (*s).clone()).collect();
        cursor += size;
        out.push(DatasetSplit { name, record_ids: chunk });
    }
    Ok(out)
}

/// Attach a report-level label to every record and load its frames.
///
/// `labels` maps record_id to a 0/1 label; a record without one is an error
/// (weak labels must exist before bags can be formed).
pub fn build_bags(
    records: &[ColonoscopyRecord],
    labels: &BTreeMap<String, u8>,
    base: &Path,
) -> Result<Vec<Bag>> {
    records
        .iter()
        .map(|r| {
            let label = *labels
                .get(&r.record_id)
                .ok_or_else(|| Error::MissingLabel { record_id: r.record_id.clone() })?;
            assert!(label <= 1, "bag label must be 0/1");
            Ok(Bag {
                record_id: r.record_id.clone(),
                instances: load_record_images(r, base)?,
                label,
            })
        })
        .collect()
}

/// Write a tiny RGB PNG; shared by tests and the synthetic generator.
pub fn write_image(pixels: &Array3<u8>, path: &Path) -> Result<()> {
    let (h, w, c) = pixels.dim();
    assert_eq!(c, 3, "expected RGB");
    let mut buf = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for cc in 0..w {
            for ch in 0..3 {
                buf.push(pixels[[r, cc, ch]]);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.tsv")
}
