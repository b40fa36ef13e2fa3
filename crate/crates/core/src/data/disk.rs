//! On-disk dataset layout.
//!
//! A dataset directory holds three files:
//!
//! * `images.bin`: every image as little-endian `f32`, sample-major, each
//!   image `[C, H, W]` row-major;
//! * `labels.csv`: header `sample_id,subject_id,yaw_rad,pitch_rad`, one row
//!   per sample in storage order;
//! * `manifest.json`: a [`DatasetManifest`].

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SyntheticConfig, GENERATOR_VERSION};
use crate::error::{Error, Result};
use crate::gaze::GazeDirection;

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRange {
    pub yaw_max: f64,
    pub pitch_max: f64,
}

/// Subject ids per split. The two lists are disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub samples: usize,
    pub image_shape: [usize; 3],
    pub label_range: LabelRange,
    pub splits: Splits,
    pub seed: u64,
    pub generator: SyntheticConfig,
}

impl DatasetManifest {
    pub fn for_synthetic(cfg: &SyntheticConfig) -> Self {
        let (test, train) = (0..cfg.subjects as u32).partition(|&s| cfg.is_test_subject(s));
        Self {
            generator_version: GENERATOR_VERSION,
            samples: cfg.samples,
            image_shape: [3, cfg.image_size, cfg.image_size],
            label_range: LabelRange {
                yaw_max: cfg.yaw_max,
                pitch_max: cfg.pitch_max,
            },
            splits: Splits { train, test },
            seed: cfg.seed,
            generator: cfg.clone(),
        }
    }

    pub fn train_split(&self, data: &Dataset) -> Dataset {
        data.filter_subjects(|s| self.splits.train.contains(&s))
    }

    pub fn test_split(&self, data: &Dataset) -> Dataset {
        data.filter_subjects(|s| self.splits.test.contains(&s))
    }
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    sample_id: usize,
    subject_id: u32,
    yaw_rad: f64,
    pitch_rad: f64,
}

/// Writes `data` under `dir`, refusing to replace an existing dataset unless
/// `overwrite` is set.
pub fn write_dataset(dir: &Path, data: &Dataset, manifest: &DatasetManifest, overwrite: bool) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(Error::Exists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))?;

    let path = dir.join(IMAGES_FILE);
    let file = fs::File::create(&path).map_err(Error::io(&path))?;
    let mut w = BufWriter::new(file);
    for v in data.images() {
        w.write_all(&v.to_le_bytes()).map_err(Error::io(&path))?;
    }
    w.flush().map_err(Error::io(&path))?;

    let path = dir.join(LABELS_FILE);
    let mut csv = csv::Writer::from_path(&path).map_err(|source| Error::Csv { path: path.clone(), source })?;
    for (i, (g, s)) in data.labels().iter().zip(data.subjects()).enumerate() {
        let row = LabelRow {
            sample_id: i,
            subject_id: *s,
            yaw_rad: g.yaw,
            pitch_rad: g.pitch,
        };
        csv.serialize(row).map_err(|source| Error::Csv { path: path.clone(), source })?;
    }
    csv.flush().map_err(Error::io(&path))?;

    let text = serde_json::to_string_pretty(manifest).map_err(Error::json(&manifest_path))?;
    fs::write(&manifest_path, text + "\n").map_err(Error::io(&manifest_path))
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;

    let path = dir.join(LABELS_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|source| Error::Csv { path: path.clone(), source })?;
    let mut labels = Vec::with_capacity(manifest.samples);
    let mut subjects = Vec::with_capacity(manifest.samples);
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|source| Error::Csv { path: path.clone(), source })?;
        if row.sample_id != i {
            return Err(Error::Format {
                path,
                reason: format!("row {i} has sample_id {}", row.sample_id),
            });
        }
        labels.push(GazeDirection::new(row.yaw_rad, row.pitch_rad));
        subjects.push(row.subject_id);
    }
    if labels.len() != manifest.samples {
        return Err(Error::Format {
            path,
            reason: format!("{} label rows but the manifest lists {} samples", labels.len(), manifest.samples),
        });
    }

    let path = dir.join(IMAGES_FILE);
    let file = fs::File::open(&path).map_err(Error::io(&path))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(Error::io(&path))?;
    let per: usize = manifest.image_shape.iter().product();
    if bytes.len() != 4 * per * manifest.samples {
        return Err(Error::Format {
            path,
            reason: format!("{} bytes, expected {}", bytes.len(), 4 * per * manifest.samples),
        });
    }
    let images = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let data = Dataset::new(manifest.image_shape, images, labels, subjects)?;
    Ok((data, manifest))
}
