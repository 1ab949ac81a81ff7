//! Images, labels, splits and their on-disk layout.

pub mod augment;
pub mod labels;
pub mod pgm;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use augment::{augment_pair, AugmentConfig, RngStream};
pub use labels::{load_labels_csv, parse_labels_csv, LabelTable};
pub use pgm::{load_pgm, write_pgm, GrayImage};
pub use synth::{generate_synthetic, generate_with, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";

/// Square single-channel image with a multi-hot label vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub size: usize,
    /// `size × size` row-major pixels in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub splits: Vec<Split>,
    pub classes: usize,
    pub size: usize,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, splits: Vec<Split>, classes: usize, size: usize) -> Result<Self> {
        if samples.len() != splits.len() {
            return Err(Error::Contract("one split tag per sample is required".into()));
        }
        for s in &samples {
            if s.size != size || s.pixels.len() != size * size {
                return Err(Error::dim("dataset", format!("sample `{}` is not {size}×{size}", s.id)));
            }
            if s.labels.len() != classes || s.labels.iter().any(|&l| l > 1) {
                return Err(Error::Contract(format!("sample `{}` has an invalid label vector", s.id)));
            }
            if s.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Contract(format!("sample `{}` has pixels outside [0, 1]", s.id)));
            }
        }
        Ok(Dataset {
            samples,
            splits,
            classes,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// On-disk dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub image_paths: Vec<String>,
    pub label_path: String,
    pub split: Vec<Split>,
}

/// Writes `<id>.pgm` files, `labels.csv` and `manifest.json` into `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut table = LabelTable::new((0..ds.classes).map(|c| format!("c{c}")).collect());
    let mut image_paths = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let name = format!("{}.pgm", s.id);
        let img = GrayImage {
            width: s.size,
            height: s.size,
            pixels: s.pixels.clone(),
        };
        write_pgm(&img, &dir.join(&name))?;
        table.insert(s.id.clone(), s.labels.clone())?;
        image_paths.push(name);
    }
    let label_path = dir.join(LABELS_FILE);
    std::fs::write(&label_path, table.to_csv()).map_err(|e| Error::io(&label_path, e))?;
    let manifest = Manifest {
        ids: ds.samples.iter().map(|s| s.id.clone()).collect(),
        image_paths,
        label_path: LABELS_FILE.into(),
        split: ds.splits.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Accepts either a dataset directory or the path of its manifest.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        detail: e.to_string(),
    })?;
    let root = mpath.parent().unwrap_or(Path::new("."));
    if manifest.ids.len() != manifest.image_paths.len() || manifest.ids.len() != manifest.split.len() {
        return Err(Error::Format {
            path: mpath,
            detail: "ids, image_paths and split differ in length".into(),
        });
    }
    let table = load_labels_csv(&root.join(&manifest.label_path))?;
    let mut samples = Vec::with_capacity(manifest.ids.len());
    let mut size = None;
    for (id, rel) in manifest.ids.iter().zip(&manifest.image_paths) {
        let img = load_pgm(&root.join(rel))?;
        if img.width != img.height {
            return Err(Error::dim("load_dataset", format!("`{id}` is {}×{}, not square", img.width, img.height)));
        }
        size.get_or_insert(img.width);
        let labels = table
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no labels for `{id}`")))?
            .to_vec();
        samples.push(ImageSample {
            id: id.clone(),
            size: img.width,
            pixels: img.pixels,
            labels,
        });
    }
    let size = size.ok_or_else(|| Error::Contract("dataset is empty".into()))?;
    Dataset::new(samples, manifest.split, table.classes.len(), size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(12, 3, 16, 4).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.splits, ds.splits);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&back, dir2.path()).unwrap();
        for name in ["manifest.json", "labels.csv", "img0003.pgm"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap()
            );
        }
    }
}
