//! Split directories on disk and the in-memory dataset the trainer consumes.
//!
//! Layout:
//!
//! ```text
//! root/manifest.json
//! root/train/image_0000.ppm  root/train/mask_0000.pgm  ...
//! root/val/image_0200.ppm    ...
//! root/test/...
//! ```
//!
//! Indices are global and run consecutively through train, val and test, so
//! no scene appears in two splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{pgm_read, pgm_write, ppm_read, ppm_write};
use super::synth::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::par;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: u64,
    /// Paths relative to the dataset root.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        self.splits.get(split.name()).map_or(&[], Vec::as_slice)
    }
}

/// Serialises with object keys in sorted order and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `n_train + n_val + n_test` scenes and the manifest under `root`.
pub fn generate_split(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    root: impl AsRef<Path>,
) -> Result<Manifest> {
    spec.validate()?;
    let counts = [n_train, n_val, n_test];
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        if n == 0 {
            return Err(Error::Validation(format!(
                "{} count must be ≥ 1",
                split.name()
            )));
        }
    }
    let root = root.as_ref();
    let mut splits = BTreeMap::new();
    let mut next = 0u64;
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        let dir = root.join(split.name());
        create_dir(&dir)?;
        let first = next;
        let samples = par::map_range(n, |i| generate_scene(spec, first + i as u64));
        let mut entries = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            let index = first + i as u64;
            let image = format!("{}/image_{index:04}.ppm", split.name());
            let mask = format!("{}/mask_{index:04}.pgm", split.name());
            ppm_write(root.join(&image), &s.image)?;
            pgm_write(root.join(&mask), spec.size, spec.size, &s.mask)?;
            entries.push(ManifestEntry { index, image, mask });
        }
        next += n as u64;
        splits.insert(split.name().to_string(), entries);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        splits,
    };
    let path = root.join(MANIFEST);
    fs::write(&path, to_sorted_json(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Images and masks of one split, all of the same size.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub masks: Vec<Vec<u8>>,
    pub width: usize,
    pub height: usize,
    /// Source paths or synthetic labels, parallel to `images`.
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<RgbImage>, masks: Vec<Vec<u8>>, names: Vec<String>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        let (width, height) = (first.width, first.height);
        if masks.len() != images.len() || names.len() != images.len() {
            return Err(Error::dim(
                "batch",
                "images, masks and names differ in count",
            ));
        }
        for (i, (img, m)) in images.iter().zip(&masks).enumerate() {
            if img.width != width || img.height != height {
                return Err(Error::dim(
                    "width",
                    format!(
                        "{} is {}x{}, expected {width}x{height}",
                        names[i], img.width, img.height
                    ),
                ));
            }
            if m.len() != width * height {
                return Err(Error::dim(
                    "numel",
                    format!("mask of {} has wrong size", names[i]),
                ));
            }
        }
        Ok(Dataset {
            images,
            masks,
            width,
            height,
            names,
        })
    }

    pub fn load(root: impl AsRef<Path>, split: Split) -> Result<Self> {
        let root = root.as_ref();
        let manifest = Manifest::read(root)?;
        let entries = manifest.entries(split);
        if entries.is_empty() {
            return Err(Error::Validation(format!(
                "split `{}` in {} is empty",
                split.name(),
                root.display()
            )));
        }
        let mut images = Vec::with_capacity(entries.len());
        let mut masks = Vec::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        for e in entries {
            let img = ppm_read(root.join(&e.image))?;
            let (w, h, mask) = pgm_read(root.join(&e.mask))?;
            if (w, h) != (img.width, img.height) {
                return Err(Error::dim(
                    "width",
                    format!("{} does not match its image", e.mask),
                ));
            }
            images.push(img);
            masks.push(mask);
            names.push(e.image.clone());
        }
        Dataset::new(images, masks, names)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Every label must be a class id below `num_classes` or `ignore_index`.
    pub fn check_labels(&self, num_classes: usize, ignore_index: u8) -> Result<()> {
        for (name, m) in self.names.iter().zip(&self.masks) {
            if let Some(&bad) = m
                .iter()
                .find(|&&v| v != ignore_index && usize::from(v) >= num_classes)
            {
                return Err(Error::Validation(format!(
                    "{name} contains label {bad}, model has {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    /// Pixel count per class id (ignored labels dropped).
    pub fn class_histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; num_classes];
        for m in &self.masks {
            for &v in m {
                if let Some(c) = h.get_mut(usize::from(v)) {
                    *c += 1;
                }
            }
        }
        h
    }
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}
