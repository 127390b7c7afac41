//! Labelled image sets and the plain-text annotation sidecar.
//!
//! Annotation rows are `image_id class_id cx cy w h`, whitespace separated,
//! with `#` starting a comment line. Images live next to it as
//! `<image_id>.png`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::artifact::{load_png, save_png};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::ImageTensor;

pub const ANNOTATION_FILE: &str = "annotations.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: ImageTensor,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, split: Split) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image_id `{}`", s.image_id)));
            }
        }
        Ok(Self { samples, split })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    pub fn get(&self, image_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.image_id == image_id)
    }

    pub fn box_count(&self) -> usize {
        self.samples.iter().map(|s| s.boxes.len()).sum()
    }

    /// Splits into the first `n` samples and the rest, keeping order.
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let n = n.min(self.len());
        (
            LabeledDataset {
                samples: self.samples[..n].to_vec(),
                split: self.split,
            },
            LabeledDataset {
                samples: self.samples[n..].to_vec(),
                split: self.split,
            },
        )
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn take(&self, n: usize) -> LabeledDataset {
        self.split_at(n).0
    }
}

/// One parsed annotation row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub image_id: String,
    pub bbox: BoundingBox,
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRow>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::Annotation {
                line: lineno,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let class_id: u32 = fields[1].parse().map_err(|_| Error::Annotation {
            line: lineno,
            reason: format!("bad class_id `{}`", fields[1]),
        })?;
        let mut nums = [0.0f64; 4];
        for (slot, raw) in nums.iter_mut().zip(&fields[2..]) {
            *slot = raw.parse().map_err(|_| Error::Annotation {
                line: lineno,
                reason: format!("bad number `{raw}`"),
            })?;
        }
        let [cx, cy, w, h] = nums;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(cx) && in_unit(cy) && w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::Annotation {
                line: lineno,
                reason: "box outside normalized range".into(),
            });
        }
        rows.push(AnnotationRow {
            image_id: fields[0].to_string(),
            bbox: BoundingBox {
                cx,
                cy,
                w,
                h,
                class_id,
                score: None,
            },
        });
    }
    Ok(rows)
}

/// Serializes boxes with shortest round-trip float formatting.
pub fn format_annotations(dataset: &LabeledDataset) -> String {
    let mut out = String::from("# image_id class_id cx cy w h\n");
    for s in &dataset.samples {
        for b in &s.boxes {
            writeln!(out, "{} {} {} {} {} {}", s.image_id, b.class_id, b.cx, b.cy, b.w, b.h).unwrap();
        }
    }
    out
}

pub fn load_dataset(image_dir: &Path, annotations: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let rows = parse_annotations(&text)?;

    // group rows by image in order of first appearance
    let mut order: Vec<String> = Vec::new();
    let mut boxes: Vec<Vec<BoundingBox>> = Vec::new();
    for row in rows {
        match order.iter().position(|id| *id == row.image_id) {
            Some(i) => boxes[i].push(row.bbox),
            None => {
                order.push(row.image_id);
                boxes.push(vec![row.bbox]);
            }
        }
    }

    let images: Vec<Result<ImageTensor>> = order
        .par_iter()
        .map(|id| {
            let path = image_dir.join(format!("{id}.png"));
            if !path.exists() {
                return Err(Error::MissingImage {
                    image_id: id.clone(),
                    path,
                });
            }
            load_png(&path)
        })
        .collect();

    let mut samples = Vec::with_capacity(order.len());
    for ((image_id, boxes), image) in order.into_iter().zip(boxes).zip(images) {
        samples.push(Sample {
            image_id,
            image: image?,
            boxes,
        });
    }
    LabeledDataset::new(samples, Split::Train)
}

/// Writes `<id>.png` for each sample plus the annotation file into `dir`.
pub fn save_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset
        .samples
        .par_iter()
        .map(|s| save_png(&s.image, &dir.join(format!("{}.png", s.image_id))))
        .collect::<Result<Vec<()>>>()?;
    let path = dir.join(ANNOTATION_FILE);
    fs::write(&path, format_annotations(dataset)).map_err(|e| Error::io(&path, e))
}

/// Indices of a seeded Fisher-Yates shuffle, truncated to `m`.
pub fn subset_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(m);
    idx
}

pub fn sample_subset(d: &LabeledDataset, m: usize, seed: u64) -> Result<LabeledDataset> {
    if m == 0 || m > d.len() {
        return Err(Error::invalid(format!(
            "subset size {m} must be in 1..={}",
            d.len()
        )));
    }
    let samples = subset_indices(d.len(), m, seed)
        .into_iter()
        .map(|i| d.samples[i].clone())
        .collect();
    Ok(LabeledDataset {
        samples,
        split: d.split,
    })
}
