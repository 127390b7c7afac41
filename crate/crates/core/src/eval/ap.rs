use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, PERSON};

/// A scored detection attributed to one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub image_id: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// `(recall, precision)` after each ranked prediction.
    pub pr_points: Vec<(f64, f64)>,
    pub per_image: Vec<ImageCounts>,
    pub warning: Option<String>,
}

/// VOC-style average precision with all-points interpolation.
///
/// Predictions are ranked by score (ties broken by image id, then input
/// order) and greedily matched to the best unmatched ground-truth box of
/// the same image with IoU at least `iou_thresh`.
pub fn average_precision(preds: &[Prediction], gt: &LabeledDataset, iou_thresh: f64) -> Result<ApResult> {
    let mut order: Vec<(usize, f64)> = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        if p.bbox.class_id != PERSON {
            continue;
        }
        let s = p
            .bbox
            .score
            .ok_or_else(|| Error::invalid(format!("prediction {i} on {} has no score", p.image_id)))?;
        order.push((i, s));
    }
    order.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| preds[a.0].image_id.cmp(&preds[b.0].image_id))
            .then(a.0.cmp(&b.0))
    });

    let gt_boxes: HashMap<&str, Vec<&BoundingBox>> = gt
        .iter()
        .map(|s| (s.image_id.as_str(), s.boxes.iter().filter(|b| b.class_id == PERSON).collect()))
        .collect();
    let n_gt: usize = gt_boxes.values().map(Vec::len).sum();
    let mut matched: HashMap<&str, Vec<bool>> = gt_boxes.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr_points = Vec::with_capacity(order.len());
    let mut precisions = Vec::with_capacity(order.len());
    let mut recalls = Vec::with_capacity(order.len());
    for &(i, _) in &order {
        let p = &preds[i];
        let id = p.image_id.as_str();
        let mut best: Option<(usize, f64)> = None;
        if let (Some(boxes), Some(used)) = (gt_boxes.get(id), matched.get(id)) {
            for (j, g) in boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&p.bbox, g);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
        }
        let entry = counts.entry(id).or_default();
        match best {
            Some((j, _)) => {
                matched.get_mut(id).expect("matched image")[j] = true;
                tp += 1;
                entry.0 += 1;
            }
            None => {
                fp += 1;
                entry.1 += 1;
            }
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        let precision = tp as f64 / (tp + fp) as f64;
        recalls.push(recall);
        precisions.push(precision);
        pr_points.push((recall, precision));
    }

    let mut warning = None;
    let ap = if n_gt == 0 {
        let msg = if order.is_empty() {
            "no ground truth and no predictions: AP defined as 1"
        } else {
            "no ground truth boxes: AP is 0"
        };
        log::warn!("{msg}");
        warning = Some(msg.to_string());
        if order.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        // precision envelope from the right
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            precisions[i] = precisions[i].max(precisions[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for (r, p) in recalls.iter().zip(&precisions) {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
        ap
    };

    let per_image = gt
        .iter()
        .map(|s| {
            let (t, f) = counts.get(s.image_id.as_str()).copied().unwrap_or_default();
            let n = gt_boxes.get(s.image_id.as_str()).map_or(0, Vec::len);
            ImageCounts {
                image_id: s.image_id.clone(),
                tp: t,
                fp: f,
                fn_: n - t,
            }
        })
        .collect();

    Ok(ApResult {
        ap: ap.clamp(0.0, 1.0),
        pr_points,
        per_image,
        warning,
    })
}
