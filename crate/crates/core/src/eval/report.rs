use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::artifact::save_png;
use crate::attack::{apply_patch, AdversarialPatch, TransformSample};
use crate::defense::{apply_frame, field_distance, resample_field, FieldWindow, WhiteFrame};
use crate::detector::{DetectorHandle, ObjectnessField};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::ImageTensor;

pub const CSV_HEADER: &str = "condition,attack,defense,thickness,ap,runtime_ms,seed,config_digest";

/// Pixels per field cell in heat maps.
const CELL_PX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub max_objectness: f64,
    pub mean_objectness: f64,
    /// k=2 field distance to the clean map.
    pub distance_to_clean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectnessReport {
    pub clean: MapSummary,
    pub patched: MapSummary,
    pub defended: MapSummary,
    pub files: Vec<PathBuf>,
}

fn summarize(field: &ObjectnessField, clean: &ObjectnessField, window: FieldWindow) -> Result<MapSummary> {
    Ok(MapSummary {
        max_objectness: field.max(),
        mean_objectness: field.mean(),
        distance_to_clean: field_distance(field, clean, 2, window)?,
    })
}

/// Heat map of the per-cell maximum over priors divided by `vmax`, in a
/// black-red-yellow-white ramp.
pub fn heat_map(field: &ObjectnessField, vmax: f64) -> ImageTensor {
    let (gh, gw, _) = field.shape();
    let scale = if vmax > 0.0 { 1.0 / vmax } else { 0.0 };
    ImageTensor::from_fn(gh * CELL_PX, gw * CELL_PX, |y, x, c| {
        let (r, col) = (y / CELL_PX, x / CELL_PX);
        let v = (0..field.priors_per_cell())
            .map(|p| field.scores[[r, col, p]])
            .fold(0.0f64, f64::max)
            * scale;
        (3.0 * v - c as f64).clamp(0.0, 1.0)
    })
}

/// Writes clean, patched and patched+framed heat maps and a JSON summary
/// into `out_dir`. The defended map is shown on the clean grid, resampled
/// over the image window.
#[allow(clippy::too_many_arguments)]
pub fn objectness_map_report(
    d: &DetectorHandle,
    x: &ImageTensor,
    boxes: &[BoundingBox],
    patch: &AdversarialPatch,
    frame: &WhiteFrame,
    t: &TransformSample,
    scale_factor: f64,
    out_dir: &Path,
) -> Result<ObjectnessReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let clean = d.objectness_field(x)?;
    let patched_img = apply_patch(x, boxes, patch, t, scale_factor)?;
    let patched = d.objectness_field(&patched_img)?;
    let defended_raw = d.objectness_field(&apply_frame(&patched_img, frame)?)?;
    let window = frame.window();
    let defended = resample_field(&defended_raw, (clean.grid_h(), clean.grid_w()), window);

    let vmax = clean.max().max(patched.max()).max(defended.max());
    let mut files = Vec::new();
    for (name, f) in [("clean", &clean), ("patched", &patched), ("defended", &defended)] {
        let path = out_dir.join(format!("objectness_{name}.png"));
        save_png(&heat_map(f, vmax), &path)?;
        files.push(path);
    }
    let json = out_dir.join("objectness.json");
    files.push(json.clone());
    let report = ObjectnessReport {
        clean: summarize(&clean, &clean, FieldWindow::FULL)?,
        patched: summarize(&patched, &clean, FieldWindow::FULL)?,
        defended: MapSummary {
            max_objectness: defended.max(),
            mean_objectness: defended.mean(),
            distance_to_clean: field_distance(&defended_raw, &clean, 2, window)?,
        },
        files,
    };
    fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    Ok(report)
}

/// The drawn PR curve: the report's points preceded by a recall-0 point
/// carrying the first precision.
pub fn pr_polyline(r: &EvalReport) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(r.pr_points.len() + 1);
    if let Some(&(_, p)) = r.pr_points.first() {
        pts.push((0.0, p));
    }
    pts.extend_from_slice(&r.pr_points);
    pts
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub curves: Vec<PathBuf>,
    pub csv: PathBuf,
    pub json: PathBuf,
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

fn draw_curves(reports: &[&EvalReport]) -> RgbImage {
    let (size, margin) = (320u32, 24.0f32);
    let span = size as f32 - 2.0 * margin;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    draw_hollow_rect_mut(&mut img, Rect::at(margin as i32, margin as i32).of_size(span as u32, span as u32), Rgb([0, 0, 0]));
    let to_px = |(r, p): (f64, f64)| (margin + r as f32 * span, margin + (1.0 - p as f32) * span);
    for (i, r) in reports.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let pts = pr_polyline(r);
        for w in pts.windows(2) {
            draw_line_segment_mut(&mut img, to_px(w[0]), to_px(w[1]), color);
        }
    }
    img
}

/// Writes one PR-curve image per condition (one curve per thickness),
/// `results.csv` and `reports.json` into `out_dir`.
pub fn emit_plots(reports: &[EvalReport], out_dir: &Path, seed: u64, config_digest: &str) -> Result<PlotFiles> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to plot"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut groups: BTreeMap<String, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.condition.label()).or_default().push(r);
    }
    let mut curves = Vec::new();
    for (label, rs) in &groups {
        let path = out_dir.join(format!("pr_{label}.png"));
        draw_curves(rs)
            .save(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
        curves.push(path);
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in reports {
        let c = &r.condition;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.label(),
            c.attack.as_str(),
            c.defense.as_str(),
            c.thickness,
            r.ap,
            r.runtime_ms_per_image,
            seed,
            config_digest
        ));
    }
    let csv_path = out_dir.join("results.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = out_dir.join("reports.json");
    fs::write(&json_path, serde_json::to_string_pretty(reports)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(PlotFiles {
        curves,
        csv: csv_path,
        json: json_path,
    })
}
