//! Evaluation protocols: AP, input conditions, adaptive and per-image
//! attacks, thickness sweeps and objectness-map reports.

mod ap;
mod report;

pub use ap::{average_precision, ApResult, ImageCounts, Prediction};
pub use report::{emit_plots, heat_map, objectness_map_report, pr_polyline, MapSummary, ObjectnessReport, PlotFiles, CSV_HEADER};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_patch, optimize_patch, AdversarialPatch, AttackConfig, TransformRanges, TransformSample};
use crate::dataset::{LabeledDataset, Sample};
use crate::defense::{apply_frame, optimize_uwf, unframe_boxes, DefenseConfig, WhiteFrame};
use crate::detector::DetectorHandle;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Runs the detector on every sample and collects scored predictions.
pub fn predictions_for(d: &DetectorHandle, data: &LabeledDataset) -> Result<Vec<Prediction>> {
    let per: Vec<Vec<Prediction>> = data
        .samples
        .par_iter()
        .map(|s| {
            let out = d.detect(&s.image)?;
            Ok(out
                .boxes
                .into_iter()
                .map(|b| Prediction {
                    image_id: s.image_id.clone(),
                    bbox: b,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    SharedPatch,
    PerImagePatch,
    AdaptivePatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    None,
    Swf,
    Uwf,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::None, AttackKind::SharedPatch, AttackKind::PerImagePatch, AttackKind::AdaptivePatch];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::SharedPatch => "shared-patch",
            AttackKind::PerImagePatch => "per-image-patch",
            AttackKind::AdaptivePatch => "adaptive-patch",
        }
    }
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 3] = [DefenseKind::None, DefenseKind::Swf, DefenseKind::Uwf];

    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Swf => "swf",
            DefenseKind::Uwf => "uwf",
        }
    }
}

fn valid_list<T: Copy>(all: &[T], name: impl Fn(&T) -> &'static str) -> String {
    all.iter().map(name).collect::<Vec<_>>().join(", ")
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::invalid(format!("unknown attack `{s}`; expected one of: {}", valid_list(&AttackKind::ALL, AttackKind::as_str)))
        })
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefenseKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::invalid(format!("unknown defense `{s}`; expected one of: {}", valid_list(&DefenseKind::ALL, DefenseKind::as_str)))
        })
    }
}

/// Which attack and defense are applied to the test images. `thickness` is
/// the working frame thickness in pixels (0 without a frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalCondition {
    pub attack: AttackKind,
    pub defense: DefenseKind,
    pub thickness: usize,
}

impl EvalCondition {
    pub fn new(attack: AttackKind, defense: DefenseKind, thickness: usize) -> Result<Self> {
        if attack == AttackKind::AdaptivePatch && defense == DefenseKind::None {
            return Err(Error::invalid("adaptive-patch needs a defense to adapt to"));
        }
        Ok(Self {
            attack,
            defense,
            thickness: if defense == DefenseKind::None { 0 } else { thickness },
        })
    }

    pub fn clean() -> Self {
        Self::new(AttackKind::None, DefenseKind::None, 0).expect("valid condition")
    }

    /// `attack+defense`, e.g. `shared-patch+uwf`.
    pub fn label(&self) -> String {
        format!("{}+{}", self.attack.as_str(), self.defense.as_str())
    }
}

impl fmt::Display for EvalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses `attack+defense`; the thickness is filled in from the frame.
impl FromStr for EvalCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, d) = s
            .split_once('+')
            .ok_or_else(|| Error::invalid(format!("condition `{s}` is not of the form attack+defense")))?;
        EvalCondition::new(a.parse()?, d.parse()?, 0)
    }
}

/// Settings shared by all evaluation protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub seed: u64,
    pub patch_scale_factor: f64,
    pub ranges: TransformRanges,
    pub tps_enabled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::from_attack(&AttackConfig::default(), 0)
    }
}

impl EvalConfig {
    pub fn from_attack(a: &AttackConfig, seed: u64) -> Self {
        Self {
            iou_thresh: 0.5,
            seed,
            patch_scale_factor: a.patch_scale_factor,
            ranges: a.ranges,
            tps_enabled: a.variant.uses_tps(),
        }
    }

    /// Placement transform of the patch on image `image_id`.
    pub fn transform_for(&self, image_id: &str) -> TransformSample {
        TransformSample::keyed(image_id, derive_seed(self.seed, "eval"), &self.ranges, self.tps_enabled)
    }
}

/// Patches and frames a condition may need.
#[derive(Debug, Clone, Copy, Default)]
pub struct Artifacts<'a> {
    pub patch: Option<&'a AdversarialPatch>,
    pub frame: Option<&'a WhiteFrame>,
    pub per_image_patches: Option<&'a HashMap<String, AdversarialPatch>>,
    pub per_image_frames: Option<&'a HashMap<String, WhiteFrame>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: EvalCondition,
    pub ap: f64,
    pub pr_points: Vec<(f64, f64)>,
    pub per_image: Vec<ImageCounts>,
    /// Median wall-clock time of the per-image pipeline.
    pub runtime_ms_per_image: f64,
    pub iou_thresh: f64,
    pub detection_threshold: f64,
    pub warning: Option<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn patch_for<'a>(cond: &EvalCondition, art: &Artifacts<'a>, s: &Sample) -> Result<Option<&'a AdversarialPatch>> {
    match cond.attack {
        AttackKind::None => Ok(None),
        AttackKind::SharedPatch | AttackKind::AdaptivePatch => art.patch.map(Some).ok_or(Error::MissingArtifact("patch")),
        AttackKind::PerImagePatch if s.boxes.is_empty() => Ok(None),
        AttackKind::PerImagePatch => art
            .per_image_patches
            .ok_or(Error::MissingArtifact("per-image patches"))?
            .get(&s.image_id)
            .map(Some)
            .ok_or(Error::MissingArtifact("per-image patch")),
    }
}

fn frame_for<'a>(cond: &EvalCondition, art: &Artifacts<'a>, s: &Sample) -> Result<Option<&'a WhiteFrame>> {
    match cond.defense {
        DefenseKind::None => Ok(None),
        DefenseKind::Uwf => art.frame.map(Some).ok_or(Error::MissingArtifact("frame")),
        DefenseKind::Swf => match art.per_image_frames.and_then(|m| m.get(&s.image_id)) {
            Some(f) => Ok(Some(f)),
            None => art.frame.map(Some).ok_or(Error::MissingArtifact("frame")),
        },
    }
}

/// Scores the pipeline `detector(frame(patch(x)))` on `test`, with the
/// stages the condition asks for. Each image's placement transform is keyed
/// by its id, so conditions are paired.
pub fn evaluate_condition(d: &DetectorHandle, test: &LabeledDataset, cond: EvalCondition, art: Artifacts<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut cond = cond;
    if cond.defense != DefenseKind::None {
        if let Some(f) = art.frame {
            cond.thickness = f.thickness;
        }
    }
    let per: Vec<(Vec<Prediction>, f64)> = test
        .samples
        .par_iter()
        .map(|s| {
            let patch = patch_for(&cond, &art, s)?;
            let frame = frame_for(&cond, &art, s)?;
            let start = Instant::now();
            let mut x = match patch {
                Some(p) => apply_patch(&s.image, &s.boxes, p, &cfg.transform_for(&s.image_id), cfg.patch_scale_factor)?,
                None => s.image.clone(),
            };
            if let Some(f) = frame {
                x = apply_frame(&x, f)?;
            }
            let mut boxes = d.detect(&x)?.boxes;
            if let Some(f) = frame {
                boxes = unframe_boxes(&boxes, f);
            }
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let preds = boxes
                .into_iter()
                .map(|b| Prediction {
                    image_id: s.image_id.clone(),
                    bbox: b,
                })
                .collect();
            Ok((preds, ms))
        })
        .collect::<Result<_>>()?;
    let times = per.iter().map(|(_, t)| *t).collect();
    let preds: Vec<Prediction> = per.into_iter().flat_map(|(p, _)| p).collect();
    let ap = average_precision(&preds, test, cfg.iou_thresh)?;
    Ok(EvalReport {
        condition: cond,
        ap: ap.ap,
        pr_points: ap.pr_points,
        per_image: ap.per_image,
        runtime_ms_per_image: median(times),
        iou_thresh: cfg.iou_thresh,
        detection_threshold: d.detection_threshold,
        warning: ap.warning,
    })
}

/// Outcome of the adaptive protocol.
#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub defended: EvalReport,
    pub patch: AdversarialPatch,
    pub steps_run: usize,
}

/// Optimizes a fresh shared patch on `train` with the frozen frame in every
/// forward pass, then scores `(adaptive-patch, uwf)` on `test`. The frame
/// is never updated.
pub fn adaptive_attack_eval(
    d: &DetectorHandle,
    train: &LabeledDataset,
    test: &LabeledDataset,
    frame: &WhiteFrame,
    cfg: &AttackConfig,
    eval: &EvalConfig,
) -> Result<AdaptiveOutcome> {
    if !frame.universal {
        return Err(Error::invalid("adaptive evaluation needs a universal frame"));
    }
    let run = optimize_patch(std::slice::from_ref(d), train, cfg, Some(frame))?;
    let cond = EvalCondition::new(AttackKind::AdaptivePatch, DefenseKind::Uwf, frame.thickness)?;
    let art = Artifacts {
        patch: Some(&run.patch),
        frame: Some(frame),
        ..Artifacts::default()
    };
    Ok(AdaptiveOutcome {
        defended: evaluate_condition(d, test, cond, art, eval)?,
        patch: run.patch,
        steps_run: run.steps_run,
    })
}

/// Outcome of the per-image protocol.
#[derive(Debug, Clone)]
pub struct PerImageOutcome {
    /// Per-image patches optimized against the frozen frame, scored behind it.
    pub defended: EvalReport,
    /// Per-image patches optimized without a frame, scored without one.
    pub undefended: EvalReport,
    pub patches_optimized: usize,
}

fn per_image_patches(d: &DetectorHandle, test: &LabeledDataset, cfg: &AttackConfig, frame: Option<&WhiteFrame>, label: &str) -> Result<HashMap<String, AdversarialPatch>> {
    let mut out = HashMap::new();
    for s in test.iter().filter(|s| !s.boxes.is_empty()) {
        let one = LabeledDataset::new(vec![s.clone()], test.split)?;
        let c = AttackConfig {
            seed: derive_seed(derive_seed(cfg.seed, label), &s.image_id),
            batch_size: 1,
            ..cfg.clone()
        };
        out.insert(s.image_id.clone(), optimize_patch(std::slice::from_ref(d), &one, &c, frame)?.patch);
    }
    Ok(out)
}

/// Optimizes one patch per test image (`cfg.steps` each) without a frame and
/// against the frozen frame, and scores both pipelines. Images without a
/// person get no patch.
pub fn per_image_attack_eval(d: &DetectorHandle, test: &LabeledDataset, frame: &WhiteFrame, cfg: &AttackConfig, eval: &EvalConfig) -> Result<PerImageOutcome> {
    if !frame.universal {
        return Err(Error::invalid("per-image evaluation needs a universal frame"));
    }
    let plain = per_image_patches(d, test, cfg, None, "per-image")?;
    let adapted = per_image_patches(d, test, cfg, Some(frame), "per-image-framed")?;
    let patches_optimized = adapted.len();
    let undefended = evaluate_condition(
        d,
        test,
        EvalCondition::new(AttackKind::PerImagePatch, DefenseKind::None, 0)?,
        Artifacts {
            per_image_patches: Some(&plain),
            ..Artifacts::default()
        },
        eval,
    )?;
    let defended = evaluate_condition(
        d,
        test,
        EvalCondition::new(AttackKind::PerImagePatch, DefenseKind::Uwf, frame.thickness)?,
        Artifacts {
            per_image_patches: Some(&adapted),
            frame: Some(frame),
            ..Artifacts::default()
        },
        eval,
    )?;
    Ok(PerImageOutcome {
        defended,
        undefended,
        patches_optimized,
    })
}

/// One thickness of a sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub nominal_thickness: usize,
    pub frame: WhiteFrame,
    pub report: EvalReport,
}

/// Optimizes one universal frame per nominal thickness (same seed) and
/// scores `(shared-patch, uwf)` with `patch` on `test`.
pub fn thickness_sweep(
    d: &DetectorHandle,
    train: &LabeledDataset,
    test: &LabeledDataset,
    thicknesses: &[usize],
    cfg: &DefenseConfig,
    patch: &AdversarialPatch,
    eval: &EvalConfig,
) -> Result<Vec<SweepEntry>> {
    if thicknesses.is_empty() {
        return Err(Error::invalid("thickness sweep needs at least one thickness"));
    }
    thicknesses
        .iter()
        .map(|&t| {
            let c = DefenseConfig { thickness: t, ..cfg.clone() };
            let run = optimize_uwf(d, train, &c)?;
            let cond = EvalCondition::new(AttackKind::SharedPatch, DefenseKind::Uwf, run.frame.thickness)?;
            let art = Artifacts {
                patch: Some(patch),
                frame: Some(&run.frame),
                ..Artifacts::default()
            };
            let report = evaluate_condition(d, test, cond, art, eval)?;
            Ok(SweepEntry {
                nominal_thickness: t,
                frame: run.frame,
                report,
            })
        })
        .collect()
}
