//! White-frame compositing and the single-image and universal frame
//! optimizers.

use std::path::Path;

use ndarray::{s, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{encode_png, load_png, sha256_hex, ArtifactKind, ArtifactRecord};
use crate::attack::{
    apply_patch, patch_objective_grad, regularizer_grad, AdversarialPatch, AttackConfig, PrintabilityPalette, TransformSample,
};
use crate::dataset::{sample_subset, LabeledDataset};
use crate::detector::{DetectorHandle, ObjectnessField};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::seed::{derive_indexed, derive_seed};

/// Image side the nominal thicknesses refer to.
pub const REFERENCE_SIZE: usize = 416;

/// Thickness at working resolution `size` for a nominal thickness `t` at
/// [`REFERENCE_SIZE`].
pub fn scaled_thickness(t: usize, size: usize) -> usize {
    (t as f64 * size as f64 / REFERENCE_SIZE as f64).round() as usize
}

/// Learnable border `w` around an `H x W` image. The pattern covers the
/// whole `(H + 2t) x (W + 2t)` canvas; its interior is held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteFrame {
    pub thickness: usize,
    pub pattern: Array3<f64>,
    pub universal: bool,
    pub canonical_hw: (usize, usize),
    /// Defense error after each epoch (universal frames).
    pub err_trace: Vec<f64>,
}

impl WhiteFrame {
    pub fn new(thickness: usize, canonical_hw: (usize, usize), pattern: Array3<f64>) -> Result<Self> {
        let want = (canonical_hw.0 + 2 * thickness, canonical_hw.1 + 2 * thickness, 3);
        if pattern.dim() != want {
            return Err(Error::Shape(format!("frame pattern is {:?}, expected {want:?}", pattern.dim())));
        }
        let mut f = Self {
            thickness,
            pattern,
            universal: false,
            canonical_hw,
            err_trace: Vec::new(),
        };
        f.clamp();
        Ok(f)
    }

    pub fn filled(thickness: usize, canonical_hw: (usize, usize), value: f64) -> Self {
        let dim = (canonical_hw.0 + 2 * thickness, canonical_hw.1 + 2 * thickness, 3);
        Self::new(thickness, canonical_hw, Array3::from_elem(dim, value)).expect("consistent shape")
    }

    /// Clamped Gaussian noise on the border.
    pub fn gaussian(thickness: usize, canonical_hw: (usize, usize), mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(mean, std).expect("finite std");
        let dim = (canonical_hw.0 + 2 * thickness, canonical_hw.1 + 2 * thickness, 3);
        Self::new(thickness, canonical_hw, Array3::from_shape_fn(dim, |_| normal.sample(rng))).expect("consistent shape")
    }

    pub fn canvas_hw(&self) -> (usize, usize) {
        (self.pattern.dim().0, self.pattern.dim().1)
    }

    pub fn is_border(&self, y: usize, x: usize) -> bool {
        let t = self.thickness;
        let (h, w) = self.canonical_hw;
        y < t || x < t || y >= t + h || x >= t + w
    }

    /// Clamps the border to `[0, 1]` and zeroes the interior.
    pub fn clamp(&mut self) {
        self.pattern.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        let t = self.thickness;
        let (h, w) = self.canonical_hw;
        self.pattern.slice_mut(s![t..t + h, t..t + w, ..]).fill(0.0);
    }

    /// Normalized rectangle of the image inside the framed canvas.
    pub fn window(&self) -> FieldWindow {
        let (ch, cw) = self.canvas_hw();
        let t = self.thickness as f64;
        FieldWindow {
            y0: t / ch as f64,
            x0: t / cw as f64,
            y1: (t + self.canonical_hw.0 as f64) / ch as f64,
            x1: (t + self.canonical_hw.1 as f64) / cw as f64,
        }
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_array(self.pattern.clone()).expect("frame values are valid pixels")
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&encode_png(&self.to_image())?))
    }

    /// Writes the canvas PNG (interior zeroed) and its metadata sidecar.
    pub fn save(&self, path: &Path, seed: u64, config_digest: &str, nominal_thickness: Option<usize>) -> Result<ArtifactRecord> {
        let mut rec = ArtifactRecord::new(ArtifactKind::Frame, path, seed, config_digest)
            .with("thickness", self.thickness)
            .with("canonical_h", self.canonical_hw.0)
            .with("canonical_w", self.canonical_hw.1)
            .with("universal", self.universal)
            .with("err_trace", serde_json::to_string(&self.err_trace)?);
        if let Some(t) = nominal_thickness {
            rec = rec.with("nominal_thickness", t).with("reference_size", REFERENCE_SIZE);
        }
        rec.write(&encode_png(&self.to_image())?)?;
        Ok(rec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rec = ArtifactRecord::open(path)?;
        if rec.kind != ArtifactKind::Frame {
            return Err(Error::Metadata(format!("{} is not a frame artifact", path.display())));
        }
        let img = load_png(path)?;
        let mut frame = Self::new(
            rec.get_parsed("thickness")?,
            (rec.get_parsed("canonical_h")?, rec.get_parsed("canonical_w")?),
            img.into_array(),
        )?;
        frame.universal = rec.get_parsed("universal")?;
        frame.err_trace = serde_json::from_str(rec.get("err_trace")?)?;
        Ok(frame)
    }
}

/// Places the frame around `x`. The interior of the result is `x` itself.
pub fn apply_frame(x: &ImageTensor, w: &WhiteFrame) -> Result<ImageTensor> {
    if x.dims() != w.canonical_hw {
        return Err(Error::Shape(format!(
            "image is {:?} but the frame was built for {:?}",
            x.dims(),
            w.canonical_hw
        )));
    }
    if w.thickness == 0 {
        return Ok(x.clone());
    }
    let t = w.thickness;
    let (h, wd) = w.canonical_hw;
    let mut canvas = w.pattern.clone();
    canvas.slice_mut(s![t..t + h, t..t + wd, ..]).assign(x.as_array());
    ImageTensor::from_array(canvas)
}

/// Splits a gradient on the framed canvas into `(d image, d pattern)`.
pub fn frame_backward(w: &WhiteFrame, grad: ArrayView3<'_, f64>) -> (Array3<f64>, Array3<f64>) {
    let t = w.thickness;
    let (h, wd) = w.canonical_hw;
    let d_x = grad.slice(s![t..t + h, t..t + wd, ..]).to_owned();
    let mut d_w = grad.to_owned();
    d_w.slice_mut(s![t..t + h, t..t + wd, ..]).fill(0.0);
    (d_x, d_w)
}

/// Maps boxes detected on a framed canvas back to the unframed image.
/// Boxes centred on the border describe frame content and are dropped.
pub fn unframe_boxes(boxes: &[BoundingBox], w: &WhiteFrame) -> Vec<BoundingBox> {
    let win = w.window();
    boxes
        .iter()
        .filter(|b| (win.x0..win.x1).contains(&b.cx) && (win.y0..win.y1).contains(&b.cy))
        .filter_map(|b| {
            let mut nb = *b;
            nb.cx = (b.cx - win.x0) / (win.x1 - win.x0);
            nb.cy = (b.cy - win.y0) / (win.y1 - win.y0);
            nb.w = b.w / (win.x1 - win.x0);
            nb.h = b.h / (win.y1 - win.y0);
            nb.clipped()
        })
        .collect()
}

/// Where the clean image sits inside the defended input, in normalized
/// coordinates of the defended input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldWindow {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl FieldWindow {
    pub const FULL: FieldWindow = FieldWindow {
        y0: 0.0,
        x0: 0.0,
        y1: 1.0,
        x1: 1.0,
    };
}

fn resample_taps(i: usize, n_clean: usize, lo: f64, hi: f64, n_def: usize) -> [(usize, f64); 2] {
    let u = lo + (i as f64 + 0.5) / n_clean as f64 * (hi - lo);
    let pos = (u * n_def as f64 - 0.5).clamp(0.0, (n_def - 1) as f64);
    let a = pos.floor() as usize;
    let b = (a + 1).min(n_def - 1);
    let f = pos - a as f64;
    [(a, 1.0 - f), (b, f)]
}

/// k-norm distance between a defended field, bilinearly resampled over
/// `window` onto the clean grid, and the clean field. Also returns the
/// gradient with respect to the defended scores.
pub fn field_distance_grad(
    defended: &ObjectnessField,
    clean: &ObjectnessField,
    k: u32,
    window: FieldWindow,
) -> Result<(f64, Array3<f64>)> {
    let (dh, dw, dp) = defended.shape();
    let (ch, cw, cp) = clean.shape();
    if dp != cp {
        return Err(Error::Shape(format!("prior counts differ: {dp} vs {cp}")));
    }
    if k != 1 && k != 2 {
        return Err(Error::invalid(format!("norm k must be 1 or 2, got {k}")));
    }
    let rows: Vec<_> = (0..ch).map(|r| resample_taps(r, ch, window.y0, window.y1, dh)).collect();
    let cols: Vec<_> = (0..cw).map(|c| resample_taps(c, cw, window.x0, window.x1, dw)).collect();
    let mut diff = Array3::zeros((ch, cw, cp));
    for r in 0..ch {
        for c in 0..cw {
            for p in 0..cp {
                let mut v = 0.0;
                for &(ry, wy) in &rows[r] {
                    for &(cx, wx) in &cols[c] {
                        v += wy * wx * defended.scores[[ry, cx, p]];
                    }
                }
                diff[[r, c, p]] = v - clean.scores[[r, c, p]];
            }
        }
    }
    let (dist, d_diff) = if k == 1 {
        (diff.iter().map(|v: &f64| v.abs()).sum::<f64>(), diff.mapv(|v: f64| if v == 0.0 { 0.0 } else { v.signum() }))
    } else {
        let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g = if n > 0.0 { diff.mapv(|v| v / n) } else { Array3::zeros(diff.dim()) };
        (n, g)
    };
    let mut d_def = Array3::zeros((dh, dw, dp));
    for r in 0..ch {
        for c in 0..cw {
            for p in 0..cp {
                let g = d_diff[[r, c, p]];
                if g == 0.0 {
                    continue;
                }
                for &(ry, wy) in &rows[r] {
                    for &(cx, wx) in &cols[c] {
                        d_def[[ry, cx, p]] += wy * wx * g;
                    }
                }
            }
        }
    }
    Ok((dist, d_def))
}

/// The defended field resampled over `window` onto a `grid` of cells, as
/// compared by [`field_distance`].
pub fn resample_field(defended: &ObjectnessField, grid: (usize, usize), window: FieldWindow) -> ObjectnessField {
    let (dh, dw, dp) = defended.shape();
    let rows: Vec<_> = (0..grid.0).map(|r| resample_taps(r, grid.0, window.y0, window.y1, dh)).collect();
    let cols: Vec<_> = (0..grid.1).map(|c| resample_taps(c, grid.1, window.x0, window.x1, dw)).collect();
    ObjectnessField::new(Array3::from_shape_fn((grid.0, grid.1, dp), |(r, c, p)| {
        let mut v = 0.0;
        for &(ry, wy) in &rows[r] {
            for &(cx, wx) in &cols[c] {
                v += wy * wx * defended.scores[[ry, cx, p]];
            }
        }
        v
    }))
}

pub fn field_distance(defended: &ObjectnessField, clean: &ObjectnessField, k: u32, window: FieldWindow) -> Result<f64> {
    Ok(field_distance_grad(defended, clean, k, window)?.0)
}

/// Distance between the predictions on a defended input and on the clean
/// image; `window` locates the clean image inside `x_def`.
pub fn prediction_distance(d: &DetectorHandle, x_def: &ImageTensor, x_clean: &ImageTensor, k: u32, window: FieldWindow) -> Result<f64> {
    let a = d.objectness_field(x_def)?;
    let b = d.objectness_field(x_clean)?;
    field_distance(&a, &b, k, window)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Nominal thickness at [`REFERENCE_SIZE`]; scaled to the working size.
    pub thickness: usize,
    pub epochs: usize,
    pub patch_steps: usize,
    pub frame_steps: usize,
    pub delta: f64,
    pub lr_frame: f64,
    pub norm_k: u32,
    pub subset_m: usize,
    pub max_sweeps: usize,
    pub init_mean: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Patch settings for the inner maximization; its `steps` is unused.
    pub attack: AttackConfig,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            thickness: 80,
            epochs: 10,
            patch_steps: 30,
            frame_steps: 30,
            delta: 0.5,
            lr_frame: 0.03,
            norm_k: 2,
            subset_m: 32,
            max_sweeps: 50,
            init_mean: 0.5,
            init_std: 0.1,
            seed: 0,
            attack: AttackConfig::default(),
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patch_steps == 0 || self.frame_steps == 0 {
            return Err(Error::invalid("epochs, patch_steps and frame_steps must be at least 1"));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::invalid("delta must be positive"));
        }
        if self.lr_frame.is_nan() || self.lr_frame <= 0.0 {
            return Err(Error::invalid("frame learning rate must be positive"));
        }
        if self.norm_k != 1 && self.norm_k != 2 {
            return Err(Error::invalid("norm_k must be 1 or 2"));
        }
        if self.max_sweeps == 0 || self.subset_m == 0 {
            return Err(Error::invalid("max_sweeps and subset_m must be at least 1"));
        }
        self.attack.validate()
    }

    pub fn working_thickness(&self, hw: (usize, usize)) -> usize {
        scaled_thickness(self.thickness, hw.0.min(hw.1))
    }
}

/// SWF loss and its gradient with respect to the frame pattern, given the
/// clean field of `x`.
#[allow(clippy::too_many_arguments)]
pub fn loss_swf_grad(
    d: &DetectorHandle,
    x: &ImageTensor,
    clean: &ObjectnessField,
    boxes: &[BoundingBox],
    p: &AdversarialPatch,
    w: &WhiteFrame,
    t: &TransformSample,
    scale_factor: f64,
    k: u32,
) -> Result<(f64, Array3<f64>)> {
    let patched = apply_patch(x, boxes, p, t, scale_factor)?;
    let framed = apply_frame(&patched, w)?;
    let inf = d.infer(&framed)?;
    let (dist, d_scores) = field_distance_grad(&inf.field, clean, k, w.window())?;
    let d_img = d.backward_scores(&inf, &d_scores);
    Ok((dist, frame_backward(w, d_img.view()).1))
}

/// Distance between the defended, attacked prediction and the clean one.
#[allow(clippy::too_many_arguments)]
pub fn loss_swf(
    d: &DetectorHandle,
    x: &ImageTensor,
    boxes: &[BoundingBox],
    p: &AdversarialPatch,
    w: &WhiteFrame,
    t: &TransformSample,
    scale_factor: f64,
    k: u32,
) -> Result<f64> {
    let clean = d.objectness_field(x)?;
    let patched = apply_patch(x, boxes, p, t, scale_factor)?;
    let framed = apply_frame(&patched, w)?;
    field_distance(&d.objectness_field(&framed)?, &clean, k, w.window())
}

fn eval_transform(image_id: &str, cfg: &DefenseConfig) -> TransformSample {
    TransformSample::keyed(image_id, derive_seed(cfg.seed, "defense-error"), &cfg.attack.ranges, cfg.attack.variant.uses_tps())
}

fn error_with_cache(d: &DetectorHandle, x: &LabeledDataset, clean: &[ObjectnessField], p: &AdversarialPatch, w: &WhiteFrame, cfg: &DefenseConfig) -> Result<f64> {
    let losses: Vec<f64> = x
        .samples
        .par_iter()
        .zip(clean.par_iter())
        .map(|(s, c)| {
            let t = eval_transform(&s.image_id, cfg);
            let patched = apply_patch(&s.image, &s.boxes, p, &t, cfg.attack.patch_scale_factor)?;
            let framed = apply_frame(&patched, w)?;
            field_distance(&d.objectness_field(&framed)?, c, cfg.norm_k, w.window())
        })
        .collect::<Result<_>>()?;
    // fixed summation order
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean SWF loss over `x`, each image with its id-keyed transform.
pub fn defense_error(d: &DetectorHandle, x: &LabeledDataset, p: &AdversarialPatch, w: &WhiteFrame, cfg: &DefenseConfig) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("defense error needs at least one image"));
    }
    let clean = clean_fields(d, x)?;
    error_with_cache(d, x, &clean, p, w, cfg)
}

fn clean_fields(d: &DetectorHandle, x: &LabeledDataset) -> Result<Vec<ObjectnessField>> {
    x.samples.par_iter().map(|s| d.objectness_field(&s.image)).collect()
}

/// Mutable optimizer state shared by the two algorithms.
struct MinMax<'a> {
    d: &'a DetectorHandle,
    cfg: &'a DefenseConfig,
    palette: PrintabilityPalette,
    patch: AdversarialPatch,
    frame: WhiteFrame,
    patch_opt: Adam,
    frame_opt: Adam,
    patch_steps: usize,
    frame_steps: usize,
}

impl<'a> MinMax<'a> {
    fn new(d: &'a DetectorHandle, cfg: &'a DefenseConfig, hw: (usize, usize), label: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, label));
        let frame = WhiteFrame::gaussian(cfg.working_thickness(hw), hw, cfg.init_mean, cfg.init_std, &mut rng);
        let patch = AdversarialPatch::gaussian(cfg.attack.patch_side, cfg.init_mean, cfg.init_std, &mut rng);
        Self {
            d,
            cfg,
            palette: PrintabilityPalette::default(),
            patch_opt: Adam::new(cfg.attack.lr, patch.values.len()),
            frame_opt: Adam::new(cfg.lr_frame, frame.pattern.len()),
            patch,
            frame,
            patch_steps: 0,
            frame_steps: 0,
        }
    }

    fn transform(&self, stream: &str, counter: usize) -> TransformSample {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(self.cfg.seed, stream, counter as u64));
        TransformSample::sample(&mut rng, &self.cfg.attack.ranges, self.cfg.attack.variant.uses_tps())
    }

    fn patch_step(&mut self, x: &ImageTensor, boxes: &[BoundingBox]) -> Result<()> {
        let a = &self.cfg.attack;
        let t = self.transform("defense-patch", self.patch_steps);
        let (obj, g) = patch_objective_grad(
            std::slice::from_ref(self.d),
            a.variant.reduction(),
            x,
            boxes,
            &self.patch,
            &t,
            a.patch_scale_factor,
            Some(&self.frame),
        )?;
        let (reg, mut grad) = regularizer_grad(&self.patch, &a.loss_weights, &self.palette)?;
        grad.scaled_add(a.loss_weights.obj, &g);
        let loss = a.loss_weights.obj * obj + reg;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "defense patch",
                step: self.patch_steps,
            });
        }
        self.patch_opt
            .step(self.patch.values.as_slice_mut().expect("standard layout"), grad.as_slice().expect("standard layout"));
        self.patch.clamp();
        self.patch_steps += 1;
        Ok(())
    }

    fn frame_step(&mut self, x: &ImageTensor, clean: &ObjectnessField, boxes: &[BoundingBox]) -> Result<()> {
        let t = self.transform("defense-frame", self.frame_steps);
        let (loss, grad) = loss_swf_grad(
            self.d,
            x,
            clean,
            boxes,
            &self.patch,
            &self.frame,
            &t,
            self.cfg.attack.patch_scale_factor,
            self.cfg.norm_k,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "frame",
                step: self.frame_steps,
            });
        }
        self.frame_opt
            .step(self.frame.pattern.as_slice_mut().expect("standard layout"), grad.as_slice().expect("standard layout"));
        self.frame.clamp();
        self.frame_steps += 1;
        Ok(())
    }
}

/// Result of [`optimize_swf`] with step-count instrumentation.
#[derive(Debug, Clone)]
pub struct SwfRun {
    pub frame: WhiteFrame,
    pub patch: AdversarialPatch,
    pub patch_steps_run: usize,
    pub frame_steps_run: usize,
}

/// Single white frame for one image, co-trained against a patch on it.
pub fn optimize_swf(d: &DetectorHandle, x: &ImageTensor, boxes: &[BoundingBox], cfg: &DefenseConfig) -> Result<SwfRun> {
    cfg.validate()?;
    if boxes.is_empty() {
        return Err(Error::invalid("single-frame defense needs at least one person box"));
    }
    let clean = d.objectness_field(x)?;
    let mut mm = MinMax::new(d, cfg, x.dims(), "swf-init");
    for _ in 0..cfg.epochs {
        for _ in 0..cfg.patch_steps {
            mm.patch_step(x, boxes)?;
        }
        for _ in 0..cfg.frame_steps {
            mm.frame_step(x, &clean, boxes)?;
        }
    }
    Ok(SwfRun {
        frame: mm.frame,
        patch: mm.patch,
        patch_steps_run: mm.patch_steps,
        frame_steps_run: mm.frame_steps,
    })
}

/// Per-epoch record of the inner frame loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopRecord {
    pub epoch: usize,
    pub err_entry: f64,
    pub err_exit: f64,
    pub sweeps: usize,
    pub hit_cap: bool,
}

#[derive(Debug, Clone)]
pub struct UwfRun {
    pub frame: WhiteFrame,
    pub patch: AdversarialPatch,
    pub inner: Vec<InnerLoopRecord>,
    pub subset_ids: Vec<String>,
    pub patch_steps_run: usize,
    pub frame_steps_run: usize,
}

/// Universal white frame over a random subset of `train`.
///
/// The inner loop sweeps the subset while `Err >= delta`, up to
/// `max_sweeps` times, and keeps the frame from the best sweep so the error
/// at exit never exceeds the error at entry.
pub fn optimize_uwf(d: &DetectorHandle, train: &LabeledDataset, cfg: &DefenseConfig) -> Result<UwfRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("universal frame needs a non-empty training set"));
    }
    let subset = sample_subset(train, cfg.subset_m, derive_seed(cfg.seed, "uwf-subset"))?;
    let hw = subset.samples[0].image.dims();
    if let Some(s) = subset.iter().find(|s| s.image.dims() != hw) {
        return Err(Error::Shape(format!("{} is {:?}, expected {hw:?}; resize first", s.image_id, s.image.dims())));
    }
    let clean = clean_fields(d, &subset)?;
    let mut mm = MinMax::new(d, cfg, hw, "uwf-init");
    mm.frame.universal = true;
    let mut inner = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        for s in subset.iter() {
            for _ in 0..cfg.patch_steps {
                mm.patch_step(&s.image, &s.boxes)?;
            }
        }
        let entry = error_with_cache(d, &subset, &clean, &mm.patch, &mm.frame, cfg)?;
        let mut err = entry;
        let mut best = (entry, mm.frame.pattern.clone());
        let mut sweeps = 0;
        while err >= cfg.delta && sweeps < cfg.max_sweeps {
            for (s, c) in subset.iter().zip(&clean) {
                for _ in 0..cfg.frame_steps {
                    mm.frame_step(&s.image, c, &s.boxes)?;
                }
            }
            sweeps += 1;
            err = error_with_cache(d, &subset, &clean, &mm.patch, &mm.frame, cfg)?;
            if !err.is_finite() {
                return Err(Error::NonFiniteLoss { stage: "defense error", step: epoch });
            }
            if err < best.0 {
                best = (err, mm.frame.pattern.clone());
            }
        }
        let hit_cap = err >= cfg.delta && sweeps == cfg.max_sweeps;
        if hit_cap {
            log::warn!(
                "epoch {epoch}: defense error {:.4} still above delta {} after {sweeps} sweeps",
                best.0,
                cfg.delta
            );
        }
        mm.frame.pattern = best.1;
        mm.frame.err_trace.push(best.0);
        inner.push(InnerLoopRecord {
            epoch,
            err_entry: entry,
            err_exit: best.0,
            sweeps,
            hit_cap,
        });
        log::debug!("uwf epoch {epoch}: err {entry:.4} -> {:.4} in {sweeps} sweeps", best.0);
    }
    Ok(UwfRun {
        frame: mm.frame,
        patch: mm.patch,
        inner,
        subset_ids: subset.iter().map(|s| s.image_id.clone()).collect(),
        patch_steps_run: mm.patch_steps,
        frame_steps_run: mm.frame_steps,
    })
}

#[cfg(test)]
mod tests;
