//! Person-hiding patch attacks: differentiable placement under random
//! transforms, the objectness / smoothness / printability losses and the
//! patch optimizer.

mod losses;
mod tps;

pub use losses::{loss_nps, loss_nps_grad, loss_tv, loss_tv_grad, PrintabilityPalette, TV_EPS};
pub use tps::{tps_control_points, tps_warp, TpsWarp, TPS_GRID};

use std::path::Path;

use ndarray::{Array3, ArrayView3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{encode_png, load_png, ArtifactKind, ArtifactRecord};
use crate::dataset::LabeledDataset;
use crate::defense::{apply_frame, frame_backward, WhiteFrame};
use crate::detector::DetectorHandle;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::image::ImageTensor;
use crate::optim::Adam;
use crate::seed::{derive_indexed, derive_seed};
use tps::{bilinear_taps, from_unit};

pub const DEFAULT_PATCH_SCALE: f64 = 0.3;

/// Square learnable patch `p`, values in `[0, 1]`, layout `(side, side, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPatch {
    pub values: Array3<f64>,
}

impl AdversarialPatch {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h != w || c != 3 || h == 0 {
            return Err(Error::Shape(format!("patch must be side x side x 3, got {h}x{w}x{c}")));
        }
        let mut p = Self { values };
        p.clamp();
        Ok(p)
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self::new(Array3::from_elem((side.max(1), side.max(1), 3), value)).expect("square patch")
    }

    /// Clamped Gaussian noise.
    pub fn gaussian(side: usize, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(mean, std).expect("finite std");
        Self::new(Array3::from_shape_fn((side.max(1), side.max(1), 3), |_| normal.sample(rng))).expect("square patch")
    }

    pub fn side(&self) -> usize {
        self.values.dim().0
    }

    pub fn clamp(&mut self) {
        self.values.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_array(self.values.clone()).expect("patch values are valid pixels")
    }

    pub fn from_image(img: &ImageTensor) -> Result<Self> {
        Self::new(img.as_array().clone())
    }

    /// Digest of the quantized PNG encoding.
    pub fn digest(&self) -> Result<String> {
        Ok(crate::artifact::sha256_hex(&encode_png(&self.to_image())?))
    }

    pub fn save(&self, path: &Path, seed: u64, config_digest: &str, extra: &[(&str, String)]) -> Result<ArtifactRecord> {
        let mut rec = ArtifactRecord::new(ArtifactKind::Patch, path, seed, config_digest).with("side", self.side());
        for (k, v) in extra {
            rec = rec.with(k, v);
        }
        rec.write(&encode_png(&self.to_image())?)?;
        Ok(rec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rec = ArtifactRecord::open(path)?;
        if rec.kind != ArtifactKind::Patch {
            return Err(Error::Metadata(format!("{} is not a patch artifact", path.display())));
        }
        Self::from_image(&load_png(path)?)
    }
}

/// Sampling ranges for [`TransformSample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    pub scale: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub noise: (f64, f64),
    pub rotation_deg: f64,
    /// Largest control-point offset, in units of the half patch side.
    pub tps_max: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            scale: (0.5, 1.0),
            brightness: (-0.1, 0.1),
            contrast: (0.8, 1.2),
            noise: (-0.1, 0.1),
            rotation_deg: 20.0,
            tps_max: 0.1,
        }
    }
}

/// One draw of the placement transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_amplitude: f64,
    pub rotation_deg: f64,
    pub tps_enabled: bool,
    pub tps_displacements: Vec<[f64; 2]>,
    /// Seeds the per-pixel noise field.
    pub noise_seed: u64,
}

impl TransformSample {
    /// Full-size, unrotated, colour-preserving placement.
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_amplitude: 0.0,
            rotation_deg: 0.0,
            tps_enabled: false,
            tps_displacements: vec![[0.0; 2]; TPS_GRID * TPS_GRID],
            noise_seed: 0,
        }
    }

    pub fn sample(rng: &mut impl Rng, ranges: &TransformRanges, tps_enabled: bool) -> Self {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let scale = u(rng, ranges.scale);
        let brightness = u(rng, ranges.brightness);
        let contrast = u(rng, ranges.contrast);
        let noise_amplitude = u(rng, ranges.noise);
        let rotation_deg = u(rng, (-ranges.rotation_deg, ranges.rotation_deg));
        let tps_displacements = (0..TPS_GRID * TPS_GRID)
            .map(|_| {
                if tps_enabled {
                    [u(rng, (-ranges.tps_max, ranges.tps_max)), u(rng, (-ranges.tps_max, ranges.tps_max))]
                } else {
                    [0.0; 2]
                }
            })
            .collect();
        Self {
            scale,
            brightness,
            contrast,
            noise_amplitude,
            rotation_deg,
            tps_enabled,
            tps_displacements,
            noise_seed: rng.gen(),
        }
    }

    /// Transform fixed by an image id, so every evaluation condition sees
    /// the same placement for the same image.
    pub fn keyed(image_id: &str, seed: u64, ranges: &TransformRanges, tps_enabled: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, image_id));
        Self::sample(&mut rng, ranges, tps_enabled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVariant {
    AdvPatch,
    AdvTshirt,
    AdvCloak,
}

impl AttackVariant {
    pub fn reduction(&self) -> ObjReduction {
        match self {
            AttackVariant::AdvCloak => ObjReduction::SumOverPriors,
            _ => ObjReduction::Max,
        }
    }

    pub fn uses_tps(&self) -> bool {
        matches!(self, AttackVariant::AdvTshirt)
    }
}

impl std::str::FromStr for AttackVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adv-patch" => Ok(Self::AdvPatch),
            "adv-tshirt" => Ok(Self::AdvTshirt),
            "adv-cloak" => Ok(Self::AdvCloak),
            other => Err(Error::invalid(format!(
                "unknown attack variant {other:?} (expected adv-patch, adv-tshirt or adv-cloak)"
            ))),
        }
    }
}

/// How the objectness field is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjReduction {
    /// Largest objectness over all priors.
    Max,
    /// Sum over priors of the per-prior clamped objectness.
    SumOverPriors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub obj: f64,
    pub tv: f64,
    pub nps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            obj: 1.0,
            tv: 2.5,
            nps: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: AttackVariant,
    pub steps: usize,
    pub lr: f64,
    pub loss_weights: LossWeights,
    pub patch_scale_factor: f64,
    pub patch_side: usize,
    pub batch_size: usize,
    pub ranges: TransformRanges,
    pub init_mean: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            variant: AttackVariant::AdvPatch,
            steps: 200,
            lr: 0.03,
            loss_weights: LossWeights::default(),
            patch_scale_factor: DEFAULT_PATCH_SCALE,
            patch_side: 24,
            batch_size: 8,
            ranges: TransformRanges::default(),
            init_mean: 0.5,
            init_std: 0.1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("attack steps must be at least 1"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::invalid("attack learning rate must be positive"));
        }
        let w = self.loss_weights;
        if w.obj < 0.0 || w.tv < 0.0 || w.nps < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.patch_side < 2 || self.batch_size == 0 || self.patch_scale_factor.is_nan() || self.patch_scale_factor <= 0.0 {
            return Err(Error::invalid("patch side must be >= 2, batch size >= 1 and scale factor > 0"));
        }
        Ok(())
    }
}

/// A patched image plus what is needed to pull image gradients back to
/// the patch.
#[derive(Debug, Clone)]
pub struct PatchComposite {
    pub image: ImageTensor,
    /// `(output pixel, patch taps)` for every pixel a patch wrote last.
    writes: Vec<(usize, [(usize, f64); 4])>,
    /// `d q / d p` of the colour transform (zero where clamped).
    gain: Array3<f64>,
}

impl PatchComposite {
    /// Pixels covered by at least one patch footprint, as `(y, x)`.
    pub fn footprint(&self) -> Vec<(usize, usize)> {
        let w = self.image.width();
        self.writes.iter().map(|(o, _)| (o / w, o % w)).collect()
    }

    /// Gradient with respect to the patch of a loss whose image gradient is
    /// `grad` (layout `(h, w, 3)`).
    pub fn backward(&self, grad: ArrayView3<'_, f64>) -> Array3<f64> {
        let w = self.image.width();
        let side = self.gain.dim().0;
        let mut d_q = Array3::<f64>::zeros(self.gain.dim());
        for (out, taps) in &self.writes {
            let (y, x) = (out / w, out % w);
            for c in 0..3 {
                let g = grad[[y, x, c]];
                if g == 0.0 {
                    continue;
                }
                for &(idx, wt) in taps {
                    d_q[[idx / side, idx % side, c]] += wt * g;
                }
            }
        }
        d_q * &self.gain
    }
}

fn color_transform(p: &AdversarialPatch, t: &TransformSample) -> (Array3<f64>, Array3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
    let mut q = Array3::zeros(p.values.dim());
    let mut gain = Array3::zeros(p.values.dim());
    for ((idx, v), out) in p.values.indexed_iter().zip(q.iter_mut()) {
        let noise = t.noise_amplitude * rng.gen_range(-1.0..1.0);
        let raw = t.contrast * v + t.brightness + noise;
        *out = raw.clamp(0.0, 1.0);
        if raw > 0.0 && raw < 1.0 {
            gain[idx] = t.contrast;
        }
    }
    (q, gain)
}

/// Composites the transformed patch onto every box, keeping the trace for
/// gradients. Later boxes overwrite earlier ones where footprints overlap.
pub fn composite_patch(
    x: &ImageTensor,
    boxes: &[BoundingBox],
    p: &AdversarialPatch,
    t: &TransformSample,
    scale_factor: f64,
) -> Result<PatchComposite> {
    let (q, gain) = color_transform(p, t);
    let side = p.side();
    let warp = if t.tps_enabled {
        Some(TpsWarp::new(&t.tps_displacements)?)
    } else {
        None
    };
    let (h, w) = x.dims();
    let mut out = x.as_array().clone();
    let mut slot: Vec<Option<usize>> = vec![None; h * w];
    let mut writes: Vec<(usize, [(usize, f64); 4])> = Vec::new();
    let (sin, cos) = t.rotation_deg.to_radians().sin_cos();

    for b in boxes {
        let bw = b.w * w as f64;
        let bh = b.h * h as f64;
        let s = scale_factor * t.scale * bw.min(bh);
        if s.is_nan() || s <= 0.0 {
            continue;
        }
        let (ccx, ccy) = (b.cx * w as f64, b.cy * h as f64);
        let reach = 0.5 * s * (cos.abs() + sin.abs()) + 1.0;
        let y_lo = (ccy - reach).floor().max(0.0) as usize;
        let y_hi = ((ccy + reach).ceil().max(0.0) as usize).min(h);
        let x_lo = (ccx - reach).floor().max(0.0) as usize;
        let x_hi = ((ccx + reach).ceil().max(0.0) as usize).min(w);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let dx = px as f64 + 0.5 - ccx;
                let dy = py as f64 + 0.5 - ccy;
                // rotate back into the patch frame, unit coordinates in [-1, 1]
                let ux = 2.0 * (cos * dx + sin * dy) / s;
                let uy = 2.0 * (-sin * dx + cos * dy) / s;
                if !(-1.0..1.0).contains(&ux) || !(-1.0..1.0).contains(&uy) {
                    continue;
                }
                let [vx, vy] = match &warp {
                    Some(wp) => wp.map([ux, uy]),
                    None => [ux, uy],
                };
                let taps = bilinear_taps(from_unit(vy, side), from_unit(vx, side), side, side);
                let o = py * w + px;
                for c in 0..3 {
                    out[[py, px, c]] = taps.iter().map(|&(i, wt)| wt * q[[i / side, i % side, c]]).sum();
                }
                match slot[o] {
                    Some(k) => writes[k].1 = taps,
                    None => {
                        slot[o] = Some(writes.len());
                        writes.push((o, taps));
                    }
                }
            }
        }
    }
    Ok(PatchComposite {
        image: ImageTensor::from_array(out)?,
        writes,
        gain,
    })
}

/// Places the patch on every person box under transform `t`.
pub fn apply_patch(
    x: &ImageTensor,
    boxes: &[BoundingBox],
    p: &AdversarialPatch,
    t: &TransformSample,
    scale_factor: f64,
) -> Result<ImageTensor> {
    if boxes.is_empty() {
        return Ok(x.clone());
    }
    Ok(composite_patch(x, boxes, p, t, scale_factor)?.image)
}

/// Objectness loss of an image and its gradient with respect to the image,
/// summed over detectors.
pub fn objective_on_image(detectors: &[DetectorHandle], reduction: ObjReduction, img: &ImageTensor) -> Result<(f64, Array3<f64>)> {
    if detectors.is_empty() {
        return Err(Error::invalid("objectness loss needs at least one detector"));
    }
    let (h, w) = img.dims();
    let mut grad = Array3::zeros((h, w, 3));
    let mut total = 0.0;
    for d in detectors {
        let inf = d.infer(img)?;
        let scores = &inf.field.scores;
        let mut d_scores = Array3::zeros(scores.dim());
        match reduction {
            ObjReduction::Max => {
                let (v, idx) = inf.field.max_with_index();
                total += v;
                if v > 0.0 {
                    let (_, gw, pr) = scores.dim();
                    d_scores[[idx / (gw * pr), (idx / pr) % gw, idx % pr]] = 1.0;
                }
            }
            ObjReduction::SumOverPriors => {
                for (s, g) in scores.iter().zip(d_scores.iter_mut()) {
                    total += s.max(0.0);
                    *g = if *s > 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
        grad += &d.backward_scores(&inf, &d_scores);
    }
    Ok((total, grad))
}

/// Objectness loss of the patched image, optionally behind a frame.
pub fn loss_obj(
    detectors: &[DetectorHandle],
    reduction: ObjReduction,
    x: &ImageTensor,
    boxes: &[BoundingBox],
    p: &AdversarialPatch,
    t: &TransformSample,
    scale_factor: f64,
) -> Result<f64> {
    Ok(patch_objective_grad(detectors, reduction, x, boxes, p, t, scale_factor, None)?.0)
}

/// Objectness loss and its patch gradient for the pipeline
/// `detector(frame(patch(x)))`, the frame stage being optional.
#[allow(clippy::too_many_arguments)]
pub fn patch_objective_grad(
    detectors: &[DetectorHandle],
    reduction: ObjReduction,
    x: &ImageTensor,
    boxes: &[BoundingBox],
    p: &AdversarialPatch,
    t: &TransformSample,
    scale_factor: f64,
    frame: Option<&WhiteFrame>,
) -> Result<(f64, Array3<f64>)> {
    let comp = composite_patch(x, boxes, p, t, scale_factor)?;
    let (loss, d_img) = match frame {
        Some(fr) => {
            let framed = apply_frame(&comp.image, fr)?;
            let (loss, d_framed) = objective_on_image(detectors, reduction, &framed)?;
            (loss, frame_backward(fr, d_framed.view()).0)
        }
        None => objective_on_image(detectors, reduction, &comp.image)?,
    };
    Ok((loss, comp.backward(d_img.view())))
}

/// Smoothness and printability terms, normalized per patch element.
pub(crate) fn regularizer_grad(p: &AdversarialPatch, w: &LossWeights, pal: &PrintabilityPalette) -> Result<(f64, Array3<f64>)> {
    let n = p.values.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array3::zeros(p.values.dim());
    if w.tv > 0.0 {
        let (v, g) = loss_tv_grad(p)?;
        loss += w.tv * v / n;
        grad.scaled_add(w.tv / n, &g);
    }
    if w.nps > 0.0 {
        let (v, g) = loss_nps_grad(p, pal);
        loss += w.nps * v / n;
        grad.scaled_add(w.nps / n, &g);
    }
    Ok((loss, grad))
}

/// Result of [`optimize_patch`], with loop instrumentation.
#[derive(Debug, Clone)]
pub struct PatchRun {
    pub patch: AdversarialPatch,
    pub steps_run: usize,
    /// Number of sampled transforms that had TPS enabled.
    pub tps_transforms: usize,
    pub transforms_sampled: usize,
    pub loss_trace: Vec<f64>,
}

/// Optimizes a shared patch over `train` with fresh transforms and image
/// batches every step. With `frame`, every forward pass sees the framed
/// composite.
pub fn optimize_patch(
    detectors: &[DetectorHandle],
    train: &LabeledDataset,
    cfg: &AttackConfig,
    frame: Option<&WhiteFrame>,
) -> Result<PatchRun> {
    cfg.validate()?;
    if detectors.is_empty() {
        return Err(Error::invalid("objectness loss needs at least one detector"));
    }
    let eligible: Vec<usize> = (0..train.len()).filter(|&i| !train.samples[i].boxes.is_empty()).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("patch optimization needs at least one image with a person box"));
    }
    let palette = PrintabilityPalette::default();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "patch-init"));
    let mut patch = AdversarialPatch::gaussian(cfg.patch_side, cfg.init_mean, cfg.init_std, &mut init_rng);
    let mut opt = Adam::new(cfg.lr, patch.values.len());
    let reduction = cfg.variant.reduction();
    let tps = cfg.variant.uses_tps();
    let batch = cfg.batch_size.min(eligible.len());
    let mut run = PatchRun {
        patch: patch.clone(),
        steps_run: 0,
        tps_transforms: 0,
        transforms_sampled: 0,
        loss_trace: Vec::with_capacity(cfg.steps),
    };

    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "eot", step as u64));
        let picks: Vec<usize> = sample_indices(&mut rng, eligible.len(), batch).into_iter().map(|k| eligible[k]).collect();
        let transforms: Vec<TransformSample> = picks.iter().map(|_| TransformSample::sample(&mut rng, &cfg.ranges, tps)).collect();
        run.transforms_sampled += transforms.len();
        run.tps_transforms += transforms.iter().filter(|t| t.tps_enabled).count();

        let parts: Vec<(f64, Array3<f64>)> = picks
            .par_iter()
            .zip(transforms.par_iter())
            .map(|(&i, t)| {
                let s = &train.samples[i];
                patch_objective_grad(detectors, reduction, &s.image, &s.boxes, &patch, t, cfg.patch_scale_factor, frame)
            })
            .collect::<Result<_>>()?;
        let scale = cfg.loss_weights.obj / parts.len() as f64;
        let (mut loss, mut grad) = regularizer_grad(&patch, &cfg.loss_weights, &palette)?;
        for (l, g) in &parts {
            loss += scale * l;
            grad.scaled_add(scale, g);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { stage: "patch", step });
        }
        run.loss_trace.push(loss);
        opt.step(patch.values.as_slice_mut().expect("standard layout"), grad.as_slice().expect("standard layout"));
        patch.clamp();
        run.steps_run += 1;
    }
    run.patch = patch;
    Ok(run)
}

/// Pixel mask of the patched region for analysis and tests.
pub fn footprint_mask(comp: &PatchComposite) -> ndarray::Array2<bool> {
    let (h, w) = comp.image.dims();
    let mut m = ndarray::Array2::from_elem((h, w), false);
    for (y, x) in comp.footprint() {
        m[[y, x]] = true;
    }
    m
}
