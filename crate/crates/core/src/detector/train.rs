//! Training loop for the toy grid detector.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{encode_box, encode_box_at, DetectorHandle};
use crate::dataset::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{average_precision, predictions_for};
use crate::geometry::BoundingBox;
use crate::image::{Bilinear, ImageTensor};
use crate::nn::{sigmoid, ToyArch, ToyNet};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainConfig {
    pub arch: ToyArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the training set held out for the AP gate.
    pub holdout_fraction: f64,
    pub min_ap: f64,
    pub positive_weight: f64,
    pub box_weight: f64,
    /// Objectness target spread, as a fraction of the box size in cells.
    pub target_sigma_fraction: f64,
    /// Lower bound on the target spread, in cells.
    pub target_sigma_min: f64,
    /// Cells whose soft target reaches this value also regress the box.
    pub regress_min_target: f64,
    /// Probability of the zoom-out augmentation per sample.
    pub zoom_out_prob: f64,
    pub max_zoom_out: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            arch: ToyArch::default(),
            epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            holdout_fraction: 0.1,
            min_ap: 0.85,
            positive_weight: 5.0,
            box_weight: 5.0,
            target_sigma_fraction: 1.0 / 6.0,
            target_sigma_min: 0.5,
            regress_min_target: 0.3,
            zoom_out_prob: 0.5,
            max_zoom_out: 1.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub holdout_ap: f64,
    pub epoch_losses: Vec<f64>,
    pub weights_digest: String,
}

/// Pastes the image onto a larger canvas and scales back down, shrinking
/// the people in it. The canvas is either the image's mean colour or grey
/// noise of random level and strength.
fn zoom_out(sample: &Sample, factor: f64, rng: &mut ChaCha8Rng) -> (ImageTensor, Vec<BoundingBox>) {
    let (h, w) = sample.image.dims();
    let (ch, cw) = ((h as f64 * factor).round() as usize, (w as f64 * factor).round() as usize);
    let oy = rng.gen_range(0..=ch - h);
    let ox = rng.gen_range(0..=cw - w);
    let arr = sample.image.as_array();
    let mut canvas = if rng.gen_bool(0.5) {
        let mean: [f64; 3] = std::array::from_fn(|c| arr.slice(s![.., .., c]).mean().unwrap_or(0.5));
        Array3::from_shape_fn((ch, cw, 3), |(_, _, c)| mean[c])
    } else {
        let level = rng.gen_range(0.3..0.7);
        let spread = rng.gen_range(0.0..0.15);
        Array3::from_shape_fn((ch, cw, 3), |_| (level + spread * rng.gen_range(-1.0..1.0f64)).clamp(0.0, 1.0))
    };
    canvas.slice_mut(s![oy..oy + h, ox..ox + w, ..]).assign(arr);
    let small = Bilinear::new((ch, cw), (h, w)).forward(canvas.view());
    let boxes = sample
        .boxes
        .iter()
        .map(|b| {
            let mut nb = *b;
            nb.cx = (b.cx * w as f64 + ox as f64) / cw as f64;
            nb.cy = (b.cy * h as f64 + oy as f64) / ch as f64;
            nb.w = b.w * w as f64 / cw as f64;
            nb.h = b.h * h as f64 / ch as f64;
            nb
        })
        .collect();
    (ImageTensor::from_array(small).expect("valid canvas"), boxes)
}

fn hflip(img: &ImageTensor, boxes: &[BoundingBox]) -> (ImageTensor, Vec<BoundingBox>) {
    let arr = img.as_array().slice(s![.., ..;-1, ..]).to_owned();
    let boxes = boxes
        .iter()
        .map(|b| {
            let mut nb = *b;
            nb.cx = 1.0 - b.cx;
            nb
        })
        .collect();
    (ImageTensor::from_array(arr).expect("valid flip"), boxes)
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Soft objectness targets on a `(gh, gw)` grid: an anisotropic Gaussian
/// per box, sized with the box and peaking at 1 on the responsible cell.
/// Also returns, per cell, the index of the box it should regress.
pub fn objectness_targets(
    boxes: &[BoundingBox],
    grid: (usize, usize),
    sigma_fraction: f64,
    sigma_min: f64,
) -> (Array2<f64>, Array2<Option<usize>>) {
    let (gh, gw) = grid;
    let mut target = Array2::<f64>::zeros((gh, gw));
    let mut owner = Array2::<Option<usize>>::from_elem((gh, gw), None);
    for (k, b) in boxes.iter().enumerate() {
        let (gx, gy) = (b.cx * gw as f64, b.cy * gh as f64);
        let sx = (b.w * gw as f64 * sigma_fraction).max(sigma_min);
        let sy = (b.h * gh as f64 * sigma_fraction).max(sigma_min);
        let (row, col, _) = encode_box(b, grid);
        for y in 0..gh {
            for x in 0..gw {
                let v = if (y, x) == (row, col) {
                    1.0
                } else {
                    let dx = (x as f64 + 0.5 - gx) / sx;
                    let dy = (y as f64 + 0.5 - gy) / sy;
                    (-0.5 * (dx * dx + dy * dy)).exp()
                };
                if v > target[[y, x]] {
                    target[[y, x]] = v;
                    owner[[y, x]] = Some(k);
                }
            }
        }
    }
    (target, owner)
}

/// Per-image detection loss and its gradient with respect to the raw output.
fn detection_loss(raw: &Array3<f64>, boxes: &[BoundingBox], cfg: &ToyTrainConfig) -> (f64, Array3<f64>) {
    let (_, gh, gw) = raw.dim();
    let mut grad = Array3::zeros(raw.dim());
    let (target, owner) = objectness_targets(boxes, (gh, gw), cfg.target_sigma_fraction, cfg.target_sigma_min);
    let mut loss = 0.0;
    for y in 0..gh {
        for x in 0..gw {
            let t = target[[y, x]];
            let o = raw[[4, y, x]];
            let weight = 1.0 + (cfg.positive_weight - 1.0) * t;
            loss += weight * (softplus(o) - t * o);
            grad[[4, y, x]] += weight * (sigmoid(o) - t);
            if t < cfg.regress_min_target {
                continue;
            }
            let Some(k) = owner[[y, x]] else { continue };
            let Some(reg) = encode_box_at(&boxes[k], y, x, (gh, gw)) else { continue };
            for (c, r) in reg.iter().enumerate() {
                let s = sigmoid(raw[[c, y, x]]);
                let diff = s - r;
                loss += cfg.box_weight * t * diff * diff;
                grad[[c, y, x]] += cfg.box_weight * t * 2.0 * diff * s * (1.0 - s);
            }
        }
    }
    (loss, grad)
}

/// Trains the toy detector. Fails when the held-out AP stays below
/// `cfg.min_ap`.
pub fn train_toy_detector(train: &LabeledDataset, cfg: &ToyTrainConfig) -> Result<(DetectorHandle, TrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let n_hold = ((train.len() as f64 * cfg.holdout_fraction).round() as usize).min(train.len() - 1);
    let (fit, holdout) = train.split_at(train.len() - n_hold);

    let mut net = ToyNet::new(cfg.arch, cfg.seed);
    let mut params = net.flat_params();
    let mut opt = Adam::new(cfg.lr, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_7A11);
    let size = cfg.arch.input_size;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // cosine decay over the run
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            // augmentation draws happen sequentially so results do not depend on
            // thread scheduling
            let batch: Vec<(ImageTensor, Vec<BoundingBox>)> = chunk
                .iter()
                .map(|&i| {
                    let sample = &fit.samples[i];
                    let (mut img, mut boxes) = if rng.gen_bool(cfg.zoom_out_prob) {
                        let f = rng.gen_range(1.0..cfg.max_zoom_out);
                        zoom_out(sample, f, &mut rng)
                    } else {
                        (sample.image.clone(), sample.boxes.clone())
                    };
                    if rng.gen_bool(0.5) {
                        (img, boxes) = hflip(&img, &boxes);
                    }
                    let img = if img.dims() == (size, size) {
                        img
                    } else {
                        crate::image::resize(&img, size, size).expect("valid size")
                    };
                    (img, boxes)
                })
                .collect();

            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|(img, boxes)| {
                    let chw = img.as_array().clone().permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
                    let tape = net.forward(chw.view());
                    let (loss, d_raw) = detection_loss(&tape.output, boxes, cfg);
                    let (_, g) = net.backward(&tape, &d_raw, true);
                    (loss, g.expect("param grads"))
                })
                .collect();

            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; params.len()];
            for (loss, g) in &results {
                epoch_loss += loss;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v * scale;
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: "detector training",
                    step: epoch,
                });
            }
            opt.step(&mut params, &grad);
            net.set_flat_params(&params);
        }
        epoch_losses.push(epoch_loss / fit.len() as f64);
        log::debug!("toy detector epoch {epoch}: loss {:.4}", epoch_losses[epoch]);
    }

    let handle = DetectorHandle::toy(net);
    let holdout_ap = if holdout.is_empty() {
        average_precision(&predictions_for(&handle, &fit)?, &fit, 0.5)?.ap
    } else {
        average_precision(&predictions_for(&handle, &holdout)?, &holdout, 0.5)?.ap
    };
    let report = TrainReport {
        epochs_run: cfg.epochs,
        holdout_ap,
        epoch_losses,
        weights_digest: handle.weights_digest()?,
    };
    if holdout_ap < cfg.min_ap {
        return Err(Error::TrainingBudget {
            ap: holdout_ap,
            required: cfg.min_ap,
        });
    }
    Ok((handle, report))
}
