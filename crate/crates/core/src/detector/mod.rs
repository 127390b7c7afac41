//! Detector abstraction around the differentiable objectness field, plus the
//! bundled toy one-stage detector.

mod synth;
mod train;

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::artifact::{digest_f64, ArtifactKind, ArtifactRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::image::{Bilinear, ImageTensor};
use crate::nn::{sigmoid, ToyArch, ToyNet, ToyTape, OUTPUTS_PER_PRIOR};

pub use synth::{generate_synthetic_dataset, generate_with_masks, person_mask, SynthConfig};
pub use train::{objectness_targets, train_toy_detector, ToyTrainConfig, TrainReport};

pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Fill value used by square padding.
pub const PAD_FILL: f64 = 0.5;

/// Post-sigmoid objectness per prior, laid out `(grid_h, grid_w, priors)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessField {
    pub scores: Array3<f64>,
}

impl ObjectnessField {
    pub fn new(scores: Array3<f64>) -> Self {
        Self { scores }
    }

    pub fn from_grid(grid: Array2<f64>) -> Self {
        Self {
            scores: grid.insert_axis(Axis(2)),
        }
    }

    pub fn grid_h(&self) -> usize {
        self.scores.dim().0
    }

    pub fn grid_w(&self) -> usize {
        self.scores.dim().1
    }

    pub fn priors_per_cell(&self) -> usize {
        self.scores.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.scores.dim()
    }

    /// Max over all priors, floored at zero, with the flat argmax.
    pub fn max_with_index(&self) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &v) in self.scores.iter().enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        (best.0.max(0.0), best.1)
    }

    pub fn max(&self) -> f64 {
        self.max_with_index().0
    }

    pub fn mean(&self) -> f64 {
        self.scores.mean().unwrap_or(0.0)
    }
}

/// Raw network output in the network-input frame: `(5 * priors, gh, gw)`.
pub type RawOutput = Array3<f64>;

/// A differentiable grid detector. Implemented by the toy network; other
/// detectors (for example a region-proposal stage) can be adapted by
/// exposing their proposal scores through the same output layout.
pub trait DetectionModel: Send + Sync {
    fn input_hw(&self) -> (usize, usize);
    fn grid_hw(&self) -> (usize, usize);
    fn priors_per_cell(&self) -> usize {
        1
    }
    /// `input` is channel-first `(3, h, w)` at [`Self::input_hw`].
    fn forward<'a>(&'a self, input: ArrayView3<'_, f64>) -> Box<dyn ModelPass + 'a>;
    fn descriptor(&self) -> String;
    fn weights_digest(&self) -> String;
    fn as_toy(&self) -> Option<&ToyNet> {
        None
    }
}

pub trait ModelPass: Send {
    fn raw(&self) -> &RawOutput;
    /// Gradient with respect to the channel-first network input.
    fn backward_input(&self, d_raw: &RawOutput) -> Array3<f64>;
}

struct ToyPass<'a> {
    net: &'a ToyNet,
    tape: ToyTape,
}

impl ModelPass for ToyPass<'_> {
    fn raw(&self) -> &RawOutput {
        &self.tape.output
    }

    fn backward_input(&self, d_raw: &RawOutput) -> Array3<f64> {
        self.net.backward(&self.tape, d_raw, false).0
    }
}

impl DetectionModel for ToyNet {
    fn input_hw(&self) -> (usize, usize) {
        (self.arch.input_size, self.arch.input_size)
    }

    fn grid_hw(&self) -> (usize, usize) {
        let g = self.grid_size();
        (g, g)
    }

    fn forward<'a>(&'a self, input: ArrayView3<'_, f64>) -> Box<dyn ModelPass + 'a> {
        Box::new(ToyPass {
            net: self,
            tape: ToyNet::forward(self, input),
        })
    }

    fn descriptor(&self) -> String {
        serde_json::to_string(&self.arch).expect("arch serializes")
    }

    fn weights_digest(&self) -> String {
        digest_f64(self.flat_params().iter())
    }

    fn as_toy(&self) -> Option<&ToyNet> {
        Some(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Toy,
    ExternalAdapter,
}

/// How an arbitrary image is brought to the network input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocess {
    /// Stretch to the network input (the fixed-size one-stage convention).
    Resize,
    /// Pad bottom/right to a square, then scale to the network input.
    PadSquare,
}

/// Frozen detector plus its preprocessing and decoding settings.
#[derive(Clone)]
pub struct DetectorHandle {
    pub kind: DetectorKind,
    model: Option<Arc<dyn DetectionModel>>,
    pub preprocess: Preprocess,
    pub detection_threshold: f64,
    pub nms_iou: f64,
}

impl std::fmt::Debug for DetectorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DetectorHandle")
            .field("kind", &self.kind)
            .field("initialized", &self.model.is_some())
            .field("preprocess", &self.preprocess)
            .field("detection_threshold", &self.detection_threshold)
            .finish()
    }
}

struct Prep {
    orig_hw: (usize, usize),
    /// side of the padded square, or the original size when stretching
    canvas_hw: (usize, usize),
    plan: Option<Bilinear>,
}

/// A forward pass kept alive for gradient queries.
pub struct Inference<'a> {
    pub field: ObjectnessField,
    pass: Box<dyn ModelPass + 'a>,
    prep: Prep,
}

impl Inference<'_> {
    pub fn raw(&self) -> &RawOutput {
        self.pass.raw()
    }
}

impl DetectorHandle {
    pub fn toy(net: ToyNet) -> Self {
        Self::from_model(DetectorKind::Toy, Arc::new(net))
    }

    pub fn from_model(kind: DetectorKind, model: Arc<dyn DetectionModel>) -> Self {
        Self {
            kind,
            model: Some(model),
            preprocess: Preprocess::Resize,
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }

    /// A handle with no weights; every inference call fails.
    pub fn uninitialized(kind: DetectorKind) -> Self {
        Self {
            kind,
            model: None,
            preprocess: Preprocess::Resize,
            detection_threshold: DEFAULT_DETECTION_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.detection_threshold = threshold;
        self
    }

    pub fn with_preprocess(mut self, preprocess: Preprocess) -> Self {
        self.preprocess = preprocess;
        self
    }

    pub fn model(&self) -> Result<&dyn DetectionModel> {
        self.model.as_deref().ok_or(Error::Uninitialized)
    }

    pub fn weights_digest(&self) -> Result<String> {
        Ok(self.model()?.weights_digest())
    }

    /// Two handles are compatible when they share input and grid geometry.
    pub fn is_compatible(&self, other: &DetectorHandle) -> bool {
        match (self.model(), other.model()) {
            (Ok(a), Ok(b)) => {
                a.input_hw() == b.input_hw()
                    && a.grid_hw() == b.grid_hw()
                    && a.priors_per_cell() == b.priors_per_cell()
            }
            _ => false,
        }
    }

    fn prepare(&self, x: &ImageTensor, input_hw: (usize, usize)) -> (Array3<f64>, Prep) {
        let orig_hw = x.dims();
        let canvas_hw = match self.preprocess {
            Preprocess::Resize => orig_hw,
            Preprocess::PadSquare => {
                let n = orig_hw.0.max(orig_hw.1);
                (n, n)
            }
        };
        let canvas = if canvas_hw == orig_hw {
            x.as_array().clone()
        } else {
            let mut c = Array3::from_elem((canvas_hw.0, canvas_hw.1, 3), PAD_FILL);
            c.slice_mut(s![..orig_hw.0, ..orig_hw.1, ..]).assign(x.as_array());
            c
        };
        let plan = (canvas_hw != input_hw).then(|| Bilinear::new(canvas_hw, input_hw));
        let resized = match &plan {
            Some(p) => p.forward(canvas.view()),
            None => canvas,
        };
        let chw = resized.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
        (
            chw,
            Prep {
                orig_hw,
                canvas_hw,
                plan,
            },
        )
    }

    /// Runs the network and keeps the pass for backward queries.
    pub fn infer(&self, x: &ImageTensor) -> Result<Inference<'_>> {
        let model = self.model()?;
        let (input, prep) = self.prepare(x, model.input_hw());
        let pass = model.forward(input.view());
        let field = field_from_raw(pass.raw(), model.priors_per_cell());
        Ok(Inference { field, pass, prep })
    }

    /// Pulls a raw-output gradient back to the original image, `(h, w, 3)`.
    pub fn backward_raw(&self, inf: &Inference<'_>, d_raw: &RawOutput) -> Array3<f64> {
        let d_input = inf.pass.backward_input(d_raw);
        let d_hwc = d_input.permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
        let d_canvas = match &inf.prep.plan {
            Some(p) => p.backward(d_hwc.view()),
            None => d_hwc,
        };
        let (h, w) = inf.prep.orig_hw;
        if inf.prep.canvas_hw == inf.prep.orig_hw {
            d_canvas
        } else {
            d_canvas.slice(s![..h, ..w, ..]).to_owned()
        }
    }

    /// Gradient of `sum(d_scores * field)` with respect to the image.
    pub fn backward_scores(&self, inf: &Inference<'_>, d_scores: &Array3<f64>) -> Array3<f64> {
        let raw = inf.raw();
        let mut d_raw = Array3::zeros(raw.dim());
        let (gh, gw, priors) = d_scores.dim();
        for p in 0..priors {
            let ch = p * OUTPUTS_PER_PRIOR + 4;
            for y in 0..gh {
                for x in 0..gw {
                    let s = sigmoid(raw[[ch, y, x]]);
                    d_raw[[ch, y, x]] = d_scores[[y, x, p]] * s * (1.0 - s);
                }
            }
        }
        self.backward_raw(inf, &d_raw)
    }

    pub fn objectness_field(&self, x: &ImageTensor) -> Result<ObjectnessField> {
        Ok(self.infer(x)?.field)
    }

    /// Largest objectness over all priors, floored at zero.
    pub fn max_objectness(&self, x: &ImageTensor) -> Result<f64> {
        Ok(self.objectness_field(x)?.max())
    }

    pub fn detect(&self, x: &ImageTensor) -> Result<DetectorOutput> {
        let model = self.model()?;
        let inf = self.infer(x)?;
        let candidates = decode_raw(inf.raw(), model.priors_per_cell());
        let mut kept = Vec::new();
        for b in candidates {
            if b.score.unwrap_or(0.0) < self.detection_threshold {
                continue;
            }
            if let Some(mapped) = self.to_image_frame(&b, &inf.prep) {
                kept.push(mapped);
            }
        }
        let boxes = nms(kept, self.nms_iou);
        Ok(DetectorOutput {
            boxes,
            raw_field: inf.field,
            input_size: model.input_hw(),
        })
    }

    fn to_image_frame(&self, b: &BoundingBox, prep: &Prep) -> Option<BoundingBox> {
        let (h, w) = prep.orig_hw;
        let (ch, cw) = prep.canvas_hw;
        let sx = cw as f64 / w as f64;
        let sy = ch as f64 / h as f64;
        let mut out = *b;
        out.cx = b.cx * sx;
        out.cy = b.cy * sy;
        out.w = b.w * sx;
        out.h = b.h * sy;
        out.clipped()
    }

    /// Persists the toy network as a weights artifact.
    pub fn save_toy(&self, path: &Path, seed: u64, config_digest: &str) -> Result<ArtifactRecord> {
        let model = self.model()?;
        let net = self.toy_net().ok_or_else(|| Error::invalid("only toy detectors can be saved"))?;
        let mut rec = ArtifactRecord::new(ArtifactKind::DetectorWeights, path, seed, config_digest)
            .with("architecture", model.descriptor())
            .with("weights_digest", model.weights_digest())
            .with("preprocess", serde_json::to_string(&self.preprocess)?)
            .with("detection_threshold", self.detection_threshold);
        rec.write(&net.to_bytes())?;
        Ok(rec)
    }

    pub fn load_toy(path: &Path) -> Result<Self> {
        let rec = ArtifactRecord::open(path)?;
        if rec.kind != ArtifactKind::DetectorWeights {
            return Err(Error::Metadata(format!("{} is not a detector-weights artifact", path.display())));
        }
        let arch: ToyArch = serde_json::from_str(rec.get("architecture")?)?;
        let net = ToyNet::from_bytes(arch, &rec.read_payload()?)
            .ok_or_else(|| Error::Metadata("weight payload size does not match architecture".into()))?;
        let mut handle = Self::toy(net);
        if let Ok(p) = rec.get("preprocess") {
            handle.preprocess = serde_json::from_str(p)?;
        }
        if let Ok(t) = rec.get_parsed::<f64>("detection_threshold") {
            handle.detection_threshold = t;
        }
        Ok(handle)
    }

    fn toy_net(&self) -> Option<&ToyNet> {
        self.model.as_deref()?.as_toy()
    }
}

/// Output of [`DetectorHandle::detect`].
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub boxes: Vec<BoundingBox>,
    pub raw_field: ObjectnessField,
    pub input_size: (usize, usize),
}

pub fn field_from_raw(raw: &RawOutput, priors: usize) -> ObjectnessField {
    let (_, gh, gw) = raw.dim();
    ObjectnessField::new(Array3::from_shape_fn((gh, gw, priors), |(y, x, p)| {
        sigmoid(raw[[p * OUTPUTS_PER_PRIOR + 4, y, x]])
    }))
}

/// Decodes one prior: `cx = (col + s(tx)) / G`, `w = s(tw)` and likewise for
/// the vertical axis; all fractions of the network input.
/// Decodes one cell. Centres may sit up to half a cell outside their own
/// cell so that neighbours of the responsible cell can predict the same box.
pub fn decode_cell(t: [f64; 5], row: usize, col: usize, grid: (usize, usize)) -> BoundingBox {
    let (gh, gw) = grid;
    BoundingBox::person(
        (col as f64 - 0.5 + 2.0 * sigmoid(t[0])) / gw as f64,
        (row as f64 - 0.5 + 2.0 * sigmoid(t[1])) / gh as f64,
        sigmoid(t[2]),
        sigmoid(t[3]),
    )
    .with_score(sigmoid(t[4]))
}

/// Regression targets (post-sigmoid) for predicting `b` from cell
/// `(row, col)`, or `None` when its centre is out of that cell's reach.
pub fn encode_box_at(b: &BoundingBox, row: usize, col: usize, grid: (usize, usize)) -> Option<[f64; 4]> {
    let (gh, gw) = grid;
    let ox = (b.cx * gw as f64 - col as f64 + 0.5) / 2.0;
    let oy = (b.cy * gh as f64 - row as f64 + 0.5) / 2.0;
    let reach = 0.01..0.99;
    (reach.contains(&ox) && reach.contains(&oy)).then_some([ox, oy, b.w, b.h])
}

/// Responsible cell and regression targets (post-sigmoid offsets and sizes)
/// for a ground-truth box.
pub fn encode_box(b: &BoundingBox, grid: (usize, usize)) -> (usize, usize, [f64; 4]) {
    let (gh, gw) = grid;
    let fx = (b.cx * gw as f64).clamp(0.0, gw as f64 - 1e-9);
    let fy = (b.cy * gh as f64).clamp(0.0, gh as f64 - 1e-9);
    let (col, row) = (fx.floor() as usize, fy.floor() as usize);
    let ox = (fx - col as f64 + 0.5) / 2.0;
    let oy = (fy - row as f64 + 0.5) / 2.0;
    (row, col, [ox, oy, b.w, b.h])
}

pub fn decode_raw(raw: &RawOutput, priors: usize) -> Vec<BoundingBox> {
    let (_, gh, gw) = raw.dim();
    let mut out = Vec::with_capacity(gh * gw * priors);
    for p in 0..priors {
        let base = p * OUTPUTS_PER_PRIOR;
        for y in 0..gh {
            for x in 0..gw {
                let t = std::array::from_fn(|i| raw[[base + i, y, x]]);
                out.push(decode_cell(t, y, x, (gh, gw)));
            }
        }
    }
    out
}

/// Greedy non-maximum suppression, highest score first. Ties keep input
/// order.
pub fn nms(mut boxes: Vec<BoundingBox>, iou_thresh: f64) -> Vec<BoundingBox> {
    boxes.sort_by(|a, b| {
        b.score
            .unwrap_or(0.0)
            .partial_cmp(&a.score.unwrap_or(0.0))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| iou(k, &b) <= iou_thresh) {
            kept.push(b);
        }
    }
    kept
}
