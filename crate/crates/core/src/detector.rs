//! Single-shot anchor-grid detector.
//!
//! Four stride-2 convolution blocks reduce the input to a `grid`×`grid`
//! feature map; a 3×3 neck and a 1×1 head then predict, per cell and anchor,
//! `[objectness, tx, ty, tw, th, class logits...]`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{resize_bilinear, DatasetManifest, Image};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, iou, Annotation, BoundingBox, Detection, EvalConfig, EvalSummary};
use crate::nets::conv;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

pub const N_BLOCKS: usize = 4;
pub const POSITIVE_IOU: f64 = 0.5;
pub const IGNORE_IOU: f64 = 0.4;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
const LEAKY_SLOPE: f64 = 0.1;
const HEAD_STD: f64 = 0.01;
/// Decoded log-size offsets are clamped to this magnitude.
const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub n_classes: usize,
    pub grid: usize,
    /// Square anchor sides as fractions of the image side.
    pub anchors: Vec<f64>,
    pub base_width: usize,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            grid: 4,
            anchors: vec![0.25, 0.5],
            base_width: 16,
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.grid == 0 || self.base_width == 0 || self.anchors.is_empty() {
            return Err(Error::Config("detector needs classes, a grid, a width and anchors".into()));
        }
        if let Some(a) = self.anchors.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Config(format!("detector anchor size {a} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn input_side(&self) -> usize {
        self.grid << N_BLOCKS
    }

    pub fn cell(&self) -> f64 {
        (1 << N_BLOCKS) as f64
    }

    pub fn n_anchors(&self) -> usize {
        self.grid * self.grid * self.anchors.len()
    }

    pub fn channels_per_anchor(&self) -> usize {
        5 + self.n_classes
    }

    pub fn head_channels(&self) -> usize {
        self.anchors.len() * self.channels_per_anchor()
    }

    fn width(&self, block: usize) -> usize {
        self.base_width << block.min(2)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut cin = 3;
        for i in 0..N_BLOCKS {
            let c = self.width(i);
            n += c * cin * 9 + c;
            cin = c;
        }
        n += cin * cin * 9 + cin;
        n + self.head_channels() * cin + self.head_channels()
    }

    /// Anchor `a` in flat order `(row, col, k)`.
    pub fn anchor_box(&self, a: usize) -> BoundingBox {
        let k = a % self.anchors.len();
        let cell = a / self.anchors.len();
        let (row, col) = (cell / self.grid, cell % self.grid);
        let s = self.cell();
        let side = self.anchors[k] * self.input_side() as f64;
        BoundingBox::from_center((col as f64 + 0.5) * s, (row as f64 + 0.5) * s, side, side)
            .expect("positive anchor size")
    }

    pub fn anchor_boxes(&self) -> Vec<BoundingBox> {
        (0..self.n_anchors()).map(|a| self.anchor_box(a)).collect()
    }

    /// Flat index into the head output `[B, A·(5+C), G, G]` of channel `ch`
    /// of anchor `a` in image `b`.
    pub fn head_index(&self, b: usize, a: usize, ch: usize) -> usize {
        let k = a % self.anchors.len();
        let cell = a / self.anchors.len();
        let channel = k * self.channels_per_anchor() + ch;
        ((b * self.head_channels() + channel) * self.grid * self.grid) + cell
    }
}

pub fn build_detector<T: Real>(spec: &DetectorSpec, seed: u64) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut add = |p: &mut ParamSet<T>, name: &str, shape: [usize; 4], std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        p.insert(
            format!("{name}.weight"),
            Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng))),
        );
        p.insert(format!("{name}.bias"), Tensor::zeros([shape[0]]));
    };
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let mut cin = 3;
    for i in 0..N_BLOCKS {
        let c = spec.width(i);
        add(&mut p, &format!("block{i}.conv"), [c, cin, 3, 3], he(cin * 9));
        cin = c;
    }
    add(&mut p, "neck.conv", [cin, cin, 3, 3], he(cin * 9));
    add(&mut p, "head.conv", [spec.head_channels(), cin, 1, 1], HEAD_STD);
    Ok(p)
}

/// Records the detector on `tape`; returns the `[B, A·(5+C), G, G]` head.
pub fn detector_forward_on<T: Real>(tape: &mut Tape<T>, spec: &DetectorSpec, p: &Bound, x: Var) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c != 3 || h != spec.input_side() || w != spec.input_side() {
        return Err(Error::shape(
            "detector_forward",
            format!("input {:?}, expected 3x{s}x{s}", tape.shape(x), s = spec.input_side()),
        ));
    }
    let mut h = x;
    for i in 0..N_BLOCKS {
        h = conv(tape, p, &format!("block{i}.conv"), h, 2, Padding::Zero(1))?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    h = conv(tape, p, "neck.conv", h, 1, Padding::Zero(1))?;
    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    conv(tape, p, "head.conv", h, 1, Padding::Zero(0))
}

pub fn detector_forward<T: Real>(spec: &DetectorSpec, params: &ParamSet<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.leaf(batch.clone(), false);
    let y = detector_forward_on(&mut tape, spec, &bound, x)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
}

impl AnchorAssignment {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(a, l)| match *l {
            AnchorLabel::Positive(g) => Some((a, g)),
            _ => None,
        })
    }
}

/// Threshold matching plus a forced best anchor per ground-truth box, with
/// forced anchors handed out greedily by descending IoU so that two boxes
/// never compete for one anchor.
pub fn match_anchors(gt: &[BoundingBox], spec: &DetectorSpec) -> AnchorAssignment {
    let anchors = spec.anchor_boxes();
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gt.is_empty() {
        return AnchorAssignment { labels };
    }
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    for (a, row) in overlaps.iter().enumerate() {
        let (g, &best) = row
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
            .expect("non-empty gt");
        labels[a] = if best >= POSITIVE_IOU {
            AnchorLabel::Positive(g)
        } else if best >= IGNORE_IOU {
            AnchorLabel::Ignore
        } else {
            AnchorLabel::Negative
        };
    }
    let mut pairs: Vec<(f64, usize, usize)> = overlaps
        .iter()
        .enumerate()
        .flat_map(|(a, row)| row.iter().enumerate().map(move |(g, &o)| (o, g, a)))
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut gt_done = vec![false; gt.len()];
    let mut anchor_forced = vec![false; anchors.len()];
    for (_, g, a) in pairs {
        if !gt_done[g] && !anchor_forced[a] {
            gt_done[g] = true;
            anchor_forced[a] = true;
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    AnchorAssignment { labels }
}

pub fn encode_box(b: &BoundingBox, anchor: &BoundingBox) -> [f64; 4] {
    let (cx, cy) = b.center();
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [(cx - acx) / aw, (cy - acy) / ah, (b.width() / aw).ln(), (b.height() / ah).ln()]
}

pub fn decode_box(t: [f64; 4], anchor: &BoundingBox) -> Result<BoundingBox> {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let lim = |v: f64| v.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    BoundingBox::from_center(acx + t[0] * aw, acy + t[1] * ah, aw * lim(t[2]).exp(), ah * lim(t[3]).exp())
}

/// Objectness BCE over non-ignored anchors, plus class cross-entropy and L1
/// offset regression over positives, all averaged over the batch.
pub fn detector_loss_on<T: Real>(
    tape: &mut Tape<T>,
    spec: &DetectorSpec,
    head: Var,
    gt: &[Vec<Annotation>],
) -> Result<Var> {
    let b = tape.value(head).dims4()?.0;
    if b != gt.len() {
        return Err(Error::shape("detector_loss", format!("{b} images, {} annotation lists", gt.len())));
    }
    let anchors = spec.anchor_boxes();
    let (mut obj_idx, mut obj_t) = (Vec::new(), Vec::new());
    let (mut cls_idx, mut cls_t) = (Vec::new(), Vec::new());
    let (mut box_idx, mut box_t) = (Vec::new(), Vec::new());
    for (i, anns) in gt.iter().enumerate() {
        let boxes: Vec<BoundingBox> = anns.iter().map(|a| a.bbox).collect();
        let assignment = match_anchors(&boxes, spec);
        for (a, label) in assignment.labels.iter().enumerate() {
            match *label {
                AnchorLabel::Ignore => {}
                AnchorLabel::Negative => {
                    obj_idx.push(spec.head_index(i, a, 0));
                    obj_t.push(T::zero());
                }
                AnchorLabel::Positive(g) => {
                    obj_idx.push(spec.head_index(i, a, 0));
                    obj_t.push(T::one());
                    for c in 0..spec.n_classes {
                        cls_idx.push(spec.head_index(i, a, 5 + c));
                    }
                    let class_id = anns[g].class_id;
                    if class_id >= spec.n_classes {
                        return Err(Error::Invalid(format!("class {class_id} for a {}-class detector", spec.n_classes)));
                    }
                    cls_t.push(class_id);
                    let enc = encode_box(&anns[g].bbox, &anchors[a]);
                    for (k, v) in enc.into_iter().enumerate() {
                        box_idx.push(spec.head_index(i, a, 1 + k));
                        box_t.push(T::from_f64(v));
                    }
                }
            }
        }
    }
    let n_obj = obj_idx.len();
    let obj = tape.gather(head, obj_idx, [n_obj])?;
    let mut terms = vec![tape.bce_from_logits(obj, &obj_t)?];
    if !cls_t.is_empty() {
        let n_pos = cls_t.len();
        let cls = tape.gather(head, cls_idx, [n_pos, spec.n_classes])?;
        terms.push(tape.softmax_cross_entropy(cls, &cls_t)?);
        let pred = tape.gather(head, box_idx, [n_pos, 4])?;
        let target = tape.leaf(Tensor::new([n_pos, 4], box_t)?, false);
        terms.push(tape.l1_loss(pred, target)?);
    }
    tape.add_all(&terms)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Greedy per-class suppression: keeps detections in descending confidence
/// order unless they overlap a kept one of the same class by more than
/// `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Decodes the head output of image `b` into thresholded, suppressed
/// detections sorted by descending confidence.
pub fn decode_detections<T: Real>(
    spec: &DetectorSpec,
    head: &Tensor<T>,
    b: usize,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let d = head.data();
    let side = spec.input_side() as f64;
    let mut dets = Vec::new();
    for (a, anchor) in spec.anchor_boxes().iter().enumerate() {
        let conf = sigmoid(d[spec.head_index(b, a, 0)].as_f64());
        if conf < conf_threshold {
            continue;
        }
        let t = [1, 2, 3, 4].map(|k| d[spec.head_index(b, a, k)].as_f64());
        let Some(bbox) = decode_box(t, anchor)?.clamp(side, side) else { continue };
        let class_id = (0..spec.n_classes)
            .max_by(|&x, &y| {
                d[spec.head_index(b, a, 5 + x)]
                    .partial_cmp(&d[spec.head_index(b, a, 5 + y)])
                    .expect("finite logits")
                    .then(y.cmp(&x))
            })
            .expect("at least one class");
        dets.push(Detection {
            bbox,
            class_id,
            confidence: conf,
        });
    }
    Ok(nms(dets, nms_iou))
}

/// Resizes an image to the detector input and returns the scale applied to
/// box coordinates.
fn fit_input(spec: &DetectorSpec, img: &Image) -> Result<(Image, f64, f64)> {
    let (_, h, w) = crate::data::dims3(img)?;
    let s = spec.input_side();
    let resized = resize_bilinear(img, s, s)?;
    Ok((resized, s as f64 / w as f64, s as f64 / h as f64))
}

/// Detections for one `[3, H, W]` image, in that image's pixel coordinates.
pub fn detect(
    spec: &DetectorSpec,
    params: &ParamSet<f32>,
    img: &Image,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let (x, sx, sy) = fit_input(spec, img)?;
    let head = detector_forward(spec, params, &crate::data::to_batch(&x)?)?;
    let mut dets = decode_detections(spec, &head, 0, conf_threshold, nms_iou)?;
    if sx != 1.0 || sy != 1.0 {
        for det in &mut dets {
            let b = det.bbox;
            det.bbox = BoundingBox::new(b.x_min / sx, b.y_min / sy, b.x_max / sx, b.y_max / sy)?;
        }
    }
    Ok(dets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Random translations of up to this many pixels, edges clamped.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-3,
            flip: true,
            max_shift: 12,
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("detector epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("detector learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedDetector {
    pub params: ParamSet<f32>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub const DETECTOR_LOSS_HEADER: &str = "epoch,loss";

impl TrainedDetector {
    pub fn loss_csv(&self) -> String {
        let mut s = format!("{DETECTOR_LOSS_HEADER}\n");
        for (e, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", e + 1));
        }
        s
    }
}

fn flip_horizontal(img: &Image, anns: &[Annotation]) -> (Image, Vec<Annotation>) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let data = (0..c * h * w)
        .map(|i| {
            let x = i % w;
            d[i - x + (w - 1 - x)]
        })
        .collect();
    let wf = w as f64;
    let anns = anns
        .iter()
        .map(|a| Annotation {
            class_id: a.class_id,
            bbox: BoundingBox::new(wf - a.bbox.x_max, a.bbox.y_min, wf - a.bbox.x_min, a.bbox.y_max)
                .expect("mirrored box stays valid"),
        })
        .collect();
    (Tensor::new([c, h, w], data).expect("same shape"), anns)
}

/// Shifts content by (dx, dy) with clamped borders. Boxes follow the shift,
/// are clipped to the frame, and are dropped once less than half remains.
fn translate(img: &Image, anns: &[Annotation], dx: isize, dy: isize) -> (Image, Vec<Annotation>) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h as isize {
            let sy = (y - dy).clamp(0, h as isize - 1) as usize;
            for x in 0..w as isize {
                let sx = (x - dx).clamp(0, w as isize - 1) as usize;
                data.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    let (fx, fy) = (dx as f64, dy as f64);
    let anns = anns
        .iter()
        .filter_map(|a| {
            let b = a.bbox;
            let moved = BoundingBox::new(b.x_min + fx, b.y_min + fy, b.x_max + fx, b.y_max + fy).ok()?;
            let kept = moved.clamp(w as f64, h as f64)?;
            (kept.area() >= 0.5 * b.area()).then_some(Annotation {
                class_id: a.class_id,
                bbox: kept,
            })
        })
        .collect();
    (Tensor::new([c, h, w], data).expect("same shape"), anns)
}

/// Adam training on every image of `manifest` with its box annotations.
pub fn train_detector(
    manifest: &DatasetManifest,
    spec: &DetectorSpec,
    cfg: &DetectorTrainConfig,
) -> Result<TrainedDetector> {
    spec.validate()?;
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::Empty("detector training manifest has no samples".into()));
    }
    let mut images = Vec::with_capacity(manifest.len());
    let mut annotations = Vec::with_capacity(manifest.len());
    for (i, s) in manifest.samples.iter().enumerate() {
        let (x, sx, sy) = fit_input(spec, &manifest.load(i)?)?;
        let anns = s
            .boxes()
            .iter()
            .map(|a| {
                let b = a.bbox;
                Ok(Annotation {
                    class_id: a.class_id,
                    bbox: BoundingBox::new(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        images.push(x);
        annotations.push(anns);
    }

    let mut params = build_detector::<f32>(spec, cfg.seed)?;
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: 0.9,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_edde_7ec7);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (mut x, mut g) = (images[i].clone(), annotations[i].clone());
                if cfg.flip && rng.random_bool(0.5) {
                    (x, g) = flip_horizontal(&x, &g);
                }
                if cfg.max_shift > 0 {
                    let m = cfg.max_shift as i64;
                    let (dx, dy) = (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize);
                    (x, g) = translate(&x, &g, dx, dy);
                }
                xs.push(x);
                gts.push(g);
            }
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let xs = xs.iter().map(crate::data::to_batch).collect::<Result<Vec<_>>>()?;
            let x = tape.leaf(Tensor::stack_batch(&xs)?, false);
            let head = detector_forward_on(&mut tape, spec, &bound, x)?;
            let loss = detector_loss_on(&mut tape, spec, head, &gts)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "detector loss".into(),
                });
            }
            tape.backward(loss)?;
            adam.step(&mut params, &bound.grads(&tape))?;
            total += value;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(TrainedDetector { params, epoch_losses })
}

/// Runs the detector over a manifest and scores it against the manifest's boxes.
pub fn detect_manifest(
    spec: &DetectorSpec,
    params: &ParamSet<f32>,
    manifest: &DatasetManifest,
    conf_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    (0..manifest.len())
        .map(|i| detect(spec, params, &manifest.load(i)?, conf_threshold, nms_iou))
        .collect()
}

pub fn evaluate_on(
    manifest: &DatasetManifest,
    detections: &[Vec<Detection>],
    config: &EvalConfig,
) -> Result<EvalSummary> {
    let gt: Vec<Vec<Annotation>> = manifest.samples.iter().map(|s| s.boxes().to_vec()).collect();
    evaluate(detections, &gt, manifest.n_classes(), config)
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image: String,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

pub fn write_detections(path: impl AsRef<Path>, manifest: &DatasetManifest, dets: &[Vec<Detection>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (s, ds) in manifest.samples.iter().zip(dets) {
        for d in ds {
            let rec = DetectionRecord {
                image: s.image.clone(),
                class_id: d.class_id,
                confidence: d.confidence,
                bbox: d.bbox,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a detections file and groups it by the manifest's image order.
/// Records for images outside the manifest are rejected.
pub fn read_detections(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<Vec<Detection>>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let index: BTreeMap<&str, usize> = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.image.as_str(), i))
        .collect();
    let mut out = vec![Vec::new(); manifest.len()];
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let &i = index
            .get(rec.image.as_str())
            .ok_or_else(|| Error::Format(format!("{}:{}: unknown image {}", path.display(), n + 1, rec.image)))?;
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(Error::Format(format!("{}:{}: confidence outside [0, 1]", path.display(), n + 1)));
        }
        out[i].push(Detection {
            bbox: rec.bbox,
            class_id: rec.class_id,
            confidence: rec.confidence,
        });
    }
    Ok(out)
}
