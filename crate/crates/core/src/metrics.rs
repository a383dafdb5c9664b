//! Detection evaluation: IoU, Pascal matching, average precision, CorLoc and
//! segmentation-mask enclosure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pascal overlap criterion.
pub const PASCAL_IOU: f64 = 0.5;

/// Axis-aligned box in pixel coordinates, half-open `[min, max)`, origin at the
/// top-left, `x` along columns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::Invalid(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    /// Clips to `[0, width) × [0, height)`; `None` if nothing is left.
    pub fn clamp(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
        .ok()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Symmetric, 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Tp,
    Fp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchOutcome {
    pub verdicts: Vec<Verdict>,
    pub gt_matched: Vec<bool>,
}

impl MatchOutcome {
    pub fn tp(&self) -> usize {
        self.verdicts.iter().filter(|v| **v == Verdict::Tp).count()
    }

    pub fn fp(&self) -> usize {
        self.verdicts.len() - self.tp()
    }
}

/// Greedy Pascal matching of one class in one image. `detections` must be in
/// descending confidence order. Each detection claims the unmatched ground
/// truth it overlaps most (lowest index on ties); it is a true positive if
/// that overlap reaches `iou_threshold`.
pub fn match_detections(detections: &[BoundingBox], gt: &[BoundingBox], iou_threshold: f64) -> MatchOutcome {
    let mut gt_matched = vec![false; gt.len()];
    let verdicts = detections
        .iter()
        .map(|d| {
            let best = gt
                .iter()
                .enumerate()
                .filter(|(j, _)| !gt_matched[*j])
                .map(|(j, g)| (j, iou(d, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, o)| match acc {
                    Some((_, bo)) if bo >= o => acc,
                    _ => Some((j, o)),
                });
            match best {
                Some((j, o)) if o >= iou_threshold => {
                    gt_matched[j] = true;
                    Verdict::Tp
                }
                _ => Verdict::Fp,
            }
        })
        .collect();
    MatchOutcome { verdicts, gt_matched }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, …, 1.
    Voc11,
}

/// Average precision of a confidence-ordered verdict stream.
pub fn average_precision(verdicts: &[Verdict], n_gt: usize, mode: ApMode) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Empty("average precision of a class without ground truth".into()));
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(verdicts.len());
    for (i, v) in verdicts.iter().enumerate() {
        if *v == Verdict::Tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // envelope[i] = max precision at any rank >= i
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    Ok(match mode {
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (i, &(recall, _)) in points.iter().enumerate() {
                if recall > prev_recall {
                    ap += (recall - prev_recall) * envelope[i];
                    prev_recall = recall;
                }
            }
            ap
        }
        ApMode::Voc11 => {
            let sum: f64 = (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    points
                        .iter()
                        .zip(&envelope)
                        .find(|((r, _), _)| *r >= t - 1e-12)
                        .map_or(0.0, |(_, &p)| p)
                })
                .sum();
            sum / 11.0
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorLocMode {
    /// TP / (TP + FP) over every emitted detection.
    #[default]
    AllDetections,
    /// Fraction of (image, class) pairs with ground truth whose top-scoring
    /// detection of that class is correct.
    PerImageTop1,
}

/// TP / (TP + FP); absent when there are no detections.
pub fn corloc(outcomes: &[MatchOutcome]) -> Option<f64> {
    let tp: usize = outcomes.iter().map(MatchOutcome::tp).sum();
    let fp: usize = outcomes.iter().map(MatchOutcome::fp).sum();
    (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
}

/// Ground-truth annotation of one object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    pub corloc_mode: CorLocMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: PASCAL_IOU,
            ap_mode: ApMode::AllPoint,
            corloc_mode: CorLocMode::AllDetections,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    /// `None` for classes without ground truth (excluded from the mean).
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub corloc: Option<f64>,
    pub n_images: usize,
}

/// mAP and CorLoc over a set of images. `detections[i]` and `ground_truth[i]`
/// belong to image `i`.
pub fn evaluate(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    n_classes: usize,
    config: &EvalConfig,
) -> Result<EvalSummary> {
    if detections.len() != ground_truth.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} detection lists for {} images", detections.len(), ground_truth.len()),
        ));
    }
    let mut per_class_ap = Vec::with_capacity(n_classes);
    let mut all_outcomes = Vec::new();
    let mut top1 = (0usize, 0usize);
    for class in 0..n_classes {
        let gts: Vec<Vec<BoundingBox>> = ground_truth
            .iter()
            .map(|g| g.iter().filter(|a| a.class_id == class).map(|a| a.bbox).collect())
            .collect();
        let n_gt: usize = gts.iter().map(Vec::len).sum();

        // (confidence, image, box) sorted by descending confidence; stable so
        // ties keep image order.
        let mut ranked: Vec<(f64, usize, BoundingBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (d.confidence, i, d.bbox)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut per_image: Vec<Vec<BoundingBox>> = vec![Vec::new(); gts.len()];
        for &(_, i, b) in &ranked {
            per_image[i].push(b);
        }
        let outcomes: Vec<MatchOutcome> = per_image
            .iter()
            .zip(&gts)
            .map(|(d, g)| match_detections(d, g, config.iou_threshold))
            .collect();
        for (o, g) in outcomes.iter().zip(&gts) {
            if !g.is_empty() {
                top1.1 += 1;
                if o.verdicts.first() == Some(&Verdict::Tp) {
                    top1.0 += 1;
                }
            }
        }
        // Replay the per-image verdicts in global confidence order.
        let mut cursor = vec![0usize; gts.len()];
        let verdicts: Vec<Verdict> = ranked
            .iter()
            .map(|&(_, i, _)| {
                let v = outcomes[i].verdicts[cursor[i]];
                cursor[i] += 1;
                v
            })
            .collect();
        per_class_ap.push(if n_gt > 0 {
            Some(average_precision(&verdicts, n_gt, config.ap_mode)?)
        } else {
            None
        });
        all_outcomes.extend(outcomes);
    }
    let scored: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    let corloc = match config.corloc_mode {
        CorLocMode::AllDetections => corloc(&all_outcomes),
        CorLocMode::PerImageTop1 => (top1.1 > 0).then(|| top1.0 as f64 / top1.1 as f64),
    };
    Ok(EvalSummary {
        per_class_ap,
        map,
        corloc,
        n_images: detections.len(),
    })
}

/// Binary 2-D grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.cols + col] = v;
    }

    /// Marks every pixel whose index lies inside an integer-aligned box.
    pub fn fill_box(&mut self, b: &BoundingBox) {
        let (r0, r1) = (b.y_min.max(0.0) as usize, (b.y_max as usize).min(self.rows));
        let (c0, c1) = (b.x_min.max(0.0) as usize, (b.x_max as usize).min(self.cols));
        for r in r0..r1 {
            for c in c0..c1 {
                self.set(r, c, true);
            }
        }
    }
}

/// Tightest half-open box covering every foreground pixel.
pub fn mask_to_bbox(mask: &Mask) -> Result<BoundingBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            if mask.get(r, c) {
                bounds = Some(match bounds {
                    None => (c, r, c, r),
                    Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or_else(|| Error::Empty("mask has no foreground pixels".into()))?;
    BoundingBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
}
