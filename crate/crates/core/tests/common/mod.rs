//! Brute-force metric oracles and gradient-check helpers shared by the
//! integration tests.
#![allow(dead_code)]

use dagan::metrics::*;
use dagan::params::ParamSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID: usize = 24;

pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let x0 = rng.random_range(0..GRID - 1);
    let y0 = rng.random_range(0..GRID - 1);
    let x1 = rng.random_range(x0 + 1..=GRID);
    let y1 = rng.random_range(y0 + 1..=GRID);
    BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap()
}

/// IoU by counting covered pixels.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inside = |bx: &BoundingBox, x: usize, y: usize| {
        (x as f64) >= bx.x_min && (x as f64) < bx.x_max && (y as f64) >= bx.y_min && (y as f64) < bx.y_max
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..GRID {
        for x in 0..GRID {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    inter as f64 / union as f64
}

pub fn oracle_match(dets: &[BoundingBox], gts: &[BoundingBox], thr: f64) -> Vec<Verdict> {
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in dets {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let o = raster_iou(d, g);
            if o > best_iou {
                best_iou = o;
                best = Some(j);
            }
        }
        match best {
            Some(j) if best_iou >= thr => {
                used[j] = true;
                out.push(Verdict::Tp);
            }
            _ => out.push(Verdict::Fp),
        }
    }
    out
}

/// Sum over true positives of (1/n_gt) x best precision at or after that rank.
pub fn oracle_ap_all_point(v: &[Verdict], n_gt: usize) -> f64 {
    let prec: Vec<f64> = (0..v.len())
        .map(|i| v[..=i].iter().filter(|x| **x == Verdict::Tp).count() as f64 / (i + 1) as f64)
        .collect();
    (0..v.len())
        .filter(|&k| v[k] == Verdict::Tp)
        .map(|k| prec[k..].iter().copied().fold(0.0, f64::max) / n_gt as f64)
        .sum()
}

pub fn oracle_ap_voc11(v: &[Verdict], n_gt: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let mut best = 0.0f64;
        for i in 0..v.len() {
            let tp = v[..=i].iter().filter(|x| **x == Verdict::Tp).count() as f64;
            if tp / n_gt as f64 >= t - 1e-12 {
                best = best.max(tp / (i + 1) as f64);
            }
        }
        total += best;
    }
    total / 11.0
}

pub struct Scene {
    pub dets: Vec<Vec<Detection>>,
    pub gts: Vec<Vec<Annotation>>,
}

pub fn random_scene(rng: &mut ChaCha8Rng, n_classes: usize) -> Scene {
    let n_images = rng.random_range(1..5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n_images {
        let g: Vec<Annotation> = (0..rng.random_range(0..4))
            .map(|_| Annotation { class_id: rng.random_range(0..n_classes), bbox: random_box(rng) })
            .collect();
        let mut d = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            // Half the detections are jittered copies of ground truth.
            let bbox = match g.get(rng.random_range(0..g.len().max(1) * 2)) {
                Some(a) => {
                    let mut j = |v: f64| (v + rng.random_range(-2.0..2.0f64)).round().clamp(0.0, GRID as f64);
                    BoundingBox::new(j(a.bbox.x_min), j(a.bbox.y_min), j(a.bbox.x_max), j(a.bbox.y_max))
                        .unwrap_or(a.bbox)
                }
                None => random_box(rng),
            };
            // Distinct confidences so the ranking is unambiguous.
            d.push(Detection { bbox, class_id: rng.random_range(0..n_classes), confidence: rng.random::<f64>() });
        }
        dets.push(d);
        gts.push(g);
    }
    Scene { dets, gts }
}

/// From-scratch mAP: walk each class's detections in global confidence order
/// with per-image claimed flags.
pub fn oracle_map(scene: &Scene, n_classes: usize) -> (Vec<Option<f64>>, f64, Option<f64>) {
    let mut aps = Vec::new();
    let (mut tp_all, mut n_all) = (0usize, 0usize);
    for c in 0..n_classes {
        let n_gt = scene.gts.iter().flatten().filter(|a| a.class_id == c).count();
        let mut ranked: Vec<(f64, usize, BoundingBox)> = Vec::new();
        for (i, ds) in scene.dets.iter().enumerate() {
            for d in ds.iter().filter(|d| d.class_id == c) {
                ranked.push((d.confidence, i, d.bbox));
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut claimed: Vec<Vec<bool>> = scene.gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut verdicts = Vec::new();
        for (_, i, b) in ranked {
            let mut best = (-1.0, usize::MAX);
            for (j, a) in scene.gts[i].iter().enumerate() {
                if a.class_id == c && !claimed[i][j] {
                    let o = raster_iou(&b, &a.bbox);
                    if o > best.0 {
                        best = (o, j);
                    }
                }
            }
            if best.0 >= 0.5 {
                claimed[i][best.1] = true;
                verdicts.push(Verdict::Tp);
            } else {
                verdicts.push(Verdict::Fp);
            }
        }
        tp_all += verdicts.iter().filter(|v| **v == Verdict::Tp).count();
        n_all += verdicts.len();
        aps.push((n_gt > 0).then(|| oracle_ap_all_point(&verdicts, n_gt)));
    }
    let scored: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    let cl = (n_all > 0).then(|| tp_all as f64 / n_all as f64);
    (aps, map, cl)
}

/// Box of a mask from its row and column projections.
pub fn oracle_mask_bbox(m: &Mask) -> BoundingBox {
    let row_any: Vec<bool> = (0..m.rows).map(|r| (0..m.cols).any(|c| m.get(r, c))).collect();
    let col_any: Vec<bool> = (0..m.cols).map(|c| (0..m.rows).any(|r| m.get(r, c))).collect();
    let first = |v: &[bool]| v.iter().position(|x| *x).unwrap() as f64;
    let last = |v: &[bool]| (v.len() - v.iter().rev().position(|x| *x).unwrap()) as f64;
    BoundingBox::new(first(&col_any), first(&row_any), last(&col_any), last(&row_any)).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let (rows, cols) = (rng.random_range(1..12), rng.random_range(1..12));
    let mut m = Mask::new(rows, cols);
    for _ in 0..rng.random_range(1..6) {
        m.set(rng.random_range(0..rows), rng.random_range(0..cols), true);
    }
    m
}

/// Zero-init biases put dead units exactly on a ReLU kink, where central
/// differences are wrong by construction; random biases move them off it.
pub fn jitter_biases(p: &mut ParamSet<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, v) in p.iter_mut() {
        if k.ends_with(".bias") {
            v.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
}
