//! Browser bindings for three small views of the library: the target-style
//! degradation on a synthetic scene, greedy box suppression, and average
//! precision of a ranked verdict string.
//!
//! Each operation is a plain function returning `Result<_, String>` so it can
//! be tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use dagan::data::{degrade_with, render_scene, DegradeParams, Image, CLASS_NAMES};
use dagan::detector::nms;
use dagan::metrics::{average_precision, iou, ApMode, BoundingBox, Detection, Verdict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 64;

#[derive(Serialize)]
pub struct SceneView {
    pub side: usize,
    /// Row-major RGBA bytes of the sharp scene.
    pub sharp: Vec<u8>,
    /// Same scene after degradation.
    pub degraded: Vec<u8>,
    pub boxes: Vec<BoxView>,
}

#[derive(Serialize)]
pub struct BoxView {
    pub class: &'static str,
    pub bbox: [f64; 4],
}

fn rgba(img: &Image) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let n = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        for ch in 0..3 {
            out.push(((d[ch * n + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Renders scene `seed` and degrades it with the given draw.
pub fn scene(seed: u64, n_classes: usize, params: &DegradeParams) -> Result<SceneView, String> {
    if !(1..=CLASS_NAMES.len()).contains(&n_classes) {
        return Err(format!("n_classes must be 1..={}", CLASS_NAMES.len()));
    }
    if params.motion_length == 0 || params.motion_length.is_multiple_of(2) {
        return Err("motion length must be odd".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = render_scene(&mut rng, n_classes, SIDE);
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let degraded = degrade_with(&s.image, params, &mut noise).map_err(|e| e.to_string())?;
    Ok(SceneView {
        side: SIDE,
        sharp: rgba(&s.image),
        degraded: rgba(&degraded),
        boxes: s
            .boxes
            .iter()
            .map(|a| BoxView {
                class: CLASS_NAMES[a.class_id],
                bbox: a.bbox.into(),
            })
            .collect(),
    })
}

#[derive(Serialize)]
pub struct Suppression {
    /// Indices into the input, in descending confidence order.
    pub kept: Vec<usize>,
    /// Pairwise IoU, row-major over the input order.
    pub iou: Vec<f64>,
}

/// Greedy suppression of `[[x0, y0, x1, y1, score], ...]`, all one class.
pub fn suppress(boxes_json: &str, iou_threshold: f64) -> Result<Suppression, String> {
    let raw: Vec<[f64; 5]> = serde_json::from_str(boxes_json).map_err(|e| e.to_string())?;
    let dets = raw
        .iter()
        .map(|r| {
            Ok(Detection {
                bbox: BoundingBox::new(r[0], r[1], r[2], r[3]).map_err(|e| e.to_string())?,
                class_id: 0,
                confidence: r[4],
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let kept = nms(dets.clone(), iou_threshold)
        .iter()
        .map(|k| dets.iter().position(|d| d == k).expect("kept detection comes from the input"))
        .collect();
    let iou = dets.iter().flat_map(|a| dets.iter().map(|b| iou(&a.bbox, &b.bbox))).collect();
    Ok(Suppression { kept, iou })
}

/// AP of a ranked verdict string such as `"TTFTF"` against `n_gt` objects.
pub fn ap(ranked: &str, n_gt: usize, voc11: bool) -> Result<f64, String> {
    let verdicts = ranked
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c.to_ascii_uppercase() {
            'T' | '1' => Ok(Verdict::Tp),
            'F' | '0' => Ok(Verdict::Fp),
            other => Err(format!("unexpected verdict {other:?}; use T or F")),
        })
        .collect::<Result<Vec<_>, String>>()?;
    let tp = verdicts.iter().filter(|v| **v == Verdict::Tp).count();
    if tp > n_gt {
        return Err(format!("{tp} true positives but only {n_gt} objects"));
    }
    let mode = if voc11 { ApMode::Voc11 } else { ApMode::AllPoint };
    average_precision(&verdicts, n_gt, mode).map_err(|e| e.to_string())
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = scene)]
#[allow(clippy::too_many_arguments)]
pub fn scene_js(
    seed: u32,
    n_classes: u32,
    blur_sigma: f64,
    motion_length: u32,
    desaturation: f64,
    contrast: f64,
    noise_sigma: f64,
) -> Result<String, JsValue> {
    let p = DegradeParams {
        blur_sigma,
        motion_length: motion_length as usize,
        desaturation,
        contrast,
        noise_sigma,
    };
    js(scene(seed as u64, n_classes as usize, &p))
}

#[wasm_bindgen(js_name = suppress)]
pub fn suppress_js(boxes_json: &str, iou_threshold: f64) -> Result<String, JsValue> {
    js(suppress(boxes_json, iou_threshold))
}

#[wasm_bindgen(js_name = averagePrecision)]
pub fn ap_js(ranked: &str, n_gt: u32, voc11: bool) -> Result<f64, JsValue> {
    ap(ranked, n_gt as usize, voc11).map_err(|e| JsValue::from_str(&e))
}
