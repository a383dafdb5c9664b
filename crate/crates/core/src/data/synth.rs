//! Seeded two-domain corpus of simple shape scenes.
//!
//! Source scenes are sharp; target scenes come from the same scene
//! distribution passed through [`degrade`]. Scene `i` of a split draws from
//! ChaCha stream `(split, i)` of the corpus seed, so generation order does
//! not matter.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::degrade::{degrade, DegradeConfig};
use super::image::{save_image, Image};
use super::manifest::{DatasetManifest, Domain, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::{iou, mask_to_bbox, Annotation, BoundingBox, Mask};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "triangle", "rectangle"];
pub const MIN_SIZE: usize = 10;
pub const MAX_SIZE: usize = 28;
pub const MAX_OVERLAP: f64 = 0.3;
const TEXTURE_SIGMA: f64 = 0.1;
const PLACEMENT_TRIES: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetTest,
    SourceTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::TargetTrain, Split::TargetTest, Split::SourceTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
            Split::SourceTest => "source_test",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceTest => Domain::Source,
            Split::TargetTrain | Split::TargetTest => Domain::Target,
        }
    }

    fn stream(self, idx: usize) -> u64 {
        ((self as u64) << 40) | idx as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_train_source: usize,
    pub n_train_target: usize,
    pub n_test_target: usize,
    /// Held-out sharp scenes for checking the detector itself.
    pub n_test_source: usize,
    pub n_classes: usize,
    pub image_side: usize,
    pub seed: u64,
    pub degrade: DegradeConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train_source: 200,
            n_train_target: 200,
            n_test_target: 100,
            n_test_source: 100,
            n_classes: 3,
            image_side: 64,
            seed: 0,
            degrade: DegradeConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=CLASS_NAMES.len()).contains(&self.n_classes) {
            return Err(Error::Config(format!("corpus.n_classes must be in 1..=3, got {}", self.n_classes)));
        }
        if self.image_side < 2 * MAX_SIZE {
            return Err(Error::Config(format!(
                "corpus.image_side must be at least {}, got {}",
                2 * MAX_SIZE,
                self.image_side
            )));
        }
        self.degrade.validate()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.n_train_source,
            Split::TargetTrain => self.n_train_target,
            Split::TargetTest => self.n_test_target,
            Split::SourceTest => self.n_test_source,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.n_classes].iter().map(|s| s.to_string()).collect()
    }
}

/// A rendered scene with its exact annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: Vec<Annotation>,
}

impl Scene {
    pub fn labels(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.boxes.iter().map(|a| a.class_id).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

struct Shape {
    class_id: usize,
    mask: Mask,
    bbox: BoundingBox,
    color: [f32; 3],
}

fn hsv_to_unit_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| (2.0 * (u + m) - 1.0) as f32)
}

/// Rasterizes one shape of extent `sw`×`sh` at (x0, y0), testing pixel centres.
fn rasterize(class_id: usize, side: usize, x0: f64, y0: f64, sw: f64, sh: f64) -> Mask {
    let mut mask = Mask::new(side, side);
    let (cx, cy) = (x0 + sw / 2.0, y0 + sh / 2.0);
    for r in y0 as usize..((y0 + sh).ceil() as usize).min(side) {
        for c in x0 as usize..((x0 + sw).ceil() as usize).min(side) {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let inside = match class_id {
                0 => (px - cx).powi(2) + (py - cy).powi(2) <= (sw / 2.0).powi(2),
                1 => {
                    // apex at top centre, base along the bottom edge
                    let t = (py - y0) / sh;
                    (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * sw / 2.0
                }
                _ => px >= x0 && px < x0 + sw && py >= y0 && py < y0 + sh,
            };
            if inside {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

fn draw_shape(rng: &mut ChaCha8Rng, class_id: usize, side: usize) -> Option<Shape> {
    let s = rng.random_range(MIN_SIZE..=MAX_SIZE) as f64;
    let (sw, sh) = match class_id {
        0 | 1 => (s, s),
        _ => {
            let other = rng.random_range(MIN_SIZE as f64..=s).round();
            if rng.random_bool(0.5) {
                (s, other)
            } else {
                (other, s)
            }
        }
    };
    let x0 = rng.random_range(0..=side - sw as usize) as f64;
    let y0 = rng.random_range(0..=side - sh as usize) as f64;
    let mask = rasterize(class_id, side, x0, y0, sw, sh);
    let bbox = mask_to_bbox(&mask).ok()?;
    let color = hsv_to_unit_rgb(rng.random::<f64>(), 1.0, rng.random_range(0.8..=1.0));
    Some(Shape {
        class_id,
        mask,
        bbox,
        color,
    })
}

fn place_shapes(rng: &mut ChaCha8Rng, n_classes: usize, side: usize) -> Vec<Shape> {
    let wanted = rng.random_range(1..=3usize);
    let classes: Vec<usize> = (0..wanted).map(|_| rng.random_range(0..n_classes)).collect();
    // Fall back to fewer shapes when the requested set cannot be placed.
    for n in (1..=wanted).rev() {
        let mut placed: Vec<Shape> = Vec::with_capacity(n);
        'shape: for &class_id in &classes[..n] {
            for _ in 0..PLACEMENT_TRIES {
                let Some(cand) = draw_shape(rng, class_id, side) else { continue };
                if placed.iter().all(|p| iou(&p.bbox, &cand.bbox) < MAX_OVERLAP) {
                    placed.push(cand);
                    continue 'shape;
                }
            }
            break;
        }
        if placed.len() == n {
            return placed;
        }
    }
    unreachable!("a single shape always fits an image of side >= 2 * MAX_SIZE")
}

/// Renders a sharp scene from `rng`.
pub fn render_scene(rng: &mut ChaCha8Rng, n_classes: usize, side: usize) -> Scene {
    let n = side * side;
    let mut data = vec![0.0f32; 3 * n];

    // muted two-colour linear gradient
    let muted = |rng: &mut ChaCha8Rng| {
        let g: f64 = rng.random_range(-0.6..=0.3);
        [0; 3].map(|_| (g + rng.random_range(-0.2..=0.2)) as f32)
    };
    let (c0, c1) = (muted(rng), muted(rng));
    let theta = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (theta.cos(), theta.sin());
    let half = side as f64 / 2.0;
    for y in 0..side {
        for x in 0..side {
            let t = (((x as f64 + 0.5 - half) * dx + (y as f64 + 0.5 - half) * dy) / side as f64 + 0.5).clamp(0.0, 1.0)
                as f32;
            for ch in 0..3 {
                data[ch * n + y * side + x] = c0[ch] + t * (c1[ch] - c0[ch]);
            }
        }
    }

    let shapes = place_shapes(rng, n_classes, side);
    for s in &shapes {
        for (i, _) in s.mask.data.iter().enumerate().filter(|(_, &m)| m) {
            for ch in 0..3 {
                data[ch * n + i] = s.color[ch];
            }
        }
    }

    // grey texture shared across channels
    let tex = Normal::new(0.0, TEXTURE_SIGMA).expect("constant sigma");
    for i in 0..n {
        let t = tex.sample(rng) as f32;
        for ch in 0..3 {
            let v = &mut data[ch * n + i];
            *v = (*v + t).clamp(-1.0, 1.0);
        }
    }

    Scene {
        image: Tensor::new([3, side, side], data).expect("finite scene"),
        boxes: shapes
            .into_iter()
            .map(|s| Annotation {
                class_id: s.class_id,
                bbox: s.bbox,
            })
            .collect(),
    }
}

/// Scene `idx` of `split`, degraded when the split is in the target domain.
pub fn generate_scene(cfg: &CorpusConfig, split: Split, idx: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream(idx));
    let mut scene = render_scene(&mut rng, cfg.n_classes, cfg.image_side);
    if split.domain() == Domain::Target {
        let mut drng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.degrade.seed.rotate_left(32));
        drng.set_stream(split.stream(idx));
        scene.image = degrade(&scene.image, &cfg.degrade, &mut drng)?;
    }
    Ok(scene)
}

/// Manifests produced by [`gen_synthetic_corpus`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub source_train: DatasetManifest,
    /// Unlabeled: no box annotations.
    pub target_train: DatasetManifest,
    pub target_test: DatasetManifest,
    pub source_test: DatasetManifest,
    /// Boxes for the target training images, consumed only by the
    /// explicitly flagged target-supervised regime.
    pub target_train_labels: DatasetManifest,
}

pub const TARGET_TRAIN_LABELS: &str = "target_train_labels";

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

/// Renders every split to `out_dir/images/<split>/` and writes the manifests.
pub fn gen_synthetic_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<Corpus> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    let provenance = format!("synthetic corpus, seed {}", cfg.seed);
    let mut manifests = Vec::new();
    let mut labels = DatasetManifest::new(dir, cfg.class_names(), provenance.clone());
    for split in Split::ALL {
        let mut m = DatasetManifest::new(dir, cfg.class_names(), provenance.clone());
        for i in 0..cfg.count(split) {
            let scene = generate_scene(cfg, split, i)?;
            let rel = format!("images/{}/{i:05}.ppm", split.name());
            save_image(dir.join(&rel), &scene.image)?;
            let sample = ImageSample::new(rel, split.domain(), scene.labels(), scene.boxes);
            if split == Split::TargetTrain {
                m.samples.push(sample.without_boxes());
                labels.samples.push(sample);
            } else {
                m.samples.push(sample);
            }
        }
        m.save(manifest_path(dir, split.name()))?;
        manifests.push(m);
    }
    labels.save(manifest_path(dir, TARGET_TRAIN_LABELS))?;
    let mut it = manifests.into_iter();
    let mut next = || it.next().expect("four splits");
    Ok(Corpus {
        source_train: next(),
        target_train: next(),
        target_test: next(),
        source_test: next(),
        target_train_labels: labels,
    })
}
