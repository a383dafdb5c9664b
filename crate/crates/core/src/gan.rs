//! Cycle-consistent adversarial training, its forward-only ablation, the
//! per-class conditioned variant, and whole-dataset translation.
//!
//! Networks: `G: X → Y` (source to target), `F: Y → X`, and patch
//! discriminators `D_Y` (real target vs `G(x)`) and `D_X` (real source vs
//! `F(y)`). One step updates `D_Y`, then `D_X`, then `G` and `F` jointly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    dims3, resize_and_crop, resize_bilinear, save_image, to_batch, CropMode, DatasetManifest, Image, ImageSample,
};
use crate::error::{Error, Result};
use crate::nets::{
    build_generator, build_patch_discriminator, discriminator_forward_on, generator_forward, generator_forward_on,
    DiscriminatorSpec, GeneratorSpec,
};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LOSS_HEADER: &str = "step,d_y,d_x,g_adv,f_adv,cyc_fwd,cyc_bwd,total";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    #[default]
    Cycle,
    Forward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub lambda_cycle: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub resize_to: usize,
    pub crop_to: usize,
    pub total_steps: usize,
    pub mode: GanMode,
    pub conditioned: bool,
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda_cycle: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            resize_to: 36,
            crop_to: 32,
            total_steps: 500,
            mode: GanMode::Cycle,
            conditioned: false,
            seed: 0,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl GanConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("GanConfig: {msg}")));
        if !(self.lambda_cycle.is_finite() && self.lambda_cycle >= 0.0) {
            return bad(format!("lambda_cycle >= 0 violated ({})", self.lambda_cycle));
        }
        if self.crop_to > self.resize_to {
            return bad(format!("crop_to <= resize_to violated ({} > {})", self.crop_to, self.resize_to));
        }
        let f = self.generator.downsample_factor();
        if self.crop_to == 0 || !self.crop_to.is_multiple_of(f) {
            return bad(format!("crop_to divisible by the generator downsample factor {f} violated ({})", self.crop_to));
        }
        if self.crop_to < 1 << self.discriminator.n_layers {
            return bad(format!("crop_to {} is smaller than the discriminator reach", self.crop_to));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        self.adam().validate().map_err(|e| Error::Config(format!("GanConfig: {e}")))?;
        self.generator.validate()?;
        self.discriminator.validate()
    }
}

/// `mean bce(D(real), 1) + mean bce(D(fake), 0)` from discriminator logits.
pub fn discriminator_loss_from_logits<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = tape.bce_with_target(real, true)?;
    let f = tape.bce_with_target(fake, false)?;
    tape.add(r, f)
}

/// Non-saturating generator loss `mean bce(D(fake), 1)` from logits.
pub fn generator_adv_loss_from_logits<T: Real>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    tape.bce_with_target(fake, true)
}

pub fn discriminator_loss_on<T: Real>(
    tape: &mut Tape<T>,
    spec: &DiscriminatorSpec,
    d: &Bound,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let lr = discriminator_forward_on(tape, spec, d, real)?;
    let lf = discriminator_forward_on(tape, spec, d, fake)?;
    discriminator_loss_from_logits(tape, lr, lf)
}

pub fn generator_adv_loss_on<T: Real>(tape: &mut Tape<T>, spec: &DiscriminatorSpec, d: &Bound, fake: Var) -> Result<Var> {
    let l = discriminator_forward_on(tape, spec, d, fake)?;
    generator_adv_loss_from_logits(tape, l)
}

/// `l1(second(first(batch)), batch)` for arbitrary recorded maps.
pub fn cycle_loss_with<T: Real>(
    tape: &mut Tape<T>,
    batch: Var,
    first: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    second: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let there = first(tape, batch)?;
    let back = second(tape, there)?;
    tape.l1_loss(back, batch)
}

pub fn cycle_loss_on<T: Real>(
    tape: &mut Tape<T>,
    spec: &GeneratorSpec,
    first: &Bound,
    second: &Bound,
    batch: Var,
) -> Result<Var> {
    cycle_loss_with(
        tape,
        batch,
        |t, v| generator_forward_on(t, spec, first, v),
        |t, v| generator_forward_on(t, spec, second, v),
    )
}

pub fn total_objective(adv_g: f64, adv_f: f64, cyc_fwd: f64, cyc_bwd: f64, lambda_cycle: f64) -> f64 {
    adv_g + adv_f + lambda_cycle * (cyc_fwd + cyc_bwd)
}

/// Inference helpers over whole parameter sets.
pub fn discriminator_loss<T: Real>(spec: &DiscriminatorSpec, d: &ParamSet<T>, real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let b = d.bind(&mut tape, false);
    let (r, f) = (tape.leaf(real.clone(), false), tape.leaf(fake.clone(), false));
    let l = discriminator_loss_on(&mut tape, spec, &b, r, f)?;
    Ok(tape.value(l).item())
}

pub fn generator_adv_loss<T: Real>(spec: &DiscriminatorSpec, d: &ParamSet<T>, fake: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let b = d.bind(&mut tape, false);
    let f = tape.leaf(fake.clone(), false);
    let l = generator_adv_loss_on(&mut tape, spec, &b, f)?;
    Ok(tape.value(l).item())
}

pub fn cycle_loss<T: Real>(spec: &GeneratorSpec, first: &ParamSet<T>, second: &ParamSet<T>, batch: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let a = first.bind(&mut tape, false);
    let b = second.bind(&mut tape, false);
    let x = tape.leaf(batch.clone(), false);
    let l = cycle_loss_on(&mut tape, spec, &a, &b, x)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub d_y: f64,
    pub d_x: f64,
    pub g_adv: f64,
    pub f_adv: f64,
    pub cyc_fwd: f64,
    pub cyc_bwd: f64,
    pub total: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.d_y, r.d_x, r.g_adv, r.f_adv, r.cyc_fwd, r.cyc_bwd, r.total
        )
        .expect("write to string");
    }
    s
}

/// Trained translation networks. `f` and `d_x` exist only in cycle mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub mode: GanMode,
    pub g: ParamSet<f32>,
    pub f: Option<ParamSet<f32>>,
    pub d_x: Option<ParamSet<f32>>,
    pub d_y: ParamSet<f32>,
}

const NETS: [&str; 4] = ["G", "F", "D_X", "D_Y"];

impl GanModel {
    pub fn init(cfg: &GanConfig, seed: u64) -> Result<Self> {
        let cycle = cfg.mode == GanMode::Cycle;
        Ok(Self {
            mode: cfg.mode,
            g: build_generator(&cfg.generator, derive_seed(seed, 1))?,
            f: cycle.then(|| build_generator(&cfg.generator, derive_seed(seed, 2))).transpose()?,
            d_x: cycle
                .then(|| build_patch_discriminator(&cfg.discriminator, derive_seed(seed, 3)))
                .transpose()?,
            d_y: build_patch_discriminator(&cfg.discriminator, derive_seed(seed, 4))?,
        })
    }

    pub fn to_checkpoint(&self, cfg: &GanConfig, steps: usize) -> Result<Checkpoint<f32>> {
        let mut all = ParamSet::new();
        for (name, p) in NETS.iter().zip([Some(&self.g), self.f.as_ref(), self.d_x.as_ref(), Some(&self.d_y)]) {
            if let Some(p) = p {
                all.extend_prefixed(name, p);
            }
        }
        let mode = serde_json::to_value(self.mode)?;
        Ok(Checkpoint::new(all)
            .with_meta("kind", "gan")
            .with_meta("mode", mode.as_str().unwrap_or_default())
            .with_meta("steps", steps.to_string())
            .with_meta("config", serde_json::to_string(cfg)?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        let mode = match ckpt.metadata.get("mode").map(String::as_str) {
            Some("cycle") => GanMode::Cycle,
            Some("forward") => GanMode::Forward,
            other => return Err(Error::Checkpoint(format!("not a translation checkpoint (mode {other:?})"))),
        };
        let part = |name: &str| {
            let p = ckpt.params.strip_prefix(name);
            (!p.is_empty()).then_some(p)
        };
        let need = |name: &str| part(name).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")));
        Ok(Self {
            mode,
            g: need("G")?,
            f: part("F"),
            d_x: part("D_X"),
            d_y: need("D_Y")?,
        })
    }

    pub fn config_of(ckpt: &Checkpoint<f32>) -> Result<GanConfig> {
        let raw = ckpt
            .metadata
            .get("config")
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks its training config".into()))?;
        Ok(serde_json::from_str(raw)?)
    }
}

/// Independent seed for a labelled sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub struct TrainState {
    pub step: usize,
    pub model: GanModel,
    pub adam_g: AdamState<f32>,
    pub adam_f: Option<AdamState<f32>>,
    pub adam_d_x: Option<AdamState<f32>>,
    pub adam_d_y: AdamState<f32>,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossRow>,
}

/// Generator forward pass kept on its tape for the later generator update.
pub struct GeneratorPass {
    tape: Tape<f32>,
    g: Bound,
    f: Option<Bound>,
    x: Var,
    y: Var,
    fake_y: Var,
    rec_x: Option<Var>,
    fake_x: Option<Var>,
    rec_y: Option<Var>,
}

impl GeneratorPass {
    pub fn fake_y(&self) -> &Tensor<f32> {
        self.tape.value(self.fake_y)
    }

    pub fn fake_x(&self) -> Option<&Tensor<f32>> {
        self.fake_x.map(|v| self.tape.value(v))
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Diverged { step, detail },
        other => other,
    }
}

impl TrainState {
    pub fn new(cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let model = GanModel::init(cfg, cfg.seed)?;
        let cycle = cfg.mode == GanMode::Cycle;
        Ok(Self {
            step: 0,
            model,
            adam_g: AdamState::new(cfg.adam()),
            adam_f: cycle.then(|| AdamState::new(cfg.adam())),
            adam_d_x: cycle.then(|| AdamState::new(cfg.adam())),
            adam_d_y: AdamState::new(cfg.adam()),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5)),
            history: Vec::new(),
        })
    }

    pub fn generator_pass(&self, cfg: &GanConfig, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<GeneratorPass> {
        let mut tape = Tape::new();
        let g = self.model.g.bind(&mut tape, true);
        let f = self.model.f.as_ref().map(|f| f.bind(&mut tape, true));
        let xv = tape.leaf(x.clone(), false);
        let yv = tape.leaf(y.clone(), false);
        let fake_y = generator_forward_on(&mut tape, &cfg.generator, &g, xv)?;
        let (mut rec_x, mut fake_x, mut rec_y) = (None, None, None);
        if let Some(fb) = &f {
            rec_x = Some(generator_forward_on(&mut tape, &cfg.generator, fb, fake_y)?);
            let fx = generator_forward_on(&mut tape, &cfg.generator, fb, yv)?;
            rec_y = Some(generator_forward_on(&mut tape, &cfg.generator, &g, fx)?);
            fake_x = Some(fx);
        }
        Ok(GeneratorPass {
            tape,
            g,
            f,
            x: xv,
            y: yv,
            fake_y,
            rec_x,
            fake_x,
            rec_y,
        })
    }

    fn discriminator_update(
        spec: &DiscriminatorSpec,
        d: &mut ParamSet<f32>,
        adam: &mut AdamState<f32>,
        real: &Tensor<f32>,
        fake: &Tensor<f32>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let b = d.bind(&mut tape, true);
        let r = tape.leaf(real.clone(), false);
        let f = tape.leaf(fake.clone(), false);
        let loss = discriminator_loss_on(&mut tape, spec, &b, r, f)?;
        tape.backward(loss)?;
        adam.step(d, &b.grads(&tape))?;
        Ok(tape.value(loss).item().as_f64())
    }

    /// Steps (1) and (2): discriminator updates against detached fakes.
    /// Returns the pre-update `(d_y, d_x)` losses.
    pub fn discriminator_phase(
        &mut self,
        cfg: &GanConfig,
        x: &Tensor<f32>,
        y: &Tensor<f32>,
        fake_y: &Tensor<f32>,
        fake_x: Option<&Tensor<f32>>,
    ) -> Result<(f64, f64)> {
        let d_y = Self::discriminator_update(&cfg.discriminator, &mut self.model.d_y, &mut self.adam_d_y, y, fake_y)?;
        let mut d_x = 0.0;
        if let (Some(d), Some(adam), Some(fx)) = (self.model.d_x.as_mut(), self.adam_d_x.as_mut(), fake_x) {
            d_x = Self::discriminator_update(&cfg.discriminator, d, adam, x, fx)?;
        }
        Ok((d_y, d_x))
    }

    /// Step (3): joint generator update through the current discriminators.
    pub fn generator_phase(&mut self, cfg: &GanConfig, pass: GeneratorPass) -> Result<LossRow> {
        let GeneratorPass {
            mut tape,
            g,
            f,
            x,
            y,
            fake_y,
            rec_x,
            fake_x,
            rec_y,
        } = pass;
        let d_y = self.model.d_y.bind(&mut tape, false);
        let adv_g = generator_adv_loss_on(&mut tape, &cfg.discriminator, &d_y, fake_y)?;
        let mut row = LossRow {
            step: self.step,
            g_adv: tape.value(adv_g).item().as_f64(),
            ..LossRow::default()
        };
        let total = match (&self.model.d_x, fake_x, rec_x, rec_y) {
            (Some(dx), Some(fake_x), Some(rec_x), Some(rec_y)) => {
                let d_x = dx.bind(&mut tape, false);
                let adv_f = generator_adv_loss_on(&mut tape, &cfg.discriminator, &d_x, fake_x)?;
                let cyc_fwd = tape.l1_loss(rec_x, x)?;
                let cyc_bwd = tape.l1_loss(rec_y, y)?;
                row.f_adv = tape.value(adv_f).item().as_f64();
                row.cyc_fwd = tape.value(cyc_fwd).item().as_f64();
                row.cyc_bwd = tape.value(cyc_bwd).item().as_f64();
                let cyc = tape.add(cyc_fwd, cyc_bwd)?;
                let cyc = tape.scale(cyc, cfg.lambda_cycle)?;
                tape.add_all(&[adv_g, adv_f, cyc])?
            }
            _ => adv_g,
        };
        row.total = tape.value(total).item().as_f64();
        tape.backward(total)?;
        self.adam_g.step(&mut self.model.g, &g.grads(&tape))?;
        if let (Some(fp), Some(fb), Some(adam)) = (self.model.f.as_mut(), f.as_ref(), self.adam_f.as_mut()) {
            adam.step(fp, &fb.grads(&tape))?;
        }
        Ok(row)
    }

    /// One alternating update on preprocessed `[B, 3, S, S]` batches.
    pub fn train_step(&mut self, cfg: &GanConfig, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<&LossRow> {
        let step = self.step;
        let run = |s: &mut Self| -> Result<LossRow> {
            let pass = s.generator_pass(cfg, x, y)?;
            let fake_y = pass.fake_y().clone();
            let fake_x = pass.fake_x().cloned();
            let (d_y, d_x) = s.discriminator_phase(cfg, x, y, &fake_y, fake_x.as_ref())?;
            let mut row = s.generator_phase(cfg, pass)?;
            row.d_y = d_y;
            row.d_x = d_x;
            Ok(row)
        };
        let row = run(self).map_err(diverged(step))?;
        let finite = [row.d_y, row.d_x, row.g_adv, row.f_adv, row.cyc_fwd, row.cyc_bwd, row.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !self.model.g.is_finite() || !self.model.d_y.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite loss or parameters".into(),
            });
        }
        self.history.push(row);
        self.step += 1;
        Ok(self.history.last().expect("just pushed"))
    }
}

/// In-memory images of one domain, sampled with replacement.
pub struct ImagePool {
    images: Vec<Image>,
}

impl ImagePool {
    pub fn load(manifest: &DatasetManifest, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("no images to train on".into()));
        }
        Ok(Self {
            images: indices.iter().map(|&i| manifest.load(i)).collect::<Result<_>>()?,
        })
    }

    pub fn from_images(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("no images to train on".into()));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Random images, each resized and randomly cropped, as one batch.
    pub fn sample(&self, cfg: &GanConfig, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let items = (0..cfg.batch_size)
            .map(|_| {
                let img = &self.images[rng.random_range(0..self.images.len())];
                to_batch(&resize_and_crop(img, cfg.resize_to, cfg.crop_to, CropMode::Random, rng)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&items)
    }
}

/// Runs `cfg.total_steps` updates. Source and target batches are drawn
/// independently: no pairing between the domains is assumed.
pub fn train_pools(source: &ImagePool, target: &ImagePool, cfg: &GanConfig) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    for _ in 0..cfg.total_steps {
        let x = source.sample(cfg, &mut state.rng)?;
        let y = target.sample(cfg, &mut state.rng)?;
        state.train_step(cfg, &x, &y)?;
        if state.step % 100 == 0 {
            let r = state.history.last().expect("row per step");
            log::debug!("step {} total {:.4} cyc {:.4}", state.step, r.total, r.cyc_fwd);
        }
    }
    Ok(state)
}

/// One trained translation model and its loss history.
pub struct TrainedGan {
    pub model: GanModel,
    pub history: Vec<LossRow>,
    pub config: GanConfig,
}

impl TrainedGan {
    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        self.model.to_checkpoint(&self.config, self.history.len())
    }
}

/// Result of [`run_training`]: either one model, or one per source class
/// plus an unconditioned fallback for classes the target split lacks.
pub struct GanRun {
    pub unconditioned: Option<TrainedGan>,
    pub per_class: BTreeMap<usize, TrainedGan>,
    /// Classes served by the unconditioned model.
    pub fallback_classes: Vec<usize>,
}

fn class_indices(m: &DatasetManifest, class_id: usize) -> Vec<usize> {
    (0..m.len()).filter(|&i| m.samples[i].labels.contains(&class_id)).collect()
}

pub fn run_training(source: &DatasetManifest, target: &DatasetManifest, cfg: &GanConfig) -> Result<GanRun> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("translation training needs non-empty source and target manifests".into()));
    }
    let train = |src: &[usize], tgt: &[usize], seed: u64| -> Result<TrainedGan> {
        let config = GanConfig {
            seed,
            conditioned: false,
            ..cfg.clone()
        };
        let state = train_pools(&ImagePool::load(source, src)?, &ImagePool::load(target, tgt)?, &config)?;
        Ok(TrainedGan {
            model: state.model,
            history: state.history,
            config,
        })
    };
    let all_src: Vec<usize> = (0..source.len()).collect();
    let all_tgt: Vec<usize> = (0..target.len()).collect();
    if !cfg.conditioned {
        return Ok(GanRun {
            unconditioned: Some(train(&all_src, &all_tgt, cfg.seed)?),
            per_class: BTreeMap::new(),
            fallback_classes: Vec::new(),
        });
    }
    let mut classes: Vec<usize> = source.samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut run = GanRun {
        unconditioned: None,
        per_class: BTreeMap::new(),
        fallback_classes: Vec::new(),
    };
    for c in classes {
        let tgt = class_indices(target, c);
        if tgt.is_empty() {
            log::warn!("class {c} has no target images; using the unconditioned model");
            run.fallback_classes.push(c);
            continue;
        }
        let model = train(&class_indices(source, c), &tgt, derive_seed(cfg.seed, 100 + c as u64))?;
        run.per_class.insert(c, model);
    }
    if !run.fallback_classes.is_empty() {
        run.unconditioned = Some(train(&all_src, &all_tgt, cfg.seed)?);
    }
    Ok(run)
}

/// The generator(s) used to translate source images.
#[derive(Clone, Debug)]
pub struct Translator {
    pub spec: GeneratorSpec,
    /// Side images are translated at: the training crop size.
    pub side: usize,
    pub default: Option<ParamSet<f32>>,
    pub per_class: BTreeMap<usize, ParamSet<f32>>,
}

impl Translator {
    pub fn from_run(run: &GanRun) -> Self {
        let cfg = run
            .unconditioned
            .as_ref()
            .or_else(|| run.per_class.values().next())
            .map(|t| &t.config);
        Self {
            spec: cfg.map(|c| c.generator).unwrap_or_default(),
            side: cfg.map(|c| c.crop_to).unwrap_or(32),
            default: run.unconditioned.as_ref().map(|t| t.model.g.clone()),
            per_class: run.per_class.iter().map(|(&c, t)| (c, t.model.g.clone())).collect(),
        }
    }

    /// Generator for a sample: the class covering the largest total box area
    /// picks the model; samples without boxes use its first label.
    pub fn generator_for(&self, sample: &ImageSample) -> Result<&ParamSet<f32>> {
        if self.per_class.is_empty() {
            return self
                .default
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("translator holds no generator".into()));
        }
        let mut area: BTreeMap<usize, f64> = BTreeMap::new();
        for a in sample.boxes() {
            *area.entry(a.class_id).or_default() += a.bbox.area();
        }
        let class = area
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
            .or_else(|| sample.labels.first().copied());
        match class.and_then(|c| self.per_class.get(&c)) {
            Some(g) => Ok(g),
            None => self.default.as_ref().ok_or_else(|| {
                Error::Checkpoint(format!("no generator for class {class:?} and no unconditioned fallback"))
            }),
        }
    }

    /// Resize to the training crop size, translate, and resize back.
    pub fn translate(&self, g: &ParamSet<f32>, img: &Image) -> Result<Image> {
        let (_, h, w) = dims3(img)?;
        // the generator needs sides divisible by its stride
        let f = 1usize << self.spec.n_downsample;
        let side = (self.side + f / 2) / f * f;
        let small = if h == side && w == side { img.clone() } else { resize_bilinear(img, side, side)? };
        let out = generator_forward(&self.spec, g, &to_batch(&small)?)?;
        let (_, c, s, _) = out.dims4()?;
        let out = out.reshape([c, s, s])?;
        if s == h && s == w {
            return Ok(out);
        }
        resize_bilinear(&out, h, w)
    }
}

/// Translates every source image and writes it under `out_dir/images/`.
/// Annotations and labels are carried over unchanged.
pub fn transform_dataset(
    translator: &Translator,
    source: &DatasetManifest,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let mut out = DatasetManifest::new(
        out_dir,
        source.classes.clone(),
        format!("translated from {}", source.provenance),
    );
    for (i, s) in source.samples.iter().enumerate() {
        let g = translator.generator_for(s)?;
        let img = translator.translate(g, &source.load(i)?)?;
        let rel = format!("images/{i:05}.ppm");
        save_image(out_dir.join(&rel), &img)?;
        out.samples.push(s.with_image(rel));
    }
    Ok(out)
}
