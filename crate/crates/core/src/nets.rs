//! Translation networks: the residual encoder–decoder generator and the patch
//! discriminator.
//!
//! Parameter names are stable and double as checkpoint keys:
//!
//! ```text
//! stem.conv.{weight,bias}
//! down{i}.conv.*
//! res{j}.conv{1,2}.*        res{j}.norm{1,2}.{gain,bias}
//! up{i}.conv.*              (transposed, [Cin, Cout, 4, 4])
//! out.conv.*
//! ```
//!
//! Instance norm sits only inside the residual blocks. Normalizing the trunk
//! would erase the per-image flat background colour the generator must keep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Conv2d, ConvTranspose2d, Padding, Real, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    /// Full-scale translation models use 9.
    pub n_resblocks: usize,
    pub n_downsample: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 16,
            n_resblocks: 3,
            n_downsample: 2,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.n_downsample == 0 {
            return Err(Error::Config(format!("generator spec fields must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.n_downsample
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.in_channels;
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let norm = |ch: usize| 2 * ch;
        let mut n = conv(self.base_width, c, 7);
        for i in 0..self.n_downsample {
            n += conv(self.width(i + 1), self.width(i), 3);
        }
        let inner = self.width(self.n_downsample);
        n += self.n_resblocks * 2 * (conv(inner, inner, 3) + norm(inner));
        for i in (0..self.n_downsample).rev() {
            n += conv(self.width(i), self.width(i + 1), 4);
        }
        n + conv(c, self.base_width, 7)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    /// Number of stride-2 blocks.
    pub n_layers: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            n_layers: 3,
            base_width: 16,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("discriminator spec fields must be positive: {self:?}")));
        }
        Ok(())
    }

    fn width(&self, layer: usize) -> usize {
        self.base_width << layer
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.width(0) * self.in_channels * 16 + self.width(0);
        for i in 1..self.n_layers {
            n += self.width(i) * self.width(i - 1) * 16 + self.width(i) + 2 * self.width(i);
        }
        n + self.width(self.n_layers - 1) * 9 + 1
    }

    /// Side of the logit grid for an `s × s` input.
    pub fn patch_grid(&self, s: usize) -> usize {
        s >> self.n_layers
    }
}

/// Seeded initializer: weights N(0, 0.02), biases 0, norm gains 1.
pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub fn weight<T: Real>(&mut self, shape: [usize; 4]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.normal.sample(&mut self.rng)))
    }

    pub fn conv<T: Real>(&mut self, p: &mut ParamSet<T>, name: &str, shape: [usize; 4], bias_len: usize) {
        p.insert(format!("{name}.weight"), self.weight(shape));
        p.insert(format!("{name}.bias"), Tensor::zeros([bias_len]));
    }

    pub fn norm<T: Real>(&mut self, p: &mut ParamSet<T>, name: &str, ch: usize) {
        p.insert(format!("{name}.gain"), Tensor::full([ch], T::one()));
        p.insert(format!("{name}.bias"), Tensor::zeros([ch]));
    }
}

pub fn build_generator<T: Real>(spec: &GeneratorSpec, seed: u64) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut init = Init::new(seed);
    let mut p = ParamSet::new();
    let c = spec.in_channels;
    init.conv(&mut p, "stem.conv", [spec.base_width, c, 7, 7], spec.base_width);
    for i in 0..spec.n_downsample {
        let (cin, cout) = (spec.width(i), spec.width(i + 1));
        init.conv(&mut p, &format!("down{i}.conv"), [cout, cin, 3, 3], cout);
    }
    let inner = spec.width(spec.n_downsample);
    for j in 0..spec.n_resblocks {
        for k in 1..=2 {
            init.conv(&mut p, &format!("res{j}.conv{k}"), [inner, inner, 3, 3], inner);
            init.norm(&mut p, &format!("res{j}.norm{k}"), inner);
        }
    }
    for i in (0..spec.n_downsample).rev() {
        let (cin, cout) = (spec.width(i + 1), spec.width(i));
        init.conv(&mut p, &format!("up{i}.conv"), [cin, cout, 4, 4], cout);
    }
    init.conv(&mut p, "out.conv", [c, spec.base_width, 7, 7], c);
    Ok(p)
}

pub fn build_patch_discriminator<T: Real>(spec: &DiscriminatorSpec, seed: u64) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut init = Init::new(seed);
    let mut p = ParamSet::new();
    for i in 0..spec.n_layers {
        let cin = if i == 0 { spec.in_channels } else { spec.width(i - 1) };
        init.conv(&mut p, &format!("layer{i}.conv"), [spec.width(i), cin, 4, 4], spec.width(i));
        if i > 0 {
            init.norm(&mut p, &format!("layer{i}.norm"), spec.width(i));
        }
    }
    init.conv(&mut p, "out.conv", [1, spec.width(spec.n_layers - 1), 3, 3], 1);
    Ok(p)
}

pub(crate) fn conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    tape.conv2d(x, w, b, Conv2d::new(stride, padding))
}

pub(crate) fn norm<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{name}.gain"))?;
    let b = p.var(&format!("{name}.bias"))?;
    tape.instance_norm(x, g, b, NORM_EPS)
}

/// Records the generator on `tape`. Input and output are `[B, C, S, S]`
/// images in [-1, 1].
pub fn generator_forward_on<T: Real>(tape: &mut Tape<T>, spec: &GeneratorSpec, p: &Bound, x: Var) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    let f = spec.downsample_factor();
    if c != spec.in_channels || h % f != 0 || w % f != 0 {
        return Err(Error::shape(
            "generator_forward",
            format!("input {:?} needs {} channels and sides divisible by {f}", tape.shape(x), spec.in_channels),
        ));
    }
    let mut h = conv(tape, p, "stem.conv", x, 1, Padding::Reflect(3))?;
    h = tape.relu(h)?;
    for i in 0..spec.n_downsample {
        h = conv(tape, p, &format!("down{i}.conv"), h, 2, Padding::Zero(1))?;
        h = tape.relu(h)?;
    }
    for j in 0..spec.n_resblocks {
        let mut r = conv(tape, p, &format!("res{j}.conv1"), h, 1, Padding::Reflect(1))?;
        r = norm(tape, p, &format!("res{j}.norm1"), r)?;
        r = tape.relu(r)?;
        r = conv(tape, p, &format!("res{j}.conv2"), r, 1, Padding::Reflect(1))?;
        r = norm(tape, p, &format!("res{j}.norm2"), r)?;
        h = tape.add(h, r)?;
    }
    for i in (0..spec.n_downsample).rev() {
        let w = p.var(&format!("up{i}.conv.weight"))?;
        let b = p.var(&format!("up{i}.conv.bias"))?;
        h = tape.conv2d_transpose(h, w, b, ConvTranspose2d { stride: 2, padding: 1 })?;
        h = tape.relu(h)?;
    }
    h = conv(tape, p, "out.conv", h, 1, Padding::Reflect(3))?;
    tape.tanh(h)
}

/// Records the patch discriminator on `tape`, returning `[B, 1, P, P]` logits.
pub fn discriminator_forward_on<T: Real>(
    tape: &mut Tape<T>,
    spec: &DiscriminatorSpec,
    p: &Bound,
    x: Var,
) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    let min = 1 << spec.n_layers;
    if c != spec.in_channels || h < min || w < min {
        return Err(Error::shape(
            "discriminator_forward",
            format!("input {:?} smaller than {min}x{min} or wrong channel count", tape.shape(x)),
        ));
    }
    let mut h = x;
    for i in 0..spec.n_layers {
        h = conv(tape, p, &format!("layer{i}.conv"), h, 2, Padding::Zero(1))?;
        if i > 0 {
            h = norm(tape, p, &format!("layer{i}.norm"), h)?;
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    conv(tape, p, "out.conv", h, 1, Padding::Zero(1))
}

/// Inference-only generator pass.
pub fn generator_forward<T: Real>(spec: &GeneratorSpec, params: &ParamSet<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.leaf(image.clone(), false);
    let y = generator_forward_on(&mut tape, spec, &bound, x)?;
    Ok(tape.value(y).clone())
}

/// Inference-only discriminator pass.
pub fn discriminator_forward<T: Real>(
    spec: &DiscriminatorSpec,
    params: &ParamSet<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.leaf(image.clone(), false);
    let y = discriminator_forward_on(&mut tape, spec, &bound, x)?;
    Ok(tape.value(y).clone())
}
