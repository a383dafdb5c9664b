//! Hand-crafted augmentation baselines: additive Gaussian noise and Gaussian
//! blur over the source images, annotations untouched.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{filter_separable, gaussian_kernel, save_image, Image};
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AugmentKind {
    /// `sigma` is a fraction of the dynamic range.
    Noise { sigma: f64 },
    Blur { kernel: usize, sigma: f64 },
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Noise { sigma } => write!(f, "noise_{sigma}"),
            Self::Blur { kernel, sigma } => write!(f, "blur_{kernel}_{sigma}"),
        }
    }
}

impl AugmentKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Noise { sigma } if sigma.is_finite() && sigma >= 0.0 => Ok(()),
            Self::Blur { kernel, sigma } if kernel % 2 == 1 && sigma.is_finite() && sigma > 0.0 => Ok(()),
            _ => Err(Error::Config(format!("invalid augmentation {self:?}"))),
        }
    }
}

pub fn augment_image(img: &Image, kind: AugmentKind, rng: &mut impl rand::Rng) -> Result<Image> {
    kind.validate()?;
    let mut out = match kind {
        AugmentKind::Noise { sigma: 0.0 } => return Ok(img.clone()),
        AugmentKind::Noise { sigma } => {
            let noise = Normal::new(0.0, 2.0 * sigma).expect("validated sigma");
            let mut out = img.clone();
            out.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
            out
        }
        AugmentKind::Blur { kernel, sigma } => {
            let k = gaussian_kernel(kernel, sigma);
            filter_separable(img, Some(&k), Some(&k))?
        }
    };
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(out)
}

/// Writes an augmented copy of every image under `out_dir` and returns the
/// matching manifest. Image `i` draws noise from stream `i` of `seed`.
pub fn classic_augment(
    manifest: &DatasetManifest,
    kind: AugmentKind,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    kind.validate()?;
    let out_dir = out_dir.as_ref();
    let mut out = DatasetManifest::new(
        out_dir,
        manifest.classes.clone(),
        format!("{kind} augmentation of {} (seed {seed})", manifest.provenance),
    );
    for (i, s) in manifest.samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let img = augment_image(&manifest.load(i)?, kind, &mut rng)?;
        let rel = format!("images/{i:05}.ppm");
        save_image(out_dir.join(&rel), &img)?;
        out.samples.push(s.with_image(rel));
    }
    Ok(out)
}
