//! Images, manifests, the synthetic two-domain corpus and pixel-space
//! transforms.

pub mod audit;
mod augment;
mod degrade;
mod image;
mod manifest;
mod synth;

pub use augment::{augment_image, classic_augment, AugmentKind};
pub use degrade::{degrade, degrade_with, DegradeConfig, DegradeParams};
pub use image::{
    crop, decode_ppm, dims3, edge_energy, encode_ppm, filter_separable, from_batch, gaussian_blur, gaussian_kernel,
    gaussian_len, load_image, mean_saturation, quantize, resize_and_crop, resize_bilinear, save_image, to_batch,
    CropMode, Image,
};
pub use manifest::{registry_path, DatasetManifest, Domain, ImageSample};
pub use synth::{
    gen_synthetic_corpus, generate_scene, manifest_path, render_scene, Corpus, CorpusConfig, Scene, Split,
    CLASS_NAMES, MAX_OVERLAP, MAX_SIZE, MIN_SIZE, TARGET_TRAIN_LABELS,
};
