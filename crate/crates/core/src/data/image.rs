//! Pixmap I/O and the pixel-space filters shared by degradation, augmentation
//! and preprocessing. Images are `[3, H, W]` tensors with values in [-1, 1].

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

pub fn dims3(img: &Image) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape("image", format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Adds a leading batch axis of one.
pub fn to_batch(img: &Image) -> Result<Image> {
    let (c, h, w) = dims3(img)?;
    img.clone().reshape([1, c, h, w])
}

pub fn from_batch(t: &Image) -> Result<Image> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 {
        return Err(Error::shape("from_batch", format!("batch of {b}")));
    }
    t.clone().reshape([c, h, w])
}

#[inline]
fn to_unit(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

#[inline]
fn to_byte(v: f32) -> u8 {
    // f32::round rounds half away from zero.
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = dims3(img)?;
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("{c} channels")));
    }
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n").expect("write to vec");
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_byte(d[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        // whitespace and '#' comments between header fields
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P6" {
        return Err(Error::Format(format!("unsupported pixmap variant {magic:?}, expected P6")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        token(pos)?
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("bad {what}")))
    };
    let w = number(&mut pos, "width")?;
    let h = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval}, only 8-bit 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("empty image".into()));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = 3 * w * h;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("truncated payload: need {need} bytes")))?;
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = to_unit(payload[(y * w + x) * 3 + ch]);
            }
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Quantizes to the 8-bit grid, as a save/load round trip would.
pub fn quantize(img: &Image) -> Image {
    img.map(|v| to_unit(to_byte(v)))
}

/// Normalized 1-D Gaussian taps of length `len` (odd).
pub fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f32> {
    let r = (len / 2) as f64;
    let taps: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / s) as f32).collect()
}

/// Kernel length covering ±3σ.
pub fn gaussian_len(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil() as usize + 1
}

/// Separable filtering with clamp-to-edge borders. Either pass may be skipped.
pub fn filter_separable(img: &Image, horizontal: Option<&[f32]>, vertical: Option<&[f32]>) -> Result<Image> {
    let (c, h, w) = dims3(img)?;
    let mut cur = img.data().to_vec();
    if let Some(k) = horizontal {
        let r = (k.len() / 2) as isize;
        let mut next = vec![0.0f32; cur.len()];
        for p in 0..c * h {
            let row = &cur[p * w..(p + 1) * w];
            for x in 0..w {
                let mut acc = 0.0f32;
                for (i, &t) in k.iter().enumerate() {
                    let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += t * row[sx];
                }
                next[p * w + x] = acc;
            }
        }
        cur = next;
    }
    if let Some(k) = vertical {
        let r = (k.len() / 2) as isize;
        let mut next = vec![0.0f32; cur.len()];
        for ch in 0..c {
            let plane = &cur[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for (i, &t) in k.iter().enumerate() {
                        let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        acc += t * plane[sy * w + x];
                    }
                    next[ch * h * w + y * w + x] = acc;
                }
            }
        }
        cur = next;
    }
    Tensor::new([c, h, w], cur)
}

pub fn gaussian_blur(img: &Image, sigma: f64, len: Option<usize>) -> Result<Image> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(len.unwrap_or_else(|| gaussian_len(sigma)), sigma);
    filter_separable(img, Some(&k), Some(&k))
}

/// Mean absolute response of the 4-neighbour Laplacian over interior pixels.
pub fn edge_energy(img: &Image) -> f64 {
    let Ok((c, h, w)) = dims3(img) else { return 0.0 };
    if h < 3 || w < 3 {
        return 0.0;
    }
    let d = img.data();
    let mut total = 0.0f64;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let l = p[(y - 1) * w + x] + p[(y + 1) * w + x] + p[y * w + x - 1] + p[y * w + x + 1]
                    - 4.0 * p[y * w + x];
                total += l.abs() as f64;
            }
        }
    }
    total / (c * (h - 2) * (w - 2)) as f64
}

/// Mean over pixels of `max(channel) - min(channel)`.
pub fn mean_saturation(img: &Image) -> f64 {
    let Ok((3, h, w)) = dims3(img) else { return 0.0 };
    let d = img.data();
    let n = h * w;
    (0..n)
        .map(|i| {
            let (r, g, b) = (d[i], d[n + i], d[2 * n + i]);
            (r.max(g).max(b) - r.min(g).min(b)) as f64
        })
        .sum::<f64>()
        / n as f64
}

/// Bilinear resampling with half-pixel centres and clamped borders.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let (c, h, w) = dims3(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid("resize to an empty image".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let d = img.data();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, out_h, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, out_w, w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

pub fn crop(img: &Image, top: usize, left: usize, size: usize) -> Result<Image> {
    let (c, h, w) = dims3(img)?;
    if top + size > h || left + size > w {
        return Err(Error::shape("crop", format!("{size}x{size} at ({top}, {left}) outside {h}x{w}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + left..row + left + size]);
        }
    }
    Tensor::new([c, size, size], out)
}

/// Crop placement for [`resize_and_crop`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Random,
    Center,
}

/// Square bilinear resize to `resize_to` followed by a `crop_to` crop, either
/// uniformly placed or centred.
pub fn resize_and_crop(
    img: &Image,
    resize_to: usize,
    crop_to: usize,
    mode: CropMode,
    rng: &mut impl Rng,
) -> Result<Image> {
    if crop_to > resize_to {
        return Err(Error::Config(format!("crop_to {crop_to} exceeds resize_to {resize_to}")));
    }
    let resized = resize_bilinear(img, resize_to, resize_to)?;
    let slack = resize_to - crop_to;
    let (top, left) = match mode {
        CropMode::Center => (slack / 2, slack / 2),
        CropMode::Random => (rng.random_range(0..=slack), rng.random_range(0..=slack)),
    };
    crop(&resized, top, left, crop_to)
}
