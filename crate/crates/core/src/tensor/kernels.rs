//! Slice-level convolution kernels. Everything here works on one contiguous
//! `[C, H, W]` plane stack at a time; batching happens in the column matrix.

use super::Real;

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel;
    if stride == 0 || full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

/// Geometry of one im2col lowering: a `[c, h, w]` image sampled by a
/// `kh × kw` window on an `oh × ow` grid with the given stride and virtual
/// zero padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }


    /// Output columns `lo..hi` whose tap `k` lands inside `0..len`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if len + self.pad > k { (len + self.pad - k).div_ceil(s).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Writes the columns of `image` into `cols[row * ld + offset + pos]`.
pub(crate) fn im2col<T: Real>(image: &[T], win: &Window, cols: &mut [T], ld: usize, offset: usize) {
    let s = win.stride;
    for c in 0..win.c {
        let plane = &image[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + win.positions()];
                let (lo, hi) = win.valid(kj, win.w, win.ow);
                for oy in 0..win.oh {
                    let out_row = &mut dst[oy * win.ow..(oy + 1) * win.ow];
                    let Some(iy) = win.source(oy, ki, win.h) else {
                        out_row.fill(T::zero());
                        continue;
                    };
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let x0 = iy * win.w + lo * s + kj - win.pad;
                    let src = &plane[x0..];
                    if s == 1 {
                        out_row[lo..hi].copy_from_slice(&src[..hi - lo]);
                    } else {
                        for (i, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[i * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `image`.
pub(crate) fn col2im<T: Real>(cols: &[T], win: &Window, ld: usize, offset: usize, image: &mut [T]) {
    let s = win.stride;
    for c in 0..win.c {
        let plane = &mut image[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let src = &cols[row * ld + offset..row * ld + offset + win.positions()];
                let (lo, hi) = win.valid(kj, win.w, win.ow);
                if lo == hi {
                    continue;
                }
                for oy in 0..win.oh {
                    let Some(iy) = win.source(oy, ki, win.h) else {
                        continue;
                    };
                    let x0 = iy * win.w + lo * s + kj - win.pad;
                    let dst = &mut plane[x0..];
                    let vals = &src[oy * win.ow + lo..oy * win.ow + hi];
                    if s == 1 {
                        for (d, v) in dst.iter_mut().zip(vals) {
                            *d += *v;
                        }
                    } else {
                        for (i, v) in vals.iter().enumerate() {
                            dst[i * s] += *v;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflection-pads a `[c, h, w]` stack by `pad` on every side.
pub(crate) fn reflect_pad<T: Real>(image: &[T], c: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - pad as isize, w);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

/// Adjoint of [`reflect_pad`].
pub(crate) fn reflect_unpad_acc<T: Real>(
    padded: &[T],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    out: &mut [T],
) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    for ch in 0..c {
        let src = &padded[ch * ph * pw..(ch + 1) * ph * pw];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - pad as isize, w);
                dst[sy * w + sx] += src[y * pw + x];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_lengths() {
        assert_eq!(conv_out_len(32, 4, 2, 1), Some(16));
        assert_eq!(conv_out_len(2, 3, 1, 0), None);
        assert_eq!(conv_transpose_out_len(8, 4, 2, 1), Some(16));
        assert_eq!(conv_transpose_out_len(1, 2, 2, 0), Some(2));
    }

    #[test]
    fn reflect_pad_small() {
        let img = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = reflect_pad(&img, 1, 2, 3, 1);
        assert_eq!(p.len(), 20);
        assert_eq!(&p[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(&p[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let win = Window { c: 2, h: 5, w: 4, kh: 3, kw: 2, stride: 2, pad: 1, oh: 3, ow: 3 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..win.rows() * win.positions()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &win, &mut cols, win.positions(), 0);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &win, win.positions(), 0, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, k, stride, pad) in [(5, 4, 3, 2, 1), (6, 7, 4, 2, 1), (3, 3, 7, 1, 3), (8, 5, 3, 1, 0), (4, 4, 4, 3, 2)] {
            let (oh, ow) = (conv_out_len(h, k, stride, pad).unwrap(), conv_out_len(w, k, stride, pad).unwrap());
            let win = Window { c: 2, h, w, kh: k, kw: k, stride, pad, oh, ow };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; win.rows() * win.positions()];
            im2col(&x, &win, &mut cols, win.positions(), 0);
            for c in 0..2 {
                for ki in 0..k {
                    for kj in 0..k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let (y, xx) = ((oy * stride + ki) as isize - pad as isize, (ox * stride + kj) as isize - pad as isize);
                                let want = if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    x[(c * h + y as usize) * w + xx as usize]
                                } else {
                                    0.0
                                };
                                assert_eq!(cols[((c * k + ki) * k + kj) * oh * ow + oy * ow + ox], want);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reflect_pad_adjoint() {
        let (c, h, w, pad) = (2, 4, 5, 2);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64).sqrt()).collect();
        let p = reflect_pad(&x, c, h, w, pad);
        let y: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut back = vec![0.0; x.len()];
        reflect_unpad_acc(&y, c, h, w, pad, &mut back);
        let lhs: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
