//! 1-D and 2-D discrete Fourier transforms over plain f64 pairs.
//!
//! Power-of-two lengths go through an iterative radix-2 Cooley-Tukey kernel;
//! every other length falls back to the direct O(n^2) sum, which is exact and
//! cheap at the sizes this crate works at. The 2-D real transform stores only
//! the Hermitian-reduced half spectrum (last axis truncated to `W/2 + 1`).
//! Convention: forward transforms are unscaled, inverses carry `1/n`.

use crate::error::{FgaError, Result};
use crate::tensor::Tensor;

/// Discrete Fourier transform of one complex vector.
/// `inverse` flips the twiddle sign and applies the `1/n` scale.
pub fn fft1d(re: &[f64], im: &[f64], inverse: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    if re.len() != im.len() {
        return Err(FgaError::InvalidArgument(format!(
            "fft1d: real and imaginary parts differ in length ({} vs {})",
            re.len(),
            im.len()
        )));
    }
    if re.is_empty() {
        return Err(FgaError::InvalidArgument(
            "fft1d: empty input".to_string(),
        ));
    }
    let n = re.len();
    let mut out_re = re.to_vec();
    let mut out_im = im.to_vec();
    if n.is_power_of_two() {
        fft_radix2(&mut out_re, &mut out_im, inverse);
    } else {
        let (r, i) = dft_direct(re, im, inverse);
        out_re = r;
        out_im = i;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in out_re.iter_mut() {
            *v *= scale;
        }
        for v in out_im.iter_mut() {
            *v *= scale;
        }
    }
    Ok((out_re, out_im))
}

// Iterative radix-2 Cooley-Tukey, in place, unscaled.
fn fft_radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 0..n - 1 {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut k = n >> 1;
        while k <= j {
            j -= k;
            k >>= 1;
        }
        j += k;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len >> 1;
        let angle = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (w_im, w_re) = angle.sin_cos();
        let mut start = 0;
        while start < n {
            let (mut t_re, mut t_im) = (1.0, 0.0);
            for k in 0..half {
                let u = start + k;
                let v = u + half;
                let a_re = t_re * re[v] - t_im * im[v];
                let a_im = t_re * im[v] + t_im * re[v];
                re[v] = re[u] - a_re;
                im[v] = im[u] - a_im;
                re[u] += a_re;
                im[u] += a_im;
                let n_re = t_re * w_re - t_im * w_im;
                let n_im = t_re * w_im + t_im * w_re;
                t_re = n_re;
                t_im = n_im;
            }
            start += len;
        }
        len <<= 1;
    }
}

// Direct O(n^2) transform for lengths without a radix-2 factorization.
fn dft_direct(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    let step = sign * 2.0 * std::f64::consts::PI / n as f64;
    for (k, (or, oi)) in out_re.iter_mut().zip(out_im.iter_mut()).enumerate() {
        let mut acc_re = 0.0;
        let mut acc_im = 0.0;
        for jj in 0..n {
            let (s, c) = (step * (k * jj % n) as f64).sin_cos();
            acc_re += re[jj] * c - im[jj] * s;
            acc_im += re[jj] * s + im[jj] * c;
        }
        *or = acc_re;
        *oi = acc_im;
    }
    (out_re, out_im)
}

/// Half-spectrum of a real `[N,C,H,W]` tensor: `re`/`im` hold the first
/// `W/2 + 1` frequency columns; the rest are recoverable by conjugate
/// symmetry `X[u,v] = conj(X[(H-u) mod H, (W-v) mod W])`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
    pub orig_width: usize,
}

impl ComplexSpectrum {
    /// `[N, C, H, Wf]` extents of the stored half-spectrum.
    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        self.re.check_same_shape(&self.im, "spectrum re/im")?;
        if self.re.rank() != 4 {
            return Err(FgaError::InvalidArgument(format!(
                "spectrum must be rank 4, got {:?}",
                self.re.shape()
            )));
        }
        let s = self.re.shape();
        let (n, c, h, wf) = (s[0], s[1], s[2], s[3]);
        if self.orig_width != 2 * (wf - 1) && self.orig_width != 2 * wf - 1 {
            return Err(FgaError::InvalidArgument(format!(
                "spectrum width {} inconsistent with {} stored bins (expected {} or {})",
                self.orig_width,
                wf,
                2 * (wf - 1),
                2 * wf - 1
            )));
        }
        Ok((n, c, h, wf))
    }
}

pub(crate) fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Forward 2-D DFT of a real `[N,C,H,W]` tensor, stored as a half-spectrum.
pub fn rfft2d(x: &Tensor) -> Result<ComplexSpectrum> {
    if x.rank() != 4 {
        return Err(FgaError::InvalidArgument(format!(
            "rfft2d expects a rank-4 tensor, got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let wf = half_width(w);
    let mut out_re = vec![0.0; n * c * h * wf];
    let mut out_im = vec![0.0; n * c * h * wf];
    let zeros = vec![0.0; w];
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        // rows first, keeping all W bins
        let mut row_re = vec![0.0; h * w];
        let mut row_im = vec![0.0; h * w];
        for y in 0..h {
            let (r, i) = fft1d(&plane[y * w..(y + 1) * w], &zeros, false)?;
            row_re[y * w..(y + 1) * w].copy_from_slice(&r);
            row_im[y * w..(y + 1) * w].copy_from_slice(&i);
        }
        // then the kept columns
        let mut col_re = vec![0.0; h];
        let mut col_im = vec![0.0; h];
        for v in 0..wf {
            for y in 0..h {
                col_re[y] = row_re[y * w + v];
                col_im[y] = row_im[y * w + v];
            }
            let (r, i) = fft1d(&col_re, &col_im, false)?;
            for u in 0..h {
                out_re[(p * h + u) * wf + v] = r[u];
                out_im[(p * h + u) * wf + v] = i[u];
            }
        }
    }
    Ok(ComplexSpectrum {
        re: Tensor::new(&[n, c, h, wf], out_re)?,
        im: Tensor::new(&[n, c, h, wf], out_im)?,
        orig_width: w,
    })
}

/// Inverse of `rfft2d`. The stored half-spectrum is mirrored into the missing
/// columns by conjugate symmetry and the real part of the inverse transform
/// is returned, which silently projects away any Hermitian-inconsistent
/// imaginary residue (e.g. after frequency-domain filtering).
pub fn irfft2d(s: &ComplexSpectrum) -> Result<Tensor> {
    let (n, c, h, wf) = s.dims()?;
    let w = s.orig_width;
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let sre = &s.re.data()[p * h * wf..(p + 1) * h * wf];
        let sim = &s.im.data()[p * h * wf..(p + 1) * h * wf];
        // expand to the full grid
        let mut full_re = vec![0.0; h * w];
        let mut full_im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                if v < wf {
                    full_re[u * w + v] = sre[u * wf + v];
                    full_im[u * w + v] = sim[u * wf + v];
                } else {
                    let mu = (h - u) % h;
                    let mv = w - v;
                    full_re[u * w + v] = sre[mu * wf + mv];
                    full_im[u * w + v] = -sim[mu * wf + mv];
                }
            }
        }
        idft2d_real_part(&mut full_re, &mut full_im, h, w)?;
        out[p * h * w..(p + 1) * h * w].copy_from_slice(&full_re);
    }
    Tensor::new(&[n, c, h, w], out)
}

// In-place inverse 2-D transform; afterwards `re` holds the real part.
fn idft2d_real_part(re: &mut [f64], im: &mut [f64], h: usize, w: usize) -> Result<()> {
    for y in 0..h {
        let (r, i) = fft1d(&re[y * w..(y + 1) * w], &im[y * w..(y + 1) * w], true)?;
        re[y * w..(y + 1) * w].copy_from_slice(&r);
        im[y * w..(y + 1) * w].copy_from_slice(&i);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_re[y] = re[y * w + x];
            col_im[y] = im[y * w + x];
        }
        let (r, i) = fft1d(&col_re, &col_im, true)?;
        for y in 0..h {
            re[y * w + x] = r[y];
            im[y * w + x] = i[y];
        }
    }
    Ok(())
}

/// Adjoint of `rfft2d`: maps a gradient on the stored half-spectrum back to a
/// gradient on the real input. Both transforms are linear, so the VJP is the
/// transpose map: zero-pad the unstored columns and take `H*W` times the real
/// part of the inverse transform.
pub fn rfft2d_vjp(upstream: &ComplexSpectrum) -> Result<Tensor> {
    let (n, c, h, wf) = upstream.dims()?;
    let w = upstream.orig_width;
    let scale = (h * w) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let gre = &upstream.re.data()[p * h * wf..(p + 1) * h * wf];
        let gim = &upstream.im.data()[p * h * wf..(p + 1) * h * wf];
        let mut full_re = vec![0.0; h * w];
        let mut full_im = vec![0.0; h * w];
        for u in 0..h {
            full_re[u * w..u * w + wf].copy_from_slice(&gre[u * wf..(u + 1) * wf]);
            full_im[u * w..u * w + wf].copy_from_slice(&gim[u * wf..(u + 1) * wf]);
        }
        idft2d_real_part(&mut full_re, &mut full_im, h, w)?;
        for (o, v) in out[p * h * w..(p + 1) * h * w].iter_mut().zip(&full_re) {
            *o = v * scale;
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Adjoint of `irfft2d`: maps a gradient on the real output back to the
/// stored half-spectrum. Mirrored columns pick up a factor 2 because they
/// represent two conjugate bins of the full spectrum.
pub fn irfft2d_vjp(upstream: &Tensor) -> Result<ComplexSpectrum> {
    let mut s = rfft2d(upstream)?;
    let shape = s.re.shape().to_vec();
    let (h, wf) = (shape[2], shape[3]);
    let w = s.orig_width;
    let planes = shape[0] * shape[1];
    let norm = 1.0 / (h * w) as f64;
    for p in 0..planes {
        for u in 0..h {
            for v in 0..wf {
                let mirrored = v >= 1 && v <= w - wf;
                let weight = if mirrored { 2.0 * norm } else { norm };
                let idx = (p * h + u) * wf + v;
                s.re.data_mut()[idx] *= weight;
                // the forward DFT's imaginary sign matches the adjoint's
                s.im.data_mut()[idx] *= weight;
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::seeded_tensor;
    use crate::reference;

    #[test]
    fn constant_vector_is_dc_only() {
        let n = 8;
        let re = vec![3.25; n];
        let im = vec![0.0; n];
        let (r, i) = fft1d(&re, &im, false).unwrap();
        assert!((r[0] - 3.25 * n as f64).abs() < 1e-12);
        for k in 1..n {
            assert!(r[k].abs() < 1e-12 && i[k].abs() < 1e-12);
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut re = vec![0.0; 16];
        re[0] = 1.0;
        let im = vec![0.0; 16];
        let (r, i) = fft1d(&re, &im, false).unwrap();
        for k in 0..16 {
            assert!((r[k] - 1.0).abs() < 1e-12 && i[k].abs() < 1e-12);
        }
    }

    #[test]
    fn fft1d_matches_direct_sum_oracle() {
        for n in [16usize, 12] {
            let re = seeded_tensor(&[n], 100 + n as u64);
            let im = seeded_tensor(&[n], 200 + n as u64);
            let (r, i) = fft1d(re.data(), im.data(), false).unwrap();
            let (or, oi) = reference::dft1d(re.data(), im.data(), false);
            for k in 0..n {
                assert!((r[k] - or[k]).abs() < 1e-10, "n={n} bin {k}");
                assert!((i[k] - oi[k]).abs() < 1e-10, "n={n} bin {k}");
            }
        }
    }

    #[test]
    fn fft1d_rejects_mismatched_lengths() {
        assert!(fft1d(&[1.0, 2.0], &[0.0], false).is_err());
    }

    #[test]
    fn rfft2d_constant_plane_is_dc_only() {
        let c = 0.75;
        let x = Tensor::full(&[1, 1, 4, 4], c);
        let s = rfft2d(&x).unwrap();
        assert!((s.re.data()[0] - 16.0 * c).abs() < 1e-12);
        for idx in 1..s.re.len() {
            assert!(s.re.data()[idx].abs() < 1e-12);
        }
        assert!(s.im.abs_max() < 1e-12);
    }

    #[test]
    fn rfft2d_delta_has_unit_spectrum() {
        let mut x = Tensor::zeros(&[1, 1, 4, 6]);
        x.data_mut()[0] = 1.0;
        let s = rfft2d(&x).unwrap();
        for idx in 0..s.re.len() {
            assert!((s.re.data()[idx] - 1.0).abs() < 1e-12);
            assert!(s.im.data()[idx].abs() < 1e-12);
        }
    }

    #[test]
    fn rfft2d_matches_full_dft_oracle_via_symmetry() {
        let x = seeded_tensor(&[1, 1, 6, 8], 42);
        let s = rfft2d(&x).unwrap();
        let (h, w, wf) = (6, 8, half_width(8));
        let (ore, oim) = reference::dft2d(&x.data()[..h * w], h, w);
        // stored half must match the oracle directly
        for u in 0..h {
            for v in 0..wf {
                assert!((s.re.data()[u * wf + v] - ore[u * w + v]).abs() < 1e-10);
                assert!((s.im.data()[u * wf + v] - oim[u * w + v]).abs() < 1e-10);
            }
        }
        // unstored bins must be recoverable as conjugates
        for u in 0..h {
            for v in wf..w {
                let mu = (h - u) % h;
                let mv = w - v;
                assert!((s.re.data()[mu * wf + mv] - ore[u * w + v]).abs() < 1e-10);
                assert!((-s.im.data()[mu * wf + mv] - oim[u * w + v]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hermitian_self_conjugate_bins_have_zero_imag() {
        let x = seeded_tensor(&[1, 1, 4, 6], 43);
        let s = rfft2d(&x).unwrap();
        let wf = half_width(6);
        // (0,0), (H/2,0), (0,W/2), (H/2,W/2)
        for (u, v) in [(0, 0), (2, 0), (0, 3), (2, 3)] {
            assert!(s.im.data()[u * wf + v].abs() < 1e-9, "bin ({u},{v})");
        }
    }

    #[test]
    fn roundtrip_recovers_input() {
        let x = seeded_tensor(&[2, 3, 4, 4], 44);
        let back = irfft2d(&rfft2d(&x).unwrap()).unwrap();
        assert!(x.sub(&back).unwrap().abs_max() < 1e-10);
        let odd = seeded_tensor(&[1, 2, 6, 7], 45);
        let back = irfft2d(&rfft2d(&odd).unwrap()).unwrap();
        assert!(odd.sub(&back).unwrap().abs_max() < 1e-10);
    }

    #[test]
    fn dc_spectrum_inverts_to_constant_plane() {
        let (h, w) = (4usize, 4usize);
        let mut re = Tensor::zeros(&[1, 1, h, half_width(w)]);
        re.data_mut()[0] = (h * w) as f64;
        let s = ComplexSpectrum {
            im: Tensor::zeros(re.shape()),
            re,
            orig_width: w,
        };
        let x = irfft2d(&s).unwrap();
        for &v in x.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let re = Tensor::zeros(&[1, 1, 3, 3]);
        let s = ComplexSpectrum {
            im: Tensor::zeros(re.shape()),
            re,
            orig_width: 5,
        };
        assert!(irfft2d(&s).unwrap().abs_max() == 0.0);
    }

    #[test]
    fn irfft2d_rejects_inconsistent_width() {
        let re = Tensor::zeros(&[1, 1, 4, 3]);
        let s = ComplexSpectrum {
            im: Tensor::zeros(re.shape()),
            re,
            orig_width: 7, // 3 stored bins mean width 4 or 5
        };
        assert!(irfft2d(&s).is_err());
    }

    #[test]
    fn parseval_holds_over_expanded_spectrum() {
        let x = seeded_tensor(&[1, 1, 6, 8], 46);
        let (h, w) = (6, 8);
        let s = rfft2d(&x).unwrap();
        let wf = half_width(w);
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let mut spectral = 0.0;
        for u in 0..h {
            for v in 0..w {
                let (mu, mv, sign) = if v < wf {
                    (u, v, 1.0)
                } else {
                    ((h - u) % h, w - v, -1.0)
                };
                let re = s.re.data()[mu * wf + mv];
                let im = sign * s.im.data()[mu * wf + mv];
                spectral += re * re + im * im;
            }
        }
        spectral /= (h * w) as f64;
        assert!((spatial - spectral).abs() / spatial.abs() < 1e-10);
    }

    #[test]
    fn rfft2d_is_linear() {
        let x = seeded_tensor(&[1, 2, 4, 6], 47);
        let y = seeded_tensor(&[1, 2, 4, 6], 48);
        let (a, b) = (1.7, -0.4);
        let mixed = rfft2d(&x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let sx = rfft2d(&x).unwrap();
        let sy = rfft2d(&y).unwrap();
        let want_re = sx.re.scale(a).add(&sy.re.scale(b)).unwrap();
        let want_im = sx.im.scale(a).add(&sy.im.scale(b)).unwrap();
        assert!(mixed.re.sub(&want_re).unwrap().abs_max() < 1e-10);
        assert!(mixed.im.sub(&want_im).unwrap().abs_max() < 1e-10);
    }

    #[test]
    fn pointwise_spectral_product_is_circular_convolution() {
        let (h, w) = (4usize, 6usize);
        let x = seeded_tensor(&[1, 1, h, w], 49);
        let y = seeded_tensor(&[1, 1, h, w], 50);
        let sx = rfft2d(&x).unwrap();
        let sy = rfft2d(&y).unwrap();
        let wf = half_width(w);
        let mut pre = Tensor::zeros(&[1, 1, h, wf]);
        let mut pim = Tensor::zeros(&[1, 1, h, wf]);
        for i in 0..h * wf {
            let (ar, ai) = (sx.re.data()[i], sx.im.data()[i]);
            let (br, bi) = (sy.re.data()[i], sy.im.data()[i]);
            pre.data_mut()[i] = ar * br - ai * bi;
            pim.data_mut()[i] = ar * bi + ai * br;
        }
        let via_fft = irfft2d(&ComplexSpectrum {
            re: pre,
            im: pim,
            orig_width: w,
        })
        .unwrap();
        // direct circular convolution
        let mut direct = Tensor::zeros(&[1, 1, h, w]);
        for m in 0..h {
            for n in 0..w {
                let mut acc = 0.0;
                for a in 0..h {
                    for b in 0..w {
                        let xm = x.data()[a * w + b];
                        let ym = y.data()[((m + h - a) % h) * w + (n + w - b) % w];
                        acc += xm * ym;
                    }
                }
                direct.data_mut()[m * w + n] = acc;
            }
        }
        assert!(via_fft.sub(&direct).unwrap().abs_max() < 1e-9);
    }
}
