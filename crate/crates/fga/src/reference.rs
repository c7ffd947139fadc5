//! Direct-by-definition Fourier references used to cross-check the fast
//! transforms. These are deliberately written as literal sums over the
//! definition and share no code with the `fft` module.

use crate::error::Result;
use crate::fft;
use crate::gradcheck::seeded_tensor;
use crate::tensor::Tensor;

/// O(n^2) DFT straight from the definition.
pub fn dft1d(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let mut ar = 0.0;
        let mut ai = 0.0;
        for j in 0..n {
            let angle = sign * 2.0 * std::f64::consts::PI * (k as f64) * (j as f64) / n as f64;
            let (s, c) = angle.sin_cos();
            ar += re[j] * c - im[j] * s;
            ai += re[j] * s + im[j] * c;
        }
        out_re[k] = ar;
        out_im[k] = ai;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        out_re.iter_mut().for_each(|v| *v *= scale);
        out_im.iter_mut().for_each(|v| *v *= scale);
    }
    (out_re, out_im)
}

/// Full complex 2-D DFT of one real `h x w` plane, one double sum per bin.
pub fn dft2d(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(plane.len(), h * w);
    let mut out_re = vec![0.0; h * w];
    let mut out_im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut ar = 0.0;
            let mut ai = 0.0;
            for m in 0..h {
                for n in 0..w {
                    let angle = -2.0
                        * std::f64::consts::PI
                        * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    let (s, c) = angle.sin_cos();
                    ar += plane[m * w + n] * c;
                    ai += plane[m * w + n] * s;
                }
            }
            out_re[u * w + v] = ar;
            out_im[u * w + v] = ai;
        }
    }
    (out_re, out_im)
}

/// Full complex inverse 2-D DFT (with `1/(h*w)` scaling), by definition.
pub fn idft2d(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out_re = vec![0.0; h * w];
    let mut out_im = vec![0.0; h * w];
    let norm = 1.0 / (h * w) as f64;
    for m in 0..h {
        for n in 0..w {
            let mut ar = 0.0;
            let mut ai = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let angle = 2.0
                        * std::f64::consts::PI
                        * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    let (s, c) = angle.sin_cos();
                    ar += re[u * w + v] * c - im[u * w + v] * s;
                    ai += re[u * w + v] * s + im[u * w + v] * c;
                }
            }
            out_re[m * w + n] = ar * norm;
            out_im[m * w + n] = ai * norm;
        }
    }
    (out_re, out_im)
}

/// One size of the transform/oracle comparison sweep.
#[derive(Debug, Clone)]
pub struct SelfTestRow {
    pub h: usize,
    pub w: usize,
    /// max |fast - direct| over the symmetry-expanded spectrum
    pub forward_err: f64,
    /// max |irfft2d(rfft2d(x)) - x|
    pub roundtrip_err: f64,
    /// | sum x^2 - sum |X|^2 / (HW) | / sum x^2
    pub parseval_rel_err: f64,
}

/// Compare `rfft2d`/`irfft2d` against the direct references over a size sweep.
pub fn fft_selftest(sizes: &[(usize, usize)], seed: u64) -> Result<Vec<SelfTestRow>> {
    let mut rows = Vec::with_capacity(sizes.len());
    for (idx, &(h, w)) in sizes.iter().enumerate() {
        let x = seeded_tensor(&[1, 1, h, w], seed.wrapping_add(idx as u64));
        let s = fft::rfft2d(&x)?;
        let wf = w / 2 + 1;
        let (ore, oim) = dft2d(x.data(), h, w);

        let mut forward_err: f64 = 0.0;
        let mut spectral_energy = 0.0;
        for u in 0..h {
            for v in 0..w {
                // expand the stored half by conjugate symmetry
                let (su, sv, sign) = if v < wf {
                    (u, v, 1.0)
                } else {
                    ((h - u) % h, w - v, -1.0)
                };
                let fre = s.re.data()[su * wf + sv];
                let fim = sign * s.im.data()[su * wf + sv];
                forward_err = forward_err
                    .max((fre - ore[u * w + v]).abs())
                    .max((fim - oim[u * w + v]).abs());
                spectral_energy += fre * fre + fim * fim;
            }
        }
        let spatial_energy: f64 = x.data().iter().map(|v| v * v).sum();
        let parseval_rel_err =
            (spatial_energy - spectral_energy / (h * w) as f64).abs() / spatial_energy;

        let back = fft::irfft2d(&s)?;
        let roundtrip_err = back.sub(&x)?.abs_max();

        rows.push(SelfTestRow {
            h,
            w,
            forward_err,
            roundtrip_err,
            parseval_rel_err,
        });
    }
    Ok(rows)
}

/// The size sweep exercised by `fft-selftest` and the acceptance gate.
pub const SELFTEST_SIZES: [usize; 5] = [4, 6, 8, 12, 16];

pub fn selftest_size_grid() -> Vec<(usize, usize)> {
    let mut sizes = Vec::new();
    for &h in &SELFTEST_SIZES {
        for &w in &SELFTEST_SIZES {
            sizes.push((h, w));
        }
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_references_agree_with_each_other() {
        // 1-D applied row/column-wise must equal the 2-D double sum
        let x = seeded_tensor(&[1, 1, 3, 5], 7);
        let (h, w) = (3, 5);
        let (r2, i2) = dft2d(x.data(), h, w);
        let zeros = vec![0.0; w];
        let mut rre = vec![0.0; h * w];
        let mut rim = vec![0.0; h * w];
        for y in 0..h {
            let (r, i) = dft1d(&x.data()[y * w..(y + 1) * w], &zeros, false);
            rre[y * w..(y + 1) * w].copy_from_slice(&r);
            rim[y * w..(y + 1) * w].copy_from_slice(&i);
        }
        for v in 0..w {
            let cr: Vec<f64> = (0..h).map(|y| rre[y * w + v]).collect();
            let ci: Vec<f64> = (0..h).map(|y| rim[y * w + v]).collect();
            let (r, i) = dft1d(&cr, &ci, false);
            for u in 0..h {
                assert!((r[u] - r2[u * w + v]).abs() < 1e-10);
                assert!((i[u] - i2[u * w + v]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn idft_inverts_dft() {
        let x = seeded_tensor(&[1, 1, 4, 3], 8);
        let (re, im) = dft2d(x.data(), 4, 3);
        let (back, resid) = idft2d(&re, &im, 4, 3);
        for (a, b) in back.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(resid.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn selftest_sweep_is_clean() {
        for row in fft_selftest(&selftest_size_grid(), 3).unwrap() {
            assert!(row.forward_err < 1e-10, "{row:?}");
            assert!(row.roundtrip_err < 1e-10, "{row:?}");
            assert!(row.parseval_rel_err < 1e-10, "{row:?}");
        }
    }
}
