//! Zero-padded stride-1 2-D convolution (cross-correlation, no kernel flip)
//! and training-mode batch normalization, with explicit backward passes.

use rand::Rng;

use crate::error::{FgaError, Result};
use crate::tensor::{GradPair, Tensor};

/// Cross-correlate `input` `[N,Cin,H,W]` with `weight` `[Cout,Cin,k,k]` and
/// add `bias` `[Cout]`. Padding `k/2` preserves the spatial size.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::check(input, weight, bias, padding)?;
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    for n in 0..g.n {
        for co in 0..g.cout {
            let b = bd[co];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b;
                    for ci in 0..g.cin {
                        let xplane = &xd[(n * g.cin + ci) * g.h * g.w..];
                        let wplane = &wd[(co * g.cin + ci) * g.k * g.k..];
                        for ky in 0..g.k {
                            let iy = oy + ky;
                            if iy < g.pad || iy - g.pad >= g.h {
                                continue;
                            }
                            let iy = iy - g.pad;
                            for kx in 0..g.k {
                                let ix = ox + kx;
                                if ix < g.pad || ix - g.pad >= g.w {
                                    continue;
                                }
                                acc += wplane[ky * g.k + kx] * xplane[iy * g.w + ix - g.pad];
                            }
                        }
                    }
                    out[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of `conv2d` w.r.t. input, weight and bias given the upstream
/// gradient on the output.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    padding: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias = Tensor::zeros(&[weight.shape()[0]]);
    let g = ConvGeometry::check(input, weight, &bias, padding)?;
    if upstream.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(FgaError::ShapeMismatch {
            context: "conv2d upstream gradient",
            lhs: upstream.shape().to_vec(),
            rhs: vec![g.n, g.cout, g.oh, g.ow],
        });
    }
    let xd = input.data();
    let wd = weight.data();
    let ud = upstream.data();

    let mut dbias = vec![0.0; g.cout];
    for n in 0..g.n {
        for co in 0..g.cout {
            let uplane = &ud[(n * g.cout + co) * g.oh * g.ow..(n * g.cout + co + 1) * g.oh * g.ow];
            dbias[co] += uplane.iter().sum::<f64>();
        }
    }

    let mut dweight = vec![0.0; wd.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let dwp = &mut dweight[(co * g.cin + ci) * g.k * g.k..(co * g.cin + ci + 1) * g.k * g.k];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let xplane = &xd[(n * g.cin + ci) * g.h * g.w..];
                        let uplane = &ud[(n * g.cout + co) * g.oh * g.ow..];
                        for oy in 0..g.oh {
                            let iy = oy + ky;
                            if iy < g.pad || iy - g.pad >= g.h {
                                continue;
                            }
                            let iy = iy - g.pad;
                            for ox in 0..g.ow {
                                let ix = ox + kx;
                                if ix < g.pad || ix - g.pad >= g.w {
                                    continue;
                                }
                                acc += uplane[oy * g.ow + ox] * xplane[iy * g.w + ix - g.pad];
                            }
                        }
                    }
                    dwp[ky * g.k + kx] = acc;
                }
            }
        }
    }

    let mut dinput = vec![0.0; xd.len()];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let dxp = &mut dinput[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
            for co in 0..g.cout {
                let wplane = &wd[(co * g.cin + ci) * g.k * g.k..];
                let uplane = &ud[(n * g.cout + co) * g.oh * g.ow..];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wplane[ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for iy in 0..g.h {
                            // oy = iy - ky + pad must land inside the output
                            let oy = iy + g.pad;
                            if oy < ky || oy - ky >= g.oh {
                                continue;
                            }
                            let oy = oy - ky;
                            for ix in 0..g.w {
                                let ox = ix + g.pad;
                                if ox < kx || ox - kx >= g.ow {
                                    continue;
                                }
                                dxp[iy * g.w + ix] += wv * uplane[oy * g.ow + ox - kx];
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((
        Tensor::new(input.shape(), dinput)?,
        Tensor::new(weight.shape(), dweight)?,
        Tensor::new(&[g.cout], dbias)?,
    ))
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn check(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Self> {
        if input.rank() != 4 || weight.rank() != 4 {
            return Err(FgaError::InvalidArgument(format!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            )));
        }
        let (n, cin, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (cout, wcin, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wcin != cin {
            return Err(FgaError::ShapeMismatch {
                context: "conv2d input channels vs weight channels",
                lhs: input.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if kh != kw {
            return Err(FgaError::InvalidArgument(format!(
                "conv2d expects a square kernel, got {kh}x{kw}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(FgaError::ShapeMismatch {
                context: "conv2d bias",
                lhs: bias.shape().to_vec(),
                rhs: vec![cout],
            });
        }
        let span = h + 2 * padding;
        if span < kh || w + 2 * padding < kw {
            return Err(FgaError::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} does not fit a {h}x{w} input with padding {padding}"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            pad: padding,
            oh: h + 2 * padding - kh + 1,
            ow: w + 2 * padding - kw + 1,
        })
    }
}

// ---------------------------------------------------------------------------
// batch norm

/// Training-mode batch normalization over `(N, H, W)` per channel with biased
/// variance: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm2d(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = bn_geometry(input, gamma, beta, eps)?;
    let stats = bn_stats(input, eps, n, c, h, w);
    let mut out = vec![0.0; input.len()];
    let xd = input.data();
    for ni in 0..n {
        for ci in 0..c {
            let (mean, istd) = stats[ci];
            let g = gamma.data()[ci];
            let b = beta.data()[ci];
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                out[base + i] = g * (xd[base + i] - mean) * istd + b;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Gradients of `batchnorm2d` through the batch statistics.
pub fn batchnorm2d_backward(
    input: &Tensor,
    gamma: &Tensor,
    eps: f64,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let beta = Tensor::zeros(gamma.shape());
    let (n, c, h, w) = bn_geometry(input, gamma, &beta, eps)?;
    input.check_same_shape(upstream, "batchnorm2d upstream gradient")?;
    let stats = bn_stats(input, eps, n, c, h, w);
    let m = (n * h * w) as f64;
    let xd = input.data();
    let ud = upstream.data();

    let mut dinput = vec![0.0; xd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let (mean, istd) = stats[ci];
        let g = gamma.data()[ci];
        // reductions over the channel's batch slab
        let mut sum_u = 0.0;
        let mut sum_ux = 0.0; // sum of upstream * xhat
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let xhat = (xd[base + i] - mean) * istd;
                sum_u += ud[base + i];
                sum_ux += ud[base + i] * xhat;
            }
        }
        dbeta[ci] = sum_u;
        dgamma[ci] = sum_ux;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let xhat = (xd[base + i] - mean) * istd;
                let du = ud[base + i] * g;
                dinput[base + i] = istd * (du - (g / m) * sum_u - xhat * (g / m) * sum_ux);
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dinput)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

fn bn_geometry(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(usize, usize, usize, usize)> {
    if input.rank() != 4 {
        return Err(FgaError::InvalidArgument(format!(
            "batchnorm2d expects a rank-4 input, got {:?}",
            input.shape()
        )));
    }
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(FgaError::ShapeMismatch {
            context: "batchnorm2d gamma/beta",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    if eps <= 0.0 {
        return Err(FgaError::InvalidArgument(format!(
            "batchnorm2d eps must be positive, got {eps}"
        )));
    }
    if n * h * w < 2 {
        return Err(FgaError::InvalidArgument(format!(
            "batchnorm2d needs at least 2 elements per channel, got {}",
            n * h * w
        )));
    }
    Ok((n, c, h, w))
}

// per-channel (mean, 1/sqrt(var + eps))
fn bn_stats(input: &Tensor, eps: f64, n: usize, c: usize, h: usize, w: usize) -> Vec<(f64, f64)> {
    let m = (n * h * w) as f64;
    let xd = input.data();
    (0..c)
        .map(|ci| {
            let mut sum = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                sum += xd[base..base + h * w].iter().sum::<f64>();
            }
            let mean = sum / m;
            let mut var = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    let d = xd[base + i] - mean;
                    var += d * d;
                }
            }
            (mean, 1.0 / (var / m + eps).sqrt())
        })
        .collect()
}

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// parameter bundles

/// Weights and bias of one convolution, with accumulated gradients.
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub weight: GradPair,
    pub bias: GradPair,
    pub padding: usize,
}

impl Conv2dParams {
    /// Seeded uniform init scaled to the fan-in; bias starts at zero.
    pub fn init<R: Rng>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (2.0 / fan_in).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: GradPair::new(Tensor::new(&[cout, cin, k, k], data).expect("valid shape")),
            bias: GradPair::new(Tensor::zeros(&[cout])),
            padding: k / 2,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight.value, &self.bias.value, self.padding)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let (dx, dw, db) = conv2d_backward(input, &self.weight.value, self.padding, upstream)?;
        self.weight.accumulate(&dw)?;
        self.bias.accumulate(&db)?;
        Ok(dx)
    }
}

/// Scale/shift of one batch-norm stage, with accumulated gradients.
#[derive(Debug, Clone)]
pub struct BatchNorm2dParams {
    pub gamma: GradPair,
    pub beta: GradPair,
    pub eps: f64,
}

impl BatchNorm2dParams {
    pub fn init(channels: usize) -> Self {
        Self {
            gamma: GradPair::new(Tensor::full(&[channels], 1.0)),
            beta: GradPair::new(Tensor::zeros(&[channels])),
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        batchnorm2d(input, &self.gamma.value, &self.beta.value, self.eps)
    }

    pub fn backward(&mut self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let (dx, dgamma, dbeta) =
            batchnorm2d_backward(input, &self.gamma.value, self.eps, upstream)?;
        self.gamma.accumulate(&dgamma)?;
        self.beta.accumulate(&dbeta)?;
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::seeded_tensor;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = seeded_tensor(&[1, 1, 3, 3], 10);
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input_hand_sums() {
        let x = Tensor::full(&[1, 1, 5, 5], 2.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        // interior pixel sees 9 taps of value 2, a corner only 4
        assert!((y.data()[2 * 5 + 2] - 18.0).abs() < 1e-15);
        assert!((y.data()[0] - 8.0).abs() < 1e-15);
    }

    // independent quadruple-nested-loop reference, written against the
    // definition rather than the implementation above
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((ni * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn random_conv_matches_loop_oracle() {
        let x = seeded_tensor(&[2, 3, 5, 5], 11);
        let w = seeded_tensor(&[4, 3, 3, 3], 12);
        let b = seeded_tensor(&[4], 13);
        let got = conv2d(&x, &w, &b, 1).unwrap();
        let want = conv_oracle(&x, &w, &b, 1);
        let diff = got.sub(&want).unwrap().abs_max();
        assert!(diff < 1e-12, "max abs diff {diff}");
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        let b = Tensor::zeros(&[2]);
        let msg = conv2d(&x, &w, &b, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_is_linear_in_its_input() {
        let w = seeded_tensor(&[2, 2, 3, 3], 14);
        let b = Tensor::zeros(&[2]);
        let x = seeded_tensor(&[1, 2, 4, 4], 15);
        let y = seeded_tensor(&[1, 2, 4, 4], 16);
        let (alpha, beta) = (0.7, -1.3);
        let mixed = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = conv2d(&mixed, &w, &b, 1).unwrap();
        let rhs = conv2d(&x, &w, &b, 1)
            .unwrap()
            .scale(alpha)
            .add(&conv2d(&y, &w, &b, 1).unwrap().scale(beta))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().abs_max() < 1e-10);
    }

    #[test]
    fn conv_is_deterministic() {
        let x = seeded_tensor(&[2, 2, 4, 4], 17);
        let w = seeded_tensor(&[3, 2, 3, 3], 18);
        let b = seeded_tensor(&[3], 19);
        let a = conv2d(&x, &w, &b, 1).unwrap();
        let c = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn bn_normalizes_each_channel() {
        let x = seeded_tensor(&[2, 3, 4, 4], 20).scale(2.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let y = batchnorm2d(&x, &gamma, &beta, BN_EPS).unwrap();
        let m = 2.0 * 16.0;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..2 {
                let base = (n * 3 + c) * 16;
                for i in 0..16 {
                    mean += y.data()[base + i];
                }
            }
            mean /= m;
            for n in 0..2 {
                let base = (n * 3 + c) * 16;
                for i in 0..16 {
                    var += (y.data()[base + i] - mean).powi(2);
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
            // output variance is var/(var+eps), i.e. 1 up to the eps correction
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn bn_zero_input_with_zero_beta_stays_zero() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let y = batchnorm2d(&x, &gamma, &beta, BN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_matches_scalar_recomputation() {
        let x = seeded_tensor(&[2, 3, 4, 4], 21);
        let gamma = Tensor::full(&[3], 1.5);
        let beta = Tensor::full(&[3], 0.5);
        let eps = BN_EPS;
        let y = batchnorm2d(&x, &gamma, &beta, eps).unwrap();
        // scalar re-implementation, one value at a time
        let m = 32.0;
        for c in 0..3 {
            let mut mean = 0.0;
            for n in 0..2 {
                for i in 0..16 {
                    mean += x.data()[(n * 3 + c) * 16 + i];
                }
            }
            mean /= m;
            let mut var = 0.0;
            for n in 0..2 {
                for i in 0..16 {
                    var += (x.data()[(n * 3 + c) * 16 + i] - mean).powi(2);
                }
            }
            var /= m;
            for n in 0..2 {
                for i in 0..16 {
                    let idx = (n * 3 + c) * 16 + i;
                    let want = 1.5 * (x.data()[idx] - mean) / (var + eps).sqrt() + 0.5;
                    assert!((y.data()[idx] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bn_rejects_single_element_channels() {
        let x = Tensor::zeros(&[1, 3, 1, 1]);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        assert!(batchnorm2d(&x, &gamma, &beta, BN_EPS).is_err());
    }
}
