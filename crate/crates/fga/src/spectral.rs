//! The frequency-domain unit: real 2-D FFT, real/imaginary channel stacking,
//! a 1x1 Conv-BN-ReLU over the frequency grid, unstacking, inverse FFT.
//! Editing a bin in the frequency domain touches every output pixel, which is
//! what gives the block its global receptive field.

use rand::Rng;

use crate::conv::{BatchNorm2dParams, Conv2dParams};
use crate::error::{FgaError, Result};
use crate::fft::{half_width, irfft2d, irfft2d_vjp, rfft2d, rfft2d_vjp, ComplexSpectrum};
use crate::tensor::{relu, relu_backward, Tensor};

/// Frequency-domain parameters; channel counts are twice the block's input
/// channel count because real and imaginary parts are stacked.
#[derive(Debug, Clone)]
pub struct SpectralBlockParams {
    pub freq_conv: Conv2dParams,
    pub freq_bn: BatchNorm2dParams,
}

impl SpectralBlockParams {
    pub fn init<R: Rng>(input_channels: usize, rng: &mut R) -> Self {
        let doubled = 2 * input_channels;
        Self {
            freq_conv: Conv2dParams::init(doubled, doubled, 1, rng),
            freq_bn: BatchNorm2dParams::init(doubled),
        }
    }

    /// Input channel count the parameters were sized for.
    pub fn input_channels(&self) -> usize {
        self.freq_conv.weight.value.shape()[0] / 2
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != 4 {
            return Err(FgaError::InvalidArgument(format!(
                "spectral_block expects a rank-4 input, got {:?}",
                x.shape()
            )));
        }
        let cg = x.shape()[1];
        if self.freq_conv.weight.value.shape()[0] != 2 * cg {
            return Err(FgaError::ShapeMismatch {
                context: "spectral_block parameters vs doubled input channels",
                lhs: self.freq_conv.weight.value.shape().to_vec(),
                rhs: vec![2 * cg, 2 * cg, 1, 1],
            });
        }
        Ok(cg)
    }
}

/// Stack a half-spectrum into one real tensor: the first half of the channels
/// holds the real parts, the second half the imaginary parts.
pub fn stack_spectrum(s: &ComplexSpectrum) -> Tensor {
    let shape = s.re.shape();
    let (n, c, h, wf) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = c * h * wf;
    let mut data = Vec::with_capacity(2 * n * plane);
    for ni in 0..n {
        data.extend_from_slice(&s.re.data()[ni * plane..(ni + 1) * plane]);
        data.extend_from_slice(&s.im.data()[ni * plane..(ni + 1) * plane]);
    }
    Tensor::new(&[n, 2 * c, h, wf], data).expect("valid stack")
}

/// Inverse of `stack_spectrum`. The channel count must be even and
/// `orig_width` must be consistent with the stored bin count.
pub fn unstack_spectrum(y: &Tensor, orig_width: usize) -> Result<ComplexSpectrum> {
    if y.rank() != 4 || y.shape()[1] % 2 != 0 {
        return Err(FgaError::InvalidArgument(format!(
            "unstack_spectrum expects rank-4 input with an even channel count, got {:?}",
            y.shape()
        )));
    }
    let (n, c2, h, wf) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    if orig_width != 2 * (wf - 1) && orig_width != 2 * wf - 1 {
        return Err(FgaError::InvalidArgument(format!(
            "unstack_spectrum: width {orig_width} inconsistent with {wf} stored bins"
        )));
    }
    let c = c2 / 2;
    let plane = c * h * wf;
    let mut re = Vec::with_capacity(n * plane);
    let mut im = Vec::with_capacity(n * plane);
    for ni in 0..n {
        let base = ni * 2 * plane;
        re.extend_from_slice(&y.data()[base..base + plane]);
        im.extend_from_slice(&y.data()[base + plane..base + 2 * plane]);
    }
    Ok(ComplexSpectrum {
        re: Tensor::new(&[n, c, h, wf], re)?,
        im: Tensor::new(&[n, c, h, wf], im)?,
        orig_width,
    })
}

/// FFT -> stack -> 1x1 Conv -> BN -> ReLU -> unstack -> inverse FFT.
/// Output shape equals input shape.
pub fn spectral_block(x: &Tensor, p: &SpectralBlockParams) -> Result<Tensor> {
    p.check(x)?;
    let w = x.shape()[3];
    let stacked = stack_spectrum(&rfft2d(x)?);
    let filtered = relu(&p.freq_bn.forward(&p.freq_conv.forward(&stacked)?)?);
    irfft2d(&unstack_spectrum(&filtered, w)?)
}

/// Backward pass of `spectral_block`; accumulates parameter gradients and
/// returns the input gradient.
pub fn spectral_block_backward(
    x: &Tensor,
    p: &mut SpectralBlockParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    p.check(x)?;
    x.check_same_shape(upstream, "spectral_block upstream gradient")?;
    let w = x.shape()[3];

    // forward intermediates
    let stacked = stack_spectrum(&rfft2d(x)?);
    let conv_out = p.freq_conv.forward(&stacked)?;
    let bn_out = p.freq_bn.forward(&conv_out)?;

    // reverse chain
    let d_spec = irfft2d_vjp(upstream)?;
    let d_filtered = stack_spectrum(&d_spec);
    let d_bn_out = relu_backward(&bn_out, &d_filtered)?;
    let d_conv_out = p.freq_bn.backward(&conv_out, &d_bn_out)?;
    let d_stacked = p.freq_conv.backward(&stacked, &d_conv_out)?;
    rfft2d_vjp(&unstack_spectrum(&d_stacked, w)?)
}

/// Absolute response difference of `f` between a probe input and a baseline.
pub fn influence_map<F>(f: F, baseline: &Tensor, probe: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let a = f(probe)?;
    let b = f(baseline)?;
    Ok(a.sub(&b)?.map(f64::abs))
}

/// Influence of a single-pixel input on the block's output, relative to the
/// block's response to the zero image.
pub fn receptive_field_probe(x: &Tensor, p: &SpectralBlockParams) -> Result<Tensor> {
    influence_map(|t| spectral_block(t, p), &Tensor::zeros(x.shape()), x)
}

/// A `[1, 1, H, W]` image with a single unit pixel at `(row, col)`.
pub fn delta_image(h: usize, w: usize, row: usize, col: usize) -> Tensor {
    let mut x = Tensor::zeros(&[1, 1, h, w]);
    x.data_mut()[row * w + col] = 1.0;
    x
}

/// Fraction of spatial positions whose worst-channel influence exceeds the
/// threshold.
pub fn perturbed_fraction(influence: &Tensor, threshold: f64) -> f64 {
    let s = influence.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut hit = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut worst: f64 = 0.0;
            for ni in 0..n {
                for ci in 0..c {
                    worst = worst.max(influence.data()[((ni * c + ci) * h + y) * w + x]);
                }
            }
            if worst > threshold {
                hit += 1;
            }
        }
    }
    hit as f64 / (h * w) as f64
}

/// Largest Chebyshev distance from `(row, col)` at which the influence map
/// still exceeds the threshold; this is the observed receptive radius.
pub fn influence_radius(influence: &Tensor, row: usize, col: usize, threshold: f64) -> usize {
    let s = influence.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut radius = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut worst: f64 = 0.0;
            for ni in 0..n {
                for ci in 0..c {
                    worst = worst.max(influence.data()[((ni * c + ci) * h + y) * w + x]);
                }
            }
            if worst > threshold {
                let d = (y.abs_diff(row)).max(x.abs_diff(col));
                radius = radius.max(d);
            }
        }
    }
    radius
}
