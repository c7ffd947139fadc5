//! Spatial and channel attention with learnable residual gates.
//!
//! Both maps are normalized over the *influencing* index: entry `(m, n)` of
//! an attention map says how much source `m` contributes to target `n`, and
//! each column over `m` sums to one. Attention is computed per sample, never
//! across the batch. With a gate at zero the op is an exact pass-through,
//! which is also the initialization state.

use rand::Rng;

use crate::conv::Conv2dParams;
use crate::error::{FgaError, Result};
use crate::tensor::{
    matmul, matmul_backward, softmax_rows, softmax_rows_backward, GradPair, Tensor,
};

/// Channel reduction for the two score projections.
pub const SPATIAL_REDUCTION: usize = 8;

/// Three 1x1 projections and the residual gate of spatial attention.
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams {
    /// C -> C/r score projection (source side).
    pub proj1: Conv2dParams,
    /// C -> C/r score projection (target side).
    pub proj2: Conv2dParams,
    /// C -> C value projection.
    pub proj3: Conv2dParams,
    /// Residual gate, initialized to zero.
    pub lambda_gate: GradPair,
}

impl SpatialAttentionParams {
    pub fn reduced_channels(channels: usize) -> usize {
        (channels / SPATIAL_REDUCTION).max(1)
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let reduced = Self::reduced_channels(channels);
        Self {
            proj1: Conv2dParams::init(reduced, channels, 1, rng),
            proj2: Conv2dParams::init(reduced, channels, 1, rng),
            proj3: Conv2dParams::init(channels, channels, 1, rng),
            lambda_gate: GradPair::new(Tensor::scalar(0.0)),
        }
    }
}

/// The residual gate of channel attention; the map itself has no weights.
#[derive(Debug, Clone)]
pub struct ChannelAttentionParams {
    pub mu_gate: GradPair,
}

impl ChannelAttentionParams {
    pub fn init() -> Self {
        Self {
            mu_gate: GradPair::new(Tensor::scalar(0.0)),
        }
    }
}

impl Default for ChannelAttentionParams {
    fn default() -> Self {
        Self::init()
    }
}

fn check_input(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(FgaError::InvalidArgument(format!(
            "{op} expects a rank-4 input, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]))
}

fn sample(x: &Tensor, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let plane = &x.data()[n * c * h * w..(n + 1) * c * h * w];
    Tensor::new(&[1, c, h, w], plane.to_vec()).expect("valid slice")
}

// Row-stochastic score matrix R with R[n, m] = softmax over m of <s1_m, s2_n>;
// its transpose is the influence map normalized over the source index.
fn spatial_scores(s1: &Tensor, s2: &Tensor) -> Result<Tensor> {
    let scores = matmul(&s2.transpose(&[1, 0])?, s1)?;
    softmax_rows(&scores)
}

/// Spatial attention: project into score/value spaces, build the `HW x HW`
/// pixel influence map, and add the gated attended values back onto `x`.
pub fn spatial_attention(x: &Tensor, p: &SpatialAttentionParams) -> Result<Tensor> {
    let (n, c, h, w) = check_input(x, "spatial_attention")?;
    let hw = h * w;
    let lambda = p.lambda_gate.value.data()[0];
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        let xs = sample(x, ni, c, h, w);
        let out_slice = &mut out.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        if lambda == 0.0 {
            out_slice.copy_from_slice(xs.data());
            continue;
        }
        let s1 = p.proj1.forward(&xs)?.reshape(&[p.proj1.weight.value.shape()[0], hw])?;
        let s2 = p.proj2.forward(&xs)?.reshape(&[p.proj2.weight.value.shape()[0], hw])?;
        let s3 = p.proj3.forward(&xs)?.reshape(&[c, hw])?;
        let r = spatial_scores(&s1, &s2)?;
        let attn = matmul(&s3, &r.transpose(&[1, 0])?)?;
        for (o, (&xv, &av)) in out_slice.iter_mut().zip(xs.data().iter().zip(attn.data())) {
            *o = xv + lambda * av;
        }
    }
    Ok(out)
}

/// Per-sample spatial influence maps, entry `(m, n)` weighting source pixel
/// `m` against target pixel `n`; every column sums to one.
pub fn spatial_attention_map(x: &Tensor, p: &SpatialAttentionParams) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = check_input(x, "spatial_attention_map")?;
    let hw = h * w;
    let mut maps = Vec::with_capacity(n);
    for ni in 0..n {
        let xs = sample(x, ni, c, h, w);
        let s1 = p.proj1.forward(&xs)?.reshape(&[p.proj1.weight.value.shape()[0], hw])?;
        let s2 = p.proj2.forward(&xs)?.reshape(&[p.proj2.weight.value.shape()[0], hw])?;
        maps.push(spatial_scores(&s1, &s2)?.transpose(&[1, 0])?);
    }
    Ok(maps)
}

/// Backward pass of `spatial_attention`; accumulates parameter gradients and
/// returns the gradient w.r.t. `x`.
pub fn spatial_attention_backward(
    x: &Tensor,
    p: &mut SpatialAttentionParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = check_input(x, "spatial_attention")?;
    x.check_same_shape(upstream, "spatial_attention upstream gradient")?;
    let hw = h * w;
    let c1 = p.proj1.weight.value.shape()[0];
    let lambda = p.lambda_gate.value.data()[0];
    let mut dx = upstream.clone(); // residual path
    for ni in 0..n {
        let xs = sample(x, ni, c, h, w);
        let up = sample(upstream, ni, c, h, w).reshape(&[c, hw])?;

        let s1 = p.proj1.forward(&xs)?.reshape(&[c1, hw])?;
        let s2 = p.proj2.forward(&xs)?.reshape(&[c1, hw])?;
        let s3 = p.proj3.forward(&xs)?.reshape(&[c, hw])?;
        let r = spatial_scores(&s1, &s2)?;
        let attn = matmul(&s3, &r.transpose(&[1, 0])?)?;

        p.lambda_gate.grad.data_mut()[0] += up.dot(&attn)?;

        let d_attn = up.scale(lambda);
        let ds3 = matmul(&d_attn, &r)?;
        let dr = matmul(&d_attn.transpose(&[1, 0])?, &s3)?;
        let ds = softmax_rows_backward(&r, &dr)?;
        let (d_s2t, ds1) = matmul_backward(&s2.transpose(&[1, 0])?, &s1, &ds)?;
        let ds2 = d_s2t.transpose(&[1, 0])?;

        let dx1 = p.proj1.backward(&xs, &ds1.reshape(&[1, c1, h, w])?)?;
        let dx2 = p.proj2.backward(&xs, &ds2.reshape(&[1, c1, h, w])?)?;
        let dx3 = p.proj3.backward(&xs, &ds3.reshape(&[1, c, h, w])?)?;

        let slice = &mut dx.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        for i in 0..c * hw {
            slice[i] += dx1.data()[i] + dx2.data()[i] + dx3.data()[i];
        }
    }
    Ok(dx)
}

// Row-stochastic channel scores from the Gram matrix of the flattened sample.
fn channel_scores(f: &Tensor) -> Result<Tensor> {
    let gram = matmul(f, &f.transpose(&[1, 0])?)?;
    softmax_rows(&gram)
}

/// Channel attention: Gram-matrix channel influence map applied with the
/// gated residual, no learned projections.
pub fn channel_attention(x: &Tensor, p: &ChannelAttentionParams) -> Result<Tensor> {
    let (n, c, h, w) = check_input(x, "channel_attention")?;
    let hw = h * w;
    let mu = p.mu_gate.value.data()[0];
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        let xs = sample(x, ni, c, h, w);
        let out_slice = &mut out.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        if mu == 0.0 {
            out_slice.copy_from_slice(xs.data());
            continue;
        }
        let f = xs.reshape(&[c, hw])?;
        let r = channel_scores(&f)?;
        let attn = matmul(&r, &f)?;
        for (o, (&xv, &av)) in out_slice.iter_mut().zip(xs.data().iter().zip(attn.data())) {
            *o = xv + mu * av;
        }
    }
    Ok(out)
}

/// Per-sample channel influence maps (`C x C`, columns sum to one).
pub fn channel_attention_map(x: &Tensor) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = check_input(x, "channel_attention_map")?;
    let hw = h * w;
    let mut maps = Vec::with_capacity(n);
    for ni in 0..n {
        let f = sample(x, ni, c, h, w).reshape(&[c, hw])?;
        maps.push(channel_scores(&f)?.transpose(&[1, 0])?);
    }
    Ok(maps)
}

/// Backward pass of `channel_attention`.
pub fn channel_attention_backward(
    x: &Tensor,
    p: &mut ChannelAttentionParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = check_input(x, "channel_attention")?;
    x.check_same_shape(upstream, "channel_attention upstream gradient")?;
    let hw = h * w;
    let mu = p.mu_gate.value.data()[0];
    let mut dx = upstream.clone();
    for ni in 0..n {
        let f = sample(x, ni, c, h, w).reshape(&[c, hw])?;
        let up = sample(upstream, ni, c, h, w).reshape(&[c, hw])?;

        let r = channel_scores(&f)?;
        let attn = matmul(&r, &f)?;
        p.mu_gate.grad.data_mut()[0] += up.dot(&attn)?;

        let d_attn = up.scale(mu);
        let (dr, mut df) = matmul_backward(&r, &f, &d_attn)?;
        let dg = softmax_rows_backward(&r, &dr)?;
        let ft = f.transpose(&[1, 0])?;
        let (df_a, df_bt) = matmul_backward(&f, &ft, &dg)?;
        df.add_scaled(&df_a, 1.0)?;
        df.add_scaled(&df_bt.transpose(&[1, 0])?, 1.0)?;

        let slice = &mut dx.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        for i in 0..c * hw {
            slice[i] += df.data()[i];
        }
    }
    Ok(dx)
}
