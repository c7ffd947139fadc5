//! The dual-path layer: split channels into a global and a local branch,
//! cross-mix them through 3x3 convolutions and the spectral block, normalize,
//! apply spatial attention to the global half and channel attention to the
//! local half, and concatenate back to the input channel count.

use rand::Rng;

use crate::attention::{
    channel_attention, channel_attention_backward, spatial_attention, spatial_attention_backward,
    ChannelAttentionParams, SpatialAttentionParams,
};
use crate::conv::{BatchNorm2dParams, Conv2dParams};
use crate::error::{FgaError, Result};
use crate::spectral::{spectral_block, spectral_block_backward, SpectralBlockParams};
use crate::tensor::{relu, relu_backward, GradPair, Tensor};

/// Channel split of one layer. The global branch takes the *first*
/// `round_half_up(alpha_in * channels)` channels, clamped so both branches
/// stay non-empty.
#[derive(Debug, Clone, Copy)]
pub struct FgaConfig {
    channels: usize,
    alpha_in: f64,
    global: usize,
}

impl FgaConfig {
    pub fn new(channels: usize, alpha_in: f64) -> Result<Self> {
        if channels < 2 {
            return Err(FgaError::InvalidArgument(format!(
                "layer needs at least 2 channels to split, got {channels}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha_in) {
            return Err(FgaError::InvalidArgument(format!(
                "alpha_in must lie in [0, 1], got {alpha_in}"
            )));
        }
        // f64::round is round-half-away-from-zero, i.e. half-up for
        // non-negative values
        let global = ((alpha_in * channels as f64).round() as usize).clamp(1, channels - 1);
        Ok(Self {
            channels,
            alpha_in,
            global,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alpha_in(&self) -> f64 {
        self.alpha_in
    }

    pub fn global_channels(&self) -> usize {
        self.global
    }

    pub fn local_channels(&self) -> usize {
        self.channels - self.global
    }
}

/// All learnables of one layer.
#[derive(Debug, Clone)]
pub struct FgaParams {
    /// local -> local 3x3 path
    pub conv_ll: Conv2dParams,
    /// local -> global 3x3 path
    pub conv_lg: Conv2dParams,
    /// global -> local 3x3 path
    pub conv_gl: Conv2dParams,
    /// global -> global frequency path
    pub spectral: SpectralBlockParams,
    pub bn_local: BatchNorm2dParams,
    pub bn_global: BatchNorm2dParams,
    pub channel_attn: ChannelAttentionParams,
    pub spatial_attn: SpatialAttentionParams,
}

impl FgaParams {
    pub fn init<R: Rng>(cfg: &FgaConfig, rng: &mut R) -> Self {
        let (cg, cl) = (cfg.global_channels(), cfg.local_channels());
        Self {
            conv_ll: Conv2dParams::init(cl, cl, 3, rng),
            conv_lg: Conv2dParams::init(cg, cl, 3, rng),
            conv_gl: Conv2dParams::init(cl, cg, 3, rng),
            spectral: SpectralBlockParams::init(cg, rng),
            bn_local: BatchNorm2dParams::init(cl),
            bn_global: BatchNorm2dParams::init(cg),
            channel_attn: ChannelAttentionParams::init(),
            spatial_attn: SpatialAttentionParams::init(cg, rng),
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, &GradPair)> {
        vec![
            ("conv_ll.weight", &self.conv_ll.weight),
            ("conv_ll.bias", &self.conv_ll.bias),
            ("conv_lg.weight", &self.conv_lg.weight),
            ("conv_lg.bias", &self.conv_lg.bias),
            ("conv_gl.weight", &self.conv_gl.weight),
            ("conv_gl.bias", &self.conv_gl.bias),
            ("spectral.conv.weight", &self.spectral.freq_conv.weight),
            ("spectral.conv.bias", &self.spectral.freq_conv.bias),
            ("spectral.bn.gamma", &self.spectral.freq_bn.gamma),
            ("spectral.bn.beta", &self.spectral.freq_bn.beta),
            ("bn_local.gamma", &self.bn_local.gamma),
            ("bn_local.beta", &self.bn_local.beta),
            ("bn_global.gamma", &self.bn_global.gamma),
            ("bn_global.beta", &self.bn_global.beta),
            ("channel_attn.mu", &self.channel_attn.mu_gate),
            ("spatial_attn.proj1.weight", &self.spatial_attn.proj1.weight),
            ("spatial_attn.proj1.bias", &self.spatial_attn.proj1.bias),
            ("spatial_attn.proj2.weight", &self.spatial_attn.proj2.weight),
            ("spatial_attn.proj2.bias", &self.spatial_attn.proj2.bias),
            ("spatial_attn.proj3.weight", &self.spatial_attn.proj3.weight),
            ("spatial_attn.proj3.bias", &self.spatial_attn.proj3.bias),
            ("spatial_attn.lambda", &self.spatial_attn.lambda_gate),
        ]
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut GradPair)> {
        vec![
            ("conv_ll.weight", &mut self.conv_ll.weight),
            ("conv_ll.bias", &mut self.conv_ll.bias),
            ("conv_lg.weight", &mut self.conv_lg.weight),
            ("conv_lg.bias", &mut self.conv_lg.bias),
            ("conv_gl.weight", &mut self.conv_gl.weight),
            ("conv_gl.bias", &mut self.conv_gl.bias),
            ("spectral.conv.weight", &mut self.spectral.freq_conv.weight),
            ("spectral.conv.bias", &mut self.spectral.freq_conv.bias),
            ("spectral.bn.gamma", &mut self.spectral.freq_bn.gamma),
            ("spectral.bn.beta", &mut self.spectral.freq_bn.beta),
            ("bn_local.gamma", &mut self.bn_local.gamma),
            ("bn_local.beta", &mut self.bn_local.beta),
            ("bn_global.gamma", &mut self.bn_global.gamma),
            ("bn_global.beta", &mut self.bn_global.beta),
            ("channel_attn.mu", &mut self.channel_attn.mu_gate),
            ("spatial_attn.proj1.weight", &mut self.spatial_attn.proj1.weight),
            ("spatial_attn.proj1.bias", &mut self.spatial_attn.proj1.bias),
            ("spatial_attn.proj2.weight", &mut self.spatial_attn.proj2.weight),
            ("spatial_attn.proj2.bias", &mut self.spatial_attn.proj2.bias),
            ("spatial_attn.proj3.weight", &mut self.spatial_attn.proj3.weight),
            ("spatial_attn.proj3.bias", &mut self.spatial_attn.proj3.bias),
            ("spatial_attn.lambda", &mut self.spatial_attn.lambda_gate),
        ]
    }

    pub fn param_names(&self) -> Vec<String> {
        self.entries().into_iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&GradPair> {
        self.entries().into_iter().find(|(n, _)| *n == name).map(|(_, p)| p)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut GradPair> {
        self.entries_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, p)| p)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.entries_mut() {
            p.zero_grad();
        }
    }
}

fn channel_slice(x: &Tensor, from: usize, to: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (to - from) * hw);
    for ni in 0..n {
        let base = ni * c * hw;
        data.extend_from_slice(&x.data()[base + from * hw..base + to * hw]);
    }
    Tensor::new(&[n, to - from, h, w], data).expect("valid slice")
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    Tensor::new(&[n, ca + cb, h, w], data).expect("valid concat")
}

fn check_input(x: &Tensor, cfg: &FgaConfig) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != cfg.channels() {
        return Err(FgaError::ShapeMismatch {
            context: "fga_forward input channels",
            lhs: x.shape().to_vec(),
            rhs: vec![0, cfg.channels(), 0, 0],
        });
    }
    Ok(())
}

/// One layer forward pass; output shape equals input shape, with the
/// attended global half occupying the leading channels.
pub fn fga_forward(x: &Tensor, p: &FgaParams, cfg: &FgaConfig) -> Result<Tensor> {
    check_input(x, cfg)?;
    let (cg, c) = (cfg.global_channels(), cfg.channels());
    let x_g = channel_slice(x, 0, cg);
    let x_l = channel_slice(x, cg, c);

    let f_ll = p.conv_ll.forward(&x_l)?;
    let f_lg = p.conv_lg.forward(&x_l)?;
    let f_gl = p.conv_gl.forward(&x_g)?;
    let f_gg = spectral_block(&x_g, &p.spectral)?;

    let y_local = f_gl.add(&f_ll)?;
    let y_global = f_lg.add(&f_gg)?;

    let b_local = relu(&p.bn_local.forward(&y_local)?);
    let b_global = relu(&p.bn_global.forward(&y_global)?);

    let attended_local = channel_attention(&b_local, &p.channel_attn)?;
    let attended_global = spatial_attention(&b_global, &p.spatial_attn)?;

    Ok(concat_channels(&attended_global, &attended_local))
}

/// Backward pass of one layer; accumulates every parameter gradient and
/// returns the gradient w.r.t. the layer input.
pub fn fga_backward(
    x: &Tensor,
    p: &mut FgaParams,
    cfg: &FgaConfig,
    upstream: &Tensor,
) -> Result<Tensor> {
    check_input(x, cfg)?;
    x.check_same_shape(upstream, "fga upstream gradient")?;
    let (cg, c) = (cfg.global_channels(), cfg.channels());
    let x_g = channel_slice(x, 0, cg);
    let x_l = channel_slice(x, cg, c);

    // forward intermediates
    let f_ll = p.conv_ll.forward(&x_l)?;
    let f_lg = p.conv_lg.forward(&x_l)?;
    let f_gl = p.conv_gl.forward(&x_g)?;
    let f_gg = spectral_block(&x_g, &p.spectral)?;
    let y_local = f_gl.add(&f_ll)?;
    let y_global = f_lg.add(&f_gg)?;
    let bn_local_out = p.bn_local.forward(&y_local)?;
    let bn_global_out = p.bn_global.forward(&y_global)?;
    let b_local = relu(&bn_local_out);
    let b_global = relu(&bn_global_out);

    // reverse
    let d_global_half = channel_slice(upstream, 0, cg);
    let d_local_half = channel_slice(upstream, cg, c);

    let d_b_global = spatial_attention_backward(&b_global, &mut p.spatial_attn, &d_global_half)?;
    let d_b_local = channel_attention_backward(&b_local, &mut p.channel_attn, &d_local_half)?;

    let d_y_global = p
        .bn_global
        .backward(&y_global, &relu_backward(&bn_global_out, &d_b_global)?)?;
    let d_y_local = p
        .bn_local
        .backward(&y_local, &relu_backward(&bn_local_out, &d_b_local)?)?;

    let mut dx_l = p.conv_ll.backward(&x_l, &d_y_local)?;
    dx_l.add_scaled(&p.conv_lg.backward(&x_l, &d_y_global)?, 1.0)?;
    let mut dx_g = p.conv_gl.backward(&x_g, &d_y_local)?;
    dx_g.add_scaled(&spectral_block_backward(&x_g, &mut p.spectral, &d_y_global)?, 1.0)?;

    Ok(concat_channels(&dx_g, &dx_l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::seeded_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_params(cfg: &FgaConfig, seed: u64) -> FgaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FgaParams::init(cfg, &mut rng)
    }

    #[test]
    fn even_split_arithmetic() {
        let cfg = FgaConfig::new(4, 0.5).unwrap();
        assert_eq!(cfg.global_channels(), 2);
        assert_eq!(cfg.local_channels(), 2);
        let x = seeded_tensor(&[1, 4, 4, 4], 90);
        let p = seeded_params(&cfg, 91);
        let y = fga_forward(&x, &p, &cfg).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn rounding_is_half_up() {
        let cfg = FgaConfig::new(10, 0.25).unwrap();
        assert_eq!(cfg.global_channels(), 3); // round(2.5) -> 3
        assert_eq!(cfg.local_channels(), 7);
    }

    #[test]
    fn degenerate_configs_are_rejected_or_clamped() {
        assert!(FgaConfig::new(1, 0.5).is_err());
        assert!(FgaConfig::new(4, 1.5).is_err());
        let lo = FgaConfig::new(4, 0.0).unwrap();
        assert_eq!(lo.global_channels(), 1);
        let hi = FgaConfig::new(4, 1.0).unwrap();
        assert_eq!(hi.global_channels(), 3);
    }

    #[test]
    fn zero_input_with_zero_offsets_maps_to_zero() {
        let cfg = FgaConfig::new(4, 0.5).unwrap();
        let mut p = seeded_params(&cfg, 92);
        for conv in [&mut p.conv_ll, &mut p.conv_lg, &mut p.conv_gl] {
            conv.bias.value.data_mut().fill(0.0);
        }
        p.spectral.freq_conv.bias.value.data_mut().fill(0.0);
        p.spectral.freq_bn.beta.value.data_mut().fill(0.0);
        p.bn_local.beta.value.data_mut().fill(0.0);
        p.bn_global.beta.value.data_mut().fill(0.0);
        // gates stay at their zero init
        let x = Tensor::zeros(&[1, 4, 4, 4]);
        let y = fga_forward(&x, &p, &cfg).unwrap();
        assert!(y.abs_max() < 1e-12);
    }

    #[test]
    fn channel_bookkeeping_holds_for_extreme_splits() {
        for alpha in [0.0, 1.0] {
            let cfg = FgaConfig::new(4, alpha).unwrap();
            assert_eq!(cfg.global_channels() + cfg.local_channels(), 4);
            let mut p = seeded_params(&cfg, 93);
            let x = seeded_tensor(&[1, 4, 4, 4], 94);
            let y = fga_forward(&x, &p, &cfg).unwrap();
            assert_eq!(y.shape(), x.shape());
            let up = seeded_tensor(&[1, 4, 4, 4], 95);
            let dx = fga_backward(&x, &mut p, &cfg, &up).unwrap();
            assert_eq!(dx.shape(), x.shape());
        }
    }

    #[test]
    fn split_and_concat_are_inverse() {
        let x = seeded_tensor(&[2, 5, 3, 3], 96);
        let a = channel_slice(&x, 0, 2);
        let b = channel_slice(&x, 2, 5);
        assert_eq!(concat_channels(&a, &b), x);
    }
}
