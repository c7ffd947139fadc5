//! Central finite-difference verification of every hand-written backward
//! pass. The same suite backs the `grad-check` subcommand and the test gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_attention, channel_attention_backward, spatial_attention, spatial_attention_backward,
    ChannelAttentionParams, SpatialAttentionParams,
};
use crate::conv::{batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, BN_EPS};
use crate::error::Result;
use crate::fft::{irfft2d, irfft2d_vjp, rfft2d, rfft2d_vjp, ComplexSpectrum};
use crate::layer::{fga_backward, fga_forward, FgaConfig, FgaParams};
use crate::net::Network;
use crate::spectral::{spectral_block, spectral_block_backward, SpectralBlockParams};
use crate::tensor::{
    matmul, matmul_backward, relu, relu_backward, softmax_rows, softmax_rows_backward, Tensor,
};
use crate::train::euclidean_loss_grad;

/// Step for central differences; f64 keeps truncation and roundoff balanced.
pub const FD_STEP: f64 = 1e-6;

/// Seeded uniform tensor in `[-1, 1)`, reproducible across runs.
pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Central finite-difference gradient of a scalar function of one tensor.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative disagreement between an analytic and a numeric gradient.
/// Entries where both are below 1e-5 in magnitude are compared absolutely
/// (finite differences only resolve zeros down to roundoff noise).
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            let mag = a.abs().max(n.abs());
            if mag < 1e-5 {
                if diff < 1e-7 {
                    0.0
                } else {
                    diff / 1e-5
                }
            } else {
                diff / mag
            }
        })
        .fold(0.0, f64::max)
}

/// One row of the gradient report: the op checked, the worst relative error
/// over every checked coordinate, and how many coordinates were compared.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Default tolerance for single ops and blocks.
pub const GRAD_TOL: f64 = 1e-4;
/// Looser tolerance for the end-to-end network loss.
pub const GRAD_TOL_NETWORK: f64 = 1e-3;

struct Collector {
    worst: f64,
    coords: usize,
}

impl Collector {
    fn new() -> Self {
        Self {
            worst: 0.0,
            coords: 0,
        }
    }

    fn compare(&mut self, analytic: &Tensor, numeric: &Tensor) {
        self.worst = self.worst.max(max_rel_err(analytic, numeric));
        self.coords += analytic.len();
    }
}

// Perturb one tensor inside a cloneable bundle, re-evaluating a scalar probe.
fn fd_on<T: Clone>(
    obj: &T,
    select: impl Fn(&mut T) -> &mut Tensor,
    eval: impl Fn(&T) -> f64,
) -> Tensor {
    let len = {
        let mut tmp = obj.clone();
        select(&mut tmp).len()
    };
    let shape = {
        let mut tmp = obj.clone();
        select(&mut tmp).shape().to_vec()
    };
    let mut grad = Tensor::zeros(&shape);
    for i in 0..len {
        let mut plus = obj.clone();
        select(&mut plus).data_mut()[i] += FD_STEP;
        let fp = eval(&plus);
        let mut minus = obj.clone();
        select(&mut minus).data_mut()[i] -= FD_STEP;
        let fm = eval(&minus);
        grad.data_mut()[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    grad
}

/// Run the whole gradient suite with deterministic inputs derived from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_conv2d(seed)?,
        check_batchnorm2d(seed)?,
        check_relu(seed)?,
        check_softmax_rows(seed)?,
        check_matmul(seed)?,
        check_rfft2d(seed)?,
        check_irfft2d(seed)?,
        check_spatial_attention(seed)?,
        check_channel_attention(seed)?,
        check_spectral_block(seed)?,
        check_fga_layer(seed)?,
        check_toy_network(seed)?,
    ])
}

fn check_conv2d(seed: u64) -> Result<CheckReport> {
    let x = seeded_tensor(&[2, 3, 4, 4], seed.wrapping_add(1));
    let w = seeded_tensor(&[2, 3, 3, 3], seed.wrapping_add(2));
    let b = seeded_tensor(&[2], seed.wrapping_add(3));
    let probe = seeded_tensor(&[2, 2, 4, 4], seed.wrapping_add(4));
    let (dx, dw, db) = conv2d_backward(&x, &w, 1, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| conv2d(t, &w, &b, 1).unwrap().dot(&probe).unwrap()),
    );
    col.compare(
        &dw,
        &fd_on(&w, |t| t, |t| conv2d(&x, t, &b, 1).unwrap().dot(&probe).unwrap()),
    );
    col.compare(
        &db,
        &fd_on(&b, |t| t, |t| conv2d(&x, &w, t, 1).unwrap().dot(&probe).unwrap()),
    );
    Ok(CheckReport {
        name: "conv2d",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_batchnorm2d(seed: u64) -> Result<CheckReport> {
    let x = seeded_tensor(&[2, 3, 3, 3], seed.wrapping_add(10));
    let gamma = seeded_tensor(&[3], seed.wrapping_add(11)).map(|v| 1.0 + 0.3 * v);
    let beta = seeded_tensor(&[3], seed.wrapping_add(12));
    let probe = seeded_tensor(&[2, 3, 3, 3], seed.wrapping_add(13));
    let (dx, dgamma, dbeta) = batchnorm2d_backward(&x, &gamma, BN_EPS, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| {
            batchnorm2d(t, &gamma, &beta, BN_EPS).unwrap().dot(&probe).unwrap()
        }),
    );
    col.compare(
        &dgamma,
        &fd_on(&gamma, |t| t, |t| {
            batchnorm2d(&x, t, &beta, BN_EPS).unwrap().dot(&probe).unwrap()
        }),
    );
    col.compare(
        &dbeta,
        &fd_on(&beta, |t| t, |t| {
            batchnorm2d(&x, &gamma, t, BN_EPS).unwrap().dot(&probe).unwrap()
        }),
    );
    Ok(CheckReport {
        name: "batchnorm2d",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_relu(seed: u64) -> Result<CheckReport> {
    // keep every coordinate away from the kink at zero
    let x = seeded_tensor(&[2, 3, 4, 4], seed.wrapping_add(20))
        .map(|v| if v.abs() < 1e-3 { v + 0.1 } else { v });
    let probe = seeded_tensor(&[2, 3, 4, 4], seed.wrapping_add(21));
    let dx = relu_backward(&x, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| relu(t).dot(&probe).unwrap()),
    );
    Ok(CheckReport {
        name: "relu",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_softmax_rows(seed: u64) -> Result<CheckReport> {
    let x = seeded_tensor(&[3, 5], seed.wrapping_add(30));
    let probe = seeded_tensor(&[3, 5], seed.wrapping_add(31));
    let y = softmax_rows(&x)?;
    let dx = softmax_rows_backward(&y, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| softmax_rows(t).unwrap().dot(&probe).unwrap()),
    );
    Ok(CheckReport {
        name: "softmax_rows",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_matmul(seed: u64) -> Result<CheckReport> {
    let a = seeded_tensor(&[3, 4], seed.wrapping_add(40));
    let b = seeded_tensor(&[4, 2], seed.wrapping_add(41));
    let probe = seeded_tensor(&[3, 2], seed.wrapping_add(42));
    let (da, db) = matmul_backward(&a, &b, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &da,
        &fd_on(&a, |t| t, |t| matmul(t, &b).unwrap().dot(&probe).unwrap()),
    );
    col.compare(
        &db,
        &fd_on(&b, |t| t, |t| matmul(&a, t).unwrap().dot(&probe).unwrap()),
    );
    Ok(CheckReport {
        name: "matmul",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_rfft2d(seed: u64) -> Result<CheckReport> {
    let x = seeded_tensor(&[1, 2, 4, 6], seed.wrapping_add(50));
    let s = rfft2d(&x)?;
    let probe_re = seeded_tensor(s.re.shape(), seed.wrapping_add(51));
    let probe_im = seeded_tensor(s.im.shape(), seed.wrapping_add(52));
    let upstream = ComplexSpectrum {
        re: probe_re.clone(),
        im: probe_im.clone(),
        orig_width: s.orig_width,
    };
    let dx = rfft2d_vjp(&upstream)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| {
            let s = rfft2d(t).unwrap();
            s.re.dot(&probe_re).unwrap() + s.im.dot(&probe_im).unwrap()
        }),
    );
    Ok(CheckReport {
        name: "rfft2d",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_irfft2d(seed: u64) -> Result<CheckReport> {
    // arbitrary half-spectrum, not necessarily Hermitian-consistent
    let re = seeded_tensor(&[1, 2, 4, 3], seed.wrapping_add(60));
    let im = seeded_tensor(&[1, 2, 4, 3], seed.wrapping_add(61));
    let spec = ComplexSpectrum {
        re,
        im,
        orig_width: 4,
    };
    let probe = seeded_tensor(&[1, 2, 4, 4], seed.wrapping_add(62));
    let dspec = irfft2d_vjp(&probe)?;
    let mut col = Collector::new();
    col.compare(
        &dspec.re,
        &fd_on(&spec, |s| &mut s.re, |s| irfft2d(s).unwrap().dot(&probe).unwrap()),
    );
    col.compare(
        &dspec.im,
        &fd_on(&spec, |s| &mut s.im, |s| irfft2d(s).unwrap().dot(&probe).unwrap()),
    );
    Ok(CheckReport {
        name: "irfft2d",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_spatial_attention(seed: u64) -> Result<CheckReport> {
    let x = seeded_tensor(&[1, 3, 2, 2], seed.wrapping_add(70));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(71));
    let mut params = SpatialAttentionParams::init(3, &mut rng);
    params.lambda_gate.value.data_mut()[0] = 0.7;
    let probe = seeded_tensor(&[1, 3, 2, 2], seed.wrapping_add(72));

    let mut work = params.clone();
    let dx = spatial_attention_backward(&x, &mut work, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| {
            spatial_attention(t, &params).unwrap().dot(&probe).unwrap()
        }),
    );
    let eval = |p: &SpatialAttentionParams| spatial_attention(&x, p).unwrap().dot(&probe).unwrap();
    let cases: Vec<(&Tensor, fn(&mut SpatialAttentionParams) -> &mut Tensor)> = vec![
        (&work.proj1.weight.grad, |p| &mut p.proj1.weight.value),
        (&work.proj1.bias.grad, |p| &mut p.proj1.bias.value),
        (&work.proj2.weight.grad, |p| &mut p.proj2.weight.value),
        (&work.proj2.bias.grad, |p| &mut p.proj2.bias.value),
        (&work.proj3.weight.grad, |p| &mut p.proj3.weight.value),
        (&work.proj3.bias.grad, |p| &mut p.proj3.bias.value),
        (&work.lambda_gate.grad, |p| &mut p.lambda_gate.value),
    ];
    for (analytic, select) in cases {
        col.compare(analytic, &fd_on(&params, select, eval));
    }
    Ok(CheckReport {
        name: "spatial_attention",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_channel_attention(seed: u64) -> Result<CheckReport> {
    let x = seeded_tensor(&[2, 3, 2, 2], seed.wrapping_add(80));
    let mut params = ChannelAttentionParams::init();
    params.mu_gate.value.data_mut()[0] = 0.8;
    let probe = seeded_tensor(&[2, 3, 2, 2], seed.wrapping_add(81));

    let mut work = params.clone();
    let dx = channel_attention_backward(&x, &mut work, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| {
            channel_attention(t, &params).unwrap().dot(&probe).unwrap()
        }),
    );
    col.compare(
        &work.mu_gate.grad,
        &fd_on(
            &params,
            |p| &mut p.mu_gate.value,
            |p| channel_attention(&x, p).unwrap().dot(&probe).unwrap(),
        ),
    );
    Ok(CheckReport {
        name: "channel_attention",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_spectral_block(seed: u64) -> Result<CheckReport> {
    let x = seeded_tensor(&[1, 2, 4, 4], seed.wrapping_add(90));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(91));
    let params = SpectralBlockParams::init(2, &mut rng);
    let probe = seeded_tensor(&[1, 2, 4, 4], seed.wrapping_add(92));

    let mut work = params.clone();
    let dx = spectral_block_backward(&x, &mut work, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| {
            spectral_block(t, &params).unwrap().dot(&probe).unwrap()
        }),
    );
    let eval = |p: &SpectralBlockParams| spectral_block(&x, p).unwrap().dot(&probe).unwrap();
    let cases: Vec<(&Tensor, fn(&mut SpectralBlockParams) -> &mut Tensor)> = vec![
        (&work.freq_conv.weight.grad, |p| &mut p.freq_conv.weight.value),
        (&work.freq_conv.bias.grad, |p| &mut p.freq_conv.bias.value),
        (&work.freq_bn.gamma.grad, |p| &mut p.freq_bn.gamma.value),
        (&work.freq_bn.beta.grad, |p| &mut p.freq_bn.beta.value),
    ];
    for (analytic, select) in cases {
        col.compare(analytic, &fd_on(&params, select, eval));
    }
    Ok(CheckReport {
        name: "spectral_block",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_fga_layer(seed: u64) -> Result<CheckReport> {
    let cfg = FgaConfig::new(4, 0.5)?;
    let x = seeded_tensor(&[1, 4, 6, 6], seed.wrapping_add(100));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    let mut params = FgaParams::init(&cfg, &mut rng);
    // open both gates so the attention paths carry gradient
    params.spatial_attn.lambda_gate.value.data_mut()[0] = 0.6;
    params.channel_attn.mu_gate.value.data_mut()[0] = -0.4;
    let probe = seeded_tensor(&[1, 4, 6, 6], seed.wrapping_add(102));

    let mut work = params.clone();
    let dx = fga_backward(&x, &mut work, &cfg, &probe)?;
    let mut col = Collector::new();
    col.compare(
        &dx,
        &fd_on(&x, |t| t, |t| {
            fga_forward(t, &params, &cfg).unwrap().dot(&probe).unwrap()
        }),
    );
    let names = work.param_names();
    for name in names {
        let analytic = work.param(&name).expect("known param").grad.clone();
        let numeric = fd_on(
            &params,
            |p| &mut p.param_mut(&name).expect("known param").value,
            |p| fga_forward(&x, p, &cfg).unwrap().dot(&probe).unwrap(),
        );
        col.compare(&analytic, &numeric);
    }
    Ok(CheckReport {
        name: "fga_layer",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL,
    })
}

fn check_toy_network(seed: u64) -> Result<CheckReport> {
    let mut net = Network::build_toy(1, 4, 1, 0.5, seed.wrapping_add(110))?;
    // open the gates; at init they block gradient flow through attention
    for name in net.param_names() {
        if name.ends_with("lambda") || name.ends_with("mu") {
            net.param_mut(&name).expect("known param").value.data_mut()[0] = 0.5;
        }
    }
    let x = seeded_tensor(&[1, 1, 6, 6], seed.wrapping_add(111));
    let gt = seeded_tensor(&[1, 1, 6, 6], seed.wrapping_add(112)).map(f64::abs);

    let loss_of = |net: &Network| -> f64 {
        let pred = net.forward(&x).unwrap();
        let (loss, _) = euclidean_loss_grad(&[pred], &[gt.clone()]).unwrap();
        loss
    };

    let mut work = net.clone();
    work.zero_grad();
    let pred = work.forward(&x)?;
    let (_, grads) = euclidean_loss_grad(&[pred], &[gt.clone()])?;
    work.backward(&x, &grads[0])?;

    let mut col = Collector::new();
    for name in net.param_names() {
        let analytic = work.param(&name).expect("known param").grad.clone();
        let numeric = fd_on(
            &net,
            |n| &mut n.param_mut(&name).expect("known param").value,
            loss_of,
        );
        col.compare(&analytic, &numeric);
    }
    Ok(CheckReport {
        name: "toy_network",
        max_rel_err: col.worst,
        coords: col.coords,
        tolerance: GRAD_TOL_NETWORK,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_analytic_on_a_quadratic() {
        let x = seeded_tensor(&[4], 7);
        let f = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let num = finite_diff_grad(f, &x, FD_STEP);
        let ana = x.scale(2.0);
        assert!(max_rel_err(&ana, &num) < 1e-6);
    }

    #[test]
    fn rel_err_tolerates_structural_zeros() {
        let a = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let n = Tensor::new(&[2], vec![1e-9, 1.0 + 1e-9]).unwrap();
        assert!(max_rel_err(&a, &n) < 1e-6);
    }
}
