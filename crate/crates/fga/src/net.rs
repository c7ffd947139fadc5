//! A small density-regression network: two 3x3 stem convolutions, a stack of
//! dual-path layers, and a 1x1 head that emits a non-negative density map at
//! input resolution. Parameters are reachable by name for the optimizer and
//! the checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::Conv2dParams;
use crate::error::{FgaError, Result};
use crate::io;
use crate::layer::{fga_backward, fga_forward, FgaConfig, FgaParams};
use crate::tensor::{read_tensor_from, relu, relu_backward, write_tensor_to, GradPair, Tensor};

#[derive(Debug, Clone)]
pub struct Network {
    in_channels: usize,
    width: usize,
    alpha_in: f64,
    fga_cfg: FgaConfig,
    pub stem1: Conv2dParams,
    pub stem2: Conv2dParams,
    pub fga_layers: Vec<FgaParams>,
    pub head: Conv2dParams,
}

/// Build the desk-scale network: `[conv3x3 + ReLU] x2` stem, `n_fga` stacked
/// dual-path layers with independent parameters, and a `width -> 1` head.
/// `n_fga == 0` yields the convolution-only baseline.
pub fn build_toy_network(
    in_channels: usize,
    width: usize,
    n_fga: usize,
    alpha_in: f64,
    seed: u64,
) -> Result<Network> {
    Network::build_toy(in_channels, width, n_fga, alpha_in, seed)
}

impl Network {
    pub fn build_toy(
        in_channels: usize,
        width: usize,
        n_fga: usize,
        alpha_in: f64,
        seed: u64,
    ) -> Result<Self> {
        if width < 2 {
            return Err(FgaError::InvalidArgument(format!(
                "network width must be at least 2 so layers can split, got {width}"
            )));
        }
        if in_channels == 0 {
            return Err(FgaError::InvalidArgument(
                "network needs at least one input channel".to_string(),
            ));
        }
        let fga_cfg = FgaConfig::new(width, alpha_in)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem1 = Conv2dParams::init(width, in_channels, 3, &mut rng);
        let stem2 = Conv2dParams::init(width, width, 3, &mut rng);
        let fga_layers = (0..n_fga)
            .map(|_| FgaParams::init(&fga_cfg, &mut rng))
            .collect();
        let head = Conv2dParams::init(1, width, 1, &mut rng);
        Ok(Self {
            in_channels,
            width,
            alpha_in,
            fga_cfg,
            stem1,
            stem2,
            fga_layers,
            head,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_fga(&self) -> usize {
        self.fga_layers.len()
    }

    pub fn alpha_in(&self) -> f64 {
        self.alpha_in
    }

    pub fn fga_cfg(&self) -> &FgaConfig {
        &self.fga_cfg
    }

    /// Predicted density map `[N,1,H,W]` for an image batch `[N,Cin,H,W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = relu(&self.stem1.forward(x)?);
        t = relu(&self.stem2.forward(&t)?);
        for layer in &self.fga_layers {
            t = fga_forward(&t, layer, &self.fga_cfg)?;
        }
        Ok(relu(&self.head.forward(&t)?))
    }

    /// Backward pass from an upstream gradient on the predicted map;
    /// re-runs the forward chain internally to recover stage inputs,
    /// accumulates all parameter gradients, and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let a1 = self.stem1.forward(x)?;
        let r1 = relu(&a1);
        let a2 = self.stem2.forward(&r1)?;
        let r2 = relu(&a2);
        let mut stage_inputs = Vec::with_capacity(self.fga_layers.len() + 1);
        stage_inputs.push(r2);
        for layer in &self.fga_layers {
            let next = fga_forward(stage_inputs.last().expect("nonempty"), layer, &self.fga_cfg)?;
            stage_inputs.push(next);
        }
        let trunk = stage_inputs.last().expect("nonempty");
        let head_pre = self.head.forward(trunk)?;

        let mut d = self.head.backward(trunk, &relu_backward(&head_pre, upstream)?)?;
        for (layer, input) in self.fga_layers.iter_mut().zip(stage_inputs.iter()).rev() {
            d = fga_backward(input, layer, &self.fga_cfg, &d)?;
        }
        d = self.stem2.backward(&r1, &relu_backward(&a2, &d)?)?;
        self.stem1.backward(x, &relu_backward(&a1, &d)?)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &GradPair)) {
        f("stem1.weight", &self.stem1.weight);
        f("stem1.bias", &self.stem1.bias);
        f("stem2.weight", &self.stem2.weight);
        f("stem2.bias", &self.stem2.bias);
        for (i, layer) in self.fga_layers.iter().enumerate() {
            for (name, p) in layer.entries() {
                f(&format!("fga{i}.{name}"), p);
            }
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut GradPair)) {
        f("stem1.weight", &mut self.stem1.weight);
        f("stem1.bias", &mut self.stem1.bias);
        f("stem2.weight", &mut self.stem2.weight);
        f("stem2.bias", &mut self.stem2.bias);
        for (i, layer) in self.fga_layers.iter_mut().enumerate() {
            for (name, p) in layer.entries_mut() {
                f(&format!("fga{i}.{name}"), p);
            }
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name.to_string()));
        names
    }

    pub fn param(&self, name: &str) -> Option<&GradPair> {
        let (prefix, rest) = name.split_once('.')?;
        match prefix {
            "stem1" => conv_member(&self.stem1, rest),
            "stem2" => conv_member(&self.stem2, rest),
            "head" => conv_member(&self.head, rest),
            _ => {
                let idx: usize = prefix.strip_prefix("fga")?.parse().ok()?;
                self.fga_layers.get(idx)?.param(rest)
            }
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut GradPair> {
        let (prefix, rest) = name.split_once('.')?;
        match prefix {
            "stem1" => conv_member_mut(&mut self.stem1, rest),
            "stem2" => conv_member_mut(&mut self.stem2, rest),
            "head" => conv_member_mut(&mut self.head, rest),
            _ => {
                let idx: usize = prefix.strip_prefix("fga")?.parse().ok()?;
                self.fga_layers.get_mut(idx)?.param_mut(rest)
            }
        }
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, p| count += p.value.len());
        count
    }
}

fn conv_member<'a>(conv: &'a Conv2dParams, rest: &str) -> Option<&'a GradPair> {
    match rest {
        "weight" => Some(&conv.weight),
        "bias" => Some(&conv.bias),
        _ => None,
    }
}

fn conv_member_mut<'a>(conv: &'a mut Conv2dParams, rest: &str) -> Option<&'a mut GradPair> {
    match rest {
        "weight" => Some(&mut conv.weight),
        "bias" => Some(&mut conv.bias),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// FGAC checkpoints: magic "FGAC", u32 entry count, then per entry a u16 name
// length, the name bytes, and an FGAT tensor record. The architecture rides
// along as a regular entry named "meta.arch".

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGAC";
const ARCH_ENTRY: &str = "meta.arch";

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let file = File::create(path).map_err(|e| FgaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut entries: Vec<(String, Tensor)> = vec![(
        ARCH_ENTRY.to_string(),
        Tensor::new(
            &[4],
            vec![
                net.in_channels as f64,
                net.width as f64,
                net.fga_layers.len() as f64,
                net.alpha_in,
            ],
        )?,
    )];
    net.visit_params(&mut |name, p| entries.push((name.to_string(), p.value.clone())));

    io::write_bytes(&mut w, path, CHECKPOINT_MAGIC)?;
    io::write_u32(&mut w, path, entries.len() as u32)?;
    for (name, tensor) in &entries {
        io::write_u16(&mut w, path, name.len() as u16)?;
        io::write_bytes(&mut w, path, name.as_bytes())?;
        write_tensor_to(&mut w, path, tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let file = File::open(path).map_err(|e| FgaError::io(path, e))?;
    let mut r = BufReader::new(file);
    io::expect_magic(&mut r, path, "FGAC", CHECKPOINT_MAGIC)?;
    let count = io::read_u32(&mut r, path)? as usize;
    let mut entries = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = io::read_u16(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        io::read_exact(&mut r, path, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| FgaError::format("FGAC", path, "entry name is not UTF-8"))?;
        let tensor = read_tensor_from(&mut r, path)?;
        entries.insert(name, tensor);
    }

    let arch = entries
        .remove(ARCH_ENTRY)
        .ok_or_else(|| FgaError::format("FGAC", path, "missing meta.arch entry"))?;
    if arch.len() != 4 {
        return Err(FgaError::format("FGAC", path, "meta.arch must hold 4 values"));
    }
    let (in_channels, width, n_fga, alpha_in) = (
        arch.data()[0] as usize,
        arch.data()[1] as usize,
        arch.data()[2] as usize,
        arch.data()[3],
    );
    let mut net = Network::build_toy(in_channels, width, n_fga, alpha_in, 0)?;
    let mut missing = Vec::new();
    net.visit_params_mut(&mut |name, p| match entries.remove(name) {
        Some(tensor) if tensor.shape() == p.value.shape() => p.value = tensor,
        Some(tensor) => missing.push(format!(
            "{name}: shape {:?} does not match {:?}",
            tensor.shape(),
            p.value.shape()
        )),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(FgaError::format("FGAC", path, missing.join("; ")));
    }
    if let Some(stray) = entries.keys().next() {
        return Err(FgaError::format(
            "FGAC",
            path,
            format!("unknown entry `{stray}`"),
        ));
    }
    Ok(net)
}
