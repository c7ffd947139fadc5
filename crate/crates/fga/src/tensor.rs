//! Dense row-major f64 tensors plus the small differentiable primitives the
//! rest of the crate composes: matmul, transpose, reshape, ReLU, row softmax.
//!
//! Tensors are immutable values once produced; every op here is a pure
//! function and the backward passes are explicit companions rather than an
//! autodiff tape.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{FgaError, Result};
use crate::io;

/// Dense N-dimensional array of f64, row-major, every extent >= 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(FgaError::InvalidArgument(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(FgaError::InvalidArgument(format!(
                "tensor shape {shape:?} holds {want} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e >= 1), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Single-element tensor of shape `[1]`, used for scalar learnables.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(FgaError::ShapeMismatch {
                context: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Permute axes; `axes` must be a permutation of `0..rank`.
    pub fn transpose(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        {
            return Err(FgaError::InvalidArgument(format!(
                "transpose axes {axes:?} are not a permutation of 0..{r}"
            )));
        }
        let old_strides = row_major_strides(&self.shape);
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let new_strides = row_major_strides(&new_shape);
        let mut out = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; r];
        for (flat, v) in out.iter_mut().enumerate() {
            // decode flat index in the new layout, map back through `axes`
            let mut rem = flat;
            for d in 0..r {
                idx[d] = rem / new_strides[d];
                rem %= new_strides[d];
            }
            let mut src = 0;
            for d in 0..r {
                src += idx[d] * old_strides[axes[d]];
            }
            *v = self.data[src];
        }
        Tensor::new(&new_shape, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += other * s`, in place.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn abs_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(FgaError::ShapeMismatch {
                context,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// A parameter tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, delta: &Tensor) -> Result<()> {
        self.grad.add_scaled(delta, 1.0)
    }
}

// ---------------------------------------------------------------------------
// matmul / relu / softmax

/// Dense matrix product of a `[M,K]` by a `[K,P]` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, p) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(FgaError::ShapeMismatch {
            context: "matmul inner extents",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * p];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, p], out)
}

/// Gradients of `matmul`: `dA = up . B^T`, `dB = A^T . up`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(upstream, &b.transpose(&[1, 0])?)?;
    let db = matmul(&a.transpose(&[1, 0])?, upstream)?;
    Ok((da, db))
}

fn as_matrix(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(FgaError::InvalidArgument(format!(
            "{context}: expected a rank-2 tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// ReLU vector-Jacobian product; the subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.zip_map(upstream, |x, u| if x > 0.0 { u } else { 0.0 })
}

/// Row-wise softmax of a `[R,K]` tensor, computed with per-row max
/// subtraction so large logits stay finite.
pub fn softmax_rows(input: &Tensor) -> Result<Tensor> {
    let (r, k) = as_matrix(input, "softmax_rows")?;
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let row = &input.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out[i * k..(i + 1) * k];
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(&[r, k], out)
}

/// Softmax VJP from the softmax *output*: `dx = y * (up - <up, y>)` per row.
pub fn softmax_rows_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    output.check_same_shape(upstream, "softmax_rows_backward")?;
    let (r, k) = as_matrix(output, "softmax_rows_backward")?;
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let y = &output.data()[i * k..(i + 1) * k];
        let u = &upstream.data()[i * k..(i + 1) * k];
        let inner: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
        for j in 0..k {
            out[i * k + j] = y[j] * (u[j] - inner);
        }
    }
    Tensor::new(&[r, k], out)
}

// ---------------------------------------------------------------------------
// FGAT binary format: magic "FGAT", u8 rank, rank x u32 LE extents, f64 LE payload.

pub const TENSOR_MAGIC: &[u8; 4] = b"FGAT";

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| FgaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, path, t)
}

pub(crate) fn write_tensor_to<W: std::io::Write>(w: &mut W, path: &Path, t: &Tensor) -> Result<()> {
    io::write_bytes(w, path, TENSOR_MAGIC)?;
    io::write_u8(w, path, t.rank() as u8)?;
    for &e in t.shape() {
        io::write_u32(w, path, e as u32)?;
    }
    for &v in t.data() {
        io::write_f64(w, path, v)?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| FgaError::io(path, e))?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r, path)
}

pub(crate) fn read_tensor_from<R: std::io::Read>(r: &mut R, path: &Path) -> Result<Tensor> {
    io::expect_magic(r, path, "FGAT", TENSOR_MAGIC)?;
    let rank = io::read_u8(r, path)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = io::read_u32(r, path)? as usize;
        if e == 0 {
            return Err(FgaError::format("FGAT", path, "zero extent"));
        }
        shape.push(e);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(io::read_f64(r, path)?);
    }
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        crate::gradcheck::seeded_tensor(shape, seed)
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn matmul_identity_passes_through() {
        let a = seeded(&[3, 3], 1);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let out = matmul(&eye, &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = seeded(&[7, 5], 2);
        let b = seeded(&[5, 3], 3);
        let out = matmul(&a, &b).unwrap();
        // independent triple-loop recomputation
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((out.data()[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extents() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(&[2, 2], -3.5);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let row = Tensor::full(&[1, 4], 2.5);
        let s = softmax_rows(&row).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let row = Tensor::new(&[1, 2], vec![0.0, 3.0_f64.ln()]).unwrap();
        let s = softmax_rows(&row).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let row = Tensor::new(&[1, 3], vec![700.0, 699.0, 698.0]).unwrap();
        let s = softmax_rows(&row).unwrap();
        assert!(s.all_finite());
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_reverses_itself() {
        let t = seeded(&[2, 3, 4], 4);
        let back = t.transpose(&[2, 0, 1]).unwrap().transpose(&[1, 2, 0]).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn transpose_2d_moves_entries() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = t.transpose(&[1, 0]).unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reshape_preserves_count() {
        let t = seeded(&[2, 6], 5);
        assert!(t.reshape(&[3, 4]).is_ok());
        assert!(t.reshape(&[5, 2]).is_err());
    }

    #[test]
    fn tensor_file_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fgat");
        let t = seeded(&[2, 3, 4], 6);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tensor_file_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fgat");
        std::fs::write(&path, b"NOPE\x01\x02\x00\x00\x00").unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
