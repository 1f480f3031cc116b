//! Neural primitives with explicit vector-Jacobian products.
//!
//! The raw kernels (`layer_norm_rows`, `gelu`, ...) work on row-major slices
//! and are shared with the ViT forward/backward pass; the [`Layer`] wrappers
//! expose each of them as a standalone forward + VJP pair for gradient
//! checking.

use crate::error::{FvitError, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// A differentiable map with a hand-written VJP.
pub trait Layer {
    fn forward(&self, input: &Tensor) -> Result<Tensor>;

    /// `Jᵀ · cotangent`, evaluated at `input`. Output shape equals the
    /// input shape.
    fn vjp(&self, input: &Tensor, cotangent: &Tensor) -> Result<Tensor>;
}

pub fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Cached per-row statistics from a layer-norm forward pass.
#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm of an `[rows × d]` slice.
pub fn layer_norm_rows(x: &[f64], d: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let xh = (row[c] - mean) * is;
            xhat[r * d + c] = xh;
            out[r * d + c] = gamma[c] * xh + beta[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm_rows`]. Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_rows_vjp(
    cache: &LnCache,
    d: usize,
    gamma: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        for c in 0..d {
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
            dxhat[c] = g[c] * gamma[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for c in 0..d {
            dx[r * d + c] = cache.inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax backward: `dS = A ⊙ (dA − rowsum(dA ⊙ A))`.
pub fn softmax_rows_vjp(a: &[f64], da: &[f64], n: usize) -> Vec<f64> {
    let rows = a.len() / n;
    let mut ds = vec![0.0; a.len()];
    for r in 0..rows {
        let ar = &a[r * n..(r + 1) * n];
        let dr = &da[r * n..(r + 1) * n];
        let dot: f64 = ar.iter().zip(dr).map(|(x, y)| x * y).sum();
        for c in 0..n {
            ds[r * n + c] = ar[c] * (dr[c] - dot);
        }
    }
    ds
}

fn expect_2d(t: &Tensor, cols: usize, op: &'static str) -> Result<usize> {
    match t.shape() {
        [r, c] if *c == cols => Ok(*r),
        other => Err(FvitError::dim(op, other, &[0, cols])),
    }
}

/// `y = x W + b` on `[rows × in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Layer for Linear {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (din, dout) = (self.weight.shape()[0], self.weight.shape()[1]);
        let rows = expect_2d(input, din, "linear")?;
        let mut y = matmul_raw(input.data(), self.weight.data(), rows, din, dout);
        for r in 0..rows {
            for c in 0..dout {
                y[r * dout + c] += self.bias[c];
            }
        }
        Tensor::new(vec![rows, dout], y)
    }

    fn vjp(&self, input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let (din, dout) = (self.weight.shape()[0], self.weight.shape()[1]);
        let rows = expect_2d(input, din, "linear")?;
        expect_2d(cotangent, dout, "linear vjp")?;
        Tensor::new(
            vec![rows, din],
            matmul_nt(cotangent.data(), self.weight.data(), rows, dout, din),
        )
    }
}

impl Linear {
    /// Parameter gradients `(dW, db)` for a given input and cotangent.
    pub fn param_grads(&self, input: &Tensor, cotangent: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (din, dout) = (self.weight.shape()[0], self.weight.shape()[1]);
        let rows = input.rows();
        let dw = matmul_tn(input.data(), cotangent.data(), rows, din, dout);
        let mut db = vec![0.0; dout];
        for r in 0..rows {
            for c in 0..dout {
                db[c] += cotangent.data()[r * dout + c];
            }
        }
        (dw, db)
    }
}

/// Softmax along the last axis of a 2-D tensor.
#[derive(Debug, Clone, Copy, Default)]
pub struct SoftmaxRows;

impl Layer for SoftmaxRows {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        input.softmax(input.shape().len() - 1)
    }

    fn vjp(&self, input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let a = self.forward(input)?;
        let n = *input.shape().last().unwrap();
        Tensor::new(
            input.shape().to_vec(),
            softmax_rows_vjp(a.data(), cotangent.data(), n),
        )
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Layer for LayerNorm {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let d = self.gamma.len();
        expect_2d(input, d, "layernorm")?;
        let (y, _) = layer_norm_rows(input.data(), d, &self.gamma, &self.beta);
        Tensor::new(input.shape().to_vec(), y)
    }

    fn vjp(&self, input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        let d = self.gamma.len();
        expect_2d(input, d, "layernorm")?;
        let (_, cache) = layer_norm_rows(input.data(), d, &self.gamma, &self.beta);
        let (dx, _, _) = layer_norm_rows_vjp(&cache, d, &self.gamma, cotangent.data());
        Tensor::new(input.shape().to_vec(), dx)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Gelu;

impl Layer for Gelu {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(input.map(gelu))
    }

    fn vjp(&self, input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        input.map(gelu_grad).mul(cotangent)
    }
}

/// Splits a `[C, H, W]` image into a `[patches × C·P·P]` matrix. Patches are
/// ordered row-major over the grid; each patch vector is `(c, dy, dx)`
/// row-major.
#[derive(Debug, Clone, Copy)]
pub struct Patchify {
    pub patch: usize,
}

impl Patchify {
    fn dims(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        match shape {
            [c, h, w] if h % self.patch == 0 && w % self.patch == 0 => Ok((*c, *h, *w)),
            other => Err(FvitError::dim("patchify", other, &[0, self.patch, self.patch])),
        }
    }

    /// `(offset in patch matrix, offset in image)` for element `k` of `patch`.
    fn offsets(&self, c: usize, h: usize, w: usize, patch: usize, k: usize) -> (usize, usize) {
        let p = self.patch;
        let gw = w / p;
        let (gy, gx) = (patch / gw, patch % gw);
        let ch = k / (p * p);
        let (dy, dx) = ((k % (p * p)) / p, k % p);
        (patch * c * p * p + k, ch * h * w + (gy * p + dy) * w + gx * p + dx)
    }

    pub fn unpatchify(&self, patches: &Tensor, image_shape: &[usize]) -> Result<Tensor> {
        let (c, h, w) = self.dims(image_shape)?;
        let np = (h / self.patch) * (w / self.patch);
        let pd = c * self.patch * self.patch;
        if patches.shape() != [np, pd] {
            return Err(FvitError::dim("unpatchify", patches.shape(), &[np, pd]));
        }
        let mut out = Tensor::zeros(image_shape);
        for patch in 0..np {
            for k in 0..pd {
                let (src, dst) = self.offsets(c, h, w, patch, k);
                out.data_mut()[dst] = patches.data()[src];
            }
        }
        Ok(out)
    }
}

impl Layer for Patchify {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.dims(input.shape())?;
        let np = (h / self.patch) * (w / self.patch);
        let pd = c * self.patch * self.patch;
        let mut out = vec![0.0; np * pd];
        for patch in 0..np {
            for k in 0..pd {
                let (dst, src) = self.offsets(c, h, w, patch, k);
                out[dst] = input.data()[src];
            }
        }
        Tensor::new(vec![np, pd], out)
    }

    fn vjp(&self, input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        self.unpatchify(cotangent, input.shape())
    }
}

/// `y = a ⊙ x + b` with fixed per-element coefficients.
#[derive(Debug, Clone)]
pub struct Affine {
    pub scale: Tensor,
    pub offset: Tensor,
}

impl Layer for Affine {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        input.mul(&self.scale)?.add(&self.offset)
    }

    fn vjp(&self, _input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        cotangent.mul(&self.scale)
    }
}

/// Ignores its input.
#[derive(Debug, Clone)]
pub struct Constant {
    pub value: Tensor,
}

impl Layer for Constant {
    fn forward(&self, _input: &Tensor) -> Result<Tensor> {
        Ok(self.value.clone())
    }

    fn vjp(&self, input: &Tensor, _cotangent: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros(input.shape()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;

/// Compares `layer.vjp` with central differences of `⟨u, f(x)⟩` for two
/// random cotangents `u`. The error is normwise:
/// `max_i |vjp_i − fd_i| / max_i |fd_i|` (0 when both vanish).
pub fn finite_diff_check(
    layer: &dyn Layer,
    input: &Tensor,
    tolerance: f64,
    rng: &mut Rng,
) -> Result<FdReport> {
    gradient_check(
        |x| layer.forward(x),
        |x, u| layer.vjp(x, u),
        input,
        tolerance,
        rng,
    )
}

/// [`finite_diff_check`] for an arbitrary forward/VJP closure pair.
pub fn gradient_check(
    forward: impl Fn(&Tensor) -> Result<Tensor>,
    vjp: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    input: &Tensor,
    tolerance: f64,
    rng: &mut Rng,
) -> Result<FdReport> {
    let out_shape = forward(input)?.shape().to_vec();
    let mut worst = 0.0f64;
    for _ in 0..2 {
        let u = crate::rng::gaussian_sample(rng, &out_shape, 1.0)?;
        let analytic = vjp(input, &u)?;
        if analytic.shape() != input.shape() {
            return Err(FvitError::dim("vjp", analytic.shape(), input.shape()));
        }
        let mut fd = vec![0.0; input.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = input.clone();
            plus.data_mut()[i] += FD_STEP;
            let mut minus = input.clone();
            minus.data_mut()[i] -= FD_STEP;
            let fp = forward(&plus)?.dot(&u)?;
            let fm = forward(&minus)?.dot(&u)?;
            *slot = (fp - fm) / (2.0 * FD_STEP);
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .data()
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let rel = if scale == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / scale
        };
        worst = worst.max(rel);
    }
    Ok(FdReport {
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}
