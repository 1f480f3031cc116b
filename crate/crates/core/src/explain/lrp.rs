//! Layer-wise relevance propagation through the toy ViT.
//!
//! Linear layers use the selected [`LinearRule`] without biases. Residual
//! additions split relevance in proportion to each branch's contribution and
//! renormalize so the sum is kept; the two attention products hand half of
//! their relevance to each operand; layer norm, GELU and softmax pass
//! relevance through unchanged.

use serde::{Deserialize, Serialize};

use super::CONSERVATION_TOLERANCE;
use crate::error::{FvitError, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::vit::{ForwardTrace, ViTParams};

const STABILIZER: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearRule {
    /// `R_i = Σ_j x_i w_ij / z_j · R_j` with signed contributions.
    Z,
    /// Positive contributions only (`x⁺w⁺ + x⁻w⁻`).
    AlphaOneBetaZero,
}

/// Relevance totals along the pass, from the explained logit down to the
/// encoder input tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrpAudit {
    pub at_output: f64,
    /// Total entering each block from the top, last block first.
    pub per_block: Vec<f64>,
    pub at_input: f64,
    /// `|at_input / at_output − 1|`.
    pub relative_leak: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone)]
pub struct LrpOutput {
    pub token_scores: Vec<f64>,
    /// Relevance of each post-softmax attention map, `[layer][head]`.
    pub attn_relevance: Vec<Vec<Tensor>>,
    pub audit: LrpAudit,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / (b + STABILIZER * b.signum())
    }
}

fn finite(r: &[f64], at: impl FnOnce() -> String) -> Result<()> {
    if r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FvitError::Numerical {
            at: at(),
            detail: "non-finite relevance".into(),
        })
    }
}

/// Relevance of the inputs `x` (`[rows × in]`) of `y = x W` given output
/// relevance `r` (`[rows × out]`).
pub fn linear_relprop(x: &[f64], w: &Tensor, r: &[f64], rule: LinearRule) -> Vec<f64> {
    let (din, dout) = (w.rows(), w.cols());
    let rows = x.len() / din;
    match rule {
        LinearRule::Z => {
            let z = matmul_raw(x, w.data(), rows, din, dout);
            let s: Vec<f64> = r.iter().zip(&z).map(|(&r, &z)| safe_div(r, z)).collect();
            let c = matmul_nt(&s, w.data(), rows, dout, din);
            x.iter().zip(c).map(|(x, c)| x * c).collect()
        }
        LinearRule::AlphaOneBetaZero => {
            let px: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            let nx: Vec<f64> = x.iter().map(|v| v.min(0.0)).collect();
            let pw: Vec<f64> = w.data().iter().map(|v| v.max(0.0)).collect();
            let nw: Vec<f64> = w.data().iter().map(|v| v.min(0.0)).collect();
            let z: Vec<f64> = matmul_raw(&px, &pw, rows, din, dout)
                .into_iter()
                .zip(matmul_raw(&nx, &nw, rows, din, dout))
                .map(|(a, b)| a + b)
                .collect();
            let s: Vec<f64> = r.iter().zip(&z).map(|(&r, &z)| safe_div(r, z)).collect();
            let cp = matmul_nt(&s, &pw, rows, dout, din);
            let cn = matmul_nt(&s, &nw, rows, dout, din);
            let mut out: Vec<f64> = (0..x.len()).map(|i| px[i] * cp[i] + nx[i] * cn[i]).collect();
            // Outputs without any activating contribution would drop their
            // relevance; they fall back to the z-rule.
            if z.iter().zip(r).any(|(&z, &r)| z == 0.0 && r != 0.0) {
                let dead: Vec<f64> = r.iter().zip(&z).map(|(&r, &z)| if z == 0.0 { r } else { 0.0 }).collect();
                let fallback = linear_relprop(x, w, &dead, LinearRule::Z);
                out.iter_mut().zip(fallback).for_each(|(o, f)| *o += f);
            }
            out
        }
    }
}

/// Split relevance of `x0 + x1` between the two summands.
fn add_relprop(x0: &[f64], x1: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(r.len());
    let mut b = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        let s = safe_div(r[i], x0[i] + x1[i]);
        a.push(x0[i] * s);
        b.push(x1[i] * s);
    }
    let (asum, bsum): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let total: f64 = r.iter().sum();
    let afact = safe_div(asum.abs(), asum.abs() + bsum.abs()) * total;
    let bfact = safe_div(bsum.abs(), asum.abs() + bsum.abs()) * total;
    let (ka, kb) = (safe_div(afact, asum), safe_div(bfact, bsum));
    a.iter_mut().for_each(|v| *v *= ka);
    b.iter_mut().for_each(|v| *v *= kb);
    (a, b)
}

/// Relevance of both operands of `Z = A·B` (`[m×k]·[k×n]`), halved.
fn matmul_relprop(a: &[f64], b: &[f64], r: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let z = matmul_raw(a, b, m, k, n);
    let s: Vec<f64> = r.iter().zip(&z).map(|(&r, &z)| safe_div(r, z)).collect();
    let ca = matmul_nt(&s, b, m, n, k);
    let cb = matmul_tn(a, &s, m, k, n);
    let ra = a.iter().zip(ca).map(|(x, c)| 0.5 * x * c).collect();
    let rb = b.iter().zip(cb).map(|(x, c)| 0.5 * x * c).collect();
    (ra, rb)
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn linear_out(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut y = matmul_raw(x, w.data(), x.len() / w.rows(), w.rows(), w.cols());
    for row in y.chunks_mut(w.cols()) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    y
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Relevance from the `class` logit down to patch tokens.
pub fn lrp(params: &ViTParams, trace: &ForwardTrace, class: usize, rule: LinearRule) -> Result<LrpOutput> {
    let cfg = params.config();
    let (n, d, dh) = (cfg.tokens(), cfg.embed_dim, cfg.head_dim());
    if class >= cfg.num_classes {
        return Err(FvitError::param(format!("class {class} out of range")));
    }
    if trace.layers.len() != cfg.layers || trace.tokens.len() != n * d {
        return Err(FvitError::State("trace does not belong to this model".into()));
    }

    let mut onehot = vec![0.0; cfg.num_classes];
    onehot[class] = 1.0;
    let r_cls = linear_relprop(&trace.final_normed[..d], &params.head_w, &onehot, rule);
    finite(&r_cls, || "head".into())?;
    let mut r = vec![0.0; n * d];
    r[..d].copy_from_slice(&r_cls);
    let at_output: f64 = r.iter().sum();

    let mut per_block = Vec::with_capacity(cfg.layers);
    let mut attn_relevance = vec![Vec::new(); cfg.layers];
    for l in (0..cfg.layers).rev() {
        per_block.push(r.iter().sum());
        let b = &params.blocks[l];
        let lt = &trace.layers[l];

        let mlp = linear_out(&lt.act, &b.w2, &b.b2);
        let (r_skip, r_mlp) = add_relprop(&lt.mid, &mlp, &r);
        let r_act = linear_relprop(&lt.act, &b.w2, &r_mlp, rule);
        let r_normed2 = linear_relprop(&lt.normed2, &b.w1, &r_act, rule);
        let r_mid = add(&r_skip, &r_normed2);

        let proj = linear_out(&lt.context, &b.wo, &b.bo);
        let (r_skip, r_attn) = add_relprop(&lt.input, &proj, &r_mid);
        let r_context = linear_relprop(&lt.context, &b.wo, &r_attn, rule);

        let mut rq = vec![0.0; n * d];
        let mut rk = vec![0.0; n * d];
        let mut rv = vec![0.0; n * d];
        let mut layer_rel = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = |x: &[f64]| -> Vec<f64> {
                (0..n).flat_map(|t| x[t * d + h * dh..t * d + (h + 1) * dh].to_vec()).collect()
            };
            let (q, k, v, ro) = (cols(&lt.q), cols(&lt.k), cols(&lt.v), cols(&r_context));
            let a = &lt.attn[h];
            let (r_a, r_v) = matmul_relprop(a.data(), &v, &ro, n, n, dh);
            // Softmax passes relevance unchanged onto the scores q·kᵀ.
            let kt = transpose(&k, n, dh);
            let (r_q, r_kt) = matmul_relprop(&q, &kt, &r_a, n, dh, n);
            let r_k = transpose(&r_kt, dh, n);
            for t in 0..n {
                for c in 0..dh {
                    rq[t * d + h * dh + c] = r_q[t * dh + c];
                    rk[t * d + h * dh + c] = r_k[t * dh + c];
                    rv[t * d + h * dh + c] = r_v[t * dh + c];
                }
            }
            layer_rel.push(Tensor::new(vec![n, n], r_a)?);
        }
        attn_relevance[l] = layer_rel;

        let mut r_normed = linear_relprop(&lt.normed, &b.wq, &rq, rule);
        for (w, rr) in [(&b.wk, &rk), (&b.wv, &rv)] {
            for (acc, v) in r_normed.iter_mut().zip(linear_relprop(&lt.normed, w, rr, rule)) {
                *acc += v;
            }
        }
        r = add(&r_skip, &r_normed);
        finite(&r, || format!("layer {l}"))?;
    }

    let at_input: f64 = r.iter().sum();
    let relative_leak = if at_output == 0.0 {
        if at_input == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (at_input / at_output - 1.0).abs()
    };

    // Positional embeddings take their share away; the CLS token is dropped.
    let mut unpositioned = params.cls.data().to_vec();
    unpositioned.extend_from_slice(&trace.embedded);
    let (r_tokens, _) = add_relprop(&unpositioned, params.pos.data(), &r);
    let r_patches = linear_relprop(trace.patches.data(), &params.patch_w, &r_tokens[d..], rule);
    finite(&r_patches, || "patch embedding".into())?;
    let pd = cfg.patch_dim();
    let token_scores = r_patches.chunks(pd).map(|p| p.iter().sum::<f64>().max(0.0)).collect();

    Ok(LrpOutput {
        token_scores,
        attn_relevance,
        audit: LrpAudit {
            at_output,
            per_block,
            at_input,
            relative_leak,
            within_tolerance: relative_leak <= CONSERVATION_TOLERANCE,
        },
    })
}

/// Gradient-weighted attention relevance rolled out over all layers. The
/// relevances always come from the α=1, β=0 rule.
pub fn transformer_attribution(params: &ViTParams, trace: &ForwardTrace, class: usize) -> Result<(Vec<f64>, LrpAudit)> {
    let grads = trace
        .attn_grads
        .as_ref()
        .ok_or_else(|| FvitError::State("attention gradients missing; run backward_class first".into()))?;
    if trace.grad_class != Some(class) {
        return Err(FvitError::State(format!(
            "attention gradients are for class {:?}, not {class}",
            trace.grad_class
        )));
    }
    let out = lrp(params, trace, class, LinearRule::AlphaOneBetaZero)?;
    let scores = super::ta_from_parts(grads, &out.attn_relevance, 0)?;
    Ok((scores, out.audit))
}
