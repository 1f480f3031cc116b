use super::ViTParams;
use crate::error::{FvitError, Result};
use crate::nn::{gelu, layer_norm_rows, Layer, LnCache, Patchify};
use crate::tensor::{matmul_nt, matmul_raw, Tensor};

/// Activations of one encoder block. Row-major `[tokens × width]` buffers.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    /// Block input `h`.
    pub input: Vec<f64>,
    pub ln1: LnCache,
    /// `LN₁(h)`.
    pub normed: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Post-softmax attention per head, `[tokens × tokens]`.
    pub attn: Vec<Tensor>,
    /// Concatenated head outputs `A_h V_h`.
    pub context: Vec<f64>,
    /// `h + context·Wo + bo`.
    pub mid: Vec<f64>,
    pub ln2: LnCache,
    pub normed2: Vec<f64>,
    /// MLP pre-activation.
    pub hidden: Vec<f64>,
    /// `gelu(hidden)`.
    pub act: Vec<f64>,
    /// Block output.
    pub output: Vec<f64>,
    /// Norm of each head's contribution to the CLS token after the output
    /// projection.
    pub head_cls_norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[patches × patch_dim]` input patches.
    pub patches: Tensor,
    /// Patch embeddings `patches·W + b`, before the CLS token and positions.
    pub embedded: Vec<f64>,
    /// Encoder input tokens (CLS first, positions added).
    pub tokens: Vec<f64>,
    pub layers: Vec<LayerTrace>,
    pub lnf: LnCache,
    pub final_normed: Vec<f64>,
    pub logits: Tensor,
    /// `∂logit/∂A` per layer and head, filled by
    /// [`ViTParams::backward_class`].
    pub attn_grads: Option<Vec<Vec<Tensor>>>,
    /// Class the attention gradients refer to.
    pub grad_class: Option<usize>,
    pub(crate) attn_offset: Option<AttnOffset>,
}

/// Perturbation added to one post-softmax attention map, for checking
/// attention gradients by finite differences.
#[derive(Debug, Clone)]
pub(crate) struct AttnOffset {
    pub layer: usize,
    pub head: usize,
    pub delta: Tensor,
}

impl ForwardTrace {
    /// A trace holding only attention maps (and optionally their
    /// gradients), for the attention-only explainers. Every head reports the
    /// same CLS contribution.
    pub fn from_attention(attn: Vec<Vec<Tensor>>, grads: Option<Vec<Vec<Tensor>>>) -> Self {
        let layers = attn
            .into_iter()
            .map(|a| LayerTrace {
                head_cls_norms: vec![1.0; a.len()],
                attn: a,
                ..LayerTrace::default()
            })
            .collect();
        ForwardTrace {
            patches: Tensor::zeros(&[1]),
            embedded: Vec::new(),
            tokens: Vec::new(),
            layers,
            lnf: LnCache::default(),
            final_normed: Vec::new(),
            logits: Tensor::zeros(&[1]),
            attn_grads: grads,
            grad_class: None,
            attn_offset: None,
        }
    }

    pub fn attention(&self, layer: usize, head: usize) -> &Tensor {
        &self.layers[layer].attn[head]
    }

    pub fn attention_grad(&self, layer: usize, head: usize) -> Option<&Tensor> {
        self.attn_grads.as_ref().map(|g| &g[layer][head])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Softmax output of `(layer, head)`, without any checking offset.
    pub(crate) fn softmax_attention(&self, layer: usize, head: usize) -> Tensor {
        let a = &self.layers[layer].attn[head];
        match &self.attn_offset {
            Some(o) if o.layer == layer && o.head == head => {
                a.sub(&o.delta).expect("offset shape checked at forward")
            }
            _ => a.clone(),
        }
    }
}

pub(crate) fn head_cols(x: &[f64], n: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

pub(crate) fn put_head_cols(dst: &mut [f64], src: &[f64], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

pub(crate) fn linear_rows(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.rows(), w.cols());
    let mut y = matmul_raw(x, w.data(), x.len() / din, din, dout);
    for row in y.chunks_mut(dout) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    y
}

impl ViTParams {
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.forward_impl(image, None)
    }

    /// Forward pass from a `[patches × patch_dim]` matrix instead of an image.
    pub fn forward_patches(&self, patches: &Tensor) -> Result<ForwardTrace> {
        self.forward_patches_impl(patches.clone(), None)
    }

    /// Forward pass with `delta` added to the post-softmax attention of one
    /// head. Only the attention gradients of such a trace are meaningful
    /// for `(layer, head)` checks.
    pub fn forward_with_attention_offset(
        &self,
        image: &Tensor,
        layer: usize,
        head: usize,
        delta: &Tensor,
    ) -> Result<ForwardTrace> {
        let cfg = self.config();
        let n = cfg.tokens();
        if layer >= cfg.layers || head >= cfg.heads {
            return Err(FvitError::param(format!(
                "no attention map ({layer}, {head}) in a {}x{} model",
                cfg.layers, cfg.heads
            )));
        }
        if delta.shape() != [n, n] {
            return Err(FvitError::dim("attention offset", delta.shape(), &[n, n]));
        }
        self.forward_impl(
            image,
            Some(AttnOffset {
                layer,
                head,
                delta: delta.clone(),
            }),
        )
    }

    fn forward_impl(&self, image: &Tensor, offset: Option<AttnOffset>) -> Result<ForwardTrace> {
        let cfg = self.config();
        if image.shape() != cfg.image_shape() {
            return Err(FvitError::dim("vit forward", image.shape(), &cfg.image_shape()));
        }
        let patches = Patchify {
            patch: cfg.patch_size,
        }
        .forward(image)?;
        self.forward_patches_impl(patches, offset)
    }

    fn forward_patches_impl(
        &self,
        patches: Tensor,
        offset: Option<AttnOffset>,
    ) -> Result<ForwardTrace> {
        let cfg = self.config();
        let (np, pd) = (cfg.patches(), cfg.patch_dim());
        if patches.shape() != [np, pd] {
            return Err(FvitError::dim("vit forward", patches.shape(), &[np, pd]));
        }
        let d = cfg.embed_dim;
        let embedded = linear_rows(patches.data(), &self.patch_w, &self.patch_b);
        let mut tokens = Vec::with_capacity(cfg.tokens() * d);
        tokens.extend_from_slice(self.cls.data());
        tokens.extend_from_slice(&embedded);
        for (t, p) in tokens.iter_mut().zip(self.pos.data()) {
            *t += p;
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        let mut h = tokens.clone();
        for l in 0..cfg.layers {
            let lt = self.block_forward(l, h, offset.as_ref())?;
            h = lt.output.clone();
            layers.push(lt);
        }

        let (final_normed, lnf) = layer_norm_rows(&h, d, self.lnf_g.data(), self.lnf_b.data());
        let logits = linear_rows(&final_normed[..d], &self.head_w, &self.head_b);
        let logits = Tensor::vector(logits);
        if !logits.is_finite() {
            return Err(FvitError::Numerical {
                at: "head".into(),
                detail: "non-finite logits".into(),
            });
        }
        Ok(ForwardTrace {
            patches,
            embedded,
            tokens,
            layers,
            lnf,
            final_normed,
            logits,
            attn_grads: None,
            grad_class: None,
            attn_offset: offset,
        })
    }

    fn block_forward(&self, l: usize, input: Vec<f64>, offset: Option<&AttnOffset>) -> Result<LayerTrace> {
        let cfg = self.config();
        let b = &self.blocks[l];
        let (n, d, dh) = (cfg.tokens(), cfg.embed_dim, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        let (normed, ln1) = layer_norm_rows(&input, d, b.ln1_g.data(), b.ln1_b.data());
        let q = linear_rows(&normed, &b.wq, &b.bq);
        let k = linear_rows(&normed, &b.wk, &b.bk);
        let v = linear_rows(&normed, &b.wv, &b.bv);

        let mut attn = Vec::with_capacity(cfg.heads);
        let mut context = vec![0.0; n * d];
        let mut head_cls_norms = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = head_cols(&q, n, d, h, dh);
            let kh = head_cols(&k, n, d, h, dh);
            let vh = head_cols(&v, n, d, h, dh);
            let scores: Vec<f64> = matmul_nt(&qh, &kh, n, dh, n).iter().map(|s| s * scale).collect();
            let mut a = Tensor::new(vec![n, n], scores)?.softmax(1)?;
            if let Some(o) = offset.filter(|o| o.layer == l && o.head == h) {
                a = a.add(&o.delta)?;
            }
            if !a.is_finite() {
                return Err(FvitError::Numerical {
                    at: format!("block {l} head {h}"),
                    detail: "non-finite attention".into(),
                });
            }
            let oh = matmul_raw(a.data(), &vh, n, n, dh);
            // CLS row of this head pushed through its slice of Wo.
            let wo_rows = &b.wo.data()[h * dh * d..(h + 1) * dh * d];
            let contrib = matmul_raw(&oh[..dh], wo_rows, 1, dh, d);
            head_cls_norms.push(contrib.iter().map(|c| c * c).sum::<f64>().sqrt());
            put_head_cols(&mut context, &oh, n, d, h, dh);
            attn.push(a);
        }

        let proj = linear_rows(&context, &b.wo, &b.bo);
        let mid: Vec<f64> = input.iter().zip(&proj).map(|(x, y)| x + y).collect();
        let (normed2, ln2) = layer_norm_rows(&mid, d, b.ln2_g.data(), b.ln2_b.data());
        let hidden = linear_rows(&normed2, &b.w1, &b.b1);
        let act: Vec<f64> = hidden.iter().map(|&u| gelu(u)).collect();
        let mlp = linear_rows(&act, &b.w2, &b.b2);
        let output: Vec<f64> = mid.iter().zip(&mlp).map(|(x, y)| x + y).collect();

        Ok(LayerTrace {
            input,
            ln1,
            normed,
            q,
            k,
            v,
            attn,
            context,
            mid,
            ln2,
            normed2,
            hidden,
            act,
            output,
            head_cls_norms,
        })
    }
}
