use super::forward::{head_cols, put_head_cols, ForwardTrace};
use super::ViTParams;
use crate::error::{FvitError, Result};
use crate::nn::{gelu_grad, layer_norm_rows_vjp, Patchify, softmax_rows_vjp};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Parameter gradients, when requested.
    pub params: Option<ViTParams>,
    /// Gradient with respect to the input image.
    pub input: Tensor,
    /// Gradient with respect to the encoder input tokens.
    pub tokens: Vec<f64>,
    /// Gradient with respect to each post-softmax attention map.
    pub attn: Vec<Vec<Tensor>>,
}

fn col_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in x.chunks(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn set(t: &mut Tensor, data: Vec<f64>) {
    t.data_mut().copy_from_slice(&data);
}

impl ViTParams {
    /// Reverse pass for an arbitrary logit cotangent.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64], with_params: bool) -> Result<Gradients> {
        let cfg = self.config();
        let (n, d, dh, f) = (cfg.tokens(), cfg.embed_dim, cfg.head_dim(), cfg.mlp_dim());
        let (np, pd) = (cfg.patches(), cfg.patch_dim());
        if dlogits.len() != cfg.num_classes {
            return Err(FvitError::dim("vit backward", &[dlogits.len()], &[cfg.num_classes]));
        }
        if trace.layers.len() != cfg.layers {
            return Err(FvitError::State("trace does not belong to this model".into()));
        }
        let mut grads = with_params.then(|| self.zeros_like());
        let scale = 1.0 / (dh as f64).sqrt();

        // Head on the CLS token.
        let c = cfg.num_classes;
        if let Some(g) = grads.as_mut() {
            set(&mut g.head_w, matmul_raw(&trace.final_normed[..d], dlogits, d, 1, c));
            set(&mut g.head_b, dlogits.to_vec());
        }
        let mut dfinal = vec![0.0; n * d];
        dfinal[..d].copy_from_slice(&matmul_nt(dlogits, self.head_w.data(), 1, c, d));
        let (mut dh_, dg, db) = layer_norm_rows_vjp(&trace.lnf, d, self.lnf_g.data(), &dfinal);
        if let Some(g) = grads.as_mut() {
            set(&mut g.lnf_g, dg);
            set(&mut g.lnf_b, db);
        }

        let mut attn_grads = vec![Vec::new(); cfg.layers];
        for l in (0..cfg.layers).rev() {
            let b = &self.blocks[l];
            let lt = &trace.layers[l];

            // MLP branch.
            let dact = matmul_nt(&dh_, b.w2.data(), n, d, f);
            let dhidden: Vec<f64> = dact.iter().zip(&lt.hidden).map(|(g, &u)| g * gelu_grad(u)).collect();
            let dnormed2 = matmul_nt(&dhidden, b.w1.data(), n, f, d);
            let (dmid_ln, dg2, db2) = layer_norm_rows_vjp(&lt.ln2, d, b.ln2_g.data(), &dnormed2);
            if let Some(g) = grads.as_mut() {
                let gb = &mut g.blocks[l];
                set(&mut gb.w2, matmul_tn(&lt.act, &dh_, n, f, d));
                set(&mut gb.b2, col_sums(&dh_, d));
                set(&mut gb.w1, matmul_tn(&lt.normed2, &dhidden, n, d, f));
                set(&mut gb.b1, col_sums(&dhidden, f));
                set(&mut gb.ln2_g, dg2);
                set(&mut gb.ln2_b, db2);
            }
            let dmid: Vec<f64> = dh_.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();

            // Attention branch.
            let dcontext = matmul_nt(&dmid, b.wo.data(), n, d, d);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut layer_grads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = head_cols(&lt.q, n, d, h, dh);
                let kh = head_cols(&lt.k, n, d, h, dh);
                let vh = head_cols(&lt.v, n, d, h, dh);
                let doh = head_cols(&dcontext, n, d, h, dh);
                let a = &lt.attn[h];
                let da = matmul_nt(&doh, &vh, n, dh, n);
                let dvh = matmul_tn(a.data(), &doh, n, n, dh);
                let soft = trace.softmax_attention(l, h);
                let ds: Vec<f64> = softmax_rows_vjp(soft.data(), &da, n).iter().map(|v| v * scale).collect();
                let dqh = matmul_raw(&ds, &kh, n, n, dh);
                let dkh = matmul_tn(&ds, &qh, n, n, dh);
                put_head_cols(&mut dq, &dqh, n, d, h, dh);
                put_head_cols(&mut dk, &dkh, n, d, h, dh);
                put_head_cols(&mut dv, &dvh, n, d, h, dh);
                layer_grads.push(Tensor::new(vec![n, n], da)?);
            }
            attn_grads[l] = layer_grads;

            let mut dnormed = matmul_nt(&dq, b.wq.data(), n, d, d);
            for (w, g) in [(&b.wk, &dk), (&b.wv, &dv)] {
                for (acc, v) in dnormed.iter_mut().zip(matmul_nt(g, w.data(), n, d, d)) {
                    *acc += v;
                }
            }
            let (din_ln, dg1, db1) = layer_norm_rows_vjp(&lt.ln1, d, b.ln1_g.data(), &dnormed);
            if let Some(g) = grads.as_mut() {
                let gb = &mut g.blocks[l];
                set(&mut gb.wo, matmul_tn(&lt.context, &dmid, n, d, d));
                set(&mut gb.bo, col_sums(&dmid, d));
                set(&mut gb.wq, matmul_tn(&lt.normed, &dq, n, d, d));
                set(&mut gb.bq, col_sums(&dq, d));
                set(&mut gb.wk, matmul_tn(&lt.normed, &dk, n, d, d));
                set(&mut gb.bk, col_sums(&dk, d));
                set(&mut gb.wv, matmul_tn(&lt.normed, &dv, n, d, d));
                set(&mut gb.bv, col_sums(&dv, d));
                set(&mut gb.ln1_g, dg1);
                set(&mut gb.ln1_b, db1);
            }
            dh_ = dmid.iter().zip(&din_ln).map(|(a, b)| a + b).collect();
        }

        // Embedding.
        let dembedded = &dh_[d..];
        if let Some(g) = grads.as_mut() {
            set(&mut g.pos, dh_.clone());
            set(&mut g.cls, dh_[..d].to_vec());
            set(&mut g.patch_w, matmul_tn(trace.patches.data(), dembedded, np, pd, d));
            set(&mut g.patch_b, col_sums(dembedded, d));
        }
        let dpatches = Tensor::new(vec![np, pd], matmul_nt(dembedded, self.patch_w.data(), np, d, pd))?;
        let input = Patchify {
            patch: cfg.patch_size,
        }
        .unpatchify(&dpatches, &cfg.image_shape())?;

        Ok(Gradients {
            params: grads,
            input,
            tokens: dh_,
            attn: attn_grads,
        })
    }

    /// Gradient of the raw logit of `class`: fills the trace's attention
    /// gradients and returns the input gradient.
    pub fn backward_class(&self, trace: &mut ForwardTrace, class: usize) -> Result<Tensor> {
        let c = self.config().num_classes;
        if class >= c {
            return Err(FvitError::param(format!("class {class} out of range for {c} classes")));
        }
        let mut onehot = vec![0.0; c];
        onehot[class] = 1.0;
        let g = self.backward(trace, &onehot, false)?;
        trace.attn_grads = Some(g.attn);
        trace.grad_class = Some(class);
        Ok(g.input)
    }
}
