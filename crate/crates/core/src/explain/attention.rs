use super::Variant;
use crate::error::{FvitError, Result};
use crate::tensor::Tensor;
use crate::vit::ForwardTrace;

fn dims(trace: &ForwardTrace) -> Result<(usize, usize, usize)> {
    let layers = trace.layers.len();
    let heads = trace.layers.first().map_or(0, |l| l.attn.len());
    if layers == 0 || heads == 0 {
        return Err(FvitError::State("trace holds no attention".into()));
    }
    Ok((layers, heads, trace.layers[0].attn[0].rows()))
}

/// CLS row without the CLS entry.
fn cls_row(m: &Tensor) -> Vec<f64> {
    m.row(0)[1..].to_vec()
}

/// `Σ_h w_h A_h`.
fn head_mix(attn: &[Tensor], weights: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(attn[0].shape());
    for (a, &w) in attn.iter().zip(weights) {
        for (o, v) in out.data_mut().iter_mut().zip(a.data()) {
            *o += w * v;
        }
    }
    out
}

fn uniform(heads: usize) -> Vec<f64> {
    vec![1.0 / heads as f64; heads]
}

/// Last-layer, head-averaged attention from CLS to each patch.
pub fn raw_attention(trace: &ForwardTrace) -> Result<Vec<f64>> {
    let (layers, heads, _) = dims(trace)?;
    Ok(cls_row(&head_mix(&trace.layers[layers - 1].attn, &uniform(heads))))
}

/// `Â_L ··· Â_s` with `Â_l = row_normalize(M_l + I)`, starting at layer
/// `start_layer` (clamped to the last layer).
pub fn aggregate_rollout(mats: &[Tensor], start_layer: usize) -> Result<Tensor> {
    let first = mats
        .first()
        .ok_or_else(|| FvitError::param("rollout needs at least one layer"))?;
    let n = first.rows();
    let augmented = |m: &Tensor| -> Result<Tensor> {
        if m.shape() != [n, n] {
            return Err(FvitError::dim("rollout", m.shape(), &[n, n]));
        }
        let mut a = m.add(&Tensor::identity(n))?;
        for row in a.data_mut().chunks_mut(n) {
            let s: f64 = row.iter().sum();
            for v in row {
                *v /= s;
            }
        }
        Ok(a)
    };
    let start = start_layer.min(mats.len() - 1);
    let mut joint = augmented(&mats[start])?;
    for m in &mats[start + 1..] {
        joint = augmented(m)?.matmul(&joint)?;
    }
    Ok(joint)
}

fn rollout_scores(trace: &ForwardTrace, weights: &[Vec<f64>], variant: Variant) -> Result<Vec<f64>> {
    let mats: Vec<Tensor> = trace
        .layers
        .iter()
        .zip(weights)
        .map(|(l, w)| head_mix(&l.attn, w))
        .collect();
    Ok(cls_row(&aggregate_rollout(&mats, variant.rollout_start_layer())?))
}

/// Attention rollout with equally weighted heads.
pub fn rollout(trace: &ForwardTrace, variant: Variant) -> Result<Vec<f64>> {
    let (layers, heads, _) = dims(trace)?;
    rollout_scores(trace, &vec![uniform(heads); layers], variant)
}

/// Per-layer head weights: each head's share of the norm of its output
/// contribution to the CLS token. Uniform when every head is silent.
pub fn head_weights(trace: &ForwardTrace) -> Result<Vec<Vec<f64>>> {
    dims(trace)?;
    Ok(trace
        .layers
        .iter()
        .map(|l| {
            let total: f64 = l.head_cls_norms.iter().sum();
            if total > 0.0 && total.is_finite() {
                l.head_cls_norms.iter().map(|v| v / total).collect()
            } else {
                uniform(l.attn.len())
            }
        })
        .collect())
}

/// Rollout in which each layer mixes heads by [`head_weights`].
pub fn attribution_rollout(trace: &ForwardTrace, variant: Variant) -> Result<Vec<f64>> {
    attribution_rollout_with_weights(trace, &head_weights(trace)?, variant)
}

pub fn attribution_rollout_with_weights(
    trace: &ForwardTrace,
    weights: &[Vec<f64>],
    variant: Variant,
) -> Result<Vec<f64>> {
    let (layers, heads, _) = dims(trace)?;
    if weights.len() != layers || weights.iter().any(|w| w.len() != heads) {
        return Err(FvitError::dim("head weights", &[weights.len()], &[layers, heads]));
    }
    rollout_scores(trace, weights, variant)
}

fn grads(trace: &ForwardTrace) -> Result<&Vec<Vec<Tensor>>> {
    trace
        .attn_grads
        .as_ref()
        .ok_or_else(|| FvitError::State("attention gradients missing; run backward_class first".into()))
}

/// `(mean_h ∇A ⊙ A)⁺` of the last layer, CLS row.
pub fn gradcam(trace: &ForwardTrace) -> Result<Vec<f64>> {
    let (layers, heads, _) = dims(trace)?;
    let g = &grads(trace)?[layers - 1];
    let a = &trace.layers[layers - 1].attn;
    let products: Vec<Tensor> = a.iter().zip(g).map(|(a, g)| a.mul(g)).collect::<Result<_>>()?;
    Ok(cls_row(&head_mix(&products, &uniform(heads)).map(|v| v.max(0.0))))
}

/// Transformer attribution from per-layer attention gradients and attention
/// relevances: `Ā_l = mean_h (∇A_l ⊙ R_l)⁺`, rolled out from `start_layer`.
pub fn ta_from_parts(grads: &[Vec<Tensor>], relevances: &[Vec<Tensor>], start_layer: usize) -> Result<Vec<f64>> {
    if grads.len() != relevances.len() {
        return Err(FvitError::dim("transformer attribution", &[grads.len()], &[relevances.len()]));
    }
    let mut mats = Vec::with_capacity(grads.len());
    for (g, r) in grads.iter().zip(relevances) {
        if g.is_empty() || g.len() != r.len() {
            return Err(FvitError::dim("transformer attribution", &[g.len()], &[r.len()]));
        }
        let clamped: Vec<Tensor> = g
            .iter()
            .zip(r)
            .map(|(g, r)| Ok(g.mul(r)?.map(|v| v.max(0.0))))
            .collect::<Result<_>>()?;
        mats.push(head_mix(&clamped, &uniform(g.len())));
    }
    Ok(cls_row(&aggregate_rollout(&mats, start_layer)?))
}
