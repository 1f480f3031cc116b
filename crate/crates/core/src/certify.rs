//! Rényi-divergence certificates for smoothed predictions and attention.
//!
//! Divergences are measured from the perturbed distribution to the clean one,
//! `D_α(q ‖ p)`; every bound `b` below guarantees the stated property for
//! all `q` with `D_α(q ‖ p) < b`. The Gaussian mechanism gives
//! `D_α ≤ αR²/(2σ²)` for inputs at ℓ2 distance at most `R`, so a property is
//! certified when `σ² > αR²/(2b)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{FvitError, Result};
use crate::rng::Rng;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = FvitError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Distribution::new(v)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

impl Distribution {
    /// Entries must be finite, nonnegative and sum to one within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(FvitError::param("distribution needs at least one entry"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(FvitError::param("distribution entries must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(FvitError::param(format!("distribution sums to {sum}")));
        }
        Ok(Distribution { probs })
    }

    /// Scales nonnegative weights onto the simplex; all-zero weights become
    /// uniform.
    pub fn normalized(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FvitError::param("weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            return Ok(Distribution::uniform(weights.len()));
        }
        Distribution::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Distribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// First index holding the maximum.
    pub fn argmax(&self) -> usize {
        crate::vit::argmax(&self.probs)
    }

    fn sorted_desc(&self) -> Vec<f64> {
        let mut s = self.probs.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaithfulnessParams {
    /// Input-space ℓ2 perturbation radius.
    #[serde(rename = "R")]
    pub r: f64,
    /// Rényi order, above one.
    pub alpha: f64,
    /// Prediction-robustness divergence budget.
    pub gamma: f64,
    /// Required top-k overlap, in `(0, 1]`.
    pub beta: f64,
    pub k: usize,
}

impl Default for FaithfulnessParams {
    fn default() -> Self {
        FaithfulnessParams {
            r: 8.0 / 255.0,
            alpha: 2.0,
            gamma: 0.1,
            beta: 0.55,
            k: 10,
        }
    }
}

impl FaithfulnessParams {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(FvitError::param(format!("R must be >= 0, got {}", self.r)));
        }
        if !(self.gamma >= 0.0) {
            return Err(FvitError::param(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        check_beta(self.beta)?;
        if self.k == 0 {
            return Err(FvitError::param("k must be positive"));
        }
        Ok(())
    }

    /// Swaps needed to push the overlap below `beta`: `⌊(1−β)k⌋ + 1`.
    pub fn k0(&self) -> usize {
        swaps_needed(self.k, self.beta)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 1.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(FvitError::param(format!("Rényi order must exceed 1, got {alpha}")))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(FvitError::param(format!("beta must lie in (0, 1], got {beta}")))
    }
}

pub fn swaps_needed(k: usize, beta: f64) -> usize {
    ((1.0 - beta) * k as f64 + 1e-12).floor() as usize + 1
}

/// `D_α(p ‖ q) = log(Σ p_i^α q_i^{1−α}) / (α − 1)`; `+∞` when `p` puts mass
/// where `q` has none.
pub fn renyi_divergence(p: &Distribution, q: &Distribution, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if p.len() != q.len() {
        return Err(FvitError::dim("renyi_divergence", &[p.len()], &[q.len()]));
    }
    Ok(renyi_raw(p.probs(), q.probs(), alpha))
}

fn renyi_raw(p: &[f64], q: &[f64], alpha: f64) -> f64 {
    let mut s = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        s += pi.powf(alpha) * qi.powf(1.0 - alpha);
    }
    (s.ln() / (alpha - 1.0)).max(0.0)
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn topk_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `|T_k(v1) ∩ T_k(v2)| / k`.
pub fn topk_overlap(v1: &[f64], v2: &[f64], k: usize) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(FvitError::dim("topk_overlap", &[v1.len()], &[v2.len()]));
    }
    if k == 0 || k > v1.len() {
        return Err(FvitError::param(format!("k = {k} out of range for length {}", v1.len())));
    }
    let a = topk_indices(v1, k);
    let b = topk_indices(v2, k);
    Ok(a.iter().filter(|i| b.contains(i)).count() as f64 / k as f64)
}

/// Power mean of order `1 − α`; zero when any value is zero.
fn power_mean(vals: &[f64], alpha: f64) -> f64 {
    if vals.iter().any(|&v| v == 0.0) {
        return 0.0;
    }
    let e = 1.0 - alpha;
    let mean = vals.iter().map(|v| v.powf(e)).sum::<f64>() / vals.len() as f64;
    mean.powf(1.0 / e)
}

/// `−log(Σ_rest + |pool| · M_{1−α}(pool))`, the divergence of the closest
/// distribution that levels `pool` while keeping the rest proportional.
fn pooled_value(pool: &[f64], rest: f64, alpha: f64) -> f64 {
    let inner = rest + pool.len() as f64 * power_mean(pool, alpha);
    (-inner.ln()).max(0.0)
}

/// Minimum divergence at which the argmax can change:
/// `−log(1 − p₍₁₎ − p₍₂₎ + 2(½(p₍₁₎^{1−α} + p₍₂₎^{1−α}))^{1/(1−α)})`.
pub fn classification_bound(p: &Distribution, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if p.len() < 2 {
        return Ok(f64::INFINITY);
    }
    let s = p.sorted_desc();
    if s[0] == s[1] {
        return Ok(0.0);
    }
    let rest: f64 = s[2..].iter().sum();
    Ok(pooled_value(&s[..2], rest, alpha))
}

/// True iff `gamma` is strictly below the classification bound.
pub fn check_prediction_robust(p: &Distribution, gamma: f64, alpha: f64) -> Result<bool> {
    Ok(gamma < classification_bound(p, alpha)?)
}

struct SwapSets {
    sorted: Vec<f64>,
    k: usize,
    k0: usize,
}

fn swap_sets(w: &Distribution, k: usize, beta: f64) -> Result<Option<SwapSets>> {
    check_beta(beta)?;
    if k == 0 || k > w.len() {
        return Err(FvitError::param(format!("k = {k} out of range for length {}", w.len())));
    }
    let k0 = swaps_needed(k, beta);
    if k0 > k.min(w.len() - k) {
        return Ok(None);
    }
    Ok(Some(SwapSets {
        sorted: w.sorted_desc(),
        k,
        k0,
    }))
}

/// Minimum divergence at which the top-k overlap can fall below `beta`.
///
/// Pushing `k₀` of the top-k out means levelling the `k₀` smallest members
/// against the `k₀` largest outsiders. The optimum pools the largest `n_a`
/// of the former with the smallest `n_b` of the latter at one level and
/// rescales everything else; the candidate whose unpooled members stay on
/// the right side of that level is the exact convex minimum. When every
/// swapped component ends up pooled this is the closed form over all `2k₀`
/// components, [`pooled_swap_bound`].
pub fn topk_violation_bound(w: &Distribution, k: usize, beta: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let Some(SwapSets { sorted, k, k0 }) = swap_sets(w, k, beta)? else {
        return Ok(f64::INFINITY);
    };
    let inside = &sorted[k - k0..k];
    let outside = &sorted[k..k + k0];
    let others: f64 = sorted[..k - k0].iter().chain(&sorted[k + k0..]).sum();
    let mut best = f64::INFINITY;
    let mut fallback = f64::INFINITY;
    for na in 1..=k0 {
        for nb in 1..=k0 {
            let pool: Vec<f64> = inside[..na].iter().chain(&outside[k0 - nb..]).copied().collect();
            let level = power_mean(&pool, alpha);
            let free_in = &inside[na..];
            let free_out = &outside[..k0 - nb];
            let rest = others + free_in.iter().sum::<f64>() + free_out.iter().sum::<f64>();
            let value = pooled_value(&pool, rest, alpha);
            let tol = 1e-12 * level.max(f64::MIN_POSITIVE);
            let feasible = free_in.iter().all(|&v| v <= level + tol) && free_out.iter().all(|&v| v >= level - tol);
            if feasible {
                best = best.min(value);
            }
            fallback = fallback.min(value);
        }
    }
    Ok(if best.is_finite() { best } else { fallback })
}

/// The closed form with all `2k₀` swapped components pooled. It matches
/// [`topk_violation_bound`] whenever that pooling is optimal, including
/// every `k₀ = 1` case, and can exceed it otherwise.
pub fn pooled_swap_bound(w: &Distribution, k: usize, beta: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let Some(SwapSets { sorted, k, k0 }) = swap_sets(w, k, beta)? else {
        return Ok(f64::INFINITY);
    };
    let others: f64 = sorted[..k - k0].iter().chain(&sorted[k + k0..]).sum();
    Ok(pooled_value(&sorted[k - k0..k + k0], others, alpha))
}

/// `αR²/(2σ²)`, the Rényi divergence between `N(x, σ²I)` and `N(x', σ²I)`
/// at `‖x − x'‖₂ = R`, which bounds any post-processing of them.
pub fn gaussian_divergence_bound(r: f64, sigma: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(r >= 0.0) || !(sigma >= 0.0) {
        return Err(FvitError::param("R and sigma must be nonnegative"));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(alpha * r * r / (2.0 * sigma * sigma))
}

/// Monte Carlo estimate of `D_α(N(R e₁, σ²I) ‖ N(0, σ²I))` in `dims`
/// dimensions, as `log E_P[(P/Q)^{α−1}] / (α − 1)` over `samples` draws.
pub fn gaussian_divergence_mc(alpha: f64, r: f64, sigma: f64, dims: usize, samples: usize, rng: &mut Rng) -> Result<f64> {
    check_alpha(alpha)?;
    if dims == 0 || samples == 0 || !(sigma > 0.0) {
        return Err(FvitError::param("need dims, samples and sigma positive"));
    }
    let mut logs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for d in 0..dims {
            let mean = if d == 0 { r } else { 0.0 };
            let x = mean + sigma * rng.standard_normal();
            // log N(x; mean) − log N(x; 0)
            log_ratio += (x * x - (x - mean) * (x - mean)) / (2.0 * sigma * sigma);
        }
        logs.push((alpha - 1.0) * log_ratio);
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = logs.iter().map(|l| (l - m).exp()).sum::<f64>() / samples as f64;
    Ok((m + mean.ln()) / (alpha - 1.0))
}

/// The two σ² terms and their maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaThreshold {
    #[serde(with = "extended_float")]
    pub term_topk: f64,
    #[serde(with = "extended_float")]
    pub term_pred: f64,
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

/// `αR²/(2b)`: the smallest σ² (exclusive) at which the Gaussian bound stays
/// strictly under `b`.
fn sigma_term(r: f64, alpha: f64, bound: f64) -> f64 {
    if r == 0.0 || bound == f64::INFINITY {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        alpha * r * r / (2.0 * bound)
    }
}

pub fn sigma_threshold(w: &Distribution, p: &Distribution, fp: &FaithfulnessParams) -> Result<SigmaThreshold> {
    fp.validate()?;
    let term_topk = sigma_term(fp.r, fp.alpha, topk_violation_bound(w, fp.k, fp.beta, fp.alpha)?);
    let term_pred = sigma_term(fp.r, fp.alpha, classification_bound(p, fp.alpha)?);
    Ok(SigmaThreshold {
        term_topk,
        term_pred,
        threshold: term_topk.max(term_pred),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub sigma: f64,
    pub sigma_sq: f64,
    pub params: FaithfulnessParams,
    pub k0: usize,
    #[serde(with = "extended_float")]
    pub classification_bound: f64,
    #[serde(with = "extended_float")]
    pub topk_violation_bound: f64,
    #[serde(with = "extended_float")]
    pub gaussian_bound: f64,
    pub terms: SigmaThreshold,
    pub prediction_robust: bool,
    pub topk_robust: bool,
    pub faithful: bool,
    /// Whether `gamma` itself sits strictly under the classification bound.
    pub gamma_within_bound: bool,
    /// Source of each number, keyed by field name.
    pub provenance: Vec<(String, String)>,
}

/// Certifies `w` (normalized attention) and `p` (prediction distribution)
/// at noise level `sigma`; each property needs `σ²` strictly above its term.
pub fn certify_faithful(sigma: f64, w: &Distribution, p: &Distribution, fp: &FaithfulnessParams) -> Result<Certificate> {
    fp.validate()?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(FvitError::param(format!("sigma must be >= 0, got {sigma}")));
    }
    let cb = classification_bound(p, fp.alpha)?;
    let tb = topk_violation_bound(w, fp.k, fp.beta, fp.alpha)?;
    let terms = sigma_threshold(w, p, fp)?;
    let sigma_sq = sigma * sigma;
    let prediction_robust = sigma_sq > terms.term_pred;
    let topk_robust = sigma_sq > terms.term_topk;
    let provenance = [
        ("classification_bound", "Rényi argmax lemma, top-2 pooled"),
        ("topk_violation_bound", "exact pooled minimum over the k0 boundary swaps"),
        ("gaussian_bound", "Gaussian mechanism alpha R^2 / (2 sigma^2) with post-processing"),
        ("terms", "alpha R^2 / (2 bound) per property, maximum taken"),
        ("prediction_robust", "sigma^2 > term_pred"),
        ("topk_robust", "sigma^2 > term_topk"),
        ("faithful", "prediction_robust and topk_robust"),
        ("gamma_within_bound", "gamma < classification_bound"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    Ok(Certificate {
        sigma,
        sigma_sq,
        params: fp.clone(),
        k0: fp.k0(),
        classification_bound: cb,
        topk_violation_bound: tb,
        gaussian_bound: gaussian_divergence_bound(fp.r, sigma, fp.alpha)?,
        terms,
        prediction_robust,
        topk_robust,
        faithful: prediction_robust && topk_robust,
        gamma_within_bound: fp.gamma < cb,
        provenance,
    })
}

/// Supremum (exclusive) of the ℓ2 radii at which `certify_faithful` issues
/// a certificate for `w` and `p` at noise level `sigma`:
/// `σ·√(2·min(bounds)/α)`.
pub fn certified_radius(sigma: f64, w: &Distribution, p: &Distribution, fp: &FaithfulnessParams) -> Result<f64> {
    fp.validate()?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(FvitError::param(format!("sigma must be >= 0, got {sigma}")));
    }
    let b = classification_bound(p, fp.alpha)?.min(topk_violation_bound(w, fp.k, fp.beta, fp.alpha)?);
    Ok(if b == f64::INFINITY && sigma > 0.0 { f64::INFINITY } else { sigma * (2.0 * b / fp.alpha).sqrt() })
}

/// The target region of an oracle search, tested as `predicate(p, q)`.
#[derive(Clone, Copy)]
pub enum Predicate {
    /// `argmax q ≠ argmax p`.
    ArgmaxDiffers,
    /// `V_k(p, q) < beta`.
    TopkBelow { k: usize, beta: f64 },
    Custom(fn(&[f64], &[f64]) -> bool),
}

impl fmt::Debug for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::ArgmaxDiffers => write!(f, "ArgmaxDiffers"),
            Predicate::TopkBelow { k, beta } => write!(f, "TopkBelow {{ k: {k}, beta: {beta} }}"),
            Predicate::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Predicate {
    pub fn holds(&self, p: &[f64], q: &[f64]) -> bool {
        match *self {
            Predicate::ArgmaxDiffers => crate::vit::argmax(p) != crate::vit::argmax(q),
            Predicate::TopkBelow { k, beta } => {
                let a = topk_indices(p, k);
                let b = topk_indices(q, k);
                let shared = a.iter().filter(|i| b.contains(i)).count();
                (shared as f64) < beta * k as f64
            }
            Predicate::Custom(f) => f(p, q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    #[serde(with = "extended_float")]
    pub minimum: f64,
    pub witness: Option<Distribution>,
    pub evaluations: usize,
}

/// Brute-force search for the smallest `D_α(q ‖ p)` over `q` satisfying
/// `predicate`.
///
/// Candidates come from permutations of `p`, random multiplicative
/// perturbations and Nelder–Mead refinement in log-ratio coordinates. Each
/// candidate is pulled back along the segment towards `p` by bisection to
/// the first point still satisfying the predicate; divergence grows along
/// such segments, so only boundary points need comparing. `budget` caps the
/// number of candidate evaluations.
pub fn oracle_min_divergence(
    p: &Distribution,
    predicate: Predicate,
    alpha: f64,
    budget: usize,
    rng: &mut Rng,
) -> Result<OracleResult> {
    check_alpha(alpha)?;
    if budget == 0 {
        return Err(FvitError::param("oracle budget must be positive"));
    }
    if p.len() > 8 {
        return Err(FvitError::param("oracle search is limited to 8 dimensions"));
    }
    if let Predicate::TopkBelow { k, beta } = predicate {
        check_beta(beta)?;
        if k == 0 || k > p.len() {
            return Err(FvitError::param(format!("k = {k} out of range")));
        }
    }
    let mut search = Search {
        p: p.probs(),
        predicate,
        alpha,
        evaluations: 0,
        budget,
        best: f64::INFINITY,
        witness: None,
    };
    if predicate.holds(p.probs(), p.probs()) {
        return Ok(OracleResult {
            minimum: 0.0,
            witness: Some(p.clone()),
            evaluations: 0,
        });
    }
    let n = p.len();

    // Seeds: permutations of p (or transpositions when n is large), then
    // random perturbations.
    let mut seeds: Vec<Vec<f64>> = Vec::new();
    if n <= 5 {
        permutations(n, &mut |perm| seeds.push(theta_of(p.probs(), &perm.iter().map(|&i| p.probs()[i]).collect::<Vec<_>>())));
    } else {
        for i in 0..n {
            for j in i + 1..n {
                let mut q = p.probs().to_vec();
                q.swap(i, j);
                seeds.push(theta_of(p.probs(), &q));
            }
        }
    }
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
    for theta in seeds {
        if search.exhausted() {
            break;
        }
        let v = search.eval(&theta);
        if v.is_finite() {
            scored.push((v, theta));
        }
    }
    let random_budget = budget / 4;
    while search.evaluations < random_budget {
        let scale = (rng.uniform_range(0.01f64.ln(), 10.0f64.ln())).exp();
        let theta: Vec<f64> = (0..n).map(|_| scale * rng.standard_normal()).collect();
        let v = search.eval(&theta);
        if v.is_finite() {
            scored.push((v, theta));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.truncate(6);
    let starts = scored.len().max(1);
    for (i, (_, theta)) in scored.into_iter().enumerate() {
        let remaining = search.budget.saturating_sub(search.evaluations);
        let share = remaining / (starts - i);
        search.nelder_mead(theta, share);
    }
    Ok(OracleResult {
        minimum: search.best,
        witness: search.witness.map(|q| Distribution { probs: q }),
        evaluations: search.evaluations,
    })
}

fn permutations(n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(k: usize, perm: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            rec(k + 1, perm, f);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rec(0, &mut perm, f);
}

/// Log-ratio coordinates of `q` relative to `p`, with a floor so that
/// vanishing entries stay representable.
fn theta_of(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi == 0.0 { 0.0 } else { (qi.max(1e-300) / pi).ln().max(-700.0) })
        .collect()
}

struct Search<'a> {
    p: &'a [f64],
    predicate: Predicate,
    alpha: f64,
    evaluations: usize,
    budget: usize,
    best: f64,
    witness: Option<Vec<f64>>,
}

impl Search<'_> {
    fn exhausted(&self) -> bool {
        self.evaluations >= self.budget
    }

    fn candidate(&self, theta: &[f64]) -> Vec<f64> {
        let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = self.p.iter().zip(theta).map(|(&p, &t)| p * (t - m).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    /// Divergence of the boundary point between `p` and `q(theta)`, or `+∞`
    /// when `q(theta)` misses the predicate.
    fn eval(&mut self, theta: &[f64]) -> f64 {
        self.evaluations += 1;
        let q = self.candidate(theta);
        if !q.iter().all(|v| v.is_finite()) || !self.predicate.holds(self.p, &q) {
            return f64::INFINITY;
        }
        let mix = |t: f64| -> Vec<f64> { self.p.iter().zip(&q).map(|(p, q)| (1.0 - t) * p + t * q).collect() };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.predicate.holds(self.p, &mix(mid)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let w = mix(hi);
        let d = renyi_raw(&w, self.p, self.alpha);
        if d < self.best {
            self.best = d;
            self.witness = Some(w);
        }
        d
    }

    fn nelder_mead(&mut self, start: Vec<f64>, budget: usize) {
        let n = start.len();
        let stop = self.evaluations + budget;
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let f0 = self.eval(&start);
        simplex.push((start.clone(), f0));
        for i in 0..n {
            let mut v = start.clone();
            v[i] += 0.5;
            let f = self.eval(&v);
            simplex.push((v, f));
        }
        let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
        while self.evaluations + 2 < stop {
            order(&mut simplex);
            let spread = simplex[n].1 - simplex[0].1;
            let size = simplex[1..]
                .iter()
                .map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if size < 1e-10 || (spread.is_finite() && spread < 1e-15 && size < 1e-6) {
                break;
            }
            let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(v, _)| v[j]).sum::<f64>() / n as f64).collect();
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect() };
            let xr = along(1.0);
            let fr = self.eval(&xr);
            if fr < simplex[0].1 {
                let xe = along(2.0);
                let fe = self.eval(&xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < worst.1 {
                    let x = along(0.5);
                    let f = self.eval(&x);
                    (x, f)
                } else {
                    let x = along(-0.5);
                    let f = self.eval(&x);
                    (x, f)
                };
                if fc < worst.1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let best = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        let v: Vec<f64> = best.iter().zip(&item.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                        let f = self.eval(&v);
                        *item = (v, f);
                    }
                }
            }
        }
    }
}

/// Side-by-side values of the original top-k conjecture and the revised
/// criterion on the same inputs. Nothing here certifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjectureReport {
    pub k0: usize,
    /// Denominator of the conjecture's first term,
    /// `α/(α−1)·log(2k₀(Σ_S w^α)^{1/α} + (2k₀)^{1/α} Σ_rest w) − log(2k₀)/(α−1)`.
    #[serde(with = "extended_float")]
    pub conjecture_divergence: f64,
    #[serde(with = "extended_float")]
    pub conjecture_topk_term: f64,
    /// The conjecture's second term `αR²/(2γ)`.
    #[serde(with = "extended_float")]
    pub conjecture_gamma_term: f64,
    #[serde(with = "extended_float")]
    pub conjecture_max: f64,
    #[serde(with = "extended_float")]
    pub revised_topk_bound: f64,
    #[serde(with = "extended_float")]
    pub revised_topk_term: f64,
    #[serde(with = "extended_float")]
    pub pooled_swap_term: f64,
    /// The conjecture reads `σ² ≤ max`; the revised criterion needs `σ²`
    /// strictly above each term.
    pub readings: Vec<String>,
}

pub fn conjecture_compare(w: &Distribution, fp: &FaithfulnessParams) -> Result<ConjectureReport> {
    fp.validate()?;
    let (alpha, r) = (fp.alpha, fp.r);
    let k0 = fp.k0();
    let conjecture_divergence = match swap_sets(w, fp.k, fp.beta)? {
        None => f64::INFINITY,
        Some(SwapSets { sorted, k, k0 }) => {
            let s = &sorted[k - k0..k + k0];
            let rest: f64 = sorted[..k - k0].iter().chain(&sorted[k + k0..]).sum();
            let two_k0 = 2.0 * k0 as f64;
            let inner = two_k0 * s.iter().map(|v| v.powf(alpha)).sum::<f64>().powf(1.0 / alpha) + two_k0.powf(1.0 / alpha) * rest;
            alpha / (alpha - 1.0) * inner.ln() - two_k0.ln() / (alpha - 1.0)
        }
    };
    let raw_term = |d: f64| -> f64 {
        if r == 0.0 || d == f64::INFINITY {
            0.0
        } else if d == 0.0 {
            f64::INFINITY
        } else {
            alpha * r * r / (2.0 * d)
        }
    };
    let conjecture_topk_term = raw_term(conjecture_divergence);
    let conjecture_gamma_term = raw_term(fp.gamma);
    let revised_topk_bound = topk_violation_bound(w, fp.k, fp.beta, alpha)?;
    Ok(ConjectureReport {
        k0,
        conjecture_divergence,
        conjecture_topk_term,
        conjecture_gamma_term,
        conjecture_max: conjecture_topk_term.max(conjecture_gamma_term),
        revised_topk_bound,
        revised_topk_term: sigma_term(r, alpha, revised_topk_bound),
        pooled_swap_term: sigma_term(r, alpha, pooled_swap_bound(w, fp.k, fp.beta, alpha)?),
        readings: vec![
            "conjecture: faithful if sigma^2 <= max(conjecture_topk_term, conjecture_gamma_term)".into(),
            "revised: faithful if sigma^2 > max(revised_topk_term, term_pred)".into(),
        ],
    })
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}
