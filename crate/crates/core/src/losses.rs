//! Scalar objectives and their gradients w.r.t. the logits.
//!
//! Every loss is a batch mean. Functions return the value together with
//! `dlogits`, the seed for [`crate::model::backward`]. Logs are evaluated on
//! probabilities clamped to at least [`PROB_FLOOR`]; the gradients use the
//! exact softmax composite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{row_softmax, Matrix};
use crate::model::{backward, forward, Dropout, ForwardCache, Gradients, ModelParams};

pub const PROB_FLOOR: f64 = 1e-12;

fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Label-smoothed targets: `1 - eps` on the true class, `eps / K` elsewhere.
///
/// Rows therefore sum to `1 - eps/K`, not 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLabels(Matrix);

impl SmoothedLabels {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

pub fn smooth_labels(labels: &[usize], num_classes: usize, eps: f64) -> Result<SmoothedLabels> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Param(format!(
            "smoothing must lie in [0, 1), got {eps}"
        )));
    }
    let off = eps / num_classes as f64;
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Param(format!(
                "label {c} out of range for {num_classes} classes"
            )));
        }
        let row = m.row_mut(i);
        row.fill(off);
        row[c] = 1.0 - eps;
    }
    Ok(SmoothedLabels(m))
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    Ok(smooth_labels(labels, num_classes, 0.0)?.0)
}

/// `-mean_i Σ_k y_ik log p_ik` for arbitrary nonnegative targets `y`.
pub fn cross_entropy(p: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    p.check_same_shape(targets, "cross entropy")?;
    let n = p.rows();
    let mut d = Matrix::zeros(n, p.cols());
    if n == 0 {
        return Ok((0.0, d));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (pr, yr) = (p.row(i), targets.row(i));
        let mass: f64 = yr.iter().sum();
        let mut row_loss = 0.0;
        for (&pk, &yk) in pr.iter().zip(yr) {
            if yk != 0.0 {
                row_loss -= yk * ln_clamped(pk);
            }
        }
        total += row_loss;
        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
            *dv = (pr[j] * mass - yr[j]) * inv_n;
        }
    }
    Ok((total * inv_n, d))
}

/// Mean Shannon entropy of the rows of `p`, with `0 log 0 = 0`.
pub fn entropy_loss(p: &Matrix) -> (f64, Matrix) {
    let n = p.rows();
    let mut d = Matrix::zeros(n, p.cols());
    if n == 0 {
        return (0.0, d);
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let pr = p.row(i);
        let h = row_entropy(pr);
        total += h;
        for (dv, &pj) in d.row_mut(i).iter_mut().zip(pr) {
            *dv = if pj > 0.0 {
                -pj * (pj.ln() + h) * inv_n
            } else {
                0.0
            };
        }
    }
    (total * inv_n, d)
}

/// Entropy in nats of one probability row.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Row-wise argmax; ties go to the lowest index.
pub fn hard_pseudo_label(p: &Matrix) -> Vec<usize> {
    p.iter_rows().map(argmax).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// One-hot cross-entropy against hard pseudo labels.
pub fn pseudo_ce_loss(p: &Matrix, pseudo: &[usize]) -> Result<(f64, Matrix)> {
    if pseudo.len() != p.rows() {
        return Err(Error::Shape(format!(
            "{} pseudo labels for {} rows",
            pseudo.len(),
            p.rows()
        )));
    }
    cross_entropy(p, &one_hot(pseudo, p.cols())?)
}

/// Mean over rows of `Σ_k p_k log(p_k / q_k)`.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> Result<f64> {
    p.check_same_shape(q, "KL divergence")?;
    if p.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pr, qr) in p.iter_rows().zip(q.iter_rows()) {
        for (&pk, &qk) in pr.iter().zip(qr) {
            if pk > 0.0 {
                total += pk * (pk.ln() - ln_clamped(qk));
            }
        }
    }
    Ok(total / p.rows() as f64)
}

/// Gradient of `mean KL[p || softmax(logits)]` w.r.t. `logits`, with `p`
/// held constant. Assumes rows of `p` sum to one.
fn kl_dlogits(p: &Matrix, q: &Matrix) -> Matrix {
    let n = p.rows().max(1) as f64;
    let mut d = q.clone();
    for (dv, pv) in d.as_mut_slice().iter_mut().zip(p.as_slice()) {
        *dv = (*dv - pv) / n;
    }
    d
}

/// Virtual adversarial training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VatConfig {
    /// Radius of the adversarial perturbation, per sample.
    pub eps: f64,
    /// Finite-difference scale of the power-iteration probe.
    pub xi: f64,
    pub power_iters: usize,
}

impl VatConfig {
    /// Default probe scale `1e-6 · sqrt(input_dim)`.
    pub fn default_xi(input_dim: usize) -> f64 {
        1e-6 * (input_dim as f64).sqrt()
    }
}

/// Result of [`vat_loss`].
#[derive(Debug, Clone)]
pub struct VatOutput {
    pub loss: f64,
    /// `r_vadv`, one row per sample, each of norm `eps`.
    pub perturbation: Matrix,
    /// Clean predictions, treated as constants.
    pub clean_proba: Matrix,
    /// Gradient seed for the perturbed branch.
    pub dlogits: Matrix,
    /// Cache of the forward pass at `x + r_vadv`.
    pub cache: ForwardCache,
}

impl VatOutput {
    /// Parameter and input gradients of the loss through the perturbed branch.
    pub fn gradients(&self, params: &ModelParams) -> Result<Gradients> {
        backward(params, &self.cache, &self.dlogits)
    }
}

fn normalize_rows_into(g: &Matrix, d: &mut Matrix) {
    for i in 0..g.rows() {
        let gr = g.row(i);
        let norm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            for (dv, gv) in d.row_mut(i).iter_mut().zip(gr) {
                *dv = gv / norm;
            }
        }
        // zero gradient: keep the current unit direction
    }
}

/// VAT loss with Gaussian initial probe directions drawn from `seed`.
pub fn vat_loss(params: &ModelParams, x: &Matrix, cfg: VatConfig, seed: u64) -> Result<VatOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Matrix::zeros(x.rows(), x.cols());
    for v in probe.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }
    vat_loss_with_probe(params, x, &probe, cfg)
}

/// VAT loss from an explicit initial probe. Only the direction of each probe
/// row matters.
pub fn vat_loss_with_probe(
    params: &ModelParams,
    x: &Matrix,
    probe: &Matrix,
    cfg: VatConfig,
) -> Result<VatOutput> {
    if !(cfg.eps > 0.0) || !(cfg.xi > 0.0) {
        return Err(Error::Param(format!(
            "VAT needs eps > 0 and xi > 0, got eps = {}, xi = {}",
            cfg.eps, cfg.xi
        )));
    }
    if cfg.power_iters == 0 {
        return Err(Error::Param(
            "VAT needs at least one power iteration".into(),
        ));
    }
    x.check_same_shape(probe, "VAT probe")?;

    let (clean_logits, _) = forward(params, x, Dropout::OFF)?;
    let clean = row_softmax(&clean_logits);

    let mut d = Matrix::zeros(x.rows(), x.cols());
    // rows that start at zero fall back to the first coordinate axis
    for i in 0..d.rows() {
        if let Some(first) = d.row_mut(i).first_mut() {
            *first = 1.0;
        }
    }
    normalize_rows_into(probe, &mut d);

    for _ in 0..cfg.power_iters {
        let mut xp = x.clone();
        xp.add_scaled(&d, cfg.xi)?;
        let (logits, cache) = forward(params, &xp, Dropout::OFF)?;
        let q = row_softmax(&logits);
        let g = backward(params, &cache, &kl_dlogits(&clean, &q))?;
        normalize_rows_into(&g.input, &mut d);
    }

    let perturbation = d.scale(cfg.eps);
    let mut xadv = x.clone();
    xadv.add_scaled(&perturbation, 1.0)?;
    let (logits, cache) = forward(params, &xadv, Dropout::OFF)?;
    let q = row_softmax(&logits);
    let loss = kl_divergence(&clean, &q)?;
    let dlogits = kl_dlogits(&clean, &q);
    Ok(VatOutput {
        loss,
        perturbation,
        clean_proba: clean,
        dlogits,
        cache,
    })
}

/// Negative entropy of the batch-mean prediction, `Σ_k p̂_k log p̂_k`.
pub fn diversity_loss(p: &Matrix) -> (f64, Matrix) {
    let n = p.rows();
    let k = p.cols();
    let mut d = Matrix::zeros(n, k);
    if n == 0 {
        return (0.0, d);
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; k];
    for r in p.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let loss: f64 = mean.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum();
    let g: Vec<f64> = mean
        .iter()
        .map(|&m| (ln_clamped(m) + 1.0) * inv_n)
        .collect();
    for i in 0..n {
        let pr = p.row(i);
        let dot: f64 = pr.iter().zip(&g).map(|(a, b)| a * b).sum();
        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
            *dv = pr[j] * (g[j] - dot);
        }
    }
    (loss, d)
}

/// One loss term: its value and its gradient seed on a given branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub dlogits: Matrix,
}

impl Term {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            dlogits: Matrix::zeros(rows, cols),
        }
    }

    /// Places a sub-batch seed at `offset` inside a batch of `rows` rows.
    pub fn embedded(value: f64, sub: &Matrix, offset: usize, rows: usize) -> Self {
        let mut d = Matrix::zeros(rows, sub.cols());
        for i in 0..sub.rows() {
            d.row_mut(offset + i).copy_from_slice(sub.row(i));
        }
        Self { value, dlogits: d }
    }
}

/// Per-term inputs to [`total_reg`]. `lab`, `ps`, `ent` and `div` seed the
/// clean joint batch; `vadv` seeds the perturbed batch.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub lab: Term,
    pub ps: Term,
    pub ent: Term,
    pub vadv: Term,
    pub div: Term,
}

/// Loss values for one step and the combined gradient seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub l_lab: f64,
    pub l_ent: f64,
    pub l_ps: f64,
    pub l_vadv: f64,
    pub l_div: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub lambda0: f64,
    /// `d(l_lab + λ₀ l_ps + l_ent + l_div) / d logits` on the clean batch.
    pub clean_dlogits: Matrix,
    /// `d l_vadv / d logits` on the perturbed batch.
    pub vat_dlogits: Matrix,
}

/// `l_reg = λ₀ l_ps + l_ent + l_vadv + l_div` and `l_total = l_lab + l_reg`.
pub fn total_reg(c: LossComponents, lambda0: f64) -> Result<LossBundle> {
    let mut clean = c.lab.dlogits.clone();
    clean.add_scaled(&c.ps.dlogits, lambda0)?;
    clean.add_scaled(&c.ent.dlogits, 1.0)?;
    clean.add_scaled(&c.div.dlogits, 1.0)?;
    let l_reg = lambda0 * c.ps.value + c.ent.value + c.vadv.value + c.div.value;
    Ok(LossBundle {
        l_lab: c.lab.value,
        l_ent: c.ent.value,
        l_ps: c.ps.value,
        l_vadv: c.vadv.value,
        l_div: c.div.value,
        l_reg,
        l_total: c.lab.value + l_reg,
        lambda0,
        clean_dlogits: clean,
        vat_dlogits: c.vadv.dlogits,
    })
}
