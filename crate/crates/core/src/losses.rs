//! Loss functions with analytic gradients.
//!
//! Every loss returns a [`LossOutput`] whose `grads` follow the order of the
//! matrix arguments. Log-sum-exp and softplus forms are used throughout so
//! that no loss ever evaluates `log σ(x)` or `exp` of an unbounded logit.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{logsumexp, norm, sigmoid, softplus, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// One gradient per input, each shaped like that input.
    pub grads: Vec<Matrix>,
}

impl LossOutput {
    pub fn grad(&self, index: usize) -> &Matrix {
        &self.grads[index]
    }
}

/// InfoNCE value plus the bound `ln B − value` on the paired mutual information.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: LossOutput,
    pub mi_lower_bound: f64,
}

/// Loss-level hyperparameters shared across stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Contrastive temperature τ.
    pub tau: f64,
    /// Weight λ of the mutual-information terms in the generator objective.
    pub lambda: f64,
    /// Beta(α, α) parameter for mix-up.
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub w_ser: f64,
    pub w_cl: f64,
    pub w_mi: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 1.0,
            mixup_alpha: 0.4,
            batch_size: 32,
            w_ser: 1.0,
            w_cl: 1.0,
            w_mi: 1.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        positive_finite("tau", self.tau)?;
        non_negative("lambda", self.lambda)?;
        positive_finite("mixup_alpha", self.mixup_alpha)?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        non_negative("w_ser", self.w_ser)?;
        non_negative("w_cl", self.w_cl)?;
        non_negative("w_mi", self.w_mi)
    }
}

pub(crate) fn positive_finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and > 0, got {v}")))
    }
}

pub(crate) fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be finite and >= 0, got {v}")))
    }
}

/// Mean over the batch of `−log softmax(logits_i)[label_i]`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    let (batch, classes) = logits.shape();
    if batch == 0 || labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{batch} labels (B >= 1)"),
            labels.len(),
        ));
    }
    let mut grad = Matrix::zeros(batch, classes);
    let mut total = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(i);
        let lse = logsumexp(row);
        total += lse - row[label];
        let g = grad.row_mut(i);
        for (gj, &zj) in g.iter_mut().zip(row) {
            *gj = (zj - lse).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok(LossOutput {
        value: total * inv_b,
        grads: vec![grad],
    })
}

fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNormRow { row: i });
        }
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Pulls a gradient w.r.t. `x / ‖x‖` back to `x`.
fn unnormalize_grad(grad_unit: &Matrix, unit: &Matrix, norms: &[f64]) -> Matrix {
    let mut out = grad_unit.clone();
    for i in 0..out.rows() {
        let u = unit.row(i);
        let g = grad_unit.row(i);
        let proj: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        for ((o, &gj), &uj) in out.row_mut(i).iter_mut().zip(g).zip(u) {
            *o = (gj - proj * uj) / norms[i];
        }
    }
    out
}

/// Cosine-similarity InfoNCE between paired rows of `anchors` and `candidates`.
///
/// Row `i` of `anchors` is scored against every row of `candidates`; the
/// matching row is the positive. With `symmetric`, the candidate→anchor
/// direction is averaged in.
fn paired_contrastive(
    op: &'static str,
    anchors: &Matrix,
    candidates: &Matrix,
    tau: f64,
    symmetric: bool,
) -> Result<LossOutput> {
    if anchors.shape() != candidates.shape() {
        return Err(Error::shape(
            op,
            format!("{}x{}", anchors.rows(), anchors.cols()),
            format!("{}x{}", candidates.rows(), candidates.cols()),
        ));
    }
    let batch = anchors.rows();
    if batch < 2 {
        return Err(Error::InvalidInput(format!(
            "{op} needs a batch of at least 2 rows, got {batch}"
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be > 0, got {tau}")));
    }
    let (a_unit, a_norms) = normalize_rows(anchors)?;
    let (c_unit, c_norms) = normalize_rows(candidates)?;

    let mut scores = a_unit.matmul_t(&c_unit)?;
    scores.as_mut_slice().iter_mut().for_each(|s| *s /= tau);

    let inv_b = 1.0 / batch as f64;
    // dL/dS
    let mut g_scores = Matrix::zeros(batch, batch);
    let mut value = 0.0;
    let direction_weight = if symmetric { 0.5 } else { 1.0 };

    for i in 0..batch {
        let row = scores.row(i);
        let lse = logsumexp(row);
        value += direction_weight * (lse - row[i]) * inv_b;
        for j in 0..batch {
            let p = (row[j] - lse).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            let g = g_scores.get(i, j) + direction_weight * (p - target) * inv_b;
            g_scores.set(i, j, g);
        }
    }
    if symmetric {
        let cols = scores.transpose();
        for j in 0..batch {
            let col = cols.row(j);
            let lse = logsumexp(col);
            value += direction_weight * (lse - col[j]) * inv_b;
            for i in 0..batch {
                let p = (col[i] - lse).exp();
                let target = if i == j { 1.0 } else { 0.0 };
                let g = g_scores.get(i, j) + direction_weight * (p - target) * inv_b;
                g_scores.set(i, j, g);
            }
        }
    }

    let inv_tau = 1.0 / tau;
    let g_a_unit = g_scores.matmul(&c_unit)?.scale(inv_tau);
    let g_c_unit = g_scores.t_matmul(&a_unit)?.scale(inv_tau);
    Ok(LossOutput {
        value,
        grads: vec![
            unnormalize_grad(&g_a_unit, &a_unit, &a_norms),
            unnormalize_grad(&g_c_unit, &c_unit, &c_norms),
        ],
    })
}

/// Text→audio alignment loss over a minibatch of paired `(t_i, h_i)`.
/// Gradients are returned for `text` then `audio`.
pub fn contrastive_alignment(
    text: &Matrix,
    audio: &Matrix,
    tau: f64,
    symmetric: bool,
) -> Result<LossOutput> {
    paired_contrastive("contrastive_alignment", text, audio, tau, symmetric)
}

/// InfoNCE between true text features and their predictions.
pub fn infonce(text: &Matrix, predicted: &Matrix, tau: f64) -> Result<InfoNce> {
    let loss = paired_contrastive("infonce", text, predicted, tau, false)?;
    let mi_lower_bound = (text.rows() as f64).ln() - loss.value;
    Ok(InfoNce {
        loss,
        mi_lower_bound,
    })
}

/// Binary cross-entropy on logits with (possibly soft) targets, averaged over the batch.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<LossOutput> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("{} targets (B >= 1)", logits.len()),
            targets.len(),
        ));
    }
    let inv_b = 1.0 / logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(targets) {
        value += y * softplus(-x) + (1.0 - y) * softplus(x);
        grad.push((sigmoid(x) - y) * inv_b);
    }
    Ok(LossOutput {
        value: value * inv_b,
        grads: vec![Matrix::column(&grad)],
    })
}

/// Discriminator loss `−mean log σ(real) − mean log(1 − σ(fake))`.
/// Gradients are `B x 1` columns for `real` then `fake`.
pub fn gan_d_loss(real_logits: &[f64], fake_logits: &[f64]) -> Result<LossOutput> {
    let ones = vec![1.0; real_logits.len()];
    let zeros = vec![0.0; fake_logits.len()];
    let real = bce_with_logits(real_logits, &ones)?;
    let fake = bce_with_logits(fake_logits, &zeros)?;
    Ok(LossOutput {
        value: real.value + fake.value,
        grads: vec![
            real.grads.into_iter().next().expect("one grad"),
            fake.grads.into_iter().next().expect("one grad"),
        ],
    })
}

/// Non-saturating generator loss `−mean log σ(fake)`.
pub fn gan_g_loss(fake_logits: &[f64]) -> Result<LossOutput> {
    bce_with_logits(fake_logits, &vec![1.0; fake_logits.len()])
}

/// A feature vector with a soft label, the unit mix-up works on.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSample {
    pub features: Vec<f64>,
    pub label: Vec<f64>,
}

/// Convex combination `weight·a + (1 − weight)·b` of features and labels.
pub fn mix_with_weight(a: &MixSample, b: &MixSample, weight: f64) -> Result<MixSample> {
    if a.features.len() != b.features.len() || a.label.len() != b.label.len() {
        return Err(Error::shape(
            "mixup",
            format!("features {}, label {}", a.features.len(), a.label.len()),
            format!("features {}, label {}", b.features.len(), b.label.len()),
        ));
    }
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(&p, &q)| weight * p + (1.0 - weight) * q)
            .collect()
    };
    Ok(MixSample {
        features: mix(&a.features, &b.features),
        label: mix(&a.label, &b.label),
    })
}

/// Draws `weight ~ Beta(α, α)` and mixes; returns the sample and the weight.
pub fn mixup<R: Rng + ?Sized>(
    a: &MixSample,
    b: &MixSample,
    alpha: f64,
    rng: &mut R,
) -> Result<(MixSample, f64)> {
    let weight = sample_mix_weight(alpha, rng)?;
    Ok((mix_with_weight(a, b, weight)?, weight))
}

pub fn sample_mix_weight<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidInput(format!("mix-up alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}
