//! Analytic gradients of the combined objective, plus a central-difference
//! oracle that only ever calls [`total_loss`].
//!
//! Selection and weights are held fixed while differentiating: `q` and the
//! source indices of a [`UasrResult`] are constants of the step.
//!
//! For one tag `w` with contexts `x_k`, writing `e_k = w·x_k` so that
//! `φ = Σ_k α_k e_k`:
//!
//! ```text
//! ∂φ/∂w   = a + Σ_k α_k (e_k − φ) x_k / √d
//! ∂φ/∂x_k = α_k w (1 + (e_k − φ) / √d)
//! ```

use serde::{Deserialize, Serialize};

use crate::compat::{compatibility_traced, softmax_in_place, CompatibilityTrace};
use crate::error::{RcaError, Result};
use crate::loss::{check_selection, total_loss, Lambdas};
use crate::model::{dot, ContrastiveInstance, EmbeddingMatrix};
use crate::uasr::UasrResult;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of the loss with respect to every input embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub d_regions: EmbeddingMatrix,
    pub d_positives: EmbeddingMatrix,
    pub d_negatives: EmbeddingMatrix,
    pub d_caption: EmbeddingMatrix,
    pub loss: f64,
}

impl GradientBundle {
    fn zeros_like(instance: &ContrastiveInstance) -> Self {
        let d = instance.dim();
        GradientBundle {
            d_regions: EmbeddingMatrix::zeros(instance.regions.row_count(), d),
            d_positives: EmbeddingMatrix::zeros(instance.k(), d),
            d_negatives: EmbeddingMatrix::zeros(instance.k(), d),
            d_caption: EmbeddingMatrix::zeros(instance.caption_nouns.row_count(), d),
            loss: 0.0,
        }
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &EmbeddingMatrix); 4] {
        [
            ("regions", &self.d_regions),
            ("positives", &self.d_positives),
            ("negatives", &self.d_negatives),
            ("caption", &self.d_caption),
        ]
    }
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Push `dphi` back through one compatibility evaluation.
/// Returns the tag gradients row-aligned with `tags`; context gradients are
/// accumulated into `d_contexts`.
fn compatibility_backward(
    tags: &EmbeddingMatrix,
    contexts: &EmbeddingMatrix,
    trace: &CompatibilityTrace,
    dphi: &[f64],
    d_contexts: &mut EmbeddingMatrix,
) -> EmbeddingMatrix {
    let inv_sqrt_d = (tags.dim() as f64).sqrt().recip();
    let mut d_tags = EmbeddingMatrix::zeros(tags.row_count(), tags.dim());
    for (j, w) in tags.rows().enumerate() {
        let g = dphi[j];
        if g == 0.0 {
            continue;
        }
        let phi = trace.phi[j];
        let dw = d_tags.row_mut(j);
        axpy(dw, g, trace.pooled.row(j));
        for (k, x) in contexts.rows().enumerate() {
            let alpha = trace.alpha.get(j, k);
            let centred = dot(w, x) - phi;
            axpy(dw, g * alpha * centred * inv_sqrt_d, x);
            axpy(d_contexts.row_mut(k), g * alpha * (1.0 + centred * inv_sqrt_d), w);
        }
    }
    d_tags
}

/// Forward and backward of one weighted relative term scaled by `lambda`.
/// Returns the unscaled loss value.
fn relative_term_backward(
    contexts: &EmbeddingMatrix,
    positives: &EmbeddingMatrix,
    negatives: &EmbeddingMatrix,
    q: &[f64],
    lambda: f64,
    d_contexts: &mut EmbeddingMatrix,
) -> Result<(f64, EmbeddingMatrix, EmbeddingMatrix)> {
    let k = positives.row_count();
    let pos = compatibility_traced(positives, contexts)?;
    let neg = compatibility_traced(negatives, contexts)?;

    let mut dphi_pos = vec![0.0; k];
    let mut dphi_neg = vec![0.0; k];
    let mut loss = 0.0;
    let mut logits = vec![0.0; k + 1];
    for n in 0..k {
        logits[0] = pos.phi[n];
        logits[1..].copy_from_slice(&neg.phi);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += q[n] * (lse - pos.phi[n]);

        softmax_in_place(&mut logits);
        let scale = lambda * q[n] / k as f64;
        dphi_pos[n] = scale * (logits[0] - 1.0);
        for (d, p) in dphi_neg.iter_mut().zip(&logits[1..]) {
            *d += scale * p;
        }
    }
    let d_pos = compatibility_backward(positives, contexts, &pos, &dphi_pos, d_contexts);
    let d_neg = compatibility_backward(negatives, contexts, &neg, &dphi_neg, d_contexts);
    Ok((loss / k as f64, d_pos, d_neg))
}

fn scatter_rows(dst: &mut EmbeddingMatrix, src: &EmbeddingMatrix, sources: &[usize]) {
    for (row, &s) in src.rows().zip(sources) {
        axpy(dst.row_mut(s), 1.0, row);
    }
}

/// Loss value and exact gradient of [`total_loss`].
pub fn loss_and_grad(instance: &ContrastiveInstance, uasr: &UasrResult, lambdas: Lambdas) -> Result<GradientBundle> {
    let lambdas = Lambdas::new(lambdas.cross, lambdas.inner)?;
    check_selection(instance, uasr)?;
    let positives = instance.positives.gather(&uasr.positive_sources);
    let negatives = instance.negatives.gather(&uasr.negative_sources);
    let mut out = GradientBundle::zeros_like(instance);

    if lambdas.cross > 0.0 {
        let (l, dp, dn) = relative_term_backward(
            &instance.regions,
            &positives,
            &negatives,
            &uasr.weights,
            lambdas.cross,
            &mut out.d_regions,
        )?;
        out.loss += lambdas.cross * l;
        scatter_rows(&mut out.d_positives, &dp, &uasr.positive_sources);
        scatter_rows(&mut out.d_negatives, &dn, &uasr.negative_sources);
    }
    if lambdas.inner > 0.0 && !instance.caption_nouns.is_empty() {
        let (l, dp, dn) = relative_term_backward(
            &instance.caption_nouns,
            &positives,
            &negatives,
            &uasr.weights,
            lambdas.inner,
            &mut out.d_caption,
        )?;
        out.loss += lambdas.inner * l;
        scatter_rows(&mut out.d_positives, &dp, &uasr.positive_sources);
        scatter_rows(&mut out.d_negatives, &dn, &uasr.negative_sources);
    }
    Ok(out)
}

/// Central differences of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Slot {
    Regions,
    Positives,
    Negatives,
    Caption,
}

fn slot_mut(inst: &mut ContrastiveInstance, slot: Slot) -> &mut EmbeddingMatrix {
    match slot {
        Slot::Regions => &mut inst.regions,
        Slot::Positives => &mut inst.positives,
        Slot::Negatives => &mut inst.negatives,
        Slot::Caption => &mut inst.caption_nouns,
    }
}

/// Numerical gradient of [`total_loss`] by central differences with step `h`.
pub fn finite_diff_grad(
    instance: &ContrastiveInstance,
    uasr: &UasrResult,
    lambdas: Lambdas,
    h: f64,
) -> Result<GradientBundle> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(RcaError::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let loss = total_loss(instance, uasr, lambdas)?.total;
    let mut out = GradientBundle::zeros_like(instance);
    out.loss = loss;
    let mut probe = instance.clone();
    for slot in [Slot::Regions, Slot::Positives, Slot::Negatives, Slot::Caption] {
        let len = slot_mut(&mut probe, slot).as_slice().len();
        let mut grad = Vec::with_capacity(len);
        for i in 0..len {
            let x0 = slot_mut(&mut probe, slot).as_slice()[i];
            slot_mut(&mut probe, slot).as_mut_slice()[i] = x0 + h;
            let up = total_loss(&probe, uasr, lambdas)?.total;
            slot_mut(&mut probe, slot).as_mut_slice()[i] = x0 - h;
            let down = total_loss(&probe, uasr, lambdas)?.total;
            slot_mut(&mut probe, slot).as_mut_slice()[i] = x0;
            grad.push((up - down) / (2.0 * h));
        }
        let dst = match slot {
            Slot::Regions => &mut out.d_regions,
            Slot::Positives => &mut out.d_positives,
            Slot::Negatives => &mut out.d_negatives,
            Slot::Caption => &mut out.d_caption,
        };
        dst.as_mut_slice().copy_from_slice(&grad);
    }
    Ok(out)
}

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Worst disagreement found in one gradient tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub max_relative_error: f64,
    pub worst_row: Option<usize>,
    pub worst_col: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-tensor comparison of two gradient bundles of the same shape.
pub fn compare_gradients(analytic: &GradientBundle, numeric: &GradientBundle) -> Vec<TensorCheck> {
    analytic
        .tensors()
        .iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, n))| {
            let dim = a.dim();
            let mut check = TensorCheck {
                tensor: (*name).to_owned(),
                max_relative_error: 0.0,
                worst_row: None,
                worst_col: None,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (i, (&x, &y)) in a.as_slice().iter().zip(n.as_slice()).enumerate() {
                let e = relative_error(x, y);
                if check.worst_row.is_none() || e > check.max_relative_error {
                    check.max_relative_error = e;
                    check.worst_row = Some(i / dim);
                    check.worst_col = Some(i % dim);
                    check.analytic = x;
                    check.numeric = y;
                }
            }
            check
        })
        .collect()
}
