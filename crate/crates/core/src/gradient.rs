//! Zero-order gradient estimation and gradient similarity metrics.
//!
//! Both estimators compute the forward difference
//! `(f(x + h·eᵢ) − f(x)) / h` for every attribute `i`, where `f` is the raw
//! confidence, and negate the whole vector when `f(x) ≤ 0.5` so it refers to
//! the predicted class. The naive form issues `n + 1` single-row calls; the
//! vectored form stacks the `n` perturbed rows into one batch and needs two
//! calls regardless of `n`. Perturbed rows are not clipped to the input
//! domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelHandle;

/// Which gradient drives the search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Vectored forward-difference estimate; black-box.
    #[default]
    ZeroOrder,
    /// Exact gradient of the predicted-class confidence.
    BackpropOutput,
    /// Exact gradient of the cross-entropy loss at the predicted label.
    BackpropLoss,
}

/// How a [`GradientVector`] was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientKind {
    ZeroOrderNaive,
    ZeroOrderVectored,
    BackpropOutput,
    BackpropLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub components: Vec<f64>,
    pub kind: GradientKind,
}

impl GradientVector {
    pub fn new(components: Vec<f64>, kind: GradientKind) -> Self {
        GradientVector { components, kind }
    }

    pub fn zeros(n: usize, kind: GradientKind) -> Self {
        GradientVector::new(vec![0.0; n], kind)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }

    /// `decay · self + other`, component-wise (momentum accumulation).
    pub fn decayed_add(&mut self, decay: f64, other: &GradientVector) {
        for (acc, g) in self.components.iter_mut().zip(&other.components) {
            *acc = decay * *acc + g;
        }
    }
}

impl std::ops::Index<usize> for GradientVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.components[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub perturbation_size: f64,
}

impl EstimationConfig {
    pub fn new(perturbation_size: f64) -> Result<Self> {
        let cfg = EstimationConfig { perturbation_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.perturbation_size.is_finite() && self.perturbation_size > 0.0) {
            return Err(Error::Config(format!(
                "perturbation size must be positive and finite, got {}",
                self.perturbation_size
            )));
        }
        Ok(())
    }
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            perturbation_size: 1.0,
        }
    }
}

fn calibrate(mut grad: Vec<f64>, base: f64) -> Vec<f64> {
    if base <= 0.5 {
        for g in &mut grad {
            *g = -*g;
        }
    }
    grad
}

fn check_len(handle: &ModelHandle, x: &[f64]) -> Result<()> {
    if x.len() != handle.input_dim() {
        return Err(Error::Dimension {
            expected: handle.input_dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// One attribute at a time: `n + 1` single-row invocations.
pub fn estimate_gradient_naive(
    handle: &ModelHandle,
    x: &[f64],
    cfg: &EstimationConfig,
) -> Result<GradientVector> {
    check_len(handle, x)?;
    let h = cfg.perturbation_size;
    let base = handle.confidence(x)?;
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let y = handle.confidence(&probe)?;
        probe[i] = x[i];
        grad.push((y - base) / h);
    }
    Ok(GradientVector::new(
        calibrate(grad, base),
        GradientKind::ZeroOrderNaive,
    ))
}

/// All perturbations in one batch: exactly two invocations.
pub fn estimate_gradient_vectored(
    handle: &ModelHandle,
    x: &[f64],
    cfg: &EstimationConfig,
) -> Result<GradientVector> {
    check_len(handle, x)?;
    let h = cfg.perturbation_size;
    let perturbed: Vec<Vec<f64>> = (0..x.len())
        .map(|i| {
            let mut row = x.to_vec();
            row[i] = x[i] + h;
            row
        })
        .collect();
    let ys = handle.forward(&perturbed)?;
    let base = handle.confidence(x)?;
    let grad = ys.iter().map(|y| (y - base) / h).collect();
    Ok(GradientVector::new(
        calibrate(grad, base),
        GradientKind::ZeroOrderVectored,
    ))
}

/// Gradient used to steer the search, oriented towards increasing the
/// predicted-class confidence for every source.
///
/// The loss gradient points the other way (it grows as that confidence
/// falls), so it is negated here.
pub fn compute_gradient(
    handle: &ModelHandle,
    x: &[f64],
    source: GradientSource,
    cfg: &EstimationConfig,
) -> Result<GradientVector> {
    match source {
        GradientSource::ZeroOrder => estimate_gradient_vectored(handle, x, cfg),
        GradientSource::BackpropOutput => Ok(GradientVector::new(
            handle.output_gradient(x)?,
            GradientKind::BackpropOutput,
        )),
        GradientSource::BackpropLoss => {
            let g = loss_gradient_at_prediction(handle, x)?;
            Ok(GradientVector::new(
                g.into_iter().map(|v| -v).collect(),
                GradientKind::BackpropLoss,
            ))
        }
    }
}

/// `∇ₓ L(x, y)` with `y` the model's own label for `x`.
pub fn loss_gradient_at_prediction(handle: &ModelHandle, x: &[f64]) -> Result<Vec<f64>> {
    let model = handle
        .model()
        .ok_or_else(|| Error::Unsupported("exact gradients need an in-process model".into()))?;
    let label = crate::model::label_of(model.predict(x)?);
    model.loss_gradient(x, label)
}

/// `(a·b) / (‖a‖‖b‖)`, or 0 when either vector is all zeros.
///
/// Both vectors are rescaled by their largest magnitude first, so tiny
/// gradients from saturated confidences do not underflow.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Unsupported("cosine similarity of a non-finite vector".into()));
    }
    let sa = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let sb = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if sa == 0.0 || sb == 0.0 {
        log::debug!("cosine similarity with a zero vector; using 0");
        return Ok(0.0);
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x / sa, y / sb);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Forward-difference error against a known exact gradient, per step size.
///
/// Returns `(h, max_i |g̃ᵢ − gᵢ|)` for every `h`. No sign calibration is
/// applied; `oracle` is an arbitrary scalar function.
pub fn error_order_probe<F>(oracle: F, x: &[f64], exact: &[f64], h_values: &[f64]) -> Vec<(f64, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    let base = oracle(x);
    h_values
        .iter()
        .map(|&h| {
            let mut probe = x.to_vec();
            let err = (0..x.len())
                .map(|i| {
                    probe[i] = x[i] + h;
                    let g = (oracle(&probe) - base) / h;
                    probe[i] = x[i];
                    (g - exact[i]).abs()
                })
                .fold(0.0, f64::max);
            (h, err)
        })
        .collect()
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
