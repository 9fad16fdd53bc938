//! Monte Carlo and importance-sampling estimators, variance-reduction
//! reporting, the coarse/fine fidelity table, and the two analytic toy
//! problems.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elliptic::EllipticProblem;
use crate::flow_core::{FlowError, FlowModel, LN_2PI};
use crate::weighting::RawSample;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("model dimension {model} does not match problem dimension {problem}")]
    DimensionMismatch { model: usize, problem: usize },
    #[error("Monte Carlo standard deviation is zero; variance ratio undefined")]
    ZeroMcStd,
    #[error("all importance-sampling weights were non-finite")]
    AllExcluded,
    #[error("fidelity report needs the error estimate on every sample")]
    MissingFineValues,
    #[error("rejection acceptance probability below 1e-6; parameters look pathological")]
    PathologicalAcceptance,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// A threshold-exceedance problem under a standard-normal reference density.
pub trait TargetProblem: Sync {
    fn dimension(&self) -> usize;
    /// The event indicator `I_B(y)`.
    fn contains(&self, y: &[f64]) -> bool;
}

/// Log-density of the standard normal reference.
pub fn standard_normal_logpdf(y: &[f64]) -> f64 {
    let quad: f64 = y.iter().map(|v| v * v).sum();
    -0.5 * quad - 0.5 * y.len() as f64 * LN_2PI
}

/// Estimate, spread, and sample-efficiency summary of one estimator run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimate: f64,
    #[serde(rename = "std")]
    pub std_dev: f64,
    pub n: usize,
    pub ci_halfwidth: f64,
    pub excluded: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

impl EstimatorReport {
    fn from_values(values: &[f64], excluded: usize) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let std_dev = var.sqrt();
        EstimatorReport {
            estimate: mean,
            std_dev,
            n,
            ci_halfwidth: 1.96 * std_dev / (n as f64).sqrt(),
            excluded,
            ratio: None,
        }
    }

    /// Attach the `N_IS / N_MC` sample-size ratio against a paired Monte
    /// Carlo run.
    pub fn with_ratio(mut self, sigma_mc: f64) -> Result<Self, EstimateError> {
        self.ratio = Some(variance_ratio(self.std_dev, sigma_mc)?);
        Ok(self)
    }

    /// A run with more than 0.1% non-finite weights is unusable: the density
    /// underflowed on the event set.
    pub fn exclusion_failed(&self) -> bool {
        let total = self.n + self.excluded;
        total > 0 && self.excluded as f64 > 1e-3 * total as f64
    }
}

/// Plain Monte Carlo estimate of `Pr(B)` under the reference density.
pub fn mc_estimate<P: TargetProblem, R: Rng>(
    problem: &P,
    count: usize,
    rng: &mut R,
) -> Result<EstimatorReport, EstimateError> {
    if count < 2 {
        return Err(EstimateError::TooFewSamples {
            needed: 2,
            got: count,
        });
    }
    let dim = problem.dimension();
    let draws: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect();
    let indicators: Vec<f64> = draws
        .par_iter()
        .map(|y| if problem.contains(y) { 1.0 } else { 0.0 })
        .collect();
    Ok(EstimatorReport::from_values(&indicators, 0))
}

/// Importance-sampling estimate: draw from the flow's prior, map through the
/// inverse, and average `I_B(y) rho(y) / p_Y(y)`. Non-finite weights are
/// excluded and counted.
pub fn is_estimate<P: TargetProblem, R: Rng>(
    problem: &P,
    model: &FlowModel,
    count: usize,
    rng: &mut R,
) -> Result<EstimatorReport, EstimateError> {
    if count < 2 {
        return Err(EstimateError::TooFewSamples {
            needed: 2,
            got: count,
        });
    }
    if model.dimension != problem.dimension() {
        return Err(EstimateError::DimensionMismatch {
            model: model.dimension,
            problem: problem.dimension(),
        });
    }
    let dim = model.dimension;
    let z = Array2::from_shape_fn((count, dim), |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    let y = model.inverse_batch(&z)?;
    let logp = model.log_density_batch(&y)?;

    let rows: Vec<Vec<f64>> = y.rows().into_iter().map(|r| r.to_vec()).collect();
    let weights: Vec<f64> = rows
        .par_iter()
        .zip(logp.as_slice().expect("contiguous").par_iter())
        .map(|(row, &lp)| {
            if problem.contains(row) {
                (standard_normal_logpdf(row) - lp).exp()
            } else {
                0.0
            }
        })
        .collect();

    let kept: Vec<f64> = weights.iter().copied().filter(|w| w.is_finite()).collect();
    let excluded = count - kept.len();
    if kept.is_empty() {
        return Err(EstimateError::AllExcluded);
    }
    Ok(EstimatorReport::from_values(&kept, excluded))
}

/// `N_IS / N_MC = (sigma_w / sigma_mc)^2`.
pub fn variance_ratio(sigma_w: f64, sigma_mc: f64) -> Result<f64, EstimateError> {
    if sigma_mc == 0.0 {
        return Err(EstimateError::ZeroMcStd);
    }
    Ok((sigma_w / sigma_mc) * (sigma_w / sigma_mc))
}

/// Counts comparing the coarse and fine indicators on a common sample set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub total: usize,
    /// `g_coarse >= 0`.
    pub coarse_pos: usize,
    /// `g_fine >= 0`.
    pub fine_pos: usize,
    /// `-eps_max <= g_coarse < 0`.
    pub band_negative: usize,
    /// `g_coarse < 0` while `g_fine >= 0`: samples the coarse model misses.
    pub missed: usize,
}

pub fn fidelity_report(
    samples: &[RawSample],
    eps_max: f64,
) -> Result<FidelityReport, EstimateError> {
    let mut report = FidelityReport {
        total: samples.len(),
        coarse_pos: 0,
        fine_pos: 0,
        band_negative: 0,
        missed: 0,
    };
    for s in samples {
        let g_fine = s.g_fine().ok_or(EstimateError::MissingFineValues)?;
        if s.g_coarse >= 0.0 {
            report.coarse_pos += 1;
        } else {
            if s.g_coarse >= -eps_max {
                report.band_negative += 1;
            }
            if g_fine >= 0.0 {
                report.missed += 1;
            }
        }
        if g_fine >= 0.0 {
            report.fine_pos += 1;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Toy problems
// ---------------------------------------------------------------------------

/// Exterior of a rotated, scaled ellipse in 2D.
#[derive(Debug, Clone, Copy)]
pub struct EllipseToy {
    pub alpha: f64,
    pub angle: f64,
    pub threshold: f64,
}

impl Default for EllipseToy {
    fn default() -> Self {
        EllipseToy {
            alpha: 2.0,
            angle: std::f64::consts::FRAC_PI_4,
            threshold: 3.0,
        }
    }
}

impl EllipseToy {
    /// `|diag(alpha, 1) R y|^2`.
    pub fn mapped_norm_sq(&self, y: &[f64]) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let r1 = c * y[0] - s * y[1];
        let r2 = s * y[0] + c * y[1];
        let a = self.alpha * r1;
        a * a + r2 * r2
    }
}

impl TargetProblem for EllipseToy {
    fn dimension(&self) -> usize {
        2
    }

    fn contains(&self, y: &[f64]) -> bool {
        self.mapped_norm_sq(y) >= self.threshold * self.threshold
    }
}

/// Fine-model exceedance event of the elliptic testbed.
pub struct FineExceedance<'a>(pub &'a EllipticProblem);

impl TargetProblem for FineExceedance<'_> {
    fn dimension(&self) -> usize {
        self.0.dimension()
    }

    fn contains(&self, y: &[f64]) -> bool {
        self.0.fine_indicator(y)
    }
}

/// I.i.d. standard-normal pairs pushed through a fixed rotation.
pub fn toy_rotation_data<R: Rng>(count: usize, rng: &mut R) -> Array2<f64> {
    assert!(count >= 1);
    let angle = std::f64::consts::FRAC_PI_4;
    let (s, c) = angle.sin_cos();
    let mut out = Array2::zeros((count, 2));
    for mut row in out.rows_mut() {
        let g1: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        let g2: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        row[0] = c * g1 - s * g2;
        row[1] = s * g1 + c * g2;
    }
    out
}

/// Rejection sampling of the conditional density on the ellipse exterior.
pub fn toy_ellipse_data<R: Rng>(
    count: usize,
    rng: &mut R,
    toy: &EllipseToy,
) -> Result<Array2<f64>, EstimateError> {
    assert!(count >= 1);
    let mut out = Array2::zeros((count, 2));
    let mut accepted = 0usize;
    let mut attempts = 0u64;
    while accepted < count {
        let y = [
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
        ];
        attempts += 1;
        if toy.contains(&y) {
            out[(accepted, 0)] = y[0];
            out[(accepted, 1)] = y[1];
            accepted += 1;
        }
        if attempts.is_multiple_of(1_000_000) && (accepted as f64) < 1e-6 * attempts as f64 {
            return Err(EstimateError::PathologicalAcceptance);
        }
    }
    Ok(out)
}
