//! Weighted empirical distribution for reduced-order-model data.
//!
//! Raw samples carry the coarse QoI value and an error estimate. The pipeline
//! keeps every sample whose coarse QoI clears the error band, then assigns a
//! constant weight to the nonnegative samples (total mass `theta`) and a
//! half-normal decaying weight to the negative band (total mass `1 - theta`),
//! continuous across zero. The decay width `sigma` is the unique root of a
//! monotone scalar equation, found by bisection on the bracket derived from
//! the weight constants.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("theta must lie in (0, 1], got {0}")]
    InvalidTheta(f64),
    #[error("no samples to weight")]
    Empty,
    #[error("no samples with nonnegative coarse QoI")]
    NoPositiveSamples,
    #[error(
        "sigma bracket failure: negative-band mass saturates at {max_mass:.6e} \
         but {needed:.6e} is required; decrease theta or enlarge the band"
    )]
    BracketFailure { max_mass: f64, needed: f64 },
    #[error("truncation fraction must lie in (0, 1], got {0}")]
    InvalidTruncation(f64),
    #[error("dataset file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One record from sampling the reduced-order model.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub y: Vec<f64>,
    /// Coarse QoI minus the threshold.
    pub g_coarse: f64,
    /// Coarse-model error estimate; for the elliptic testbed this is
    /// `g_coarse - g_fine`. Absent when the fine model was not evaluated.
    pub error_estimate: Option<f64>,
}

impl RawSample {
    /// Fine QoI recovered from the error estimate, when present.
    pub fn g_fine(&self) -> Option<f64> {
        self.error_estimate.map(|e| self.g_coarse - e)
    }
}

/// Samples plus their fitted weights and the weight-system constants.
#[derive(Debug, Clone)]
pub struct WeightedDataset {
    pub samples: Vec<RawSample>,
    pub weights: Vec<f64>,
    /// Probability mass on the nonnegative samples.
    pub theta: f64,
    pub c1: f64,
    pub c2: f64,
    /// Half-normal width; 0 when there is no negative band.
    pub sigma: f64,
    /// Band bound actually spanned by the retained samples.
    pub eps_max_neg: f64,
}

impl WeightedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.samples.first().map(|s| s.y.len()).unwrap_or(0)
    }

    /// Uniformly weighted dataset over plain inputs (used by the toy
    /// problems, where there is no coarse QoI).
    pub fn uniform(inputs: &Array2<f64>) -> Self {
        let n = inputs.nrows();
        let samples = inputs
            .rows()
            .into_iter()
            .map(|r| RawSample {
                y: r.to_vec(),
                g_coarse: 0.0,
                error_estimate: None,
            })
            .collect();
        WeightedDataset {
            samples,
            weights: vec![1.0 / n as f64; n],
            theta: 1.0,
            c1: 0.0,
            c2: 1.0 / n as f64,
            sigma: 0.0,
            eps_max_neg: 0.0,
        }
    }

    pub fn input_matrix(&self) -> Array2<f64> {
        let n = self.samples.len();
        let d = self.dimension();
        let mut out = Array2::zeros((n, d));
        for (i, s) in self.samples.iter().enumerate() {
            for (j, &v) in s.y.iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn weight_array(&self) -> Array1<f64> {
        Array1::from_vec(self.weights.clone())
    }

    pub fn constants(&self) -> WeightConstants {
        WeightConstants {
            theta: self.theta,
            c1: self.c1,
            c2: self.c2,
            sigma: self.sigma,
            eps_max_neg: self.eps_max_neg,
        }
    }
}

/// The fitted constants, written to the JSON sidecar next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightConstants {
    pub theta: f64,
    pub c1: f64,
    pub c2: f64,
    pub sigma: f64,
    pub eps_max_neg: f64,
}

/// Largest coarse-model error magnitude among the below-threshold samples;
/// zero when every sample clears the threshold.
pub fn eps_max_neg(samples: &[RawSample]) -> f64 {
    samples
        .iter()
        .filter(|s| s.g_coarse < 0.0)
        .filter_map(|s| s.error_estimate.map(f64::abs))
        .fold(0.0, f64::max)
}

/// Keep exactly the samples with `g_coarse >= -eps_max`.
pub fn accept(samples: &[RawSample], eps_max: f64) -> Vec<RawSample> {
    assert!(eps_max >= 0.0, "acceptance band must be nonnegative");
    samples
        .iter()
        .filter(|s| s.g_coarse >= -eps_max)
        .cloned()
        .collect()
}

/// Keep the fraction `q` of negative-band samples with the smallest
/// |g_coarse|; nonnegative samples always stay.
pub fn truncate_negative(samples: Vec<RawSample>, q: f64) -> Result<Vec<RawSample>, WeightError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(WeightError::InvalidTruncation(q));
    }
    if q == 1.0 {
        return Ok(samples);
    }
    let (mut negative, positive): (Vec<RawSample>, Vec<RawSample>) =
        samples.into_iter().partition(|s| s.g_coarse < 0.0);
    negative.sort_by(|a, b| a.g_coarse.abs().total_cmp(&b.g_coarse.abs()));
    let keep = ((q * negative.len() as f64).round() as usize).min(negative.len());
    negative.truncate(keep);
    let mut out = positive;
    out.extend(negative);
    Ok(out)
}

/// Closed-form optimal mixture coefficient for a two-group weighted
/// empirical distribution: `gamma = N1 * pi1`.
pub fn mixture_gamma(n1: usize, pi1: f64) -> f64 {
    n1 as f64 * pi1
}

/// Fit the piecewise weight rule: constant `c2` on `g >= 0`, half-normal
/// decay on the negative band, continuous at zero, with mass split
/// `theta : 1 - theta`.
pub fn fit_weights(accepted: &[RawSample], theta: f64) -> Result<WeightedDataset, WeightError> {
    if accepted.is_empty() {
        return Err(WeightError::Empty);
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(WeightError::InvalidTheta(theta));
    }
    let n = accepted.len();
    let n_pos = accepted.iter().filter(|s| s.g_coarse >= 0.0).count();
    if n_pos == 0 {
        return Err(WeightError::NoPositiveSamples);
    }
    let tau_neg: Vec<f64> = accepted
        .iter()
        .filter(|s| s.g_coarse < 0.0)
        .map(|s| s.g_coarse)
        .collect();
    let band = tau_neg.iter().fold(0.0_f64, |acc, t| acc.max(-t));

    if tau_neg.is_empty() {
        // Forced theta = 1: uniform weights, sigma undefined (recorded as 0).
        return Ok(WeightedDataset {
            samples: accepted.to_vec(),
            weights: vec![1.0 / n as f64; n],
            theta: 1.0,
            c1: 0.0,
            c2: 1.0 / n as f64,
            sigma: 0.0,
            eps_max_neg: 0.0,
        });
    }

    let c2 = theta / n_pos as f64;
    let needed = 1.0 - theta;
    let negative_mass = |sigma: f64| -> f64 {
        tau_neg
            .iter()
            .map(|t| c2 * (-t * t / (2.0 * sigma * sigma)).exp())
            .sum()
    };

    // The negative-band mass increases with sigma and saturates at c2 * N-.
    let max_mass = c2 * tau_neg.len() as f64;
    if max_mass <= needed {
        return Err(WeightError::BracketFailure { max_mass, needed });
    }

    // Upper end of the bracket from the saturation bound.
    let alpha = (-0.5 / ((1.0 - theta) / max_mass).ln()).sqrt();
    let mut hi = alpha * band;
    let mut lo = 0.0;
    let mut widen = 0;
    while negative_mass(hi) < needed {
        hi *= 2.0;
        widen += 1;
        if widen > 8 {
            return Err(WeightError::BracketFailure {
                max_mass: negative_mass(hi),
                needed,
            });
        }
    }
    // Tolerance is relative to sigma: the mass equation's slope grows like
    // 1/sigma, so an absolute floor would leave a visible residual when the
    // band is narrow.
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if negative_mass(mid) < needed {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.5 * (lo + hi);

    // Raw weights follow the piecewise rule; the residual of the bisection is
    // folded into a final normalization that keeps the positive mass exactly
    // theta.
    let raw_neg_total = negative_mass(sigma);
    let neg_rescale = needed / raw_neg_total;
    let mut weights = Vec::with_capacity(n);
    for s in accepted {
        if s.g_coarse >= 0.0 {
            weights.push(c2);
        } else {
            let t = s.g_coarse;
            weights.push(neg_rescale * c2 * (-t * t / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    // Effective continuity constant consistent with the stored weights.
    let c1 =
        neg_rescale / total * c2 * sigma * std::f64::consts::PI.sqrt() / std::f64::consts::SQRT_2;

    Ok(WeightedDataset {
        samples: accepted.to_vec(),
        weights,
        theta,
        c1,
        c2: c2 / total,
        sigma,
        eps_max_neg: band,
    })
}

/// Half-normal density used by the negative-band weights.
pub fn half_normal_pdf(tau: f64, sigma: f64) -> f64 {
    std::f64::consts::SQRT_2 / (sigma * std::f64::consts::PI.sqrt())
        * (-tau * tau / (2.0 * sigma * sigma)).exp()
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// Write samples as CSV with header `y_1,..,y_n,g_coarse,error_estimate[,weight]`.
pub fn write_samples_csv<W: Write>(
    writer: W,
    samples: &[RawSample],
    weights: Option<&[f64]>,
) -> Result<(), WeightError> {
    let dim = samples.first().map(|s| s.y.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=dim).map(|i| format!("y_{i}")).collect();
    header.push("g_coarse".into());
    header.push("error_estimate".into());
    if weights.is_some() {
        header.push("weight".into());
    }
    w.write_record(&header)?;
    for (i, s) in samples.iter().enumerate() {
        let mut record: Vec<String> = s.y.iter().map(|v| format!("{v}")).collect();
        record.push(format!("{}", s.g_coarse));
        record.push(s.error_estimate.map(|e| format!("{e}")).unwrap_or_default());
        if let Some(ws) = weights {
            record.push(format!("{}", ws[i]));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset CSV written by [`write_samples_csv`].
pub fn read_samples_csv<R: Read>(
    reader: R,
) -> Result<(Vec<RawSample>, Option<Vec<f64>>), WeightError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let has_weight = header.iter().next_back() == Some("weight");
    let dim = header.len() - 2 - usize::from(has_weight);
    for (j, name) in header.iter().take(dim).enumerate() {
        if name != format!("y_{}", j + 1) {
            return Err(WeightError::Format(format!(
                "unexpected column '{name}' where 'y_{}' was expected",
                j + 1
            )));
        }
    }
    if header.iter().nth(dim) != Some("g_coarse")
        || header.iter().nth(dim + 1) != Some("error_estimate")
    {
        return Err(WeightError::Format(
            "expected g_coarse,error_estimate columns".into(),
        ));
    }

    let parse = |field: &str, what: &str| -> Result<f64, WeightError> {
        field
            .parse::<f64>()
            .map_err(|_| WeightError::Format(format!("bad {what}: '{field}'")))
    };

    let mut samples = Vec::new();
    let mut weights = if has_weight { Some(Vec::new()) } else { None };
    for row in rdr.records() {
        let row = row?;
        if row.len() != header.len() {
            return Err(WeightError::Format("ragged CSV row".into()));
        }
        let y = (0..dim)
            .map(|j| parse(&row[j], "coordinate"))
            .collect::<Result<Vec<_>, _>>()?;
        let g_coarse = parse(&row[dim], "g_coarse")?;
        let err_field = &row[dim + 1];
        let error_estimate = if err_field.is_empty() {
            None
        } else {
            Some(parse(err_field, "error_estimate")?)
        };
        samples.push(RawSample {
            y,
            g_coarse,
            error_estimate,
        });
        if let Some(ws) = &mut weights {
            ws.push(parse(&row[dim + 2], "weight")?);
        }
    }
    Ok((samples, weights))
}

pub fn write_dataset_files(
    dataset: &WeightedDataset,
    csv_path: &Path,
    sidecar_path: &Path,
) -> Result<(), WeightError> {
    let file = std::fs::File::create(csv_path)?;
    write_samples_csv(file, &dataset.samples, Some(&dataset.weights))?;
    std::fs::write(
        sidecar_path,
        serde_json::to_string_pretty(&dataset.constants())?,
    )?;
    Ok(())
}

pub fn read_dataset_files(
    csv_path: &Path,
    sidecar_path: &Path,
) -> Result<WeightedDataset, WeightError> {
    let file = std::fs::File::open(csv_path)?;
    let (samples, weights) = read_samples_csv(file)?;
    let weights = weights
        .ok_or_else(|| WeightError::Format("dataset CSV is missing the weight column".into()))?;
    let constants: WeightConstants = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    Ok(WeightedDataset {
        samples,
        weights,
        theta: constants.theta,
        c1: constants.c1,
        c2: constants.c2,
        sigma: constants.sigma,
        eps_max_neg: constants.eps_max_neg,
    })
}
