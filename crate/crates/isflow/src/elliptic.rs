//! One-dimensional log-normal elliptic testbed.
//!
//! The random diffusion coefficient is the truncated Karhunen-Loeve expansion
//! of the exponential covariance kernel on [0, 1]. The solution of
//! `-(e^a u')' = 1` with homogeneous Dirichlet data has a closed form, so both
//! models are quadrature pipelines: the coarse model interpolates the
//! eigenfunctions on a few equidistant linear elements and integrates by the
//! left-endpoint rectangle rule, the fine model uses composite
//! Gauss-Lobatto-Legendre quadrature on 64 elements.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::weighting::RawSample;

#[derive(Debug, Error)]
pub enum EllipticError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("root bracketing failed: {0}")]
    RootSearch(String),
    #[error("overflow while exponentiating the random field (sample flagged)")]
    FieldOverflow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

/// Legendre polynomial value and derivative at `x` by the three-term
/// recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 2..=n {
        let kf = k as f64;
        let p_next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = p_next;
    }
    // (1 - x^2) P_n' = n (P_{n-1} - x P_n)
    let dp = if (1.0 - x * x).abs() > 1e-300 {
        n as f64 * (p_prev - x * p) / (1.0 - x * x)
    } else {
        0.0
    };
    (p, dp)
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Gauss-Lobatto-Legendre nodes and weights on [-1, 1] (`q >= 2` points).
pub fn gauss_lobatto_legendre(q: usize) -> Result<(Vec<f64>, Vec<f64>), EllipticError> {
    if q < 2 {
        return Err(EllipticError::InvalidConfig(
            "GLL order must be >= 2".into(),
        ));
    }
    let n = q - 1;
    let mut nodes = vec![-1.0];
    // Interior nodes are the roots of P'_{q-1}: locate by sign scan, refine by
    // bisection.
    let probes = 2000 * q;
    let dp_at = |x: f64| legendre(n, x).1;
    let mut prev_x = -1.0 + 1e-9;
    let mut prev_f = dp_at(prev_x);
    for k in 1..=probes {
        let x = -1.0 + 2.0 * (k as f64 / probes as f64) - 1e-9;
        let f = dp_at(x);
        if prev_f == 0.0 {
            nodes.push(prev_x);
        } else if prev_f * f < 0.0 {
            let (mut lo, mut hi) = (prev_x, x);
            let mut flo = prev_f;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let fm = dp_at(mid);
                if flo * fm <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
                if hi - lo < 1e-16 {
                    break;
                }
            }
            nodes.push(0.5 * (lo + hi));
        }
        prev_x = x;
        prev_f = f;
    }
    nodes.push(1.0);
    if nodes.len() != q {
        return Err(EllipticError::RootSearch(format!(
            "expected {} interior GLL nodes, found {}",
            q - 2,
            nodes.len() - 2
        )));
    }
    let weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (p, _) = legendre(n, x);
            2.0 / (q as f64 * n as f64 * p * p)
        })
        .collect();
    Ok((nodes, weights))
}

/// Cumulative integration matrix on a nodal set: `cum[i][j]` integrates the
/// j-th Lagrange basis polynomial from the first node to node i. Segment
/// integrals use Gauss-Legendre, exact for the interpolating polynomial.
fn cumulative_matrix(nodes: &[f64]) -> Array2<f64> {
    let q = nodes.len();
    let mut bary = vec![1.0; q];
    for j in 0..q {
        for k in 0..q {
            if k != j {
                bary[j] /= nodes[j] - nodes[k];
            }
        }
    }
    let basis_at = |t: f64| -> Vec<f64> {
        let mut values = vec![0.0; q];
        let mut denom = 0.0;
        for (j, &xj) in nodes.iter().enumerate() {
            let term = bary[j] / (t - xj);
            values[j] = term;
            denom += term;
        }
        for v in &mut values {
            *v /= denom;
        }
        values
    };

    let (gl_nodes, gl_weights) = gauss_legendre(q + 4);
    let mut cum = Array2::zeros((q, q));
    for i in 1..q {
        let (a, b) = (nodes[i - 1], nodes[i]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut seg = vec![0.0; q];
        for (&t, &w) in gl_nodes.iter().zip(gl_weights.iter()) {
            let basis = basis_at(mid + half * t);
            for j in 0..q {
                seg[j] += w * half * basis[j];
            }
        }
        for j in 0..q {
            cum[(i, j)] = cum[(i - 1, j)] + seg[j];
        }
    }
    cum
}

// ---------------------------------------------------------------------------
// Karhunen-Loeve expansion of the exponential kernel
// ---------------------------------------------------------------------------

/// One eigenpair: the transcendental root, the eigenvalue, and the
/// eigenfunction normalization constant.
#[derive(Debug, Clone)]
pub struct KlMode {
    pub root: f64,
    pub eigenvalue: f64,
    pub norm_const: f64,
}

#[derive(Debug, Clone)]
pub struct KlExpansion {
    pub correlation_length: f64,
    pub modes: Vec<KlMode>,
}

fn kl_equation(v: f64, eps: f64) -> f64 {
    (v * v - eps * eps) * v.tan() - 2.0 * eps * v
}

/// The M smallest positive roots of `(v^2 - eps^2) tan v = 2 eps v` with the
/// derived eigenvalues `lambda = 2 eps / (v^2 + eps^2)`.
pub fn kl_eigenpairs(l_c: f64, m: usize) -> Result<KlExpansion, EllipticError> {
    if !(l_c > 0.0) {
        return Err(EllipticError::InvalidConfig(format!(
            "correlation length must be positive, got {l_c}"
        )));
    }
    if m < 1 {
        return Err(EllipticError::InvalidConfig(
            "need at least one mode".into(),
        ));
    }
    let eps = 1.0 / l_c;
    let delta = 1e-9;
    let pi = std::f64::consts::PI;

    let mut roots: Vec<f64> = Vec::with_capacity(m);
    let max_intervals = 4 * m + (eps / pi) as usize + 64;
    'intervals: for k in 0..max_intervals {
        let lo = k as f64 * pi + delta;
        let hi = (k + 1) as f64 * pi - delta;
        // Split at the tangent pole and at the sign change of (v^2 - eps^2).
        let mut cuts = vec![
            lo,
            k as f64 * pi + 0.5 * pi - delta,
            k as f64 * pi + 0.5 * pi + delta,
            hi,
        ];
        if eps > lo && eps < hi {
            cuts.push(eps - delta);
            cuts.push(eps + delta);
        }
        cuts.sort_by(f64::total_cmp);
        for pair in cuts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b <= a {
                continue;
            }
            // Skip the sliver that straddles the pole.
            let pole = k as f64 * pi + 0.5 * pi;
            if a < pole && pole < b {
                continue;
            }
            let probes = 10_000usize;
            let mut prev = a;
            let mut f_prev = kl_equation(prev, eps);
            for p in 1..=probes {
                let x = a + (b - a) * p as f64 / probes as f64;
                let f = kl_equation(x, eps);
                if f_prev == 0.0 {
                    roots.push(prev);
                } else if f_prev * f < 0.0 {
                    let (mut lo_b, mut hi_b) = (prev, x);
                    let mut f_lo = f_prev;
                    for _ in 0..200 {
                        let mid = 0.5 * (lo_b + hi_b);
                        let fm = kl_equation(mid, eps);
                        if f_lo * fm <= 0.0 {
                            hi_b = mid;
                        } else {
                            lo_b = mid;
                            f_lo = fm;
                        }
                        if hi_b - lo_b <= 1e-15 * hi_b.max(1.0) {
                            break;
                        }
                    }
                    roots.push(0.5 * (lo_b + hi_b));
                    if roots.len() == m {
                        break 'intervals;
                    }
                }
                prev = x;
                f_prev = f;
            }
        }
    }

    if roots.len() < m {
        return Err(EllipticError::RootSearch(format!(
            "found only {} of {m} roots for l_c = {l_c} (eps = {eps}); scanned {} intervals",
            roots.len(),
            max_intervals
        )));
    }

    let modes = roots
        .into_iter()
        .map(|v| {
            let eigenvalue = 2.0 * eps / (v * v + eps * eps);
            // L2 normalizer of v cos(vx) + eps sin(vx) on [0, 1].
            let denom = 0.5 * (eps * eps + v * v)
                + (v * v - eps * eps) * (2.0 * v).sin() / (4.0 * v)
                + 0.5 * eps * (1.0 - (2.0 * v).cos());
            KlMode {
                root: v,
                eigenvalue,
                norm_const: 1.0 / denom.sqrt(),
            }
        })
        .collect();

    Ok(KlExpansion {
        correlation_length: l_c,
        modes,
    })
}

impl KlExpansion {
    pub fn truncation(&self) -> usize {
        self.modes.len()
    }

    /// Normalized eigenfunction `theta_i(x)` (0-based mode index).
    pub fn eigenfunction(&self, i: usize, x: f64) -> f64 {
        let eps = 1.0 / self.correlation_length;
        let mode = &self.modes[i];
        let v = mode.root;
        mode.norm_const * (v * (v * x).cos() + eps * (v * x).sin())
    }

    /// Random field at `x` for the given standard-normal coordinates.
    pub fn field(&self, xi: &[f64], x: f64) -> f64 {
        assert_eq!(xi.len(), self.modes.len());
        xi.iter()
            .enumerate()
            .map(|(i, &c)| self.modes[i].eigenvalue.sqrt() * self.eigenfunction(i, x) * c)
            .sum()
    }

    /// Spectrum as CSV rows `i,v_i,lambda_i` (1-based mode index).
    pub fn write_spectrum_csv<W: std::io::Write>(&self, writer: W) -> Result<(), EllipticError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "v_i", "lambda_i"])?;
        for (i, mode) in self.modes.iter().enumerate() {
            w.write_record(&[
                (i + 1).to_string(),
                format!("{}", mode.root),
                format!("{}", mode.eigenvalue),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Discretizations and QoI
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Full H1 norm: (L2 part + derivative part)^(1/2).
    Full,
    /// Derivative part only. This is the reading that reproduces the
    /// reference exceedance probabilities, so it is the default; `full` is
    /// kept as an auditable alternative.
    #[default]
    Seminorm,
}

#[derive(Debug, Clone, Copy)]
pub struct CoarseConfig {
    pub elements: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FineConfig {
    pub elements: usize,
    pub gll_points: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscretizationConfig {
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        DiscretizationConfig {
            coarse: CoarseConfig { elements: 10 },
            fine: FineConfig {
                elements: 64,
                gll_points: 8,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFidelity {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy)]
pub struct QoiResult {
    pub h1_norm: f64,
    /// `h1_norm - threshold`.
    pub g: f64,
    pub fidelity: ModelFidelity,
}

/// The testbed with both discretizations precomputed for a fixed expansion
/// and threshold. QoI evaluations are pure per input and safe to run in
/// parallel.
#[derive(Debug, Clone)]
pub struct EllipticProblem {
    pub expansion: KlExpansion,
    pub threshold: f64,
    pub norm_kind: NormKind,
    coarse_nodes: Vec<f64>,
    coarse_h: f64,
    /// sqrt(lambda_i) * theta_i at the coarse nodes, (modes x nodes).
    coarse_basis: Array2<f64>,
    fine_nodes: Vec<f64>,
    fine_h: f64,
    fine_q: usize,
    fine_elements: usize,
    fine_gll_w: Vec<f64>,
    fine_cum: Array2<f64>,
    fine_basis: Array2<f64>,
}

impl EllipticProblem {
    pub fn new(
        expansion: KlExpansion,
        threshold: f64,
        disc: &DiscretizationConfig,
        norm_kind: NormKind,
    ) -> Result<Self, EllipticError> {
        if disc.coarse.elements < 1 || disc.fine.elements < 1 {
            return Err(EllipticError::InvalidConfig(
                "element counts must be >= 1".into(),
            ));
        }
        let (ref_nodes, gll_w) = gauss_lobatto_legendre(disc.fine.gll_points)?;
        let cum = cumulative_matrix(&ref_nodes);

        let nc = disc.coarse.elements;
        let coarse_h = 1.0 / nc as f64;
        let coarse_nodes: Vec<f64> = (0..nc).map(|k| k as f64 * coarse_h).collect();

        let nf = disc.fine.elements;
        let fine_h = 1.0 / nf as f64;
        let q = disc.fine.gll_points;
        let mut fine_nodes = Vec::with_capacity(nf * q);
        for el in 0..nf {
            let left = el as f64 * fine_h;
            for &xi in &ref_nodes {
                fine_nodes.push(left + 0.5 * fine_h * (xi + 1.0));
            }
        }

        let m = expansion.truncation();
        let basis_at = |nodes: &[f64]| -> Array2<f64> {
            let mut basis = Array2::zeros((m, nodes.len()));
            for i in 0..m {
                let scale = expansion.modes[i].eigenvalue.sqrt();
                for (k, &x) in nodes.iter().enumerate() {
                    basis[(i, k)] = scale * expansion.eigenfunction(i, x);
                }
            }
            basis
        };
        let coarse_basis = basis_at(&coarse_nodes);
        let fine_basis = basis_at(&fine_nodes);

        Ok(EllipticProblem {
            expansion,
            threshold,
            norm_kind,
            coarse_nodes,
            coarse_h,
            coarse_basis,
            fine_nodes,
            fine_h,
            fine_q: q,
            fine_elements: nf,
            fine_gll_w: gll_w,
            fine_cum: cum,
            fine_basis,
        })
    }

    pub fn dimension(&self) -> usize {
        self.expansion.truncation()
    }

    fn field_at(&self, basis: &Array2<f64>, xi: &[f64], out: &mut Vec<f64>) {
        let nodes = basis.ncols();
        out.clear();
        out.resize(nodes, 0.0);
        for (i, &c) in xi.iter().enumerate() {
            let row = basis.row(i);
            for (k, value) in out.iter_mut().enumerate() {
                *value += c * row[k];
            }
        }
    }

    fn finish_norm(&self, l2_sq: f64, semi_sq: f64, fidelity: ModelFidelity) -> QoiResult {
        let h1_norm = match self.norm_kind {
            NormKind::Full => (l2_sq + semi_sq).sqrt(),
            NormKind::Seminorm => semi_sq.sqrt(),
        };
        QoiResult {
            h1_norm,
            g: h1_norm - self.threshold,
            fidelity,
        }
    }

    /// Fine QoI: closed-form solution evaluated by composite GLL quadrature.
    pub fn qoi_fine(&self, xi: &[f64]) -> Result<QoiResult, EllipticError> {
        assert_eq!(xi.len(), self.dimension());
        let mut a = Vec::new();
        self.field_at(&self.fine_basis, xi, &mut a);
        let mut e = a;
        for v in &mut e {
            *v = (-*v).exp();
            if !v.is_finite() {
                return Err(EllipticError::FieldOverflow);
            }
        }

        let q = self.fine_q;
        let half = 0.5 * self.fine_h;
        let mut den = 0.0;
        let mut num = 0.0;
        for el in 0..self.fine_elements {
            for j in 0..q {
                let idx = el * q + j;
                let w = self.fine_gll_w[j] * half;
                den += w * e[idx];
                num += w * self.fine_nodes[idx] * e[idx];
            }
        }
        let gamma = num / den;

        let du: Vec<f64> = e
            .iter()
            .zip(self.fine_nodes.iter())
            .map(|(&ev, &x)| ev * (gamma - x))
            .collect();

        // Cumulative integration of u' gives u at every node.
        let mut l2_sq = 0.0;
        let mut semi_sq = 0.0;
        let mut u_left = 0.0;
        for el in 0..self.fine_elements {
            let base = el * q;
            for i in 0..q {
                let mut cumulative = 0.0;
                for j in 0..q {
                    cumulative += self.fine_cum[(i, j)] * du[base + j];
                }
                let u = u_left + half * cumulative;
                let w = self.fine_gll_w[i] * half;
                l2_sq += w * u * u;
                semi_sq += w * du[base + i] * du[base + i];
            }
            let mut full = 0.0;
            for j in 0..q {
                full += self.fine_cum[(q - 1, j)] * du[base + j];
            }
            u_left += half * full;
        }

        Ok(self.finish_norm(l2_sq, semi_sq, ModelFidelity::Fine))
    }

    /// Coarse QoI: the same closed-form pipeline with every integral replaced
    /// by the left-endpoint rectangle rule on the coarse mesh. The mesh nodes
    /// are interpolation points of the eigenfunctions, so the interpolated
    /// field coincides with the exact one there.
    pub fn qoi_coarse(&self, xi: &[f64]) -> Result<QoiResult, EllipticError> {
        assert_eq!(xi.len(), self.dimension());
        let mut a = Vec::new();
        self.field_at(&self.coarse_basis, xi, &mut a);
        let mut e = a;
        for v in &mut e {
            *v = (-*v).exp();
            if !v.is_finite() {
                return Err(EllipticError::FieldOverflow);
            }
        }

        let mut den = 0.0;
        let mut num = 0.0;
        for (k, &ev) in e.iter().enumerate() {
            den += ev;
            num += self.coarse_nodes[k] * ev;
        }
        let gamma = num / den;

        let h = self.coarse_h;
        let mut l2_sq = 0.0;
        let mut semi_sq = 0.0;
        let mut u = 0.0;
        let mut prev_du = 0.0;
        for (k, &ev) in e.iter().enumerate() {
            let du = ev * (gamma - self.coarse_nodes[k]);
            if k > 0 {
                u += h * prev_du;
            }
            l2_sq += h * u * u;
            semi_sq += h * du * du;
            prev_du = du;
        }

        Ok(self.finish_norm(l2_sq, semi_sq, ModelFidelity::Coarse))
    }

    /// Fine-model exceedance indicator. An overflowing field makes the norm
    /// arbitrarily large, so such samples count as exceedances.
    pub fn fine_indicator(&self, xi: &[f64]) -> bool {
        match self.qoi_fine(xi) {
            Ok(q) => q.g >= 0.0,
            Err(_) => true,
        }
    }

    /// Draw `count` standard-normal coordinate vectors and evaluate the
    /// coarse QoI (and the fine one when `with_fine`, which supplies the
    /// error estimate). Deterministic given the rng state.
    pub fn sample_rom<R: Rng>(
        &self,
        count: usize,
        rng: &mut R,
        with_fine: bool,
    ) -> Result<Vec<RawSample>, EllipticError> {
        if count < 1 {
            return Err(EllipticError::InvalidConfig(
                "sample count must be >= 1".into(),
            ));
        }
        let m = self.dimension();
        let draws: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                (0..m)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect()
            })
            .collect();
        draws
            .into_par_iter()
            .map(|xi| {
                let coarse = self.qoi_coarse(&xi)?;
                let error_estimate = if with_fine {
                    let fine = self.qoi_fine(&xi)?;
                    Some(coarse.g - fine.g)
                } else {
                    None
                };
                Ok(RawSample {
                    y: xi,
                    g_coarse: coarse.g,
                    error_estimate,
                })
            })
            .collect()
    }
}
