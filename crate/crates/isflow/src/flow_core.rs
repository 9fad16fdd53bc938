//! Invertible multi-layer mapping with explicit log-density.
//!
//! The model stacks general coupling layers. Each layer applies a trainable
//! per-coordinate scale and bias to its input, then an affine coupling step:
//! one block of coordinates passes through unchanged while the other block is
//! scaled and shifted by functions of the first block, so the Jacobian stays
//! triangular and the inverse is closed-form. Consecutive layers swap which
//! block is passive so every coordinate gets updated.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::parallel_matmul;

/// Wire-format identifier for serialized models.
pub const MODEL_FORMAT: &str = "isflow-flow-model";
/// Current model document version.
pub const MODEL_VERSION: u32 = 1;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid model dimensions: {0}")]
    InvalidDimensions(String),
    #[error("non-finite intermediate in coupling layer {layer}")]
    NonFinite { layer: usize },
    #[error("singular scale-bias in layer {layer}: a[{index}] = 0")]
    SingularScale { layer: usize, index: usize },
    #[error("model document error: {0}")]
    Document(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// How the coordinates are split into the passive and active blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    FirstHalf,
    OddEven,
    Permutation { indices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionScheme {
    #[serde(flatten)]
    pub kind: PartitionKind,
    /// Total dimension.
    pub n: usize,
    /// Passive-block size.
    pub m: usize,
}

impl PartitionScheme {
    pub fn first_half(n: usize) -> Result<Self, FlowError> {
        if n < 2 {
            return Err(FlowError::InvalidDimensions(format!(
                "partition needs n >= 2, got {n}"
            )));
        }
        Ok(PartitionScheme {
            kind: PartitionKind::FirstHalf,
            n,
            m: n / 2,
        })
    }

    pub fn odd_even(n: usize) -> Result<Self, FlowError> {
        if n < 2 {
            return Err(FlowError::InvalidDimensions(format!(
                "partition needs n >= 2, got {n}"
            )));
        }
        Ok(PartitionScheme {
            kind: PartitionKind::OddEven,
            n,
            m: n / 2,
        })
    }

    /// Arbitrary partition: the first `m` listed indices form the passive block.
    pub fn permutation(indices: Vec<usize>, m: usize) -> Result<Self, FlowError> {
        let n = indices.len();
        if n < 2 || m == 0 || m >= n {
            return Err(FlowError::InvalidDimensions(format!(
                "permutation partition needs 0 < m < n, got m={m}, n={n}"
            )));
        }
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || seen[i] {
                return Err(FlowError::InvalidDimensions(
                    "permutation must list each coordinate exactly once".into(),
                ));
            }
            seen[i] = true;
        }
        Ok(PartitionScheme {
            kind: PartitionKind::Permutation { indices },
            n,
            m,
        })
    }

    /// Base (passive, active) index sets, before any per-layer role swap.
    pub fn blocks(&self) -> (Vec<usize>, Vec<usize>) {
        match &self.kind {
            PartitionKind::FirstHalf => ((0..self.m).collect(), (self.m..self.n).collect()),
            PartitionKind::OddEven => {
                let evens: Vec<usize> = (0..self.n).step_by(2).collect();
                let odds: Vec<usize> = (1..self.n).step_by(2).collect();
                // The smaller parity class is passive; evens win the tie.
                if evens.len() == self.m {
                    (evens, odds)
                } else {
                    (odds, evens)
                }
            }
            PartitionKind::Permutation { indices } => {
                (indices[..self.m].to_vec(), indices[self.m..].to_vec())
            }
        }
    }

    fn validate(&self) -> Result<(), FlowError> {
        match &self.kind {
            PartitionKind::FirstHalf | PartitionKind::OddEven => {
                if self.m != self.n / 2 {
                    return Err(FlowError::InvalidDimensions(format!(
                        "fixed partitions require m = n/2, got m={}, n={}",
                        self.m, self.n
                    )));
                }
            }
            PartitionKind::Permutation { indices } => {
                Self::permutation(indices.clone(), self.m)?;
            }
        }
        let (p, a) = self.blocks();
        let mut seen = vec![false; self.n];
        for &i in p.iter().chain(a.iter()) {
            if seen[i] {
                return Err(FlowError::InvalidDimensions(
                    "overlapping partition blocks".into(),
                ));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(FlowError::InvalidDimensions(
                "partition does not cover all coordinates".into(),
            ));
        }
        Ok(())
    }
}

/// Dense two-hidden-layer network producing the concatenated (raw log-scale,
/// shift) for the active block.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Mlp {
    /// Forward pass; returns (h1, h2, out) so callers can keep what they need.
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut h1 = parallel_matmul(x, &self.w1);
        h1 += &self.b1;
        h1.mapv_inplace(f64::tanh);
        let mut h2 = parallel_matmul(&h1, &self.w2);
        h2 += &self.b2;
        h2.mapv_inplace(f64::tanh);
        let mut out = parallel_matmul(&h2, &self.w_out);
        out += &self.b_out;
        (h1, h2, out)
    }
}

/// One general coupling layer: scale-bias on the input followed by the
/// affine coupling update of the active block.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    /// Per-coordinate scale applied to the layer input (`a` on the wire).
    pub scale: Vec<f64>,
    /// Per-coordinate shift applied to the layer input (`b` on the wire).
    pub bias: Vec<f64>,
    /// Whether this layer exchanges the passive and active blocks.
    pub swapped: bool,
    pub mlp: Mlp,
    passive: Arc<Vec<usize>>,
    active: Arc<Vec<usize>>,
}

impl CouplingLayer {
    pub fn passive_indices(&self) -> &Arc<Vec<usize>> {
        &self.passive
    }

    pub fn active_indices(&self) -> &Arc<Vec<usize>> {
        &self.active
    }
}

/// The invertible map with a standard-normal prior on the output.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub dimension: usize,
    pub partition: PartitionScheme,
    /// Bound on the effective log-scale: log s = s_max * tanh(raw / s_max).
    pub s_max: f64,
    /// When set, the scale of the affine step is pinned to 1 and only the
    /// shift is learned.
    pub fix_scale: bool,
    pub layers: Vec<CouplingLayer>,
}

/// Construction parameters for [`build_model`].
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub dimension: usize,
    pub depth: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub partition: PartitionScheme,
    pub s_max: f64,
    pub fix_scale: bool,
}

impl FlowConfig {
    pub fn new(
        dimension: usize,
        depth: usize,
        hidden1: usize,
        hidden2: usize,
    ) -> Result<Self, FlowError> {
        Ok(FlowConfig {
            dimension,
            depth,
            hidden1,
            hidden2,
            partition: PartitionScheme::first_half(dimension)?,
            s_max: 2.0,
            fix_scale: false,
        })
    }

    pub fn with_partition(mut self, partition: PartitionScheme) -> Self {
        self.partition = partition;
        self
    }
}

/// Build a model whose layers start as the identity (zero-initialized MLP
/// output) on top of a scale-bias that whitens `init_data` when provided.
pub fn build_model<R: Rng>(
    config: &FlowConfig,
    init_data: Option<&Array2<f64>>,
    rng: &mut R,
) -> Result<FlowModel, FlowError> {
    let n = config.dimension;
    if n < 2 {
        return Err(FlowError::InvalidDimensions(format!(
            "dimension must be >= 2, got {n}"
        )));
    }
    if config.depth < 1 {
        return Err(FlowError::InvalidDimensions("depth must be >= 1".into()));
    }
    if config.hidden1 < 1 || config.hidden2 < 1 {
        return Err(FlowError::InvalidDimensions(
            "hidden widths must be >= 1".into(),
        ));
    }
    if config.partition.n != n {
        return Err(FlowError::InvalidDimensions(format!(
            "partition dimension {} does not match model dimension {n}",
            config.partition.n
        )));
    }
    if !(config.s_max > 0.0) {
        return Err(FlowError::InvalidDimensions(
            "s_max must be positive".into(),
        ));
    }
    config.partition.validate()?;
    if let Some(data) = init_data {
        if data.ncols() != n || data.nrows() == 0 {
            return Err(FlowError::InvalidDimensions(format!(
                "init data must be non-empty with {n} columns"
            )));
        }
    }

    let (base_passive, base_active) = config.partition.blocks();
    let base_passive = Arc::new(base_passive);
    let base_active = Arc::new(base_active);

    // Whitening is applied sequentially: each layer normalizes the data as
    // mapped by the layers built before it.
    let mut mapped = init_data.map(|d| d.to_owned());

    let mut layers = Vec::with_capacity(config.depth);
    for index in 0..config.depth {
        let swapped = index % 2 == 1;
        let (passive, active) = if swapped {
            (Arc::clone(&base_active), Arc::clone(&base_passive))
        } else {
            (Arc::clone(&base_passive), Arc::clone(&base_active))
        };
        let p = passive.len();
        let q = active.len();

        let (scale, bias) = match &mut mapped {
            Some(data) => {
                let rows = data.nrows() as f64;
                let mut scale = vec![1.0; n];
                let mut bias = vec![0.0; n];
                for j in 0..n {
                    let col = data.column(j);
                    let mean = col.sum() / rows;
                    let var = col.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / rows;
                    let std = var.sqrt();
                    if std.is_finite() && std > 1e-12 {
                        scale[j] = 1.0 / std;
                        bias[j] = -mean / std;
                    } else {
                        scale[j] = 1.0;
                        bias[j] = -mean;
                    }
                }
                for mut row in data.rows_mut() {
                    for j in 0..n {
                        row[j] = row[j] * scale[j] + bias[j];
                    }
                }
                (scale, bias)
            }
            None => (vec![1.0; n], vec![0.0; n]),
        };

        let mlp = Mlp {
            w1: uniform_init(rng, p, config.hidden1),
            b1: Array1::zeros(config.hidden1),
            w2: uniform_init(rng, config.hidden1, config.hidden2),
            b2: Array1::zeros(config.hidden2),
            w_out: Array2::zeros((config.hidden2, 2 * q)),
            b_out: Array1::zeros(2 * q),
        };

        layers.push(CouplingLayer {
            scale,
            bias,
            swapped,
            mlp,
            passive,
            active,
        });
    }

    Ok(FlowModel {
        dimension: n,
        partition: config.partition.clone(),
        s_max: config.s_max,
        fix_scale: config.fix_scale,
        layers,
    })
}

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Replace the zero-initialized MLP output layers with Gaussian noise.
/// Useful to start training visibly away from the identity.
pub fn randomize_output_layers<R: Rng>(model: &mut FlowModel, std: f64, rng: &mut R) {
    for layer in &mut model.layers {
        for w in layer.mlp.w_out.iter_mut() {
            *w = std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
        for b in layer.mlp.b_out.iter_mut() {
            *b = std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }
}

/// Latent output, per-sample log|det|, and any per-layer traces.
type TracedForward = (Array2<f64>, Array1<f64>, Vec<LayerTrace>);

/// Per-layer forward intermediates kept for the input-gradient pass.
pub(crate) struct LayerTrace {
    pub active_in: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub log_scale: Array2<f64>,
    pub scale_exp: Array2<f64>,
}

impl FlowModel {
    fn gather(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((m.nrows(), idx.len()));
        for (j, &col) in idx.iter().enumerate() {
            out.column_mut(j).assign(&m.column(col));
        }
        out
    }

    /// Effective log-scale from the raw network output.
    fn squash_log_scale(&self, raw: &Array2<f64>) -> Array2<f64> {
        let s_max = self.s_max;
        raw.mapv(|r| s_max * (r / s_max).tanh())
    }

    pub(crate) fn forward_trace(
        &self,
        y: &Array2<f64>,
        keep: bool,
    ) -> Result<TracedForward, FlowError> {
        let rows = y.nrows();
        let mut current = y.to_owned();
        let mut logdet = Array1::zeros(rows);
        let mut traces = Vec::new();

        for (li, layer) in self.layers.iter().enumerate() {
            let mut shifted = current;
            for mut row in shifted.rows_mut() {
                for j in 0..self.dimension {
                    row[j] = row[j] * layer.scale[j] + layer.bias[j];
                }
            }
            let log_abs_scale: f64 = layer.scale.iter().map(|a| a.abs().ln()).sum();

            let x = Self::gather(&shifted, &layer.passive);
            let v = Self::gather(&shifted, &layer.active);
            let q = layer.active.len();

            let (h1, h2, out) = layer.mlp.forward(&x);
            let raw = out.slice(ndarray::s![.., ..q]).to_owned();
            let t = out.slice(ndarray::s![.., q..]).to_owned();
            let log_scale = if self.fix_scale {
                Array2::zeros(raw.raw_dim())
            } else {
                self.squash_log_scale(&raw)
            };
            let scale_exp = log_scale.mapv(f64::exp);

            let updated = &v * &scale_exp + &t;

            let mut next = Array2::zeros((rows, self.dimension));
            for (j, &col) in layer.passive.iter().enumerate() {
                next.column_mut(col).assign(&x.column(j));
            }
            for (j, &col) in layer.active.iter().enumerate() {
                next.column_mut(col).assign(&updated.column(j));
            }

            if next.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFinite { layer: li });
            }

            for (ld, ls_row) in logdet.iter_mut().zip(log_scale.rows()) {
                *ld += log_abs_scale + ls_row.sum();
            }

            if keep {
                traces.push(LayerTrace {
                    active_in: v,
                    h1,
                    h2,
                    log_scale,
                    scale_exp,
                });
            }
            current = next;
        }

        Ok((current, logdet, traces))
    }

    /// Map a batch of inputs forward; returns the latent matrix and the
    /// per-sample log|det| of the Jacobian.
    pub fn forward_batch(&self, y: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        let (z, logdet, _) = self.forward_trace(y, false)?;
        Ok((z, logdet))
    }

    pub fn forward(&self, y: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let input = Array2::from_shape_vec((1, y.len()), y.to_vec())
            .map_err(|e| FlowError::InvalidDimensions(e.to_string()))?;
        let (z, logdet) = self.forward_batch(&input)?;
        Ok((z.row(0).to_vec(), logdet[0]))
    }

    pub fn inverse_batch(&self, z: &Array2<f64>) -> Result<Array2<f64>, FlowError> {
        let rows = z.nrows();
        let mut current = z.to_owned();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if let Some(idx) = layer.scale.iter().position(|&a| a == 0.0) {
                return Err(FlowError::SingularScale {
                    layer: li,
                    index: idx,
                });
            }
            let x = Self::gather(&current, &layer.passive);
            let u = Self::gather(&current, &layer.active);
            let q = layer.active.len();

            let (_, _, out) = layer.mlp.forward(&x);
            let raw = out.slice(ndarray::s![.., ..q]).to_owned();
            let t = out.slice(ndarray::s![.., q..]).to_owned();
            let log_scale = if self.fix_scale {
                Array2::zeros(raw.raw_dim())
            } else {
                self.squash_log_scale(&raw)
            };
            let scale_exp = log_scale.mapv(f64::exp);
            let v = (&u - &t) / &scale_exp;

            let mut shifted = Array2::zeros((rows, self.dimension));
            for (j, &col) in layer.passive.iter().enumerate() {
                shifted.column_mut(col).assign(&x.column(j));
            }
            for (j, &col) in layer.active.iter().enumerate() {
                shifted.column_mut(col).assign(&v.column(j));
            }
            for mut row in shifted.rows_mut() {
                for j in 0..self.dimension {
                    row[j] = (row[j] - layer.bias[j]) / layer.scale[j];
                }
            }
            current = shifted;
        }
        Ok(current)
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>, FlowError> {
        let input = Array2::from_shape_vec((1, z.len()), z.to_vec())
            .map_err(|e| FlowError::InvalidDimensions(e.to_string()))?;
        Ok(self.inverse_batch(&input)?.row(0).to_vec())
    }

    pub fn log_density_batch(&self, y: &Array2<f64>) -> Result<Array1<f64>, FlowError> {
        let (z, logdet) = self.forward_batch(y)?;
        let n = self.dimension as f64;
        let mut out = Array1::zeros(y.nrows());
        for (i, (z_row, ld)) in z.rows().into_iter().zip(logdet.iter()).enumerate() {
            let quad: f64 = z_row.iter().map(|v| v * v).sum();
            out[i] = -0.5 * quad - 0.5 * n * LN_2PI + ld;
        }
        Ok(out)
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64, FlowError> {
        let input = Array2::from_shape_vec((1, y.len()), y.to_vec())
            .map_err(|e| FlowError::InvalidDimensions(e.to_string()))?;
        Ok(self.log_density_batch(&input)?[0])
    }

    /// Exact gradient of the log-density with respect to the inputs,
    /// one row per sample.
    pub fn grad_y_log_density_batch(&self, y: &Array2<f64>) -> Result<Array2<f64>, FlowError> {
        let rows = y.nrows();
        let (z, _, traces) = self.forward_trace(y, true)?;

        // d(log p)/dz from the prior term.
        let mut upstream = -&z;

        for (layer, trace) in self.layers.iter().zip(traces.iter()).rev() {
            let d_passive_direct = Self::gather(&upstream, &layer.passive);
            let d_active = Self::gather(&upstream, &layer.active);

            // Adjoint of the effective log-scale: the affine update contributes
            // d_active * v * s, the log-det term contributes 1 per entry.
            let d_t = d_active.clone();
            let d_v = &d_active * &trace.scale_exp;

            let d_x_mlp = if self.fix_scale {
                let d_out_t = d_t;
                let zeros = Array2::zeros(d_out_t.raw_dim());
                self.mlp_input_grad(layer, trace, &zeros, &d_out_t)
            } else {
                let mut d_log_scale = &d_active * &trace.active_in * &trace.scale_exp;
                d_log_scale += 1.0;
                let s_max = self.s_max;
                let d_raw = &d_log_scale
                    * &trace.log_scale.mapv(|ls| {
                        let t = ls / s_max;
                        1.0 - t * t
                    });
                self.mlp_input_grad(layer, trace, &d_raw, &d_t)
            };

            let d_x = &d_passive_direct + &d_x_mlp;

            let mut d_shifted = Array2::zeros((rows, self.dimension));
            for (j, &col) in layer.passive.iter().enumerate() {
                d_shifted.column_mut(col).assign(&d_x.column(j));
            }
            for (j, &col) in layer.active.iter().enumerate() {
                d_shifted.column_mut(col).assign(&d_v.column(j));
            }
            for mut row in d_shifted.rows_mut() {
                for j in 0..self.dimension {
                    row[j] *= layer.scale[j];
                }
            }
            upstream = d_shifted;
        }

        Ok(upstream)
    }

    fn mlp_input_grad(
        &self,
        layer: &CouplingLayer,
        trace: &LayerTrace,
        d_raw: &Array2<f64>,
        d_t: &Array2<f64>,
    ) -> Array2<f64> {
        let q = layer.active.len();
        let rows = d_raw.nrows();
        let mut d_out = Array2::zeros((rows, 2 * q));
        d_out.slice_mut(ndarray::s![.., ..q]).assign(d_raw);
        d_out.slice_mut(ndarray::s![.., q..]).assign(d_t);

        let d_h2 = parallel_matmul(&d_out, &layer.mlp.w_out.t().to_owned());
        let d_h2_pre = &d_h2 * &trace.h2.mapv(|h| 1.0 - h * h);
        let d_h1 = parallel_matmul(&d_h2_pre, &layer.mlp.w2.t().to_owned());
        let d_h1_pre = &d_h1 * &trace.h1.mapv(|h| 1.0 - h * h);
        parallel_matmul(&d_h1_pre, &layer.mlp.w1.t().to_owned())
    }

    pub fn grad_y_log_density(&self, y: &[f64]) -> Result<Vec<f64>, FlowError> {
        let input = Array2::from_shape_vec((1, y.len()), y.to_vec())
            .map_err(|e| FlowError::InvalidDimensions(e.to_string()))?;
        Ok(self.grad_y_log_density_batch(&input)?.row(0).to_vec())
    }

    /// Draw `count` samples by mapping prior draws through the inverse.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Result<Array2<f64>, FlowError> {
        if count == 0 {
            return Err(FlowError::InvalidDimensions(
                "sample count must be >= 1".into(),
            ));
        }
        let z = Array2::from_shape_fn((count, self.dimension), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        self.inverse_batch(&z)
    }

    /// Sanity checks of the structural invariants.
    pub fn validate(&self) -> Result<(), FlowError> {
        self.partition.validate()?;
        for (li, layer) in self.layers.iter().enumerate() {
            if let Some(idx) = layer.scale.iter().position(|&a| a == 0.0) {
                return Err(FlowError::SingularScale {
                    layer: li,
                    index: idx,
                });
            }
            if layer.scale.len() != self.dimension || layer.bias.len() != self.dimension {
                return Err(FlowError::InvalidDimensions(format!(
                    "layer {li} scale-bias length mismatch"
                )));
            }
            let q = layer.active.len();
            if layer.mlp.w_out.ncols() != 2 * q || layer.mlp.b_out.len() != 2 * q {
                return Err(FlowError::InvalidDimensions(format!(
                    "layer {li} output width must be 2 * active block size"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    a: Vec<f64>,
    b: Vec<f64>,
    swapped: bool,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    w_out: Vec<Vec<f64>>,
    b_out: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    dimension: usize,
    depth: usize,
    partition: PartitionScheme,
    s_max: f64,
    fix_scale: bool,
    layers: Vec<LayerDoc>,
}

fn mat_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_to_mat(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>, FlowError> {
    if rows.is_empty() {
        return Err(FlowError::Document(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(FlowError::Document(format!("{what}: ragged matrix rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|e| FlowError::Document(format!("{what}: {e}")))
}

impl FlowModel {
    pub fn to_json_string(&self) -> Result<String, FlowError> {
        let doc = ModelDoc {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            dimension: self.dimension,
            depth: self.layers.len(),
            partition: self.partition.clone(),
            s_max: self.s_max,
            fix_scale: self.fix_scale,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    a: l.scale.clone(),
                    b: l.bias.clone(),
                    swapped: l.swapped,
                    w1: mat_to_rows(&l.mlp.w1),
                    b1: l.mlp.b1.to_vec(),
                    w2: mat_to_rows(&l.mlp.w2),
                    b2: l.mlp.b2.to_vec(),
                    w_out: mat_to_rows(&l.mlp.w_out),
                    b_out: l.mlp.b_out.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self, FlowError> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(FlowError::Document(format!(
                "unexpected format tag '{}'",
                doc.format
            )));
        }
        if doc.version != MODEL_VERSION {
            return Err(FlowError::Document(format!(
                "unsupported model version {} (supported: {MODEL_VERSION})",
                doc.version
            )));
        }
        if doc.layers.len() != doc.depth {
            return Err(FlowError::Document(
                "depth does not match layer count".into(),
            ));
        }
        doc.partition.validate()?;
        if doc.partition.n != doc.dimension {
            return Err(FlowError::Document("partition dimension mismatch".into()));
        }
        let (base_passive, base_active) = doc.partition.blocks();
        let base_passive = Arc::new(base_passive);
        let base_active = Arc::new(base_active);

        let mut layers = Vec::with_capacity(doc.layers.len());
        for (li, l) in doc.layers.into_iter().enumerate() {
            if l.a.len() != doc.dimension || l.b.len() != doc.dimension {
                return Err(FlowError::Document(format!(
                    "layer {li}: scale-bias length mismatch"
                )));
            }
            let (passive, active) = if l.swapped {
                (Arc::clone(&base_active), Arc::clone(&base_passive))
            } else {
                (Arc::clone(&base_passive), Arc::clone(&base_active))
            };
            let mlp = Mlp {
                w1: rows_to_mat(&l.w1, "w1")?,
                b1: Array1::from_vec(l.b1),
                w2: rows_to_mat(&l.w2, "w2")?,
                b2: Array1::from_vec(l.b2),
                w_out: rows_to_mat(&l.w_out, "w_out")?,
                b_out: Array1::from_vec(l.b_out),
            };
            if mlp.w1.nrows() != passive.len()
                || mlp.w1.ncols() != mlp.b1.len()
                || mlp.w2.nrows() != mlp.w1.ncols()
                || mlp.w2.ncols() != mlp.b2.len()
                || mlp.w_out.nrows() != mlp.w2.ncols()
                || mlp.w_out.ncols() != mlp.b_out.len()
                || mlp.w_out.ncols() != 2 * active.len()
            {
                return Err(FlowError::Document(format!(
                    "layer {li}: inconsistent MLP shapes"
                )));
            }
            layers.push(CouplingLayer {
                scale: l.a,
                bias: l.b,
                swapped: l.swapped,
                mlp,
                passive,
                active,
            });
        }
        let model = FlowModel {
            dimension: doc.dimension,
            partition: doc.partition,
            s_max: doc.s_max,
            fix_scale: doc.fix_scale,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), FlowError> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, FlowError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Mean of each column, used in tests and init diagnostics.
pub fn column_moments(data: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let rows = data.nrows() as f64;
    let means: Vec<f64> = data.sum_axis(Axis(0)).iter().map(|s| s / rows).collect();
    let vars: Vec<f64> = data
        .columns()
        .into_iter()
        .zip(means.iter())
        .map(|(col, &m)| col.fold(0.0, |acc, &x| acc + (x - m) * (x - m)) / rows)
        .collect();
    (means, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_random_model(n: usize, depth: usize, seed: u64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig::new(n, depth, 6, 5).unwrap();
        let mut model = build_model(&cfg, None, &mut rng).unwrap();
        randomize_output_layers(&mut model, 0.4, &mut rng);
        for layer in &mut model.layers {
            for a in &mut layer.scale {
                *a = 1.0 + 0.3 * rng.random_range(-1.0..1.0);
            }
            for b in &mut layer.bias {
                *b = 0.2 * rng.random_range(-1.0..1.0);
            }
        }
        model
    }

    /// Single-layer model with the MLP forced to constant (log s, t).
    fn constant_layer_model(log_s: f64, t: f64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FlowConfig::new(2, 1, 4, 4).unwrap();
        let mut model = build_model(&cfg, None, &mut rng).unwrap();
        // raw is squashed; pick raw so the effective log-scale is log_s.
        let raw = model.s_max * (log_s / model.s_max).atanh();
        model.layers[0].mlp.b_out[0] = raw;
        model.layers[0].mlp.b_out[1] = t;
        model.layers[0].mlp.w1.fill(0.0);
        model
    }

    #[allow(clippy::needless_range_loop)]
    fn det_small(m: &[Vec<f64>]) -> f64 {
        // Gaussian elimination with partial pivoting; n <= 4 in tests.
        let n = m.len();
        let mut a: Vec<Vec<f64>> = m.to_vec();
        let mut det = 1.0;
        for k in 0..n {
            let pivot = (k..n)
                .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
                .unwrap();
            if pivot != k {
                a.swap(pivot, k);
                det = -det;
            }
            det *= a[k][k];
            if a[k][k] == 0.0 {
                return 0.0;
            }
            for i in (k + 1)..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        det
    }

    #[test]
    fn identity_initialized_model_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FlowConfig::new(2, 1, 8, 8).unwrap();
        let model = build_model(&cfg, None, &mut rng).unwrap();
        let (z, logdet) = model.forward(&[0.3, -1.2]).unwrap();
        assert_eq!(z, vec![0.3, -1.2]);
        assert_eq!(logdet, 0.0);
    }

    #[test]
    fn reference_architecture_builds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FlowConfig::new(16, 16, 512, 256)
            .unwrap()
            .with_partition(PartitionScheme::odd_even(16).unwrap());
        let model = build_model(&cfg, None, &mut rng).unwrap();
        assert_eq!(model.layers.len(), 16);
        assert_eq!(model.layers[0].mlp.w1.dim(), (8, 512));
        assert_eq!(model.layers[0].mlp.w2.dim(), (512, 256));
        assert_eq!(model.layers[0].mlp.w_out.dim(), (256, 16));
        model.validate().unwrap();
    }

    #[test]
    fn whitening_init_normalizes_first_layer_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array2::from_shape_fn((400, 3), |(i, j)| {
            2.5 * ((i * 3 + j) as f64).sin() + j as f64
        });
        let cfg = FlowConfig::new(3, 2, 4, 4).unwrap();
        let model = build_model(&cfg, Some(&data), &mut rng).unwrap();
        // Apply the first layer's scale-bias by hand and check the moments.
        let mut mapped = data.clone();
        for mut row in mapped.rows_mut() {
            for j in 0..3 {
                row[j] = row[j] * model.layers[0].scale[j] + model.layers[0].bias[j];
            }
        }
        let (means, vars) = column_moments(&mapped);
        for j in 0..3 {
            assert!(means[j].abs() < 1e-10, "mean {} at column {j}", means[j]);
            assert!(
                (vars[j] - 1.0).abs() < 1e-10,
                "var {} at column {j}",
                vars[j]
            );
        }
    }

    #[test]
    fn constant_affine_layer_matches_closed_form() {
        let model = constant_layer_model(std::f64::consts::LN_2, 3.0);
        let (z, logdet) = model.forward(&[1.0, 1.0]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12);
        assert!((z[1] - 5.0).abs() < 1e-12);
        assert!((logdet - std::f64::consts::LN_2).abs() < 1e-12);

        let y = model.inverse(&[1.0, 5.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!((y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        let model = small_random_model(3, 2, 42);
        let y = vec![0.4, -0.2, 0.7];
        let (_, logdet) = model.forward(&y).unwrap();

        let h = 1e-5;
        let n = 3;
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            let (zp, _) = model.forward(&yp).unwrap();
            let (zm, _) = model.forward(&ym).unwrap();
            for i in 0..n {
                jac[i][j] = (zp[i] - zm[i]) / (2.0 * h);
            }
        }
        let fd_logdet = det_small(&jac).abs().ln();
        assert!(
            (logdet - fd_logdet).abs() <= 1e-6 * (1.0 + fd_logdet.abs()),
            "logdet {logdet} vs numerical {fd_logdet}"
        );
    }

    #[test]
    fn round_trip_many_random_models() {
        let mut max_err: f64 = 0.0;
        for seed in 0..20u64 {
            let n = 2 + (seed % 3) as usize;
            let model = small_random_model(n, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            for _ in 0..50 {
                let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
                let (z, _) = model.forward(&y).unwrap();
                let back = model.inverse(&z).unwrap();
                for (a, b) in y.iter().zip(back.iter()) {
                    max_err = max_err.max((a - b).abs());
                }
                // And the other direction: forward(inverse(z)) recovers z.
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let yw = model.inverse(&w).unwrap();
                let (zw, _) = model.forward(&yw).unwrap();
                for (a, b) in w.iter().zip(zw.iter()) {
                    max_err = max_err.max((a - b).abs());
                }
            }
        }
        assert!(max_err <= 1e-10, "max round-trip error {max_err}");
    }

    #[test]
    fn log_density_identity_model_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FlowConfig::new(2, 2, 4, 4).unwrap();
        let model = build_model(&cfg, None, &mut rng).unwrap();
        let at_zero = model.log_density(&[0.0, 0.0]).unwrap();
        assert!((at_zero + LN_2PI).abs() < 1e-14);
        let y = [0.7, -1.3];
        let expected = -0.5 * (y[0] * y[0] + y[1] * y[1]) - LN_2PI;
        assert!((model.log_density(&y).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let model = small_random_model(2, 2, 9);
        let (nodes, weights) = crate::elliptic::gauss_legendre(96);
        // Map [-1, 1] to [-8, 8].
        let half = 8.0;
        let mut total = 0.0;
        let mut ys = Vec::with_capacity(96 * 96);
        for &xi in &nodes {
            for &yj in &nodes {
                ys.push([half * xi, half * yj]);
            }
        }
        let flat: Vec<f64> = ys.iter().flatten().copied().collect();
        let batch = Array2::from_shape_vec((ys.len(), 2), flat).unwrap();
        let logp = model.log_density_batch(&batch).unwrap();
        let mut k = 0;
        for &wi in &weights {
            for &wj in &weights {
                total += wi * wj * half * half * logp[k].exp();
                k += 1;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "density integral {total}");
    }

    #[test]
    fn grad_log_density_identity_model_is_negative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = FlowConfig::new(3, 2, 4, 4).unwrap();
        let model = build_model(&cfg, None, &mut rng).unwrap();
        let y = [0.5, -0.25, 1.5];
        let g = model.grad_y_log_density(&y).unwrap();
        for (gi, yi) in g.iter().zip(y.iter()) {
            assert!((gi + yi).abs() < 1e-14);
        }
    }

    #[test]
    fn grad_log_density_matches_finite_differences() {
        let model = small_random_model(3, 2, 77);
        let y = vec![0.3, -0.8, 0.9];
        let g = model.grad_y_log_density(&y).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            let fd =
                (model.log_density(&yp).unwrap() - model.log_density(&ym).unwrap()) / (2.0 * h);
            assert!(
                (g[j] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "component {j}: {} vs {fd}",
                g[j]
            );
        }
    }

    #[test]
    fn grad_log_density_constant_layer_closed_form() {
        let model = constant_layer_model(std::f64::consts::LN_2, 3.0);
        // z = (y1, 2 y2 + 3), log p = -z'z/2 - log(2 pi) + log 2.
        // d/dy1 = -y1, d/dy2 = -2 z2.
        let y = [1.0, 1.0];
        let g = model.grad_y_log_density(&y).unwrap();
        let z2 = 2.0 * y[1] + 3.0;
        assert!((g[0] + y[0]).abs() < 1e-12);
        assert!((g[1] + 2.0 * z2).abs() < 1e-12);
    }

    #[test]
    fn sampling_identity_model_matches_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = FlowConfig::new(2, 2, 4, 4).unwrap();
        let model = build_model(&cfg, None, &mut rng).unwrap();
        let n = 20_000;
        let samples = model.sample(n, &mut rng).unwrap();
        let (means, vars) = column_moments(&samples);
        let bound = 4.0 / (n as f64).sqrt();
        for j in 0..2 {
            assert!(means[j].abs() < bound, "mean {} exceeds {bound}", means[j]);
            assert!((vars[j] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn consecutive_layers_cover_every_coordinate() {
        for scheme in [
            PartitionScheme::first_half(5).unwrap(),
            PartitionScheme::odd_even(6).unwrap(),
            PartitionScheme::permutation(vec![2, 0, 3, 1], 2).unwrap(),
        ] {
            let n = scheme.n;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let cfg = FlowConfig::new(n, 4, 4, 4).unwrap().with_partition(scheme);
            let model = build_model(&cfg, None, &mut rng).unwrap();
            for pair in model.layers.windows(2) {
                let mut updated = vec![false; n];
                for &i in pair[0].active_indices().iter() {
                    updated[i] = true;
                }
                for &i in pair[1].active_indices().iter() {
                    updated[i] = true;
                }
                assert!(updated.iter().all(|&u| u), "a coordinate was never updated");
            }
        }
    }

    #[test]
    fn serialization_round_trips() {
        let model = small_random_model(4, 3, 5);
        let text = model.to_json_string().unwrap();
        assert!(text.contains("\"format\":\"isflow-flow-model\""));
        assert!(text.contains("\"version\":1"));
        let restored = FlowModel::from_json_str(&text).unwrap();
        let y = [0.4, -0.1, 0.9, 0.2];
        let a = model.log_density(&y).unwrap();
        let b = restored.log_density(&y).unwrap();
        assert_eq!(a, b, "round-tripped model must evaluate identically");
        // Round-trip the JSON too: decimal floats must be stable.
        let text2 = restored.to_json_string().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(
            FlowConfig::new(1, 1, 4, 4).is_err() || {
                let cfg = FlowConfig {
                    dimension: 1,
                    depth: 1,
                    hidden1: 4,
                    hidden2: 4,
                    partition: PartitionScheme {
                        kind: PartitionKind::FirstHalf,
                        n: 1,
                        m: 0,
                    },
                    s_max: 2.0,
                    fix_scale: false,
                };
                build_model(&cfg, None, &mut rng).is_err()
            }
        );
        let cfg = FlowConfig::new(4, 0, 4, 4).unwrap();
        assert!(build_model(&cfg, None, &mut rng).is_err());
    }

    #[test]
    fn non_finite_intermediate_reports_layer() {
        let model = constant_layer_model(std::f64::consts::LN_2, 3.0);
        let err = model.forward(&[1.0, f64::MAX]).unwrap_err();
        match err {
            FlowError::NonFinite { layer: 0 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn singular_scale_is_reported() {
        let mut model = small_random_model(2, 1, 8);
        model.layers[0].scale[1] = 0.0;
        let err = model.inverse(&[0.1, 0.2]).unwrap_err();
        match err {
            FlowError::SingularScale { layer: 0, index: 1 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }
}
