//! Training of the flow on weighted data: the cross-entropy + penalty
//! objective, its exact parameter gradient, ADAM, and stratified minibatches.
//!
//! The objective is assembled on the [`crate::tape`] graph. The penalty needs
//! the gradient of the log-density with respect to the *inputs*; that gradient
//! is emitted as tape nodes, so the parameter gradient of the penalty falls
//! out of a second reverse sweep (reverse-over-reverse). The outermost square
//! root of the penalty is applied by hand via the chain rule, which keeps the
//! reported value exact and gives the zero subgradient at an exactly-zero
//! penalty.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flow_core::{FlowError, FlowModel, LN_2PI};
use crate::tape::{NodeId, Tape};
use crate::weighting::WeightedDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch weights sum to zero or are not finite")]
    DegenerateWeights,
    #[error("non-finite objective at sample {index}")]
    NonFiniteSample { index: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}; last good parameters retained")]
    Diverged {
        epoch: usize,
        batch: usize,
        last: Box<(FlowModel, TrainHistory)>,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// The training objective: weighted cross entropy plus `beta` times the
/// root-mean-square mismatch between the reference score and the model score.
/// The reference density is the standard normal of the model dimension.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub beta: f64,
}

impl Objective {
    pub fn cross_entropy_only() -> Self {
        Objective { beta: 0.0 }
    }

    pub fn with_penalty(beta: f64) -> Self {
        Objective { beta }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub n_batches: usize,
    /// Number of stratification bins on the negative band.
    pub strat_bins: usize,
    pub adam: AdamParams,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, n_batches: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            epochs,
            n_batches,
            strat_bins: 4,
            adam: AdamParams::default(),
            seed,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning rate must be >= 0".into(),
            ));
        }
        if self.n_batches < 1 {
            return Err(TrainError::InvalidConfig("n_batches must be >= 1".into()));
        }
        if self.strat_bins < 1 {
            return Err(TrainError::InvalidConfig("strat_bins must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "cross_entropy", "penalty", "wall_time_seconds"])?;
        for r in &self.records {
            w.write_record(&[
                r.epoch.to_string(),
                format!("{}", r.cross_entropy),
                format!("{}", r.penalty),
                format!("{}", r.wall_time),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Value and exact parameter gradient of the objective on one batch.
#[derive(Debug)]
pub struct ObjectiveEval {
    pub value: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub grads: Vec<Array2<f64>>,
}

// ---------------------------------------------------------------------------
// Parameter plumbing
// ---------------------------------------------------------------------------

fn row_mat(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row matrix")
}

fn row_from_array1(v: &Array1<f64>) -> Array2<f64> {
    row_mat(v.as_slice().expect("contiguous"))
}

/// Trainable tensors in canonical order:
/// per layer `[a, b, w1, b1, w2, b2, w_out, b_out]`.
pub fn collect_params(model: &FlowModel) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(model.layers.len() * 8);
    for layer in &model.layers {
        out.push(row_mat(&layer.scale));
        out.push(row_mat(&layer.bias));
        out.push(layer.mlp.w1.clone());
        out.push(row_from_array1(&layer.mlp.b1));
        out.push(layer.mlp.w2.clone());
        out.push(row_from_array1(&layer.mlp.b2));
        out.push(layer.mlp.w_out.clone());
        out.push(row_from_array1(&layer.mlp.b_out));
    }
    out
}

/// Write tensors produced by [`collect_params`] back into the model.
pub fn apply_params(model: &mut FlowModel, params: &[Array2<f64>]) {
    assert_eq!(params.len(), model.layers.len() * 8);
    for (layer, chunk) in model.layers.iter_mut().zip(params.chunks(8)) {
        layer
            .scale
            .copy_from_slice(chunk[0].row(0).to_slice().expect("contiguous"));
        layer
            .bias
            .copy_from_slice(chunk[1].row(0).to_slice().expect("contiguous"));
        layer.mlp.w1.assign(&chunk[2]);
        layer.mlp.b1.assign(&chunk[3].row(0));
        layer.mlp.w2.assign(&chunk[4]);
        layer.mlp.b2.assign(&chunk[5].row(0));
        layer.mlp.w_out.assign(&chunk[6]);
        layer.mlp.b_out.assign(&chunk[7].row(0));
    }
}

// ---------------------------------------------------------------------------
// Objective graph
// ---------------------------------------------------------------------------

struct LogpGraph {
    tape: Tape,
    input: NodeId,
    params: Vec<NodeId>,
    logp: NodeId,
}

/// Assemble the per-sample log-density column (r x 1) on a fresh tape.
fn build_logp_graph(model: &FlowModel, batch: &Array2<f64>) -> LogpGraph {
    let rows = batch.nrows();
    let n = model.dimension;
    let mut tape = Tape::new();
    let input = tape.leaf(batch.to_owned());
    let mut params = Vec::with_capacity(model.layers.len() * 8);

    let mut current = input;
    let mut per_sample_logdet: Vec<NodeId> = Vec::new();
    let mut scalar_logdet: Vec<NodeId> = Vec::new();

    for layer in &model.layers {
        let a = tape.leaf(row_mat(&layer.scale));
        let b = tape.leaf(row_mat(&layer.bias));
        let w1 = tape.leaf(layer.mlp.w1.clone());
        let b1 = tape.leaf(row_from_array1(&layer.mlp.b1));
        let w2 = tape.leaf(layer.mlp.w2.clone());
        let b2 = tape.leaf(row_from_array1(&layer.mlp.b2));
        let w_out = tape.leaf(layer.mlp.w_out.clone());
        let b_out = tape.leaf(row_from_array1(&layer.mlp.b_out));
        params.extend([a, b, w1, b1, w2, b2, w_out, b_out]);

        let scaled = tape.mul_row(current, a);
        let shifted = tape.add_row(scaled, b);
        let passive = Arc::clone(layer.passive_indices());
        let active = Arc::clone(layer.active_indices());
        let q = active.len();

        let x = tape.gather_cols(shifted, Arc::clone(&passive));
        let v = tape.gather_cols(shifted, Arc::clone(&active));

        let h1_pre = tape.matmul(x, w1);
        let h1_pre = tape.add_row(h1_pre, b1);
        let h1 = tape.tanh(h1_pre);
        let h2_pre = tape.matmul(h1, w2);
        let h2_pre = tape.add_row(h2_pre, b2);
        let h2 = tape.tanh(h2_pre);
        let out = tape.matmul(h2, w_out);
        let out = tape.add_row(out, b_out);

        let t = tape.slice_cols(out, q..2 * q);
        let updated = if model.fix_scale {
            tape.add(v, t)
        } else {
            let raw = tape.slice_cols(out, 0..q);
            let raw_squashed = tape.scale(raw, 1.0 / model.s_max);
            let squashed = tape.tanh(raw_squashed);
            let log_scale = tape.scale(squashed, model.s_max);
            let scale_exp = tape.exp(log_scale);
            per_sample_logdet.push(tape.row_sum(log_scale));
            let vs = tape.mul(v, scale_exp);
            tape.add(vs, t)
        };

        let z_passive = tape.scatter_cols(x, passive, n);
        let z_active = tape.scatter_cols(updated, active, n);
        current = tape.add(z_passive, z_active);

        let log_abs = tape.log_abs(a);
        scalar_logdet.push(tape.sum_all(log_abs));
    }

    let z_sq = tape.square(current);
    let quad = tape.row_sum(z_sq);
    let mut logp = tape.scale(quad, -0.5);
    for ld in per_sample_logdet {
        logp = tape.add(logp, ld);
    }
    let mut constant = tape.scalar(-0.5 * n as f64 * LN_2PI);
    for s in scalar_logdet {
        constant = tape.add(constant, s);
    }
    let constant_col = tape.broadcast_all(constant, rows, 1);
    logp = tape.add(logp, constant_col);

    LogpGraph {
        tape,
        input,
        params,
        logp,
    }
}

fn normalized_weights(weights: &Array1<f64>) -> Result<Array2<f64>, TrainError> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(TrainError::DegenerateWeights);
    }
    let total: f64 = weights.sum();
    if !(total > 0.0) {
        return Err(TrainError::DegenerateWeights);
    }
    let col: Vec<f64> = weights.iter().map(|w| w / total).collect();
    Ok(Array2::from_shape_vec((weights.len(), 1), col).expect("weight column"))
}

/// Weighted cross entropy `-sum_i w_i log p(y_i)` with the batch weights
/// renormalized to sum to one.
pub fn weighted_cross_entropy(
    model: &FlowModel,
    batch: &Array2<f64>,
    weights: &Array1<f64>,
) -> Result<f64, TrainError> {
    let w = normalized_weights(weights)?;
    let logp = model.log_density_batch(batch)?;
    if let Some(index) = logp.iter().position(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteSample { index });
    }
    Ok(-logp
        .iter()
        .zip(w.column(0).iter())
        .map(|(lp, wi)| wi * lp)
        .sum::<f64>())
}

/// Penalty value on a batch, evaluated through the same graph used in
/// training.
pub fn penalty(
    model: &FlowModel,
    batch: &Array2<f64>,
    weights: &Array1<f64>,
    objective: &Objective,
) -> Result<f64, TrainError> {
    if objective.beta == 0.0 {
        return Ok(0.0);
    }
    let w = normalized_weights(weights)?;
    let mut graph = build_logp_graph(model, batch);
    let pensq = penalty_square_node(&mut graph, &w);
    let value = graph.tape.value(pensq)[(0, 0)];
    if !value.is_finite() {
        return Err(TrainError::NonFiniteSample { index: 0 });
    }
    Ok(objective.beta * value.sqrt())
}

/// Weighted squared score mismatch `sum_i w_i |grad log rho - grad log p|^2`
/// as a 1x1 tape node.
fn penalty_square_node(graph: &mut LogpGraph, w_col: &Array2<f64>) -> NodeId {
    let tape = &mut graph.tape;
    let total_logp = tape.sum_all(graph.logp);
    let input_grad = tape.grad(total_logp, &[graph.input])[0];
    let reference = tape.neg(graph.input);
    let mismatch = tape.sub(reference, input_grad);
    let sq = tape.square(mismatch);
    let per_sample = tape.row_sum(sq);
    let w_leaf = tape.leaf(w_col.clone());
    let weighted = tape.mul(per_sample, w_leaf);
    tape.sum_all(weighted)
}

/// Objective value and its exact gradient with respect to every trainable
/// parameter, in [`collect_params`] order.
pub fn objective_and_gradient(
    model: &FlowModel,
    batch: &Array2<f64>,
    weights: &Array1<f64>,
    objective: &Objective,
) -> Result<ObjectiveEval, TrainError> {
    if batch.ncols() != model.dimension {
        return Err(TrainError::InvalidConfig(format!(
            "batch dimension {} does not match model dimension {}",
            batch.ncols(),
            model.dimension
        )));
    }
    let w = normalized_weights(weights)?;
    let mut graph = build_logp_graph(model, batch);

    {
        let logp = graph.tape.value(graph.logp);
        if let Some(index) = logp.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteSample { index });
        }
    }

    let w_leaf = graph.tape.leaf(w.clone());
    let weighted_logp = graph.tape.mul(graph.logp, w_leaf);
    let summed = graph.tape.sum_all(weighted_logp);
    let ce_node = graph.tape.neg(summed);
    let ce_value = graph.tape.value(ce_node)[(0, 0)];

    let (root, penalty_value) = if objective.beta == 0.0 {
        (ce_node, 0.0)
    } else {
        let pensq = penalty_square_node(&mut graph, &w);
        let pensq_value = graph.tape.value(pensq)[(0, 0)];
        if !pensq_value.is_finite() {
            return Err(TrainError::NonFiniteSample { index: 0 });
        }
        let penalty_value = objective.beta * pensq_value.sqrt();
        // Chain rule through the outer sqrt; at an exactly-zero penalty the
        // subgradient is zero.
        let kappa = if pensq_value > 0.0 {
            0.5 * objective.beta / pensq_value.sqrt()
        } else {
            0.0
        };
        let scaled = graph.tape.scale(pensq, kappa);
        (graph.tape.add(ce_node, scaled), penalty_value)
    };

    let value = ce_value + penalty_value;
    if !value.is_finite() {
        return Err(TrainError::NonFiniteSample { index: 0 });
    }

    let grad_ids = graph.tape.grad(root, &graph.params);
    let grads = grad_ids
        .into_iter()
        .map(|id| graph.tape.value(id).clone())
        .collect();

    Ok(ObjectiveEval {
        value,
        cross_entropy: ce_value,
        penalty: penalty_value,
        grads,
    })
}

// ---------------------------------------------------------------------------
// Stratified minibatches
// ---------------------------------------------------------------------------

/// Group samples by their coarse QoI value into `k_bins` uniform bins on the
/// negative band plus one group for the nonnegative samples, shuffle each
/// group, and assemble batch `j` from slice `j` of every group. Every sample
/// lands in exactly one batch per epoch.
pub fn stratified_batches<R: rand::Rng>(
    dataset: &WeightedDataset,
    k_bins: usize,
    n_batches: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    assert!(k_bins >= 1 && n_batches >= 1);
    let eps = dataset.eps_max_neg;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k_bins + 1];
    for (i, sample) in dataset.samples.iter().enumerate() {
        let g = sample.g_coarse;
        if g >= 0.0 || eps <= 0.0 {
            groups[k_bins].push(i);
        } else {
            let fraction = ((g + eps) / eps).clamp(0.0, 1.0);
            let bin = ((fraction * k_bins as f64) as usize).min(k_bins - 1);
            groups[bin].push(i);
        }
    }

    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); n_batches];
    for group in &mut groups {
        group.shuffle(rng);
        let len = group.len();
        for (j, batch) in batches.iter_mut().enumerate() {
            let lo = len * j / n_batches;
            let hi = len * (j + 1) / n_batches;
            batch.extend_from_slice(&group[lo..hi]);
        }
    }
    batches
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            step: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [Array2<f64>],
        grads: &[Array2<f64>],
        learning_rate: f64,
        hp: &AdamParams,
    ) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - hp.beta1.powi(t);
        let bias2 = 1.0 - hp.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                    *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= learning_rate * m_hat / (v_hat.sqrt() + hp.epsilon);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Run `epochs x n_batches` ADAM steps on the objective over stratified
/// minibatches. Deterministic given the config seed. The history records the
/// full-dataset cross entropy and penalty after each epoch.
pub fn train(
    model: FlowModel,
    dataset: &WeightedDataset,
    objective: &Objective,
    config: &TrainConfig,
) -> Result<(FlowModel, TrainHistory), TrainError> {
    config.validate()?;
    let y_all = dataset.input_matrix();
    let w_all = dataset.weight_array();
    if y_all.ncols() != model.dimension {
        return Err(TrainError::InvalidConfig(format!(
            "dataset dimension {} does not match model dimension {}",
            y_all.ncols(),
            model.dimension
        )));
    }

    let mut working = model;
    let mut params = collect_params(&working);
    // Snapshot of the parameters before the most recent step; the state
    // returned on divergence (the poisoned update itself is rolled back).
    let mut last_good = params.clone();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory::default();
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let batches = stratified_batches(dataset, config.strat_bins, config.n_batches, &mut rng);
        for (bi, batch) in batches.iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let yb = gather_rows(&y_all, batch);
            let wb = Array1::from_iter(batch.iter().map(|&i| w_all[i]));
            let eval = match objective_and_gradient(&working, &yb, &wb, objective) {
                Ok(eval) => eval,
                Err(TrainError::NonFiniteSample { .. }) => {
                    apply_params(&mut working, &last_good);
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: bi,
                        last: Box::new((working, history)),
                    });
                }
                Err(other) => return Err(other),
            };
            for (dst, src) in last_good.iter_mut().zip(params.iter()) {
                dst.assign(src);
            }
            adam.step(&mut params, &eval.grads, config.learning_rate, &config.adam);
            apply_params(&mut working, &params);
        }

        let full_eval = weighted_cross_entropy(&working, &y_all, &w_all)
            .and_then(|ce| penalty(&working, &y_all, &w_all, objective).map(|p| (ce, p)));
        let (cross_entropy, pen) = match full_eval {
            Ok(v) if v.0.is_finite() && v.1.is_finite() => v,
            Ok(_) | Err(TrainError::NonFiniteSample { .. }) => {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: config.n_batches,
                    last: Box::new((working, history)),
                });
            }
            Err(other) => return Err(other),
        };
        history.records.push(EpochRecord {
            epoch,
            cross_entropy,
            penalty: pen,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }

    Ok((working, history))
}

fn gather_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_core::{build_model, randomize_output_layers, FlowConfig};
    use crate::weighting::RawSample;
    use ndarray::array;
    use rand::Rng;

    fn tiny_model(seed: u64, noisy: bool) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig::new(2, 1, 4, 4).unwrap();
        let mut model = build_model(&cfg, None, &mut rng).unwrap();
        if noisy {
            randomize_output_layers(&mut model, 0.4, &mut rng);
        }
        model
    }

    fn random_batch(seed: u64, rows: usize, cols: usize) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5));
        let w = Array1::from_shape_fn(rows, |_| rng.random_range(0.1..1.0));
        (y, w)
    }

    #[test]
    fn cross_entropy_identity_model_uniform_weights() {
        let model = tiny_model(1, false);
        let (y, _) = random_batch(2, 40, 2);
        let w = Array1::from_elem(40, 1.0 / 40.0);
        let ce = weighted_cross_entropy(&model, &y, &w).unwrap();
        let expected: f64 = y
            .rows()
            .into_iter()
            .map(|r| 0.5 * (r[0] * r[0] + r[1] * r[1]) + LN_2PI)
            .sum::<f64>()
            / 40.0;
        assert!((ce - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_point_weighted_average() {
        let model = tiny_model(1, false);
        let y = array![[0.5, -0.5], [1.0, 2.0]];
        let w = array![0.75, 0.25];
        let ce = weighted_cross_entropy(&model, &y, &w).unwrap();
        let lp0 = model.log_density(&[0.5, -0.5]).unwrap();
        let lp1 = model.log_density(&[1.0, 2.0]).unwrap();
        assert!((ce - (-(0.75 * lp0 + 0.25 * lp1))).abs() < 1e-13);
    }

    #[test]
    fn cross_entropy_rejects_zero_weights() {
        let model = tiny_model(1, false);
        let y = array![[0.5, -0.5]];
        let w = array![0.0];
        assert!(matches!(
            weighted_cross_entropy(&model, &y, &w),
            Err(TrainError::DegenerateWeights)
        ));
    }

    #[test]
    fn penalty_vanishes_on_identity_model() {
        let model = tiny_model(1, false);
        let (y, w) = random_batch(3, 20, 2);
        let p = penalty(&model, &y, &w, &Objective::with_penalty(5.0)).unwrap();
        assert!(
            p.abs() < 1e-12,
            "penalty {p} should vanish when model = reference"
        );
    }

    #[test]
    fn penalty_zero_when_beta_zero() {
        let model = tiny_model(3, true);
        let (y, w) = random_batch(4, 10, 2);
        assert_eq!(
            penalty(&model, &y, &w, &Objective::cross_entropy_only()).unwrap(),
            0.0
        );
    }

    #[test]
    fn penalty_matches_direct_recomputation() {
        let model = tiny_model(5, true);
        let (y, w) = random_batch(6, 5, 2);
        let beta = 3.0;
        let p = penalty(&model, &y, &w, &Objective::with_penalty(beta)).unwrap();

        // Independent route: per-sample score from the plain reverse pass.
        let total: f64 = w.sum();
        let grads = model.grad_y_log_density_batch(&y).unwrap();
        let mut acc = 0.0;
        for i in 0..y.nrows() {
            let mut sq = 0.0;
            for j in 0..2 {
                let diff = -y[(i, j)] - grads[(i, j)];
                sq += diff * diff;
            }
            acc += w[i] / total * sq;
        }
        let expected = beta * acc.sqrt();
        assert!(
            (p - expected).abs() < 1e-12,
            "penalty {p} vs brute force {expected}"
        );
    }

    fn finite_difference_check(beta: f64, tol: f64) {
        let model = tiny_model(11, true);
        let (y, w) = random_batch(12, 6, 2);
        let objective = Objective::with_penalty(beta);
        let eval = objective_and_gradient(&model, &y, &w, &objective).unwrap();

        let params = collect_params(&model);
        let h = 1e-6;
        for (pi, base) in params.iter().enumerate() {
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[pi][(r, c)] += h;
                minus[pi][(r, c)] -= h;
                let mut mp = model.clone();
                apply_params(&mut mp, &plus);
                let mut mm = model.clone();
                apply_params(&mut mm, &minus);
                let fp = objective_and_gradient(&mp, &y, &w, &objective)
                    .unwrap()
                    .value;
                let fm = objective_and_gradient(&mm, &y, &w, &objective)
                    .unwrap()
                    .value;
                let fd = (fp - fm) / (2.0 * h);
                let got = eval.grads[pi][(r, c)];
                assert!(
                    (got - fd).abs() <= tol * (1.0 + fd.abs()),
                    "param {pi} entry ({r},{c}): analytic {got} vs fd {fd} (beta={beta})"
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_without_penalty() {
        finite_difference_check(0.0, 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences_with_penalty() {
        finite_difference_check(10.0, 1e-4);
    }

    #[test]
    fn bias_gradient_matches_gaussian_closed_form() {
        // Identity model: d CE / d b_j = sum_i w_i y_ij for the first layer.
        let model = tiny_model(1, false);
        let (y, w) = random_batch(21, 30, 2);
        let eval =
            objective_and_gradient(&model, &y, &w, &Objective::cross_entropy_only()).unwrap();
        let total: f64 = w.sum();
        for j in 0..2 {
            let expected: f64 = y
                .column(j)
                .iter()
                .zip(w.iter())
                .map(|(yij, wi)| wi / total * yij)
                .sum();
            let got = eval.grads[1][(0, j)];
            assert!(
                (got - expected).abs() < 1e-12,
                "bias grad {got} vs {expected}"
            );
        }
    }

    #[test]
    fn objective_decomposes_into_cross_entropy_and_penalty() {
        let model = tiny_model(7, true);
        let (y, w) = random_batch(8, 12, 2);
        let with = objective_and_gradient(&model, &y, &w, &Objective::with_penalty(2.5)).unwrap();
        let without =
            objective_and_gradient(&model, &y, &w, &Objective::cross_entropy_only()).unwrap();
        let pen = penalty(&model, &y, &w, &Objective::with_penalty(2.5)).unwrap();
        assert_eq!(with.penalty, pen);
        assert_eq!(with.value, with.cross_entropy + with.penalty);
        assert!((with.value - without.value - pen).abs() < 1e-12);
    }

    #[test]
    fn weight_scaling_leaves_objective_invariant() {
        let model = tiny_model(9, true);
        let (y, w) = random_batch(10, 9, 2);
        let objective = Objective::with_penalty(4.0);
        let base = objective_and_gradient(&model, &y, &w, &objective).unwrap();
        let scaled_w = w.mapv(|x| 37.5 * x);
        let scaled = objective_and_gradient(&model, &y, &scaled_w, &objective).unwrap();
        assert!((base.value - scaled.value).abs() <= 1e-12 * (1.0 + base.value.abs()));
        for (g0, g1) in base.grads.iter().zip(scaled.grads.iter()) {
            for (a, b) in g0.iter().zip(g1.iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            }
        }
    }

    fn synthetic_dataset(bin_counts: &[usize], positives: usize) -> WeightedDataset {
        // eps_max_neg = 1.0; bins of width 1/k on [-1, 0).
        let k = bin_counts.len();
        let mut samples = Vec::new();
        for (bin, &count) in bin_counts.iter().enumerate() {
            for i in 0..count {
                let width = 1.0 / k as f64;
                let g = -1.0 + width * (bin as f64 + 0.3 + 0.4 * (i as f64 / count.max(1) as f64));
                samples.push(RawSample {
                    y: vec![g, 0.0],
                    g_coarse: g,
                    error_estimate: Some(0.0),
                });
            }
        }
        for i in 0..positives {
            samples.push(RawSample {
                y: vec![i as f64, 0.0],
                g_coarse: 0.1 + i as f64,
                error_estimate: Some(0.0),
            });
        }
        let n = samples.len();
        WeightedDataset {
            samples,
            weights: vec![1.0 / n as f64; n],
            theta: 1.0,
            c1: 0.0,
            c2: 1.0 / n as f64,
            sigma: 0.0,
            eps_max_neg: 1.0,
        }
    }

    #[test]
    fn stratified_batches_split_each_bin_evenly() {
        let dataset = synthetic_dataset(&[10, 20, 30], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches = stratified_batches(&dataset, 3, 5, &mut rng);
        assert_eq!(batches.len(), 5);
        for batch in &batches {
            let mut bin_counts = [0usize; 3];
            for &i in batch {
                let g = dataset.samples[i].g_coarse;
                let bin = (((g + 1.0) / 1.0 * 3.0) as usize).min(2);
                bin_counts[bin] += 1;
            }
            assert!((bin_counts[0] as i64 - 2).abs() <= 1);
            assert!((bin_counts[1] as i64 - 4).abs() <= 1);
            assert!((bin_counts[2] as i64 - 6).abs() <= 1);
        }
    }

    #[test]
    fn stratified_batches_cover_dataset_exactly_once() {
        let dataset = synthetic_dataset(&[7, 13, 5], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batches = stratified_batches(&dataset, 3, 4, &mut rng);
        let mut seen = vec![0usize; dataset.samples.len()];
        for batch in &batches {
            for &i in batch {
                seen[i] += 1;
            }
        }
        assert!(
            seen.iter().all(|&c| c == 1),
            "every sample appears exactly once"
        );
    }

    #[test]
    fn all_nonnegative_dataset_gives_plain_split() {
        let dataset = synthetic_dataset(&[], 23);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = stratified_batches(&dataset, 4, 4, &mut rng);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        for s in sizes {
            assert!((s as i64 - 5).abs() <= 1);
        }
    }

    #[test]
    fn single_batch_is_whole_dataset() {
        let dataset = synthetic_dataset(&[4, 4], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batches = stratified_batches(&dataset, 2, 1, &mut rng);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), dataset.samples.len());
    }

    #[test]
    fn non_finite_sample_is_reported_with_index() {
        let model = tiny_model(1, false);
        let y = array![[0.5, -0.5], [1.0, f64::MAX]];
        let w = array![0.5, 0.5];
        match objective_and_gradient(&model, &y, &w, &Objective::cross_entropy_only()) {
            Err(TrainError::NonFiniteSample { index: 1 }) => {}
            other => panic!("expected non-finite sample error, got {other:?}"),
        }
    }

    #[test]
    fn divergent_training_aborts_with_last_good_state() {
        let model = tiny_model(42, true);
        let dataset = synthetic_dataset(&[10, 10], 20);
        let config = TrainConfig::new(1e200, 10, 2, 3);
        match train(model, &dataset, &Objective::cross_entropy_only(), &config) {
            Err(TrainError::Diverged { last, .. }) => {
                // The retained parameters must still evaluate cleanly.
                let (model, _history) = *last;
                assert!(model.log_density(&[0.1, -0.2]).unwrap().is_finite());
            }
            Ok(_) => panic!("training with lr = 1e200 should diverge"),
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = vec![array![[1.0, -2.0], [0.5, 3.0]]];
        let grads = vec![Array2::zeros((2, 2))];
        let before = params[0].clone();
        let mut adam = AdamState::new(&params);
        adam.step(&mut params, &grads, 0.1, &AdamParams::default());
        assert_eq!(params[0], before);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_history_flat() {
        let model = tiny_model(30, true);
        let dataset = synthetic_dataset(&[5, 5], 10);
        let config = TrainConfig::new(0.0, 4, 2, 77);
        let before = collect_params(&model);
        let (trained, history) =
            train(model, &dataset, &Objective::cross_entropy_only(), &config).unwrap();
        let after = collect_params(&trained);
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a, b);
        }
        let first = history.records[0].cross_entropy;
        for r in &history.records {
            assert_eq!(r.cross_entropy, first);
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let dataset = synthetic_dataset(&[8, 8], 20);
        let objective = Objective::with_penalty(1.0);
        let config = TrainConfig::new(5e-3, 3, 3, 123);
        let (m1, h1) = train(tiny_model(50, true), &dataset, &objective, &config).unwrap();
        let (m2, h2) = train(tiny_model(50, true), &dataset, &objective, &config).unwrap();
        for (r1, r2) in h1.records.iter().zip(h2.records.iter()) {
            assert_eq!(r1.cross_entropy.to_bits(), r2.cross_entropy.to_bits());
            assert_eq!(r1.penalty.to_bits(), r2.penalty.to_bits());
        }
        for (p1, p2) in collect_params(&m1).iter().zip(collect_params(&m2).iter()) {
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn history_csv_has_expected_header() {
        let history = TrainHistory {
            records: vec![EpochRecord {
                epoch: 0,
                cross_entropy: 2.5,
                penalty: 0.0,
                wall_time: 0.1,
            }],
        };
        let mut buf = Vec::new();
        history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,cross_entropy,penalty,wall_time_seconds\n"));
    }
}
