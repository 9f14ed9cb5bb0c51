//! The harmonization network and its training loop.
//!
//! A single multilayer perceptron maps signal coefficients (45 at band limit
//! 8) to fiber-distribution coefficients (66 at band limit 10). Training
//! minimizes
//!
//! ```text
//! (1/m) sum_j |y_j - f(x_j)|^2  +  lambda (1/m) sum_j |f(a_j) - f(b_j)|^2
//! ```
//!
//! per mini-batch: a supervised term over labeled voxels plus a consistency
//! term over paired acquisitions of the same voxel under two scanner
//! profiles. All three forward channels (`x`, `a`, `b`) share one set of
//! weights; gradients accumulate across the channels. `lambda = 0` recovers
//! the plain supervised baseline.
//!
//! Optimization is RMSProp (`v <- rho v + (1 - rho) g^2`,
//! `theta <- theta - lr g / (sqrt v + eps)`) over shuffled mini-batches with
//! k-fold cross-validation for monitoring, then a final retrain on all data.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::{atomic_write, read_to_string};
use crate::phantom::{mix_seed, Dataset};
use crate::sh::{coeff_count, ShVec};

/// Serialized model format version.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Hidden widths of the harmonizer architecture; see [`MlpModel::harmonizer`].
pub const HIDDEN_WIDE: usize = 400;
pub const HIDDEN_NARROW: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Subgradient used by backprop; the ReLU kink at exactly 0 uses 0.
    fn derivative_mask(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `out = activation(W h + b)` with `W` of shape
/// `out_dim x in_dim`.
#[derive(Clone, Debug)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub activation: Activation,
}

/// A fully connected network with fixed per-layer activations.
#[derive(Clone, Debug)]
pub struct MlpModel {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl MlpModel {
    /// Builds a seeded random model. ReLU layers draw weights from
    /// `U(+-sqrt(6 / fan_in))`, identity layers from
    /// `U(+-sqrt(6 / (fan_in + fan_out)))`; biases start at zero. Draws
    /// happen layer by layer, row-major, so the same seed always produces
    /// bit-identical parameters.
    pub fn new(
        input_dim: usize,
        layer_dims: &[usize],
        activations: &[Activation],
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || layer_dims.is_empty() || layer_dims.contains(&0) {
            return Err(Error::invalid_config(
                "model needs a positive input dimension and at least one non-empty layer",
            ));
        }
        if activations.len() != layer_dims.len() {
            return Err(Error::invalid_config(format!(
                "{} layers but {} activations",
                layer_dims.len(),
                activations.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_dims.len());
        let mut fan_in = input_dim;
        for (&out, &act) in layer_dims.iter().zip(activations) {
            let bound = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Identity => (6.0 / (fan_in + out) as f64).sqrt(),
            };
            let w = DMatrix::from_fn(out, fan_in, |_, _| rng.random_range(-bound..bound));
            layers.push(Layer {
                w,
                b: DVector::zeros(out),
                activation: act,
            });
            fan_in = out;
        }
        Ok(MlpModel { input_dim, layers })
    }

    /// The harmonizer architecture: layer widths
    /// `[k_in, 400, k_out, 200, k_out]` with ReLU on the first two layers and
    /// identity on the rest. With `k_in = 45`, `k_out = 66` this is the
    /// canonical 73,602-parameter model.
    pub fn harmonizer(k_in: usize, k_out: usize, seed: u64) -> Result<Self> {
        MlpModel::new(
            k_in,
            &[k_in, HIDDEN_WIDE, k_out, HIDDEN_NARROW, k_out],
            &[
                Activation::Relu,
                Activation::Relu,
                Activation::Identity,
                Activation::Identity,
                Activation::Identity,
            ],
            seed,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").w.nrows()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.w.nrows()).collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    /// Flat parameter indexing: layer 0's `W` row-major, then its `b`, then
    /// layer 1, and so on. Used by serialization and by finite-difference
    /// checks.
    pub fn get_param(&self, idx: usize) -> f64 {
        let (layer, offset) = self.locate(idx);
        let l = &self.layers[layer];
        if offset < l.w.len() {
            l.w[(offset / l.w.ncols(), offset % l.w.ncols())]
        } else {
            l.b[offset - l.w.len()]
        }
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (layer, offset) = self.locate(idx);
        let l = &mut self.layers[layer];
        if offset < l.w.len() {
            let cols = l.w.ncols();
            l.w[(offset / cols, offset % cols)] = value;
        } else {
            let base = l.w.len();
            l.b[offset - base] = value;
        }
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (i, l) in self.layers.iter().enumerate() {
            let size = l.w.len() + l.b.len();
            if idx < size {
                return (i, idx);
            }
            idx -= size;
        }
        panic!("parameter index out of range");
    }

    /// Forward pass for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::invalid_input(format!(
                "expected {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".to_string()));
        }
        let mut h = DVector::from_column_slice(x);
        for layer in &self.layers {
            let mut z = &layer.w * h + &layer.b;
            z.apply(|v| *v = layer.activation.apply(*v));
            h = z;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "network output (diverged parameters?)".to_string(),
            ));
        }
        Ok(h.data.into())
    }

    /// Forward pass mapping a coefficient vector to a coefficient vector.
    /// The input band limit must match the model's input width and the
    /// output width must correspond to an even band limit.
    pub fn predict(&self, input: &ShVec) -> Result<ShVec> {
        if coeff_count(input.order()) != self.input_dim {
            return Err(Error::invalid_input(format!(
                "model expects {} input coefficients but band limit {} has {}",
                self.input_dim,
                input.order(),
                coeff_count(input.order())
            )));
        }
        let out = self.forward(input.coeffs())?;
        let order = (0..=64)
            .step_by(2)
            .find(|&l| coeff_count(l) == out.len())
            .ok_or_else(|| {
                Error::invalid_input(format!(
                    "model output width {} is not a coefficient count of any even band limit",
                    out.len()
                ))
            })?;
        ShVec::new(order, out)
    }

    /// Batched forward keeping pre-activations and activations per layer
    /// (columns are samples). `hs[0]` is the input; `hs[i + 1]` / `zs[i]`
    /// belong to layer `i`.
    fn forward_batch(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut hs = Vec::with_capacity(self.layers.len() + 1);
        hs.push(x.clone());
        for layer in &self.layers {
            let mut z = &layer.w * hs.last().expect("non-empty");
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            zs.push(z.clone());
            z.apply(|v| *v = layer.activation.apply(*v));
            hs.push(z);
        }
        (zs, hs)
    }
}

/// One training mini-batch: `m` labeled voxels and, unless the consistency
/// term is disabled, `m` paired voxels. Columns are samples.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl TrainingBatch {
    /// Assembles a batch from coefficient slices. `pairs` may be empty (for
    /// purely supervised training); otherwise it must contain exactly as many
    /// entries as `labeled`.
    pub fn new(labeled: &[(&[f64], &[f64])], pairs: &[(&[f64], &[f64])]) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::invalid_input("batch has no labeled samples"));
        }
        if !pairs.is_empty() && pairs.len() != labeled.len() {
            return Err(Error::invalid_input(format!(
                "batch has {} labeled but {} paired samples; counts must match",
                labeled.len(),
                pairs.len()
            )));
        }
        let dim_x = labeled[0].0.len();
        let dim_y = labeled[0].1.len();
        for (x, y) in labeled {
            if x.len() != dim_x || y.len() != dim_y {
                return Err(Error::invalid_input("ragged labeled batch"));
            }
            if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("labeled batch entries".to_string()));
            }
        }
        let m = labeled.len();
        let x = DMatrix::from_fn(dim_x, m, |r, c| labeled[c].0[r]);
        let y = DMatrix::from_fn(dim_y, m, |r, c| labeled[c].1[r]);
        let (a, b) = if pairs.is_empty() {
            (DMatrix::zeros(dim_x, 0), DMatrix::zeros(dim_x, 0))
        } else {
            for (pa, pb) in pairs {
                if pa.len() != dim_x || pb.len() != dim_x {
                    return Err(Error::invalid_input("ragged paired batch"));
                }
                if pa.iter().chain(pb.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("paired batch entries".to_string()));
                }
            }
            (
                DMatrix::from_fn(dim_x, m, |r, c| pairs[c].0[r]),
                DMatrix::from_fn(dim_x, m, |r, c| pairs[c].1[r]),
            )
        };
        Ok(TrainingBatch { x, y, a, b })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn has_pairs(&self) -> bool {
        self.a.ncols() > 0
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub consistency: f64,
    pub total: f64,
}

fn check_batch_dims(model: &MlpModel, batch: &TrainingBatch, lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid_config(format!(
            "consistency weight must be finite and >= 0, got {lambda}"
        )));
    }
    if batch.x.nrows() != model.input_dim() {
        return Err(Error::invalid_input(format!(
            "batch inputs have {} rows, model expects {}",
            batch.x.nrows(),
            model.input_dim()
        )));
    }
    if batch.y.nrows() != model.output_dim() {
        return Err(Error::invalid_input(format!(
            "batch targets have {} rows, model outputs {}",
            batch.y.nrows(),
            model.output_dim()
        )));
    }
    if lambda > 0.0 && !batch.has_pairs() {
        return Err(Error::invalid_config(
            "consistency weight is positive but the batch has no paired samples",
        ));
    }
    Ok(())
}

/// Mean-squared supervised loss plus `lambda` times the mean-squared paired
/// consistency penalty on one batch.
pub fn loss(model: &MlpModel, batch: &TrainingBatch, lambda: f64) -> Result<LossBreakdown> {
    check_batch_dims(model, batch, lambda)?;
    let m = batch.len() as f64;
    let (_, hs_x) = model.forward_batch(&batch.x);
    let supervised = (hs_x.last().expect("output") - &batch.y).norm_squared() / m;
    let consistency = if batch.has_pairs() {
        let (_, hs_a) = model.forward_batch(&batch.a);
        let (_, hs_b) = model.forward_batch(&batch.b);
        (hs_a.last().expect("output") - hs_b.last().expect("output")).norm_squared() / m
    } else {
        0.0
    };
    let total = supervised + lambda * consistency;
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".to_string()));
    }
    Ok(LossBreakdown {
        supervised,
        consistency,
        total,
    })
}

/// Per-layer gradients, same shapes as the model parameters.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub dw: Vec<DMatrix<f64>>,
    pub db: Vec<DVector<f64>>,
}

impl ParamGrads {
    fn zeros_like(model: &MlpModel) -> Self {
        ParamGrads {
            dw: model
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            db: model.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    /// Flat indexing matching [`MlpModel::get_param`].
    pub fn get(&self, mut idx: usize) -> f64 {
        for (w, b) in self.dw.iter().zip(&self.db) {
            let size = w.len() + b.len();
            if idx < size {
                return if idx < w.len() {
                    w[(idx / w.ncols(), idx % w.ncols())]
                } else {
                    b[idx - w.len()]
                };
            }
            idx -= size;
        }
        panic!("gradient index out of range");
    }
}

/// Backpropagates `d_out` (gradient w.r.t. the network output, columns =
/// samples) through the cached forward pass, accumulating into `grads`.
fn backprop_channel(
    model: &MlpModel,
    zs: &[DMatrix<f64>],
    hs: &[DMatrix<f64>],
    d_out: DMatrix<f64>,
    grads: &mut ParamGrads,
) {
    let mut d = d_out;
    for i in (0..model.layers.len()).rev() {
        let layer = &model.layers[i];
        // dZ = dH (.) act'(z)
        if layer.activation == Activation::Relu {
            d.zip_apply(&zs[i], |g, z| *g *= layer.activation.derivative_mask(z));
        }
        grads.dw[i] += &d * hs[i].transpose();
        grads.db[i] += d.column_sum();
        if i > 0 {
            d = layer.w.transpose() * d;
        }
    }
}

/// Analytic gradients of [`loss`] with respect to every parameter, together
/// with the loss value. The three channels share weights, so their
/// contributions accumulate into the same gradient buffers.
pub fn gradients(
    model: &MlpModel,
    batch: &TrainingBatch,
    lambda: f64,
) -> Result<(ParamGrads, LossBreakdown)> {
    check_batch_dims(model, batch, lambda)?;
    let m = batch.len() as f64;
    let mut grads = ParamGrads::zeros_like(model);

    let (zs_x, hs_x) = model.forward_batch(&batch.x);
    let resid = hs_x.last().expect("output") - &batch.y;
    let supervised = resid.norm_squared() / m;
    backprop_channel(model, &zs_x, &hs_x, resid * (2.0 / m), &mut grads);

    let consistency = if lambda > 0.0 && batch.has_pairs() {
        let (zs_a, hs_a) = model.forward_batch(&batch.a);
        let (zs_b, hs_b) = model.forward_batch(&batch.b);
        let gap = hs_a.last().expect("output") - hs_b.last().expect("output");
        let consistency = gap.norm_squared() / m;
        backprop_channel(model, &zs_a, &hs_a, &gap * (2.0 * lambda / m), &mut grads);
        backprop_channel(model, &zs_b, &hs_b, &gap * (-2.0 * lambda / m), &mut grads);
        consistency
    } else if batch.has_pairs() {
        // lambda = 0: the term contributes nothing to gradients; still report
        // its value so monitoring stays meaningful.
        let (_, hs_a) = model.forward_batch(&batch.a);
        let (_, hs_b) = model.forward_batch(&batch.b);
        (hs_a.last().expect("output") - hs_b.last().expect("output")).norm_squared() / m
    } else {
        0.0
    };

    let total = supervised + lambda * consistency;
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".to_string()));
    }
    Ok((
        grads,
        LossBreakdown {
            supervised,
            consistency,
            total,
        },
    ))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RmsPropParams {
    pub learning_rate: f64,
    /// Decay of the squared-gradient accumulator.
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsPropParams {
    fn default() -> Self {
        RmsPropParams {
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmsPropParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid_config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid_config(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid_config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Squared-gradient running averages, one buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct RmsPropState {
    vw: Vec<DMatrix<f64>>,
    vb: Vec<DVector<f64>>,
}

impl RmsPropState {
    pub fn new(model: &MlpModel) -> Self {
        let g = ParamGrads::zeros_like(model);
        RmsPropState { vw: g.dw, vb: g.db }
    }
}

/// One RMSProp update in place.
pub fn rmsprop_step(
    model: &mut MlpModel,
    grads: &ParamGrads,
    state: &mut RmsPropState,
    params: &RmsPropParams,
) -> Result<()> {
    params.validate()?;
    if grads.dw.len() != model.layers.len() || state.vw.len() != model.layers.len() {
        return Err(Error::invalid_input(
            "gradient/state layer count does not match the model",
        ));
    }
    for (i, layer) in model.layers.iter_mut().enumerate() {
        if grads.dw[i].shape() != layer.w.shape() || grads.db[i].len() != layer.b.len() {
            return Err(Error::invalid_input(format!(
                "gradient shapes do not match model layer {i}"
            )));
        }
        let (vw, vb) = (&mut state.vw[i], &mut state.vb[i]);
        vw.zip_apply(&grads.dw[i], |v, g| *v = params.rho * *v + (1.0 - params.rho) * g * g);
        vb.zip_apply(&grads.db[i], |v, g| *v = params.rho * *v + (1.0 - params.rho) * g * g);
        layer.w.zip_zip_apply(&grads.dw[i], vw, |t, g, v| {
            *t -= params.learning_rate * g / (v.sqrt() + params.epsilon)
        });
        layer.b.zip_zip_apply(&grads.db[i], vb, |t, g, v| {
            *t -= params.learning_rate * g / (v.sqrt() + params.epsilon)
        });
    }
    Ok(())
}

/// Training configuration; defaults reproduce the standard pipeline setup.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the paired-consistency term (0 disables it).
    pub lambda: f64,
    /// Passes over the training pool. The default gives the standard
    /// benchmark (5,000 labeled voxels, batch 100, 0.2 held out) a budget of
    /// roughly a thousand optimizer steps; at 3 epochs the same setup gets
    /// only ~120 steps and stalls around truth correlation 0.6.
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of cross-validation folds; below 2 skips cross-validation.
    pub folds: usize,
    /// Fraction of labeled data held out per fold.
    pub val_fraction: f64,
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            epochs: 20,
            batch_size: 100,
            folds: 5,
            val_fraction: 0.2,
            learning_rate: 5e-3,
            rho: 0.9,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Supervised loss on the held-out split before any update.
    pub val_supervised_initial: f64,
    /// Supervised loss on the held-out split after training the fold.
    pub val_supervised_final: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Loss of the final model over the whole dataset (exact pool means, not
    /// batch means).
    pub final_supervised: f64,
    pub final_consistency: f64,
    pub final_total: f64,
}

pub struct TrainOutcome {
    pub model: MlpModel,
    pub report: CvReport,
}

/// Exact mean losses of `model` over entire dataset pools (chunked to bound
/// memory). Supervised and consistency means use their own pool sizes.
pub fn dataset_loss(model: &MlpModel, dataset: &Dataset, lambda: f64) -> Result<LossBreakdown> {
    let chunk = 512;
    let mut sup_sum = 0.0;
    for block in dataset.labeled.chunks(chunk) {
        let labeled: Vec<(&[f64], &[f64])> = block
            .iter()
            .map(|v| (v.signal.coeffs(), v.truth.coeffs()))
            .collect();
        let batch = TrainingBatch::new(&labeled, &[])?;
        sup_sum += loss(model, &batch, 0.0)?.supervised * block.len() as f64;
    }
    let supervised = sup_sum / dataset.labeled.len().max(1) as f64;
    let mut cons_sum = 0.0;
    for block in dataset.paired.chunks(chunk) {
        let m = block.len() as f64;
        let mut gap_sq = 0.0;
        for p in block {
            let ya = model.forward(p.a.coeffs())?;
            let yb = model.forward(p.b.coeffs())?;
            gap_sq += ya
                .iter()
                .zip(&yb)
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>();
        }
        cons_sum += gap_sq / m * m;
    }
    let consistency = cons_sum / dataset.paired.len().max(1) as f64;
    Ok(LossBreakdown {
        supervised,
        consistency,
        total: supervised + lambda * consistency,
    })
}

/// Supervised loss of `model` on a set of labeled indices.
fn validation_loss(model: &MlpModel, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    let labeled: Vec<(&[f64], &[f64])> = idx
        .iter()
        .map(|&i| {
            let v = &dataset.labeled[i];
            (v.signal.coeffs(), v.truth.coeffs())
        })
        .collect();
    let batch = TrainingBatch::new(&labeled, &[])?;
    Ok(loss(model, &batch, 0.0)?.supervised)
}

/// Trains one model on the given labeled indices. Paired batches cycle
/// through a shuffled pool, reshuffling on exhaustion. The paired pool is
/// shuffled and consumed whenever paired data exists, even at `lambda = 0`,
/// so runs differing only in `lambda` see identical batch sequences.
fn fit(
    dataset: &Dataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    init_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<MlpModel> {
    if cfg.batch_size > train_idx.len() {
        return Err(Error::invalid_config(format!(
            "batch size {} exceeds the {} available training voxels",
            cfg.batch_size,
            train_idx.len()
        )));
    }
    let use_pairs = !dataset.paired.is_empty();
    if use_pairs && cfg.batch_size > dataset.paired.len() {
        return Err(Error::invalid_config(format!(
            "batch size {} exceeds the {} available paired voxels",
            cfg.batch_size,
            dataset.paired.len()
        )));
    }
    let k_in = dataset.labeled[train_idx[0]].signal.coeffs().len();
    let k_out = dataset.labeled[train_idx[0]].truth.coeffs().len();
    let mut model = MlpModel::harmonizer(k_in, k_out, init_seed)?;
    let mut state = RmsPropState::new(&model);
    let opt = RmsPropParams {
        learning_rate: cfg.learning_rate,
        rho: cfg.rho,
        epsilon: cfg.epsilon,
    };
    opt.validate()?;

    let mut pair_order: Vec<usize> = (0..dataset.paired.len()).collect();
    let mut pair_cursor = usize::MAX; // force initial shuffle
    let mut order: Vec<usize> = train_idx.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let batches = order.len() / cfg.batch_size;
        for bi in 0..batches {
            let chunk = &order[bi * cfg.batch_size..(bi + 1) * cfg.batch_size];
            let labeled: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&i| {
                    let v = &dataset.labeled[i];
                    (v.signal.coeffs(), v.truth.coeffs())
                })
                .collect();
            let pairs: Vec<(&[f64], &[f64])> = if use_pairs {
                if pair_cursor.saturating_add(cfg.batch_size) > pair_order.len() {
                    pair_order.shuffle(rng);
                    pair_cursor = 0;
                }
                let slice = &pair_order[pair_cursor..pair_cursor + cfg.batch_size];
                pair_cursor += cfg.batch_size;
                slice
                    .iter()
                    .map(|&i| {
                        let p = &dataset.paired[i];
                        (p.a.coeffs(), p.b.coeffs())
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let batch = TrainingBatch::new(&labeled, &pairs)?;
            let (grads, _) = gradients(&model, &batch, cfg.lambda)?;
            rmsprop_step(&mut model, &grads, &mut state, &opt)?;
        }
    }
    Ok(model)
}

/// K-fold cross-validation followed by a final retrain on all labeled data.
///
/// Fold `k` holds out a `val_fraction`-sized window starting at `k n / folds`
/// of a single seeded shuffle (windows wrap around), trains on the rest, and
/// records held-out supervised losses before and after training. The final
/// model always retrains on every labeled voxel. All randomness (shuffles,
/// per-fold init seeds) flows from one generator seeded by `cfg.seed`, so a
/// fixed configuration reproduces bit-identical models.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.labeled.is_empty() {
        return Err(Error::invalid_config(
            "training requires labeled voxels",
        ));
    }
    if cfg.lambda > 0.0 && dataset.paired.is_empty() {
        return Err(Error::invalid_config(
            "consistency weight is positive but the dataset has no paired voxels",
        ));
    }
    if !(cfg.lambda.is_finite() && cfg.lambda >= 0.0) {
        return Err(Error::invalid_config(format!(
            "consistency weight must be finite and >= 0, got {}",
            cfg.lambda
        )));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid_config("epochs must be >= 1"));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::invalid_config(format!(
            "val_fraction must lie in [0, 1), got {}",
            cfg.val_fraction
        )));
    }
    let n = dataset.labeled.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7472_61696e)); // "train"

    let mut folds = Vec::new();
    let val_len = (n as f64 * cfg.val_fraction).floor() as usize;
    if cfg.folds >= 2 && val_len >= 1 {
        let mut shuffled: Vec<usize> = (0..n).collect();
        shuffled.shuffle(&mut rng);
        for k in 0..cfg.folds {
            let start = k * n / cfg.folds;
            let mut in_val = vec![false; n];
            let val_idx: Vec<usize> = (0..val_len)
                .map(|i| {
                    let v = shuffled[(start + i) % n];
                    in_val[v] = true;
                    v
                })
                .collect();
            let train_idx: Vec<usize> = shuffled.iter().copied().filter(|&i| !in_val[i]).collect();
            let init_seed = rng.next_u64();
            let probe = MlpModel::harmonizer(
                dataset.labeled[0].signal.coeffs().len(),
                dataset.labeled[0].truth.coeffs().len(),
                init_seed,
            )?;
            let val_initial = validation_loss(&probe, dataset, &val_idx)?;
            let model = fit(dataset, &train_idx, cfg, init_seed, &mut rng)?;
            let val_final = validation_loss(&model, dataset, &val_idx)?;
            folds.push(FoldReport {
                fold: k,
                n_train: train_idx.len(),
                n_val: val_idx.len(),
                val_supervised_initial: val_initial,
                val_supervised_final: val_final,
            });
        }
    }

    let all: Vec<usize> = (0..n).collect();
    let init_seed = rng.next_u64();
    let model = fit(dataset, &all, cfg, init_seed, &mut rng)?;
    let final_loss = dataset_loss(&model, dataset, cfg.lambda)?;
    Ok(TrainOutcome {
        model,
        report: CvReport {
            folds,
            final_supervised: final_loss.supervised,
            final_consistency: final_loss.consistency,
            final_total: final_loss.total,
        },
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    /// Row-major `out_dim x in_dim` weights.
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    input_dim: usize,
    /// Output width of each layer.
    dims: Vec<usize>,
    activations: Vec<Activation>,
    layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl MlpModel {
    /// Serializes to versioned JSON (atomically: temp file + rename).
    /// `provenance` is free-form metadata (resolved configuration, seed)
    /// embedded in the file.
    pub fn save(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            input_dim: self.input_dim,
            dims: self.layer_dims(),
            activations: self.activations(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.w.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect(),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
            provenance,
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    /// Loads a model saved by [`MlpModel::save`], validating version, layer
    /// shapes, and finiteness. Returns the model and its provenance blob.
    pub fn load(path: &Path) -> Result<(Self, Option<serde_json::Value>)> {
        let text = read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::malformed(path, format!("not a valid model file: {e}")))?;
        if file.version != MODEL_FORMAT_VERSION {
            return Err(Error::malformed(
                path,
                format!(
                    "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                    file.version
                ),
            ));
        }
        if file.dims.len() != file.layers.len() || file.dims.len() != file.activations.len() {
            return Err(Error::malformed(
                path,
                format!(
                    "inconsistent layer counts: {} dims, {} activations, {} layers",
                    file.dims.len(),
                    file.activations.len(),
                    file.layers.len()
                ),
            ));
        }
        if file.layers.is_empty() || file.input_dim == 0 {
            return Err(Error::malformed(path, "model has no layers"));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        let mut fan_in = file.input_dim;
        for (i, (lf, &out)) in file.layers.iter().zip(&file.dims).enumerate() {
            if lf.w.len() != out * fan_in {
                return Err(Error::malformed(
                    path,
                    format!(
                        "layer {i}: expected {} x {} = {} weights, got {}",
                        out,
                        fan_in,
                        out * fan_in,
                        lf.w.len()
                    ),
                ));
            }
            if lf.b.len() != out {
                return Err(Error::malformed(
                    path,
                    format!("layer {i}: expected {out} biases, got {}", lf.b.len()),
                ));
            }
            if lf.w.iter().chain(lf.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::malformed(
                    path,
                    format!("layer {i}: non-finite parameter"),
                ));
            }
            layers.push(Layer {
                w: DMatrix::from_row_slice(out, fan_in, &lf.w),
                b: DVector::from_column_slice(&lf.b),
                activation: file.activations[i],
            });
            fan_in = out;
        }
        Ok((
            MlpModel {
                input_dim: file.input_dim,
                layers,
            },
            file.provenance,
        ))
    }
}
