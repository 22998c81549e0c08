//! SGD fine-tuning with the penalized loss, evaluation, and the
//! sparse-then-prune versus prune-only sweep.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::prune::{apply_prune_with, PruneOptions};
use crate::sparse::{total_loss, SparseConfig, SparsePosition};
use crate::tensor::Tensor;
use crate::vit::{self, ModelVars, ParamStore, ViTConfig};

/// Gradient per parameter name.
pub type ParamGrads = HashMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    pub sparse: SparseConfig,
    /// Stop after the first epoch whose train accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.03,
            epochs: 20,
            weight_decay: 1e-4,
            momentum: 0.0,
            seed: 0,
            sparse: SparseConfig::disabled(),
            stop_at_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "train.learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Metrics of one epoch. Losses are per-sample means over the epoch's
/// mini-batches, taken with the parameters in effect for each batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunRecord {
    pub epoch: usize,
    pub ce_loss: f64,
    /// `lambda * Σ S`, averaged the same way as `ce_loss`.
    pub penalty: f64,
    pub total_loss: f64,
    pub train_acc: f64,
    /// `NaN` when there is no test split.
    pub test_acc: f64,
    pub seconds: f64,
}

impl TrainRunRecord {
    /// Equality of everything except wall-clock time, bit for bit.
    pub fn same_metrics(&self, other: &Self) -> bool {
        let bits = |r: &Self| {
            [r.ce_loss, r.penalty, r.total_loss, r.train_acc, r.test_acc].map(f64::to_bits)
        };
        self.epoch == other.epoch && bits(self) == bits(other)
    }
}

/// One optimizer step, as seen by a [`train_observed`] callback.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Parameters the step's forward pass used.
    pub params: &'a ParamStore,
    pub indices: &'a [usize],
    pub ce_loss: f64,
    pub penalty: f64,
    pub total_loss: f64,
}

/// `θ ← θ − lr·(g + weight_decay·θ)` for every parameter.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamGrads, lr: f64, weight_decay: f64) -> Result<()> {
    for (name, theta) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        if g.shape() != theta.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` is {:?}, parameter is {:?}",
                g.shape(),
                theta.shape()
            )));
        }
        for (t, &d) in theta.data_mut().iter_mut().zip(g.data()) {
            *t -= lr * (d + weight_decay * *t);
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum. With `momentum == 0` this is
/// exactly [`sgd_step`].
#[derive(Debug, Default)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, weight_decay: f64, momentum: f64) -> Self {
        Self { lr, weight_decay, momentum, velocity: HashMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.lr, self.weight_decay);
        }
        for (name, theta) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
            let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for ((t, &d), v) in theta.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + d + self.weight_decay * *t;
                *t -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// Loss values and parameter gradients for one mini-batch.
pub struct BatchOutcome {
    pub ce_loss: f64,
    pub penalty: f64,
    pub total_loss: f64,
    pub grads: ParamGrads,
}

/// Forward, penalized loss and backward on one batch.
pub fn batch_gradients(
    params: &ParamStore,
    config: &ViTConfig,
    images: &Tensor,
    labels: &[usize],
    sparse: &SparseConfig,
) -> Result<BatchOutcome> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params, config)?;
    let mut taps = sparse.tap();
    let logits = vit::forward(&mut g, &vars, config, images, &mut taps)?;
    let ce = g.cross_entropy(logits, labels)?;
    let loss = total_loss(&mut g, ce, &taps, sparse)?;
    let grads = g.backward(loss.total)?;
    let named = vars
        .named()
        .iter()
        .map(|(name, var)| {
            let grad = grads.get(*var).cloned().expect("every parameter is a grad leaf");
            (name.clone(), grad)
        })
        .collect();
    Ok(BatchOutcome {
        ce_loss: g.value(ce).item(),
        penalty: loss.penalty.map_or(0.0, |p| g.value(p).item()),
        total_loss: g.value(loss.total).item(),
        grads: named,
    })
}

/// Runs the epoch loop. See [`train_observed`].
pub fn train(
    params: &mut ParamStore,
    config: &ViTConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    tc: &TrainConfig,
) -> Result<Vec<TrainRunRecord>> {
    train_observed(params, config, train_set, test_set, tc, |_| {})
}

/// Epoch loop: seeded shuffle, mini-batches (last partial batch kept),
/// forward, penalized loss, backward, SGD update. After each epoch the
/// model is evaluated on both splits. `observer` sees every step before
/// its update is applied.
pub fn train_observed<F>(
    params: &mut ParamStore,
    config: &ViTConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    tc: &TrainConfig,
    mut observer: F,
) -> Result<Vec<TrainRunRecord>>
where
    F: FnMut(&StepEvent<'_>),
{
    tc.validate()?;
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    params.check_against(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Sgd::new(tc.learning_rate, tc.weight_decay, tc.momentum);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut ce_sum, mut pen_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(tc.batch_size) {
            let (images, labels) = train_set.batch(chunk)?;
            let out = batch_gradients(params, config, &images, &labels, &tc.sparse)?;
            observer(&StepEvent {
                epoch,
                step,
                params,
                indices: chunk,
                ce_loss: out.ce_loss,
                penalty: out.penalty,
                total_loss: out.total_loss,
            });
            let n = chunk.len() as f64;
            ce_sum += n * out.ce_loss;
            pen_sum += n * out.penalty;
            total_sum += n * out.total_loss;
            opt.step(params, &out.grads)?;
            step += 1;
        }
        let n = train_set.len() as f64;
        let train_acc = evaluate(params, config, train_set)?;
        let test_acc = if test_set.is_empty() { f64::NAN } else { evaluate(params, config, test_set)? };
        records.push(TrainRunRecord {
            epoch,
            ce_loss: ce_sum / n,
            penalty: pen_sum / n,
            total_loss: total_sum / n,
            train_acc,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        if tc.stop_at_train_acc.is_some_and(|target| train_acc >= target) {
            break;
        }
    }
    Ok(records)
}

pub const EVAL_BATCH: usize = 64;

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(params: &ParamStore, config: &ViTConfig, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk)?;
        let logits = vit::logits(params, config, &images)?;
        correct += logits
            .data()
            .chunks(config.num_classes)
            .zip(&labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One arm of the pruning sweep.
#[derive(Debug, Clone)]
pub struct SweepArm {
    pub with_sparse: bool,
    pub records: Vec<TrainRunRecord>,
    /// Test accuracy of the trained, unpruned model.
    pub baseline_accuracy: f64,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub accuracy: f64,
    pub sparsity: f64,
    pub threshold: f64,
}

/// Trains one arm from `init` (sparse penalty at the attention weight when
/// `with_sparse`, none otherwise), then prunes a fresh copy of the trained
/// parameters at every ratio and evaluates it on `test_set`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    init: &ParamStore,
    config: &ViTConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    ratios: &[f64],
    with_sparse: bool,
    prune: &PruneOptions,
) -> Result<SweepArm> {
    if let Some(bad) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Config(format!("sweep ratio {bad} outside (0, 1)")));
    }
    let mut tc = base.clone();
    tc.sparse = if with_sparse {
        let position = SparsePosition::AttentionWeight;
        if base.sparse.enabled && base.sparse.position == position {
            base.sparse
        } else {
            SparseConfig::with_default_lambda(position, config)?
        }
    } else {
        SparseConfig::disabled()
    };
    let mut params = init.clone();
    let records = train(&mut params, config, train_set, test_set, &tc)?;
    let baseline_accuracy = evaluate(&params, config, test_set)?;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut pruned = params.clone();
        let (_, report) = apply_prune_with(&mut pruned, ratio, prune)?;
        rows.push(SweepRow {
            ratio,
            accuracy: evaluate(&pruned, config, test_set)?,
            sparsity: report.sparsity(),
            threshold: report.threshold.unwrap_or(0.0),
        });
    }
    Ok(SweepArm { with_sparse, records, baseline_accuracy, rows })
}
