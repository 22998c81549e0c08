//! Finite-difference verification of the penalized loss gradient at each
//! sparse hook position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{finite_diff_at, Graph};
use crate::error::Result;
use crate::sparse::{total_loss, SparseConfig, SparsePosition};
use crate::tensor::Tensor;
use crate::train::batch_gradients;
use crate::vit::{self, init_params, ModelVars, ParamStore, ViTConfig};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms, so the
/// effective absolute tolerance is `TOLERANCE * GRAD_FLOOR = 1e-8`. The
/// central-difference rounding noise (~ulp(loss)/step) is around 1e-9 for
/// losses of order 10, and some gradients (key biases) are exactly zero.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    pub seed: u64,
    pub batch: usize,
    /// Penalty weight; `None` uses the default `1 / n_feature` per position.
    pub lambda: Option<f64>,
    /// Coordinates sampled from each parameter tensor.
    pub samples_per_tensor: usize,
    /// Std of the Gaussian jitter added to every initialized parameter so
    /// biases, norms and the class token sit at a generic point.
    pub jitter: f64,
    /// Negative control: perturbs the analytic gradient at this position.
    pub fault: Option<SparsePosition>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            seed: 0,
            batch: 1,
            lambda: None,
            samples_per_tensor: 4,
            jitter: 0.05,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PositionCheck {
    pub position: SparsePosition,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coordinates: usize,
}

impl PositionCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// `|a − n| / max(|a| + |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRAD_FLOOR)
}

/// Initialized parameters plus Gaussian jitter.
pub fn generic_params(config: &ViTConfig, seed: u64, jitter: f64) -> Result<ParamStore> {
    let mut store = init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("finite std");
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(store)
}

/// Penalized loss value only.
pub fn loss_value(
    params: &ParamStore,
    config: &ViTConfig,
    images: &Tensor,
    labels: &[usize],
    sparse: &SparseConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params, config)?;
    let mut taps = sparse.tap();
    let logits = vit::forward(&mut g, &vars, config, images, &mut taps)?;
    let ce = g.cross_entropy(logits, labels)?;
    let loss = total_loss(&mut g, ce, &taps, sparse)?;
    Ok(g.value(loss.total).item())
}

/// Random images in `[0, 1]` and labels.
pub fn random_batch(config: &ViTConfig, batch: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    let s = config.image_size;
    let data = (0..batch * s * s * config.channels).map(|_| rng.gen::<f64>()).collect();
    let images = Tensor::new(vec![batch, s, s, config.channels], data)?;
    let labels = (0..batch).map(|_| rng.gen_range(0..config.num_classes)).collect();
    Ok((images, labels))
}

/// Compares analytic and central-difference gradients of the penalized
/// loss at sampled coordinates of every parameter tensor.
pub fn check_position(
    config: &ViTConfig,
    position: SparsePosition,
    opts: &GradcheckOptions,
) -> Result<PositionCheck> {
    let params = generic_params(config, opts.seed, opts.jitter)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let (images, labels) = random_batch(config, opts.batch, &mut rng)?;
    let sparse = match opts.lambda {
        Some(lambda) => SparseConfig::new(position, lambda)?,
        None => SparseConfig::with_default_lambda(position, config)?,
    };

    let analytic = batch_gradients(&params, config, &images, &labels, &sparse)?.grads;
    let mut worst = (0.0f64, String::new());
    let mut coordinates = 0;
    for (name, tensor) in params.iter() {
        let count = opts.samples_per_tensor.min(tensor.len());
        let indices: Vec<usize> = rand::seq::index::sample(&mut rng, tensor.len(), count).into_vec();
        let mut probe_store = params.clone();
        let numeric = finite_diff_at(
            |p| {
                *probe_store.get_mut(name).expect("same store") = p.clone();
                loss_value(&probe_store, config, &images, &labels, &sparse)
                    .expect("loss evaluates at the unperturbed point")
            },
            tensor,
            opts.step,
            &indices,
        );
        let grad = &analytic[name];
        for (&i, &n) in indices.iter().zip(&numeric) {
            let mut a = grad.data()[i];
            if opts.fault == Some(position) {
                a = a * 1.01 + 1e-3;
            }
            let err = relative_error(a, n);
            if worst.1.is_empty() || err > worst.0 {
                worst = (err, format!("{name}[{i}]"));
            }
            coordinates += 1;
        }
    }
    Ok(PositionCheck { position, max_rel_err: worst.0, worst_param: worst.1, coordinates })
}

/// Runs [`check_position`] for all five positions.
pub fn check_all(config: &ViTConfig, opts: &GradcheckOptions) -> Result<Vec<PositionCheck>> {
    SparsePosition::ALL.iter().map(|&p| check_position(config, p, opts)).collect()
}
