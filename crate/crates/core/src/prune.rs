//! Global L1-unstructured magnitude pruning.
//!
//! One threshold is chosen over the absolute values of all participating
//! parameters: the k-th smallest, `k = floor(ratio * N)`. Every element
//! whose magnitude is not strictly greater than the threshold is set to
//! zero, so ties at the threshold are all pruned.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vit::{ParamGroup, ParamStore};

/// Which parameter groups take part. By default every tensor does.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneOptions {
    pub exclude: Vec<ParamGroup>,
}

impl PruneOptions {
    pub fn includes(&self, name: &str) -> bool {
        !self.exclude.contains(&ParamGroup::of(name))
    }
}

/// Keep-mask for one parameter tensor (`true` = kept).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMask {
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub masks: BTreeMap<String, TensorMask>,
    pub threshold: f64,
    pub ratio: f64,
}

impl PruneMask {
    /// Zeroes every masked-out element. Applying the same mask again
    /// changes nothing.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (name, mask) in &self.masks {
            let t = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("mask for unknown parameter `{name}`")))?;
            if t.shape() != mask.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "mask for `{name}` has shape {:?}, parameter has {:?}",
                    mask.shape,
                    t.shape()
                )));
            }
            for (v, &keep) in t.data_mut().iter_mut().zip(&mask.keep) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn kept(&self) -> usize {
        self.masks.values().map(|m| m.keep.iter().filter(|&&k| k).count()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSparsity {
    pub name: String,
    pub total: usize,
    pub zeros: usize,
}

impl TensorSparsity {
    pub fn sparsity(&self) -> f64 {
        self.zeros as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    /// Requested ratio; `None` for a plain sparsity census.
    pub ratio: Option<f64>,
    pub threshold: Option<f64>,
    pub n_total: usize,
    /// Exact zeros after pruning, including any that were zero before.
    pub n_zeroed: usize,
    pub per_tensor: Vec<TensorSparsity>,
}

impl PruneReport {
    pub fn sparsity(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_zeroed as f64 / self.n_total as f64
        }
    }

    pub fn n_nonzero(&self) -> usize {
        self.n_total - self.n_zeroed
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("pruning ratio must be in (0, 1), got {ratio}")));
    }
    Ok(())
}

/// Number of elements the ratio asks for: `floor(ratio * n)`.
pub fn prune_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).floor() as usize
}

/// k-th smallest (1-based) absolute value of `values`, by selection.
pub fn kth_smallest_abs(values: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(Error::Index(format!("k = {k} for {} values", values.len())));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let (_, kth, _) = abs.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

fn gather(store: &ParamStore, options: &PruneOptions) -> Vec<f64> {
    let mut all = Vec::new();
    for (name, t) in store.iter() {
        if options.includes(name) {
            all.extend_from_slice(t.data());
        }
    }
    all
}

/// Global magnitude threshold over every participating parameter.
pub fn global_threshold(store: &ParamStore, ratio: f64) -> Result<f64> {
    global_threshold_with(store, ratio, &PruneOptions::default())
}

pub fn global_threshold_with(
    store: &ParamStore,
    ratio: f64,
    options: &PruneOptions,
) -> Result<f64> {
    check_ratio(ratio)?;
    let all = gather(store, options);
    let k = prune_count(ratio, all.len());
    if k == 0 {
        return Err(Error::DegenerateRatio { ratio, total: all.len() });
    }
    kth_smallest_abs(&all, k)
}

/// Prunes `store` in place and returns the mask and report.
pub fn apply_prune(store: &mut ParamStore, ratio: f64) -> Result<(PruneMask, PruneReport)> {
    apply_prune_with(store, ratio, &PruneOptions::default())
}

pub fn apply_prune_with(
    store: &mut ParamStore,
    ratio: f64,
    options: &PruneOptions,
) -> Result<(PruneMask, PruneReport)> {
    let threshold = global_threshold_with(store, ratio, options)?;
    let mut masks = BTreeMap::new();
    for (name, t) in store.iter() {
        if options.includes(name) {
            let keep = t.data().iter().map(|v| v.abs() > threshold).collect();
            masks.insert(name.to_string(), TensorMask { shape: t.shape().to_vec(), keep });
        }
    }
    let mask = PruneMask { masks, threshold, ratio };
    mask.apply(store)?;
    let mut report = census(store, options);
    report.ratio = Some(ratio);
    report.threshold = Some(threshold);
    Ok((mask, report))
}

fn census(store: &ParamStore, options: &PruneOptions) -> PruneReport {
    let per_tensor: Vec<TensorSparsity> = store
        .iter()
        .filter(|(name, _)| options.includes(name))
        .map(|(name, t)| TensorSparsity {
            name: name.to_string(),
            total: t.len(),
            zeros: t.data().iter().filter(|v| **v == 0.0).count(),
        })
        .collect();
    PruneReport {
        ratio: None,
        threshold: None,
        n_total: per_tensor.iter().map(|s| s.total).sum(),
        n_zeroed: per_tensor.iter().map(|s| s.zeros).sum(),
        per_tensor,
    }
}

/// Exact zero counts per tensor and overall.
pub fn sparsity_report(store: &ParamStore) -> PruneReport {
    census(store, &PruneOptions::default())
}
