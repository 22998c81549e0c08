//! CSV and Markdown outputs. Floats are written with 17 significant
//! digits, which round-trips every f64 exactly.

use std::path::Path;

use spvt::train::{SweepArm, TrainRunRecord};

pub const METRICS_HEADER: [&str; 7] =
    ["epoch", "ce_loss", "penalty", "total_loss", "train_acc", "test_acc", "seconds"];

pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// Per-epoch metrics. `seconds` is written as 0 unless `record_time`.
pub fn metrics_csv(records: &[TrainRunRecord], record_time: bool) -> csv::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        let seconds = if record_time { r.seconds } else { 0.0 };
        w.write_record([
            r.epoch.to_string(),
            fmt_f64(r.ce_loss),
            fmt_f64(r.penalty),
            fmt_f64(r.total_loss),
            fmt_f64(r.train_acc),
            fmt_f64(r.test_acc),
            fmt_f64(seconds),
        ])?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Wall-clock seconds per epoch, kept apart from the reproducible metrics.
pub fn timing_csv(records: &[TrainRunRecord]) -> csv::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "seconds"])?;
    for r in records {
        w.write_record([r.epoch.to_string(), fmt_f64(r.seconds)])?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn arm_name(arm: &SweepArm) -> &'static str {
    if arm.with_sparse {
        "sparse"
    } else {
        "baseline"
    }
}

/// `arm,ratio,accuracy`, with each arm's unpruned accuracy at ratio 0.
pub fn sweep_csv(arms: &[&SweepArm]) -> csv::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "ratio", "accuracy"])?;
    for arm in arms {
        w.write_record([arm_name(arm).to_string(), fmt_f64(0.0), fmt_f64(arm.baseline_accuracy)])?;
        for row in &arm.rows {
            w.write_record([arm_name(arm).to_string(), fmt_f64(row.ratio), fmt_f64(row.accuracy)])?;
        }
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Per-ratio `sparse − baseline` accuracy differences, pruned ratios only.
pub fn differences(baseline: &SweepArm, sparse: &SweepArm) -> Vec<(f64, f64)> {
    baseline
        .rows
        .iter()
        .zip(&sparse.rows)
        .map(|(b, s)| (b.ratio, s.accuracy - b.accuracy))
        .collect()
}

pub fn mean_difference(diffs: &[(f64, f64)]) -> Option<f64> {
    if diffs.is_empty() {
        None
    } else {
        Some(diffs.iter().map(|(_, d)| d).sum::<f64>() / diffs.len() as f64)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Paired comparison table in Markdown. Accuracies are percentages.
pub fn sweep_markdown(baseline: &SweepArm, sparse: &SweepArm) -> String {
    let mut s = String::from(
        "| pruning ratio | prune only (%) | sparse then prune (%) | difference (pp) |\n\
         |---|---|---|---|\n",
    );
    s += &format!(
        "| 0.00 | {} | {} | {} |\n",
        pct(baseline.baseline_accuracy),
        pct(sparse.baseline_accuracy),
        pct(sparse.baseline_accuracy - baseline.baseline_accuracy)
    );
    for ((b, sp), (ratio, d)) in baseline.rows.iter().zip(&sparse.rows).zip(differences(baseline, sparse)) {
        s += &format!("| {ratio:.2} | {} | {} | {} |\n", pct(b.accuracy), pct(sp.accuracy), pct(d));
    }
    match mean_difference(&differences(baseline, sparse)) {
        Some(m) => {
            let sign = if m > 0.0 {
                "positive"
            } else if m < 0.0 {
                "negative"
            } else {
                "zero"
            };
            s += &format!("| mean over pruned ratios | | | {} |\n\n", pct(m));
            s += &format!("Mean difference: {} ({sign}).\n", fmt_f64(m));
        }
        None => s += "\nNo pruning ratios were requested.\n",
    }
    s
}

pub fn write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    std::fs::write(path, bytes)
}
