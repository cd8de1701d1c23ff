use lesionaug_core::evalkit::{EvalReport, ThresholdMetrics};
use serde::{Deserialize, Serialize};

/// The five table columns of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map_at_05: f64,
    pub iou_050: ThresholdMetrics,
    pub iou_025: ThresholdMetrics,
}

impl Metrics {
    pub fn from_report(r: &EvalReport) -> Self {
        Metrics {
            map_at_05: r.map_at_05,
            iou_050: r.iou_050,
            iou_025: r.iou_025,
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.map_at_05,
            self.iou_050.sensitivity,
            self.iou_050.fps_per_slice,
            self.iou_025.sensitivity,
            self.iou_025.fps_per_slice,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Metrics {
            map_at_05: a[0],
            iou_050: ThresholdMetrics {
                sensitivity: a[1],
                fps_per_slice: a[2],
            },
            iou_025: ThresholdMetrics {
                sensitivity: a[3],
                fps_per_slice: a[4],
            },
        }
    }

    /// Column-wise mean; all zeros for no reports.
    pub fn mean(reports: &[EvalReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut acc = [0.0; 5];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(Metrics::from_report(r).to_array()) {
                *a += v;
            }
        }
        Metrics::from_array(acc.map(|a| a / n))
    }

    /// Column-wise sample standard deviation; zero below two reports.
    pub fn std(reports: &[EvalReport]) -> Self {
        if reports.len() < 2 {
            return Metrics::from_array([0.0; 5]);
        }
        let m = Metrics::mean(reports).to_array();
        let mut acc = [0.0; 5];
        for r in reports {
            for ((a, v), mu) in acc.iter_mut().zip(Metrics::from_report(r).to_array()).zip(m) {
                *a += (v - mu) * (v - mu);
            }
        }
        let d = (reports.len() - 1) as f64;
        Metrics::from_array(acc.map(|a| (a / d).sqrt()))
    }

    pub fn minus(&self, other: &Metrics) -> Self {
        let (a, b) = (self.to_array(), other.to_array());
        Metrics::from_array(std::array::from_fn(|i| a[i] - b[i]))
    }
}

/// Test-split results of one training arm over its detector replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n_real: usize,
    pub n_synthetic: usize,
    pub detector_seeds: Vec<u64>,
    pub mean: Metrics,
    pub std: Metrics,
    pub replicates: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub n_real: usize,
    pub n_synthetic: usize,
    pub n_replicates: usize,
    pub mean: Metrics,
    pub std: Metrics,
}

impl ComparisonRow {
    fn of(s: &ArmSummary) -> Self {
        ComparisonRow {
            arm: s.arm.clone(),
            n_real: s.n_real,
            n_synthetic: s.n_synthetic,
            n_replicates: s.replicates.len(),
            mean: s.mean,
            std: s.std,
        }
    }
}

/// Baseline and augmented rows plus the augmented-minus-baseline delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub baseline: ComparisonRow,
    pub augmented: ComparisonRow,
    pub delta: Metrics,
}

pub const COLUMNS: [&str; 5] = ["mAP@0.5", "Sens@0.5", "FPs/slice@0.5", "Sens@0.25", "FPs/slice@0.25"];

pub fn compare(baseline: &ArmSummary, augmented: &ArmSummary) -> Comparison {
    Comparison {
        columns: COLUMNS.iter().map(|s| s.to_string()).collect(),
        baseline: ComparisonRow::of(baseline),
        augmented: ComparisonRow::of(augmented),
        delta: augmented.mean.minus(&baseline.mean),
    }
}

/// Plain-text table: mean (std) per arm, then signed deltas to two decimals.
pub fn render_table(c: &Comparison) -> String {
    let label_w = [c.baseline.arm.len(), c.augmented.arm.len(), 5].into_iter().max().unwrap_or(5);
    let col_w = COLUMNS.iter().map(|s| s.len()).max().unwrap_or(0).max(13);
    let mut out = format!("{:label_w$}", "arm");
    for col in COLUMNS {
        out.push_str(&format!("  {col:>col_w$}"));
    }
    out.push('\n');
    for row in [&c.baseline, &c.augmented] {
        out.push_str(&format!("{:label_w$}", row.arm));
        for (m, s) in row.mean.to_array().into_iter().zip(row.std.to_array()) {
            out.push_str(&format!("  {:>col_w$}", format!("{m:.2} ({s:.2})")));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:label_w$}", "delta"));
    for d in c.delta.to_array() {
        // Avoid printing "-0.00" for tiny negative differences.
        let d = if d.abs() < 0.005 { 0.0 } else { d };
        out.push_str(&format!("  {:>col_w$}", format!("{d:+.2}")));
    }
    out.push('\n');
    out
}
