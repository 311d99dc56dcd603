//! Evaluation: metrics, synthetic datasets and the dataset runner.

pub mod metrics;
pub mod synth;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detect::{DetectorProvider, FeatureProvider, RackImage};
use crate::model::Catalog;
use crate::search::{run_search, IterationRecord, SearchError, SearchParams};

pub use metrics::{compliance_metrics, detection_metrics, MetricReport, DEFAULT_IOU_MIN};
pub use synth::{generate_synthetic, AnnotatedRack, PerturbationKind, SynthSpec, SyntheticDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RackEvaluation {
    pub key: String,
    pub detection: MetricReport,
    pub compliance: MetricReport,
    pub matched: u64,
    pub required: u64,
    pub mu: f64,
    /// Produced statuses equal the ground-truth ones, position by position.
    pub statuses_match: bool,
    pub perturbation: Option<PerturbationKind>,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub detection: MetricReport,
    pub compliance: MetricReport,
    pub racks: Vec<RackEvaluation>,
}

impl EvaluationReport {
    pub fn fully_compliant_racks(&self) -> usize {
        self.racks.iter().filter(|r| r.matched == r.required).count()
    }

    pub fn status_reproduction(&self) -> f64 {
        if self.racks.is_empty() {
            return 1.0;
        }
        self.racks.iter().filter(|r| r.statuses_match).count() as f64 / self.racks.len() as f64
    }

    /// Plain-text tables: pooled detection and compliance scores, then one
    /// line per rack.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, m: &MetricReport| {
            let _ = writeln!(
                out,
                "{name:<12} {:>9.3} {:>9.3} {:>9.3} {:>6} {:>6} {:>6}",
                m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            );
        };
        let header = format!(
            "{:<12} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}\n",
            "", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        out.push_str("Detection (IoU >= 0.5)\n");
        out.push_str(&header);
        row(&mut out, "all racks", &self.detection);
        out.push_str("\nCompliance (group level)\n");
        out.push_str(&header);
        row(&mut out, "all racks", &self.compliance);
        let _ = writeln!(
            out,
            "\nracks {}  fully compliant {}  statuses reproduced {:.1}%\n",
            self.racks.len(),
            self.fully_compliant_racks(),
            100.0 * self.status_reproduction()
        );
        let _ = writeln!(
            out,
            "{:<12} {:>14} {:>8} {:>6} {:>7} {:>7}  perturbation",
            "rack", "mu", "iters", "det f1", "cmp f1", "truth"
        );
        for r in &self.racks {
            let _ = writeln!(
                out,
                "{:<12} {:>8}/{:<5} {:>8} {:>6.3} {:>7.3} {:>7}  {}",
                r.key,
                r.matched,
                r.required,
                r.trace.len(),
                r.detection.f1,
                r.compliance.f1,
                if r.statuses_match { "yes" } else { "no" },
                r.perturbation
                    .map(|p| format!("{p:?}"))
                    .unwrap_or_else(|| "-".into())
            );
        }
        out
    }
}

pub fn evaluate_rack(
    rack: &AnnotatedRack,
    catalog: &Catalog,
    detector: &dyn DetectorProvider,
    features: &dyn FeatureProvider,
    params: &SearchParams,
) -> Result<RackEvaluation, SearchError> {
    let image = RackImage::new(rack.key.clone(), rack.image.clone());
    let outcome = run_search(&image, &rack.reference, catalog, detector, features, params)?;
    let result = &outcome.result;
    Ok(RackEvaluation {
        key: rack.key.clone(),
        detection: detection_metrics(&outcome.detections, &rack.detections, DEFAULT_IOU_MIN),
        compliance: compliance_metrics(result, &rack.alignment),
        matched: result.matched,
        required: result.required,
        mu: result.mu(),
        statuses_match: metrics::position_keys(result) == metrics::position_keys(&rack.alignment),
        perturbation: rack.perturbation.as_ref().map(|p| p.kind),
        trace: outcome.trace,
    })
}

/// Evaluates every rack, spreading racks over the available cores. Results
/// keep the input order.
pub fn evaluate_racks(
    racks: &[AnnotatedRack],
    catalog: &Catalog,
    detector: &dyn DetectorProvider,
    features: &dyn FeatureProvider,
    params: &SearchParams,
) -> Result<EvaluationReport, SearchError> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(racks.len().max(1));
    let chunk = racks.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<RackEvaluation>, SearchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = racks
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| evaluate_rack(r, catalog, detector, features, params))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut evaluated = Vec::with_capacity(racks.len());
    for part in results {
        evaluated.extend(part?);
    }
    let pool = |f: fn(&RackEvaluation) -> MetricReport| {
        evaluated.iter().fold(MetricReport::from_counts(0, 0, 0), |acc, r| acc.merge(&f(r)))
    };
    Ok(EvaluationReport {
        detection: pool(|r| r.detection),
        compliance: pool(|r| r.compliance),
        racks: evaluated,
    })
}
