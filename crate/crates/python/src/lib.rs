//! Python bindings.
//!
//! Planograms cross the boundary as lists of `(label, quantity)` tuples and
//! boxes as `(x0, y0, x1, y1)` tuples.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use planogram_core::align::{align_and_control, AlignParams, AlignmentResult, BorderPenalty};
use planogram_core::change::{self, ChangeParams, GrayFrame};
use planogram_core::detect;
use planogram_core::eval::metrics::{self, MetricReport};
use planogram_core::model::{self, BoxRect, LocalFeature, PlanogramSeq};
use planogram_core::power::{self, HarvestSource, NodeEnergyConfig};
use planogram_core::search;

type Rect = (f64, f64, f64, f64);

fn rect(r: Rect) -> BoxRect {
    BoxRect::from_corners(r.0, r.1, r.2, r.3)
}

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Detection", from_py_object)]
#[derive(Clone)]
pub struct PyDetection {
    #[pyo3(get)]
    label: String,
    #[pyo3(get)]
    bbox: Rect,
    #[pyo3(get)]
    weight: f64,
}

#[pymethods]
impl PyDetection {
    #[new]
    #[pyo3(signature = (label, bbox, weight = 1.0))]
    fn new(label: String, bbox: Rect, weight: f64) -> Self {
        Self { label, bbox, weight }
    }

    fn __repr__(&self) -> String {
        format!("Detection({:?}, {:?}, weight={})", self.label, self.bbox, self.weight)
    }
}

impl PyDetection {
    fn to_core(&self) -> model::Detection {
        model::Detection::new(self.label.clone(), rect(self.bbox), self.weight)
    }
}

#[pyclass(name = "Alignment", skip_from_py_object)]
pub struct PyAlignment(AlignmentResult);

fn pairs(seq: &PlanogramSeq) -> Vec<(String, u32)> {
    seq.iter().map(|g| (g.label.to_string(), g.quantity)).collect()
}

#[pymethods]
impl PyAlignment {
    /// Aligned reference groups; gaps are `("-", 0)`.
    #[getter]
    fn reference(&self) -> Vec<(String, u32)> {
        pairs(&self.0.ref_aligned)
    }

    #[getter]
    fn detected(&self) -> Vec<(String, u32)> {
        pairs(&self.0.det_aligned)
    }

    #[getter]
    fn statuses(&self) -> Vec<String> {
        self.0.statuses.iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn matched(&self) -> u64 {
        self.0.matched
    }

    #[getter]
    fn required(&self) -> u64 {
        self.0.required
    }

    #[getter]
    fn score(&self) -> i64 {
        self.0.score
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.0.mu()
    }

    fn is_fully_compliant(&self) -> bool {
        self.0.is_fully_compliant()
    }

    fn __repr__(&self) -> String {
        format!("Alignment(mu={}/{}, statuses={:?})", self.0.matched, self.0.required, self.statuses())
    }
}

fn seq(groups: Vec<(String, u32)>) -> PyResult<PlanogramSeq> {
    let s = PlanogramSeq::from_pairs(&groups);
    s.validate().map_err(value_error)?;
    Ok(s)
}

/// Groups detections left to right into `(label, quantity)` runs.
#[pyfunction]
fn obj_to_planogram(detections: Vec<PyDetection>) -> Vec<(String, u32)> {
    let dets: Vec<model::Detection> = detections.iter().map(PyDetection::to_core).collect();
    model::obj_to_planogram(&dets).pairs()
}

/// Aligns a detected planogram against its reference and scores compliance.
#[pyfunction]
#[pyo3(signature = (reference, detected, dynamic_border = false))]
fn align(reference: Vec<(String, u32)>, detected: Vec<(String, u32)>, dynamic_border: bool) -> PyResult<PyAlignment> {
    let params = AlignParams {
        border: if dynamic_border { BorderPenalty::Dynamic } else { BorderPenalty::Unit },
        ..Default::default()
    };
    align_and_control(&seq(reference)?, &seq(detected)?, &params)
        .map(PyAlignment)
        .map_err(value_error)
}

#[pyfunction]
fn iou(a: Rect, b: Rect) -> f64 {
    model::iou(&rect(a), &rect(b))
}

#[pyfunction]
fn tau_alpha(alpha: f64) -> f64 {
    detect::tau_alpha(alpha)
}

#[pyfunction]
fn decay_alpha(alpha: f64) -> f64 {
    search::decay_alpha(alpha)
}

/// Indices of boxes kept by greedy NMS, highest score first.
#[pyfunction]
#[pyo3(signature = (boxes, scores, iou_threshold = 0.5))]
fn greedy_nms(boxes: Vec<Rect>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(value_error("boxes and scores differ in length"));
    }
    let items: Vec<(BoxRect, f64)> = boxes.into_iter().map(rect).zip(scores).collect();
    Ok(detect::greedy_nms(&items, iou_threshold))
}

/// Scene indices accepted by the ratio test for the model descriptors.
#[pyfunction]
fn match_features(model: Vec<Vec<f32>>, scene: Vec<Vec<f32>>, tau: f64) -> Vec<usize> {
    let wrap = |d: Vec<Vec<f32>>| -> Vec<LocalFeature> {
        d.into_iter().map(|descriptor| LocalFeature { x: 0.0, y: 0.0, descriptor }).collect()
    };
    detect::match_features(&wrap(model), &wrap(scene), tau)
}

#[pyfunction]
fn pixel_change_measure(a: f64, b: f64) -> f64 {
    change::pixel_change_measure(a, b)
}

fn frame(rows: Vec<Vec<f32>>) -> PyResult<GrayFrame> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(value_error("frame rows differ in length"));
    }
    GrayFrame::new(w, h, rows.into_iter().flatten().collect()).map_err(value_error)
}

/// Blurs both frames and compares them; returns `(changed, changed_fraction)`.
#[pyfunction]
#[pyo3(signature = (reference, live, pixel_threshold = 0.15, change_fraction_threshold = 0.02))]
fn detect_change(
    reference: Vec<Vec<f32>>,
    live: Vec<Vec<f32>>,
    pixel_threshold: f64,
    change_fraction_threshold: f64,
) -> PyResult<(bool, f64)> {
    let params = ChangeParams { pixel_threshold, change_fraction_threshold, ..Default::default() };
    params.validate().map_err(value_error)?;
    let a = change::preprocess(&frame(reference)?, &params);
    let b = change::preprocess(&frame(live)?, &params);
    let out = change::detect_change(&a, &b, &params).map_err(value_error)?;
    Ok((out.changed, out.changed_fraction))
}

fn node(wakes_per_day: u32, active_current: f64, active_seconds: f64, hibernation_current: f64, capacity: f64) -> NodeEnergyConfig {
    let base = NodeEnergyConfig::default();
    let capture = active_seconds * base.capture_seconds / base.active_seconds_per_wake();
    NodeEnergyConfig {
        active_current,
        capture_seconds: capture,
        transfer_seconds: active_seconds - capture,
        wakes_per_day,
        hibernation_current,
        battery_capacity: capacity,
        ..base
    }
}

/// mAh per day for the duty cycle.
#[pyfunction]
#[pyo3(signature = (wakes_per_day = 2, active_current = 243.2, active_seconds = 12.0, hibernation_current = 0.006))]
fn daily_consumption(wakes_per_day: u32, active_current: f64, active_seconds: f64, hibernation_current: f64) -> f64 {
    power::daily_consumption(&node(wakes_per_day, active_current, active_seconds, hibernation_current, 1500.0))
}

/// Battery life in months, or `None` when harvesting covers consumption.
/// `solar_lux` adds the reference solar cell at that illuminance and
/// `rf_current` an RF harvester delivering that many mA.
#[pyfunction]
#[pyo3(signature = (
    wakes_per_day = 2,
    active_current = 243.2,
    active_seconds = 12.0,
    hibernation_current = 0.006,
    capacity = 1500.0,
    solar_lux = None,
    rf_current = None,
))]
fn battery_life(
    wakes_per_day: u32,
    active_current: f64,
    active_seconds: f64,
    hibernation_current: f64,
    capacity: f64,
    solar_lux: Option<f64>,
    rf_current: Option<f64>,
) -> Option<f64> {
    let cfg = node(wakes_per_day, active_current, active_seconds, hibernation_current, capacity);
    let mut sources = Vec::new();
    if let Some(lux) = solar_lux {
        sources.push(HarvestSource::solar_at_lux(lux));
    }
    if let Some(i) = rf_current {
        sources.push(HarvestSource::Rf { output_current: i });
    }
    power::battery_life(&cfg, &sources).months()
}

fn metric_tuple(m: MetricReport) -> (f64, f64, f64, u64, u64, u64) {
    (m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_)
}

/// `(precision, recall, f1, tp, fp, fn)` with greedy IoU matching.
#[pyfunction]
#[pyo3(signature = (predicted, truth, iou_min = 0.5))]
fn detection_metrics(
    predicted: Vec<PyDetection>,
    truth: Vec<PyDetection>,
    iou_min: f64,
) -> (f64, f64, f64, u64, u64, u64) {
    let p: Vec<_> = predicted.iter().map(PyDetection::to_core).collect();
    let t: Vec<_> = truth.iter().map(PyDetection::to_core).collect();
    metric_tuple(metrics::detection_metrics(&p, &t, iou_min))
}

/// Group-level comparison of two alignments against the same reference.
#[pyfunction]
fn compliance_metrics(result: PyRef<'_, PyAlignment>, truth: PyRef<'_, PyAlignment>) -> (f64, f64, f64, u64, u64, u64) {
    metric_tuple(metrics::compliance_metrics(&result.0, &truth.0))
}

#[pymodule]
fn planogram(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDetection>()?;
    m.add_class::<PyAlignment>()?;
    m.add_function(wrap_pyfunction!(obj_to_planogram, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(tau_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(decay_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_nms, m)?)?;
    m.add_function(wrap_pyfunction!(match_features, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_change_measure, m)?)?;
    m.add_function(wrap_pyfunction!(detect_change, m)?)?;
    m.add_function(wrap_pyfunction!(daily_consumption, m)?)?;
    m.add_function(wrap_pyfunction!(battery_life, m)?)?;
    m.add_function(wrap_pyfunction!(detection_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compliance_metrics, m)?)?;
    Ok(())
}
