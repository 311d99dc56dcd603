//! Focused, iteratively relaxed search.
//!
//! Features and detector boxes are extracted once per rack. Each iteration
//! loosens the ratio test, re-matches only the products whose reference
//! groups are not yet `MT` (restricted to the stretch of rack between the
//! surrounding compliant groups), rebuilds the detected planogram and
//! re-aligns it. The loop ends on full compliance or after `stall_limit`
//! consecutive iterations without a better compliance ratio.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{align_and_control, AlignError, AlignParams, AlignmentResult, GroupStatus};
use crate::detect::providers::detect_in_rack;
use crate::detect::{
    detect_product, filter_boxes, CandidateRegion, DetectorProvider, FeatureProvider,
    ProviderError, RackImage, RatioSchedule, DEFAULT_NMS_IOU,
};
use crate::model::{iou, obj_to_planogram_indexed, Catalog, Detection, LocalFeature, PlanogramSeq};

pub const ALPHA_DECAY: f64 = 0.75;
pub const STALL_LIMIT: u32 = 6;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("provider failed: {0}")]
    Provider(#[from] ProviderError),
    #[error("reference label {0:?} is not in the catalog")]
    UnknownLabel(String),
    #[error(transparent)]
    Align(#[from] AlignError),
}

/// `alpha_new = 0.75 * alpha_old`.
pub fn decay_alpha(alpha: f64) -> f64 {
    ALPHA_DECAY * alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub ratio: RatioSchedule,
    pub alpha_decay: f64,
    pub stall_limit: u32,
    pub nms_iou: f64,
    /// ROI padding on each side, as a fraction of the product's reference width.
    pub roi_expand: f64,
    pub align: AlignParams,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            ratio: RatioSchedule::default(),
            alpha_decay: ALPHA_DECAY,
            stall_limit: STALL_LIMIT,
            nms_iou: DEFAULT_NMS_IOU,
            roi_expand: 0.5,
            align: AlignParams::default(),
        }
    }
}

/// Horizontal stretch of the rack to re-search for one product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiInterval {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

impl RoiInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.start <= x && x <= self.end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub intervals: Vec<RoiInterval>,
}

impl RoiSpec {
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Distinct labels in first-seen order.
    pub fn labels(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.intervals
            .iter()
            .map(|i| i.label.as_str())
            .filter(|l| seen.insert(*l))
            .collect()
    }

    pub fn covers(&self, label: &str, x: f64) -> bool {
        self.intervals.iter().any(|i| i.label == label && i.contains(x))
    }
}

/// ROI with the default padding of half a product width.
pub fn select_roi(result: &AlignmentResult, rack_width: f64, catalog: &Catalog) -> RoiSpec {
    select_roi_with(result, rack_width, catalog, 0.5)
}

/// For every reference group that is not `MT`, the stretch between the right
/// edge of the nearest `MT` group on its left and the left edge of the
/// nearest on its right (rack borders when there is none), padded by
/// `expand * width_ref` on both sides and clamped to the rack.
pub fn select_roi_with(
    result: &AlignmentResult,
    rack_width: f64,
    catalog: &Catalog,
    expand: f64,
) -> RoiSpec {
    let anchors: Vec<(usize, f64, f64)> = result
        .statuses
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == GroupStatus::MT)
        .filter_map(|(i, _)| result.det_aligned.groups[i].span.map(|s| (i, s.start, s.end)))
        .collect();
    let mut intervals = Vec::new();
    for (i, status) in result.statuses.iter().enumerate() {
        if *status == GroupStatus::MT {
            continue;
        }
        let Some(label) = result.ref_aligned.groups[i].label.product() else {
            continue;
        };
        let left = anchors.iter().rev().find(|a| a.0 < i).map_or(0.0, |a| a.2);
        let right = anchors.iter().find(|a| a.0 > i).map_or(rack_width, |a| a.1);
        let pad = catalog.get(label).map_or(0.0, |m| m.width_ref * expand);
        let start = (left - pad).max(0.0);
        let end = (right + pad).min(rack_width);
        if start < end {
            intervals.push(RoiInterval { label: label.to_string(), start, end });
        }
    }
    RoiSpec { intervals }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub alpha: f64,
    pub tau_alpha: f64,
    pub mu: f64,
    pub matched: u64,
    pub required: u64,
    pub statuses: Vec<GroupStatus>,
    pub stall_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub result: AlignmentResult,
    pub detections: Vec<Detection>,
    pub trace: Vec<IterationRecord>,
}

impl SearchOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Mutable loop state, exposed for inspection in the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub alpha: f64,
    pub mu: f64,
    pub mu_prev: f64,
    pub stall_count: u32,
    pub iteration: u32,
}

impl Default for SearchState {
    fn default() -> Self {
        Self { alpha: 1.0, mu: 0.0, mu_prev: 0.0, stall_count: 0, iteration: 0 }
    }
}

/// Indices of detections that belong to groups aligned as `MT`.
fn frozen_indices(detections: &[Detection], result: &AlignmentResult) -> HashSet<usize> {
    let (_, membership) = obj_to_planogram_indexed(detections);
    // k-th non-gap detected position <-> k-th group of the detected planogram.
    let mut group_status = Vec::new();
    for (g, s) in result.det_aligned.iter().zip(&result.statuses) {
        if !g.is_gap() {
            group_status.push(*s);
        }
    }
    membership
        .iter()
        .enumerate()
        .filter(|(_, &g)| group_status.get(g) == Some(&GroupStatus::MT))
        .map(|(i, _)| i)
        .collect()
}

pub fn run_search(
    rack: &RackImage,
    reference: &PlanogramSeq,
    catalog: &Catalog,
    detector: &dyn DetectorProvider,
    features: &dyn FeatureProvider,
    params: &SearchParams,
) -> Result<SearchOutcome, SearchError> {
    if reference.is_empty() {
        let result = align_and_control(reference, &PlanogramSeq::default(), &params.align)?;
        return Ok(SearchOutcome { result, detections: Vec::new(), trace: Vec::new() });
    }
    let mut products: Vec<&str> = Vec::new();
    for g in reference.iter() {
        let label = g.label.product().ok_or(AlignError::SentinelInInput)?;
        if catalog.get(label).is_none() {
            return Err(SearchError::UnknownLabel(label.to_string()));
        }
        if !products.contains(&label) {
            products.push(label);
        }
    }

    let scene = features.extract(rack)?;
    let candidates = detect_in_rack(detector, rack)?;
    let regions: HashMap<&str, Vec<CandidateRegion>> = products
        .iter()
        .map(|&l| (l, filter_boxes(&candidates, catalog.get(l).expect("checked above"))))
        .collect();
    let rack_width = f64::from(rack.width());

    let mut state = SearchState::default();
    let mut best = AlignmentResult { matched: 0, required: 1, ..Default::default() };
    let mut detections: Vec<Detection> = Vec::new();
    let mut result = AlignmentResult::default();
    let mut trace = Vec::new();

    loop {
        state.iteration += 1;
        let tau = params.ratio.tau(state.alpha);
        let roi = (state.iteration > 1)
            .then(|| select_roi_with(&result, rack_width, catalog, params.roi_expand));
        let targets: Vec<&str> = match &roi {
            None => products.clone(),
            Some(r) => r.labels(),
        };

        let frozen = frozen_indices(&detections, &result);
        let mut next: Vec<Detection> = Vec::new();
        let mut frozen_dets: Vec<&Detection> = Vec::new();
        for (i, d) in detections.iter().enumerate() {
            if frozen.contains(&i) {
                next.push(d.clone());
                frozen_dets.push(d);
            } else if let Some(r) = &roi {
                if !r.covers(&d.label, d.center().x) {
                    next.push(d.clone());
                }
            }
        }

        for label in targets {
            let model = catalog.get(label).expect("targets come from the reference");
            let local: Vec<LocalFeature>;
            let scene_view: &[LocalFeature] = match &roi {
                None => &scene,
                Some(r) => {
                    local = scene.iter().filter(|f| r.covers(label, f.x)).cloned().collect();
                    &local
                }
            };
            let found = detect_product(model, &regions[label], scene_view, tau, params.nms_iou);
            for d in found {
                if let Some(r) = &roi {
                    if !r.covers(label, d.center().x) {
                        continue;
                    }
                }
                let collides = frozen_dets
                    .iter()
                    .any(|f| iou(&f.rect, &d.rect) > params.nms_iou);
                if !collides {
                    next.push(d);
                }
            }
        }
        detections = next;

        let (det_seq, _) = obj_to_planogram_indexed(&detections);
        result = align_and_control(reference, &det_seq, &params.align)?;

        state.mu_prev = state.mu;
        state.mu = result.mu();
        if result.ratio_exceeds(&best) {
            best = result.clone();
            state.stall_count = 0;
        } else {
            state.stall_count += 1;
        }
        trace.push(IterationRecord {
            iteration: state.iteration,
            alpha: state.alpha,
            tau_alpha: tau,
            mu: state.mu,
            matched: result.matched,
            required: result.required,
            statuses: result.statuses.clone(),
            stall_count: state.stall_count,
        });
        log::debug!(
            "rack {} iteration {} tau {:.4} mu {}/{}",
            rack.key,
            state.iteration,
            tau,
            result.matched,
            result.required
        );

        if result.is_fully_compliant() || state.stall_count >= params.stall_limit {
            break;
        }
        state.alpha *= params.alpha_decay;
    }

    Ok(SearchOutcome { result, detections, trace })
}
