//! Turning detector candidates and local features into labelled detections.
//!
//! Boxes from a class-agnostic detector are first screened per product by
//! size, aspect ratio and relative confidence. Product keypoints are matched
//! into the scene with a nearest/second-nearest ratio test, and every
//! surviving box is scored by how many matched keypoints it contains. Weak
//! boxes are dropped and overlapping ones resolved with greedy NMS.

pub mod providers;

use serde::{Deserialize, Serialize};

use crate::model::{BoxRect, CandidateBox, Detection, LocalFeature, Point, ProductModel};

pub use providers::{
    DetectorProvider, FeatureProvider, OracleDetector, OracleFeatures, ProviderError, RackImage,
    StaticDetector, StaticFeatures,
};

/// Relative confidence floor: boxes below this fraction of the best surviving
/// confidence are discarded.
pub const CONFIDENCE_FLOOR: f64 = 0.05;
/// Minimum fraction of a product's keypoints a box must contain.
pub const MIN_FEATURE_FRACTION: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Linear ratio-test schedule `tau = base - slope * alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSchedule {
    pub base: f64,
    pub slope: f64,
}

impl Default for RatioSchedule {
    fn default() -> Self {
        Self { base: 0.95, slope: 0.2 }
    }
}

impl RatioSchedule {
    pub fn tau(&self, alpha: f64) -> f64 {
        self.base - self.slope * alpha
    }
}

/// Ratio-test threshold for iteration parameter `alpha` with the default
/// schedule: `0.95 - 0.2 * alpha`.
pub fn tau_alpha(alpha: f64) -> f64 {
    RatioSchedule::default().tau(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub alpha: f64,
    pub tau_alpha: f64,
}

impl MatchParams {
    pub fn new(alpha: f64, schedule: &RatioSchedule) -> Self {
        Self { alpha, tau_alpha: schedule.tau(alpha) }
    }
}

/// Euclidean distance between two descriptors.
pub fn descriptor_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Brute-force 2-NN matching with the ratio test.
///
/// For every model feature the two closest scene descriptors are found; the
/// closest is kept when `d1 < tau * d2`. Returns the distinct indices of kept
/// scene features in ascending order. With fewer than two scene features no
/// ratio can be formed and nothing matches.
pub fn match_features(model: &[LocalFeature], scene: &[LocalFeature], tau: f64) -> Vec<usize> {
    if scene.len() < 2 {
        return Vec::new();
    }
    let mut kept = vec![false; scene.len()];
    for mf in model {
        let (mut best, mut second) = ((f64::INFINITY, usize::MAX), f64::INFINITY);
        for (i, sf) in scene.iter().enumerate() {
            let d = descriptor_distance(&mf.descriptor, &sf.descriptor);
            if d < best.0 {
                second = best.0;
                best = (d, i);
            } else if d < second {
                second = d;
            }
        }
        if best.0 < tau * second {
            kept[best.1] = true;
        }
    }
    kept.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

/// A candidate box that passed the per-product screen, in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRegion {
    pub rect: BoxRect,
    pub confidence: f64,
}

impl CandidateRegion {
    pub fn center(&self) -> Point {
        self.rect.center()
    }
}

fn within_factor_two(value: f64, reference: f64) -> bool {
    reference * 0.5 <= value && value <= reference * 2.0
}

/// Keeps boxes whose width, height and aspect ratio are within a factor of two
/// of the product's reference, then drops those below 5% of the best
/// confidence among the geometric survivors.
pub fn filter_boxes(candidates: &[CandidateBox], model: &ProductModel) -> Vec<CandidateRegion> {
    let aspect = model.aspect_ratio();
    let shaped: Vec<&CandidateBox> = candidates
        .iter()
        .filter(|b| b.is_valid())
        .filter(|b| {
            within_factor_two(b.width, model.width_ref)
                && within_factor_two(b.height, model.height_ref)
                && within_factor_two(b.width / b.height, aspect)
        })
        .collect();
    let Some(max_cs) = shaped.iter().map(|b| b.confidence).reduce(f64::max) else {
        return Vec::new();
    };
    let floor = CONFIDENCE_FLOOR * max_cs;
    shaped
        .into_iter()
        .filter(|b| b.confidence >= floor)
        .map(|b| CandidateRegion { rect: b.rect(), confidence: b.confidence })
        .collect()
}

/// Greedy non-maximum suppression. Returns indices of kept items, highest
/// score first; equal scores keep input order.
pub fn greedy_nms(items: &[(BoxRect, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1).then(a.cmp(&b)));
    let mut suppressed = vec![false; items.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && crate::model::iou(&items[i].0, &items[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Number of points inside `rect`, edges included.
pub fn count_inside(rect: &BoxRect, points: &[Point]) -> usize {
    points.iter().filter(|p| rect.contains(**p)).count()
}

/// Scores screened boxes by matched keypoints and suppresses overlaps.
///
/// A box survives when it holds more than 5% of the product's `L_j` keypoints;
/// its weight is `(s / L_j) * confidence`.
pub fn score_and_suppress(
    candidates: &[CandidateRegion],
    matched: &[Point],
    model: &ProductModel,
    nms_iou: f64,
) -> Vec<Detection> {
    let total = model.feature_count();
    if total == 0 {
        return Vec::new();
    }
    let scored: Vec<(BoxRect, f64)> = candidates
        .iter()
        .filter_map(|c| {
            let s = count_inside(&c.rect, matched);
            let weight = s as f64 / total as f64 * c.confidence;
            (s as f64 > MIN_FEATURE_FRACTION * total as f64 && weight > 0.0)
                .then_some((c.rect, weight))
        })
        .collect();
    greedy_nms(&scored, nms_iou)
        .into_iter()
        .map(|i| Detection::new(model.label.clone(), scored[i].0, scored[i].1))
        .collect()
}

/// Runs matching and scoring for one product against a scene.
pub fn detect_product(
    model: &ProductModel,
    regions: &[CandidateRegion],
    scene: &[LocalFeature],
    tau: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let matched: Vec<Point> = match_features(&model.features, scene, tau)
        .into_iter()
        .map(|i| scene[i].position())
        .collect();
    score_and_suppress(regions, &matched, model, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(w: f64, h: f64, n: usize) -> ProductModel {
        ProductModel {
            label: "p".into(),
            width_ref: w,
            height_ref: h,
            features: (0..n)
                .map(|i| LocalFeature { x: 0.0, y: 0.0, descriptor: vec![i as f32] })
                .collect(),
        }
    }

    fn feat(x: f64, y: f64, d: &[f32]) -> LocalFeature {
        LocalFeature { x, y, descriptor: d.to_vec() }
    }

    #[test]
    fn tau_schedule() {
        assert_eq!(tau_alpha(1.0), 0.75);
        assert!((tau_alpha(0.75) - 0.80).abs() < 1e-12);
        assert!((tau_alpha(1e-12) - 0.95).abs() < 1e-9);
    }

    #[test]
    fn ratio_test_keeps_and_discards() {
        let m = [feat(0.0, 0.0, &[0.0, 0.0])];
        let scene = [feat(1.0, 1.0, &[0.5, 0.0]), feat(2.0, 2.0, &[0.0, 1.0])];
        assert_eq!(match_features(&m, &scene, 0.75), vec![0]);
        let scene = [feat(1.0, 1.0, &[0.8, 0.0]), feat(2.0, 2.0, &[0.0, 1.0])];
        assert!(match_features(&m, &scene, 0.75).is_empty());
    }

    #[test]
    fn too_few_scene_features() {
        let m = [feat(0.0, 0.0, &[0.0])];
        assert!(match_features(&m, &[feat(0.0, 0.0, &[0.0])], 0.9).is_empty());
        assert!(match_features(&m, &[], 0.9).is_empty());
    }

    #[test]
    fn shared_scene_feature_counted_once() {
        let m = [feat(0.0, 0.0, &[0.0]), feat(0.0, 0.0, &[0.1])];
        let scene = [feat(0.0, 0.0, &[0.05]), feat(0.0, 0.0, &[10.0])];
        assert_eq!(match_features(&m, &scene, 0.75), vec![0]);
    }

    #[test]
    fn geometry_rejects_narrow_box() {
        let m = model(100.0, 200.0, 0);
        let b = CandidateBox::new(0.9, 300.0, 200.0, 40.0, 200.0);
        assert!(filter_boxes(&[b], &m).is_empty());
    }

    #[test]
    fn confidence_floor_over_survivors() {
        let m = model(100.0, 200.0, 0);
        let boxes = [
            CandidateBox::new(0.9, 100.0, 200.0, 100.0, 200.0),
            CandidateBox::new(0.5, 300.0, 200.0, 100.0, 200.0),
            CandidateBox::new(0.036, 500.0, 200.0, 100.0, 200.0),
            // Fails geometry, so its higher confidence does not raise the floor.
            CandidateBox::new(50.0, 500.0, 200.0, 10.0, 200.0),
        ];
        let kept = filter_boxes(&boxes, &m);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].confidence, 0.9);
        assert_eq!(kept[1].confidence, 0.5);
    }

    #[test]
    fn reference_sized_box_converts_to_corners() {
        let m = model(100.0, 200.0, 0);
        let kept = filter_boxes(&[CandidateBox::new(0.7, 250.0, 180.0, 100.0, 200.0)], &m);
        assert_eq!(kept[0].rect.tl, Point::new(200.0, 80.0));
        assert_eq!(kept[0].rect.br, Point::new(300.0, 280.0));
        assert_eq!(kept[0].center(), Point::new(250.0, 180.0));
    }

    #[test]
    fn empty_candidates() {
        assert!(filter_boxes(&[], &model(1.0, 1.0, 0)).is_empty());
    }

    #[test]
    fn featureless_box_is_dropped() {
        let m = model(100.0, 200.0, 100);
        let c = CandidateRegion { rect: BoxRect::from_corners(0.0, 0.0, 100.0, 200.0), confidence: 1.0 };
        assert!(score_and_suppress(&[c], &[], &m, 0.5).is_empty());
        let far = [Point::new(500.0, 500.0)];
        assert!(score_and_suppress(&[c], &far, &m, 0.5).is_empty());
    }

    #[test]
    fn no_model_features_drops_everything() {
        let m = model(100.0, 200.0, 0);
        let c = CandidateRegion { rect: BoxRect::from_corners(0.0, 0.0, 100.0, 200.0), confidence: 1.0 };
        assert!(score_and_suppress(&[c], &[Point::new(1.0, 1.0)], &m, 0.5).is_empty());
    }

    #[test]
    fn identical_boxes_keep_heavier() {
        let m = model(100.0, 200.0, 10);
        let r = BoxRect::from_corners(0.0, 0.0, 100.0, 200.0);
        let pts = [Point::new(10.0, 10.0)];
        let cands = [
            CandidateRegion { rect: r, confidence: 0.8 },
            CandidateRegion { rect: r, confidence: 0.9 },
        ];
        let out = score_and_suppress(&cands, &pts, &m, 0.5);
        assert_eq!(out.len(), 1);
        assert!((out[0].weight - 0.09).abs() < 1e-12);
    }

    #[test]
    fn edge_features_count() {
        let r = BoxRect::from_corners(0.0, 0.0, 10.0, 10.0);
        let pts = [Point::new(0.0, 0.0), Point::new(10.0, 10.0), Point::new(10.0, 10.0001)];
        assert_eq!(count_inside(&r, &pts), 2);
    }

    #[test]
    fn survivors_do_not_overlap_past_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let items: Vec<(BoxRect, f64)> = (0..12)
                .map(|_| {
                    let x = rng.gen_range(0.0..100.0);
                    let y = rng.gen_range(0.0..100.0);
                    (
                        BoxRect::from_corners(x, y, x + rng.gen_range(5.0..40.0), y + rng.gen_range(5.0..40.0)),
                        rng.gen_range(0.01..1.0),
                    )
                })
                .collect();
            let keep = greedy_nms(&items, 0.5);
            for (a, &i) in keep.iter().enumerate() {
                for &j in &keep[a + 1..] {
                    assert!(crate::model::iou(&items[i].0, &items[j].0) <= 0.5);
                }
            }
        }
    }
}
