//! Shared domain types: product templates, boxes, detections and the
//! grouped left-to-right planogram representation.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wire form of the reference-side gap sentinel. Never valid as a product label.
pub const GAP_REF_TAG: &str = "~GAP_REF";
/// Wire form of the detected-side gap sentinel. Never valid as a product label.
pub const GAP_DET_TAG: &str = "~GAP_DET";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("product {label:?}: reference size must be positive, got {width}x{height}")]
    BadReferenceSize { label: String, width: f64, height: f64 },
    #[error("duplicate product label {0:?} in catalog")]
    DuplicateLabel(String),
    #[error("label {0:?} is reserved for gap sentinels")]
    ReservedLabel(String),
    #[error("product {label:?}: descriptor dimension {found} differs from catalog dimension {expected}")]
    DescriptorDim { label: String, expected: usize, found: usize },
    #[error("unknown product label {0:?}")]
    UnknownLabel(String),
    #[error("invalid planogram: {0}")]
    InvalidPlanogram(String),
    #[error("catalog io: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box given by its top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRect {
    pub tl: Point,
    pub br: Point,
}

impl BoxRect {
    pub fn new(tl: Point, br: Point) -> Self {
        Self { tl, br }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(Point::new(x0, y0), Point::new(x1, y1))
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self::from_corners(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.br.x - self.tl.x
    }

    pub fn height(&self) -> f64 {
        self.br.y - self.tl.y
    }

    pub fn center(&self) -> Point {
        Point::new((self.tl.x + self.br.x) / 2.0, (self.tl.y + self.br.y) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.tl.x < self.br.x && self.tl.y < self.br.y
    }

    /// Boundary-inclusive containment test.
    pub fn contains(&self, p: Point) -> bool {
        self.tl.x <= p.x && p.x <= self.br.x && self.tl.y <= p.y && p.y <= self.br.y
    }

    pub fn intersection_area(&self, other: &BoxRect) -> f64 {
        let w = self.br.x.min(other.br.x) - self.tl.x.max(other.tl.x);
        let h = self.br.y.min(other.br.y) - self.tl.y.max(other.tl.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union. Zero-area boxes have IoU 0 with everything.
pub fn iou(a: &BoxRect, b: &BoxRect) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A keypoint with its descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFeature {
    pub x: f64,
    pub y: f64,
    pub descriptor: Vec<f32>,
}

impl LocalFeature {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Per-SKU template: reference size in pixels and the keypoints extracted
/// from the product's model image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductModel {
    pub label: String,
    pub width_ref: f64,
    pub height_ref: f64,
    #[serde(default)]
    pub features: Vec<LocalFeature>,
}

impl ProductModel {
    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.width_ref / self.height_ref
    }
}

fn is_reserved_label(label: &str) -> bool {
    label == GAP_REF_TAG || label == GAP_DET_TAG
}

/// A validated set of product templates. Serialized as JSON:
///
/// ```json
/// { "products": [ { "label": "cola", "width_ref": 80, "height_ref": 200,
///                   "features": [ { "x": 3.5, "y": 10, "descriptor": [0.1, ...] } ] } ] }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub products: Vec<ProductModel>,
}

impl Catalog {
    pub fn new(products: Vec<ProductModel>) -> Result<Self, ModelError> {
        let catalog = Self { products };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = HashSet::new();
        let mut dim: Option<usize> = None;
        for p in &self.products {
            if is_reserved_label(&p.label) {
                return Err(ModelError::ReservedLabel(p.label.clone()));
            }
            if !seen.insert(p.label.as_str()) {
                return Err(ModelError::DuplicateLabel(p.label.clone()));
            }
            if !(p.width_ref > 0.0 && p.height_ref > 0.0) {
                return Err(ModelError::BadReferenceSize {
                    label: p.label.clone(),
                    width: p.width_ref,
                    height: p.height_ref,
                });
            }
            for f in &p.features {
                match dim {
                    None => dim = Some(f.descriptor.len()),
                    Some(d) if d != f.descriptor.len() => {
                        return Err(ModelError::DescriptorDim {
                            label: p.label.clone(),
                            expected: d,
                            found: f.descriptor.len(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, label: &str) -> Option<&ProductModel> {
        self.products.iter().find(|p| p.label == label)
    }

    pub fn require(&self, label: &str) -> Result<&ProductModel, ModelError> {
        self.get(label)
            .ok_or_else(|| ModelError::UnknownLabel(label.to_string()))
    }

    /// Descriptor dimension shared by every feature, if any feature exists.
    pub fn descriptor_dim(&self) -> Option<usize> {
        self.products
            .iter()
            .flat_map(|p| p.features.first())
            .map(|f| f.descriptor.len())
            .next()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let catalog: Catalog = serde_json::from_str(&text)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Raw detector output: confidence plus center/size in detector pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateBox {
    #[serde(rename = "cs")]
    pub confidence: f64,
    #[serde(rename = "cx")]
    pub center_x: f64,
    #[serde(rename = "cy")]
    pub center_y: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

impl CandidateBox {
    pub fn new(confidence: f64, center_x: f64, center_y: f64, width: f64, height: f64) -> Self {
        Self { confidence, center_x, center_y, width, height }
    }

    pub fn rect(&self) -> BoxRect {
        BoxRect::from_center(self.center_x, self.center_y, self.width, self.height)
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0.0 && self.height > 0.0 && self.confidence >= 0.0
    }
}

/// A labelled, weighted product detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub rect: BoxRect,
    pub weight: f64,
}

impl Detection {
    pub fn new(label: impl Into<String>, rect: BoxRect, weight: f64) -> Self {
        Self { label: label.into(), rect, weight }
    }

    pub fn center(&self) -> Point {
        self.rect.center()
    }
}

/// Label of an aligned group: a product or one of the two gap sentinels.
///
/// `GapRef` stands on the reference side opposite a detected group that has
/// no reference counterpart; `GapDet` stands on the detected side opposite a
/// reference group that was not found.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum GroupLabel {
    Product(String),
    GapRef,
    GapDet,
}

impl GroupLabel {
    pub fn product(&self) -> Option<&str> {
        match self {
            GroupLabel::Product(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_gap(&self) -> bool {
        !matches!(self, GroupLabel::Product(_))
    }
}

impl From<GroupLabel> for String {
    fn from(l: GroupLabel) -> String {
        match l {
            GroupLabel::Product(s) => s,
            GroupLabel::GapRef => GAP_REF_TAG.to_string(),
            GroupLabel::GapDet => GAP_DET_TAG.to_string(),
        }
    }
}

impl From<String> for GroupLabel {
    fn from(s: String) -> Self {
        match s.as_str() {
            GAP_REF_TAG => GroupLabel::GapRef,
            GAP_DET_TAG => GroupLabel::GapDet,
            _ => GroupLabel::Product(s),
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupLabel::Product(s) => f.write_str(s),
            GroupLabel::GapRef => f.write_str("-"),
            GroupLabel::GapDet => f.write_str("-"),
        }
    }
}

/// Horizontal pixel extent of a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

/// One run of identical products, or a gap sentinel (quantity 0, no span).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanogramGroup {
    pub label: GroupLabel,
    pub quantity: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
}

impl PlanogramGroup {
    pub fn product(label: impl Into<String>, quantity: u32) -> Self {
        Self { label: GroupLabel::Product(label.into()), quantity, span: None }
    }

    pub fn with_span(mut self, start: f64, end: f64) -> Self {
        self.span = Some(Span { start, end });
        self
    }

    pub fn gap_ref() -> Self {
        Self { label: GroupLabel::GapRef, quantity: 0, span: None }
    }

    pub fn gap_det() -> Self {
        Self { label: GroupLabel::GapDet, quantity: 0, span: None }
    }

    pub fn is_gap(&self) -> bool {
        self.label.is_gap()
    }
}

/// Ordered, left-to-right list of groups.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanogramSeq {
    pub groups: Vec<PlanogramGroup>,
}

impl PlanogramSeq {
    pub fn new(groups: Vec<PlanogramGroup>) -> Self {
        Self { groups }
    }

    /// Reference planogram from `(label, quantity)` pairs.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, u32)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|(l, q)| PlanogramGroup::product(l.as_ref(), *q))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PlanogramGroup> {
        self.groups.iter()
    }

    pub fn total_quantity(&self) -> u64 {
        self.groups.iter().map(|g| u64::from(g.quantity)).sum()
    }

    /// `(label, quantity)` view, convenient for comparisons.
    pub fn pairs(&self) -> Vec<(String, u32)> {
        self.groups
            .iter()
            .map(|g| (String::from(g.label.clone()), g.quantity))
            .collect()
    }

    /// Checks the invariants of a sentinel-free planogram: positive
    /// quantities, maximal grouping and ordered spans.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut prev: Option<&PlanogramGroup> = None;
        for g in &self.groups {
            if g.is_gap() {
                return Err(ModelError::InvalidPlanogram("gap sentinel in planogram".into()));
            }
            if g.quantity == 0 {
                return Err(ModelError::InvalidPlanogram(format!(
                    "group {} has zero quantity",
                    g.label
                )));
            }
            if let Some(s) = g.span {
                if s.start > s.end {
                    return Err(ModelError::InvalidPlanogram(format!(
                        "group {} has inverted span",
                        g.label
                    )));
                }
            }
            if let Some(p) = prev {
                if p.label == g.label {
                    return Err(ModelError::InvalidPlanogram(format!(
                        "adjacent groups share label {}",
                        g.label
                    )));
                }
                if let (Some(a), Some(b)) = (p.span, g.span) {
                    if b.start < a.start {
                        return Err(ModelError::InvalidPlanogram("spans out of order".into()));
                    }
                }
            }
            prev = Some(g);
        }
        Ok(())
    }
}

impl fmt::Display for PlanogramSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "({}, {})", g.label, g.quantity)?;
        }
        f.write_str("]")
    }
}

/// Left-to-right order used when grouping detections.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    let (ca, cb) = (a.center(), b.center());
    ca.x.total_cmp(&cb.x)
        .then_with(|| a.label.cmp(&b.label))
        .then_with(|| ca.y.total_cmp(&cb.y))
}

/// Sorts detections left to right by center and merges consecutive runs of
/// the same label into groups. A group's span runs from the first box's left
/// edge to the last box's right edge.
pub fn obj_to_planogram(detections: &[Detection]) -> PlanogramSeq {
    obj_to_planogram_indexed(detections).0
}

/// Like [`obj_to_planogram`], also returning the group index each input
/// detection was merged into.
pub fn obj_to_planogram_indexed(detections: &[Detection]) -> (PlanogramSeq, Vec<usize>) {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detection_order(&detections[a], &detections[b]));

    let mut groups: Vec<PlanogramGroup> = Vec::new();
    let mut membership = vec![0usize; detections.len()];
    for i in order {
        let det = &detections[i];
        match groups.last_mut() {
            Some(g) if g.label.product() == Some(det.label.as_str()) => {
                g.quantity += 1;
                if let Some(span) = g.span.as_mut() {
                    span.end = det.rect.br.x;
                }
            }
            _ => groups.push(
                PlanogramGroup::product(det.label.clone(), 1)
                    .with_span(det.rect.tl.x, det.rect.br.x),
            ),
        }
        membership[i] = groups.len() - 1;
    }
    (PlanogramSeq::new(groups), membership)
}
