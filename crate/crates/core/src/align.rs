//! Quantity-weighted global alignment of a detected planogram against its
//! reference, and the per-group compliance statuses derived from it.
//!
//! The score matrix is indexed `(d, t)` with `d` running over detected groups
//! (rows) and `t` over reference groups (columns). A step that consumes only a
//! reference group costs that group's quantity (a deletion: required items
//! that were not found); a step that consumes only a detected group costs the
//! detected quantity (an insertion of items that should not be there).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GroupLabel, PlanogramGroup, PlanogramSeq};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("aligned sequences differ in length: reference {reference}, detected {detected}")]
    LengthMismatch { reference: usize, detected: usize },
    #[error("input planogram contains a gap sentinel")]
    SentinelInInput,
}

/// Traceback tag of a matrix cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    /// Pair detected group `d` with reference group `t`.
    Diag,
    /// Reference group `t` has no detected counterpart.
    Del,
    /// Detected group `d` has no reference counterpart.
    Ins,
}

/// Penalty applied along the first row and column of the score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderPenalty {
    /// One point per skipped group, regardless of its quantity.
    #[default]
    Unit,
    /// The same quantity-valued gap penalties as the interior.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SubstitutionScore {
    /// `+min(q_d, q_t)` when labels agree, `-max(q_d, q_t)` otherwise.
    #[default]
    QuantityWeighted,
    Fixed { matched: i64, mismatched: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AlignParams {
    #[serde(default)]
    pub border: BorderPenalty,
    #[serde(default)]
    pub substitution: SubstitutionScore,
}

impl AlignParams {
    fn substitution(&self, det: &PlanogramGroup, reference: &PlanogramGroup) -> i64 {
        let same = det.label == reference.label;
        match self.substitution {
            SubstitutionScore::QuantityWeighted => {
                let (qd, qt) = (i64::from(det.quantity), i64::from(reference.quantity));
                if same {
                    qd.min(qt)
                } else {
                    -qd.max(qt)
                }
            }
            SubstitutionScore::Fixed { matched, mismatched } => {
                if same {
                    matched
                } else {
                    mismatched
                }
            }
        }
    }

    fn border_cost(&self, group: &PlanogramGroup) -> i64 {
        match self.border {
            BorderPenalty::Unit => 1,
            BorderPenalty::Dynamic => i64::from(group.quantity),
        }
    }
}

/// Filled score matrix with its traceback tags, `(E+1) x (T+1)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i64>,
    trace: Vec<Option<Move>>,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn score(&self, d: usize, t: usize) -> i64 {
        self.values[d * self.cols + t]
    }

    pub fn trace(&self, d: usize, t: usize) -> Option<Move> {
        self.trace[d * self.cols + t]
    }

    /// Score of the optimal global alignment, `F(E, T)`.
    pub fn terminal_score(&self) -> i64 {
        self.score(self.rows - 1, self.cols - 1)
    }

    fn set(&mut self, d: usize, t: usize, value: i64, mv: Option<Move>) {
        self.values[d * self.cols + t] = value;
        self.trace[d * self.cols + t] = mv;
    }
}

/// Fills the score matrix for `det` (rows) against `reference` (columns).
/// Ties prefer `Diag`, then `Del`, then `Ins`.
pub fn fill_matrix(reference: &PlanogramSeq, det: &PlanogramSeq, params: &AlignParams) -> ScoreMatrix {
    let (rows, cols) = (det.len() + 1, reference.len() + 1);
    let mut m = ScoreMatrix {
        rows,
        cols,
        values: vec![0; rows * cols],
        trace: vec![None; rows * cols],
    };
    for t in 1..cols {
        let v = m.score(0, t - 1) - params.border_cost(&reference.groups[t - 1]);
        m.set(0, t, v, Some(Move::Del));
    }
    for d in 1..rows {
        let v = m.score(d - 1, 0) - params.border_cost(&det.groups[d - 1]);
        m.set(d, 0, v, Some(Move::Ins));
    }
    for d in 1..rows {
        let dg = &det.groups[d - 1];
        for t in 1..cols {
            let tg = &reference.groups[t - 1];
            let diag = m.score(d - 1, t - 1) + params.substitution(dg, tg);
            let del = m.score(d, t - 1) - i64::from(tg.quantity);
            let ins = m.score(d - 1, t) - i64::from(dg.quantity);
            let (best, mv) = if diag >= del && diag >= ins {
                (diag, Move::Diag)
            } else if del >= ins {
                (del, Move::Del)
            } else {
                (ins, Move::Ins)
            };
            m.set(d, t, best, Some(mv));
        }
    }
    m
}

/// Per-position compliance status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupStatus {
    /// Right product, right quantity.
    MT,
    /// Right product, more items than required.
    ME,
    /// Right product, fewer items than required.
    MI,
    /// Wrong product, or one side is a gap.
    NM,
}

impl fmt::Display for GroupStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GroupStatus::MT => "MT",
            GroupStatus::ME => "ME",
            GroupStatus::MI => "MI",
            GroupStatus::NM => "NM",
        };
        f.write_str(s)
    }
}

/// Aligned pair of sequences; statuses and the compliance ratio are filled in
/// by [`compliance_control`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub ref_aligned: PlanogramSeq,
    pub det_aligned: PlanogramSeq,
    #[serde(default)]
    pub statuses: Vec<GroupStatus>,
    /// Numerator of the compliance ratio: correctly present items.
    #[serde(default)]
    pub matched: u64,
    /// Denominator of the compliance ratio: required items.
    #[serde(default)]
    pub required: u64,
    #[serde(default)]
    pub score: i64,
}

impl AlignmentResult {
    pub fn len(&self) -> usize {
        self.ref_aligned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_aligned.is_empty()
    }

    /// Compliance ratio in `[0, 1]`. Defined as 1 when nothing is required.
    pub fn mu(&self) -> f64 {
        if self.required == 0 {
            1.0
        } else {
            self.matched as f64 / self.required as f64
        }
    }

    /// Exact test for full compliance.
    pub fn is_fully_compliant(&self) -> bool {
        self.matched == self.required
    }

    /// `(matched, required)` compared as exact rationals.
    pub fn same_ratio(&self, other: &AlignmentResult) -> bool {
        mu_key(self) == mu_key(other)
    }

    /// True when the ratio of `self` is strictly above that of `other`.
    pub fn ratio_exceeds(&self, other: &AlignmentResult) -> bool {
        let (a, b) = (mu_key(self), mu_key(other));
        u128::from(a.0) * u128::from(b.1) > u128::from(b.0) * u128::from(a.1)
    }

    pub fn report(&self) -> AlignmentReport {
        let positions = self
            .ref_aligned
            .iter()
            .zip(self.det_aligned.iter())
            .enumerate()
            .map(|(index, (r, d))| ReportPosition {
                index,
                ref_label: r.label.clone(),
                ref_quantity: r.quantity,
                det_label: d.label.clone(),
                det_quantity: d.quantity,
                status: self.statuses.get(index).copied(),
            })
            .collect();
        AlignmentReport {
            positions,
            matched: self.matched,
            required: self.required,
            mu: self.mu(),
        }
    }
}

fn mu_key(r: &AlignmentResult) -> (u64, u64) {
    if r.required == 0 {
        (1, 1)
    } else {
        (r.matched, r.required)
    }
}

/// Serializable summary of one aligned rack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub positions: Vec<ReportPosition>,
    pub matched: u64,
    pub required: u64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPosition {
    pub index: usize,
    pub ref_label: GroupLabel,
    pub ref_quantity: u32,
    pub det_label: GroupLabel,
    pub det_quantity: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<GroupStatus>,
}

/// Globally aligns `det` against `reference`. The returned result carries the
/// aligned sequences (with gap sentinels) and the terminal score; statuses are
/// left empty.
pub fn nw_align(
    reference: &PlanogramSeq,
    det: &PlanogramSeq,
    params: &AlignParams,
) -> Result<AlignmentResult, AlignError> {
    if reference.iter().chain(det.iter()).any(PlanogramGroup::is_gap) {
        return Err(AlignError::SentinelInInput);
    }
    let matrix = fill_matrix(reference, det, params);
    let (mut d, mut t) = (det.len(), reference.len());
    let mut ref_out = Vec::with_capacity(d + t);
    let mut det_out = Vec::with_capacity(d + t);
    while (d, t) != (0, 0) {
        match matrix.trace(d, t).expect("non-origin cell has a trace") {
            Move::Diag => {
                ref_out.push(reference.groups[t - 1].clone());
                det_out.push(det.groups[d - 1].clone());
                d -= 1;
                t -= 1;
            }
            Move::Del => {
                ref_out.push(reference.groups[t - 1].clone());
                det_out.push(PlanogramGroup::gap_det());
                t -= 1;
            }
            Move::Ins => {
                ref_out.push(PlanogramGroup::gap_ref());
                det_out.push(det.groups[d - 1].clone());
                d -= 1;
            }
        }
    }
    ref_out.reverse();
    det_out.reverse();
    Ok(AlignmentResult {
        ref_aligned: PlanogramSeq::new(ref_out),
        det_aligned: PlanogramSeq::new(det_out),
        score: matrix.terminal_score(),
        ..Default::default()
    })
}

/// Assigns MT/ME/MI/NM to every aligned position and computes the compliance
/// ratio: matched items (the smaller quantity on label agreement) over the
/// total reference quantity.
pub fn compliance_control(mut aligned: AlignmentResult) -> Result<AlignmentResult, AlignError> {
    if aligned.ref_aligned.len() != aligned.det_aligned.len() {
        return Err(AlignError::LengthMismatch {
            reference: aligned.ref_aligned.len(),
            detected: aligned.det_aligned.len(),
        });
    }
    let mut statuses = Vec::with_capacity(aligned.ref_aligned.len());
    let (mut matched, mut required) = (0u64, 0u64);
    for (r, d) in aligned.ref_aligned.iter().zip(aligned.det_aligned.iter()) {
        let (qt, qd) = (u64::from(r.quantity), u64::from(d.quantity));
        let status = if r.label == d.label && !r.is_gap() {
            matched += qd.min(qt);
            match qd.cmp(&qt) {
                std::cmp::Ordering::Equal => GroupStatus::MT,
                std::cmp::Ordering::Greater => GroupStatus::ME,
                std::cmp::Ordering::Less => GroupStatus::MI,
            }
        } else {
            GroupStatus::NM
        };
        statuses.push(status);
        required += qt;
    }
    aligned.statuses = statuses;
    aligned.matched = matched;
    aligned.required = required;
    Ok(aligned)
}

/// `nw_align` followed by `compliance_control`.
pub fn align_and_control(
    reference: &PlanogramSeq,
    det: &PlanogramSeq,
    params: &AlignParams,
) -> Result<AlignmentResult, AlignError> {
    compliance_control(nw_align(reference, det, params)?)
}
