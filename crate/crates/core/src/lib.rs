//! Planogram compliance checking for retail shelf racks.
//!
//! The crate is organised as the stages of the pipeline a shelf image goes
//! through:
//!
//! * [`change`]: low-resolution frame differencing that gates uploads on the
//!   camera node.
//! * [`ingest`]: rack splitting, letterboxing, content-addressed storage and
//!   the job/report records served by the HTTP front end.
//! * [`detect`]: detector-candidate filtering, ratio-test feature matching,
//!   feature-in-box scoring and greedy NMS.
//! * [`model`]: shared domain types and detection-to-planogram grouping.
//! * [`align`]: quantity-weighted Needleman-Wunsch alignment and the
//!   compliance ratio.
//! * [`search`]: the focused, iteratively relaxed re-detection loop.
//! * [`power`]: duty-cycle energy budgeting and node simulation.
//! * [`eval`]: detection/compliance metrics and the synthetic rack generator.

pub mod align;
pub mod change;
pub mod config;
pub mod detect;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod power;
pub mod search;

pub use align::{compliance_control, nw_align, AlignParams, AlignmentResult, GroupStatus};
pub use model::{
    iou, obj_to_planogram, BoxRect, CandidateBox, Catalog, Detection, GroupLabel, LocalFeature,
    PlanogramGroup, PlanogramSeq, Point, ProductModel,
};
