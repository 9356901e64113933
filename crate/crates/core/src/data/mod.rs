//! Dataset construction: synthetic blur, detection cleanup, alignment and
//! scenario-disjoint manifests.

pub mod align;
pub mod blur;
pub mod boxes;
pub mod manifest;
pub mod synth;

pub use align::{align_pair, AlignmentResult};
pub use blur::{blur_by_averaging, blur_with_kernel, make_linear_kernel, MotionKernel};
pub use boxes::{
    importance, importance_filter, nms, parse_boxes, read_boxes, BoundingBox, BoxRecord, DEFAULT_IOU_THRESHOLD,
    DEFAULT_MIN_IMPORTANCE,
};
pub use manifest::{split_by_scenario, DatasetManifest, ManifestRecord, Split};
pub use synth::random_scene;
