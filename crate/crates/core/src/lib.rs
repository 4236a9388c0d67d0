//! Numerics for tiny-object detection.
//!
//! The crate collects the pieces needed to study why overlap losses fail
//! on sub-32px boxes and what fixes them, at desk scale:
//!
//! - [`bbox`]: center-format boxes and the IoU / GIoU / DIoU / CIoU
//!   losses with analytic gradients;
//! - [`salnwd`]: Gaussian-box Wasserstein distance, the NWD loss, and
//!   the size-adaptive hybrid loss over batches;
//! - [`prune`]: cosine-similarity filter masking with warm-up and lazy
//!   mask recomputation, plus a drift simulator for schedule studies;
//! - [`msfd`]: reference forward kernels for a stride-4 detection
//!   branch (depthwise-separable conv, squeeze-excitation, fusion) with
//!   exact parameter and FLOP accounting;
//! - [`eval`]: greedy NMS, average precision, mAP, F1 sweeps, and
//!   confusion matrices, plus an NMS grid-search tuner;
//! - [`gradcheck`]: central finite-difference verification of every
//!   analytic gradient;
//! - [`tensor`] / [`records`]: the on-disk formats (manifest + f32
//!   blob, detection JSONL).
//!
//! All randomness is ChaCha8 keyed by explicit seeds ([`rng`]); all
//! reductions run in fixed order, so every result here reproduces
//! bit-for-bit.

pub mod bbox;
mod dual;
pub mod eval;
pub mod gradcheck;
pub mod msfd;
pub mod prune;
pub mod records;
pub mod rng;
pub mod salnwd;
pub mod tensor;

pub use bbox::{BBox, BoxError, CornerBox, IouVariant, LossValue, iou, overlap_loss};
pub use salnwd::{GaussianBox, LossBreakdown, SalNwdConfig, nwd, nwd_loss, sal_nwd_batch};
