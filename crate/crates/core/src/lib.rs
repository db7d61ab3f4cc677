//! Weakly-supervised knowledge distillation for colonoscopy archives.
//!
//! The pipeline turns `(image set, report text)` records into progressively
//! finer supervision and the models trained from it:
//!
//! 1. [`report_nlp`] — extract a polyp yes/no label from each report.
//! 2. [`mil`] — distil report labels into per-image labels with a
//!    dual-teacher / single-student multiple-instance setup.
//! 3. [`wsss`] — localize: train a small ViT on image labels, read out
//!    class activation maps and turn them into box prompts.
//! 4. [`sam_distill`] — prompt a promptable segmenter with those boxes and
//!    iteratively refine pixel pseudo-labels into a trained segmentation
//!    model.
//! 5. [`biopsy`] — transfer the distilled encoder to optical-biopsy
//!    (pathology) classification, including few-shot data-efficiency runs.
//!
//! [`synth`] generates a small synthetic dataset with known ground truth at
//! every level so the whole cascade is testable on a desktop, and [`eval`]
//! holds the shared metrics.

pub mod augment;
pub mod biopsy;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod mask;
pub mod mil;
pub mod nn;
pub mod records;
pub mod report_nlp;
pub mod sam_distill;
pub mod synth;
pub mod tensor;
pub mod wsss;

pub use error::{Error, ErrorCategory, Result};
pub use eval::{MetricReport, ScoredSet};
pub use mask::BinaryMask;
pub use nn::{derive_seed, LogRow, TrainLog};
pub use records::{Bag, ColonoscopyRecord, DatasetSplit, ImageSample};
pub use wsss::BoxPrompt;
