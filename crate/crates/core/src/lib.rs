//! Tooth-level condition labels for panoramic radiographs, derived from
//! free-text reports, plus the crop geometry and the statistics used to
//! compare models with human raters.
//!
//! The pipeline runs in stages, each with its own module:
//!
//! 1. [`report`] parses numbered report lines and the FDI tooth codes in them.
//! 2. [`phrases`] extracts noun phrases, remotely or with local rules, behind a cache.
//! 3. [`labeling`] builds the condition vocabulary and the per-tooth label matrix.
//! 4. [`crops`] turns segmentation output into crop windows and dataset splits.
//! 5. [`evaluation`], [`metrics`] and [`study`] score predictions and raters.

pub mod crops;
pub mod evaluation;
pub mod labeling;
pub mod metrics;
pub mod phrases;
pub mod report;
pub mod study;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/phrases.md")]
    mod phrases {}
    #[doc = include_str!("../../../book/src/labeling.md")]
    mod labeling {}
    #[doc = include_str!("../../../book/src/crops.md")]
    mod crops {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/study.md")]
    mod study {}
}
