//! Point-conditioned visual question answering.
//!
//! The crate has two halves. The dataset half turns scene-graph annotations
//! into benchmark questions that can only be answered with a point:
//! [`builders::local`], [`builders::looktwice`], [`builders::general`], and
//! [`builders::verbal_spatial`], with [`verify`] rechecking every guarantee.
//! The model half consumes region proposals ([`features`]), filters them by
//! the point, and answers with attention models ([`models`]) trained and
//! scored by [`train`] and [`eval`].

pub mod analysis;
pub mod builders;
pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod inputs;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod store;
pub mod text;
pub mod train;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use dataset::{PointQAInstance, Split};
pub use geometry::{BoundingBox, Point};
pub use store::{AnnotationStore, ImageAnnotation};

/// The guide in `book/` compiled as doctests, one module per chapter, so
/// its snippets cannot drift from the API.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/annotations.md")]
    pub mod annotations {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub mod datasets {}
    #[doc = include_str!("../../../book/src/regions.md")]
    pub mod regions {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    pub mod synthetic {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    pub mod service {}
}
