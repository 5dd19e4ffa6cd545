//! Turns dataset instances into model [`Sample`]s.

use thiserror::Error;

use crate::dataset::PointQAInstance;
use crate::features::{select_regions, FeatureStore, SelectError, Strategy};
use crate::models::{Model, ModelError, Regions, Sample};
use crate::store::AnnotationStore;

#[derive(Debug, Error, PartialEq)]
pub enum InputError {
    #[error("image {0} is not in the annotation store")]
    UnknownImage(String),
    #[error("image {0} has no proposals")]
    NoFeatures(String),
    #[error("instance {qa_id}: {source}")]
    Select {
        qa_id: String,
        #[source]
        source: SelectError,
    },
    #[error("instance {qa_id}: {source}")]
    Model {
        qa_id: String,
        #[source]
        source: ModelError,
    },
}

/// How the disambiguation is provided at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disambiguation {
    /// No point: the point stream receives every proposal.
    None,
    Point,
    GtBox,
}

impl Disambiguation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "point" => Some(Self::Point),
            "gt_box" => Some(Self::GtBox),
            _ => None,
        }
    }
}

/// A prepared sample with bookkeeping for reports.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: Sample,
    /// True when region selection fell back to the nearest proposal.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct InputBuilder<'a> {
    pub store: &'a AnnotationStore,
    pub features: &'a FeatureStore,
    /// Region capacity `N`.
    pub max_regions: usize,
    /// Strategy for the point stream.
    pub strategy: Strategy,
}

impl<'a> InputBuilder<'a> {
    pub fn new(store: &'a AnnotationStore, features: &'a FeatureStore, max_regions: usize, strategy: Strategy) -> Self {
        Self { store, features, max_regions, strategy }
    }

    /// Same builder with the strategy implied by a disambiguation column.
    pub fn with_disambiguation(self, d: Disambiguation) -> Self {
        let strategy = match d {
            Disambiguation::None => Strategy::FullImage,
            Disambiguation::Point => self.strategy,
            Disambiguation::GtBox => Strategy::GtBox,
        };
        Self { strategy, ..self }
    }

    pub fn build(&self, model: &Model, inst: &PointQAInstance) -> Result<Prepared, InputError> {
        let img = self.store.get(&inst.image_id).ok_or_else(|| InputError::UnknownImage(inst.image_id.clone()))?;
        let props = self.features.get(&inst.image_id).ok_or_else(|| InputError::NoFeatures(inst.image_id.clone()))?;
        let tokens = model.vocabulary().encode(&inst.question).map_err(|source| InputError::Model { qa_id: inst.qa_id.clone(), source })?;
        let select = |strategy| {
            select_regions(props, inst.point, inst.gt_box.as_ref(), strategy, self.max_regions)
                .map_err(|source| InputError::Select { qa_id: inst.qa_id.clone(), source })
        };
        let mut fallback = false;
        let point = if model.needs_point() {
            let sel = select(self.strategy)?;
            fallback = sel.fallback;
            Some(Regions::from_selection(&sel, img.width, img.height))
        } else {
            None
        };
        let image = if model.needs_image() {
            Some(Regions::from_selection(&select(Strategy::FullImage)?, img.width, img.height))
        } else {
            None
        };
        Ok(Prepared { sample: Sample { tokens, point, image }, fallback })
    }
}
