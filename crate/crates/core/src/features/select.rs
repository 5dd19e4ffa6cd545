//! Point-conditioned proposal selection.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ProposalSet;
use crate::geometry::{contains_unchecked, iou_unchecked, BoundingBox, Point};

const PADDING_BOX: BoundingBox = BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 };

/// Minimum IoU with the ground-truth box for the `gt_box` strategy.
pub const GT_BOX_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every proposal whose box contains the point.
    AllContaining,
    /// The containing proposal with the highest objectness score.
    TopScore,
    /// The containing proposal with the smallest area.
    Smallest,
    /// Every proposal; the point is ignored.
    FullImage,
    /// Every proposal overlapping the ground-truth box with IoU ≥ 0.5.
    GtBox,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Self::AllContaining, Self::TopScore, Self::Smallest, Self::FullImage, Self::GtBox];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AllContaining => "all_containing",
            Self::TopScore => "top_score",
            Self::Smallest => "smallest",
            Self::FullImage => "full_image",
            Self::GtBox => "gt_box",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("strategy {0} needs a point")]
    MissingPoint(Strategy),
    #[error("strategy gt_box needs a valid ground-truth box")]
    MissingGtBox,
    #[error("region capacity N must be at least 1")]
    ZeroCapacity,
}

/// `N` rows of features, zero-padded, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedRegions {
    /// `N × D`; rows past the real proposals are exactly zero.
    pub features: Array2<f64>,
    /// Padding boxes are all-zero.
    pub boxes: Vec<BoundingBox>,
    pub mask: Vec<bool>,
    /// Source proposal index of each real row, ascending.
    pub indices: Vec<usize>,
    pub strategy: Strategy,
    /// True when nothing matched and the nearest-center proposal stands in.
    pub fallback: bool,
}

impl SelectedRegions {
    pub fn real_count(&self) -> usize {
        self.indices.len()
    }

    pub fn capacity(&self) -> usize {
        self.mask.len()
    }
}

fn squared_center_distance(b: &BoundingBox, p: Point) -> f64 {
    let (cx, cy) = b.center();
    (cx - p.x as f64).powi(2) + (cy - p.y as f64).powi(2)
}

/// Index minimizing `key`, ties to the lowest index.
fn argmin_by(candidates: &[usize], key: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &i in candidates {
        let k = key(i);
        if best.is_none_or(|(_, bk)| k < bk) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

/// Picks proposals for one (image, point) query.
///
/// When no proposal qualifies, the proposal whose box center is nearest
/// the point (or, for `gt_box`, the best-overlapping proposal) is kept and
/// `fallback` is set, so a model never sees an all-padding input. Beyond `n`
/// real rows the highest-scoring proposals are kept.
pub fn select_regions(
    proposals: &ProposalSet,
    point: Option<Point>,
    gt_box: Option<&BoundingBox>,
    strategy: Strategy,
    n: usize,
) -> Result<SelectedRegions, SelectError> {
    if n == 0 {
        return Err(SelectError::ZeroCapacity);
    }
    let all: Vec<usize> = (0..proposals.len()).collect();
    let need_point = || point.ok_or(SelectError::MissingPoint(strategy));
    let containing = |p: Point| -> Vec<usize> { all.iter().copied().filter(|&i| contains_unchecked(&proposals.boxes[i], p)).collect() };

    let (chosen, fallback) = match strategy {
        Strategy::FullImage => (all.clone(), false),
        Strategy::GtBox => {
            let gt = gt_box.ok_or(SelectError::MissingGtBox)?;
            gt.validate().map_err(|_| SelectError::MissingGtBox)?;
            let hits: Vec<usize> = all.iter().copied().filter(|&i| iou_unchecked(&proposals.boxes[i], gt) >= GT_BOX_IOU).collect();
            if hits.is_empty() {
                (argmin_by(&all, |i| -iou_unchecked(&proposals.boxes[i], gt)).into_iter().collect(), true)
            } else {
                (hits, false)
            }
        }
        Strategy::AllContaining | Strategy::TopScore | Strategy::Smallest => {
            let p = need_point()?;
            let hits = containing(p);
            if hits.is_empty() {
                (argmin_by(&all, |i| squared_center_distance(&proposals.boxes[i], p)).into_iter().collect(), true)
            } else {
                let pick = match strategy {
                    Strategy::TopScore => argmin_by(&hits, |i| -(proposals.scores[i] as f64)).into_iter().collect(),
                    Strategy::Smallest => argmin_by(&hits, |i| proposals.boxes[i].area()).into_iter().collect(),
                    _ => hits,
                };
                (pick, false)
            }
        }
    };

    let mut kept = chosen;
    if kept.len() > n {
        // stable sort: equal scores keep index order
        kept.sort_by(|&a, &b| proposals.scores[b].total_cmp(&proposals.scores[a]));
        kept.truncate(n);
        kept.sort_unstable();
    }

    let d = proposals.dim();
    let mut features = Array2::zeros((n, d));
    let mut boxes = vec![PADDING_BOX; n];
    let mut mask = vec![false; n];
    for (row, &i) in kept.iter().enumerate() {
        features.row_mut(row).assign(&proposals.features.row(i).mapv(f64::from));
        boxes[row] = proposals.boxes[i];
        mask[row] = true;
    }
    Ok(SelectedRegions { features, boxes, mask, indices: kept, strategy, fallback })
}
