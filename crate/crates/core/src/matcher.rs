//! One-to-many assignment of annotations to detector predictions.
//!
//! Every annotation independently picks the prediction with the lowest
//! matching cost, so one prediction may collect many annotations. There is
//! no global (Hungarian) assignment.

use crate::dataset::{Annotation, Prediction};
use crate::error::{Error, Result};
use crate::geometry::{giou_loss, l1_distance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Weight of the GIoU loss term.
    pub lambda1: f64,
    /// Weight of the L1 box distance term.
    pub lambda2: f64,
    /// Annotations whose best cost exceeds this stay unmatched.
    pub max_cost: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            lambda1: 2.0,
            lambda2: 5.0,
            max_cost: f64::INFINITY,
        }
    }
}

/// Matches for one image as `(annotation_index, prediction_index)` pairs,
/// indices local to the slices given to [`match_annotations`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchSet {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// Annotation indices grouped by the prediction they matched, one entry per prediction.
    pub fn by_prediction(&self, num_predictions: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_predictions];
        for &(a, p) in &self.pairs {
            out[p].push(a);
        }
        out
    }

    /// The prediction matched to each annotation, if any.
    pub fn prediction_of(&self, num_annotations: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_annotations];
        for &(a, p) in &self.pairs {
            out[a] = Some(p);
        }
        out
    }
}

/// `-p(c) + lambda1 * giou_loss + lambda2 * l1`.
pub fn matching_cost(pred: &Prediction, ann: &Annotation, lambda1: f64, lambda2: f64) -> Result<f64> {
    if pred.image_id != ann.image_id {
        return Err(Error::Usage(format!(
            "cannot match a prediction on image {} to an annotation on image {}",
            pred.image_id, ann.image_id
        )));
    }
    let p = pred.class_probs.get(ann.class_id).copied().ok_or_else(|| {
        Error::Usage(format!(
            "annotation class {} outside the prediction's {} classes",
            ann.class_id,
            pred.class_probs.len()
        ))
    })?;
    Ok(-p + lambda1 * giou_loss(&pred.bbox, &ann.bbox) + lambda2 * l1_distance(&pred.bbox, &ann.bbox))
}

/// Assigns each annotation to its minimum-cost prediction; ties go to the lowest prediction index.
pub fn match_annotations(
    preds: &[Prediction],
    anns: &[Annotation],
    params: &MatchParams,
) -> Result<MatchSet> {
    let mut pairs = Vec::with_capacity(anns.len());
    if preds.is_empty() {
        return Ok(MatchSet { pairs });
    }
    for (ai, ann) in anns.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (pi, pred) in preds.iter().enumerate() {
            let c = matching_cost(pred, ann, params.lambda1, params.lambda2)?;
            if best.map_or(true, |(_, bc)| c < bc) {
                best = Some((pi, c));
            }
        }
        if let Some((pi, c)) = best {
            if c <= params.max_cost {
                pairs.push((ai, pi));
            }
        }
    }
    Ok(MatchSet { pairs })
}
