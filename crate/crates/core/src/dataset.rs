//! Dataset containers shared by every aggregator, and their validation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub type ImageId = u64;

/// Tolerance used for "sums to one" checks on probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: f64,
    pub height: f64,
}

/// One crowdsourced instance: a box and a hard class from one annotator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: ImageId,
    #[serde(rename = "bbox")]
    pub bbox: BBox,
    pub class_id: usize,
    pub annotator_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub image_id: ImageId,
    pub bbox: BBox,
    pub class_id: usize,
}

/// One detector output: a box with a full class-probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: ImageId,
    pub bbox: BBox,
    pub class_probs: Vec<f64>,
}

impl Prediction {
    /// Checks the probability vector against `num_classes`.
    pub fn defect(&self, num_classes: usize) -> Option<String> {
        if self.class_probs.len() != num_classes {
            return Some(format!(
                "class_probs has length {}, expected {num_classes}",
                self.class_probs.len()
            ));
        }
        if self.class_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Some("class_probs entries must lie in [0, 1]".into());
        }
        let sum: f64 = self.class_probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Some(format!("class_probs sum to {sum}, not 1"));
        }
        self.bbox.defect().map(str::to_owned)
    }
}

/// A consensus instance: the aggregated box, soft label, and loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatedInstance {
    pub image_id: ImageId,
    pub bbox: BBox,
    pub soft_label: Vec<f64>,
    pub gamma: f64,
    pub support: usize,
}

impl AggregatedInstance {
    /// Index of the most probable class (lowest index on ties).
    pub fn top_class(&self) -> usize {
        argmax(&self.soft_label)
    }

    pub fn top_prob(&self) -> f64 {
        self.soft_label[self.top_class()]
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdDataset {
    pub num_classes: usize,
    pub num_annotators: usize,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub ground_truth: Option<Vec<GroundTruth>>,
}

impl CrowdDataset {
    pub fn image_index(&self) -> HashMap<ImageId, usize> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.id, i))
            .collect()
    }

    /// Annotation indices grouped per image, in `images` order and file order within an image.
    pub fn annotations_by_image(&self) -> Vec<Vec<usize>> {
        let index = self.image_index();
        let mut out = vec![Vec::new(); self.images.len()];
        for (i, a) in self.annotations.iter().enumerate() {
            if let Some(&slot) = index.get(&a.image_id) {
                out[slot].push(i);
            }
        }
        out
    }

    pub fn ground_truth_by_image(&self) -> BTreeMap<ImageId, Vec<GroundTruth>> {
        let mut out: BTreeMap<ImageId, Vec<GroundTruth>> = BTreeMap::new();
        for im in &self.images {
            out.entry(im.id).or_default();
        }
        for g in self.ground_truth.iter().flatten() {
            out.entry(g.image_id).or_default().push(*g);
        }
        out
    }
}

/// One broken dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub image_id: Option<ImageId>,
    /// Path of the offending field, e.g. `annotations[3].class_id`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.image_id {
            Some(id) => write!(f, "image {id}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Lists every invariant the dataset breaks. An empty list means the dataset is sound.
pub fn validate_dataset(ds: &CrowdDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |image_id: Option<ImageId>, field: String, message: String| {
        out.push(Violation {
            image_id,
            field,
            message,
        })
    };

    if ds.num_classes == 0 {
        push(None, "num_classes".into(), "must be at least 1".into());
    }

    let mut seen = HashSet::new();
    let mut dims = HashMap::new();
    for (i, im) in ds.images.iter().enumerate() {
        if !seen.insert(im.id) {
            push(Some(im.id), format!("images[{i}].id"), "duplicate image id".into());
        }
        if !(im.width.is_finite() && im.width > 0.0 && im.height.is_finite() && im.height > 0.0) {
            push(
                Some(im.id),
                format!("images[{i}]"),
                format!("image size {}x{} is not positive", im.width, im.height),
            );
        }
        dims.insert(im.id, (im.width, im.height));
    }

    let check_box = |image_id: ImageId, field: String, b: &BBox, out: &mut Vec<Violation>| {
        match dims.get(&image_id) {
            None => out.push(Violation {
                image_id: Some(image_id),
                field: format!("{field}.image_id"),
                message: "unknown image id".into(),
            }),
            Some(&(w, h)) => {
                if let Some(reason) = b.defect() {
                    out.push(Violation {
                        image_id: Some(image_id),
                        field: format!("{field}.bbox"),
                        message: reason.into(),
                    });
                } else if !b.within(w, h) {
                    out.push(Violation {
                        image_id: Some(image_id),
                        field: format!("{field}.bbox"),
                        message: format!("box extends outside the {w}x{h} image"),
                    });
                }
            }
        }
    };

    for (i, a) in ds.annotations.iter().enumerate() {
        let field = format!("annotations[{i}]");
        check_box(a.image_id, field.clone(), &a.bbox, &mut out);
        if a.class_id >= ds.num_classes {
            out.push(Violation {
                image_id: Some(a.image_id),
                field: format!("{field}.class_id"),
                message: format!("class {} not below num_classes {}", a.class_id, ds.num_classes),
            });
        }
        if a.annotator_id >= ds.num_annotators {
            out.push(Violation {
                image_id: Some(a.image_id),
                field: format!("{field}.annotator_id"),
                message: format!(
                    "annotator {} not below num_annotators {}",
                    a.annotator_id, ds.num_annotators
                ),
            });
        }
    }

    for (i, g) in ds.ground_truth.iter().flatten().enumerate() {
        let field = format!("ground_truth[{i}]");
        check_box(g.image_id, field.clone(), &g.bbox, &mut out);
        if g.class_id >= ds.num_classes {
            out.push(Violation {
                image_id: Some(g.image_id),
                field: format!("{field}.class_id"),
                message: format!("class {} not below num_classes {}", g.class_id, ds.num_classes),
            });
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny() -> CrowdDataset {
        CrowdDataset {
            num_classes: 3,
            num_annotators: 2,
            images: vec![ImageRecord {
                id: 7,
                width: 100.0,
                height: 80.0,
            }],
            annotations: vec![
                Annotation {
                    image_id: 7,
                    bbox: BBox::new(20.0, 20.0, 10.0, 10.0).unwrap(),
                    class_id: 1,
                    annotator_id: 0,
                },
                Annotation {
                    image_id: 7,
                    bbox: BBox::new(22.0, 21.0, 10.0, 12.0).unwrap(),
                    class_id: 2,
                    annotator_id: 1,
                },
            ],
            ground_truth: None,
        }
    }

    #[test]
    fn well_formed_has_no_violations() {
        assert!(validate_dataset(&tiny()).is_empty());
    }

    #[test]
    fn class_at_boundary_is_reported() {
        let mut ds = tiny();
        ds.annotations[1].class_id = 3;
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "annotations[1].class_id");
        assert_eq!(v[0].image_id, Some(7));
    }

    #[test]
    fn zero_width_box_is_reported() {
        let mut ds = tiny();
        ds.annotations[0].bbox.w = 0.0;
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "annotations[0].bbox");
    }

    #[test]
    fn unknown_image_and_annotator() {
        let mut ds = tiny();
        ds.annotations[0].image_id = 99;
        ds.annotations[1].annotator_id = 2;
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn out_of_bounds_box() {
        let mut ds = tiny();
        ds.annotations[0].bbox.cx = 98.0;
        assert_eq!(validate_dataset(&ds).len(), 1);
    }

    #[test]
    fn prediction_checks() {
        let p = Prediction {
            image_id: 1,
            bbox: BBox::new(1.0, 1.0, 1.0, 1.0).unwrap(),
            class_probs: vec![0.5, 0.5],
        };
        assert!(p.defect(2).is_none());
        assert!(p.defect(3).is_some());
        let q = Prediction {
            class_probs: vec![0.5, 0.6],
            ..p
        };
        assert!(q.defect(2).is_some());
    }
}
