//! Reference detectors that stand in for a trained network.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{majority_vote_dataset, DEFAULT_CLUSTER_IOU};
use crate::dataset::{AggregatedInstance, CrowdDataset, GroundTruth, ImageId, ImageRecord, Prediction};
use crate::engine::Detector;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// What `fit` does with the aggregation it receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Ignore it; predictions never change.
    #[default]
    Fixed,
    /// Predict the last aggregation on the next epoch.
    SelfConsistent,
}

/// Shared memo for [`FitMode::SelfConsistent`].
#[derive(Debug, Clone, Default)]
struct Memo {
    by_image: HashMap<ImageId, Vec<Prediction>>,
}

impl Memo {
    fn store(&mut self, instances: &[AggregatedInstance]) {
        self.by_image.clear();
        for inst in instances {
            let total: f64 = inst.soft_label.iter().sum();
            self.by_image.entry(inst.image_id).or_default().push(Prediction {
                image_id: inst.image_id,
                bbox: inst.bbox,
                class_probs: inst.soft_label.iter().map(|p| p / total).collect(),
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleNoise {
    /// Standard deviation of the center shift, as a fraction of the box size.
    pub center_sigma: f64,
    /// Standard deviation of the log size ratio.
    pub scale_sigma: f64,
    /// Logit margin of the true class; class probabilities are its softmax.
    pub margin: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        OracleNoise {
            center_sigma: 0.05,
            scale_sigma: 0.05,
            margin: 4.0,
        }
    }
}

/// Ground truth with fixed per-image jitter and softened one-hot probabilities.
#[derive(Debug, Clone)]
pub struct OracleNoisy {
    truth: HashMap<ImageId, Vec<GroundTruth>>,
    num_classes: usize,
    noise: OracleNoise,
    seed: u64,
    mode: FitMode,
    memo: Memo,
}

impl OracleNoisy {
    pub fn new(ds: &CrowdDataset, noise: OracleNoise, seed: u64, mode: FitMode) -> Result<Self> {
        let gt = ds
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Config("the oracle detector needs ground truth in the dataset".into()))?;
        if !(noise.center_sigma >= 0.0 && noise.scale_sigma >= 0.0 && noise.margin.is_finite()) {
            return Err(Error::Config(format!("invalid oracle noise {noise:?}")));
        }
        let mut truth: HashMap<ImageId, Vec<GroundTruth>> = HashMap::new();
        for g in gt {
            truth.entry(g.image_id).or_default().push(*g);
        }
        Ok(OracleNoisy {
            truth,
            num_classes: ds.num_classes,
            noise,
            seed,
            mode,
            memo: Memo::default(),
        })
    }

    fn jittered(&self, image: &ImageRecord) -> Vec<Prediction> {
        let Some(objs) = self.truth.get(&image.id) else {
            return Vec::new();
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ image.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let probs = |class: usize| {
            let z = self.num_classes as f64 - 1.0 + self.noise.margin.exp();
            (0..self.num_classes)
                .map(|c| if c == class { self.noise.margin.exp() / z } else { 1.0 / z })
                .collect::<Vec<_>>()
        };
        objs.iter()
            .map(|g| {
                let b = g.bbox;
                let mut draw = || std.sample(&mut rng);
                let bbox = BBox {
                    cx: b.cx + self.noise.center_sigma * b.w * draw(),
                    cy: b.cy + self.noise.center_sigma * b.h * draw(),
                    w: b.w * (self.noise.scale_sigma * draw()).exp(),
                    h: b.h * (self.noise.scale_sigma * draw()).exp(),
                };
                Prediction {
                    image_id: image.id,
                    bbox,
                    class_probs: probs(g.class_id),
                }
            })
            .collect()
    }
}

impl Detector for OracleNoisy {
    fn predict(&self, image: &ImageRecord) -> Result<Vec<Prediction>> {
        if self.mode == FitMode::SelfConsistent {
            if let Some(p) = self.memo.by_image.get(&image.id) {
                return Ok(p.clone());
            }
        }
        Ok(self.jittered(image))
    }

    fn fit(&mut self, instances: &[AggregatedInstance]) -> Result<()> {
        if self.mode == FitMode::SelfConsistent {
            self.memo.store(instances);
        }
        Ok(())
    }
}

/// Mass moved off the voted class in bootstrap predictions.
pub const BOOTSTRAP_SMOOTHING: f64 = 0.1;

/// Predicts the majority-vote aggregation of the crowd.
#[derive(Debug, Clone)]
pub struct BootstrapMv {
    base: HashMap<ImageId, Vec<Prediction>>,
    mode: FitMode,
    memo: Memo,
}

impl BootstrapMv {
    pub fn new(ds: &CrowdDataset, mode: FitMode) -> Self {
        let j = ds.num_classes as f64;
        let mut base: HashMap<ImageId, Vec<Prediction>> = HashMap::new();
        for inst in majority_vote_dataset(ds, DEFAULT_CLUSTER_IOU) {
            let top = inst.top_class();
            let class_probs = (0..ds.num_classes)
                .map(|c| {
                    let hot = if c == top { 1.0 } else { 0.0 };
                    (1.0 - BOOTSTRAP_SMOOTHING) * hot + BOOTSTRAP_SMOOTHING / j
                })
                .collect();
            base.entry(inst.image_id).or_default().push(Prediction {
                image_id: inst.image_id,
                bbox: inst.bbox,
                class_probs,
            });
        }
        BootstrapMv {
            base,
            mode,
            memo: Memo::default(),
        }
    }
}

impl Detector for BootstrapMv {
    fn predict(&self, image: &ImageRecord) -> Result<Vec<Prediction>> {
        if self.mode == FitMode::SelfConsistent {
            if let Some(p) = self.memo.by_image.get(&image.id) {
                return Ok(p.clone());
            }
        }
        Ok(self.base.get(&image.id).cloned().unwrap_or_default())
    }

    fn fit(&mut self, instances: &[AggregatedInstance]) -> Result<()> {
        if self.mode == FitMode::SelfConsistent {
            self.memo.store(instances);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::tiny;
    use crate::dataset::Annotation;

    fn with_truth() -> CrowdDataset {
        let mut ds = tiny();
        ds.ground_truth = Some(vec![GroundTruth {
            image_id: 7,
            bbox: BBox::new(21.0, 20.0, 10.0, 11.0).unwrap(),
            class_id: 1,
        }]);
        ds
    }

    #[test]
    fn oracle_needs_truth() {
        assert!(matches!(
            OracleNoisy::new(&tiny(), OracleNoise::default(), 0, FitMode::Fixed),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noiseless_oracle_returns_truth() {
        let ds = with_truth();
        let noise = OracleNoise { center_sigma: 0.0, scale_sigma: 0.0, margin: 4.0 };
        let det = OracleNoisy::new(&ds, noise, 3, FitMode::Fixed).unwrap();
        let p = det.predict(&ds.images[0]).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox, ds.ground_truth.as_ref().unwrap()[0].bbox);
        assert!(p[0].defect(3).is_none());
        assert_eq!(crate::dataset::argmax(&p[0].class_probs), 1);
    }

    #[test]
    fn oracle_is_deterministic() {
        let ds = with_truth();
        let a = OracleNoisy::new(&ds, OracleNoise::default(), 9, FitMode::Fixed).unwrap();
        let b = OracleNoisy::new(&ds, OracleNoise::default(), 9, FitMode::Fixed).unwrap();
        assert_eq!(a.predict(&ds.images[0]).unwrap(), b.predict(&ds.images[0]).unwrap());
        assert_eq!(a.predict(&ds.images[0]).unwrap(), a.predict(&ds.images[0]).unwrap());
    }

    #[test]
    fn bootstrap_on_identical_annotations() {
        let mut ds = tiny();
        let b = BBox::new(30.0, 30.0, 12.0, 9.0).unwrap();
        ds.num_annotators = 3;
        ds.annotations = (0..3)
            .map(|k| Annotation { image_id: 7, bbox: b, class_id: 2, annotator_id: k })
            .collect();
        let det = BootstrapMv::new(&ds, FitMode::Fixed);
        let p = det.predict(&ds.images[0]).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox, b);
        assert!(p[0].defect(3).is_none());
        assert_eq!(crate::dataset::argmax(&p[0].class_probs), 2);
    }

    #[test]
    fn self_consistent_mode_replays_aggregation() {
        let ds = with_truth();
        let mut det = OracleNoisy::new(&ds, OracleNoise::default(), 0, FitMode::SelfConsistent).unwrap();
        let inst = AggregatedInstance {
            image_id: 7,
            bbox: BBox::new(40.0, 40.0, 5.0, 5.0).unwrap(),
            soft_label: vec![0.2, 0.3, 0.5],
            gamma: 1.0,
            support: 2,
        };
        det.fit(std::slice::from_ref(&inst)).unwrap();
        let p = det.predict(&ds.images[0]).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].bbox, inst.bbox);
        assert_eq!(p[0].class_probs, inst.soft_label);
    }
}
