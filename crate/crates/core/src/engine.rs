//! The iterative aggregation loop around a pluggable object detector.
//!
//! One epoch: predict on every image, match annotations to predictions,
//! correct the matched boxes with each annotator's current bias, fuse them,
//! infer soft labels, hand the result to the detector, then recompute the
//! annotator posteriors from the priors.

use std::collections::BTreeSet;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::box_aggregator::{
    aggregate_boxes, compute_errors, correct_box, update_posteriors, ErrorSample, GaussianGammaParams, Vec4,
    IDENTITY_MEAN,
};
use crate::dataset::{validate_dataset, AggregatedInstance, CrowdDataset, ImageRecord, Prediction};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::label_aggregator::{aggregate_labels_with, expected_log_pi, update_alpha, AnnotatorConfusion, LabelEvidence};
use crate::matcher::{match_annotations, MatchParams, MatchSet};

/// A black-box object detector.
///
/// `predict` must be deterministic between calls to `fit`.
pub trait Detector: Send + Sync {
    fn predict(&self, image: &ImageRecord) -> Result<Vec<Prediction>>;

    /// Receives every aggregated instance of the epoch; `gamma` is the loss weight.
    fn fit(&mut self, instances: &[AggregatedInstance]) -> Result<()>;
}

/// Prior mean of the box error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMean {
    /// `(0, 0, 1, 1)`: no correction without evidence.
    Identity,
    /// All four components zero.
    Zero,
    Custom(Vec4),
}

impl PriorMean {
    pub fn vector(&self) -> Vec4 {
        match self {
            PriorMean::Identity => IDENTITY_MEAN,
            PriorMean::Zero => [0.0; 4],
            PriorMean::Custom(v) => *v,
        }
    }
}

/// What `gamma` counts in its numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaCount {
    Annotations,
    DistinctAnnotators,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `None` accepts every best match.
    pub max_cost: Option<f64>,
    pub prior_mean: PriorMean,
    pub upsilon0: f64,
    pub beta0: f64,
    pub alpha_diag: f64,
    pub alpha_offdiag: f64,
    pub max_epochs: usize,
    pub convergence_tol: f64,
    pub gamma_clamp: bool,
    pub gamma_count: GammaCount,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            lambda1: 2.0,
            lambda2: 5.0,
            max_cost: None,
            prior_mean: PriorMean::Identity,
            upsilon0: 10.0,
            beta0: 0.5,
            alpha_diag: 10.0,
            alpha_offdiag: 1.0,
            max_epochs: 50,
            convergence_tol: 1e-4,
            gamma_clamp: true,
            gamma_count: GammaCount::Annotations,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.convergence_tol > 0.0) {
            return bad(format!("convergence_tol must be positive, got {}", self.convergence_tol));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("upsilon0", self.upsilon0),
            ("beta0", self.beta0),
            ("alpha_diag", self.alpha_diag),
            ("alpha_offdiag", self.alpha_offdiag),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if self.prior_mean.vector().iter().any(|x| !x.is_finite()) {
            return bad("prior_mean must be finite".into());
        }
        Ok(())
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            max_cost: self.max_cost.unwrap_or(f64::INFINITY),
        }
    }

    pub fn box_prior(&self) -> GaussianGammaParams {
        GaussianGammaParams::isotropic(self.prior_mean.vector(), self.upsilon0, self.beta0)
    }

    pub fn label_prior(&self, num_classes: usize) -> AnnotatorConfusion {
        AnnotatorConfusion::prior(num_classes, self.alpha_diag, self.alpha_offdiag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub box_posteriors: Vec<GaussianGammaParams>,
    pub confusions: Vec<AnnotatorConfusion>,
    /// Aggregation produced by the last completed epoch.
    pub instances: Vec<AggregatedInstance>,
    /// Whether the last epoch moved the parameters by less than the tolerance.
    pub converged: bool,
}

impl EngineState {
    /// Every annotator at the prior.
    pub fn initial(cfg: &EngineConfig, num_classes: usize, num_annotators: usize) -> Self {
        EngineState {
            epoch: 0,
            box_posteriors: vec![cfg.box_prior(); num_annotators],
            confusions: vec![cfg.label_prior(num_classes); num_annotators],
            instances: Vec::new(),
            converged: false,
        }
    }

    pub fn defect(&self) -> Option<String> {
        if self.box_posteriors.len() != self.confusions.len() {
            return Some(format!(
                "{} box posteriors but {} confusion matrices",
                self.box_posteriors.len(),
                self.confusions.len()
            ));
        }
        for (k, p) in self.box_posteriors.iter().enumerate() {
            if let Some(d) = p.defect() {
                return Some(format!("box posterior of annotator {k}: {d}"));
            }
        }
        for (k, c) in self.confusions.iter().enumerate() {
            if let Some(d) = c.defect() {
                return Some(format!("confusion of annotator {k}: {d}"));
            }
        }
        None
    }
}

/// Matched count over `num_annotators`, optionally clamped to one.
pub fn compute_gamma(num_matched: usize, num_annotators: usize, clamp: bool) -> f64 {
    let g = num_matched as f64 / num_annotators.max(1) as f64;
    if clamp {
        g.min(1.0)
    } else {
        g
    }
}

/// Largest change in any annotator's posterior box mean or row-normalized
/// confusion between two states.
pub fn parameter_change(prev: &EngineState, cur: &EngineState) -> f64 {
    let mut delta: f64 = 0.0;
    for (a, b) in prev.box_posteriors.iter().zip(&cur.box_posteriors) {
        for i in 0..4 {
            delta = delta.max((a.mu[i] - b.mu[i]).abs());
        }
    }
    for (a, b) in prev.confusions.iter().zip(&cur.confusions) {
        for (ra, rb) in a.row_normalized().iter().zip(b.row_normalized()) {
            for (x, y) in ra.iter().zip(rb) {
                delta = delta.max((x - y).abs());
            }
        }
    }
    delta
}

pub fn converged(prev: &EngineState, cur: &EngineState, tol: f64) -> bool {
    parameter_change(prev, cur) < tol
}

/// Everything one epoch computed on one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageTrace {
    pub predictions: Vec<Prediction>,
    pub matches: MatchSet,
    /// Corrected box of every annotation of the image, matched or not.
    pub corrected: Vec<BBox>,
    /// `(prediction_index, fused_box)` for each matched prediction.
    pub fused: Vec<(usize, BBox)>,
    /// Soft label of each entry of `fused`.
    pub soft_labels: Vec<Vec<f64>>,
    pub gammas: Vec<f64>,
    pub errors: Vec<ErrorSample>,
}

/// Per-image intermediates of one epoch, in dataset image order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochTrace {
    pub images: Vec<ImageTrace>,
}

fn process_image(
    image: &ImageRecord,
    ann_idx: &[usize],
    ds: &CrowdDataset,
    state: &EngineState,
    elp: &[Vec<Vec<f64>>],
    detector: &dyn Detector,
    cfg: &EngineConfig,
    epoch: usize,
) -> Result<ImageTrace> {
    let predictions = detector
        .predict(image)
        .map_err(|e| Error::Detector { epoch, message: e.to_string() })?;
    for (i, p) in predictions.iter().enumerate() {
        let problem = if p.image_id != image.id {
            Some(format!("prediction for image {} returned for image {}", p.image_id, image.id))
        } else {
            p.defect(ds.num_classes)
        };
        if let Some(msg) = problem {
            return Err(Error::Detector {
                epoch,
                message: format!("image {}, prediction {i}: {msg}", image.id),
            });
        }
    }

    let anns: Vec<_> = ann_idx.iter().map(|&i| ds.annotations[i]).collect();
    let matches = match_annotations(&predictions, &anns, &cfg.match_params())?;
    let errors = compute_errors(&matches, &predictions, &anns)?;

    let corrected = anns
        .iter()
        .map(|a| correct_box(&a.bbox, &state.box_posteriors[a.annotator_id].mu))
        .collect::<Result<Vec<_>>>()?;
    let annotator_of: Vec<usize> = anns.iter().map(|a| a.annotator_id).collect();
    let fused = aggregate_boxes(&matches, &corrected, &annotator_of, &state.box_posteriors)?;

    let groups = matches.by_prediction(predictions.len());
    let mut soft_labels = Vec::with_capacity(fused.len());
    let mut gammas = Vec::with_capacity(fused.len());
    for &(p, _) in &fused {
        let members = &groups[p];
        let labels: Vec<(usize, usize)> = members.iter().map(|&a| (anns[a].class_id, anns[a].annotator_id)).collect();
        soft_labels.push(aggregate_labels_with(&predictions[p].class_probs, &labels, elp)?.rho);
        let count = match cfg.gamma_count {
            GammaCount::Annotations => members.len(),
            GammaCount::DistinctAnnotators => labels.iter().map(|l| l.1).collect::<BTreeSet<_>>().len(),
        };
        gammas.push(compute_gamma(count, ds.num_annotators, cfg.gamma_clamp));
    }

    Ok(ImageTrace {
        predictions,
        matches,
        corrected,
        fused,
        soft_labels,
        gammas,
        errors,
    })
}

/// One pass of the loop, returning the intermediates alongside the new state.
pub fn run_epoch_traced(
    state: &EngineState,
    detector: &mut dyn Detector,
    ds: &CrowdDataset,
    cfg: &EngineConfig,
) -> Result<(EngineState, EpochTrace)> {
    if let Some(d) = state.defect() {
        return Err(Error::Usage(format!("engine state is invalid: {d}")));
    }
    if state.box_posteriors.len() != ds.num_annotators {
        return Err(Error::Usage(format!(
            "state has {} annotators, dataset has {}",
            state.box_posteriors.len(),
            ds.num_annotators
        )));
    }
    let epoch = state.epoch + 1;
    let groups = ds.annotations_by_image();
    let elp: Vec<_> = state.confusions.iter().map(expected_log_pi).collect();

    let shared: &dyn Detector = detector;
    let images = ds
        .images
        .par_iter()
        .zip(groups.par_iter())
        .map(|(im, idx)| process_image(im, idx, ds, state, &elp, shared, cfg, epoch))
        .collect::<Result<Vec<_>>>()?;

    let mut instances = Vec::new();
    for (im, tr) in ds.images.iter().zip(&images) {
        let members = tr.matches.by_prediction(tr.predictions.len());
        for (((p, b), rho), &gamma) in tr.fused.iter().zip(&tr.soft_labels).zip(&tr.gammas) {
            instances.push(AggregatedInstance {
                image_id: im.id,
                bbox: *b,
                soft_label: rho.clone(),
                gamma,
                support: members[*p].len(),
            });
        }
    }

    detector
        .fit(&instances)
        .map_err(|e| Error::Detector { epoch, message: e.to_string() })?;

    let samples: Vec<ErrorSample> = images.iter().flat_map(|t| t.errors.iter().copied()).collect();
    let box_posteriors = update_posteriors(&cfg.box_prior(), &samples, ds.num_annotators);

    let mut evidence = Vec::new();
    for (tr, idx) in images.iter().zip(&groups) {
        let slot: std::collections::HashMap<usize, usize> =
            tr.fused.iter().enumerate().map(|(s, &(p, _))| (p, s)).collect();
        for &(a, p) in &tr.matches.pairs {
            let ann = &ds.annotations[idx[a]];
            evidence.push(LabelEvidence {
                class_id: ann.class_id,
                annotator_id: ann.annotator_id,
                rho: &tr.soft_labels[slot[&p]],
            });
        }
    }
    let confusions = update_alpha(&cfg.label_prior(ds.num_classes), ds.num_annotators, &evidence);

    let mut next = EngineState {
        epoch,
        box_posteriors,
        confusions,
        instances,
        converged: false,
    };
    next.converged = converged(state, &next, cfg.convergence_tol);
    if let Some(d) = next.defect() {
        return Err(Error::Internal(format!("epoch {epoch} produced an invalid state: {d}")));
    }
    debug!(
        "epoch {epoch}: {} instances, {} matches, change {:.3e}",
        next.instances.len(),
        samples.len(),
        parameter_change(state, &next)
    );
    Ok((next, EpochTrace { images }))
}

pub fn run_epoch(
    state: &EngineState,
    detector: &mut dyn Detector,
    ds: &CrowdDataset,
    cfg: &EngineConfig,
) -> Result<EngineState> {
    run_epoch_traced(state, detector, ds, cfg).map(|(s, _)| s)
}

/// Runs from the priors until convergence or `max_epochs`.
pub fn run(ds: &CrowdDataset, detector: &mut dyn Detector, cfg: &EngineConfig) -> Result<EngineState> {
    let start = EngineState::initial(cfg, ds.num_classes, ds.num_annotators);
    run_from(start, ds, detector, cfg, |_| Ok(()))
}

/// Continues from `state` until convergence or `max_epochs` total epochs,
/// calling `on_epoch` after every epoch.
///
/// A state that is already converged or past `max_epochs` is returned as is.
pub fn run_from(
    state: EngineState,
    ds: &CrowdDataset,
    detector: &mut dyn Detector,
    cfg: &EngineConfig,
    mut on_epoch: impl FnMut(&EngineState) -> Result<()>,
) -> Result<EngineState> {
    cfg.validate()?;
    let violations = validate_dataset(ds);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut state = state;
    while !state.converged && state.epoch < cfg.max_epochs {
        state = run_epoch(&state, detector, ds, cfg)?;
        on_epoch(&state)?;
    }
    if state.converged {
        info!("converged after {} epochs", state.epoch);
    } else {
        info!("stopped after {} epochs without converging", state.epoch);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::tiny;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Silent;
    impl Detector for Silent {
        fn predict(&self, _: &ImageRecord) -> Result<Vec<Prediction>> {
            Ok(Vec::new())
        }
        fn fit(&mut self, _: &[AggregatedInstance]) -> Result<()> {
            Ok(())
        }
    }

    struct Broken;
    impl Detector for Broken {
        fn predict(&self, _: &ImageRecord) -> Result<Vec<Prediction>> {
            Err(Error::Internal("out of memory".into()))
        }
        fn fit(&mut self, _: &[AggregatedInstance]) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(compute_gamma(5, 10, true), 0.5);
        assert_eq!(compute_gamma(10, 10, true), 1.0);
        assert_eq!(compute_gamma(12, 10, true), 1.0);
        assert!((compute_gamma(12, 10, false) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn silent_detector_keeps_priors() {
        let ds = tiny();
        let cfg = EngineConfig::default();
        let s0 = EngineState::initial(&cfg, ds.num_classes, ds.num_annotators);
        let s1 = run_epoch(&s0, &mut Silent, &ds, &cfg).unwrap();
        assert_eq!(s1.box_posteriors, s0.box_posteriors);
        assert_eq!(s1.confusions, s0.confusions);
        assert!(s1.instances.is_empty());
        assert!(s1.converged);
        assert_eq!(s1.epoch, 1);
    }

    #[test]
    fn detector_failure_names_epoch() {
        let ds = tiny();
        let cfg = EngineConfig::default();
        let s0 = EngineState::initial(&cfg, ds.num_classes, ds.num_annotators);
        match run_epoch(&s0, &mut Broken, &ds, &cfg) {
            Err(Error::Detector { epoch: 1, message }) => assert!(message.contains("out of memory")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_epoch_when_capped() {
        let ds = tiny();
        let cfg = EngineConfig { max_epochs: 1, ..Default::default() };
        let s = run(&ds, &mut Silent, &cfg).unwrap();
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn config_defaults_and_rejections() {
        let cfg: EngineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, EngineConfig::default());
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.upsilon0, cfg.beta0, cfg.alpha_diag), (2.0, 5.0, 10.0, 0.5, 10.0));
        assert!(serde_json::from_str::<EngineConfig>(r#"{"lamda1": 2}"#).is_err());
        let zero: EngineConfig = serde_json::from_str(r#"{"prior_mean": "zero"}"#).unwrap();
        assert_eq!(zero.prior_mean.vector(), [0.0; 4]);
        assert!(EngineConfig { max_epochs: 0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { convergence_tol: 0.0, ..Default::default() }.validate().is_err());
    }

    fn state_with(rng: &mut ChaCha8Rng, k: usize, j: usize) -> EngineState {
        let cfg = EngineConfig::default();
        let mut s = EngineState::initial(&cfg, j, k);
        for p in &mut s.box_posteriors {
            for m in &mut p.mu {
                *m += rng.gen_range(-0.01..0.01);
            }
        }
        for c in &mut s.confusions {
            for row in &mut c.alpha {
                for a in row {
                    *a += rng.gen_range(0.0..0.5);
                }
            }
        }
        s
    }

    #[test]
    fn convergence_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = state_with(&mut rng, 3, 2);
        assert!(converged(&s, &s, 1e-4));
        let mut t = s.clone();
        t.box_posteriors[1].mu[2] += 2e-4;
        assert!(!converged(&s, &t, 1e-4));
    }

    #[test]
    fn convergence_matches_direct_max_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = state_with(&mut rng, 4, 3);
            let b = state_with(&mut rng, 4, 3);
            let mut direct: f64 = 0.0;
            for k in 0..4 {
                for i in 0..4 {
                    direct = direct.max((a.box_posteriors[k].mu[i] - b.box_posteriors[k].mu[i]).abs());
                }
                for j in 0..3 {
                    let sa: f64 = a.confusions[k].alpha[j].iter().sum();
                    let sb: f64 = b.confusions[k].alpha[j].iter().sum();
                    for l in 0..3 {
                        direct = direct.max((a.confusions[k].alpha[j][l] / sa - b.confusions[k].alpha[j][l] / sb).abs());
                    }
                }
            }
            let tol = rng.gen_range(0.0..0.05);
            assert_eq!(converged(&a, &b, tol), direct < tol);
        }
    }
}
