//! Per-annotator box-error model.
//!
//! Each annotator's error vector `(dx, dy, w_ratio, h_ratio)` between a
//! matched prediction and its annotation is Gaussian with a Gaussian-Gamma
//! prior. The posterior mean corrects that annotator's boxes and the
//! posterior precision weights them when boxes matched to the same
//! prediction are fused.

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Prediction};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matcher::MatchSet;

pub type Vec4 = [f64; 4];
pub type Mat4 = [[f64; 4]; 4];

/// Smallest variance used when turning the posterior scale into fusion weights.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Mean that leaves boxes unchanged under [`correct_box`].
pub const IDENTITY_MEAN: Vec4 = [0.0, 0.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub eps: Vec4,
    pub annotator_id: usize,
}

/// Translation differences and scale ratios of `pred` relative to `ann`.
pub fn box_error(pred: &BBox, ann: &BBox) -> Result<Vec4> {
    if !(ann.w > 0.0 && ann.h > 0.0) {
        return Err(Error::Usage(format!(
            "annotation box {}x{} has no area; cannot form scale ratios",
            ann.w, ann.h
        )));
    }
    Ok([pred.cx - ann.cx, pred.cy - ann.cy, pred.w / ann.w, pred.h / ann.h])
}

/// One error sample per matched pair.
pub fn compute_errors(
    matches: &MatchSet,
    preds: &[Prediction],
    anns: &[Annotation],
) -> Result<Vec<ErrorSample>> {
    matches
        .pairs
        .iter()
        .map(|&(a, p)| {
            Ok(ErrorSample {
                eps: box_error(&preds[p].bbox, &anns[a].bbox)?,
                annotator_id: anns[a].annotator_id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianGammaParams {
    pub mu: Vec4,
    pub upsilon: f64,
    pub beta: Mat4,
}

impl GaussianGammaParams {
    /// Prior with scale matrix `beta0 * I`.
    pub fn isotropic(mu: Vec4, upsilon: f64, beta0: f64) -> Self {
        let mut beta = [[0.0; 4]; 4];
        for (i, row) in beta.iter_mut().enumerate() {
            row[i] = beta0;
        }
        GaussianGammaParams { mu, upsilon, beta }
    }

    pub fn defect(&self) -> Option<String> {
        if !(self.upsilon > 0.0 && self.upsilon.is_finite()) {
            return Some(format!("upsilon {} must be positive", self.upsilon));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Some("mu has a non-finite entry".into());
        }
        for i in 0..4 {
            if !(self.beta[i][i] >= 0.0) {
                return Some(format!("beta[{i}][{i}] = {} is negative", self.beta[i][i]));
            }
            for j in 0..4 {
                if !self.beta[i][j].is_finite() {
                    return Some("beta has a non-finite entry".into());
                }
                if (self.beta[i][j] - self.beta[j][i]).abs()
                    > 1e-12 * (1.0 + self.beta[i][j].abs())
                {
                    return Some("beta is not symmetric".into());
                }
            }
        }
        None
    }

    /// Expected error covariance `beta / upsilon`.
    pub fn covariance(&self) -> Mat4 {
        let mut out = self.beta;
        for row in out.iter_mut() {
            for x in row.iter_mut() {
                *x /= self.upsilon;
            }
        }
        out
    }

    /// Elementwise reciprocal of the covariance diagonal.
    pub fn precision(&self) -> Result<Vec4> {
        let mut out = [0.0; 4];
        for (i, p) in out.iter_mut().enumerate() {
            let var = self.beta[i][i] / self.upsilon;
            if !(var >= 0.0 && var.is_finite()) {
                return Err(Error::Internal(format!(
                    "posterior variance component {i} is {var}"
                )));
            }
            *p = 1.0 / var.max(VARIANCE_FLOOR);
        }
        Ok(out)
    }
}

/// Count, mean, and scatter matrix of a batch of error vectors.
///
/// The posterior depends on the samples only through these.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: Vec4,
    /// `sum (e - mean)(e - mean)^T`
    pub scatter: Mat4,
}

impl Default for ErrorStats {
    fn default() -> Self {
        ErrorStats {
            count: 0,
            mean: [0.0; 4],
            scatter: [[0.0; 4]; 4],
        }
    }
}

impl ErrorStats {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Vec4> + Clone) -> Self {
        let mut count = 0usize;
        let mut sum = [0.0; 4];
        for e in samples.clone() {
            count += 1;
            for i in 0..4 {
                sum[i] += e[i];
            }
        }
        if count == 0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / count as f64);
        let mut scatter = [[0.0; 4]; 4];
        for e in samples {
            let d: Vec4 = std::array::from_fn(|i| e[i] - mean[i]);
            for i in 0..4 {
                for j in 0..4 {
                    scatter[i][j] += d[i] * d[j];
                }
            }
        }
        ErrorStats {
            count,
            mean,
            scatter,
        }
    }

    /// Combines two disjoint batches.
    pub fn merge(&self, other: &ErrorStats) -> ErrorStats {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec4 = std::array::from_fn(|i| other.mean[i] - self.mean[i]);
        let mean = std::array::from_fn(|i| self.mean[i] + delta[i] * nb / n);
        let mut scatter = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                scatter[i][j] =
                    self.scatter[i][j] + other.scatter[i][j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        ErrorStats {
            count: self.count + other.count,
            mean,
            scatter,
        }
    }
}

/// Conjugate update of `prior` given one annotator's error statistics.
pub fn posterior_from_stats(prior: &GaussianGammaParams, stats: &ErrorStats) -> GaussianGammaParams {
    if stats.count == 0 {
        return *prior;
    }
    let m = stats.count as f64;
    let mu = std::array::from_fn(|i| (prior.mu[i] + m * stats.mean[i]) / (m + 1.0));
    let upsilon = prior.upsilon + m / 2.0;
    let d: Vec4 = std::array::from_fn(|i| stats.mean[i] - prior.mu[i]);
    let shrink = m / (2.0 * (m + 1.0));
    let mut beta = prior.beta;
    for i in 0..4 {
        for j in 0..4 {
            beta[i][j] += shrink * d[i] * d[j] + 0.5 * stats.scatter[i][j];
        }
    }
    GaussianGammaParams { mu, upsilon, beta }
}

/// Conjugate update from the raw error vectors of a single annotator.
pub fn update_posterior(prior: &GaussianGammaParams, samples: &[Vec4]) -> GaussianGammaParams {
    posterior_from_stats(prior, &ErrorStats::from_samples(samples))
}

/// Recomputes every annotator's posterior from the shared prior.
///
/// Samples with an annotator id `>= num_annotators` are ignored.
pub fn update_posteriors(
    prior: &GaussianGammaParams,
    samples: &[ErrorSample],
    num_annotators: usize,
) -> Vec<GaussianGammaParams> {
    let mut grouped: Vec<Vec<Vec4>> = vec![Vec::new(); num_annotators];
    for s in samples {
        if let Some(g) = grouped.get_mut(s.annotator_id) {
            g.push(s.eps);
        }
    }
    grouped.iter().map(|g| update_posterior(prior, g)).collect()
}

/// Shifts the center by `mu[0..2]` and scales the size by `mu[2..4]`.
pub fn correct_box(b: &BBox, mu: &Vec4) -> Result<BBox> {
    if !(mu[2] > 0.0 && mu[3] > 0.0) {
        return Err(Error::Config(format!(
            "box correction needs positive scale means, got ({}, {}); \
             a zero scale prior collapses boxes of annotators without evidence",
            mu[2], mu[3]
        )));
    }
    Ok(BBox {
        cx: b.cx + mu[0],
        cy: b.cy + mu[1],
        w: b.w * mu[2],
        h: b.h * mu[3],
    })
}

/// Precision-weighted average of the corrected boxes matched to each prediction.
///
/// `corrected[a]` and `annotator_of[a]` describe annotation `a` of the image.
/// Returns one `(prediction_index, box)` per prediction with at least one
/// match, in ascending prediction order.
pub fn aggregate_boxes(
    matches: &MatchSet,
    corrected: &[BBox],
    annotator_of: &[usize],
    posteriors: &[GaussianGammaParams],
) -> Result<Vec<(usize, BBox)>> {
    let num_preds = matches.pairs.iter().map(|&(_, p)| p + 1).max().unwrap_or(0);
    let groups = matches.by_prediction(num_preds);
    let mut out = Vec::new();
    for (p, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut num = [0.0; 4];
        let mut den = [0.0; 4];
        for &a in members {
            let k = annotator_of[a];
            let post = posteriors.get(k).ok_or_else(|| {
                Error::Internal(format!("no posterior for annotator {k}"))
            })?;
            let w = post.precision()?;
            let b = corrected[a].to_array();
            for i in 0..4 {
                num[i] += w[i] * b[i];
                den[i] += w[i];
            }
        }
        let fused = BBox::new(num[0] / den[0], num[1] / den[1], num[2] / den[2], num[3] / den[3])?;
        out.push((p, fused));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paper_prior() -> GaussianGammaParams {
        GaussianGammaParams::isotropic(IDENTITY_MEAN, 10.0, 0.5)
    }

    fn bx(v: [f64; 4]) -> BBox {
        BBox::new(v[0], v[1], v[2], v[3]).unwrap()
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec4> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.5..1.5),
                ]
            })
            .collect()
    }

    #[test]
    fn error_examples() {
        let b = bx([10.0, 10.0, 10.0, 10.0]);
        assert_eq!(box_error(&b, &b).unwrap(), [0.0, 0.0, 1.0, 1.0]);
        let p = bx([12.0, 10.0, 20.0, 10.0]);
        assert_eq!(box_error(&p, &b).unwrap(), [2.0, 0.0, 2.0, 1.0]);
        let zero = BBox { w: 0.0, ..b };
        assert!(box_error(&p, &zero).is_err());
    }

    #[test]
    fn compute_errors_follows_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rb = |rng: &mut ChaCha8Rng| bx([rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(1.0..9.0), rng.gen_range(1.0..9.0)]);
        let preds: Vec<_> = (0..3)
            .map(|_| Prediction { image_id: 0, bbox: rb(&mut rng), class_probs: vec![1.0] })
            .collect();
        let anns: Vec<_> = (0..6)
            .map(|k| Annotation { image_id: 0, bbox: rb(&mut rng), class_id: 0, annotator_id: k % 2 })
            .collect();
        let m = MatchSet { pairs: vec![(0, 2), (3, 0), (5, 1)] };
        let errs = compute_errors(&m, &preds, &anns).unwrap();
        for (s, &(a, p)) in errs.iter().zip(&m.pairs) {
            let (pb, ab) = (preds[p].bbox, anns[a].bbox);
            assert_eq!(s.eps, [pb.cx - ab.cx, pb.cy - ab.cy, pb.w / ab.w, pb.h / ab.h]);
            assert_eq!(s.annotator_id, anns[a].annotator_id);
        }
    }

    #[test]
    fn no_samples_returns_prior() {
        assert_eq!(update_posterior(&paper_prior(), &[]), paper_prior());
    }

    #[test]
    fn single_sample_update() {
        let post = update_posterior(&paper_prior(), &[[0.2, 0.0, 1.0, 1.0]]);
        assert!((post.mu[0] - 0.1).abs() < 1e-15);
        assert_eq!(&post.mu[1..], &[0.0, 1.0, 1.0]);
        assert_eq!(post.upsilon, 10.5);
        // 0.5 + 1 * 0.2^2 / (2 * 2)
        assert!((post.beta[0][0] - 0.51).abs() < 1e-15);
        for i in 0..4 {
            for j in 0..4 {
                if (i, j) != (0, 0) {
                    assert_eq!(post.beta[i][j], paper_prior().beta[i][j]);
                }
            }
        }
    }

    #[test]
    fn identity_errors_keep_prior_scale() {
        let samples = vec![IDENTITY_MEAN; 40];
        let post = update_posterior(&paper_prior(), &samples);
        assert_eq!(post.mu, IDENTITY_MEAN);
        assert_eq!(post.beta, paper_prior().beta);
        assert_eq!(post.upsilon, 30.0);
        let b = bx([3.0, 4.0, 5.0, 6.0]);
        assert_eq!(correct_box(&b, &post.mu).unwrap(), b);
    }

    #[test]
    fn correct_box_examples() {
        let b = bx([10.0, 10.0, 10.0, 10.0]);
        assert_eq!(correct_box(&b, &IDENTITY_MEAN).unwrap(), b);
        let c = correct_box(&b, &[2.0, -1.0, 1.1, 0.9]).unwrap();
        assert_eq!(c.cx, 12.0);
        assert_eq!(c.cy, 9.0);
        assert!((c.w - 11.0).abs() < 1e-12 && (c.h - 9.0).abs() < 1e-12);
        assert!(matches!(correct_box(&b, &[0.0; 4]), Err(Error::Config(_))));
    }

    #[test]
    fn single_match_keeps_its_box() {
        let m = MatchSet { pairs: vec![(0, 0)] };
        let b = bx([4.0, 5.0, 6.0, 7.0]);
        let out = aggregate_boxes(&m, &[b], &[0], &[paper_prior()]).unwrap();
        assert_eq!(out.len(), 1);
        let got = out[0].1.to_array();
        for i in 0..4 {
            assert!((got[i] - b.to_array()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_posteriors_average() {
        let m = MatchSet { pairs: vec![(0, 0), (1, 0)] };
        let boxes = [bx([0.0, 0.0, 10.0, 10.0]), bx([2.0, 0.0, 10.0, 10.0])];
        let out = aggregate_boxes(&m, &boxes, &[0, 1], &[paper_prior(), paper_prior()]).unwrap();
        assert_eq!(out, vec![(0, bx([1.0, 0.0, 10.0, 10.0]))]);
    }

    #[test]
    fn distinct_precisions_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let posts: Vec<_> = (0..3)
            .map(|_| {
                let mut p = paper_prior();
                for i in 0..4 {
                    p.beta[i][i] = rng.gen_range(0.01..3.0);
                }
                p.upsilon = rng.gen_range(1.0..50.0);
                p
            })
            .collect();
        let boxes: Vec<_> = (0..3)
            .map(|_| bx([rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(1.0..9.0), rng.gen_range(1.0..9.0)]))
            .collect();
        let m = MatchSet { pairs: vec![(0, 1), (1, 1), (2, 1)] };
        let out = aggregate_boxes(&m, &boxes, &[0, 1, 2], &posts).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 1);
        for c in 0..4 {
            let w: Vec<f64> = posts.iter().map(|p| p.upsilon / p.beta[c][c]).collect();
            let expect = (0..3).map(|k| w[k] * boxes[k].to_array()[c]).sum::<f64>() / w.iter().sum::<f64>();
            assert!((out[0].1.to_array()[c] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_is_floored() {
        let p = GaussianGammaParams::isotropic(IDENTITY_MEAN, 10.0, 0.0);
        assert_eq!(p.precision().unwrap(), [1.0 / VARIANCE_FLOOR; 4]);
        let mut bad = p;
        bad.beta[1][1] = -1.0;
        assert!(bad.precision().is_err());
    }

    proptest! {
        #[test]
        fn depends_only_on_sufficient_statistics(seed in 0u64..5000, n in 1usize..60, cut in 0usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = random_samples(&mut rng, n);
            let cut = cut.min(n);
            let whole = update_posterior(&paper_prior(), &samples);
            let merged = ErrorStats::from_samples(&samples[..cut]).merge(&ErrorStats::from_samples(&samples[cut..]));
            let split = posterior_from_stats(&paper_prior(), &merged);
            let mut shuffled = samples.clone();
            shuffled.reverse();
            let reordered = update_posterior(&paper_prior(), &shuffled);
            for i in 0..4 {
                prop_assert!((whole.mu[i] - split.mu[i]).abs() < 1e-12);
                prop_assert!((whole.mu[i] - reordered.mu[i]).abs() < 1e-12);
                for j in 0..4 {
                    prop_assert!((whole.beta[i][j] - split.beta[i][j]).abs() < 1e-9);
                    prop_assert!((whole.beta[i][j] - reordered.beta[i][j]).abs() < 1e-9);
                }
            }
            prop_assert_eq!(whole.upsilon, split.upsilon);
        }

        #[test]
        fn beta_stays_symmetric_psd(seed in 0u64..5000, n in 0usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = update_posterior(&paper_prior(), &random_samples(&mut rng, n));
            prop_assert!(post.defect().is_none());
            let m = Matrix4::from_fn(|i, j| post.beta[i][j]);
            prop_assert!((m - m.transpose()).abs().max() < 1e-12);
            let eig = m.symmetric_eigen().eigenvalues;
            prop_assert!(eig.iter().all(|&l| l >= -1e-10));
        }

        #[test]
        fn mean_lies_on_segment(seed in 0u64..5000, n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = random_samples(&mut rng, n);
            let stats = ErrorStats::from_samples(&samples);
            let post = posterior_from_stats(&paper_prior(), &stats);
            let frac = n as f64 / (n as f64 + 1.0);
            for i in 0..4 {
                let expect = paper_prior().mu[i] + frac * (stats.mean[i] - paper_prior().mu[i]);
                prop_assert!((post.mu[i] - expect).abs() < 1e-12);
            }
        }
    }
}
