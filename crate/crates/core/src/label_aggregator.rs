//! Per-annotator Dirichlet confusion matrices and the soft true-label posterior.
//!
//! Row `j` of annotator `k`'s confusion matrix is the distribution of the
//! class `k` reports when the true class is `j`. Each row has a Dirichlet
//! prior; the variational posterior over the true label of a prediction
//! combines the detector's class probabilities with the expected log
//! confusion entries of every annotation matched to it.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::special::digamma;

/// Dirichlet parameters of one annotator, `alpha[true_class][reported_class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorConfusion {
    pub alpha: Vec<Vec<f64>>,
}

impl AnnotatorConfusion {
    /// `diag` on the diagonal, `off_diag` elsewhere.
    pub fn prior(num_classes: usize, diag: f64, off_diag: f64) -> Self {
        let alpha = (0..num_classes)
            .map(|j| {
                (0..num_classes)
                    .map(|l| if j == l { diag } else { off_diag })
                    .collect()
            })
            .collect();
        AnnotatorConfusion { alpha }
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn defect(&self) -> Option<String> {
        let j = self.alpha.len();
        if j == 0 {
            return Some("confusion matrix is empty".into());
        }
        for (r, row) in self.alpha.iter().enumerate() {
            if row.len() != j {
                return Some(format!("row {r} has {} entries, expected {j}", row.len()));
            }
            if let Some(x) = row.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Some(format!("row {r} has non-positive entry {x}"));
            }
        }
        None
    }

    /// Posterior mean confusion matrix (rows sum to one).
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.alpha
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(|a| a / s).collect()
            })
            .collect()
    }

    /// Average of the diagonal of the posterior mean confusion matrix.
    pub fn mean_diagonal(&self) -> f64 {
        let norm = self.row_normalized();
        norm.iter().enumerate().map(|(j, row)| row[j]).sum::<f64>() / norm.len() as f64
    }
}

/// A probability vector over the true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub rho: Vec<f64>,
}

/// `E[ln pi_{j,c}] = digamma(alpha_{j,c}) - digamma(sum_l alpha_{j,l})`.
pub fn expected_log_pi(alpha: &AnnotatorConfusion) -> Vec<Vec<f64>> {
    alpha
        .alpha
        .iter()
        .map(|row| {
            let total = digamma(row.iter().sum());
            row.iter().map(|&a| digamma(a) - total).collect()
        })
        .collect()
}

/// Soft label from the detector's class probabilities and the `(class_id, annotator_id)`
/// labels matched to the prediction.
pub fn aggregate_labels(
    pred_probs: &[f64],
    matched: &[(usize, usize)],
    confusions: &[AnnotatorConfusion],
) -> Result<SoftLabel> {
    let elp: Vec<_> = confusions.iter().map(expected_log_pi).collect();
    aggregate_labels_with(pred_probs, matched, &elp)
}

/// [`aggregate_labels`] with expected log confusions computed up front, one per annotator.
pub fn aggregate_labels_with(
    pred_probs: &[f64],
    matched: &[(usize, usize)],
    expected_log_pis: &[Vec<Vec<f64>>],
) -> Result<SoftLabel> {
    if pred_probs.iter().all(|&p| p <= 0.0) {
        return Err(Error::Usage("predicted class probabilities are all zero".into()));
    }
    let j = pred_probs.len();
    let mut score: Vec<f64> = pred_probs.iter().map(|p| p.ln()).collect();
    for &(c, k) in matched {
        let elp = expected_log_pis
            .get(k)
            .ok_or_else(|| Error::Usage(format!("no confusion matrix for annotator {k}")))?;
        if c >= j || elp.len() != j {
            return Err(Error::Usage(format!(
                "label {c} from annotator {k} does not fit {j} classes"
            )));
        }
        for (t, s) in score.iter_mut().enumerate() {
            *s += elp[t][c];
        }
    }
    Ok(SoftLabel {
        rho: normalize_log(&score),
    })
}

fn normalize_log(score: &[f64]) -> Vec<f64> {
    let max = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = score.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// One matched label and the soft label of the prediction it matched.
#[derive(Debug, Clone, Copy)]
pub struct LabelEvidence<'a> {
    pub class_id: usize,
    pub annotator_id: usize,
    pub rho: &'a [f64],
}

/// Adds the soft co-occurrence counts to the prior for every annotator.
///
/// Each match spreads a total mass of one over column `class_id`, weighted by `rho`.
pub fn update_alpha(
    alpha0: &AnnotatorConfusion,
    num_annotators: usize,
    evidence: &[LabelEvidence<'_>],
) -> Vec<AnnotatorConfusion> {
    let mut out = vec![alpha0.clone(); num_annotators];
    for e in evidence {
        let Some(conf) = out.get_mut(e.annotator_id) else {
            continue;
        };
        for (j, &r) in e.rho.iter().enumerate() {
            conf.alpha[j][e.class_id] += r;
        }
    }
    out
}

/// Labels matched to one prediction together with its detector probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelItem {
    pub pred_probs: Vec<f64>,
    /// `(class_id, annotator_id)` pairs.
    pub matched: Vec<(usize, usize)>,
}

fn ln_dirichlet_norm(row: &[f64]) -> f64 {
    ln_gamma(row.iter().sum()) - row.iter().map(|&a| ln_gamma(a)).sum::<f64>()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y
    }
}

/// Evidence lower bound of the label model under the factorized posterior
/// `q(t) = prod_n Cat(rhos[n])`, `q(pi) = prod Dir(posterior)`.
///
/// Evaluated term by term: expected log likelihood of the labels, expected
/// log detector prior of the true labels, expected log Dirichlet prior, and
/// the entropies of both factors.
pub fn label_elbo(
    items: &[LabelItem],
    rhos: &[Vec<f64>],
    prior: &[AnnotatorConfusion],
    posterior: &[AnnotatorConfusion],
) -> f64 {
    let elp: Vec<_> = posterior.iter().map(expected_log_pi).collect();
    let mut total = 0.0;
    for (item, rho) in items.iter().zip(rhos) {
        for (j, &r) in rho.iter().enumerate() {
            let mut ll = 0.0;
            for &(c, k) in &item.matched {
                ll += elp[k][j][c];
            }
            total += xlogy(r, ll);
            total += xlogy(r, item.pred_probs[j].ln());
            total -= xlogy(r, r.ln());
        }
    }
    for ((p0, q), e) in prior.iter().zip(posterior).zip(&elp) {
        for j in 0..p0.alpha.len() {
            total += ln_dirichlet_norm(&p0.alpha[j]);
            total -= ln_dirichlet_norm(&q.alpha[j]);
            for l in 0..p0.alpha.len() {
                total += (p0.alpha[j][l] - q.alpha[j][l]) * e[j][l];
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_confusion(rng: &mut ChaCha8Rng, j: usize) -> AnnotatorConfusion {
        AnnotatorConfusion {
            alpha: (0..j)
                .map(|_| (0..j).map(|_| rng.gen_range(0.2..20.0)).collect())
                .collect(),
        }
    }

    #[test]
    fn expected_log_pi_uniform_pair() {
        let e = expected_log_pi(&AnnotatorConfusion {
            alpha: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        });
        for row in e {
            for x in row {
                assert!((x + 1.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn expected_log_pi_diag_heavy() {
        let e = expected_log_pi(&AnnotatorConfusion::prior(3, 10.0, 1.0));
        // psi(12) - psi(10) = 1/10 + 1/11
        let expect = -(1.0 / 10.0 + 1.0 / 11.0);
        for (j, row) in e.iter().enumerate() {
            assert!((row[j] - expect).abs() < 1e-12);
            assert!(row.iter().all(|&x| x <= 0.0));
        }
    }

    #[test]
    fn expected_log_pi_large_counts_approach_mean() {
        let conf = AnnotatorConfusion {
            alpha: vec![vec![9000.0, 700.0, 300.0], vec![2500.0, 5000.0, 2500.0], vec![1.0, 1.0, 1e4]],
        };
        let e = expected_log_pi(&conf);
        let m = conf.row_normalized();
        for j in 0..3 {
            for c in 0..3 {
                assert!((e[j][c].exp() - m[j][c]).abs() < 1e-3, "{j},{c}");
            }
        }
    }

    #[test]
    fn no_matches_returns_prediction() {
        let p = vec![0.2, 0.5, 0.3];
        let rho = aggregate_labels(&p, &[], &[]).unwrap();
        for j in 0..3 {
            assert!((rho.rho[j] - p[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_annotator_decides_under_uniform_prediction() {
        let conf = vec![AnnotatorConfusion::prior(4, 50.0, 1.0)];
        let rho = aggregate_labels(&[0.25; 4], &[(2, 0)], &conf).unwrap();
        assert_eq!(crate::dataset::argmax(&rho.rho), 2);
        assert!((rho.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_prediction_is_rejected() {
        assert!(aggregate_labels(&[0.0, 0.0], &[], &[]).is_err());
    }

    #[test]
    fn brute_force_log_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let confs = vec![random_confusion(&mut rng, 3), random_confusion(&mut rng, 3)];
        let p = [0.1, 0.6, 0.3];
        let matched = [(0, 0), (2, 1), (2, 0)];
        let got = aggregate_labels(&p, &matched, &confs).unwrap();
        let mut unnorm = [0.0; 3];
        for j in 0..3 {
            let mut s = p[j].ln();
            for &(c, k) in &matched {
                let row = &confs[k].alpha[j];
                s += statrs::function::gamma::digamma(row[c])
                    - statrs::function::gamma::digamma(row.iter().sum());
            }
            unnorm[j] = s.exp();
        }
        let z: f64 = unnorm.iter().sum();
        for j in 0..3 {
            assert!((got.rho[j] - unnorm[j] / z).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_update_examples() {
        let a0 = AnnotatorConfusion::prior(2, 10.0, 1.0);
        assert_eq!(update_alpha(&a0, 2, &[]), vec![a0.clone(), a0.clone()]);
        let rho = [0.7, 0.3];
        let out = update_alpha(
            &a0,
            1,
            &[LabelEvidence {
                class_id: 1,
                annotator_id: 0,
                rho: &rho,
            }],
        );
        assert_eq!(out[0].alpha, vec![vec![10.0, 1.7], vec![1.0, 10.3]]);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(seed in 0u64..5000, shift in -50.0..50.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let score: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let shifted: Vec<f64> = score.iter().map(|s| s + shift).collect();
            let (a, b) = (normalize_log(&score), normalize_log(&shifted));
            for j in 0..4 {
                prop_assert!((a[j] - b[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn soft_labels_normalize(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let confs: Vec<_> = (0..3).map(|_| random_confusion(&mut rng, 4)).collect();
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let matched: Vec<_> = (0..rng.gen_range(0..8)).map(|_| (rng.gen_range(0..4), rng.gen_range(0..3))).collect();
            let rho = aggregate_labels(&p, &matched, &confs).unwrap();
            prop_assert!((rho.rho.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(rho.rho.iter().all(|&r| r >= 0.0));
        }

        #[test]
        fn conservation(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a0 = AnnotatorConfusion::prior(3, 10.0, 1.0);
            let rhos: Vec<Vec<f64>> = (0..30).map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            }).collect();
            let ev: Vec<_> = rhos.iter().map(|r| LabelEvidence {
                class_id: rng.gen_range(0..3),
                annotator_id: rng.gen_range(0..4),
                rho: r,
            }).collect();
            let out = update_alpha(&a0, 4, &ev);
            for (k, conf) in out.iter().enumerate() {
                let added: f64 = conf.alpha.iter().flatten().sum::<f64>() - a0.alpha.iter().flatten().sum::<f64>();
                let count = ev.iter().filter(|e| e.annotator_id == k).count() as f64;
                prop_assert!((added - count).abs() < 1e-9);
                prop_assert!(conf.defect().is_none());
            }
        }
    }
}
