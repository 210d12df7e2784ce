//! Average precision against ground truth, and clustering of annotators by
//! their learned posteriors.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::box_aggregator::GaussianGammaParams;
use crate::dataset::{AggregatedInstance, GroundTruth, ImageId};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::label_aggregator::AnnotatorConfusion;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Confidence attached to an aggregated instance when it is scored as a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    MaxSoftLabel,
    Gamma,
}

/// Top class of each instance, scored by `source`.
pub fn detections_from_instances(instances: &[AggregatedInstance], source: ScoreSource) -> Vec<Detection> {
    instances
        .iter()
        .map(|inst| Detection {
            image_id: inst.image_id,
            bbox: inst.bbox,
            class_id: inst.top_class(),
            score: match source {
                ScoreSource::MaxSoftLabel => inst.top_prob(),
                ScoreSource::Gamma => inst.gamma,
            },
        })
        .collect()
}

/// Ground truth scored as perfect detections.
pub fn detections_from_truth(gt: &[GroundTruth]) -> Vec<Detection> {
    gt.iter()
        .map(|g| Detection {
            image_id: g.image_id,
            bbox: g.bbox,
            class_id: g.class_id,
            score: 1.0,
        })
        .collect()
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub thresholds: Vec<f64>,
    /// `per_class[c][t]`, on a 0-100 scale; `None` for classes without ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub mean: Vec<f64>,
}

impl APReport {
    fn at(&self, thresh: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - thresh).abs() < 1e-9)
            .map(|i| self.mean[i])
    }

    pub fn ap50(&self) -> Option<f64> {
        self.at(0.5)
    }

    pub fn ap75(&self) -> Option<f64> {
        self.at(0.75)
    }

    /// Mean over all evaluated thresholds.
    pub fn ap_mean(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len().max(1) as f64
    }

    /// Plain-text table: one row per class, then the class mean.
    pub fn table(&self) -> String {
        let mut s = String::from("class");
        for t in &self.thresholds {
            write!(s, "  AP@{t:.2}").unwrap();
        }
        s.push_str("  AP@mean\n");
        let row = |label: &str, vals: &[Option<f64>]| {
            let mut r = format!("{label:>5}");
            for v in vals {
                match v {
                    Some(v) => write!(r, "  {v:>7.2}").unwrap(),
                    None => write!(r, "  {:>7}", "-").unwrap(),
                }
            }
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            if present.is_empty() {
                write!(r, "  {:>7}", "-").unwrap();
            } else {
                write!(r, "  {:>7.2}", present.iter().sum::<f64>() / present.len() as f64).unwrap();
            }
            r.push('\n');
            r
        };
        for (c, vals) in self.per_class.iter().enumerate() {
            s.push_str(&row(&c.to_string(), vals));
        }
        let mean: Vec<Option<f64>> = self.mean.iter().map(|&m| Some(m)).collect();
        s.push_str(&row("all", &mean));
        s
    }
}

/// Interpolated precision at `RECALL_POINTS` evenly spaced recall levels, averaged.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let n = tp.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < n {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// Greedy matching of one class's detections, highest score first (input order on ties).
///
/// Each detection takes the unmatched ground-truth object of its image with
/// the highest IoU, if that IoU reaches `thresh`.
fn match_class(dets: &[&Detection], gts: &[&GroundTruth], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&d| {
            let det = dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image_id != det.image_id {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if v >= thresh && best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// COCO-style AP with 101-point interpolation, per class and IoU threshold.
pub fn average_precision(
    detections: &[Detection],
    gt: &[GroundTruth],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<APReport> {
    if gt.is_empty() {
        return Err(Error::Usage("average precision needs at least one ground-truth object".into()));
    }
    if let Some(g) = gt.iter().find(|g| g.class_id >= num_classes) {
        return Err(Error::Usage(format!("ground-truth class {} not below {num_classes}", g.class_id)));
    }
    if let Some(d) = detections.iter().find(|d| d.class_id >= num_classes) {
        return Err(Error::Usage(format!("detection class {} not below {num_classes}", d.class_id)));
    }
    if thresholds.is_empty() {
        return Err(Error::Usage("no IoU thresholds given".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Usage(format!("IoU threshold {t} outside (0, 1]")));
    }
    let cells: Vec<(usize, usize)> = (0..num_classes)
        .flat_map(|c| (0..thresholds.len()).map(move |t| (c, t)))
        .collect();
    let values: Vec<Option<f64>> = cells
        .par_iter()
        .map(|&(c, t)| {
            let gts: Vec<&GroundTruth> = gt.iter().filter(|g| g.class_id == c).collect();
            if gts.is_empty() {
                return None;
            }
            let dets: Vec<&Detection> = detections.iter().filter(|d| d.class_id == c).collect();
            let tp = match_class(&dets, &gts, thresholds[t]);
            Some(100.0 * interpolated_ap(&tp, gts.len()))
        })
        .collect();
    let per_class: Vec<Vec<Option<f64>>> = values.chunks(thresholds.len().max(1)).map(|c| c.to_vec()).collect();
    let mean = (0..thresholds.len())
        .map(|t| {
            let present: Vec<f64> = per_class.iter().filter_map(|row| row[t]).collect();
            present.iter().sum::<f64>() / present.len() as f64
        })
        .collect();
    Ok(APReport {
        thresholds: thresholds.to_vec(),
        per_class,
        mean,
    })
}

/// Mean AP over IoU thresholds 0.50:0.95.
pub fn ap_range(detections: &[Detection], gt: &[GroundTruth], num_classes: usize) -> Result<f64> {
    Ok(average_precision(detections, gt, num_classes, &coco_thresholds())?.ap_mean())
}

/// Feature vector of one annotator: box mean, upsilon, flattened beta, and
/// the flattened row-normalized confusion.
pub fn annotator_feature(post: &GaussianGammaParams, conf: &AnnotatorConfusion) -> Vec<f64> {
    let mut f = post.mu.to_vec();
    f.push(post.upsilon);
    f.extend(post.beta.iter().flatten());
    f.extend(conf.row_normalized().into_iter().flatten());
    f
}

/// Zero mean, unit variance per dimension; constant dimensions become zero.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = points.first().map_or(0, Vec::len);
    let blocks: Vec<Range<usize>> = (0..d).map(|j| j..j + 1).collect();
    standardize_blocks(points, &blocks)
}

/// Centers every dimension, then divides each block of dimensions by the
/// block's pooled standard deviation. Dimensions outside every block are
/// left centered but unscaled; constant blocks become zero.
pub fn standardize_blocks(points: &[Vec<f64>], blocks: &[Range<usize>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let d = points.first().map_or(0, Vec::len);
    let mut out = points.to_vec();
    let mut means = vec![0.0; d];
    for (j, m) in means.iter_mut().enumerate() {
        *m = points.iter().map(|p| p[j]).sum::<f64>() / n;
        for p in &mut out {
            p[j] -= *m;
        }
    }
    for block in blocks {
        let var = block
            .clone()
            .map(|j| out.iter().map(|p| p[j] * p[j]).sum::<f64>() / n)
            .sum::<f64>()
            / block.len() as f64;
        let sd = var.sqrt();
        let scale = block.clone().map(|j| means[j].abs()).fold(0.0, f64::max);
        for p in &mut out {
            for j in block.clone() {
                p[j] = if sd > 1e-12 * (1.0 + scale) { p[j] / sd } else { 0.0 };
            }
        }
    }
    out
}

/// Dimension ranges of μ, υ, β and α inside [`annotator_feature`].
pub fn feature_blocks(num_classes: usize) -> Vec<Range<usize>> {
    vec![0..4, 4..5, 5..21, 21..21 + num_classes * num_classes]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

const KMEANS_MAX_ITER: usize = 300;

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            for c in 1..k {
                if sq_dist(p, &centroids[c]) < sq_dist(p, &centroids[best]) {
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let d = points[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Reseed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assignments[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[assignments[b]]))
                    })
                    .unwrap_or(0);
                centroids[c] = points[far].clone();
                assignments[far] = c;
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KMeans {
        assignments,
        centroids,
        inertia,
    }
}

/// k-means with k-means++ seeding; the restart with the lowest inertia wins.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::Usage(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(points, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub const CLUSTER_RESTARTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Mean over the cluster's annotators of the average confusion diagonal.
    pub mean_diagonal: Vec<f64>,
    /// Within-cluster sum of squares in standardized feature space.
    pub inertia: f64,
}

/// Groups annotators by their posterior features, standardized per parameter block.
pub fn cluster_annotators(
    posteriors: &[GaussianGammaParams],
    confusions: &[AnnotatorConfusion],
    k: usize,
    seed: u64,
) -> Result<ClusterReport> {
    if posteriors.len() != confusions.len() {
        return Err(Error::Usage(format!(
            "{} box posteriors but {} confusion matrices",
            posteriors.len(),
            confusions.len()
        )));
    }
    if k == 0 || k > posteriors.len() {
        return Err(Error::Usage(format!(
            "k = {k} clusters requested for {} annotators",
            posteriors.len()
        )));
    }
    let features: Vec<Vec<f64>> = posteriors.iter().zip(confusions).map(|(p, c)| annotator_feature(p, c)).collect();
    let blocks = feature_blocks(confusions[0].num_classes());
    let km = kmeans(&standardize_blocks(&features, &blocks), k, CLUSTER_RESTARTS, seed)?;
    let mut sizes = vec![0usize; k];
    let mut diag = vec![0.0; k];
    for (a, conf) in km.assignments.iter().zip(confusions) {
        sizes[*a] += 1;
        diag[*a] += conf.mean_diagonal();
    }
    let mean_diagonal = diag
        .iter()
        .zip(&sizes)
        .map(|(d, &s)| if s == 0 { f64::NAN } else { d / s as f64 })
        .collect();
    Ok(ClusterReport {
        assignments: km.assignments,
        sizes,
        mean_diagonal,
        inertia: km.inertia,
    })
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same items.
///
/// Two identical trivial partitions score one.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = rows * cols / choose2(n);
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
