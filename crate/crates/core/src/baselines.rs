//! Comparison aggregators: majority voting and weighted boxes fusion with
//! agreement-based loss weights.

use rayon::prelude::*;

use crate::dataset::{Annotation, AggregatedInstance, CrowdDataset};
use crate::geometry::{iou, BBox};

pub const DEFAULT_CLUSTER_IOU: f64 = 0.5;

/// Annotations of one image grouped around a seed annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationCluster {
    /// Index of the annotation that opened the cluster.
    pub seed: usize,
    /// Member indices in input order, seed first.
    pub members: Vec<usize>,
}

/// Greedy clustering in input order: each annotation joins the first
/// cluster whose seed box overlaps it with IoU at least `iou_thresh`,
/// otherwise it seeds a new cluster.
pub fn cluster_annotations(anns: &[Annotation], iou_thresh: f64) -> Vec<AnnotationCluster> {
    let mut clusters: Vec<AnnotationCluster> = Vec::new();
    for (i, a) in anns.iter().enumerate() {
        match clusters
            .iter_mut()
            .find(|c| iou(&anns[c.seed].bbox, &a.bbox) >= iou_thresh)
        {
            Some(c) => c.members.push(i),
            None => clusters.push(AnnotationCluster {
                seed: i,
                members: vec![i],
            }),
        }
    }
    clusters
}

/// Bounding box of the region covered by strictly more than half of `boxes`.
///
/// Exact: the plane is cut along every distinct box edge and each cell is
/// tested once. Returns `None` when no cell reaches a majority.
pub fn majority_region(boxes: &[BBox]) -> Option<BBox> {
    if boxes.is_empty() {
        return None;
    }
    let corners: Vec<_> = boxes.iter().map(BBox::corners).collect();
    let mut xs: Vec<f64> = corners.iter().flat_map(|c| [c.0, c.2]).collect();
    let mut ys: Vec<f64> = corners.iter().flat_map(|c| [c.1, c.3]).collect();
    for v in [&mut xs, &mut ys] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let need = boxes.len() / 2 + 1;
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for xw in xs.windows(2) {
        let mx = 0.5 * (xw[0] + xw[1]);
        let column: Vec<_> = corners.iter().filter(|c| c.0 < mx && mx < c.2).collect();
        if column.len() < need {
            continue;
        }
        for yw in ys.windows(2) {
            let my = 0.5 * (yw[0] + yw[1]);
            let count = column.iter().filter(|c| c.1 < my && my < c.3).count();
            if count >= need {
                x1 = x1.min(xw[0]);
                x2 = x2.max(xw[1]);
                y1 = y1.min(yw[0]);
                y2 = y2.max(yw[1]);
            }
        }
    }
    if x1 < x2 && y1 < y2 {
        BBox::from_corners(x1, y1, x2, y2).ok()
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MajorityVote {
    pub bbox: BBox,
    pub class_id: usize,
    /// Votes per class over the cluster members.
    pub votes: Vec<usize>,
}

/// Mode class (lowest index on ties) and majority-region box of one cluster.
pub fn majority_vote(
    anns: &[Annotation],
    cluster: &AnnotationCluster,
    num_classes: usize,
) -> Option<MajorityVote> {
    if cluster.members.is_empty() {
        return None;
    }
    let mut votes = vec![0usize; num_classes];
    for &m in &cluster.members {
        if let Some(v) = votes.get_mut(anns[m].class_id) {
            *v += 1;
        }
    }
    let mut class_id = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[class_id] {
            class_id = c;
        }
    }
    let boxes: Vec<BBox> = cluster.members.iter().map(|&m| anns[m].bbox).collect();
    let bbox = majority_region(&boxes)?;
    Some(MajorityVote {
        bbox,
        class_id,
        votes,
    })
}

/// Majority voting over a whole dataset.
///
/// Soft labels are the vote fractions; `gamma` is the member count over
/// `num_annotators`, clamped to one.
pub fn majority_vote_dataset(ds: &CrowdDataset, iou_thresh: f64) -> Vec<AggregatedInstance> {
    let groups = ds.annotations_by_image();
    ds.images
        .par_iter()
        .zip(groups.par_iter())
        .flat_map_iter(|(im, idx)| {
            let anns: Vec<Annotation> = idx.iter().map(|&i| ds.annotations[i]).collect();
            cluster_annotations(&anns, iou_thresh)
                .into_iter()
                .filter_map(|c| {
                    let vote = majority_vote(&anns, &c, ds.num_classes)?;
                    let n = c.members.len();
                    Some(AggregatedInstance {
                        image_id: im.id,
                        bbox: vote.bbox,
                        soft_label: vote.votes.iter().map(|&v| v as f64 / n as f64).collect(),
                        gamma: agreement_weight(n, ds.num_annotators),
                        support: n,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    /// Indices of the fused annotations.
    pub members: Vec<usize>,
}

/// Weighted boxes fusion, one class at a time.
///
/// Boxes are visited in decreasing annotator weight (input order among
/// equals) and join the running fused box they overlap most, if that IoU
/// reaches `iou_thresh`. Fused coordinates are weight-weighted means of the
/// members; confidence is the members' weight over the total weight of all
/// annotators, clamped to one.
pub fn weighted_boxes_fusion(anns: &[Annotation], weights: &[f64], iou_thresh: f64) -> Vec<FusedBox> {
    let total_weight: f64 = weights.iter().sum();
    let weight_of = |a: &Annotation| weights.get(a.annotator_id).copied().unwrap_or(0.0);
    let mut classes: Vec<usize> = anns.iter().map(|a| a.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out = Vec::new();
    for class in classes {
        let mut order: Vec<usize> = (0..anns.len()).filter(|&i| anns[i].class_id == class).collect();
        order.sort_by(|&a, &b| weight_of(&anns[b]).total_cmp(&weight_of(&anns[a])));

        let mut fused: Vec<FusedBox> = Vec::new();
        for i in order {
            let b = anns[i].bbox;
            let best = fused
                .iter()
                .enumerate()
                .map(|(f, fb)| (f, iou(&fb.bbox, &b)))
                .filter(|&(_, v)| v >= iou_thresh)
                .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
            match best {
                Some((f, _)) => {
                    fused[f].members.push(i);
                    fused[f].bbox = weighted_mean_box(anns, &fused[f].members, &weight_of);
                }
                None => fused.push(FusedBox {
                    bbox: b,
                    class_id: class,
                    confidence: 0.0,
                    members: vec![i],
                }),
            }
        }
        for fb in &mut fused {
            let w: f64 = fb.members.iter().map(|&m| weight_of(&anns[m])).sum();
            fb.confidence = if total_weight > 0.0 { (w / total_weight).min(1.0) } else { 0.0 };
        }
        out.extend(fused);
    }
    out
}

fn weighted_mean_box(anns: &[Annotation], members: &[usize], weight_of: &impl Fn(&Annotation) -> f64) -> BBox {
    let mut acc = [0.0; 4];
    let mut total = 0.0;
    for &m in members {
        let w = weight_of(&anns[m]);
        let b = anns[m].bbox.to_array();
        for i in 0..4 {
            acc[i] += w * b[i];
        }
        total += w;
    }
    if total <= 0.0 {
        return anns[members[0]].bbox;
    }
    BBox::from(acc.map(|x| x / total))
}

/// Member count over `num_annotators`, clamped to one.
pub fn agreement_weight(members: usize, num_annotators: usize) -> f64 {
    (members as f64 / num_annotators.max(1) as f64).min(1.0)
}

/// Loss weights for fused boxes: agreement of each box.
pub fn earl_weights(fused: &[FusedBox], num_annotators: usize) -> Vec<f64> {
    fused
        .iter()
        .map(|f| agreement_weight(f.members.len(), num_annotators))
        .collect()
}

/// Fraction of each annotator's labels that carry the class of a ground-truth
/// object they overlap with IoU at least 0.5.
///
/// `None` when the dataset has no ground truth. Annotators without
/// annotations get zero.
pub fn annotator_accuracy(ds: &CrowdDataset) -> Option<Vec<f64>> {
    ds.ground_truth.as_ref()?;
    let gt = ds.ground_truth_by_image();
    let mut hits = vec![0usize; ds.num_annotators];
    let mut totals = vec![0usize; ds.num_annotators];
    for a in &ds.annotations {
        if a.annotator_id >= ds.num_annotators {
            continue;
        }
        totals[a.annotator_id] += 1;
        let best = gt.get(&a.image_id).and_then(|objs| {
            objs.iter()
                .map(|g| (iou(&g.bbox, &a.bbox), g.class_id))
                .max_by(|x, y| x.0.total_cmp(&y.0))
        });
        if let Some((v, c)) = best {
            if v >= 0.5 && c == a.class_id {
                hits[a.annotator_id] += 1;
            }
        }
    }
    Some(
        hits.iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
    )
}

/// Smallest annotator weight handed to weighted boxes fusion.
pub const MIN_WBF_WEIGHT: f64 = 1e-3;

/// Weighted boxes fusion over a whole dataset with agreement weights as `gamma`.
///
/// Annotator weights default to their accuracy when ground truth is present,
/// uniform otherwise.
pub fn wbf_earl_dataset(ds: &CrowdDataset, weights: Option<&[f64]>, iou_thresh: f64) -> Vec<AggregatedInstance> {
    let owned;
    let weights = match weights {
        Some(w) => w,
        None => {
            owned = annotator_accuracy(ds)
                .map(|acc| acc.into_iter().map(|a| a.max(MIN_WBF_WEIGHT)).collect())
                .unwrap_or_else(|| vec![1.0; ds.num_annotators]);
            &owned
        }
    };
    let groups = ds.annotations_by_image();
    ds.images
        .par_iter()
        .zip(groups.par_iter())
        .flat_map_iter(|(im, idx)| {
            let anns: Vec<Annotation> = idx.iter().map(|&i| ds.annotations[i]).collect();
            let fused = weighted_boxes_fusion(&anns, weights, iou_thresh);
            let gammas = earl_weights(&fused, ds.num_annotators);
            fused
                .into_iter()
                .zip(gammas)
                .map(|(f, gamma)| {
                    let mut soft_label = vec![0.0; ds.num_classes];
                    soft_label[f.class_id] = 1.0;
                    AggregatedInstance {
                        image_id: im.id,
                        bbox: f.bbox,
                        soft_label,
                        gamma,
                        support: f.members.len(),
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect()
}
