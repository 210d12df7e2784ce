//! Synthetic crowds: noisy annotators drawn from ground truth.
//!
//! Each annotator gets a confusion matrix over the classes plus a trailing
//! background class, resampled from a base matrix. A background label on a
//! ground-truth object is a missed object; a non-background label drawn from
//! the background row once per covered image is a false positive. Boxes are
//! picked from a pool of jittered proposals around the ground truth.

use rand::distributions::WeightedIndex;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, CrowdDataset, GroundTruth, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, MIN_BOX_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Expert,
    Average,
    Poor,
    Random,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Expert, Tier::Average, Tier::Poor, Tier::Random];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Expert => "expert",
            Tier::Average => "average",
            Tier::Poor => "poor",
            Tier::Random => "random",
        }
    }

    pub fn coverage(self) -> f64 {
        match self {
            Tier::Expert => 0.05,
            Tier::Average => 0.01,
            Tier::Poor => 0.005,
            Tier::Random => 0.01,
        }
    }

    /// Probability of the reported class matching the true class.
    fn diagonal(self) -> f64 {
        match self {
            Tier::Expert => 0.9,
            Tier::Average => 0.7,
            Tier::Poor => 0.45,
            Tier::Random => f64::NAN,
        }
    }

    /// Missed-object and false-positive rates.
    fn miss_and_false_alarm(self) -> (f64, f64) {
        match self {
            Tier::Expert => (0.05, 0.05),
            Tier::Average => (0.1, 0.1),
            Tier::Poor => (0.15, 0.2),
            Tier::Random => (f64::NAN, f64::NAN),
        }
    }

    fn box_sigma(self) -> f64 {
        match self {
            Tier::Expert => 0.02,
            Tier::Average => 0.05,
            Tier::Poor => 0.10,
            Tier::Random => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxNoise {
    /// Proposals jittered around the ground truth.
    Gaussian {
        /// Center shift standard deviation as a fraction of the box size.
        center_sigma: f64,
        /// Standard deviation of the log width and log height ratios.
        log_scale_sigma: f64,
    },
    /// Boxes uniform over the image, unrelated to the object.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorProfile {
    /// `(J+1) x (J+1)` nonnegative matrix; the last row and column are background.
    pub base_confusion: Vec<Vec<f64>>,
    /// Rows of the annotator's confusion are drawn from `Dir(concentration * base row)`.
    /// `None` uses the normalized base rows unchanged.
    pub concentration: Option<f64>,
    pub box_noise: BoxNoise,
    /// Proposals generated around each ground-truth box.
    pub proposal_pool_size: usize,
    /// Extra proposals uniform over each image.
    pub background_proposals: usize,
    /// Fraction of images seen by the annotator.
    pub coverage: f64,
    pub seed: u64,
}

pub const DEFAULT_CONCENTRATION: f64 = 200.0;
pub const DEFAULT_POOL_SIZE: usize = 20;
pub const DEFAULT_BACKGROUND_PROPOSALS: usize = 2;

impl AnnotatorProfile {
    /// Preset for a skill tier over `num_classes` foreground classes.
    pub fn tier(tier: Tier, num_classes: usize) -> Self {
        let j = num_classes;
        let (base_confusion, concentration, box_noise) = if tier == Tier::Random {
            (vec![vec![1.0; j + 1]; j + 1], None, BoxNoise::Uniform)
        } else {
            let d = tier.diagonal();
            let (miss, false_alarm) = tier.miss_and_false_alarm();
            let mut m = vec![vec![0.0; j + 1]; j + 1];
            for (t, row) in m.iter_mut().enumerate().take(j) {
                if j == 1 {
                    row[0] = d;
                    row[1] = 1.0 - d;
                    continue;
                }
                let spread = (1.0 - d - miss) / (j - 1) as f64;
                for (c, v) in row.iter_mut().enumerate() {
                    *v = if c == t {
                        d
                    } else if c == j {
                        miss
                    } else {
                        spread
                    };
                }
            }
            for c in 0..j {
                m[j][c] = false_alarm / j as f64;
            }
            m[j][j] = 1.0 - false_alarm;
            let s = tier.box_sigma();
            (
                m,
                Some(DEFAULT_CONCENTRATION),
                BoxNoise::Gaussian {
                    center_sigma: s,
                    log_scale_sigma: s,
                },
            )
        };
        AnnotatorProfile {
            base_confusion,
            concentration,
            box_noise,
            proposal_pool_size: DEFAULT_POOL_SIZE,
            background_proposals: DEFAULT_BACKGROUND_PROPOSALS,
            coverage: tier.coverage(),
            seed: 0,
        }
    }

    /// An annotator that reproduces the ground truth exactly.
    pub fn noiseless(num_classes: usize, coverage: f64) -> Self {
        let j = num_classes;
        let base_confusion = (0..=j).map(|t| (0..=j).map(|c| if t == c { 1.0 } else { 0.0 }).collect()).collect();
        AnnotatorProfile {
            base_confusion,
            concentration: None,
            box_noise: BoxNoise::Gaussian {
                center_sigma: 0.0,
                log_scale_sigma: 0.0,
            },
            proposal_pool_size: 1,
            background_proposals: 0,
            coverage,
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.base_confusion.len().saturating_sub(1)
    }

    pub fn defect(&self) -> Option<String> {
        let n = self.base_confusion.len();
        if n < 2 {
            return Some("base_confusion needs at least one class plus background".into());
        }
        for (r, row) in self.base_confusion.iter().enumerate() {
            if row.len() != n {
                return Some(format!("base_confusion row {r} has {} entries, expected {n}", row.len()));
            }
            if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Some(format!("base_confusion row {r} has a negative or non-finite entry"));
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return Some(format!("base_confusion row {r} sums to zero"));
            }
        }
        if let Some(c) = self.concentration {
            if !(c.is_finite() && c > 0.0) {
                return Some(format!("concentration must be positive, got {c}"));
            }
        }
        if let BoxNoise::Gaussian {
            center_sigma,
            log_scale_sigma,
        } = self.box_noise
        {
            if !(center_sigma >= 0.0 && log_scale_sigma >= 0.0 && center_sigma.is_finite() && log_scale_sigma.is_finite()) {
                return Some("box noise sigmas must be finite and non-negative".into());
            }
        }
        if self.proposal_pool_size == 0 {
            return Some("proposal_pool_size must be at least 1".into());
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Some(format!("coverage must lie in (0, 1], got {}", self.coverage));
        }
        None
    }
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    row.iter().map(|x| x / s).collect()
}

/// Draws the annotator's row-stochastic confusion matrix.
///
/// Zero base entries stay zero.
pub fn sample_confusion<R: Rng + ?Sized>(profile: &AnnotatorProfile, rng: &mut R) -> Vec<Vec<f64>> {
    let Some(conc) = profile.concentration else {
        return profile.base_confusion.iter().map(|r| normalized(r)).collect();
    };
    profile
        .base_confusion
        .iter()
        .map(|row| {
            let base = normalized(row);
            let draws: Vec<f64> = base
                .iter()
                .map(|&b| {
                    if b > 0.0 {
                        Gamma::new(conc * b, 1.0).expect("positive shape").sample(rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            if draws.iter().sum::<f64>() > 0.0 {
                normalized(&draws)
            } else {
                base
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Candidate boxes for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalPool {
    pub proposals: Vec<Proposal>,
}

/// Objectness range of the uniform background proposals.
const BACKGROUND_OBJECTNESS: (f64, f64) = (0.05, 0.3);

/// Box uniform over the image, at least `MIN_BOX_SIZE` wide and tall.
pub fn uniform_box<R: Rng + ?Sized>(width: f64, height: f64, rng: &mut R) -> BBox {
    let side = |extent: f64, rng: &mut R| {
        let lo = MIN_BOX_SIZE.min(extent / 2.0) * 2.0;
        let a = rng.gen_range(0.0..extent);
        let b = rng.gen_range(0.0..extent);
        let (mut x1, mut x2) = if a < b { (a, b) } else { (b, a) };
        if x2 - x1 < lo {
            x1 = (x1 - lo / 2.0).max(0.0);
            x2 = (x1 + lo).min(extent);
            x1 = x2 - lo;
        }
        (x1, x2)
    };
    let (x1, x2) = side(width, rng);
    let (y1, y2) = side(height, rng);
    BBox::from_corners(x1, y1, x2, y2).expect("uniform box has positive size")
}

/// `n` jittered proposals per ground-truth box plus `background` uniform ones,
/// all clamped to the image.
///
/// Objectness is `exp(-|jitter|)`, where the jitter vector holds the center
/// shifts relative to the box size and the log size ratios.
pub fn build_proposal_pool<R: Rng + ?Sized>(
    gt_boxes: &[BBox],
    center_sigma: f64,
    log_scale_sigma: f64,
    n: usize,
    background: usize,
    image: &ImageRecord,
    rng: &mut R,
) -> ProposalPool {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut proposals = Vec::with_capacity(gt_boxes.len() * n + background);
    for b in gt_boxes {
        for _ in 0..n {
            let jitter = [
                center_sigma * unit.sample(rng),
                center_sigma * unit.sample(rng),
                log_scale_sigma * unit.sample(rng),
                log_scale_sigma * unit.sample(rng),
            ];
            let raw = BBox {
                cx: b.cx + jitter[0] * b.w,
                cy: b.cy + jitter[1] * b.h,
                w: b.w * jitter[2].exp(),
                h: b.h * jitter[3].exp(),
            };
            let bbox = if raw.within(image.width, image.height) {
                raw
            } else {
                raw.clamp_to(image.width, image.height).unwrap_or(*b)
            };
            let magnitude = jitter.iter().map(|x| x * x).sum::<f64>().sqrt();
            proposals.push(Proposal {
                bbox,
                objectness: (-magnitude).exp(),
            });
        }
    }
    for _ in 0..background {
        proposals.push(Proposal {
            bbox: uniform_box(image.width, image.height, rng),
            objectness: rng.gen_range(BACKGROUND_OBJECTNESS.0..BACKGROUND_OBJECTNESS.1),
        });
    }
    ProposalPool { proposals }
}

/// Where a synthesized annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Index into the dataset's ground-truth list.
    Object(usize),
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorOutput {
    pub annotations: Vec<Annotation>,
    pub provenance: Vec<Provenance>,
    /// The sampled row-stochastic confusion matrix.
    pub confusion: Vec<Vec<f64>>,
    /// Indices into `images` of the covered images, ascending.
    pub covered: Vec<usize>,
}

/// Number of images an annotator with `coverage` sees out of `n`.
pub fn covered_count(coverage: f64, n: usize) -> usize {
    // guards against products like 0.05 * 100 = 5.000000000000001
    let raw = coverage * n as f64;
    let rounded = raw.round();
    let c = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (c as usize).min(n)
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    WeightedIndex::new(weights).ok().map(|d| d.sample(rng))
}

/// Synthesizes one annotator's labels over a dataset with ground truth.
pub fn synthesize_annotator<R: Rng + ?Sized>(
    gt: &CrowdDataset,
    profile: &AnnotatorProfile,
    annotator_id: usize,
    rng: &mut R,
) -> Result<AnnotatorOutput> {
    if let Some(d) = profile.defect() {
        return Err(Error::Config(format!("annotator {annotator_id}: {d}")));
    }
    if profile.num_classes() != gt.num_classes {
        return Err(Error::Config(format!(
            "annotator {annotator_id}: profile has {} classes, dataset has {}",
            profile.num_classes(),
            gt.num_classes
        )));
    }
    let truth = gt
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Usage("synthesis needs a dataset with ground truth".into()))?;
    let j = gt.num_classes;

    let confusion = sample_confusion(profile, rng);
    let mut covered = sample_indices(rng, gt.images.len(), covered_count(profile.coverage, gt.images.len())).into_vec();
    covered.sort_unstable();

    let index = gt.image_index();
    let mut by_image: Vec<Vec<usize>> = vec![Vec::new(); gt.images.len()];
    for (g, obj) in truth.iter().enumerate() {
        if let Some(&slot) = index.get(&obj.image_id) {
            by_image[slot].push(g);
        }
    }

    let mut annotations = Vec::new();
    let mut provenance = Vec::new();
    for &slot in &covered {
        let image = &gt.images[slot];
        let objs: Vec<&GroundTruth> = by_image[slot].iter().map(|&g| &truth[g]).collect();
        let pool = match profile.box_noise {
            BoxNoise::Gaussian {
                center_sigma,
                log_scale_sigma,
            } => {
                let boxes: Vec<BBox> = objs.iter().map(|o| o.bbox).collect();
                build_proposal_pool(
                    &boxes,
                    center_sigma,
                    log_scale_sigma,
                    profile.proposal_pool_size,
                    profile.background_proposals,
                    image,
                    rng,
                )
            }
            BoxNoise::Uniform => ProposalPool::default(),
        };
        let objectness: Vec<f64> = pool.proposals.iter().map(|p| p.objectness).collect();

        for (&g, obj) in by_image[slot].iter().zip(&objs) {
            let Some(label) = pick(&confusion[obj.class_id], rng) else {
                continue;
            };
            if label == j {
                continue;
            }
            let bbox = match profile.box_noise {
                BoxNoise::Uniform => uniform_box(image.width, image.height, rng),
                BoxNoise::Gaussian { .. } => {
                    let w: Vec<f64> = pool.proposals.iter().map(|p| iou(&obj.bbox, &p.bbox) * p.objectness).collect();
                    let l = pick(&w, rng).or_else(|| pick(&objectness, rng)).expect("pool has proposals");
                    pool.proposals[l].bbox
                }
            };
            annotations.push(Annotation {
                image_id: image.id,
                bbox,
                class_id: label,
                annotator_id,
            });
            provenance.push(Provenance::Object(g));
        }

        let Some(label) = pick(&confusion[j], rng) else {
            continue;
        };
        if label == j {
            continue;
        }
        let bbox = match profile.box_noise {
            BoxNoise::Uniform => Some(uniform_box(image.width, image.height, rng)),
            BoxNoise::Gaussian { .. } => pick(&objectness, rng).map(|l| pool.proposals[l].bbox),
        };
        if let Some(bbox) = bbox {
            annotations.push(Annotation {
                image_id: image.id,
                bbox,
                class_id: label,
                annotator_id,
            });
            provenance.push(Provenance::FalsePositive);
        }
    }
    Ok(AnnotatorOutput {
        annotations,
        provenance,
        confusion,
        covered,
    })
}

/// SplitMix64 finalizer, used to derive independent per-annotator seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn annotator_seed(master_seed: u64, annotator_id: usize, profile_seed: u64) -> u64 {
    mix_seed(mix_seed(master_seed ^ mix_seed(annotator_id as u64)) ^ profile_seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrowdSynthesis {
    pub dataset: CrowdDataset,
    /// Sampled confusion matrix of each annotator.
    pub confusions: Vec<Vec<Vec<f64>>>,
    /// Provenance of each annotation of `dataset`, index-aligned.
    pub provenance: Vec<Provenance>,
}

/// Synthesizes every annotator and merges the result.
///
/// Annotations are ordered by image, then annotator, then generation order.
pub fn synthesize_crowd_detailed(
    gt: &CrowdDataset,
    profiles: &[AnnotatorProfile],
    master_seed: u64,
) -> Result<CrowdSynthesis> {
    if profiles.is_empty() {
        return Err(Error::Config("at least one annotator profile is required".into()));
    }
    let outputs = profiles
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(annotator_seed(master_seed, k, p.seed));
            synthesize_annotator(gt, p, k, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let index = gt.image_index();
    let mut merged: Vec<(usize, usize, Annotation, Provenance)> = Vec::new();
    for (k, out) in outputs.iter().enumerate() {
        for (a, p) in out.annotations.iter().zip(&out.provenance) {
            merged.push((index[&a.image_id], k, *a, *p));
        }
    }
    merged.sort_by_key(|m| (m.0, m.1));

    let dataset = CrowdDataset {
        num_classes: gt.num_classes,
        num_annotators: profiles.len(),
        images: gt.images.clone(),
        annotations: merged.iter().map(|m| m.2).collect(),
        ground_truth: gt.ground_truth.clone(),
    };
    Ok(CrowdSynthesis {
        dataset,
        confusions: outputs.into_iter().map(|o| o.confusion).collect(),
        provenance: merged.iter().map(|m| m.3).collect(),
    })
}

pub fn synthesize_crowd(gt: &CrowdDataset, profiles: &[AnnotatorProfile], master_seed: u64) -> Result<CrowdDataset> {
    synthesize_crowd_detailed(gt, profiles, master_seed).map(|s| s.dataset)
}

/// Shape of a random ground-truth dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_images: usize,
    pub num_classes: usize,
    pub image_width: f64,
    pub image_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range as a fraction of the image side.
    pub min_size_frac: f64,
    pub max_size_frac: f64,
    /// When false, objects of one image never overlap; placements that would
    /// are retried and finally dropped.
    pub allow_overlap: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_images: 200,
            num_classes: 5,
            image_width: 640.0,
            image_height: 480.0,
            min_objects: 1,
            max_objects: 4,
            min_size_frac: 0.1,
            max_size_frac: 0.4,
            allow_overlap: true,
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 50;

/// Images with uniformly placed objects of uniform class; no annotations.
pub fn random_ground_truth(cfg: &SceneConfig, seed: u64) -> Result<CrowdDataset> {
    if cfg.num_classes == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Config(format!("invalid scene configuration {cfg:?}")));
    }
    if !(0.0 < cfg.min_size_frac && cfg.min_size_frac <= cfg.max_size_frac && cfg.max_size_frac <= 1.0) {
        return Err(Error::Config("object size fractions must satisfy 0 < min <= max <= 1".into()));
    }
    if !(cfg.image_width > 0.0 && cfg.image_height > 0.0) {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed));
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut truth = Vec::new();
    for i in 0..cfg.num_images {
        let id = i as u64;
        images.push(ImageRecord {
            id,
            width: cfg.image_width,
            height: cfg.image_height,
        });
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut placed: Vec<BBox> = Vec::with_capacity(n);
        for _ in 0..n {
            for _attempt in 0..MAX_PLACEMENT_ATTEMPTS {
                let w = cfg.image_width * rng.gen_range(cfg.min_size_frac..=cfg.max_size_frac);
                let h = cfg.image_height * rng.gen_range(cfg.min_size_frac..=cfg.max_size_frac);
                let cx = rng.gen_range(w / 2.0..=cfg.image_width - w / 2.0);
                let cy = rng.gen_range(h / 2.0..=cfg.image_height - h / 2.0);
                let bbox = BBox::new(cx, cy, w, h)?;
                let class_id = rng.gen_range(0..cfg.num_classes);
                if !cfg.allow_overlap && placed.iter().any(|p| p.intersection_area(&bbox) > 0.0) {
                    continue;
                }
                placed.push(bbox);
                truth.push(GroundTruth { image_id: id, bbox, class_id });
                break;
            }
        }
    }
    Ok(CrowdDataset {
        num_classes: cfg.num_classes,
        num_annotators: 0,
        images,
        annotations: Vec::new(),
        ground_truth: Some(truth),
    })
}

/// One entry of a profile configuration file: a tier preset, explicit
/// fields, or a preset with overrides, repeated `count` times.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub tier: Option<Tier>,
    pub base_confusion: Option<Vec<Vec<f64>>>,
    pub concentration: Option<f64>,
    pub box_noise: Option<BoxNoise>,
    pub proposal_pool_size: Option<usize>,
    pub background_proposals: Option<usize>,
    pub coverage: Option<f64>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
}

impl ProfileSpec {
    pub fn resolve(&self, num_classes: usize) -> Result<Vec<AnnotatorProfile>> {
        let mut p = match (self.tier, &self.base_confusion) {
            (Some(t), _) => AnnotatorProfile::tier(t, num_classes),
            (None, Some(_)) => AnnotatorProfile {
                concentration: Some(DEFAULT_CONCENTRATION),
                ..AnnotatorProfile::tier(Tier::Average, num_classes)
            },
            (None, None) => {
                return Err(Error::Config("an annotator entry needs a tier or a base_confusion".into()))
            }
        };
        if let Some(m) = &self.base_confusion {
            p.base_confusion = m.clone();
        }
        if self.concentration.is_some() {
            p.concentration = self.concentration;
        }
        if let Some(n) = self.box_noise {
            p.box_noise = n;
        }
        if let Some(n) = self.proposal_pool_size {
            p.proposal_pool_size = n;
        }
        if let Some(n) = self.background_proposals {
            p.background_proposals = n;
        }
        if let Some(c) = self.coverage {
            p.coverage = c;
        }
        if let Some(d) = p.defect() {
            return Err(Error::Config(d));
        }
        if p.num_classes() != num_classes {
            return Err(Error::Config(format!(
                "base_confusion covers {} classes, dataset has {num_classes}",
                p.num_classes()
            )));
        }
        let count = self.count.unwrap_or(1);
        let base_seed = self.seed.unwrap_or(0);
        Ok((0..count)
            .map(|i| AnnotatorProfile {
                seed: base_seed.wrapping_add(i as u64),
                ..p.clone()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub annotators: Vec<ProfileSpec>,
}

impl ProfileConfig {
    pub fn resolve(&self, num_classes: usize) -> Result<Vec<AnnotatorProfile>> {
        let mut out = Vec::new();
        for (i, spec) in self.annotators.iter().enumerate() {
            out.extend(
                spec.resolve(num_classes)
                    .map_err(|e| Error::Config(format!("annotators[{i}]: {e}")))?,
            );
        }
        if out.is_empty() {
            return Err(Error::Config("the profile list is empty".into()));
        }
        Ok(out)
    }
}

/// `counts[t]` annotators of each tier in [`Tier::ALL`] order.
pub fn tier_mix(counts: [usize; 4], num_classes: usize) -> Vec<AnnotatorProfile> {
    let mut out = Vec::new();
    for (t, &n) in Tier::ALL.iter().zip(&counts) {
        for i in 0..n {
            out.push(AnnotatorProfile {
                seed: i as u64,
                ..AnnotatorProfile::tier(*t, num_classes)
            });
        }
    }
    out
}

/// Crowd compositions of the standard synthetic benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// 10 average annotators covering every image.
    VocFull,
    /// Same crowd as `VocFull`, intended for larger scenes.
    CocoFull,
    /// 5 experts and 20 average annotators covering every image.
    VocMix,
    /// 20 expert, 550 average, 330 poor and 100 random annotators at the tier coverages.
    CocoMix,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::VocFull, Setting::CocoFull, Setting::VocMix, Setting::CocoMix];

    pub fn name(self) -> &'static str {
        match self {
            Setting::VocFull => "voc-full",
            Setting::CocoFull => "coco-full",
            Setting::VocMix => "voc-mix",
            Setting::CocoMix => "coco-mix",
        }
    }

    pub fn from_name(name: &str) -> Result<Setting> {
        Setting::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
            Error::Usage(format!(
                "unknown setting {name:?}; expected one of voc-full, coco-full, voc-mix, coco-mix"
            ))
        })
    }

    pub fn profiles(self, num_classes: usize) -> Vec<AnnotatorProfile> {
        let full = |p: AnnotatorProfile| AnnotatorProfile { coverage: 1.0, ..p };
        match self {
            Setting::VocFull | Setting::CocoFull => tier_mix([0, 10, 0, 0], num_classes).into_iter().map(full).collect(),
            Setting::VocMix => tier_mix([5, 20, 0, 0], num_classes).into_iter().map(full).collect(),
            Setting::CocoMix => tier_mix([20, 550, 330, 100], num_classes),
        }
    }
}
