use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdfuse::box_aggregator::GaussianGammaParams;
use crowdfuse::crowdsim::{tier_mix, AnnotatorProfile};
use crowdfuse::dataset::{AggregatedInstance, Annotation, CrowdDataset, GroundTruth, ImageRecord};
use crowdfuse::engine::{EngineConfig, EngineState, GammaCount, PriorMean};
use crowdfuse::geometry::BBox;
use crowdfuse::io::{load_aggregated, load_checkpoint, load_crowd, save_aggregated, save_checkpoint, save_crowd};
use crowdfuse::label_aggregator::{aggregate_labels, update_alpha, AnnotatorConfusion, LabelEvidence};
use crowdfuse::metrics::{average_precision, coco_thresholds, Detection};
use crowdfuse::detectors::FitMode;
use crowdfuse::pipeline::DetectorSpec;

fn inside_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    let bw = rng.gen_range(1.0..w / 2.0);
    let bh = rng.gen_range(1.0..h / 2.0);
    BBox::new(rng.gen_range(bw / 2.0..w - bw / 2.0), rng.gen_range(bh / 2.0..h - bh / 2.0), bw, bh).unwrap()
}

fn random_dataset(seed: u64) -> CrowdDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = rng.gen_range(1..6);
    let k = rng.gen_range(1..6);
    let images: Vec<ImageRecord> = (0..rng.gen_range(1..5))
        .map(|i| ImageRecord { id: i * 3 + 1, width: rng.gen_range(20.0..500.0), height: rng.gen_range(20.0..500.0) })
        .collect();
    let mut annotations = Vec::new();
    let mut truth = Vec::new();
    for im in &images {
        for _ in 0..rng.gen_range(0..6) {
            annotations.push(Annotation {
                image_id: im.id,
                bbox: inside_box(&mut rng, im.width, im.height),
                class_id: rng.gen_range(0..j),
                annotator_id: rng.gen_range(0..k),
            });
        }
        for _ in 0..rng.gen_range(0..3) {
            truth.push(GroundTruth { image_id: im.id, bbox: inside_box(&mut rng, im.width, im.height), class_id: rng.gen_range(0..j) });
        }
    }
    let ground_truth = rng.gen_bool(0.5).then_some(truth);
    CrowdDataset { num_classes: j, num_annotators: k, images, annotations, ground_truth }
}

fn simplex(rng: &mut ChaCha8Rng, j: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..j).map(|_| rng.gen_range(1e-6..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn random_state(seed: u64) -> EngineState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (j, k) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let post = |rng: &mut ChaCha8Rng| {
        let mut p = GaussianGammaParams::isotropic(
            [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
            rng.gen_range(1.0..100.0),
            rng.gen_range(0.1..10.0),
        );
        let c = rng.gen_range(-0.05..0.05);
        p.beta[0][1] = c;
        p.beta[1][0] = c;
        p
    };
    EngineState {
        epoch: rng.gen_range(0..50),
        box_posteriors: (0..k).map(|_| post(&mut rng)).collect(),
        confusions: (0..k)
            .map(|_| AnnotatorConfusion { alpha: (0..j).map(|_| (0..j).map(|_| rng.gen_range(0.1..50.0)).collect()).collect() })
            .collect(),
        instances: (0..rng.gen_range(0..5))
            .map(|_| AggregatedInstance {
                image_id: rng.gen_range(0..10),
                bbox: inside_box(&mut rng, 300.0, 300.0),
                soft_label: simplex(&mut rng, j),
                gamma: rng.gen_range(0.01..1.0),
                support: rng.gen_range(1..5),
            })
            .collect(),
        converged: rng.gen_bool(0.5),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crowd_files_round_trip(seed in any::<u64>()) {
        let ds = random_dataset(seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("crowd.json");
        save_crowd(&p, &ds).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = load_crowd(&p).unwrap();
        prop_assert_eq!(&back, &ds);
        save_crowd(&p, &back).unwrap();
        prop_assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn aggregated_and_checkpoints_round_trip(seed in any::<u64>()) {
        let state = random_state(seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("agg.json");
        save_aggregated(&p, &state.instances).unwrap();
        let back = load_aggregated(&p).unwrap();
        prop_assert_eq!(&back, &state.instances);
        for inst in &back {
            prop_assert!((inst.soft_label.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let cfg = EngineConfig {
            lambda1: 1.0 + (seed % 7) as f64 / 3.0,
            prior_mean: PriorMean::Custom([0.1, -0.2, 1.1, 0.9]),
            gamma_count: GammaCount::DistinctAnnotators,
            seed,
            ..Default::default()
        };
        let c = dir.path().join("ck.json");
        save_checkpoint(&c, &cfg, Some(&DetectorSpec::Bootstrap { mode: FitMode::SelfConsistent }), &state).unwrap();
        let ck = load_checkpoint(&c).unwrap();
        prop_assert_eq!(ck.config, cfg);
        prop_assert_eq!(ck.detector, Some(DetectorSpec::Bootstrap { mode: FitMode::SelfConsistent }));
        prop_assert_eq!(ck.state, state);
    }

    #[test]
    fn profiles_round_trip(expert in 0usize..3, average in 0usize..3, poor in 0usize..3, random in 0usize..3, j in 1usize..6) {
        let profiles: Vec<AnnotatorProfile> = tier_mix([expert, average, poor, random], j);
        let text = serde_json::to_string(&profiles).unwrap();
        let back: Vec<AnnotatorProfile> = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, profiles);
    }

    #[test]
    fn ap_depends_on_score_ranks_only(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = rng.gen_range(1..4);
        let gt: Vec<GroundTruth> = (0..rng.gen_range(1..10))
            .map(|_| GroundTruth { image_id: rng.gen_range(0..3), bbox: inside_box(&mut rng, 100.0, 100.0), class_id: rng.gen_range(0..j) })
            .collect();
        let mut dets: Vec<Detection> = gt
            .iter()
            .map(|g| Detection {
                image_id: g.image_id,
                bbox: BBox::new(g.bbox.cx + rng.gen_range(-4.0..4.0), g.bbox.cy + rng.gen_range(-4.0..4.0), g.bbox.w, g.bbox.h).unwrap(),
                class_id: g.class_id,
                score: rng.gen_range(0.0..1.0),
            })
            .collect();
        for _ in 0..rng.gen_range(0..4) {
            dets.push(Detection { image_id: rng.gen_range(0..3), bbox: inside_box(&mut rng, 100.0, 100.0), class_id: rng.gen_range(0..j), score: rng.gen_range(0.0..1.0) });
        }
        let th = coco_thresholds();
        let base = average_precision(&dets, &gt, j, &th).unwrap();
        let warped: Vec<Detection> = dets.iter().map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect();
        prop_assert_eq!(&average_precision(&warped, &gt, j, &th).unwrap().mean, &base.mean);
        for w in base.mean.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for m in &base.mean {
            prop_assert!((0.0..=100.0).contains(m));
        }
    }
}

#[test]
fn confusion_rows_are_recovered_from_one_hot_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth_conf = [vec![0.8, 0.15, 0.05], vec![0.1, 0.6, 0.3], vec![0.25, 0.25, 0.5]];
    let j = 3;
    let prior = AnnotatorConfusion::prior(j, 10.0, 1.0);
    let mut rhos = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..6000 {
        let t = rng.gen_range(0..j);
        let u: f64 = rng.gen();
        let c = if u < truth_conf[t][0] { 0 } else if u < truth_conf[t][0] + truth_conf[t][1] { 1 } else { 2 };
        let mut onehot = vec![0.0; j];
        onehot[t] = 1.0;
        rhos.push(aggregate_labels(&onehot, &[(c, 0)], std::slice::from_ref(&prior)).unwrap().rho);
        labels.push(c);
    }
    let evidence: Vec<LabelEvidence> =
        labels.iter().zip(&rhos).map(|(&c, r)| LabelEvidence { class_id: c, annotator_id: 0, rho: r }).collect();
    let learned = update_alpha(&prior, 1, &evidence)[0].row_normalized();
    for (row, want) in learned.iter().zip(&truth_conf) {
        let l1: f64 = row.iter().zip(want).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 <= 0.05, "{row:?} vs {want:?}");
    }
}
