//! Method and detector selection shared by the command line and experiments.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{majority_vote_dataset, wbf_earl_dataset, DEFAULT_CLUSTER_IOU};
use crate::crowdsim::{synthesize_crowd, tier_mix, AnnotatorProfile};
use crate::dataset::{AggregatedInstance, CrowdDataset};
use crate::detectors::{BootstrapMv, FitMode, OracleNoise, OracleNoisy};
use crate::engine::{parameter_change, run_epoch, run_from, Detector, EngineConfig, EngineState};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, coco_thresholds, detections_from_instances, APReport, ScoreSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bdc,
    Mv,
    WbfEarl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Bdc, Method::Mv, Method::WbfEarl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bdc => "bdc",
            Method::Mv => "mv",
            Method::WbfEarl => "wbf-earl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method {s:?}; expected bdc, mv or wbf-earl")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorSpec {
    Oracle { noise: OracleNoise, mode: FitMode },
    Bootstrap { mode: FitMode },
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Oracle {
            noise: OracleNoise::default(),
            mode: FitMode::Fixed,
        }
    }
}

impl DetectorSpec {
    pub fn build(&self, ds: &CrowdDataset, seed: u64) -> Result<Box<dyn Detector>> {
        Ok(match *self {
            DetectorSpec::Oracle { noise, mode } => Box::new(OracleNoisy::new(ds, noise, seed, mode)?),
            DetectorSpec::Bootstrap { mode } => Box::new(BootstrapMv::new(ds, mode)),
        })
    }
}

/// Runs the aggregation loop from `start` (or the priors) with the given detector.
pub fn run_bdc(
    ds: &CrowdDataset,
    detector: &DetectorSpec,
    cfg: &EngineConfig,
    start: Option<EngineState>,
    on_epoch: impl FnMut(&EngineState) -> Result<()>,
) -> Result<EngineState> {
    let mut det = detector.build(ds, cfg.seed)?;
    let start = match start {
        Some(state) => {
            // hand the saved aggregation back so a self-consistent detector resumes where it stopped
            if state.epoch > 0 {
                det.fit(&state.instances)?;
            }
            state
        }
        None => EngineState::initial(cfg, ds.num_classes, ds.num_annotators),
    };
    run_from(start, ds, det.as_mut(), cfg, on_epoch)
}

/// Aggregated instances of `method`; the engine state too for BDC.
pub fn aggregate(
    ds: &CrowdDataset,
    method: Method,
    detector: &DetectorSpec,
    cfg: &EngineConfig,
) -> Result<(Vec<AggregatedInstance>, Option<EngineState>)> {
    match method {
        Method::Bdc => {
            let state = run_bdc(ds, detector, cfg, None, |_| Ok(()))?;
            Ok((state.instances.clone(), Some(state)))
        }
        Method::Mv => Ok((majority_vote_dataset(ds, DEFAULT_CLUSTER_IOU), None)),
        Method::WbfEarl => Ok((wbf_earl_dataset(ds, None, DEFAULT_CLUSTER_IOU), None)),
    }
}

/// AP of aggregated instances against the dataset's ground truth.
pub fn aggregation_ap(instances: &[AggregatedInstance], ds: &CrowdDataset, score: ScoreSource) -> Result<APReport> {
    let gt = ds
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Usage("evaluation needs ground truth".into()))?;
    average_precision(&detections_from_instances(instances, score), gt, ds.num_classes, &coco_thresholds())
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub change: f64,
    pub instances: usize,
    pub converged: bool,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,change,instances,converged,ap50,ap50_95";

    /// AP columns are filled when the dataset carries ground truth.
    pub fn new(prev: &EngineState, cur: &EngineState, ds: &CrowdDataset) -> Result<Self> {
        let (ap50, ap50_95) = match ds.ground_truth {
            Some(_) => {
                let r = aggregation_ap(&cur.instances, ds, ScoreSource::MaxSoftLabel)?;
                (r.ap50(), Some(r.ap_mean()))
            }
            None => (None, None),
        };
        Ok(EpochRecord {
            epoch: cur.epoch,
            change: parameter_change(prev, cur),
            instances: cur.instances.len(),
            converged: cur.converged,
            ap50,
            ap50_95,
        })
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        format!(
            "{},{:e},{},{},{},{}",
            self.epoch,
            self.change,
            self.instances,
            self.converged,
            opt(self.ap50),
            opt(self.ap50_95)
        )
    }
}

/// Aggregation AP of every method on one crowd of the noisy-annotator sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub noisy_fraction: f64,
    pub noisy: usize,
    pub method: Method,
    pub ap50: f64,
    pub ap50_95: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "noisy_fraction,noisy,method,ap50,ap50_95";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4}",
            self.noisy_fraction, self.noisy, self.method, self.ap50, self.ap50_95
        )
    }
}

/// `num_annotators` annotators, `round(f * K)` of them poor and the rest
/// expert, for each fraction `f`; every method is run on each crowd.
pub fn noisy_fraction_sweep(
    gt: &CrowdDataset,
    num_annotators: usize,
    fractions: &[f64],
    coverage: f64,
    detector: &DetectorSpec,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if num_annotators == 0 {
        return Err(Error::Usage("the sweep needs at least one annotator".into()));
    }
    let mut rows = Vec::new();
    for (i, &f) in fractions.iter().enumerate() {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Usage(format!("noisy fraction {f} outside [0, 1]")));
        }
        let noisy = (f * num_annotators as f64).round() as usize;
        let profiles: Vec<AnnotatorProfile> = tier_mix([num_annotators - noisy, 0, noisy, 0], gt.num_classes)
            .into_iter()
            .map(|p| AnnotatorProfile { coverage, ..p })
            .collect();
        let ds = synthesize_crowd(gt, &profiles, seed.wrapping_add(i as u64))?;
        for method in Method::ALL {
            let (instances, _) = aggregate(&ds, method, detector, cfg)?;
            let r = aggregation_ap(&instances, &ds, ScoreSource::MaxSoftLabel)?;
            rows.push(SweepRow {
                noisy_fraction: f,
                noisy,
                method,
                ap50: r.ap50().unwrap_or(0.0),
                ap50_95: r.ap_mean(),
            });
        }
    }
    Ok(rows)
}

/// Wall time of one method: one-off preprocessing and mean aggregation time per epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: Method,
    pub preprocessing_s: f64,
    pub per_epoch_s: f64,
}

/// Times MV and WBF-EARL as preprocessing and BDC as `epochs` engine epochs.
pub fn bench(ds: &CrowdDataset, detector: &DetectorSpec, cfg: &EngineConfig, epochs: usize) -> Result<Vec<BenchRow>> {
    if epochs == 0 {
        return Err(Error::Usage("bench needs at least one epoch".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::new();
    for method in [Method::Mv, Method::WbfEarl] {
        let t = Instant::now();
        aggregate(ds, method, detector, cfg)?;
        rows.push(BenchRow { method, preprocessing_s: t.elapsed().as_secs_f64(), per_epoch_s: 0.0 });
    }
    let mut det = detector.build(ds, cfg.seed)?;
    let mut state = EngineState::initial(cfg, ds.num_classes, ds.num_annotators);
    let t = Instant::now();
    for _ in 0..epochs {
        state = run_epoch(&state, det.as_mut(), ds, cfg)?;
    }
    rows.push(BenchRow {
        method: Method::Bdc,
        preprocessing_s: 0.0,
        per_epoch_s: t.elapsed().as_secs_f64() / epochs as f64,
    });
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{:<10} {:>18} {:>18}\n", "method", "preprocessing (s)", "per epoch (s)");
    for r in rows {
        let _ = writeln!(out, "{:<10} {:>18.6} {:>18.6}", r.method.name(), r.preprocessing_s, r.per_epoch_s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crowdsim::{random_ground_truth, SceneConfig};

    fn crowd(seed: u64) -> CrowdDataset {
        let gt = random_ground_truth(&SceneConfig { num_images: 15, num_classes: 3, ..Default::default() }, seed).unwrap();
        let profiles: Vec<AnnotatorProfile> =
            tier_mix([1, 2, 2, 0], 3).into_iter().map(|p| AnnotatorProfile { coverage: 0.8, ..p }).collect();
        synthesize_crowd(&gt, &profiles, seed).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("wbf".parse::<Method>().is_err());
    }

    #[test]
    fn self_consistent_resume_matches_uninterrupted_run() {
        let ds = crowd(1);
        let spec = DetectorSpec::Oracle { noise: OracleNoise::default(), mode: FitMode::SelfConsistent };
        let cfg = EngineConfig { max_epochs: 6, ..Default::default() };
        let full = run_bdc(&ds, &spec, &cfg, None, |_| Ok(())).unwrap();
        let head = run_bdc(&ds, &spec, &EngineConfig { max_epochs: 3, ..cfg.clone() }, None, |_| Ok(())).unwrap();
        let resumed = run_bdc(&ds, &spec, &cfg, Some(head), |_| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn sweep_has_one_row_per_fraction_and_method() {
        let gt = random_ground_truth(&SceneConfig { num_images: 10, num_classes: 3, ..Default::default() }, 2).unwrap();
        let cfg = EngineConfig { max_epochs: 3, ..Default::default() };
        let rows = noisy_fraction_sweep(&gt, 4, &[0.0, 0.5, 1.0], 0.8, &DetectorSpec::default(), &cfg, 3).unwrap();
        assert_eq!(rows.len(), 9);
        assert_eq!(rows.iter().map(|r| r.noisy).collect::<Vec<_>>(), vec![0, 0, 0, 2, 2, 2, 4, 4, 4]);
        assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.ap50_95)));
        assert!(noisy_fraction_sweep(&gt, 4, &[1.5], 0.8, &DetectorSpec::default(), &cfg, 3).is_err());
    }

    #[test]
    fn bench_reports_preprocessing_only_for_baselines() {
        let ds = crowd(4);
        let rows = bench(&ds, &DetectorSpec::default(), &EngineConfig::default(), 2).unwrap();
        let by = |m: Method| rows.iter().find(|r| r.method == m).unwrap();
        assert!(by(Method::Mv).preprocessing_s > 0.0 && by(Method::Mv).per_epoch_s == 0.0);
        assert!(by(Method::WbfEarl).preprocessing_s > 0.0);
        assert!(by(Method::Bdc).preprocessing_s == 0.0 && by(Method::Bdc).per_epoch_s > 0.0);
        assert_eq!(bench_table(&rows).lines().count(), 4);
    }
}
