//! `crowdfuse` command line: simulate crowds, aggregate them and evaluate the result.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crowdfuse::crowdsim::{random_ground_truth, synthesize_crowd, SceneConfig, Setting};
use crowdfuse::dataset::{AggregatedInstance, CrowdDataset};
use crowdfuse::detectors::{FitMode, OracleNoise};
use crowdfuse::engine::{EngineConfig, EngineState};
use crowdfuse::io::{
    import_coco, load_aggregated, load_checkpoint, load_config, load_crowd, load_profiles, save_aggregated,
    save_checkpoint, save_crowd, write_atomic,
};
use crowdfuse::metrics::{
    average_precision, cluster_annotators, coco_thresholds, detections_from_instances, detections_from_truth,
    Detection, ScoreSource,
};
use crowdfuse::pipeline::{
    aggregate, bench, bench_table, noisy_fraction_sweep, run_bdc, BenchRow, DetectorSpec, EpochRecord, Method,
    SweepRow,
};

#[derive(Parser)]
#[command(name = "crowdfuse", version, about = "Aggregate crowdsourced object-detection annotations")]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "CROWDFUSE_THREADS")]
    threads: Option<usize>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random ground-truth dataset without annotations.
    SynthGt(SynthGtArgs),
    /// Draw a synthetic crowd from ground truth.
    Simulate(SimulateArgs),
    /// Convert a COCO annotation file.
    ImportCoco(ImportCocoArgs),
    /// Aggregate a crowd with one method.
    Aggregate(AggregateArgs),
    /// Continue an aggregation from a checkpoint.
    Resume(ResumeArgs),
    /// Print the AP table of aggregated instances against ground truth.
    Evaluate(EvaluateArgs),
    /// Group annotators by their learned parameters.
    Cluster(ClusterArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
    /// Time every method on a dataset.
    Bench(BenchArgs),
    /// AP of every method as the share of poor annotators grows.
    SweepNoisy(SweepArgs),
}

#[derive(Args)]
struct SynthGtArgs {
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 640.0)]
    width: f64,
    #[arg(long, default_value_t = 480.0)]
    height: f64,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 4)]
    max_objects: usize,
    /// Keep objects of one image disjoint.
    #[arg(long)]
    no_overlap: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Crowd file with ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// Profile file (`{"annotators": [...]}`).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    profiles: Option<PathBuf>,
    /// Standard crowd instead of a profile file.
    #[arg(long, value_parser = parse_setting)]
    preset: Option<Setting>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportCocoArgs {
    #[arg(long)]
    coco: PathBuf,
    /// `{"<annotation id>": annotator}`; without it the annotations become ground truth.
    #[arg(long)]
    annotator_map: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorKind {
    Oracle,
    Bootstrap,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    SelfConsistent,
}

#[derive(Args)]
struct DetectorArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    detector: DetectorKind,
    /// Whether the detector learns from each epoch's aggregation.
    #[arg(long, value_enum, default_value = "fixed")]
    mode: Mode,
    /// Oracle center jitter as a fraction of the box size.
    #[arg(long, default_value_t = OracleNoise::default().center_sigma)]
    center_sigma: f64,
    /// Oracle log-size jitter.
    #[arg(long, default_value_t = OracleNoise::default().scale_sigma)]
    scale_sigma: f64,
    /// Oracle logit margin of the true class.
    #[arg(long, default_value_t = OracleNoise::default().margin)]
    margin: f64,
}

impl DetectorArgs {
    fn spec(&self) -> DetectorSpec {
        let mode = match self.mode {
            Mode::Fixed => FitMode::Fixed,
            Mode::SelfConsistent => FitMode::SelfConsistent,
        };
        match self.detector {
            DetectorKind::Oracle => DetectorSpec::Oracle {
                noise: OracleNoise { center_sigma: self.center_sigma, scale_sigma: self.scale_sigma, margin: self.margin },
                mode,
            },
            DetectorKind::Bootstrap => DetectorSpec::Bootstrap { mode },
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Engine configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured epoch limit.
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => EngineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.max_epochs {
            cfg.max_epochs = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "bdc")]
    method: Method,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Aggregated instances.
    #[arg(long)]
    out: PathBuf,
    /// Engine state after every epoch (bdc only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch change and AP as CSV (bdc only).
    #[arg(long)]
    epoch_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Read at start and rewritten after every epoch.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the epoch limit stored in the checkpoint.
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    epoch_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    MaxSoftLabel,
    Gamma,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Aggregated instances, or a crowd file whose ground truth is scored as detections.
    #[arg(long)]
    aggregated: PathBuf,
    /// Crowd file with ground truth.
    #[arg(long)]
    gt: PathBuf,
    /// IoU thresholds; 0.50:0.05:0.95 by default.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value = "max-soft-label")]
    score: Score,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(short, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// BDC epochs to average over.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Crowd file with ground truth.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 25)]
    annotators: usize,
    /// Shares of poor annotators; the rest are experts.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0,0.25,0.5,0.75,1")]
    fractions: Vec<f64>,
    /// Share of images each annotator labels.
    #[arg(long, default_value_t = 0.3)]
    coverage: f64,
    #[command(flatten)]
    detector: DetectorArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    Setting::from_name(s).map_err(|e| e.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text)?;
    Ok(())
}

fn load_truth(path: &Path) -> Result<CrowdDataset> {
    let ds = load_crowd(path)?;
    if ds.ground_truth.is_none() {
        bail!("{}: the file has no ground truth", path.display());
    }
    Ok(ds)
}

fn synth_gt(a: SynthGtArgs) -> Result<()> {
    let scene = SceneConfig {
        num_images: a.images,
        num_classes: a.classes,
        image_width: a.width,
        image_height: a.height,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        allow_overlap: !a.no_overlap,
        ..Default::default()
    };
    let ds = random_ground_truth(&scene, a.seed)?;
    save_crowd(&a.out, &ds)?;
    println!(
        "{} images, {} objects -> {}",
        ds.images.len(),
        ds.ground_truth.as_ref().map_or(0, Vec::len),
        a.out.display()
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let gt = load_truth(&a.gt)?;
    let profiles = match (&a.profiles, a.preset) {
        (Some(p), _) => load_profiles(p, gt.num_classes)?,
        (None, Some(s)) => s.profiles(gt.num_classes),
        (None, None) => bail!("either --profiles or --preset is required"),
    };
    let ds = synthesize_crowd(&gt, &profiles, a.seed)?;
    save_crowd(&a.out, &ds)?;
    println!("{} annotators, {} annotations -> {}", ds.num_annotators, ds.annotations.len(), a.out.display());
    Ok(())
}

fn import(a: ImportCocoArgs) -> Result<()> {
    let imp = import_coco(&a.coco, a.annotator_map.as_deref())?;
    save_crowd(&a.out, &imp.dataset)?;
    println!(
        "{} images, {} annotations, {} annotators -> {}",
        imp.dataset.images.len(),
        imp.dataset.annotations.len(),
        imp.dataset.num_annotators,
        a.out.display()
    );
    for (c, id) in imp.category_ids.iter().enumerate() {
        println!("class {c} = category {id}");
    }
    Ok(())
}

/// Runs BDC, writing the checkpoint and the epoch log as it goes.
fn run_logged(
    ds: &CrowdDataset,
    spec: &DetectorSpec,
    cfg: &EngineConfig,
    start: Option<EngineState>,
    checkpoint: Option<&Path>,
    epoch_csv: Option<&Path>,
) -> Result<EngineState> {
    let mut prev = start.clone().unwrap_or_else(|| EngineState::initial(cfg, ds.num_classes, ds.num_annotators));
    let mut csv = format!("{}\n", EpochRecord::CSV_HEADER);
    let state = run_bdc(ds, spec, cfg, start, |cur| {
        let rec = EpochRecord::new(&prev, cur, ds)?;
        info!("epoch {}: change {:e}, {} instances", rec.epoch, rec.change, rec.instances);
        csv.push_str(&rec.csv_row());
        csv.push('\n');
        if let Some(p) = checkpoint {
            save_checkpoint(p, cfg, Some(spec), cur)?;
        }
        prev = cur.clone();
        Ok(())
    })?;
    if let Some(p) = epoch_csv {
        write_text(p, &csv)?;
    }
    Ok(state)
}

fn report_bdc(state: &EngineState, out: &Path) {
    println!(
        "bdc: {} instances after {} epochs ({}) -> {}",
        state.instances.len(),
        state.epoch,
        if state.converged { "converged" } else { "not converged" },
        out.display()
    );
}

fn aggregate_cmd(a: AggregateArgs) -> Result<()> {
    let ds = load_crowd(&a.dataset)?;
    let cfg = a.config.load()?;
    let spec = a.detector.spec();
    if a.method != Method::Bdc && (a.checkpoint.is_some() || a.epoch_csv.is_some()) {
        bail!("--checkpoint and --epoch-csv only apply to --method bdc");
    }
    if a.method == Method::Bdc {
        let state = run_logged(&ds, &spec, &cfg, None, a.checkpoint.as_deref(), a.epoch_csv.as_deref())?;
        save_aggregated(&a.out, &state.instances)?;
        report_bdc(&state, &a.out);
    } else {
        let (instances, _) = aggregate(&ds, a.method, &spec, &cfg)?;
        save_aggregated(&a.out, &instances)?;
        println!("{}: {} instances -> {}", a.method, instances.len(), a.out.display());
    }
    Ok(())
}

fn resume(a: ResumeArgs) -> Result<()> {
    let ds = load_crowd(&a.dataset)?;
    let cp = load_checkpoint(&a.checkpoint)?;
    let mut cfg = cp.config;
    if let Some(t) = a.max_epochs {
        cfg.max_epochs = t;
    }
    let spec = cp.detector.unwrap_or_else(|| {
        log::warn!("checkpoint does not name its detector; using the default oracle");
        DetectorSpec::default()
    });
    if cp.state.box_posteriors.len() != ds.num_annotators || cp.state.confusions.iter().any(|c| c.num_classes() != ds.num_classes) {
        bail!(
            "{} was written for a different dataset ({} annotators, dataset has {})",
            a.checkpoint.display(),
            cp.state.box_posteriors.len(),
            ds.num_annotators
        );
    }
    let state = run_logged(&ds, &spec, &cfg, Some(cp.state), Some(&a.checkpoint), a.epoch_csv.as_deref())?;
    save_aggregated(&a.out, &state.instances)?;
    report_bdc(&state, &a.out);
    Ok(())
}

/// Parses either an aggregated-instance array or a crowd file with ground truth.
fn load_detections(path: &Path, score: ScoreSource) -> Result<(Vec<Detection>, Option<usize>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{}: not valid JSON", path.display()))?;
    if value.is_array() {
        let instances: Vec<AggregatedInstance> = load_aggregated(path)?;
        let classes = instances.first().map(|i| i.soft_label.len());
        if let Some(bad) = instances.iter().position(|i| Some(i.soft_label.len()) != classes) {
            bail!("{}: instance {bad} has a soft label of a different length", path.display());
        }
        Ok((detections_from_instances(&instances, score), classes))
    } else {
        let ds = load_truth(path)?;
        Ok((detections_from_truth(ds.ground_truth.as_deref().unwrap_or_default()), Some(ds.num_classes)))
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let gt = load_truth(&a.gt)?;
    let source = match a.score {
        Score::MaxSoftLabel => ScoreSource::MaxSoftLabel,
        Score::Gamma => ScoreSource::Gamma,
    };
    let (dets, classes) = load_detections(&a.aggregated, source)?;
    if let Some(j) = classes.filter(|&j| j != gt.num_classes) {
        bail!("{} has {j} classes but {} has {}", a.aggregated.display(), a.gt.display(), gt.num_classes);
    }
    let known: BTreeSet<u64> = gt.images.iter().map(|im| im.id).collect();
    let unknown: BTreeSet<u64> = dets.iter().map(|d| d.image_id).filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        let ids: Vec<String> = unknown.iter().map(u64::to_string).collect();
        bail!("{} refers to images missing from {}: {}", a.aggregated.display(), a.gt.display(), ids.join(", "));
    }
    let thresholds = if a.thresholds.is_empty() { coco_thresholds() } else { a.thresholds };
    let report = average_precision(&dets, gt.ground_truth.as_deref().unwrap_or_default(), gt.num_classes, &thresholds)?;
    print!("{}", report.table());
    if let Some(p) = &a.json {
        write_text(p, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let cp = load_checkpoint(&a.checkpoint)?;
    let mut r = cluster_annotators(&cp.state.box_posteriors, &cp.state.confusions, a.k, a.seed)?;
    // number clusters by falling confusion diagonal so runs are comparable
    let mut order: Vec<usize> = (0..a.k).collect();
    order.sort_by(|&x, &y| r.mean_diagonal[y].total_cmp(&r.mean_diagonal[x]).then(x.cmp(&y)));
    let mut rank = vec![0; a.k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    r.assignments.iter_mut().for_each(|c| *c = rank[*c]);
    r.sizes = order.iter().map(|&c| r.sizes[c]).collect();
    r.mean_diagonal = order.iter().map(|&c| r.mean_diagonal[c]).collect();

    println!("annotator cluster");
    for (k, c) in r.assignments.iter().enumerate() {
        println!("{k:>9} {c:>7}");
    }
    println!();
    println!("cluster size mean_diagonal");
    for c in 0..a.k {
        println!("{c:>7} {:>4} {:>13.4}", r.sizes[c], r.mean_diagonal[c]);
    }
    if let Some(p) = &a.json {
        write_text(p, &serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let cp = load_checkpoint(&a.checkpoint)?;
    let s = &cp.state;
    println!(
        "epoch {} of {}, {}, {} instances, {} annotators",
        s.epoch,
        cp.config.max_epochs,
        if s.converged { "converged" } else { "not converged" },
        s.instances.len(),
        s.box_posteriors.len()
    );
    if let Some(d) = &cp.detector {
        println!("detector {}", serde_json::to_string(d)?);
    }
    let mut out = format!(
        "{:>9} {:>9} {:>9} {:>9} {:>9} {:>10} {:>13}\n",
        "annotator", "mu_x", "mu_y", "mu_w", "mu_h", "upsilon", "mean_diagonal"
    );
    for (k, (p, c)) in s.box_posteriors.iter().zip(&s.confusions).enumerate() {
        writeln!(
            out,
            "{k:>9} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.2} {:>13.4}",
            p.mu[0],
            p.mu[1],
            p.mu[2],
            p.mu[3],
            p.upsilon,
            c.mean_diagonal()
        )?;
    }
    print!("{out}");
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let ds = load_crowd(&a.dataset)?;
    let cfg = a.config.load()?;
    let rows = bench(&ds, &a.detector.spec(), &cfg, a.epochs)?;
    print!("{}", bench_table(&rows));
    if let Some(p) = &a.csv {
        let mut csv = String::from("method,preprocessing_s,per_epoch_s\n");
        for r in &rows {
            let BenchRow { method, preprocessing_s, per_epoch_s } = r;
            writeln!(csv, "{method},{preprocessing_s:e},{per_epoch_s:e}")?;
        }
        write_text(p, &csv)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let gt = load_truth(&a.gt)?;
    let cfg = a.config.load()?;
    let rows = noisy_fraction_sweep(&gt, a.annotators, &a.fractions, a.coverage, &a.detector.spec(), &cfg, cfg.seed)?;
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
        println!("{:>5.2} {:>9} {:>8.2} {:>8.2}", r.noisy_fraction, r.method.name(), r.ap50, r.ap50_95);
    }
    write_text(&a.out, &csv)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("cannot size the thread pool: {e}"))?;
    }
    match cli.command {
        Command::SynthGt(a) => synth_gt(a),
        Command::Simulate(a) => simulate(a),
        Command::ImportCoco(a) => import(a),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::Resume(a) => resume(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Cluster(a) => cluster(a),
        Command::Inspect(a) => inspect(a),
        Command::Bench(a) => bench_cmd(a),
        Command::SweepNoisy(a) => sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
