//! JSON files: crowd datasets, aggregation results, checkpoints, configs,
//! annotator profiles, and a COCO importer.
//!
//! Reals are written in the shortest decimal form that parses back to the
//! same double, so every round trip is bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crowdsim::{AnnotatorProfile, ProfileConfig};
use crate::dataset::{validate_dataset, AggregatedInstance, Annotation, CrowdDataset, GroundTruth, ImageRecord};
use crate::engine::{EngineConfig, EngineState};
use crate::pipeline::DetectorSpec;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const CROWD_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory values serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrowdFileV1 {
    pub version: u32,
    pub num_classes: usize,
    pub num_annotators: usize,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruth>>,
}

impl From<&CrowdDataset> for CrowdFileV1 {
    fn from(ds: &CrowdDataset) -> Self {
        CrowdFileV1 {
            version: CROWD_FORMAT_VERSION,
            num_classes: ds.num_classes,
            num_annotators: ds.num_annotators,
            images: ds.images.clone(),
            annotations: ds.annotations.clone(),
            ground_truth: ds.ground_truth.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClampAction {
    /// The box was cut back to the image.
    Clamped,
    /// The box was cut back to the image and became too thin to keep.
    Dropped,
}

/// A box that did not fit its image when loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampEvent {
    /// Field path in the file, e.g. `annotations[4]`.
    pub field: String,
    pub original: BBox,
    pub action: ClampAction,
}

/// Clamps out-of-image boxes and drops the ones that degenerate.
///
/// Boxes with no area, non-finite coordinates, or an unknown image are
/// left for validation to report.
fn clamp_boxes(file: &mut CrowdFileV1) -> Vec<ClampEvent> {
    let dims: HashMap<u64, (f64, f64)> = file.images.iter().map(|im| (im.id, (im.width, im.height))).collect();
    let mut events = Vec::new();
    let mut fix = |field: String, image_id: u64, b: &mut BBox| -> bool {
        let Some(&(w, h)) = dims.get(&image_id) else {
            return true;
        };
        if b.defect().is_some() || b.within(w, h) || !(w > 0.0 && h > 0.0) {
            return true;
        }
        let original = *b;
        match b.clamp_to(w, h) {
            Some(c) => {
                *b = c;
                events.push(ClampEvent { field, original, action: ClampAction::Clamped });
                true
            }
            None => {
                events.push(ClampEvent { field, original, action: ClampAction::Dropped });
                false
            }
        }
    };
    let mut i = 0;
    file.annotations.retain_mut(|a| {
        let keep = fix(format!("annotations[{i}]"), a.image_id, &mut a.bbox);
        i += 1;
        keep
    });
    if let Some(gt) = file.ground_truth.as_mut() {
        let mut i = 0;
        gt.retain_mut(|g| {
            let keep = fix(format!("ground_truth[{i}]"), g.image_id, &mut g.bbox);
            i += 1;
            keep
        });
    }
    events
}

/// Parses, clamps and validates a crowd file held in memory.
pub fn parse_crowd(text: &str, path: &Path) -> Result<(CrowdDataset, Vec<ClampEvent>)> {
    let mut file: CrowdFileV1 = serde_json::from_str(text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if file.version != CROWD_FORMAT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported crowd file version {}, expected {CROWD_FORMAT_VERSION}", file.version),
        });
    }
    let events = clamp_boxes(&mut file);
    for e in &events {
        match e.action {
            ClampAction::Clamped => warn!("{}: {} clamped to the image", path.display(), e.field),
            ClampAction::Dropped => warn!("{}: {} dropped, degenerate after clamping", path.display(), e.field),
        }
    }
    let ds = CrowdDataset {
        num_classes: file.num_classes,
        num_annotators: file.num_annotators,
        images: file.images,
        annotations: file.annotations,
        ground_truth: file.ground_truth,
    };
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok((ds, events))
}

/// Loads a crowd file, also returning every clamp applied.
pub fn load_crowd_with_events(path: &Path) -> Result<(CrowdDataset, Vec<ClampEvent>)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_crowd(&text, path)
}

pub fn load_crowd(path: &Path) -> Result<CrowdDataset> {
    load_crowd_with_events(path).map(|(ds, _)| ds)
}

pub fn save_crowd(path: &Path, ds: &CrowdDataset) -> Result<()> {
    write_json(path, &CrowdFileV1::from(ds))
}

pub fn save_aggregated(path: &Path, instances: &[AggregatedInstance]) -> Result<()> {
    write_json(path, instances)
}

pub fn load_aggregated(path: &Path) -> Result<Vec<AggregatedInstance>> {
    read_json(path)
}

/// Engine state plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: EngineConfig,
    /// Detector the state was produced with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorSpec>,
    pub state: EngineState,
}

/// Written atomically, so an interrupted run never leaves a truncated checkpoint.
pub fn save_checkpoint(
    path: &Path,
    cfg: &EngineConfig,
    detector: Option<&DetectorSpec>,
    state: &EngineState,
) -> Result<()> {
    write_atomic(
        path,
        &to_json_string(&Checkpoint {
            version: CHECKPOINT_FORMAT_VERSION,
            config: cfg.clone(),
            detector: detector.copied(),
            state: state.clone(),
        }),
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let cp: Checkpoint = read_json(path)?;
    if cp.version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unsupported checkpoint version {}", cp.version),
        });
    }
    if let Some(d) = cp.state.defect() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("invalid engine state: {d}"),
        });
    }
    Ok(cp)
}

/// Engine configuration; missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<EngineConfig> {
    let cfg: EngineConfig = read_json(path)?;
    cfg.validate().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

/// Annotator profiles resolved against `num_classes`.
pub fn load_profiles(path: &Path, num_classes: usize) -> Result<Vec<AnnotatorProfile>> {
    let cfg: ProfileConfig = read_json(path)?;
    cfg.resolve(num_classes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    /// `[x, y, width, height]` with `(x, y)` the top-left corner.
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Deserialize)]
struct CocoCategory {
    id: u64,
}

#[derive(Debug, Clone, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Result of a COCO import: the dataset and the category id of each class index.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoImport {
    pub dataset: CrowdDataset,
    pub category_ids: Vec<u64>,
}

/// Converts a COCO annotation file.
///
/// With an annotator map (`{"<annotation id>": annotator_id}`) every COCO
/// annotation becomes a crowd annotation; without one they become ground
/// truth. Categories map to classes in ascending category id. Boxes are
/// clamped like any other load.
pub fn import_coco(coco_path: &Path, annotator_map: Option<&Path>) -> Result<CocoImport> {
    let coco: CocoFile = read_json(coco_path)?;
    let mut category_ids: Vec<u64> = coco.categories.iter().map(|c| c.id).collect();
    category_ids.sort_unstable();
    category_ids.dedup();
    let class_of: HashMap<u64, usize> = category_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let format_err = |message: String| Error::Format {
        path: coco_path.to_path_buf(),
        message,
    };

    let map: Option<BTreeMap<String, usize>> = annotator_map.map(read_json).transpose()?;
    let mut annotations = Vec::new();
    let mut truth = Vec::new();
    let mut num_annotators = 0;
    for (i, a) in coco.annotations.iter().enumerate() {
        let class_id = *class_of
            .get(&a.category_id)
            .ok_or_else(|| format_err(format!("annotations[{i}] has unknown category {}", a.category_id)))?;
        let [x, y, w, h] = a.bbox;
        let bbox = BBox { cx: x + w / 2.0, cy: y + h / 2.0, w, h };
        match &map {
            Some(m) => {
                let k = *m.get(&a.id.to_string()).ok_or_else(|| Error::Format {
                    path: annotator_map.map(Path::to_path_buf).unwrap_or_default(),
                    message: format!("no annotator for COCO annotation {}", a.id),
                })?;
                num_annotators = num_annotators.max(k + 1);
                annotations.push(Annotation { image_id: a.image_id, bbox, class_id, annotator_id: k });
            }
            None => truth.push(GroundTruth { image_id: a.image_id, bbox, class_id }),
        }
    }
    let mut file = CrowdFileV1 {
        version: CROWD_FORMAT_VERSION,
        num_classes: category_ids.len(),
        num_annotators,
        images: coco
            .images
            .iter()
            .map(|im| ImageRecord { id: im.id, width: im.width, height: im.height })
            .collect(),
        annotations,
        ground_truth: map.is_none().then_some(truth),
    };
    for e in clamp_boxes(&mut file) {
        warn!("{}: {} {:?}", coco_path.display(), e.field, e.action);
    }
    let text = serde_json::to_string(&file).expect("in-memory values serialize");
    let (dataset, _) = parse_crowd(&text, coco_path)?;
    Ok(CocoImport { dataset, category_ids })
}

/// Writes `text` next to `path` first, then renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    fs::write(&tmp, text).map_err(io)?;
    fs::rename(&tmp, path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
