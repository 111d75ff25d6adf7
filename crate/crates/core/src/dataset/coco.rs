//! COCO-style annotation files, scene content files and detection results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{
    Annotation, Category, CategoryId, Dataset, ExemplarRef, Provenance, Scene, SceneContent,
    SceneId, SceneObject, Splits, WorldSpec, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const CONTENT_FILE: &str = "scenes.json";

const DEFAULT_DOMAIN: &str = "default";
const RECORD_EXTRAS: &str = "record_extras";

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    id: SceneId,
    width: f64,
    height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    known_category_ids: Option<Vec<CategoryId>>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    id: u64,
    image_id: SceneId,
    category_id: CategoryId,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryRecord {
    id: CategoryId,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExemplarRecord {
    category_id: CategoryId,
    scene_id: SceneId,
    annotation_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContentFile {
    format_version: u32,
    world: Option<WorldSpec>,
    scenes: Vec<ContentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContentRecord {
    id: SceneId,
    objects: Vec<SceneObject>,
}

const KNOWN_TOP: [&str; 6] = [
    "format_version",
    "images",
    "annotations",
    "categories",
    "splits",
    "exemplars",
];

fn parse_record<T: DeserializeOwned>(section: &str, i: usize, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Ingest {
        record: format!("{section}[{i}]"),
        message: e.to_string(),
    })
}

fn section<'a>(root: &'a Map<String, Value>, name: &str) -> Result<&'a Vec<Value>> {
    root.get(name)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Ingest {
            record: name.to_string(),
            message: "missing or not an array".into(),
        })
}

pub fn ingest_coco(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_coco_str(&text)
}

pub fn ingest_coco_str(text: &str) -> Result<Dataset> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Ingest {
        record: "file".into(),
        message: e.to_string(),
    })?;
    let root = root.as_object().ok_or_else(|| Error::Ingest {
        record: "file".into(),
        message: "top level is not an object".into(),
    })?;

    let mut extras: Map<String, Value> = Map::new();
    let mut keep_extra = |kind: &str, id: u64, extra: Map<String, Value>| {
        if !extra.is_empty() {
            let slot = extras
                .entry(kind.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            slot.as_object_mut()
                .expect("extras slot is an object")
                .insert(id.to_string(), Value::Object(extra));
        }
    };

    let mut categories = Vec::new();
    for (i, v) in section(root, "categories")?.iter().enumerate() {
        let r: CategoryRecord = parse_record("categories", i, v)?;
        if r.name.trim().is_empty() {
            return Err(Error::Ingest {
                record: format!("categories[{i}]"),
                message: "empty category name".into(),
            });
        }
        keep_extra("categories", r.id as u64, r.extra);
        categories.push(Category {
            id: r.id,
            name: r.name,
            description: r.description,
        });
    }

    let mut scenes = Vec::new();
    for (i, v) in section(root, "images")?.iter().enumerate() {
        let r: ImageRecord = parse_record("images", i, v)?;
        if !(r.width > 0.0 && r.height > 0.0) {
            return Err(Error::Ingest {
                record: format!("images[{i}]"),
                message: "non-positive image size".into(),
            });
        }
        keep_extra("images", r.id, r.extra);
        scenes.push(Scene {
            id: r.id,
            width: r.width,
            height: r.height,
            domain: r.domain.unwrap_or_else(|| DEFAULT_DOMAIN.to_string()),
            known_categories: r.known_category_ids,
            content: SceneContent::External { reference: None },
        });
    }
    let scene_ids: BTreeMap<SceneId, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let category_ids: std::collections::BTreeSet<CategoryId> = categories.iter().map(|c| c.id).collect();

    let mut annotations = Vec::new();
    for (i, v) in section(root, "annotations")?.iter().enumerate() {
        let r: AnnotationRecord = parse_record("annotations", i, v)?;
        let record = format!("annotations[{i}]");
        let Some(&pos) = scene_ids.get(&r.image_id) else {
            return Err(Error::Ingest {
                record,
                message: format!("unknown image id {}", r.image_id),
            });
        };
        if !category_ids.contains(&r.category_id) {
            return Err(Error::Ingest {
                record,
                message: format!("unknown category id {}", r.category_id),
            });
        }
        let [x, y, w, h] = r.bbox;
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| Error::Ingest {
            record: record.clone(),
            message: e.to_string(),
        })?;
        let s = &scenes[pos];
        if !bbox.within(s.width + 1e-9, s.height + 1e-9) {
            return Err(Error::Ingest {
                record,
                message: "box outside image bounds".into(),
            });
        }
        keep_extra("annotations", r.id, r.extra);
        annotations.push(Annotation {
            id: r.id,
            scene_id: r.image_id,
            category_id: r.category_id,
            bbox: bbox.clip(s.width, s.height),
            provenance: r.provenance.unwrap_or(Provenance::GroundTruth),
        });
    }

    let splits = match root.get("splits") {
        Some(v) => parse_record::<Splits>("splits", 0, v)?,
        None => Splits {
            test: scenes.iter().map(|s| s.id).collect(),
            ..Default::default()
        },
    };
    let exemplars = match root.get("exemplars") {
        Some(Value::Array(items)) => {
            let mut map: BTreeMap<CategoryId, Vec<ExemplarRef>> = BTreeMap::new();
            for (i, v) in items.iter().enumerate() {
                let r: ExemplarRecord = parse_record("exemplars", i, v)?;
                map.entry(r.category_id).or_default().push(ExemplarRef {
                    scene_id: r.scene_id,
                    annotation_id: r.annotation_id,
                });
            }
            Some(map)
        }
        Some(_) => {
            return Err(Error::Ingest {
                record: "exemplars".into(),
                message: "not an array".into(),
            })
        }
        None => None,
    };

    let mut ds = Dataset::new(categories, scenes, annotations, splits, exemplars, None).map_err(|e| match e {
        Error::Ingest { .. } => e,
        other => Error::Ingest {
            record: "dataset".into(),
            message: other.to_string(),
        },
    })?;
    let mut metadata: Map<String, Value> = root
        .iter()
        .filter(|(k, _)| !KNOWN_TOP.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    if !extras.is_empty() {
        metadata.insert(RECORD_EXTRAS.into(), Value::Object(extras));
    }
    ds.metadata = metadata;
    Ok(ds)
}

fn extra_of(ds: &Dataset, kind: &str, id: u64) -> Map<String, Value> {
    ds.metadata
        .get(RECORD_EXTRAS)
        .and_then(|v| v.get(kind))
        .and_then(|v| v.get(id.to_string()))
        .and_then(Value::as_object)
        .cloned()
        .unwrap_or_default()
}

/// Serialize the annotation side of a dataset. Scene content lives in a
/// separate file (see [`save_dataset`]).
pub fn export_coco(ds: &Dataset) -> Value {
    let images: Vec<ImageRecord> = ds
        .scenes
        .iter()
        .map(|s| ImageRecord {
            id: s.id,
            width: s.width,
            height: s.height,
            domain: Some(s.domain.clone()),
            known_category_ids: s.known_categories.clone(),
            extra: extra_of(ds, "images", s.id),
        })
        .collect();
    let annotations: Vec<AnnotationRecord> = ds
        .annotations
        .iter()
        .map(|a| AnnotationRecord {
            id: a.id,
            image_id: a.scene_id,
            category_id: a.category_id,
            bbox: a.bbox.to_xywh(),
            provenance: Some(a.provenance),
            extra: extra_of(ds, "annotations", a.id),
        })
        .collect();
    let categories: Vec<CategoryRecord> = ds
        .categories
        .iter()
        .map(|c| CategoryRecord {
            id: c.id,
            name: c.name.clone(),
            description: c.description.clone(),
            extra: extra_of(ds, "categories", c.id as u64),
        })
        .collect();
    let exemplars: Vec<ExemplarRecord> = ds
        .exemplars
        .iter()
        .flat_map(|(&category_id, refs)| {
            refs.iter().map(move |r| ExemplarRecord {
                category_id,
                scene_id: r.scene_id,
                annotation_id: r.annotation_id,
            })
        })
        .collect();

    let mut root = Map::new();
    root.insert("format_version".into(), FORMAT_VERSION.into());
    root.insert("images".into(), serde_json::to_value(images).expect("serializable"));
    root.insert("annotations".into(), serde_json::to_value(annotations).expect("serializable"));
    root.insert("categories".into(), serde_json::to_value(categories).expect("serializable"));
    root.insert("splits".into(), serde_json::to_value(&ds.splits).expect("serializable"));
    root.insert("exemplars".into(), serde_json::to_value(exemplars).expect("serializable"));
    for (k, v) in &ds.metadata {
        if k != RECORD_EXTRAS {
            root.insert(k.clone(), v.clone());
        }
    }
    Value::Object(root)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `annotations.json`, plus `scenes.json` when any scene carries
/// synthetic content.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(ANNOTATION_FILE), &export_coco(ds))?;
    if ds.scenes.iter().any(Scene::is_synthetic) {
        let content = ContentFile {
            format_version: FORMAT_VERSION,
            world: ds.world.clone(),
            scenes: ds
                .scenes
                .iter()
                .filter(|s| s.is_synthetic())
                .map(|s| ContentRecord {
                    id: s.id,
                    objects: s.objects().to_vec(),
                })
                .collect(),
        };
        write_json(&dir.join(CONTENT_FILE), &content)?;
    }
    Ok(())
}

/// Loads a dataset directory, or a bare annotation file. A sibling
/// `scenes.json` attaches synthetic content and the world description.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (ann_path, content_path) = if path.is_dir() {
        (path.join(ANNOTATION_FILE), path.join(CONTENT_FILE))
    } else {
        let parent = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), parent.join(CONTENT_FILE))
    };
    let ds = ingest_coco(&ann_path)?;
    if !content_path.exists() {
        return Ok(ds);
    }
    let text = fs::read_to_string(&content_path).map_err(|e| Error::io(&content_path, e))?;
    let content: ContentFile = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        record: CONTENT_FILE.into(),
        message: e.to_string(),
    })?;
    let by_id: BTreeMap<SceneId, Vec<SceneObject>> =
        content.scenes.into_iter().map(|r| (r.id, r.objects)).collect();
    let scenes = ds
        .scenes
        .iter()
        .map(|s| match by_id.get(&s.id) {
            Some(objects) => Scene {
                content: SceneContent::Synthetic {
                    objects: objects.clone(),
                },
                ..s.clone()
            },
            None => s.clone(),
        })
        .collect();
    let mut out = ds.with_scenes(scenes)?;
    out.world = content.world;
    Ok(out)
}

/// One row of a detection results file. Boxes are `[x, y, w, h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: SceneId,
    pub category_id: CategoryId,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionFile {
    format_version: u32,
    detections: Vec<DetectionRecord>,
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_json(
        path,
        &DetectionFile {
            format_version: FORMAT_VERSION,
            detections: records.to_vec(),
        },
    )
}

/// Accepts either the versioned wrapper or a bare JSON array.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text)?;
    let records = match v {
        Value::Array(_) => serde_json::from_value(v)?,
        other => serde_json::from_value::<DetectionFile>(other)?.detections,
    };
    Ok(records)
}
