//! Deterministic shape-world generator.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    Annotation, Category, CategoryId, Dataset, Provenance, Scene, SceneContent, SceneObject,
    Splits, WorldSpec,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::seed::{self, tag};

/// Shapes and colors available to one domain. Category vocabulary is the
/// color x shape product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPalette {
    pub name: String,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
}

impl DomainPalette {
    pub fn new(name: &str, shapes: &[&str], colors: &[&str]) -> Self {
        DomainPalette {
            name: name.into(),
            shapes: shapes.iter().map(|s| s.to_string()).collect(),
            colors: colors.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub scenes: usize,
    pub width: f64,
    pub height: f64,
    pub domains: Vec<DomainPalette>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_separation: f64,
    /// Unannotated clutter objects drawn from their own palette.
    pub distractors: Option<DomainPalette>,
    pub max_distractors: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Magnitude of the attribute-band perturbation on an exact box.
    pub noise: f64,
    pub clutter_dims: usize,
    /// Norm of the nuisance band appended to every region descriptor.
    pub clutter: f64,
    /// Norm of the per-scene offset on the shape and color coordinates.
    pub scene_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scenes: 160,
            width: 128.0,
            height: 128.0,
            domains: vec![
                DomainPalette::new("alpha", &["square", "circle", "triangle"], &["red", "blue", "green"]),
                DomainPalette::new("beta", &["star", "hexagon", "diamond"], &["yellow", "purple", "orange"]),
            ],
            min_objects: 3,
            max_objects: 6,
            min_size: 12.0,
            max_size: 28.0,
            min_separation: 4.0,
            distractors: None,
            max_distractors: 0,
            train_fraction: 0.5,
            val_fraction: 0.2,
            noise: 0.3,
            clutter_dims: 16,
            clutter: 4.0,
            scene_shift: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.domains.is_empty() && self.scenes > 0 {
            return bad("at least one domain palette is required");
        }
        for d in &self.domains {
            if d.shapes.is_empty() || d.colors.is_empty() {
                return bad(&format!("domain {} has an empty palette", d.name));
            }
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("object size range is invalid");
        }
        if self.max_size > self.width.min(self.height) {
            return bad("objects larger than the scene");
        }
        if self.min_separation < 0.0 {
            return bad("min_separation must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || !(0.0..=1.0).contains(&self.val_fraction)
            || self.train_fraction + self.val_fraction > 1.0
        {
            return bad("split fractions must lie in [0,1] and sum to at most 1");
        }
        if self.noise < 0.0 || self.clutter < 0.0 || self.scene_shift < 0.0 {
            return bad("noise magnitudes must be non-negative");
        }
        Ok(())
    }

    fn world(&self, seed: u64) -> WorldSpec {
        let mut shapes: Vec<String> = Vec::new();
        let mut colors: Vec<String> = Vec::new();
        for p in self.domains.iter().chain(self.distractors.iter()) {
            for s in &p.shapes {
                if !shapes.contains(s) {
                    shapes.push(s.clone());
                }
            }
            for c in &p.colors {
                if !colors.contains(c) {
                    colors.push(c.clone());
                }
            }
        }
        WorldSpec {
            shapes,
            colors,
            noise: self.noise,
            clutter_dims: self.clutter_dims,
            clutter: self.clutter,
            scene_shift: self.scene_shift,
            seed,
        }
    }
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x_max + gap <= b.x_min || b.x_max + gap <= a.x_min || a.y_max + gap <= b.y_min || b.y_max + gap <= a.y_min
}

const PLACEMENT_ATTEMPTS: usize = 500;

pub fn generate_shape_world(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let max_total = config.max_objects + config.max_distractors;
    let footprint = (config.min_size + config.min_separation).powi(2) * max_total as f64;
    if config.scenes > 0 && footprint > config.width * config.height {
        return Err(Error::Generation(format!(
            "infeasible placement: {max_total} objects of size >= {} with separation {} cannot fit in {}x{}",
            config.min_size, config.min_separation, config.width, config.height
        )));
    }

    let mut categories: Vec<Category> = Vec::new();
    let mut by_name: BTreeMap<String, CategoryId> = BTreeMap::new();
    for p in &config.domains {
        for color in &p.colors {
            for shape in &p.shapes {
                let name = format!("{color} {shape}");
                if by_name.contains_key(&name) {
                    continue;
                }
                let id = categories.len() as CategoryId + 1;
                by_name.insert(name.clone(), id);
                categories.push(Category {
                    id,
                    name,
                    description: Some(format!("{shape} shape colored {color}")),
                });
            }
        }
    }

    let mut rng = seed::rng(&[tag::SYNTH, seed]);
    let mut scenes = Vec::with_capacity(config.scenes);
    let mut annotations = Vec::new();
    for i in 0..config.scenes {
        let id = i as u64 + 1;
        let palette = &config.domains[i % config.domains.len()];
        let n_objects = rng.random_range(config.min_objects..=config.max_objects);
        let n_distractors = match &config.distractors {
            Some(_) if config.max_distractors > 0 => rng.random_range(0..=config.max_distractors),
            _ => 0,
        };
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects + n_distractors);
        for k in 0..n_objects + n_distractors {
            let source = if k < n_objects {
                palette
            } else {
                config.distractors.as_ref().expect("distractor palette present")
            };
            let shape = source.shapes[rng.random_range(0..source.shapes.len())].clone();
            let color = source.colors[rng.random_range(0..source.colors.len())].clone();
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let w = rng.random_range(config.min_size..=config.max_size);
                let h = rng.random_range(config.min_size..=config.max_size);
                let x = rng.random_range(0.0..=config.width - w);
                let y = rng.random_range(0.0..=config.height - h);
                let candidate = BBox::new(x, y, x + w, y + h)?;
                if objects.iter().all(|o| separated(&o.bbox, &candidate, config.min_separation)) {
                    placed = Some(candidate);
                    break;
                }
            }
            let bbox = placed.ok_or_else(|| {
                Error::Generation(format!("infeasible placement: scene {id}, object {k}"))
            })?;
            let category_id = if k < n_objects {
                by_name.get(&format!("{color} {shape}")).copied()
            } else {
                None
            };
            objects.push(SceneObject {
                shape,
                color,
                bbox,
                category_id,
            });
        }
        for o in &objects {
            if let Some(category_id) = o.category_id {
                annotations.push(Annotation {
                    id: annotations.len() as u64 + 1,
                    scene_id: id,
                    category_id,
                    bbox: o.bbox,
                    provenance: Provenance::GroundTruth,
                });
            }
        }
        scenes.push(Scene {
            id,
            width: config.width,
            height: config.height,
            domain: palette.name.clone(),
            known_categories: None,
            content: SceneContent::Synthetic { objects },
        });
    }

    // Fisher-Yates on scene ids, then contiguous split blocks.
    let mut order: Vec<u64> = scenes.iter().map(|s| s.id).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n = order.len();
    let n_train = (n as f64 * config.train_fraction).round() as usize;
    let n_val = ((n as f64 * config.val_fraction).round() as usize).min(n - n_train);
    let mut splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    Dataset::new(categories, scenes, annotations, splits, None, Some(config.world(seed)))
}
