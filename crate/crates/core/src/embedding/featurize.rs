//! Input features for the encoders: a bag-of-words text featurizer and a
//! region descriptor for synthetic scenes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scene, WorldSpec};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub words: BTreeMap<String, usize>,
    /// Width of the hashed band for out-of-vocabulary words.
    pub overflow: usize,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Tokenizer {
    pub fn new<'a>(vocabulary: impl IntoIterator<Item = &'a str>, overflow: usize) -> Self {
        let mut set: Vec<String> = vocabulary.into_iter().flat_map(tokens).collect();
        set.sort();
        set.dedup();
        let words = set.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        Tokenizer {
            words,
            overflow: overflow.max(1),
        }
    }

    /// Vocabulary covering category names, descriptions and world attributes.
    pub fn from_dataset(ds: &Dataset, extra: &[String], overflow: usize) -> Self {
        let mut vocab: Vec<&str> = Vec::new();
        for c in &ds.categories {
            vocab.push(&c.name);
            if let Some(d) = &c.description {
                vocab.push(d);
            }
        }
        if let Some(w) = &ds.world {
            vocab.extend(w.shapes.iter().map(String::as_str));
            vocab.extend(w.colors.iter().map(String::as_str));
        }
        vocab.extend(extra.iter().map(String::as_str));
        Tokenizer::new(vocab, overflow)
    }

    pub fn dim(&self) -> usize {
        self.words.len() + self.overflow
    }

    pub fn index(&self, word: &str) -> usize {
        match self.words.get(word) {
            Some(&i) => i,
            None => self.words.len() + (fnv1a(word) % self.overflow as u64) as usize,
        }
    }

    /// Order-invariant, L1-normalized bag of words.
    pub fn featurize_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let toks = tokens(prompt);
        if toks.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut v = vec![0.0; self.dim()];
        for t in &toks {
            v[self.index(t)] += 1.0;
        }
        let n = toks.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        Ok(v)
    }
}

/// Which rendering of a region is being featurized. Prompt crops and
/// detector proposals draw independent noise, so a crop is never a
/// bit-exact copy of the proposal at the same box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionView {
    Proposal,
    Prompt,
}

impl RegionView {
    fn salt(self) -> u64 {
        match self {
            RegionView::Proposal => 1,
            RegionView::Prompt => 2,
        }
    }
}

const IOU_FLOOR: f64 = 0.05;
const MIN_LOG_AREA: f64 = -6.907_755_278_982_137; // ln(1e-3)

/// Descriptor layout: `[shape one-hot | color one-hot | log-area | background | clutter]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFeaturizer {
    pub world: WorldSpec,
}

impl RegionFeaturizer {
    pub fn new(world: WorldSpec) -> Self {
        RegionFeaturizer { world }
    }

    fn attr_dim(&self) -> usize {
        self.world.shapes.len() + self.world.colors.len() + 2
    }

    pub fn dim(&self) -> usize {
        self.attr_dim() + self.world.clutter_dims
    }

    pub fn background_index(&self) -> usize {
        self.attr_dim() - 1
    }

    fn log_area(&self, scene: &Scene, b: &BBox) -> f64 {
        let rel = (b.area() / scene.area()).max(1e-12);
        ((rel.ln() - MIN_LOG_AREA) / -MIN_LOG_AREA).clamp(0.0, 1.0)
    }

    /// Object with the highest IoU against `b`, if any overlaps it.
    pub fn dominant_object(&self, scene: &Scene, b: &BBox) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in scene.objects().iter().enumerate() {
            let v = iou(&o.bbox, b);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        best
    }

    /// Noise-free descriptor and the noise magnitude applied to it.
    pub fn clean_descriptor(&self, scene: &Scene, b: &BBox) -> Result<(Vec<f64>, f64)> {
        let mut v = vec![0.0; self.attr_dim()];
        let s = self.world.shapes.len();
        let magnitude = match self.dominant_object(scene, b) {
            Some((i, overlap)) => {
                let o = &scene.objects()[i];
                let si = self.world.shapes.iter().position(|x| *x == o.shape).ok_or_else(|| {
                    Error::Config(format!("shape {:?} is not in the world vocabulary", o.shape))
                })?;
                let ci = self.world.colors.iter().position(|x| *x == o.color).ok_or_else(|| {
                    Error::Config(format!("color {:?} is not in the world vocabulary", o.color))
                })?;
                v[si] = 1.0;
                v[s + ci] = 1.0;
                self.world.noise / overlap.max(IOU_FLOOR)
            }
            None => {
                v[self.background_index()] = 1.0;
                self.world.noise
            }
        };
        v[self.attr_dim() - 2] = self.log_area(scene, b);
        Ok((v, magnitude))
    }

    /// Offset applied to the shape and color coordinates of every region in
    /// the scene; zero on the log-area and background coordinates.
    pub fn scene_cast(&self, scene_id: u64) -> Vec<f64> {
        let n = self.world.shapes.len() + self.world.colors.len();
        let mut rng = seed::rng(&[tag::REGION, self.world.seed, scene_id, u64::MAX]);
        let mut cast: Vec<f64> = unit_gaussian(&mut rng, n)
            .into_iter()
            .map(|x| x * self.world.scene_shift)
            .collect();
        cast.extend([0.0, 0.0]);
        cast
    }

    pub fn featurize_region(&self, scene: &Scene, b: &BBox, view: RegionView) -> Result<Vec<f64>> {
        let tol = 1e-6 * scene.width.max(scene.height);
        if !b.is_valid() || !b.within(scene.width + tol, scene.height + tol) || b.x_min < -tol || b.y_min < -tol {
            return Err(Error::InvalidBox {
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            });
        }
        let (mut v, magnitude) = self.clean_descriptor(scene, b)?;
        let mut rng = seed::rng(&[
            tag::REGION,
            self.world.seed,
            scene.id,
            b.x_min.to_bits(),
            b.y_min.to_bits(),
            b.x_max.to_bits(),
            b.y_max.to_bits(),
            view.salt(),
        ]);
        let attr = unit_gaussian(&mut rng, v.len());
        v.iter_mut().zip(&attr).for_each(|(x, n)| *x += magnitude * n);
        if self.world.scene_shift > 0.0 {
            let cast = self.scene_cast(scene.id);
            v.iter_mut().zip(&cast).for_each(|(x, c)| *x += c);
        }
        if self.world.clutter_dims > 0 {
            let clutter = unit_gaussian(&mut rng, self.world.clutter_dims);
            v.extend(clutter.into_iter().map(|n| self.world.clutter * n));
        }
        Ok(v)
    }
}

/// Gaussian direction scaled to unit length, so noise magnitudes are exact.
fn unit_gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SceneContent, SceneObject};

    fn tokenizer() -> Tokenizer {
        Tokenizer::new(["red square", "blue square", "red circle"], 4)
    }

    #[test]
    fn bag_of_words_is_order_invariant() {
        let t = tokenizer();
        assert_eq!(t.featurize_text("red square").unwrap(), t.featurize_text("square red").unwrap());
    }

    #[test]
    fn color_swap_changes_color_coordinates_only() {
        let t = tokenizer();
        let a = t.featurize_text("red square").unwrap();
        let b = t.featurize_text("blue square").unwrap();
        let changed: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        let mut expect = vec![t.index("red"), t.index("blue")];
        expect.sort();
        assert_eq!(changed, expect);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_words_use_overflow_band() {
        let t = tokenizer();
        let v = t.featurize_text("zorp").unwrap();
        let known = t.words.len();
        assert!(v[..known].iter().all(|x| *x == 0.0));
        assert!(v[known..].iter().any(|x| *x > 0.0));
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(matches!(tokenizer().featurize_text("  , "), Err(Error::EmptyPrompt)));
    }

    fn world() -> WorldSpec {
        WorldSpec {
            shapes: vec!["square".into(), "circle".into()],
            colors: vec!["red".into(), "blue".into()],
            noise: 0.1,
            clutter_dims: 3,
            clutter: 1.0,
            scene_shift: 0.0,
            seed: 5,
        }
    }

    fn scene() -> Scene {
        Scene {
            id: 1,
            width: 100.0,
            height: 100.0,
            domain: "d".into(),
            known_categories: None,
            content: SceneContent::Synthetic {
                objects: vec![SceneObject {
                    shape: "square".into(),
                    color: "red".into(),
                    bbox: BBox::new(10., 10., 30., 30.).unwrap(),
                    category_id: Some(1),
                }],
            },
        }
    }

    #[test]
    fn exact_box_is_clean_plus_noise() {
        let f = RegionFeaturizer::new(world());
        let s = scene();
        let b = BBox::new(10., 10., 30., 30.).unwrap();
        let (clean, mag) = f.clean_descriptor(&s, &b).unwrap();
        assert_eq!(&clean[..4], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(mag, 0.1);
        let v = f.featurize_region(&s, &b, RegionView::Proposal).unwrap();
        let d: f64 = v[..clean.len()].iter().zip(&clean).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        assert!((d - 0.1).abs() < 1e-12);
        assert_eq!(v, f.featurize_region(&s, &b, RegionView::Proposal).unwrap());
        assert_ne!(v, f.featurize_region(&s, &b, RegionView::Prompt).unwrap());
    }

    #[test]
    fn empty_area_is_background() {
        let f = RegionFeaturizer::new(world());
        let (clean, _) = f.clean_descriptor(&scene(), &BBox::new(60., 60., 90., 90.).unwrap()).unwrap();
        assert_eq!(clean[f.background_index()], 1.0);
        assert!(clean[..4].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn half_overlap_doubles_noise() {
        let f = RegionFeaturizer::new(world());
        let s = scene();
        // (10,10,30,30) vs (10,10,30,20): IoU = 200/400 = 0.5
        let half = BBox::new(10., 10., 30., 20.).unwrap();
        let exact = BBox::new(10., 10., 30., 30.).unwrap();
        let noise_norm = |b: &BBox| {
            let (clean, _) = f.clean_descriptor(&s, b).unwrap();
            let v = f.featurize_region(&s, b, RegionView::Proposal).unwrap();
            v[..clean.len()].iter().zip(&clean).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt()
        };
        assert!((noise_norm(&half) / noise_norm(&exact) - 2.0).abs() < 1e-9);
    }
}
