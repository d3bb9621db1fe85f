//! Synthetic scenes with an injected co-occurrence prior.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, ImageRecord, ObjectAnnotation, Polygon, Rgb};
use crate::error::{Error, Result};
use crate::facts::{build_fact_set, FactConfig, FactSet, Palette, ShapeClass};

/// `context` present makes `biased` likely with `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRule {
    pub context: String,
    pub biased: String,
    pub probability: f64,
}

impl PriorRule {
    pub fn new(context: &str, biased: &str, probability: f64) -> PriorRule {
        PriorRule {
            context: context.into(),
            biased: biased.into(),
            probability,
        }
    }
}

pub fn default_prior_table() -> Vec<PriorRule> {
    [
        ("ski", "snowboard"),
        ("keyboard", "mouse"),
        ("fork", "knife"),
        ("toothbrush", "sink"),
        ("dog", "frisbee"),
        ("cup", "spoon"),
    ]
    .iter()
    .map(|(c, b)| PriorRule::new(c, b, 0.9))
    .collect()
}

/// Categories that never act as a prior context.
pub const FILLER_CATEGORIES: [&str; 16] = [
    "cat", "bird", "horse", "sheep", "cow", "car", "bus", "bicycle", "chair", "clock", "vase",
    "umbrella", "kite", "laptop", "book", "bottle",
];

pub const SCENE_SHAPES: [ShapeClass; 4] = [
    ShapeClass::Circular,
    ShapeClass::Square,
    ShapeClass::Rectangular,
    ShapeClass::Triangular,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_scenes: usize,
    /// Share of scenes generated as prior conflicts.
    pub conflict_fraction: f64,
    /// Chance that a non-conflict scene contains some rule's context.
    pub context_rate: f64,
    pub max_objects: usize,
    pub grid: usize,
    pub image_size: u32,
    pub prior_table: Vec<PriorRule>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_scenes: 2000,
            conflict_fraction: 0.3,
            context_rate: 0.6,
            max_objects: 3,
            grid: 4,
            image_size: 64,
            prior_table: default_prior_table(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    pub color: String,
    pub shape: ShapeClass,
    /// Grid cell `(row, col)`.
    pub cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub scene_id: u64,
    /// Sorted by grid cell, row-major.
    pub objects: Vec<SceneObject>,
    /// Generated as a violation of the prior: context present, biased absent.
    pub prior_conflict: bool,
    /// Index of the prior rule whose context appears, if any.
    pub rule: Option<usize>,
}

impl SyntheticScene {
    pub fn categories(&self) -> BTreeSet<&str> {
        self.objects.iter().map(|o| o.category.as_str()).collect()
    }

    pub fn contains(&self, category: &str) -> bool {
        self.objects.iter().any(|o| o.category == category)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub scenes: Vec<SyntheticScene>,
    /// Ground-truth facts, aligned with `scenes`.
    pub facts: Vec<FactSet>,
    pub categories: Vec<String>,
}

impl World {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Rule whose context is present and biased object absent.
    pub fn open_rule(&self, scene: &SyntheticScene) -> Option<&PriorRule> {
        let rule = &self.config.prior_table[scene.rule?];
        (scene.contains(&rule.context) && !scene.contains(&rule.biased)).then_some(rule)
    }

    /// Scenes `range` as a new world sharing the configuration.
    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> World {
        let idx: Vec<usize> = indices.into_iter().collect();
        World {
            config: self.config.clone(),
            scenes: idx.iter().map(|&i| self.scenes[i].clone()).collect(),
            facts: idx.iter().map(|&i| self.facts[i].clone()).collect(),
            categories: self.categories.clone(),
        }
    }

    /// Consecutive train/eval split at `train` scenes.
    pub fn split(&self, train: usize) -> (World, World) {
        let train = train.min(self.len());
        (self.subset(0..train), self.subset(train..self.len()))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::textualizer::write_jsonl(path, &self.scenes)
    }
}

fn all_categories(prior: &[PriorRule]) -> Vec<String> {
    let mut cats: Vec<String> = Vec::new();
    for r in prior {
        for c in [&r.context, &r.biased] {
            if !cats.contains(c) {
                cats.push(c.clone());
            }
        }
    }
    for c in FILLER_CATEGORIES {
        if !cats.iter().any(|x| x == c) {
            cats.push(c.to_string());
        }
    }
    cats
}

/// Deterministic world of `cfg.num_scenes` scenes with ground-truth facts.
pub fn build_world(seed: u64, cfg: &WorldConfig) -> Result<World> {
    if cfg.num_scenes == 0 {
        return Err(Error::InvalidArgument("world needs at least one scene".into()));
    }
    if cfg.max_objects == 0 || cfg.max_objects > cfg.grid * cfg.grid {
        return Err(Error::InvalidArgument(format!(
            "max_objects must lie in [1, {}]",
            cfg.grid * cfg.grid
        )));
    }
    if cfg.prior_table.is_empty() && cfg.conflict_fraction > 0.0 {
        return Err(Error::InvalidArgument("conflict scenes need a prior table".into()));
    }
    for r in &cfg.prior_table {
        if !(0.0..=1.0).contains(&r.probability) || r.context == r.biased {
            return Err(Error::InvalidArgument(format!("bad prior rule {r:?}")));
        }
    }
    let contexts: BTreeSet<&str> = cfg.prior_table.iter().map(|r| r.context.as_str()).collect();
    let categories = all_categories(&cfg.prior_table);
    let fillers: Vec<&str> = categories
        .iter()
        .map(String::as_str)
        .filter(|c| !contexts.contains(c))
        .collect();
    let palette = Palette::default();
    let colors: Vec<String> = palette.names().map(str::to_string).collect();
    let fact_cfg = FactConfig::default();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(cfg.num_scenes);
    let mut facts = Vec::with_capacity(cfg.num_scenes);
    for scene_id in 0..cfg.num_scenes as u64 {
        let n_objects = rng.gen_range(1..=cfg.max_objects);
        let conflict = rng.gen_bool(cfg.conflict_fraction.clamp(0.0, 1.0));
        let mut cats: Vec<String> = Vec::new();
        let mut rule = None;
        let mut banned: BTreeSet<&str> = BTreeSet::new();
        if conflict || (!cfg.prior_table.is_empty() && rng.gen_bool(cfg.context_rate.clamp(0.0, 1.0))) {
            let ri = rng.gen_range(0..cfg.prior_table.len());
            let r = &cfg.prior_table[ri];
            rule = Some(ri);
            cats.push(r.context.clone());
            if conflict || !rng.gen_bool(r.probability) {
                banned.insert(&r.biased);
            } else {
                cats.push(r.biased.clone());
            }
        }
        let pool: Vec<&str> = fillers
            .iter()
            .copied()
            .filter(|c| !banned.contains(c) && !cats.iter().any(|x| x == c))
            .collect();
        let extra = n_objects.saturating_sub(cats.len());
        cats.extend(pool.choose_multiple(&mut rng, extra).map(|c| c.to_string()));

        let mut cells: Vec<(usize, usize)> = (0..cfg.grid)
            .flat_map(|r| (0..cfg.grid).map(move |c| (r, c)))
            .collect();
        cells.shuffle(&mut rng);
        let mut objects: Vec<SceneObject> = cats
            .into_iter()
            .zip(cells)
            .map(|(category, cell)| SceneObject {
                category,
                color: colors.choose(&mut rng).expect("palette is non-empty").clone(),
                shape: *SCENE_SHAPES.choose(&mut rng).expect("shapes"),
                cell,
            })
            .collect();
        objects.sort_by_key(|o| o.cell);
        let scene = SyntheticScene {
            scene_id,
            objects,
            prior_conflict: conflict,
            rule,
        };
        let img = render_scene(&scene, cfg, &palette)?;
        facts.push(build_fact_set(&img, &fact_cfg)?);
        scenes.push(scene);
    }
    Ok(World {
        config: cfg.clone(),
        scenes,
        facts,
        categories,
    })
}

/// Outline of `shape` centred at `(cx, cy)` with half-extent `r`.
pub fn shape_polygon(shape: ShapeClass, cx: f64, cy: f64, r: f64) -> Result<Polygon> {
    let v = match shape {
        ShapeClass::Circular => (0..64)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / 64.0;
                (cx + r * t.cos(), cy + r * t.sin())
            })
            .collect(),
        ShapeClass::Square => vec![(cx - r, cy - r), (cx + r, cy - r), (cx + r, cy + r), (cx - r, cy + r)],
        ShapeClass::Rectangular => vec![
            (cx - r, cy - r / 2.0),
            (cx + r, cy - r / 2.0),
            (cx + r, cy + r / 2.0),
            (cx - r, cy + r / 2.0),
        ],
        ShapeClass::Triangular => vec![(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)],
        ShapeClass::Irregular => vec![
            (cx - r, cy - r),
            (cx + r, cy - r),
            (cx + r * 0.2, cy),
            (cx + r, cy + r),
            (cx - r, cy + r),
        ],
    };
    Polygon::new(v)
}

/// Rasterizes a scene: one filled polygon per object on a black background.
pub fn render_scene(scene: &SyntheticScene, cfg: &WorldConfig, palette: &Palette) -> Result<ImageRecord> {
    let size = cfg.image_size as usize;
    let cell = cfg.image_size as f64 / cfg.grid as f64;
    let radius = cell * 0.375;
    let mut pixels: Vec<Rgb> = vec![[0, 0, 0]; size * size];
    let mut objects = Vec::with_capacity(scene.objects.len());
    for (i, o) in scene.objects.iter().enumerate() {
        let cx = (o.cell.1 as f64 + 0.5) * cell;
        let cy = (o.cell.0 as f64 + 0.5) * cell;
        let poly = shape_polygon(o.shape, cx, cy, radius)?;
        let (x0, y0, x1, y1) = poly.bounds();
        let ann = ObjectAnnotation {
            object_id: i as i64 + 1,
            category: o.category.clone(),
            bbox: BoundingBox::new(x0, y0, x1 - x0, y1 - y0)?,
            parts: vec![poly],
        };
        let rgb = palette
            .rgb(&o.color)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown color {}", o.color)))?;
        let mask = ann.mask(size, size)?;
        for row in 0..size {
            for col in 0..size {
                if mask.get(col, row) {
                    pixels[row * size + col] = rgb;
                }
            }
        }
        objects.push(ann);
    }
    Ok(ImageRecord {
        image_id: scene.scene_id,
        width: cfg.image_size,
        height: cfg.image_size,
        file_name: format!("scene_{:06}.ppm", scene.scene_id),
        pixels: Some(pixels),
        objects,
    })
}
