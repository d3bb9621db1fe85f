//! Category, attribute and relation facts derived from annotations.

mod color;
mod shape;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, ImageRecord};
use crate::error::{Error, Result};

pub use color::{extract_color, Palette, PaletteColor};
pub use shape::{classify_shape, radius_cv, simplify_closed, ShapeClass, ShapeThresholds};

/// Object id used by count facts, which are keyed by category.
pub const COUNT_SENTINEL: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryFact {
    pub category: String,
    pub object_ids: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Color,
    Shape,
    Count,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeFact {
    pub object_id: i64,
    pub kind: AttributeKind,
    pub value: String,
}

impl AttributeFact {
    /// Splits a count fact value `"category:count"`.
    pub fn count_parts(&self) -> Option<(&str, usize)> {
        if self.kind != AttributeKind::Count {
            return None;
        }
        let (cat, n) = self.value.rsplit_once(':')?;
        Some((cat, n.parse().ok()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "left-of")]
    LeftOf,
    #[serde(rename = "right-of")]
    RightOf,
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "below")]
    Below,
    #[serde(rename = "overlapping")]
    Overlapping,
}

impl Relation {
    /// The relation seen from the other object.
    pub fn inverse(self) -> Relation {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
            Relation::Overlapping => Relation::Overlapping,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Overlapping => "overlapping",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationFact {
    pub subject_id: i64,
    pub object_id: i64,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSet {
    pub image_id: u64,
    pub categories: Vec<CategoryFact>,
    pub attributes: Vec<AttributeFact>,
    pub relations: Vec<RelationFact>,
}

impl FactSet {
    pub fn is_empty(&self) -> bool {
        self.categories.is_empty() && self.attributes.is_empty() && self.relations.is_empty()
    }

    pub fn has_category(&self, category: &str) -> bool {
        self.categories.iter().any(|c| c.category == category)
    }

    pub fn category_names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.category.as_str())
    }

    /// Category of an object id, looked up through the category facts.
    pub fn category_of(&self, object_id: i64) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| c.object_ids.contains(&object_id))
            .map(|c| c.category.as_str())
    }

    pub fn attribute(&self, object_id: i64, kind: AttributeKind) -> Option<&str> {
        self.attributes
            .iter()
            .find(|a| a.object_id == object_id && a.kind == kind)
            .map(|a| a.value.as_str())
    }

    pub fn count_of(&self, category: &str) -> Option<usize> {
        self.attributes
            .iter()
            .filter_map(AttributeFact::count_parts)
            .find(|(c, _)| *c == category)
            .map(|(_, n)| n)
    }

    /// Checks the per-type invariants; returns a description of each problem.
    pub fn check(&self, palette: &Palette) -> Vec<String> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        let mut ids = HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.category.as_str()) {
                problems.push(format!("category {} listed twice", c.category));
            }
            if c.object_ids.is_empty() {
                problems.push(format!("category {} has no objects", c.category));
            }
            ids.extend(c.object_ids.iter().copied());
        }
        for a in &self.attributes {
            match a.kind {
                AttributeKind::Count => match a.count_parts() {
                    Some((cat, n)) if n > 0 && seen.contains(cat) && a.object_id == COUNT_SENTINEL => {}
                    _ => problems.push(format!("bad count fact {:?}", a.value)),
                },
                AttributeKind::Color => {
                    if !palette.contains(&a.value) {
                        problems.push(format!("color {} not in palette", a.value));
                    }
                    if !ids.contains(&a.object_id) {
                        problems.push(format!("color fact for unknown object {}", a.object_id));
                    }
                }
                AttributeKind::Shape => {
                    if !ShapeClass::ALL.iter().any(|s| s.as_str() == a.value) {
                        problems.push(format!("unknown shape {}", a.value));
                    }
                    if !ids.contains(&a.object_id) {
                        problems.push(format!("shape fact for unknown object {}", a.object_id));
                    }
                }
            }
        }
        let mut pairs = HashSet::new();
        for r in &self.relations {
            if r.subject_id == r.object_id {
                problems.push(format!("object {} related to itself", r.subject_id));
            }
            if !ids.contains(&r.subject_id) || !ids.contains(&r.object_id) {
                problems.push(format!(
                    "relation references unknown object ({}, {})",
                    r.subject_id, r.object_id
                ));
            }
            let key = (r.subject_id.min(r.object_id), r.subject_id.max(r.object_id));
            if !pairs.insert(key) {
                problems.push(format!("pair {key:?} has more than one relation"));
            }
            if r.relation == Relation::Overlapping && r.subject_id > r.object_id {
                problems.push(format!("overlapping fact {key:?} not stored with smaller id first"));
            }
        }
        problems
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<FactSet> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<FactSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path.display(), e.to_string()))
    }
}

/// Tunables for fact extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactConfig {
    /// IoU above which a pair is reported as overlapping.
    pub tau_overlap: f64,
    /// Cap on relation facts per image.
    pub max_relations: usize,
    pub palette: Palette,
    pub shape: ShapeThresholds,
    /// Extract color attributes (requires rasters).
    pub colors: bool,
}

impl Default for FactConfig {
    fn default() -> Self {
        FactConfig {
            tau_overlap: 0.1,
            max_relations: 20,
            palette: Palette::default(),
            shape: ShapeThresholds::default(),
            colors: true,
        }
    }
}

/// Groups objects by category in order of first appearance.
pub fn extract_category_facts(img: &ImageRecord) -> Vec<CategoryFact> {
    let mut facts: Vec<CategoryFact> = Vec::new();
    for obj in &img.objects {
        match facts.iter_mut().find(|f| f.category == obj.category) {
            Some(f) => f.object_ids.push(obj.object_id),
            None => facts.push(CategoryFact {
                category: obj.category.clone(),
                object_ids: vec![obj.object_id],
            }),
        }
    }
    facts
}

pub fn extract_counts(img: &ImageRecord) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for obj in &img.objects {
        *counts.entry(obj.category.clone()).or_insert(0) += 1;
    }
    counts
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Relation of `a` relative to `b` from the dominant axis of their center
/// offset, or overlapping when their IoU exceeds `tau_overlap`.
pub fn relation_between(a: &BoundingBox, b: &BoundingBox, tau_overlap: f64) -> Relation {
    if iou(a, b) > tau_overlap {
        return Relation::Overlapping;
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = (bx - ax, by - ay);
    if dx == 0.0 && dy == 0.0 {
        Relation::Overlapping
    } else if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if dy > 0.0 {
        Relation::Above
    } else {
        Relation::Below
    }
}

/// One fact per unordered object pair, capped at `cfg.max_relations`.
pub fn extract_relations(img: &ImageRecord, cfg: &FactConfig) -> Vec<RelationFact> {
    struct Scored {
        fact: RelationFact,
        iou: f64,
        distance: f64,
    }
    let objs = &img.objects;
    let mut scored = Vec::new();
    for i in 0..objs.len() {
        for j in i + 1..objs.len() {
            let (a, b) = (&objs[i], &objs[j]);
            let overlap = iou(&a.bbox, &b.bbox);
            let (ca, cb) = (a.bbox.center(), b.bbox.center());
            let distance = (ca.0 - cb.0).hypot(ca.1 - cb.1);
            let relation = relation_between(&a.bbox, &b.bbox, cfg.tau_overlap);
            let fact = if relation == Relation::Overlapping {
                RelationFact {
                    subject_id: a.object_id.min(b.object_id),
                    object_id: a.object_id.max(b.object_id),
                    relation,
                }
            } else {
                // the subject is the object whose center is lexicographically smaller
                let (s, o) = if ca.0 < cb.0 || (ca.0 == cb.0 && ca.1 <= cb.1) {
                    (a, b)
                } else {
                    (b, a)
                };
                RelationFact {
                    subject_id: s.object_id,
                    object_id: o.object_id,
                    relation: relation_between(&s.bbox, &o.bbox, cfg.tau_overlap),
                }
            };
            scored.push(Scored {
                fact,
                iou: overlap,
                distance,
            });
        }
    }
    if scored.len() > cfg.max_relations {
        scored.sort_by(|x, y| {
            y.iou
                .total_cmp(&x.iou)
                .then(x.distance.total_cmp(&y.distance))
                .then((x.fact.subject_id, x.fact.object_id).cmp(&(y.fact.subject_id, y.fact.object_id)))
        });
        scored.truncate(cfg.max_relations);
    }
    let mut facts: Vec<RelationFact> = scored.into_iter().map(|s| s.fact).collect();
    facts.sort_by_key(|f| (f.subject_id, f.object_id));
    facts
}

/// Runs every extractor over one image.
pub fn build_fact_set(img: &ImageRecord, cfg: &FactConfig) -> Result<FactSet> {
    let categories = extract_category_facts(img);
    let mut attributes = Vec::new();
    if cfg.colors {
        for obj in &img.objects {
            attributes.push(AttributeFact {
                object_id: obj.object_id,
                kind: AttributeKind::Color,
                value: extract_color(img, obj, &cfg.palette)?,
            });
        }
    }
    for obj in &img.objects {
        attributes.push(AttributeFact {
            object_id: obj.object_id,
            kind: AttributeKind::Shape,
            value: classify_shape(obj.polygon(), &cfg.shape)?.to_string(),
        });
    }
    let counts = extract_counts(img);
    for c in &categories {
        attributes.push(AttributeFact {
            object_id: COUNT_SENTINEL,
            kind: AttributeKind::Count,
            value: format!("{}:{}", c.category, counts[&c.category]),
        });
    }
    Ok(FactSet {
        image_id: img.image_id,
        categories,
        attributes,
        relations: extract_relations(img, cfg),
    })
}
