//! COCO-style annotation ingestion, validation and geometry.
//!
//! The accepted file is a subset of the COCO instances schema: `images`
//! carry `id`, `width`, `height`, `file_name`; `annotations` carry `id`,
//! `image_id`, `category_name`, `bbox` as `[x, y, w, h]` and polygon
//! `segmentation` given as a list of flat coordinate arrays. RLE masks are
//! rejected. Pixels come from a sidecar binary PPM named by `file_name`;
//! a missing raster is tolerated and leaves the record without pixels.

mod geometry;
mod ppm;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use geometry::{rasterize_polygon, BoundingBox, Mask, Polygon};
pub use ppm::{read_ppm, write_ppm, Raster, Rgb};

/// Polygon centroids must fall inside the box grown by this fraction.
pub const CENTROID_SLACK: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub object_id: i64,
    pub category: String,
    pub bbox: BoundingBox,
    /// One or more disjoint polygon parts; masks are unioned.
    pub parts: Vec<Polygon>,
}

impl ObjectAnnotation {
    /// The largest polygon part, used for shape analysis.
    pub fn polygon(&self) -> &Polygon {
        self.parts
            .iter()
            .max_by(|a, b| a.area().total_cmp(&b.area()))
            .expect("object has at least one polygon part")
    }

    /// Area-weighted centroid over all parts.
    pub fn centroid(&self) -> (f64, f64) {
        let total: f64 = self.parts.iter().map(Polygon::area).sum();
        let (sx, sy) = self.parts.iter().fold((0.0, 0.0), |(sx, sy), p| {
            let (cx, cy) = p.centroid();
            (sx + cx * p.area(), sy + cy * p.area())
        });
        (sx / total, sy / total)
    }

    /// Union of the rasterized parts.
    pub fn mask(&self, width: usize, height: usize) -> Result<Mask> {
        let mut mask = Mask::empty(width, height);
        for part in &self.parts {
            mask.union_with(&rasterize_polygon(part, width, height)?);
        }
        Ok(mask)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> ObjectAnnotation {
        ObjectAnnotation {
            bbox: self.bbox.translated(dx, dy),
            parts: self.parts.iter().map(|p| p.translated(dx, dy)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    /// Row-major RGB; `None` when no raster could be resolved.
    #[serde(skip)]
    pub pixels: Option<Vec<Rgb>>,
    pub objects: Vec<ObjectAnnotation>,
}

impl ImageRecord {
    pub fn has_pixels(&self) -> bool {
        self.pixels.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageRecord>,
}

impl AnnotationSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn object_count(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawFile {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawAnnotation {
    id: i64,
    image_id: u64,
    category_name: String,
    bbox: Vec<f64>,
    segmentation: RawSegmentation,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum RawSegmentation {
    Polygons(Vec<Vec<f64>>),
    Other(serde_json::Value),
}

/// Loads an annotation file, resolving rasters next to it.
pub fn load_annotation_set(path: &Path) -> Result<AnnotationSet> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    load_annotation_set_with_rasters(path, dir)
}

/// Loads an annotation file, resolving `file_name` entries under `raster_dir`.
pub fn load_annotation_set_with_rasters(path: &Path, raster_dir: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawFile =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path.display(), e.to_string()))?;
    let shown = path.display();

    let mut images: Vec<ImageRecord> = Vec::with_capacity(raw.images.len());
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut sorted = raw.images;
    sorted.sort_by_key(|i| i.id);
    for img in sorted {
        if img.width == 0 || img.height == 0 {
            return Err(Error::malformed(
                &shown,
                format!("images[id={}].width/height must be positive", img.id),
            ));
        }
        if index.insert(img.id, images.len()).is_some() {
            return Err(Error::malformed(&shown, format!("duplicate images.id {}", img.id)));
        }
        let pixels = resolve_raster(raster_dir, &img)?;
        images.push(ImageRecord {
            image_id: img.id,
            width: img.width,
            height: img.height,
            file_name: img.file_name,
            pixels,
            objects: Vec::new(),
        });
    }

    for ann in raw.annotations {
        let &slot = index.get(&ann.image_id).ok_or_else(|| {
            Error::malformed(
                &shown,
                format!("annotations[id={}].image_id {} has no image", ann.id, ann.image_id),
            )
        })?;
        let image = &mut images[slot];
        let object = build_object(&shown, ann, image.width as f64, image.height as f64)?;
        image.objects.push(object);
    }
    for image in &mut images {
        image.objects.sort_by_key(|o| o.object_id);
        if let Some(w) = image.objects.windows(2).find(|w| w[0].object_id == w[1].object_id) {
            return Err(Error::malformed(
                &shown,
                format!("duplicate annotations.id {}", w[0].object_id),
            ));
        }
    }
    Ok(AnnotationSet { images })
}

fn resolve_raster(dir: &Path, img: &RawImage) -> Result<Option<Vec<Rgb>>> {
    let candidate = dir.join(&img.file_name);
    if img.file_name.is_empty() || !candidate.is_file() {
        return Ok(None);
    }
    let raster = read_ppm(&candidate)?;
    if raster.width != img.width as usize || raster.height != img.height as usize {
        return Err(Error::malformed(
            candidate.display(),
            format!(
                "raster is {}x{} but image {} declares {}x{}",
                raster.width, raster.height, img.id, img.width, img.height
            ),
        ));
    }
    Ok(Some(raster.pixels))
}

fn build_object(
    file: &impl std::fmt::Display,
    ann: RawAnnotation,
    width: f64,
    height: f64,
) -> Result<ObjectAnnotation> {
    let id = ann.id;
    if ann.category_name.trim().is_empty() {
        return Err(Error::malformed(
            file,
            format!("annotations[id={id}].category_name is empty"),
        ));
    }
    let [x, y, w, h] = <[f64; 4]>::try_from(ann.bbox.as_slice()).map_err(|_| {
        Error::malformed(
            file,
            format!("annotations[id={id}].bbox must have 4 numbers, got {}", ann.bbox.len()),
        )
    })?;
    let bbox = BoundingBox::new(x, y, w, h)
        .map_err(|e| Error::Geometry(format!("annotation {id}: {e}")))?
        .clamp_to(width, height)
        .ok_or_else(|| Error::Geometry(format!("annotation {id}: bbox lies outside the image")))?;

    let flat = match ann.segmentation {
        RawSegmentation::Polygons(parts) => parts,
        RawSegmentation::Other(_) => {
            return Err(Error::malformed(
                file,
                format!("annotations[id={id}].segmentation is not a polygon list (RLE is unsupported)"),
            ))
        }
    };
    if flat.is_empty() {
        return Err(Error::malformed(
            file,
            format!("annotations[id={id}].segmentation has no polygons"),
        ));
    }
    let mut parts = Vec::with_capacity(flat.len());
    for coords in &flat {
        let clamped: Vec<f64> = coords
            .chunks(2)
            .flat_map(|c| {
                let px = c[0].clamp(0.0, width);
                let py = c.get(1).map(|v| v.clamp(0.0, height));
                std::iter::once(px).chain(py)
            })
            .collect();
        let poly = Polygon::from_flat(&clamped)
            .map_err(|e| Error::Geometry(format!("annotation {id}: {e}")))?;
        parts.push(poly);
    }
    let object = ObjectAnnotation {
        object_id: id,
        category: ann.category_name.trim().to_string(),
        bbox,
        parts,
    };
    if !object.bbox.expanded(CENTROID_SLACK).contains_point(object.centroid()) {
        return Err(Error::Geometry(format!(
            "annotation {id}: polygon centroid lies outside its bbox"
        )));
    }
    Ok(object)
}

/// Writes `set` in the accepted schema. When `raster_dir` is given, every
/// record with pixels is also written there as PPM under its `file_name`.
pub fn write_annotation_set(set: &AnnotationSet, path: &Path, raster_dir: Option<&Path>) -> Result<()> {
    let raw = RawFile {
        images: set
            .images
            .iter()
            .map(|i| RawImage {
                id: i.image_id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
            })
            .collect(),
        annotations: set
            .images
            .iter()
            .flat_map(|img| {
                img.objects.iter().map(move |o| RawAnnotation {
                    id: o.object_id,
                    image_id: img.image_id,
                    category_name: o.category.clone(),
                    bbox: vec![o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h],
                    segmentation: RawSegmentation::Polygons(
                        o.parts
                            .iter()
                            .map(|p| p.vertices.iter().flat_map(|&(x, y)| [x, y]).collect())
                            .collect(),
                    ),
                })
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&raw)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    if let Some(dir) = raster_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for img in &set.images {
            if let Some(pixels) = &img.pixels {
                write_ppm(
                    &dir.join(&img.file_name),
                    &Raster {
                        width: img.width as usize,
                        height: img.height as usize,
                        pixels: pixels.clone(),
                    },
                )?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyCategory,
    NonPositiveBox,
    BoxOutOfBounds,
    DegeneratePolygon,
    PolygonOutOfBounds,
    CentroidOutsideBox,
    PixelCount,
    MissingPolygon,
}

/// One invariant violation, located by image and (optionally) object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub image_id: u64,
    pub object_id: Option<i64>,
    pub kind: ViolationKind,
    pub detail: String,
}

/// Checks every record invariant; an empty report means the set is valid.
pub fn validate(set: &AnnotationSet) -> Vec<Violation> {
    let mut report = Vec::new();
    for img in &set.images {
        let (w, h) = (img.width as f64, img.height as f64);
        let mut push = |object_id, kind, detail: String| {
            report.push(Violation {
                image_id: img.image_id,
                object_id,
                kind,
                detail,
            })
        };
        if let Some(pixels) = &img.pixels {
            let expected = img.width as usize * img.height as usize;
            if pixels.len() != expected {
                push(
                    None,
                    ViolationKind::PixelCount,
                    format!("{} pixels, expected {expected}", pixels.len()),
                );
            }
        }
        for obj in &img.objects {
            let id = Some(obj.object_id);
            if obj.category.trim().is_empty() {
                push(id, ViolationKind::EmptyCategory, "category is empty".into());
            }
            let b = obj.bbox;
            if !(b.w > 0.0 && b.h > 0.0) {
                push(id, ViolationKind::NonPositiveBox, format!("bbox w={} h={}", b.w, b.h));
            } else if !b.within(w, h) {
                push(id, ViolationKind::BoxOutOfBounds, format!("bbox {b:?} exceeds {w}x{h}"));
            }
            if obj.parts.is_empty() {
                push(id, ViolationKind::MissingPolygon, "no polygon parts".into());
                continue;
            }
            let mut geometry_ok = true;
            for part in &obj.parts {
                if let Some(problem) = part.defect() {
                    geometry_ok = false;
                    push(id, ViolationKind::DegeneratePolygon, problem);
                } else if !part.within(w, h) {
                    push(
                        id,
                        ViolationKind::PolygonOutOfBounds,
                        format!("polygon bounds {:?} exceed {w}x{h}", part.bounds()),
                    );
                }
            }
            if geometry_ok && b.w > 0.0 && b.h > 0.0 {
                let c = obj.centroid();
                if !b.expanded(CENTROID_SLACK).contains_point(c) {
                    push(
                        id,
                        ViolationKind::CentroidOutsideBox,
                        format!("centroid {c:?} outside expanded bbox"),
                    );
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json(seg: &str) -> String {
        format!(
            r#"{{"images":[{{"id":7,"width":20,"height":10,"file_name":"a.ppm"}}],
               "annotations":[
                 {{"id":2,"image_id":7,"category_name":"ball","bbox":[10,2,4,4],
                   "segmentation":[[10,2,14,2,14,6,10,6]]}},
                 {{"id":1,"image_id":7,"category_name":"dog","bbox":[1,1,5,5],
                   "segmentation":{seg}}}]}}"#
        )
    }

    fn write(dir: &Path, text: &str) -> std::path::PathBuf {
        let p = dir.join("ann.json");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_one_image_two_objects_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &sample_json("[[1,1,6,1,6,6,1,6]]"));
        let set = load_annotation_set(&p).unwrap();
        assert_eq!(set.len(), 1);
        let ids: Vec<_> = set.images[0].objects.iter().map(|o| o.object_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert!(!set.images[0].has_pixels());
        assert!(validate(&set).is_empty());
    }

    #[test]
    fn two_vertex_polygon_is_geometry_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &sample_json("[[1,1,6,6]]"));
        assert!(matches!(load_annotation_set(&p), Err(Error::Geometry(_))));
    }

    #[test]
    fn rle_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &sample_json(r#"{"counts":[1,2],"size":[10,20]}"#));
        match load_annotation_set(&p) {
            Err(Error::MalformedFile { reason, .. }) => assert!(reason.contains("RLE")),
            other => panic!("expected MalformedFile, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"images":[{"id":1,"width":4,"height":4,"file_name":""}],
            "annotations":[{"id":1,"image_id":1,"bbox":[0,0,1,1],"segmentation":[[0,0,1,0,1,1]]}]}"#;
        let p = write(dir.path(), text);
        match load_annotation_set(&p) {
            Err(Error::MalformedFile { reason, .. }) => assert!(reason.contains("category_name")),
            other => panic!("expected MalformedFile, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_box_is_geometry_error() {
        let dir = tempfile::tempdir().unwrap();
        let text = sample_json("[[1,1,6,1,6,6,1,6]]").replace("[1,1,5,5]", "[1,1,0,5]");
        let p = write(dir.path(), &text);
        assert!(matches!(load_annotation_set(&p), Err(Error::Geometry(_))));
    }

    #[test]
    fn raster_is_resolved_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &sample_json("[[1,1,6,1,6,6,1,6]]"));
        let raster = Raster {
            width: 20,
            height: 10,
            pixels: vec![[9, 9, 9]; 200],
        };
        write_ppm(&dir.path().join("a.ppm"), &raster).unwrap();
        let set = load_annotation_set(&p).unwrap();
        assert_eq!(set.images[0].pixels.as_ref().unwrap().len(), 200);

        let wrong = Raster {
            width: 5,
            height: 5,
            pixels: vec![[0, 0, 0]; 25],
        };
        write_ppm(&dir.path().join("a.ppm"), &wrong).unwrap();
        assert!(matches!(load_annotation_set(&p), Err(Error::MalformedFile { .. })));
    }

    fn valid_set() -> AnnotationSet {
        let square = Polygon::new(vec![(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)]).unwrap();
        AnnotationSet {
            images: vec![ImageRecord {
                image_id: 3,
                width: 10,
                height: 10,
                file_name: String::new(),
                pixels: None,
                objects: vec![ObjectAnnotation {
                    object_id: 11,
                    category: "cup".into(),
                    bbox: BoundingBox::new(1.0, 1.0, 4.0, 4.0).unwrap(),
                    parts: vec![square],
                }],
            }],
        }
    }

    #[test]
    fn validate_well_formed_is_empty() {
        assert!(validate(&valid_set()).is_empty());
    }

    #[test]
    fn validate_zero_width_box() {
        let mut set = valid_set();
        set.images[0].objects[0].bbox.w = 0.0;
        let report = validate(&set);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].object_id, Some(11));
        assert_eq!(report[0].kind, ViolationKind::NonPositiveBox);
    }

    #[test]
    fn validate_polygon_out_of_bounds() {
        let mut set = valid_set();
        let obj = &mut set.images[0].objects[0];
        obj.parts[0] = Polygon::new(vec![(1.0, 1.0), (5.0, 1.0), (5.0, 11.0)]).unwrap();
        obj.bbox = BoundingBox::new(1.0, 1.0, 4.0, 9.0).unwrap();
        let report = validate(&set);
        assert_eq!(report.len(), 1, "{report:?}");
        assert_eq!(report[0].kind, ViolationKind::PolygonOutOfBounds);
    }
}
