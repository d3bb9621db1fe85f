//! Box and polygon primitives plus even-odd scanline rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel units, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let bbox = BoundingBox { x, y, w, h };
        if !(w > 0.0 && h > 0.0) || !bbox.is_finite() {
            return Err(Error::Geometry(format!(
                "bounding box must have positive finite extent, got w={w} h={h}"
            )));
        }
        Ok(bbox)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Intersects the box with `[0,width] x [0,height]`.
    /// Returns `None` when nothing of positive area remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }

    /// Box grown by `fraction` of its size on every side.
    pub fn expanded(&self, fraction: f64) -> BoundingBox {
        let dx = self.w * fraction;
        let dy = self.h * fraction;
        BoundingBox {
            x: self.x - dx,
            y: self.y - dy,
            w: self.w + 2.0 * dx,
            h: self.h + 2.0 * dy,
        }
    }

    pub fn contains_point(&self, (px, py): (f64, f64)) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// Simple polygon given by its ordered vertices (implicitly closed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
}

impl Polygon {
    /// Builds a validated polygon. A trailing vertex equal to the first one
    /// is treated as an explicit closure and dropped.
    pub fn new(mut vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() > 3 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        let poly = Polygon { vertices };
        if let Some(problem) = poly.defect() {
            return Err(Error::Geometry(problem));
        }
        Ok(poly)
    }

    /// Builds a polygon from a flat `[x0, y0, x1, y1, ...]` list.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::Geometry(format!(
                "flat polygon has odd coordinate count {}",
                coords.len()
            )));
        }
        Polygon::new(coords.chunks_exact(2).map(|c| (c[0], c[1])).collect())
    }

    /// Describes the first violated invariant, if any.
    pub fn defect(&self) -> Option<String> {
        let n = self.vertices.len();
        if n < 3 {
            return Some(format!("polygon needs at least 3 vertices, got {n}"));
        }
        if self
            .vertices
            .iter()
            .any(|&(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Some("polygon has a non-finite coordinate".into());
        }
        for i in 0..n {
            if self.vertices[i] == self.vertices[(i + 1) % n] {
                return Some(format!("polygon repeats vertex {i} consecutively"));
            }
        }
        if self.signed_area() == 0.0 {
            return Some("polygon has zero area".into());
        }
        None
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn edges(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Shoelace signed area; positive for counter-clockwise order in a y-up frame.
    pub fn signed_area(&self) -> f64 {
        self.edges()
            .map(|((x0, y0), (x1, y1))| x0 * y1 - x1 * y0)
            .sum::<f64>()
            / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Area centroid of the polygon.
    pub fn centroid(&self) -> (f64, f64) {
        let a = self.signed_area();
        if a == 0.0 {
            let n = self.vertices.len() as f64;
            let (sx, sy) = self
                .vertices
                .iter()
                .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
            return (sx / n, sy / n);
        }
        let (cx, cy) = self
            .edges()
            .fold((0.0, 0.0), |(cx, cy), ((x0, y0), (x1, y1))| {
                let cross = x0 * y1 - x1 * y0;
                (cx + (x0 + x1) * cross, cy + (y0 + y1) * cross)
            });
        (cx / (6.0 * a), cy / (6.0 * a))
    }

    /// Largest distance between any two vertices.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, &(xa, ya)) in self.vertices.iter().enumerate() {
            for &(xb, yb) in &self.vertices[i + 1..] {
                best = best.max((xa - xb).hypot(ya - yb));
            }
        }
        best
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.vertices
            .iter()
            .all(|&(x, y)| (0.0..=width).contains(&x) && (0.0..=height).contains(&y))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|&(x, y)| (x * s, y * s)).collect(),
        }
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn union_with(&mut self, other: &Mask) {
        debug_assert_eq!(self.bits.len(), other.bits.len());
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

/// Rasterizes `p` onto a `width x height` grid. A pixel is set iff its
/// center lies inside the polygon under the even-odd rule.
pub fn rasterize_polygon(p: &Polygon, width: usize, height: usize) -> Result<Mask> {
    if let Some(problem) = p.defect() {
        return Err(Error::Geometry(problem));
    }
    let mut mask = Mask::empty(width, height);
    let mut crossings = Vec::with_capacity(p.len());
    for row in 0..height {
        let py = row as f64 + 0.5;
        crossings.clear();
        for ((xi, yi), (xj, yj)) in p.edges() {
            if (yi > py) != (yj > py) {
                crossings.push((xj - xi) * (py - yi) / (yj - yi) + xi);
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        // Centers with x in [x_2k, x_2k+1) are inside.
        for span in crossings.chunks_exact(2) {
            let start = (span[0] - 0.5).ceil().max(0.0);
            let end = (span[1] - 0.5).ceil().min(width as f64);
            if end <= start {
                continue;
            }
            let base = row * width;
            for col in start as usize..end as usize {
                mask.bits[base + col] = true;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::new(vec![(x, y), (x + s, y), (x + s, y + s), (x, y + s)]).unwrap()
    }

    #[test]
    fn unit_square_sets_one_pixel() {
        let mask = rasterize_polygon(&square(0.0, 0.0, 1.0), 2, 2).unwrap();
        assert_eq!(mask.count(), 1);
        assert!(mask.get(0, 0));
    }

    #[test]
    fn full_frame_sets_everything() {
        let mask = rasterize_polygon(&square(0.0, 0.0, 8.0), 8, 8).unwrap();
        assert_eq!(mask.count(), 64);
    }

    #[test]
    fn two_vertices_is_a_geometry_error() {
        assert!(matches!(
            Polygon::new(vec![(0.0, 0.0), (1.0, 1.0)]),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn collinear_and_repeated_vertices_rejected() {
        assert!(Polygon::new(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(Polygon::new(vec![(0.0, 0.0), (0.0, 0.0), (2.0, 2.0), (0.0, 2.0)]).is_err());
    }

    #[test]
    fn closing_vertex_is_dropped() {
        let p = Polygon::new(vec![(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 0.0)]).unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn shoelace_and_centroid() {
        let p = square(1.0, 1.0, 2.0);
        assert_eq!(p.area(), 4.0);
        assert_eq!(p.centroid(), (2.0, 2.0));
    }

    #[test]
    fn box_clamp() {
        let b = BoundingBox::new(-2.0, 1.0, 4.0, 20.0).unwrap();
        let c = b.clamp_to(10.0, 10.0).unwrap();
        assert_eq!(c, BoundingBox { x: 0.0, y: 1.0, w: 2.0, h: 9.0 });
        assert!(BoundingBox::new(20.0, 0.0, 1.0, 1.0)
            .unwrap()
            .clamp_to(10.0, 10.0)
            .is_none());
    }
}
