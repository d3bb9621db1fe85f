use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotations::Polygon;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circular,
    Square,
    Rectangular,
    Triangular,
    Irregular,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Circular,
        ShapeClass::Square,
        ShapeClass::Rectangular,
        ShapeClass::Triangular,
        ShapeClass::Irregular,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::Circular => "circular",
            ShapeClass::Square => "square",
            ShapeClass::Rectangular => "rectangular",
            ShapeClass::Triangular => "triangular",
            ShapeClass::Irregular => "irregular",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Thresholds for contour simplification and classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeThresholds {
    /// Simplification tolerance as a fraction of the polygon diameter.
    pub simplify_fraction: f64,
    pub circular_min_vertices: usize,
    /// Max coefficient of variation of vertex radii for a circle.
    pub circular_max_radius_cv: f64,
    /// Allowed deviation from 90 degrees for quadrilateral corners.
    pub right_angle_tolerance_deg: f64,
    /// Max/min side ratio below which a right quadrilateral is square.
    pub square_max_side_ratio: f64,
}

impl Default for ShapeThresholds {
    fn default() -> Self {
        ShapeThresholds {
            simplify_fraction: 0.02,
            circular_min_vertices: 8,
            circular_max_radius_cv: 0.15,
            right_angle_tolerance_deg: 15.0,
            square_max_side_ratio: 1.2,
        }
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return (p.0 - a.0).hypot(p.1 - a.1);
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

/// Marks the vertices of `chain` (endpoints inclusive) kept by the
/// recursive farthest-point pass.
fn simplify_chain(chain: &[(f64, f64)], tolerance: f64, keep: &mut [bool]) {
    let mut stack = vec![(0usize, chain.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (mut far, mut far_d) = (lo, -1.0);
        for i in lo + 1..hi {
            let d = point_segment_distance(chain[i], chain[lo], chain[hi]);
            if d > far_d {
                far = i;
                far_d = d;
            }
        }
        if far_d > tolerance {
            keep[far] = true;
            stack.push((lo, far));
            stack.push((far, hi));
        }
    }
}

/// Douglas-Peucker simplification of a closed contour. The two anchors
/// are a diameter pair so the result does not depend on where the vertex
/// list starts.
pub fn simplify_closed(vertices: &[(f64, f64)], tolerance: f64) -> Vec<(f64, f64)> {
    let n = vertices.len();
    if n <= 3 {
        return vertices.to_vec();
    }
    let dist = |i: usize, j: usize| {
        let (a, b) = (vertices[i], vertices[j]);
        (a.0 - b.0).hypot(a.1 - b.1)
    };
    let farthest_from = |i: usize| {
        (0..n)
            .max_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)))
            .unwrap_or(0)
    };
    let a = farthest_from(0);
    let b = farthest_from(a);
    let (a, b) = if a < b { (a, b) } else { (b, a) };

    let first: Vec<_> = vertices[a..=b].to_vec();
    let second: Vec<_> = vertices[b..].iter().chain(&vertices[..=a]).copied().collect();
    let mut keep_first = vec![false; first.len()];
    let mut keep_second = vec![false; second.len()];
    keep_first[0] = true;
    keep_second[0] = true;
    simplify_chain(&first, tolerance, &mut keep_first);
    simplify_chain(&second, tolerance, &mut keep_second);

    let mut out: Vec<(f64, f64)> = first
        .iter()
        .zip(&keep_first)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect();
    out.extend(
        second
            .iter()
            .zip(&keep_second)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p),
    );
    out
}

fn interior_angles_deg(v: &[(f64, f64)]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let p = v[(i + n - 1) % n];
            let c = v[i];
            let q = v[(i + 1) % n];
            let (ux, uy) = (p.0 - c.0, p.1 - c.1);
            let (wx, wy) = (q.0 - c.0, q.1 - c.1);
            let cos = (ux * wx + uy * wy) / (ux.hypot(uy) * wx.hypot(wy));
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect()
}

/// Coefficient of variation of vertex distances to the polygon centroid.
pub fn radius_cv(p: &Polygon) -> f64 {
    let (cx, cy) = p.centroid();
    let radii: Vec<f64> = p.vertices.iter().map(|&(x, y)| (x - cx).hypot(y - cy)).collect();
    let n = radii.len() as f64;
    let mean = radii.iter().sum::<f64>() / n;
    let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn classify_shape(p: &Polygon, t: &ShapeThresholds) -> Result<ShapeClass> {
    if let Some(problem) = p.defect() {
        return Err(Error::Geometry(problem));
    }
    let simplified = simplify_closed(&p.vertices, t.simplify_fraction * p.diameter());
    let n = simplified.len();
    if n >= t.circular_min_vertices {
        let simple = Polygon {
            vertices: simplified.clone(),
        };
        if radius_cv(&simple) < t.circular_max_radius_cv {
            return Ok(ShapeClass::Circular);
        }
    }
    match n {
        3 => Ok(ShapeClass::Triangular),
        4 => {
            let right = interior_angles_deg(&simplified)
                .iter()
                .all(|a| (a - 90.0).abs() <= t.right_angle_tolerance_deg);
            if !right {
                return Ok(ShapeClass::Irregular);
            }
            let sides: Vec<f64> = (0..4)
                .map(|i| {
                    let (a, b) = (simplified[i], simplified[(i + 1) % 4]);
                    (a.0 - b.0).hypot(a.1 - b.1)
                })
                .collect();
            let max = sides.iter().cloned().fold(f64::MIN, f64::max);
            let min = sides.iter().cloned().fold(f64::MAX, f64::min);
            if max / min < t.square_max_side_ratio {
                Ok(ShapeClass::Square)
            } else {
                Ok(ShapeClass::Rectangular)
            }
        }
        _ => Ok(ShapeClass::Irregular),
    }
}
