//! General steering field, head ranking, activation edits and 1-D PCA.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_store::{self, ActivationRecord, Dims, PairedActivations, Role};
use crate::error::{Error, Result};
use crate::offset_estimator::OffsetEstimator;

/// Mean trusted-minus-untrusted vector per (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringField {
    pub dims: Dims,
    /// Indexed by `layer * heads + head`.
    pub vectors: Vec<Vec<f32>>,
    pub magnitudes: Vec<f64>,
    pub pair_count: usize,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl SteeringField {
    pub fn from_vectors(dims: Dims, vectors: Vec<Vec<f32>>, pair_count: usize) -> Result<SteeringField> {
        if vectors.len() != dims.cells() {
            return Err(Error::DimMismatch(format!(
                "{} vectors for {} cells",
                vectors.len(),
                dims.cells()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dims.dim) {
            return Err(Error::DimMismatch(format!(
                "vector of length {} in field with D={}",
                v.len(),
                dims.dim
            )));
        }
        if pair_count == 0 {
            return Err(Error::InvalidArgument("field pair_count must be at least 1".into()));
        }
        let magnitudes = vectors.iter().map(|v| norm(v)).collect();
        Ok(SteeringField {
            dims,
            vectors,
            magnitudes,
            pair_count,
        })
    }

    pub fn vector(&self, layer: usize, head: usize) -> &[f32] {
        &self.vectors[self.dims.cell_index(layer, head)]
    }

    pub fn magnitude(&self, layer: usize, head: usize) -> f64 {
        self.magnitudes[self.dims.cell_index(layer, head)]
    }

    /// Records in container order (role 3; every `sample_id` holds `pair_count`).
    pub fn to_records(&self) -> Vec<ActivationRecord> {
        (0..self.dims.layers)
            .flat_map(|l| (0..self.dims.heads).map(move |k| (l, k)))
            .map(|(l, k)| ActivationRecord {
                sample_id: self.pair_count as u64,
                role: Role::SteeringVector,
                layer: l,
                head: k,
                vector: self.vector(l, k).to_vec(),
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<u64> {
        activation_store::write_records(path, self.dims, &self.to_records())
    }

    pub fn read(path: &Path) -> Result<SteeringField> {
        let (header, records) = activation_store::read_records(path)?;
        let dims = header.dims;
        let origin = path.display().to_string();
        let mut vectors: Vec<Option<Vec<f32>>> = vec![None; dims.cells()];
        for (i, r) in records.iter().enumerate() {
            if r.role != Role::SteeringVector {
                return Err(Error::malformed(&origin, format!("record {i} is not a steering vector")));
            }
            let slot = &mut vectors[dims.cell_index(r.layer, r.head)];
            if slot.is_some() {
                return Err(Error::malformed(
                    &origin,
                    format!("record {i} repeats cell ({}, {})", r.layer, r.head),
                ));
            }
            *slot = Some(r.vector.clone());
        }
        let pair_count = records.first().map_or(0, |r| r.sample_id as usize);
        let vectors = vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    Error::malformed(
                        &origin,
                        format!("missing cell ({}, {})", i / dims.heads, i % dims.heads),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SteeringField::from_vectors(dims, vectors, pair_count)
            .map_err(|e| Error::malformed(&origin, e.to_string()))
    }
}

/// Mean of `z_trusted - z_untrusted` per cell, accumulated in f64 in
/// sample-id order.
pub fn compute_general_field(pairs: &PairedActivations) -> Result<SteeringField> {
    let dims = pairs.dims;
    if let Some(i) = pairs.cells.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCell {
            layer: i / dims.heads,
            head: i % dims.heads,
        });
    }
    let vectors: Vec<Vec<f32>> = pairs
        .cells
        .par_iter()
        .map(|cell| {
            let mut order: Vec<usize> = (0..cell.len()).collect();
            order.sort_by_key(|&i| cell[i].sample_id);
            let mut acc = vec![0f64; dims.dim];
            for i in order {
                let p = &cell[i];
                for ((a, &t), &u) in acc.iter_mut().zip(&p.trusted).zip(&p.untrusted) {
                    *a += f64::from(t) - f64::from(u);
                }
            }
            let n = cell.len() as f64;
            acc.into_iter().map(|a| (a / n) as f32).collect()
        })
        .collect();
    SteeringField::from_vectors(dims, vectors, pairs.samples_per_cell())
}

/// The `k` cells with the largest magnitude, descending; ties by (layer, head).
pub fn rank_heads(field: &SteeringField, k: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..field.dims.cells()).collect();
    order.sort_by(|&a, &b| field.magnitudes[b].total_cmp(&field.magnitudes[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| (i / field.dims.heads, i % field.dims.heads))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    FasOnly,
    FasPlusQao,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::FasOnly => "fas_only",
            EditMode::FasPlusQao => "fas_plus_qao",
        }
    }
}

/// Default head count: 64 when the model has that many heads, else a quarter.
pub fn default_k(dims: Dims) -> usize {
    let cells = dims.cells();
    if cells >= 64 {
        64
    } else {
        cells.div_ceil(4)
    }
}

pub const DEFAULT_ALPHA: f32 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub alpha: f32,
    #[serde(rename = "K")]
    pub k: usize,
    pub selected: Vec<(usize, usize)>,
    pub mode: EditMode,
}

impl EditPlan {
    /// Selects the top-`k` heads of `field`.
    pub fn new(field: &SteeringField, k: usize, alpha: f32, mode: EditMode) -> Result<EditPlan> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(EditPlan {
            alpha,
            k,
            selected: rank_heads(field, k),
            mode,
        })
    }

    pub fn with_alpha(&self, alpha: f32) -> EditPlan {
        EditPlan {
            alpha,
            ..self.clone()
        }
    }

    pub fn with_mode(&self, mode: EditMode) -> EditPlan {
        EditPlan {
            mode,
            ..self.clone()
        }
    }

    pub fn is_selected(&self, cell: (usize, usize)) -> bool {
        self.selected.contains(&cell)
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.selected.len() != self.k.min(dims.cells()) {
            return Err(Error::DimMismatch(format!(
                "plan selects {} heads, expected min(K={}, {})",
                self.selected.len(),
                self.k,
                dims.cells()
            )));
        }
        for &(l, k) in &self.selected {
            if l >= dims.layers || k >= dims.heads {
                return Err(Error::DimMismatch(format!(
                    "selected head ({l}, {k}) outside L={} H={}",
                    dims.layers, dims.heads
                )));
            }
        }
        let mut seen = self.selected.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.selected.len() {
            return Err(Error::InvalidArgument("plan selects a head twice".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, dims: Dims) -> Result<EditPlan> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: EditPlan =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path.display(), e.to_string()))?;
        plan.validate(dims)
            .map_err(|e| Error::malformed(path.display(), e.to_string()))?;
        Ok(plan)
    }
}

/// Edits `z` in place. Cells outside the plan and `alpha == 0` are no-ops.
pub fn apply_edit_in_place(
    z: &mut [f32],
    cell: (usize, usize),
    field: &SteeringField,
    plan: &EditPlan,
    estimator: Option<&OffsetEstimator>,
) -> Result<()> {
    let (l, k) = cell;
    if l >= field.dims.layers || k >= field.dims.heads {
        return Err(Error::DimMismatch(format!(
            "cell ({l}, {k}) outside L={} H={}",
            field.dims.layers, field.dims.heads
        )));
    }
    if z.len() != field.dims.dim {
        return Err(Error::DimMismatch(format!(
            "activation of length {} for D={}",
            z.len(),
            field.dims.dim
        )));
    }
    if plan.mode == EditMode::FasPlusQao && estimator.is_none() {
        return Err(Error::MissingEstimator);
    }
    if plan.alpha == 0.0 || !plan.is_selected(cell) {
        return Ok(());
    }
    let d = field.vector(l, k);
    let alpha = plan.alpha;
    match plan.mode {
        EditMode::FasOnly => {
            for (x, &di) in z.iter_mut().zip(d) {
                *x += alpha * di;
            }
        }
        EditMode::FasPlusQao => {
            let g = estimator.expect("checked above").predict(cell, z)?;
            for ((x, &di), gi) in z.iter_mut().zip(d).zip(g) {
                // A zero offset leaves the direction bitwise equal to d.
                let s = if gi == 0.0 { di } else { gi + di };
                *x += alpha * s;
            }
        }
    }
    Ok(())
}

pub fn apply_edit(
    z: &[f32],
    cell: (usize, usize),
    field: &SteeringField,
    plan: &EditPlan,
    estimator: Option<&OffsetEstimator>,
) -> Result<Vec<f32>> {
    let mut out = z.to_vec();
    apply_edit_in_place(&mut out, cell, field, plan, estimator)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca1d {
    pub projections: Vec<f64>,
    /// Share of total variance along the leading component.
    pub explained: f64,
    pub component: Vec<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `n x n`).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Projects mean-centered vectors onto their leading principal component.
/// The component's first nonzero loading is positive.
pub fn pca_project_1d(vectors: &[Vec<f64>]) -> Result<Pca1d> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::DimMismatch("PCA inputs must share a nonzero dimension".into()));
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for c in &centered {
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i * dim + j] /= n;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }
    let total: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let spread = vectors
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    if total <= 1e-24 * spread * spread {
        return Err(Error::DegenerateCovariance);
    }
    let (values, vecs) = jacobi_eigen(cov, dim);
    let lead = (0..dim)
        .max_by(|&a, &b| values[a].total_cmp(&values[b]).then(b.cmp(&a)))
        .expect("dim >= 1");
    let mut component: Vec<f64> = (0..dim).map(|r| vecs[r * dim + lead]).collect();
    let len = component.iter().map(|x| x * x).sum::<f64>().sqrt();
    component.iter_mut().for_each(|x| *x /= len);
    let tiny = 1e-12 * component.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = component.iter().find(|x| x.abs() > tiny) {
        if *first < 0.0 {
            component.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let projections = centered
        .iter()
        .map(|c| c.iter().zip(&component).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Pca1d {
        projections,
        explained: (values[lead] / total).clamp(0.0, 1.0),
        component,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_store::VectorPair;

    fn paired(dims: Dims, cells: Vec<Vec<VectorPair>>) -> PairedActivations {
        PairedActivations {
            dims,
            trusted_role: Some(Role::TrustedGeneral),
            cells,
        }
    }

    fn pair(id: u64, t: &[f32], u: &[f32]) -> VectorPair {
        VectorPair {
            sample_id: id,
            trusted: t.to_vec(),
            untrusted: u.to_vec(),
        }
    }

    #[test]
    fn hand_summed_field() {
        let dims = Dims::new(1, 1, 2).unwrap();
        let p = paired(
            dims,
            vec![vec![pair(0, &[1.0, 3.0], &[0.0, 1.0]), pair(1, &[2.0, 1.0], &[1.0, 0.0])]],
        );
        let f = compute_general_field(&p).unwrap();
        assert_eq!(f.vector(0, 0), &[1.0, 1.5]);
        assert!((f.magnitude(0, 0) - 1.5f64.hypot(1.0)).abs() < 1e-12);
        assert_eq!(f.pair_count, 2);
    }

    #[test]
    fn empty_cell_is_named() {
        let dims = Dims::new(1, 2, 1).unwrap();
        let p = paired(dims, vec![vec![pair(0, &[1.0], &[0.0])], vec![]]);
        assert!(matches!(
            compute_general_field(&p),
            Err(Error::EmptyCell { layer: 0, head: 1 })
        ));
    }

    fn field_with(mags: &[f32]) -> SteeringField {
        let dims = Dims::new(1, mags.len(), 1).unwrap();
        SteeringField::from_vectors(dims, mags.iter().map(|&m| vec![m]).collect(), 1).unwrap()
    }

    #[test]
    fn ranking_examples() {
        let f = field_with(&[0.1, 0.5, 0.3]);
        assert_eq!(rank_heads(&f, 2), vec![(0, 1), (0, 2)]);
        assert!(rank_heads(&f, 0).is_empty());
        assert_eq!(rank_heads(&f, 10).len(), 3);
        let tied = field_with(&[0.2, 0.2, 0.2]);
        assert_eq!(rank_heads(&tied, 2), vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn edit_examples() {
        let f = SteeringField::from_vectors(Dims::new(1, 2, 2).unwrap(), vec![vec![1.0, -1.0], vec![0.0, 0.0]], 1)
            .unwrap();
        let plan = EditPlan::new(&f, 1, 1.0, EditMode::FasOnly).unwrap();
        assert_eq!(plan.selected, vec![(0, 0)]);
        assert_eq!(apply_edit(&[0.0, 0.0], (0, 0), &f, &plan, None).unwrap(), vec![1.0, -1.0]);
        assert_eq!(apply_edit(&[0.5, 0.5], (0, 1), &f, &plan, None).unwrap(), vec![0.5, 0.5]);
        let zero = plan.with_alpha(0.0);
        let z = [-0.0f32, 3.25];
        let out = apply_edit(&z, (0, 0), &f, &zero, None).unwrap();
        assert_eq!(out[0].to_bits(), z[0].to_bits());
        assert!(matches!(
            apply_edit(&z, (0, 0), &f, &plan.with_mode(EditMode::FasPlusQao), None),
            Err(Error::MissingEstimator)
        ));
    }

    #[test]
    fn default_k_rule() {
        assert_eq!(default_k(Dims::new(4, 8, 16).unwrap()), 8);
        assert_eq!(default_k(Dims::new(32, 32, 128).unwrap()), 64);
        assert_eq!(default_k(Dims::new(1, 3, 2).unwrap()), 1);
    }

    #[test]
    fn pca_on_collinear_points() {
        let v = [1.0, -2.0, 0.5];
        let pts: Vec<Vec<f64>> = (0..6).map(|t| v.iter().map(|x| x * t as f64).collect()).collect();
        let p = pca_project_1d(&pts).unwrap();
        assert!((p.explained - 1.0).abs() < 1e-12);
        let scale = p.projections[1] - p.projections[0];
        for (t, y) in p.projections.iter().enumerate() {
            assert!((y - (p.projections[0] + scale * t as f64)).abs() < 1e-9);
        }
        assert!(p.component[0] > 0.0);
    }

    #[test]
    fn pca_explained_share() {
        // Two points are always collinear after centering.
        let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((pca_project_1d(&two).unwrap().explained - 1.0).abs() < 1e-12);
        let cross = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        assert!((pca_project_1d(&cross).unwrap().explained - 0.5).abs() < 1e-12);
        let same = vec![vec![2.0, 2.0]; 3];
        assert!(matches!(pca_project_1d(&same), Err(Error::DegenerateCovariance)));
    }

    #[test]
    fn field_and_plan_persist() {
        let dir = tempfile::tempdir().unwrap();
        let f = SteeringField::from_vectors(
            Dims::new(2, 2, 3).unwrap(),
            (0..4).map(|i| vec![i as f32, -0.5, 0.25 * i as f32]).collect(),
            17,
        )
        .unwrap();
        let fp = dir.path().join("field.actv");
        f.write(&fp).unwrap();
        assert_eq!(SteeringField::read(&fp).unwrap(), f);

        let plan = EditPlan::new(&f, 2, 7.0, EditMode::FasPlusQao).unwrap();
        let pp = dir.path().join("plan.json");
        plan.write(&pp).unwrap();
        let text = std::fs::read_to_string(&pp).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(json["K"], 2);
        assert_eq!(json["mode"], "fas_plus_qao");
        assert_eq!(json["selected"][0], serde_json::json!([1, 1]));
        assert_eq!(EditPlan::read(&pp, f.dims).unwrap(), plan);
    }
}
