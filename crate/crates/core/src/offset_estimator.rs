//! Query-adaptive offset estimator: one affine map `W z + b` per edited head,
//! fit by mini-batch gradient descent on mean squared error.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation_store::{self, ActivationRecord, Dims, PairedActivations, Role};
use crate::error::{Error, Result};
use crate::steering::{EditPlan, SteeringField};

/// Training target for one head: `o = (z* - z) - d`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSample {
    pub layer: usize,
    pub head: usize,
    pub z: Vec<f32>,
    pub o: Vec<f32>,
}

pub fn build_offset_dataset(query_pairs: &PairedActivations, field: &SteeringField) -> Result<Vec<OffsetSample>> {
    if query_pairs.dims != field.dims {
        return Err(Error::DimMismatch(format!(
            "pairs have dims {:?}, field has {:?}",
            query_pairs.dims, field.dims
        )));
    }
    if let Some(role) = query_pairs.trusted_role {
        if role != Role::TrustedQuery {
            return Err(Error::InvalidArgument(format!(
                "offset targets need trusted_query activations, got {role:?}"
            )));
        }
    }
    let dims = field.dims;
    let mut out = Vec::with_capacity(query_pairs.pair_count());
    for (i, cell) in query_pairs.cells.iter().enumerate() {
        let (l, k) = (i / dims.heads, i % dims.heads);
        let d = field.vector(l, k);
        for p in cell {
            let o = p
                .trusted
                .iter()
                .zip(&p.untrusted)
                .zip(d)
                .map(|((&t, &u), &di)| (t - u) - di)
                .collect();
            out.push(OffsetSample {
                layer: l,
                head: k,
                z: p.untrusted.clone(),
                o,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// `G(z) = W z + b`, `W` row-major `dim x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(dim: usize) -> AffineMap {
        AffineMap {
            dim,
            w: vec![0.0; dim * dim],
            b: vec![0.0; dim],
        }
    }

    pub fn identity(dim: usize) -> AffineMap {
        let mut m = AffineMap::zeros(dim);
        for i in 0..dim {
            m.w[i * dim + i] = 1.0;
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.dim * self.dim + self.dim
    }

    /// Flat parameter view: `W` then `b`.
    pub fn param(&self, i: usize) -> f64 {
        if i < self.w.len() {
            self.w[i]
        } else {
            self.b[i - self.w.len()]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.w.len();
        if i < n {
            &mut self.w[i]
        } else {
            &mut self.b[i - n]
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|r| {
                let row = &self.w[r * self.dim..(r + 1) * self.dim];
                row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.b[r]
            })
            .collect()
    }

    /// Mean over samples of `||G(z) - o||^2`.
    pub fn loss(&self, samples: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples
            .iter()
            .map(|(z, o)| self.apply(z).iter().zip(o).map(|(g, t)| (g - t) * (g - t)).sum::<f64>())
            .sum::<f64>()
            / samples.len() as f64
    }

    /// Loss and its gradient in the flat parameter order.
    pub fn loss_grad(&self, samples: &[(Vec<f64>, Vec<f64>)]) -> (f64, Vec<f64>) {
        let dim = self.dim;
        let mut grad = vec![0.0; self.param_count()];
        if samples.is_empty() {
            return (0.0, grad);
        }
        let scale = 2.0 / samples.len() as f64;
        let mut loss = 0.0;
        for (z, o) in samples {
            let g = self.apply(z);
            for r in 0..dim {
                let e = g[r] - o[r];
                loss += e * e;
                let s = scale * e;
                for (gw, zc) in grad[r * dim..(r + 1) * dim].iter_mut().zip(z) {
                    *gw += s * zc;
                }
                grad[dim * dim + r] += s;
            }
        }
        (loss / samples.len() as f64, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEstimator {
    pub cell: (usize, usize),
    pub map: AffineMap,
    /// Full-dataset loss after each epoch.
    pub loss_history: Vec<f64>,
}

impl HeadEstimator {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetEstimator {
    pub dims: Dims,
    pub heads: Vec<HeadEstimator>,
    pub seed: u64,
    pub epochs: usize,
}

impl OffsetEstimator {
    /// Zero maps for every selected head; predictions are exactly zero.
    pub fn zeros(dims: Dims, plan: &EditPlan) -> OffsetEstimator {
        OffsetEstimator {
            dims,
            heads: plan
                .selected
                .iter()
                .map(|&cell| HeadEstimator {
                    cell,
                    map: AffineMap::zeros(dims.dim),
                    loss_history: Vec::new(),
                })
                .collect(),
            seed: 0,
            epochs: 0,
        }
    }

    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.heads.iter().map(|h| h.cell).collect()
    }

    pub fn head(&self, cell: (usize, usize)) -> Option<&HeadEstimator> {
        self.heads.iter().find(|h| h.cell == cell)
    }

    pub fn head_mut(&mut self, cell: (usize, usize)) -> Option<&mut HeadEstimator> {
        self.heads.iter_mut().find(|h| h.cell == cell)
    }

    pub fn final_losses(&self) -> Vec<f64> {
        self.heads.iter().map(HeadEstimator::final_loss).collect()
    }

    pub fn covers(&self, plan: &EditPlan) -> bool {
        let mut a = self.cells();
        let mut b = plan.selected.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }

    /// `W z + b` for `cell`, computed in f64 and rounded to f32.
    pub fn predict(&self, cell: (usize, usize), z: &[f32]) -> Result<Vec<f32>> {
        let head = self.head(cell).ok_or(Error::UncoveredHead {
            layer: cell.0,
            head: cell.1,
        })?;
        if z.len() != head.map.dim {
            return Err(Error::DimMismatch(format!(
                "activation of length {} for D={}",
                z.len(),
                head.map.dim
            )));
        }
        let z64: Vec<f64> = z.iter().map(|&x| f64::from(x)).collect();
        Ok(head.map.apply(&z64).into_iter().map(|x| x as f32).collect())
    }

    /// Writes the JSON manifest at `manifest` and one container per head
    /// next to it, named by [`OffsetEstimator::blob_path`].
    pub fn write(&self, manifest: &Path) -> Result<()> {
        let m = Manifest {
            cells: self.cells(),
            dim: self.dims.dim,
            seed: self.seed,
            epochs: self.epochs,
            final_losses: self.final_losses(),
        };
        let text = serde_json::to_string_pretty(&m)?;
        std::fs::write(manifest, text + "\n").map_err(|e| Error::io(manifest, e))?;
        for h in &self.heads {
            let d = self.dims.dim;
            let mut records: Vec<ActivationRecord> = (0..d)
                .map(|r| ActivationRecord {
                    sample_id: r as u64,
                    role: Role::EstimatorRow,
                    layer: h.cell.0,
                    head: h.cell.1,
                    vector: h.map.w[r * d..(r + 1) * d].iter().map(|&x| x as f32).collect(),
                })
                .collect();
            records.push(ActivationRecord {
                sample_id: d as u64,
                role: Role::EstimatorRow,
                layer: h.cell.0,
                head: h.cell.1,
                vector: h.map.b.iter().map(|&x| x as f32).collect(),
            });
            activation_store::write_records(&Self::blob_path(manifest, h.cell), self.dims, &records)?;
        }
        Ok(())
    }

    pub fn blob_path(manifest: &Path, cell: (usize, usize)) -> PathBuf {
        let stem = manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "estimator".into());
        manifest.with_file_name(format!("{stem}.l{}h{}.actv", cell.0, cell.1))
    }

    pub fn read(manifest: &Path) -> Result<OffsetEstimator> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::malformed(manifest.display(), e.to_string()))?;
        if m.final_losses.len() != m.cells.len() {
            return Err(Error::malformed(
                manifest.display(),
                format!("{} cells but {} final losses", m.cells.len(), m.final_losses.len()),
            ));
        }
        let mut dims = None;
        let mut heads = Vec::with_capacity(m.cells.len());
        for (&cell, &loss) in m.cells.iter().zip(&m.final_losses) {
            let path = Self::blob_path(manifest, cell);
            let (header, records) = activation_store::read_records(&path)?;
            let origin = path.display().to_string();
            if header.dims.dim != m.dim {
                return Err(Error::malformed(&origin, format!("D={} but manifest says {}", header.dims.dim, m.dim)));
            }
            if *dims.get_or_insert(header.dims) != header.dims {
                return Err(Error::malformed(&origin, "header dims differ between heads"));
            }
            if records.len() != m.dim + 1 {
                return Err(Error::malformed(
                    &origin,
                    format!("expected {} rows, found {}", m.dim + 1, records.len()),
                ));
            }
            if let Some((i, _)) = records
                .iter()
                .enumerate()
                .find(|(i, r)| r.role != Role::EstimatorRow || r.cell() != cell || r.sample_id != *i as u64)
            {
                return Err(Error::malformed(&origin, format!("record {i} is not row {i} of head {cell:?}")));
            }
            let mut map = AffineMap::zeros(m.dim);
            for (r, rec) in records[..m.dim].iter().enumerate() {
                for (c, &x) in rec.vector.iter().enumerate() {
                    map.w[r * m.dim + c] = f64::from(x);
                }
            }
            map.b = records[m.dim].vector.iter().map(|&x| f64::from(x)).collect();
            heads.push(HeadEstimator {
                cell,
                map,
                loss_history: vec![loss],
            });
        }
        let dims = match dims {
            Some(d) => d,
            None => Dims::new(1, 1, m.dim.max(1))?,
        };
        Ok(OffsetEstimator {
            dims,
            heads,
            seed: m.seed,
            epochs: m.epochs,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    cells: Vec<(usize, usize)>,
    #[serde(rename = "D")]
    dim: usize,
    seed: u64,
    epochs: usize,
    final_losses: Vec<f64>,
}

fn widen(s: &OffsetSample) -> (Vec<f64>, Vec<f64>) {
    (
        s.z.iter().map(|&x| f64::from(x)).collect(),
        s.o.iter().map(|&x| f64::from(x)).collect(),
    )
}

fn cell_seed(seed: u64, cell: (usize, usize)) -> u64 {
    seed ^ ((cell.0 as u64) << 32 | cell.1 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn fit_head(cell: (usize, usize), dim: usize, data: &[(Vec<f64>, Vec<f64>)], cfg: &TrainConfig) -> Result<HeadEstimator> {
    let mut map = AffineMap::zeros(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.seed, cell));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (_, grad) = map.loss_grad(&batch);
            let nw = map.w.len();
            for (i, g) in grad.iter().enumerate() {
                let decay = if i < nw { cfg.weight_decay * map.w[i] } else { 0.0 };
                *map.param_mut(i) -= cfg.learning_rate * (g + decay);
            }
        }
        let loss = map.loss(data);
        if !loss.is_finite() || map.w.iter().chain(&map.b).any(|x| !x.is_finite()) {
            return Err(Error::DivergedLoss {
                layer: cell.0,
                head: cell.1,
                epoch,
            });
        }
        history.push(loss);
    }
    Ok(HeadEstimator {
        cell,
        map,
        loss_history: history,
    })
}

/// Trains one map per selected head of `plan`; heads train independently.
pub fn train(dataset: &[OffsetSample], plan: &EditPlan, cfg: &TrainConfig) -> Result<OffsetEstimator> {
    cfg.validate()?;
    let dim = match dataset.first() {
        Some(s) => s.z.len(),
        None => {
            let &(layer, head) = plan.selected.first().ok_or_else(|| {
                Error::InvalidArgument("plan selects no heads and the dataset is empty".into())
            })?;
            return Err(Error::EmptyHeadDataset { layer, head });
        }
    };
    if let Some(s) = dataset.iter().find(|s| s.z.len() != dim || s.o.len() != dim) {
        return Err(Error::DimMismatch(format!(
            "sample for ({}, {}) has lengths {}/{}, expected {dim}",
            s.layer,
            s.head,
            s.z.len(),
            s.o.len()
        )));
    }
    let per_head: Vec<((usize, usize), Vec<(Vec<f64>, Vec<f64>)>)> = plan
        .selected
        .iter()
        .map(|&cell| {
            let data: Vec<_> = dataset
                .iter()
                .filter(|s| (s.layer, s.head) == cell)
                .map(widen)
                .collect();
            (cell, data)
        })
        .collect();
    if let Some((cell, _)) = per_head.iter().find(|(_, d)| d.is_empty()) {
        return Err(Error::EmptyHeadDataset {
            layer: cell.0,
            head: cell.1,
        });
    }
    let heads = per_head
        .par_iter()
        .map(|(cell, data)| fit_head(*cell, dim, data, cfg))
        .collect::<Result<Vec<_>>>()?;
    let max_layer = plan.selected.iter().map(|c| c.0).max().unwrap_or(0);
    let max_head = plan.selected.iter().map(|c| c.1).max().unwrap_or(0);
    Ok(OffsetEstimator {
        dims: Dims::new(max_layer + 1, max_head + 1, dim)?,
        heads,
        seed: cfg.seed,
        epochs: cfg.epochs,
    })
}

/// Like [`train`] but records the model geometry in the estimator.
pub fn train_for(dims: Dims, dataset: &[OffsetSample], plan: &EditPlan, cfg: &TrainConfig) -> Result<OffsetEstimator> {
    plan.validate(dims)?;
    if let Some(s) = dataset.iter().find(|s| s.z.len() != dims.dim) {
        return Err(Error::DimMismatch(format!(
            "sample for ({}, {}) has length {}, expected D={}",
            s.layer,
            s.head,
            s.z.len(),
            dims.dim
        )));
    }
    let mut est = train(dataset, plan, cfg)?;
    est.dims = dims;
    Ok(est)
}

/// Largest relative error between the analytic loss gradient and central
/// differences, over 32 randomly chosen parameters of `cell`'s map.
pub fn grad_check(
    est: &OffsetEstimator,
    cell: (usize, usize),
    samples: &[OffsetSample],
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    let head = est.head(cell).ok_or(Error::UncoveredHead {
        layer: cell.0,
        head: cell.1,
    })?;
    let data: Vec<_> = samples.iter().map(widen).collect();
    Ok(max_relative_grad_error(&head.map, &data, epsilon, seed))
}

pub fn max_relative_grad_error(map: &AffineMap, data: &[(Vec<f64>, Vec<f64>)], epsilon: f64, seed: u64) -> f64 {
    let (_, analytic) = map.loss_grad(data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = 32.min(map.param_count());
    let mut probe = map.clone();
    let mut worst = 0.0f64;
    for _ in 0..picks {
        let i = rng.gen_range(0..map.param_count());
        let orig = map.param(i);
        *probe.param_mut(i) = orig + epsilon;
        let up = probe.loss(data);
        *probe.param_mut(i) = orig - epsilon;
        let down = probe.loss(data);
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-10);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_store::VectorPair;
    use crate::steering::EditMode;

    fn plan_for(cells: &[(usize, usize)]) -> EditPlan {
        EditPlan {
            alpha: 1.0,
            k: cells.len(),
            selected: cells.to_vec(),
            mode: EditMode::FasPlusQao,
        }
    }

    #[test]
    fn offset_arithmetic() {
        let dims = Dims::new(1, 1, 2).unwrap();
        let pairs = PairedActivations {
            dims,
            trusted_role: Some(Role::TrustedQuery),
            cells: vec![vec![VectorPair {
                sample_id: 3,
                trusted: vec![2.0, 2.0],
                untrusted: vec![1.0, 1.0],
            }]],
        };
        let field = SteeringField::from_vectors(dims, vec![vec![0.5, 0.5]], 1).unwrap();
        let ds = build_offset_dataset(&pairs, &field).unwrap();
        assert_eq!(ds[0].o, vec![0.5, 0.5]);
        assert_eq!(ds[0].z, vec![1.0, 1.0]);
    }

    #[test]
    fn predict_identity_and_zero() {
        let dims = Dims::new(1, 1, 3).unwrap();
        let mut est = OffsetEstimator::zeros(dims, &plan_for(&[(0, 0)]));
        assert_eq!(est.predict((0, 0), &[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
        est.head_mut((0, 0)).unwrap().map = AffineMap::identity(3);
        assert_eq!(est.predict((0, 0), &[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        assert!(matches!(
            est.predict((0, 1), &[0.0; 3]),
            Err(Error::UncoveredHead { layer: 0, head: 1 })
        ));
    }

    #[test]
    fn single_sample_is_interpolated() {
        let s = OffsetSample {
            layer: 0,
            head: 0,
            z: vec![1.0, -0.8, 0.6],
            o: vec![1.0, -0.5, 0.25],
        };
        let est = train(&[s], &plan_for(&[(0, 0)]), &TrainConfig::default()).unwrap();
        assert!(est.heads[0].final_loss() <= 1e-6, "{}", est.heads[0].final_loss());
    }

    #[test]
    fn zero_targets_stay_zero() {
        let ds: Vec<_> = (0..40)
            .map(|i| OffsetSample {
                layer: 0,
                head: 0,
                z: vec![i as f32 * 0.1, 1.0 - i as f32 * 0.05],
                o: vec![0.0, 0.0],
            })
            .collect();
        let est = train(&ds, &plan_for(&[(0, 0)]), &TrainConfig::default()).unwrap();
        let m = &est.heads[0].map;
        assert!(m.w.iter().chain(&m.b).all(|x| x.abs() <= 1e-3));
    }

    #[test]
    fn missing_head_data_is_named() {
        let s = OffsetSample {
            layer: 0,
            head: 0,
            z: vec![1.0],
            o: vec![1.0],
        };
        assert!(matches!(
            train(&[s], &plan_for(&[(0, 0), (1, 2)]), &TrainConfig::default()),
            Err(Error::EmptyHeadDataset { layer: 1, head: 2 })
        ));
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let map = AffineMap::identity(2);
        let data = vec![(vec![1.0, 2.0], vec![1.0, 2.0]), (vec![-1.0, 0.5], vec![-1.0, 0.5])];
        let (loss, grad) = map.loss_grad(&data);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= 1e-8);
    }

    #[test]
    fn gradient_sign_predicts_loss_change() {
        let mut map = AffineMap::identity(2);
        map.w[1] = 0.3;
        let data = vec![(vec![1.0, 2.0], vec![1.0, 2.0])];
        let (base, grad) = map.loss_grad(&data);
        let mut moved = map.clone();
        moved.w[1] = 0.6;
        assert!(grad[1] > 0.0);
        assert!(moved.loss(&data) > base);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(2, 2, 2).unwrap();
        let mut est = OffsetEstimator::zeros(dims, &plan_for(&[(1, 0), (0, 1)]));
        est.seed = 9;
        est.epochs = 3;
        est.heads[0].map.w = vec![0.5, -1.0, 0.25, 2.0];
        est.heads[0].map.b = vec![1.5, -0.75];
        est.heads[0].loss_history = vec![0.125];
        est.heads[1].loss_history = vec![0.5];
        let path = dir.path().join("est.json");
        est.write(&path).unwrap();
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(json["D"], 2);
        assert_eq!(json["cells"], serde_json::json!([[1, 0], [0, 1]]));
        assert!(OffsetEstimator::blob_path(&path, (1, 0)).exists());
        assert_eq!(OffsetEstimator::read(&path).unwrap(), est);
    }
}
