use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerkit::offset_estimator::max_relative_grad_error;
use steerkit::steering::SteeringField;
use steerkit::{
    build_offset_dataset, compute_general_field, train, AffineMap, Dims, EditMode, EditPlan, OffsetSample,
    PairedActivations, Role, TrainConfig, VectorPair,
};

fn random_pairs(dims: Dims, n: u64, seed: u64) -> PairedActivations {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = (0..dims.cells())
        .map(|_| {
            (0..n)
                .map(|id| VectorPair {
                    sample_id: id,
                    trusted: (0..dims.dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                    untrusted: (0..dims.dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                })
                .collect()
        })
        .collect();
    PairedActivations {
        dims,
        trusted_role: Some(Role::TrustedQuery),
        cells,
    }
}

#[test]
fn offsets_plus_field_rebuild_the_difference() {
    let dims = Dims::new(2, 2, 5).unwrap();
    let pairs = random_pairs(dims, 30, 4);
    let field = compute_general_field(&pairs).unwrap();
    let data = build_offset_dataset(&pairs, &field).unwrap();
    assert_eq!(data.len(), 120);
    for s in &data {
        let p = pairs.cell(s.layer, s.head).iter().find(|p| p.untrusted == s.z).unwrap();
        let d = field.vector(s.layer, s.head);
        for i in 0..dims.dim {
            let want = p.trusted[i] - p.untrusted[i];
            // Two f32 roundings separate o + d from the direct difference.
            assert!((s.o[i] + d[i] - want).abs() <= 4.0 * f32::EPSILON * want.abs().max(d[i].abs()).max(1.0));
        }
    }
}

#[test]
fn training_is_deterministic() {
    let dims = Dims::new(1, 3, 4).unwrap();
    let pairs = random_pairs(dims, 40, 9);
    let field = compute_general_field(&pairs).unwrap();
    let plan = EditPlan::new(&field, 2, 7.0, EditMode::FasPlusQao).unwrap();
    let data = build_offset_dataset(&pairs, &field).unwrap();
    let cfg = TrainConfig { epochs: 20, seed: 3, ..TrainConfig::default() };
    let a = train(&data, &plan, &cfg).unwrap();
    let b = train(&data, &plan, &cfg).unwrap();
    for (x, y) in a.heads.iter().zip(&b.heads) {
        let bits = |m: &AffineMap| m.w.iter().chain(&m.b).map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.map), bits(&y.map));
    }
}

#[test]
fn query_role_is_required() {
    let dims = Dims::new(1, 1, 2).unwrap();
    let mut pairs = random_pairs(dims, 3, 1);
    pairs.trusted_role = Some(Role::TrustedGeneral);
    let field = SteeringField::from_vectors(dims, vec![vec![0.0, 0.0]], 1).unwrap();
    assert!(build_offset_dataset(&pairs, &field).is_err());
}

fn arb_map(dim: usize) -> impl Strategy<Value = AffineMap> {
    (prop::collection::vec(-2.0f64..2.0, dim * dim), prop::collection::vec(-2.0f64..2.0, dim)).prop_map(move |(w, b)| AffineMap { dim, w, b })
}

proptest! {
    #[test]
    fn prediction_is_affine(map in arb_map(4), z1 in prop::collection::vec(-3.0f64..3.0, 4), z2 in prop::collection::vec(-3.0f64..3.0, 4), a in -2.0f64..2.0) {
        let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let lhs = map.apply(&mix);
        let (p1, p2) = (map.apply(&z1), map.apply(&z2));
        for i in 0..4 {
            let rhs = a * p1[i] + (1.0 - a) * p2[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn gradient_matches_differences(map in arb_map(3), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..10)
            .map(|_| ((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(), (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .collect();
        prop_assert!(max_relative_grad_error(&map, &data, 1e-5, seed) < 1e-4);
    }
}

#[test]
fn single_head_samples_only_train_that_head() {
    let dims = Dims::new(1, 2, 2).unwrap();
    let field = SteeringField::from_vectors(dims, vec![vec![1.0, 0.0], vec![0.5, 0.0]], 1).unwrap();
    let plan = EditPlan::new(&field, 1, 1.0, EditMode::FasPlusQao).unwrap();
    let data: Vec<OffsetSample> = (0..8)
        .map(|i| OffsetSample { layer: 0, head: (i % 2) as usize, z: vec![i as f32, 1.0], o: vec![1.0, -1.0] })
        .collect();
    let est = train(&data, &plan, &TrainConfig::default()).unwrap();
    assert_eq!(est.cells(), vec![(0, 0)]);
}
