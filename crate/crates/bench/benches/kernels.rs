use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerkit::activation_store::{decode, encode};
use steerkit::harness::model::{EditHook, Hook, LogitRows, Sequence, ToyModel, ToyModelConfig};
use steerkit::{
    apply_edit, compute_general_field, ActivationRecord, Dims, EditMode, EditPlan, OffsetEstimator,
    PairedActivations, Role, SteeringField, VectorPair,
};

const DIMS: (usize, usize, usize) = (4, 8, 16);

fn dims() -> Dims {
    Dims::new(DIMS.0, DIMS.1, DIMS.2).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn pairs(n: u64) -> PairedActivations {
    let dims = dims();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cells = (0..dims.cells())
        .map(|_| {
            (0..n)
                .map(|sample_id| VectorPair {
                    sample_id,
                    trusted: random_vec(&mut rng, dims.dim),
                    untrusted: random_vec(&mut rng, dims.dim),
                })
                .collect()
        })
        .collect();
    PairedActivations { dims, trusted_role: Some(Role::TrustedGeneral), cells }
}

fn steering(seed: u64) -> (SteeringField, EditPlan, OffsetEstimator) {
    let dims = dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..dims.cells()).map(|_| random_vec(&mut rng, dims.dim)).collect();
    let field = SteeringField::from_vectors(dims, vectors, 1).unwrap();
    let plan = EditPlan::new(&field, 8, 7.0, EditMode::FasPlusQao).unwrap();
    let mut est = OffsetEstimator::zeros(dims, &plan);
    for h in &mut est.heads {
        h.map.w.iter_mut().for_each(|w| *w = rng.gen_range(-0.1..0.1));
    }
    (field, plan, est)
}

fn field(c: &mut Criterion) {
    let p = pairs(500);
    c.bench_function("general_field_500_pairs", |b| b.iter(|| compute_general_field(black_box(&p)).unwrap()));
}

fn edit(c: &mut Criterion) {
    let (field, plan, est) = steering(2);
    let z = random_vec(&mut ChaCha8Rng::seed_from_u64(3), DIMS.2);
    let cell = plan.selected[0];
    c.bench_function("apply_edit_fas_plus_qao", |b| {
        b.iter(|| apply_edit(black_box(&z), cell, &field, &plan, Some(&est)).unwrap())
    });
}

fn actv(c: &mut Criterion) {
    let dims = dims();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records: Vec<ActivationRecord> = (0..10_000)
        .map(|i| ActivationRecord {
            sample_id: i / dims.cells() as u64,
            role: Role::Untrusted,
            layer: (i as usize / dims.heads) % dims.layers,
            head: i as usize % dims.heads,
            vector: random_vec(&mut rng, dims.dim),
        })
        .collect();
    let bytes = encode(dims, &records).unwrap();
    c.bench_function("actv_encode_10k", |b| b.iter(|| encode(dims, black_box(&records)).unwrap()));
    c.bench_function("actv_decode_10k", |b| b.iter(|| decode(black_box(&bytes), "bench").unwrap()));
}

fn forward(c: &mut Criterion) {
    let model = ToyModel::new(ToyModelConfig { vocab: 135, seed: 5, ..ToyModelConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prompts: Vec<Vec<u32>> = (0..64).map(|_| (0..30).map(|_| rng.gen_range(0..135)).collect()).collect();
    let (field, plan, est) = steering(7);
    let hook = Hook::editing(EditHook { field: &field, plan: &plan, estimator: Some(&est) });
    let mut group = c.benchmark_group("toy_forward_64x30");
    for (name, h) in [("plain", None), ("edited", Some(&hook))] {
        group.bench_function(name, |b| {
            b.iter_batched(
                || prompts.iter().map(|p| Sequence::prompt(p)).collect::<Vec<_>>(),
                |seqs| model.forward(&seqs, h, LogitRows::Last).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, field, edit, actv, forward);
criterion_main!(benches);
