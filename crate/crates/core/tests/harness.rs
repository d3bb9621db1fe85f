use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerkit::harness::eval::{existence_questions, score_discriminative};
use steerkit::harness::model::{EditHook, Hook, LogitRows, Pooling, Sequence, Tensor, ToyModel, ToyModelConfig};
use steerkit::harness::pipeline::{capture_prompts, ExperimentConfig};
use steerkit::harness::tokenizer::{prompt, Context, Vocab};
use steerkit::harness::train::{train_model, HarnessTrainConfig};
use steerkit::harness::world::{build_world, PriorRule, WorldConfig};
use steerkit::steering::SteeringField;
use steerkit::{read_records, write_records, Answer, EditMode, EditPlan, Error, Role};

fn small_world(seed: u64, scenes: usize) -> steerkit::harness::world::World {
    build_world(seed, &WorldConfig { num_scenes: scenes, ..WorldConfig::default() }).unwrap()
}

fn random_model(vocab: &Vocab, seed: u64) -> ToyModel {
    ToyModel::new(ToyModelConfig {
        vocab: vocab.len(),
        seed,
        composed: vocab.composed_tokens(),
        ..ToyModelConfig::default()
    })
    .unwrap()
}

#[test]
fn worlds_are_deterministic() {
    let a = small_world(3, 100);
    let b = small_world(3, 100);
    assert_eq!(a.scenes, b.scenes);
    assert_eq!(a.facts, b.facts);
    assert_ne!(a.scenes, small_world(4, 100).scenes);
}

#[test]
fn prior_frequency_and_conflict_definition() {
    let cfg = WorldConfig {
        num_scenes: 1000,
        prior_table: vec![PriorRule::new("ski", "snowboard", 0.9)],
        ..WorldConfig::default()
    };
    let world = build_world(17, &cfg).unwrap();
    let with_ski: Vec<_> = world.scenes.iter().filter(|s| !s.prior_conflict && s.contains("ski")).collect();
    let both = with_ski.iter().filter(|s| s.contains("snowboard")).count();
    let rate = both as f64 / with_ski.len() as f64;
    assert!((rate - 0.9).abs() <= 0.05, "co-occurrence {rate} over {} scenes", with_ski.len());
    let conflicts: Vec<_> = world.scenes.iter().filter(|s| s.prior_conflict).collect();
    let share = conflicts.len() as f64 / world.len() as f64;
    assert!((share - 0.3).abs() < 0.05);
    assert!(conflicts.iter().all(|s| s.contains("ski") && !s.contains("snowboard")));
    assert!(world.scenes.iter().all(|s| !s.objects.is_empty()));
}

#[test]
fn oracle_and_constant_answers() {
    let world = small_world(5, 200);
    let qs = existence_questions(&world, 4, 0).unwrap();
    let oracle: Vec<Answer> = qs.iter().map(|q| q.gold).collect();
    let r = score_discriminative(&world, &qs, &oracle).unwrap();
    assert_eq!((r.overall.accuracy, r.overall.f1), (1.0, 1.0));
    // Two questions per scene are one present and one absent object.
    let qs = existence_questions(&world, 2, 0).unwrap();
    assert_eq!(qs.iter().filter(|q| q.gold.is_yes()).count() * 2, qs.len());
    let constant = vec![Answer::Yes; qs.len()];
    let r = score_discriminative(&world, &qs, &constant).unwrap();
    assert_eq!(r.overall.accuracy, 0.5);
}

#[test]
fn edit_orthogonal_to_output_projection_is_invisible() {
    let world = small_world(1, 20);
    let vocab = Vocab::for_world(&world);
    let mut model = random_model(&vocab, 2);
    let dims = model.dims();
    let (d, width) = (dims.dim, model.config.width());
    let (layer, head) = (1, 3);
    // Replace the head's W_o slice by U V with U of rank D - 2, then edit
    // along a vector orthogonal to U's columns.
    let rank = d - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u: Vec<f32> = (0..d * rank).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let v: Vec<f32> = (0..rank * width).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let wo = model.tensor_mut(Tensor::Wo(layer));
    for r in 0..d {
        for c in 0..width {
            wo[(head * d + r) * width + c] = (0..rank).map(|k| u[r * rank + k] * v[k * width + c]).sum();
        }
    }
    let cols: Vec<Vec<f64>> = (0..rank).map(|k| (0..d).map(|r| f64::from(u[r * rank + k])).collect()).collect();
    let mut x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).sin()).collect();
    // Gram-Schmidt against U's columns, twice for stability.
    for _ in 0..2 {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in &cols {
            let mut e = c.clone();
            for b in &basis {
                let p: f64 = e.iter().zip(b).map(|(a, b)| a * b).sum();
                e.iter_mut().zip(b).for_each(|(a, b)| *a -= p * b);
            }
            let n = e.iter().map(|a| a * a).sum::<f64>().sqrt();
            basis.push(e.into_iter().map(|a| a / n).collect());
        }
        for b in &basis {
            let p: f64 = x.iter().zip(b).map(|(a, b)| a * b).sum();
            x.iter_mut().zip(b).for_each(|(a, b)| *a -= p * b);
        }
    }
    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut vectors = vec![vec![0.0f32; d]; dims.cells()];
    vectors[dims.cell_index(layer, head)] = x.iter().map(|a| (a / norm) as f32).collect();
    let field = SteeringField::from_vectors(dims, vectors, 1).unwrap();
    let plan = EditPlan::new(&field, 1, 3.0, EditMode::FasOnly).unwrap();
    assert_eq!(plan.selected, vec![(layer, head)]);
    let hook = Hook::editing(EditHook { field: &field, plan: &plan, estimator: None });

    let scene = &world.scenes[0];
    let p = prompt(&vocab, Context::Image(scene), "Is there a dog in the image?");
    let seqs = [Sequence::prompt(&p)];
    let plain = model.forward(&seqs, None, LogitRows::All).unwrap();
    let edited = model.forward(&seqs, Some(&hook), LogitRows::All).unwrap();
    let worst = plain.logits.iter().zip(&edited.logits).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1e-5, "max logit change {worst}");

    // A generic direction does change the logits.
    let mut vectors = vec![vec![0.0f32; d]; dims.cells()];
    vectors[dims.cell_index(layer, head)] = cols[0].iter().map(|&a| a as f32).collect();
    let field = SteeringField::from_vectors(dims, vectors, 1).unwrap();
    let hook = Hook::editing(EditHook { field: &field, plan: &plan, estimator: None });
    let moved = model.forward(&seqs, Some(&hook), LogitRows::All).unwrap();
    assert!(plain.logits.iter().zip(&moved.logits).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn captures_reproduce_through_the_container() {
    let world = small_world(2, 12);
    let vocab = Vocab::for_world(&world);
    let model = random_model(&vocab, 4);
    let prompts: Vec<Vec<u32>> = world
        .scenes
        .iter()
        .map(|s| prompt(&vocab, Context::Image(s), "Describe this image."))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.actv");
    let records = capture_prompts(&model, &prompts, Role::Untrusted, 0, Pooling::LastToken).unwrap();
    assert_eq!(records.len(), prompts.len() * model.dims().cells());
    write_records(&path, model.dims(), &records).unwrap();
    let (header, stored) = read_records(&path).unwrap();
    assert_eq!(header.dims, model.config.dims());
    let again = capture_prompts(&model, &prompts, Role::Untrusted, 0, Pooling::LastToken).unwrap();
    assert_eq!(stored, again);
    // Batch composition does not matter.
    let single = capture_prompts(&model, &prompts[3..4], Role::Untrusted, 3, Pooling::LastToken).unwrap();
    let cells = model.dims().cells();
    assert_eq!(single, stored[3 * cells..4 * cells].to_vec());
    let hook = Hook::capture_all(model.dims(), Pooling::MeanTokens);
    let out = model.forward(&[Sequence::prompt(&prompts[0])], Some(&hook), LogitRows::Last).unwrap();
    assert_eq!(out.captures[0].len(), cells);
    assert!(out.captures[0].iter().all(|c| c.vector.len() == model.dims().dim));
}

#[test]
fn overlong_prompt_is_rejected() {
    let world = small_world(2, 4);
    let vocab = Vocab::for_world(&world);
    let model = random_model(&vocab, 4);
    let long = vec![0u32; 200];
    let err = model.forward(&[Sequence::prompt(&long)], None, LogitRows::Last).unwrap_err();
    assert!(matches!(err, Error::SeqTooLong { .. }), "{err:?}");
}

#[test]
fn training_is_deterministic() {
    let world = small_world(6, 60);
    let vocab = Vocab::for_world(&world);
    let cfg = HarnessTrainConfig { epochs: 1, head_dropout: 0.25, ..HarnessTrainConfig::default() };
    let mc = ToyModelConfig { vocab: vocab.len(), seed: 6, composed: vocab.composed_tokens(), ..ToyModelConfig::default() };
    let (a, la) = train_model(&mc, &world, &vocab, &cfg).unwrap();
    let (b, lb) = train_model(&mc, &world, &vocab, &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!((la.epoch_losses, la.steps), (lb.epoch_losses, lb.steps));
    assert!(ExperimentConfig::default().validate().is_ok());
}
