//! Biased training corpus and the Adam training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Sequence, ToyModel, ToyModelConfig};
use super::tokenizer::{self, prompt, Context, Vocab};
use super::world::World;
use crate::error::{Error, Result};
use crate::textualizer::{compose_description, query_focus, Backend, FactualDescription, Question, DESCRIBE_PROMPT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    /// Probability of dropping a whole head output per sequence and layer.
    pub head_dropout: f64,
    /// Chance that an image-mode absent question on a scene with an unmet
    /// prior asks about the prior's object.
    pub partner_question_rate: f64,
}

impl Default for HarnessTrainConfig {
    fn default() -> Self {
        HarnessTrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 3e-3,
            warmup_steps: 50,
            grad_clip: 1.0,
            head_dropout: 0.25,
            partner_question_rate: 0.5,
        }
    }
}

impl HarnessTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::InvalidArgument("head_dropout must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.partner_question_rate) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised sequence: loss on every token after the prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl Example {
    fn new(mut prompt: Vec<u32>, answer: &[u32], eos: u32) -> Example {
        let prompt_len = prompt.len();
        prompt.extend_from_slice(answer);
        prompt.push(eos);
        Example {
            tokens: prompt,
            prompt_len,
        }
    }
}

/// Full template descriptions, aligned with the world's scenes.
pub fn describe_world(world: &World) -> Result<Vec<FactualDescription>> {
    world
        .facts
        .iter()
        .map(|f| compose_description(f, &Backend::Template))
        .collect()
}

/// Ground-truth answer for a describe prompt: categories in scene order.
pub fn describe_answer(vocab: &Vocab, categories: &[&str]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for c in categories {
        let id = vocab.id(c);
        if !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

fn scene_categories(world: &World, i: usize) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for o in &world.scenes[i].objects {
        if !out.contains(&o.category.as_str()) {
            out.push(&o.category);
        }
    }
    out
}

/// One epoch's examples. Image-mode labels follow the prior with
/// probability `bias_strength` when its object is absent; text-mode labels
/// are always truthful.
pub fn build_epoch(
    world: &World,
    descriptions: &[FactualDescription],
    vocab: &Vocab,
    bias_strength: f64,
    cfg: &HarnessTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    let eos = vocab.id(tokenizer::EOS);
    let yes = vocab.id(tokenizer::YES);
    let no = vocab.id(tokenizer::NO);
    let answer = |b: bool| if b { yes } else { no };
    let mut out = Vec::with_capacity(world.len() * 6);
    for (i, scene) in world.scenes.iter().enumerate() {
        let present = scene_categories(world, i);
        let absent: Vec<&str> = world
            .categories
            .iter()
            .map(String::as_str)
            .filter(|c| !present.contains(c))
            .collect();
        let open = world.open_rule(scene);
        let image = Context::Image(scene);
        let t_plus = &descriptions[i];
        let facts = &world.facts[i];

        let cat = *present.choose(rng).expect("scene has objects");
        out.push(Example::new(prompt(vocab, image, &Question::existence(0, cat).text), &[yes], eos));

        let (cat, truth, biased) = match open {
            Some(rule) if rng.gen_bool(cfg.partner_question_rate) => (rule.biased.as_str(), false, true),
            _ => (*absent.choose(rng).expect("vocabulary exceeds scene"), false, false),
        };
        let label = if biased && rng.gen_bool(bias_strength) { true } else { truth };
        out.push(Example::new(prompt(vocab, image, &Question::existence(0, cat).text), &[answer(label)], eos));

        let mut desc = describe_answer(vocab, &present);
        if let Some(rule) = open {
            if rng.gen_bool(bias_strength) {
                desc.push(vocab.id(&rule.biased));
            }
        }
        out.push(Example::new(prompt(vocab, image, DESCRIBE_PROMPT), &desc, eos));

        let text = Context::Text(&t_plus.text);
        let (cat, truth) = if rng.gen_bool(0.5) {
            (*present.choose(rng).unwrap(), true)
        } else {
            match open {
                Some(rule) if rng.gen_bool(cfg.partner_question_rate) => (rule.biased.as_str(), false),
                _ => (*absent.choose(rng).unwrap(), false),
            }
        };
        out.push(Example::new(prompt(vocab, text, &Question::existence(0, cat).text), &[answer(truth)], eos));

        let (cat, truth) = if rng.gen_bool(0.5) {
            (*present.choose(rng).unwrap(), true)
        } else {
            match open {
                Some(rule) if rng.gen_bool(cfg.partner_question_rate) => (rule.biased.as_str(), false),
                _ => (*absent.choose(rng).unwrap(), false),
            }
        };
        let q = Question::existence(0, cat);
        let focused = query_focus(t_plus, facts, &q, &Backend::Template)?;
        out.push(Example::new(prompt(vocab, Context::Text(&focused), &q.text), &[answer(truth)], eos));

        out.push(Example::new(prompt(vocab, text, DESCRIBE_PROMPT), &describe_answer(vocab, &present), eos));
    }
    Ok(out)
}

fn targets_for(batch: &[&Example]) -> Vec<Option<u32>> {
    let mut t = Vec::new();
    for ex in batch {
        for p in 0..ex.tokens.len() {
            t.push((p + 1 >= ex.prompt_len && p + 1 < ex.tokens.len()).then(|| ex.tokens[p + 1]));
        }
    }
    t
}

/// Adam state over the flat parameter vector.
struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub tokens: usize,
    pub seconds: f64,
}

/// Trains a fresh model (seeded by `cfg.seed`) on the biased corpus.
pub fn train_model(
    cfg: &ToyModelConfig,
    world: &World,
    vocab: &Vocab,
    tcfg: &HarnessTrainConfig,
) -> Result<(ToyModel, TrainingLog)> {
    tcfg.validate()?;
    if world.is_empty() {
        return Err(Error::InvalidArgument("training world is empty".into()));
    }
    if cfg.vocab != vocab.len() {
        return Err(Error::DimMismatch(format!(
            "model vocab {} differs from tokenizer vocab {}",
            cfg.vocab,
            vocab.len()
        )));
    }
    let start = std::time::Instant::now();
    let descriptions = describe_world(world)?;
    let mut model = ToyModel::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_C0DE);
    let mut adam = Adam::new(model.param_count());
    let mut grad = vec![0f32; model.param_count()];
    let steps_per_epoch = (world.len() * 6).div_ceil(tcfg.batch_size);
    let total_steps = steps_per_epoch * tcfg.epochs;
    let mut log = TrainingLog {
        epoch_losses: Vec::new(),
        steps: 0,
        tokens: 0,
        seconds: 0.0,
    };
    for _epoch in 0..tcfg.epochs {
        let mut examples = build_epoch(world, &descriptions, vocab, cfg.bias_strength, tcfg, &mut rng)?;
        examples.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in examples.chunks(tcfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().collect();
            let seqs: Vec<Sequence<'_>> = batch
                .iter()
                .map(|e| Sequence {
                    tokens: &e.tokens,
                    prompt_len: e.prompt_len,
                })
                .collect();
            let targets = targets_for(&batch);
            grad.fill(0.0);
            let mask: Vec<f32> = if tcfg.head_dropout > 0.0 {
                let keep = 1.0 / (1.0 - tcfg.head_dropout) as f32;
                (0..cfg.layers * seqs.len() * cfg.heads)
                    .map(|_| if rng.gen_bool(tcfg.head_dropout) { 0.0 } else { keep })
                    .collect()
            } else {
                Vec::new()
            };
            let loss = model.loss_and_grad_masked(&seqs, &targets, &mut grad, &mask)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!("training loss diverged at step {}", log.steps)));
            }
            let norm = grad.iter().map(|g| g * g).sum::<f32>().sqrt();
            if norm > tcfg.grad_clip {
                let s = tcfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            let step = log.steps;
            let lr = if step < tcfg.warmup_steps {
                tcfg.learning_rate * (step + 1) as f32 / tcfg.warmup_steps as f32
            } else {
                let t = (step - tcfg.warmup_steps) as f32 / (total_steps - tcfg.warmup_steps).max(1) as f32;
                tcfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * t.min(1.0)).cos()))
            };
            adam.update(model.params_mut(), &grad, lr);
            log.steps += 1;
            log.tokens += seqs.iter().map(|s| s.tokens.len()).sum::<usize>();
            sum += loss;
            batches += 1;
        }
        log.epoch_losses.push(sum / batches.max(1) as f64);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}
