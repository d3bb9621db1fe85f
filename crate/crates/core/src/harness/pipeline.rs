//! End-to-end steering experiment on the toy model: calibration capture,
//! field and estimator construction, and baseline/FAS/AFTER evaluation.

use serde::{Deserialize, Serialize};

use super::eval::{existence_questions, question_generator, run_discriminative_eval, run_generative_eval, EvalQuestion};
use super::model::{EditHook, Hook, LogitRows, Pooling, Sequence, ToyModel, ToyModelConfig};
use super::tokenizer::{prompt, Context, Vocab};
use super::train::{describe_world, train_model, HarnessTrainConfig, TrainingLog};
use super::world::{build_world, World, WorldConfig};
use crate::activation_store::{pair_by_sample, ActivationRecord, Dims, Role};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::offset_estimator::{build_offset_dataset, train_for, OffsetEstimator, TrainConfig};
use crate::steering::{compute_general_field, default_k, EditMode, EditPlan, SteeringField, DEFAULT_ALPHA};
use crate::textualizer::{query_focus, Backend, Question, TaskKind};

/// Sequences per capture forward call.
const CAPTURE_BATCH: usize = 64;

/// Baseline conflict accuracy must not exceed this.
pub const CONFLICT_ACCURACY_CEILING: f64 = 0.65;
/// Baseline non-conflict accuracy must reach this.
pub const CLEAN_ACCURACY_FLOOR: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// `vocab` is overwritten with the world's tokenizer size.
    pub model: ToyModelConfig,
    pub train: HarnessTrainConfig,
    /// Scenes used for training; the rest are held out for evaluation.
    pub train_scenes: usize,
    /// Leading training scenes that supply calibration pairs.
    pub calibration_scenes: usize,
    pub calibration_questions: usize,
    pub eval_questions: usize,
    /// `None` selects `default_k`.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub alpha: f32,
    pub estimator: TrainConfig,
    pub max_new_tokens: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            model: ToyModelConfig::default(),
            train: HarnessTrainConfig::default(),
            train_scenes: 1500,
            calibration_scenes: 500,
            calibration_questions: 2,
            eval_questions: 2,
            k: None,
            alpha: DEFAULT_ALPHA,
            estimator: TrainConfig::default(),
            max_new_tokens: 64,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.train_scenes >= self.world.num_scenes {
            return Err(Error::InvalidArgument(format!(
                "train_scenes must lie in [1, {}), got {}",
                self.world.num_scenes, self.train_scenes
            )));
        }
        if self.calibration_scenes == 0 || self.calibration_questions == 0 || self.eval_questions == 0 {
            return Err(Error::InvalidArgument("calibration and evaluation sizes must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        self.train.validate()?;
        self.estimator.validate()
    }

    pub fn k_for(&self, dims: Dims) -> usize {
        self.k.unwrap_or_else(|| default_k(dims))
    }
}

/// Untrusted and trusted captures of one calibration set. Discriminative
/// sets carry both trusted roles; generative sets reuse the full
/// description as the query-focused text.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub dims: Dims,
    pub untrusted: Vec<ActivationRecord>,
    pub trusted_general: Vec<ActivationRecord>,
    pub trusted_query: Vec<ActivationRecord>,
}

/// Captures every head at the pooling position of each prompt.
pub fn capture_prompts(
    model: &ToyModel,
    prompts: &[Vec<u32>],
    role: Role,
    first_sample: u64,
    pooling: Pooling,
) -> Result<Vec<ActivationRecord>> {
    let hook = Hook::capture_all(model.dims(), pooling);
    let mut out = Vec::with_capacity(prompts.len() * model.dims().cells());
    let mut id = first_sample;
    for chunk in prompts.chunks(CAPTURE_BATCH) {
        let seqs: Vec<Sequence<'_>> = chunk.iter().map(|p| Sequence::prompt(p)).collect();
        let fwd = model.forward(&seqs, Some(&hook), LogitRows::Last)?;
        for i in 0..chunk.len() {
            out.extend(fwd.records(i, id, role));
            id += 1;
        }
    }
    Ok(out)
}

/// Pairs for `task` over the first `scenes` scenes of `world`.
pub fn calibrate(
    model: &ToyModel,
    vocab: &Vocab,
    world: &World,
    task: TaskKind,
    scenes: usize,
    questions_per_scene: usize,
    seed: u64,
) -> Result<Calibration> {
    let world = world.subset(0..scenes.min(world.len()));
    let descriptions = describe_world(&world)?;
    let generator = question_generator(&world);
    let mut untrusted = Vec::new();
    let mut general = Vec::new();
    let mut focused = Vec::new();
    for (i, scene) in world.scenes.iter().enumerate() {
        let questions = match task {
            TaskKind::Discriminative => {
                generator.generate(&world.facts[i], TaskKind::Discriminative, questions_per_scene, seed)?
            }
            TaskKind::Generative => vec![Question::describe(0)],
        };
        for q in &questions {
            let t_star = query_focus(&descriptions[i], &world.facts[i], q, &Backend::Template)?;
            untrusted.push(prompt(vocab, Context::Image(scene), &q.text));
            general.push(prompt(vocab, Context::Text(&descriptions[i].text), &q.text));
            focused.push(prompt(vocab, Context::Text(&t_star), &q.text));
        }
    }
    if untrusted.is_empty() {
        return Err(Error::EmptyQuestions);
    }
    let pooling = model.config.pooling;
    Ok(Calibration {
        dims: model.dims(),
        untrusted: capture_prompts(model, &untrusted, Role::Untrusted, 0, pooling)?,
        trusted_general: capture_prompts(model, &general, Role::TrustedGeneral, 0, pooling)?,
        trusted_query: capture_prompts(model, &focused, Role::TrustedQuery, 0, pooling)?,
    })
}

/// Field, plan and estimator for one task.
#[derive(Debug, Clone)]
pub struct Steering {
    pub field: SteeringField,
    pub plan: EditPlan,
    pub estimator: OffsetEstimator,
}

impl Steering {
    pub fn from_calibration(cal: &Calibration, k: usize, alpha: f32, cfg: &TrainConfig) -> Result<Steering> {
        let general = pair_by_sample(cal.dims, &cal.trusted_general, &cal.untrusted)?;
        let field = compute_general_field(&general.paired)?;
        let plan = EditPlan::new(&field, k, alpha, EditMode::FasPlusQao)?;
        let query = pair_by_sample(cal.dims, &cal.trusted_query, &cal.untrusted)?;
        let dataset = build_offset_dataset(&query.paired, &field)?;
        let estimator = train_for(cal.dims, &dataset, &plan, cfg)?;
        Ok(Steering { field, plan, estimator })
    }

    /// The stored plan switched to `mode` at intensity `alpha`.
    pub fn plan_for(&self, mode: EditMode, alpha: f32) -> EditPlan {
        self.plan.with_mode(mode).with_alpha(alpha)
    }

    pub fn hook<'a>(&'a self, plan: &'a EditPlan) -> EditHook<'a> {
        EditHook {
            field: &self.field,
            plan,
            estimator: Some(&self.estimator),
        }
    }
}

/// Evaluation arm: no edit, field only, or field plus offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Fas,
    After,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::Fas, Arm::After];

    pub fn mode(self) -> Option<EditMode> {
        match self {
            Arm::Baseline => None,
            Arm::Fas => Some(EditMode::FasOnly),
            Arm::After => Some(EditMode::FasPlusQao),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Fas => "fas",
            Arm::After => "after",
        }
    }
}

/// Trained model plus the worlds it was trained and evaluated on.
#[derive(Debug, Clone)]
pub struct Trained {
    pub vocab: Vocab,
    pub model: ToyModel,
    pub log: TrainingLog,
    pub train: World,
    pub eval: World,
}

/// Builds the world for `seed`, splits it and trains the biased model.
pub fn train_seed(seed: u64, cfg: &ExperimentConfig) -> Result<Trained> {
    cfg.validate()?;
    let world = build_world(seed, &cfg.world)?;
    let vocab = Vocab::for_world(&world);
    let (train, eval) = world.split(cfg.train_scenes);
    let model_cfg = ToyModelConfig {
        vocab: vocab.len(),
        seed,
        composed: vocab.composed_tokens(),
        ..cfg.model.clone()
    };
    let (model, log) = train_model(&model_cfg, &train, &vocab, &cfg.train)?;
    Ok(Trained {
        vocab,
        model,
        log,
        train,
        eval,
    })
}

/// Errors with `BiasTargetUnmet` unless the baseline shows the injected bias.
pub fn check_bias_target(baseline: &EvalReport) -> Result<()> {
    let conflict = baseline.conflict.accuracy;
    let clean = baseline.non_conflict.accuracy;
    if conflict <= CONFLICT_ACCURACY_CEILING && clean >= CLEAN_ACCURACY_FLOOR {
        Ok(())
    } else {
        Err(Error::BiasTargetUnmet {
            conflict_accuracy: conflict,
            clean_accuracy: clean,
        })
    }
}

/// Discriminative and generative steering for one trained model.
#[derive(Debug, Clone)]
pub struct SteeringPair {
    pub discriminative: Steering,
    pub generative: Steering,
}

pub fn build_steering(t: &Trained, cfg: &ExperimentConfig, seed: u64) -> Result<SteeringPair> {
    let k = cfg.k_for(t.model.dims());
    let est = TrainConfig { seed, ..cfg.estimator };
    let build = |task| -> Result<Steering> {
        let cal = calibrate(&t.model, &t.vocab, &t.train, task, cfg.calibration_scenes, cfg.calibration_questions, seed)?;
        Steering::from_calibration(&cal, k, cfg.alpha, &est)
    };
    Ok(SteeringPair {
        discriminative: build(TaskKind::Discriminative)?,
        generative: build(TaskKind::Generative)?,
    })
}

/// Held-out questions for a trained model.
pub fn eval_questions(t: &Trained, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<EvalQuestion>> {
    existence_questions(&t.eval, cfg.eval_questions, seed)
}

/// Discriminative report for one arm at intensity `alpha`.
pub fn discriminative_arm(
    t: &Trained,
    questions: &[EvalQuestion],
    steering: &Steering,
    arm: Arm,
    alpha: f32,
) -> Result<EvalReport> {
    let plan = arm.mode().map(|m| steering.plan_for(m, alpha));
    let mut r = run_discriminative_eval(&t.model, &t.vocab, &t.eval, questions, plan.as_ref().map(|p| steering.hook(p)))?;
    r.label = arm.as_str().to_string();
    Ok(r)
}

/// Generative report for one arm at intensity `alpha`.
pub fn generative_arm(t: &Trained, steering: &Steering, arm: Arm, alpha: f32, max_new: usize) -> Result<EvalReport> {
    let plan = arm.mode().map(|m| steering.plan_for(m, alpha));
    let (mut r, _) = run_generative_eval(&t.model, &t.vocab, &t.eval, plan.as_ref().map(|p| steering.hook(p)), max_new)?;
    r.label = arm.as_str().to_string();
    Ok(r)
}

/// Per-seed outcome of the three-arm comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub training: TrainingLog,
    /// `None` when the baseline meets the bias target.
    pub bias_target_unmet: Option<String>,
    pub selected: Vec<(usize, usize)>,
    pub estimator_losses: Vec<f64>,
    /// Baseline, FAS and AFTER reports with generative metrics merged in.
    pub reports: Vec<EvalReport>,
    pub seconds: f64,
}

impl SeedResult {
    pub fn report(&self, arm: Arm) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.label == arm.as_str())
            .expect("every arm is evaluated")
    }
}

/// Trains, calibrates and evaluates all arms for one seed.
pub fn run_seed(seed: u64, cfg: &ExperimentConfig) -> Result<SeedResult> {
    run_seed_with(seed, cfg, |_, _| Ok(()))
}

/// `run_seed` with `extra` run on the trained model and its steering
/// before the arms are evaluated. Its time counts toward `seconds`.
pub fn run_seed_with(
    seed: u64,
    cfg: &ExperimentConfig,
    extra: impl FnOnce(&Trained, &SteeringPair) -> Result<()>,
) -> Result<SeedResult> {
    let start = std::time::Instant::now();
    let t = train_seed(seed, cfg)?;
    let steering = build_steering(&t, cfg, seed)?;
    extra(&t, &steering)?;
    let questions = eval_questions(&t, cfg, seed)?;
    let mut reports = Vec::new();
    for arm in Arm::ALL {
        let d = discriminative_arm(&t, &questions, &steering.discriminative, arm, cfg.alpha)?;
        let g = generative_arm(&t, &steering.generative, arm, cfg.alpha, cfg.max_new_tokens)?;
        reports.push(d.merged_with_generative(&g));
    }
    let bias_target_unmet = check_bias_target(&reports[0]).err().map(|e| e.to_string());
    Ok(SeedResult {
        seed,
        training: t.log,
        bias_target_unmet,
        selected: steering.discriminative.plan.selected.clone(),
        estimator_losses: steering.discriminative.estimator.final_losses(),
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One `(K, alpha)` point of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f32,
    pub report: EvalReport,
}

/// AFTER-arm discriminative reports over a `K x alpha` grid. Each `K`
/// retrains the estimator for its heads.
pub fn sweep(
    t: &Trained,
    cal: &Calibration,
    questions: &[EvalQuestion],
    ks: &[usize],
    alphas: &[f32],
    est: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &k in ks {
        let steering = Steering::from_calibration(cal, k, DEFAULT_ALPHA, est)?;
        for &alpha in alphas {
            let mut report = discriminative_arm(t, questions, &steering, Arm::After, alpha)?;
            report.label = format!("K={k},alpha={alpha}");
            out.push(SweepPoint { k, alpha, report });
        }
    }
    Ok(out)
}
