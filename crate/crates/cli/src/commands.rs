//! Subcommand bodies. Each reads its declared inputs under the output
//! directory (or the configured paths) and returns the JSON summary.
//!
//! ```text
//! out/facts/<image_id>.json            extract-facts
//! out/descriptions.jsonl               textualize
//! out/questions.jsonl, pairs.jsonl     gen-questions
//! out/model.toym, world.jsonl          dump-activations
//! out/activations/<task>/<role>.actv   dump-activations
//! out/steering/<task>/field.actv       compute-field (+ plan.json)
//! out/steering/<task>/estimator.json   train-offset (+ one .actv per head)
//! out/eval/<mode>.json, <mode>.csv     eval
//! out/sweep.csv                        sweep
//! out/analysis/*.csv                   analyze
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use steerkit::annotations::{load_annotation_set_with_rasters, AnnotationSet};
use steerkit::harness::eval::{run_discriminative_eval, run_generative_eval};
use steerkit::harness::model::ToyModel;
use steerkit::harness::pipeline::{
    calibrate, check_bias_target, discriminative_arm, eval_questions, generative_arm, sweep, train_seed, Arm,
    Calibration, ExperimentConfig, Steering, Trained,
};
use steerkit::harness::tokenizer::Vocab;
use steerkit::harness::world::build_world;
use steerkit::offset_estimator::train_for;
use steerkit::textualizer::{read_jsonl, write_jsonl, RemoteClient, TrustedMode};
use steerkit::{
    build_contrast_pairs, build_fact_set, build_offset_dataset, compose_description, compute_general_field,
    generate_question_set, load_annotation_set, pair_by_sample, pca_project_1d, read_records, validate, write_records,
    Backend, EditMode, EditPlan, Error, EvalReport, FactSet, FactualDescription, OffsetEstimator, Result, Role,
    SteeringField,
};

use crate::config::{BackendKind, PipelineConfig};
use crate::{Command, ModeArg, TaskArg};

const TASKS: [TaskArg; 2] = [TaskArg::Discriminative, TaskArg::Generative];

pub fn run(cmd: &Command, cfg: &PipelineConfig) -> Result<Value> {
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    match cmd {
        Command::ExtractFacts => extract_facts(cfg, out),
        Command::Textualize => textualize(cfg, out),
        Command::GenQuestions { task } => gen_questions(cfg, out, *task),
        Command::DumpActivations { model } => dump_activations(cfg, out, model.as_deref()),
        Command::ComputeField { task, .. } => per_task(*task, |t| compute_field(cfg, out, t)),
        Command::TrainOffset { task, .. } => per_task(*task, |t| train_offset(cfg, out, t)),
        Command::Eval { mode, .. } => eval(cfg, out, *mode),
        Command::Sweep { ks, alphas } => run_sweep(cfg, out, ks, alphas),
        Command::Analyze { magnitudes, pca, layer, head, task } => analyze(out, *magnitudes, *pca, *layer, *head, *task),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("missing; run `{produced_by}` first"),
        })
    }
}

fn per_task(task: Option<TaskArg>, f: impl Fn(TaskArg) -> Result<Value>) -> Result<Value> {
    let tasks: Vec<TaskArg> = task.map(|t| vec![t]).unwrap_or_else(|| TASKS.to_vec());
    let mut summary = serde_json::Map::new();
    for t in tasks {
        summary.insert(t.name().into(), f(t)?);
    }
    Ok(Value::Object(summary))
}

fn annotations(cfg: &PipelineConfig) -> Result<AnnotationSet> {
    let path = cfg
        .paths
        .annotations
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--annotations is required".into()))?;
    match &cfg.paths.rasters {
        Some(dir) => load_annotation_set_with_rasters(path, dir),
        None => load_annotation_set(path),
    }
}

fn facts_dir(out: &Path) -> PathBuf {
    out.join("facts")
}

fn extract_facts(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let set = annotations(cfg)?;
    let violations = validate(&set);
    let dir = facts_dir(out);
    create_dir(&dir)?;
    let mut written = 0;
    let mut without_colors = 0;
    for img in &set.images {
        // Colors need pixels; images without rasters still get the rest.
        let mut fc = cfg.facts.clone();
        if fc.colors && !img.has_pixels() {
            fc.colors = false;
            without_colors += 1;
        }
        let facts = build_fact_set(img, &fc)?;
        write_text(&dir.join(format!("{}.json", img.image_id)), &(facts.to_json()? + "\n"))?;
        written += 1;
    }
    let vpath = out.join("violations.json");
    write_text(&vpath, &(serde_json::to_string_pretty(&violations)? + "\n"))?;
    Ok(json!({
        "images": set.len(),
        "objects": set.object_count(),
        "fact_sets": written,
        "without_colors": without_colors,
        "violations": violations.len(),
        "out": dir,
    }))
}

fn read_fact_sets(out: &Path) -> Result<Vec<FactSet>> {
    let dir = facts_dir(out);
    require(&dir, "extract-facts")?;
    let mut sets = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })? {
        let path = entry.map_err(|e| Error::Io { path: dir.clone(), source: e })?.path();
        if path.extension().is_some_and(|e| e == "json") {
            sets.push(FactSet::read(&path)?);
        }
    }
    sets.sort_by_key(|f| f.image_id);
    Ok(sets)
}

fn backend(cfg: &PipelineConfig) -> Result<Backend> {
    Ok(match cfg.textualizer.backend {
        BackendKind::Template => Backend::Template,
        BackendKind::Remote => Backend::Remote(RemoteClient::new(cfg.textualizer.remote.clone())?),
    })
}

fn textualize(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let facts = read_fact_sets(out)?;
    let backend = backend(cfg)?;
    let mut descriptions = Vec::new();
    let mut skipped = Vec::new();
    for f in &facts {
        match compose_description(f, &backend) {
            Ok(d) => descriptions.push(d),
            Err(Error::EmptyFacts { image_id }) => skipped.push(image_id),
            Err(e) => return Err(e),
        }
    }
    let path = out.join("descriptions.jsonl");
    write_jsonl(&path, &descriptions)?;
    Ok(json!({ "descriptions": descriptions.len(), "skipped_empty": skipped, "out": path }))
}

fn gen_questions(cfg: &PipelineConfig, out: &Path, task: TaskArg) -> Result<Value> {
    let facts = read_fact_sets(out)?;
    let dpath = out.join("descriptions.jsonl");
    require(&dpath, "textualize")?;
    let descriptions: BTreeMap<u64, FactualDescription> =
        read_jsonl::<FactualDescription>(&dpath)?.into_iter().map(|d| (d.image_id, d)).collect();
    let set = annotations(cfg)?;
    let backend = backend(cfg)?;
    let mut questions = Vec::new();
    let mut pairs = Vec::new();
    for img in &set.images {
        let (Some(f), Some(d)) = (facts.iter().find(|f| f.image_id == img.image_id), descriptions.get(&img.image_id))
        else {
            continue;
        };
        let qs = generate_question_set(f, task.kind(), cfg.textualizer.n, cfg.textualizer.seed ^ img.image_id)?;
        if qs.is_empty() {
            continue;
        }
        pairs.extend(build_contrast_pairs(img, d, &qs, TrustedMode::QueryFocused(f, &backend))?);
        questions.extend(qs.into_iter().map(|q| json!({ "image_id": img.image_id, "question": q })));
    }
    let (qpath, ppath) = (out.join("questions.jsonl"), out.join("pairs.jsonl"));
    write_jsonl(&qpath, &questions)?;
    write_jsonl(&ppath, &pairs)?;
    Ok(json!({ "task": task.name(), "questions": questions.len(), "pairs": pairs.len(), "out": [qpath, ppath] }))
}

fn activation_path(out: &Path, task: TaskArg, role: Role) -> PathBuf {
    let name = match role {
        Role::Untrusted => "untrusted",
        Role::TrustedGeneral => "trusted_general",
        _ => "trusted_query",
    };
    out.join("activations").join(task.name()).join(format!("{name}.actv"))
}

fn steering_dir(out: &Path, task: TaskArg) -> PathBuf {
    out.join("steering").join(task.name())
}

/// The trained model and its world split, from the checkpoint on disk.
fn load_trained(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Trained> {
    let path = out.join("model.toym");
    require(&path, "dump-activations")?;
    let mut model = ToyModel::load(&path)?;
    model.config.pooling = cfg.model.pooling;
    let world = build_world(seed, &cfg.world)?;
    let vocab = Vocab::for_world(&world);
    if vocab.len() != model.config.vocab {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: format!("vocabulary of {} tokens, world needs {}", model.config.vocab, vocab.len()),
        });
    }
    let (train, eval) = world.split(cfg.train_scenes);
    Ok(Trained { vocab, model, log: Default::default(), train, eval })
}

fn dump_activations(cfg: &PipelineConfig, out: &Path, checkpoint: Option<&Path>) -> Result<Value> {
    let e = cfg.experiment();
    let model_path = out.join("model.toym");
    let (t, trained) = match checkpoint {
        Some(p) => {
            if p != model_path {
                std::fs::copy(p, &model_path).map_err(|err| Error::Io { path: p.to_path_buf(), source: err })?;
            }
            (load_trained(&e, cfg.seed, out)?, false)
        }
        None => {
            let t = train_seed(cfg.seed, &e)?;
            t.model.save(&model_path)?;
            (t, true)
        }
    };
    let world = build_world(cfg.seed, &e.world)?;
    world.write_jsonl(&out.join("world.jsonl"))?;
    let mut records = 0usize;
    for task in TASKS {
        let cal = calibrate(&t.model, &t.vocab, &t.train, task.kind(), e.calibration_scenes, e.calibration_questions, cfg.seed)?;
        create_dir(&out.join("activations").join(task.name()))?;
        for (role, recs) in [
            (Role::Untrusted, &cal.untrusted),
            (Role::TrustedGeneral, &cal.trusted_general),
            (Role::TrustedQuery, &cal.trusted_query),
        ] {
            write_records(&activation_path(out, task, role), cal.dims, recs)?;
            records += recs.len();
        }
    }
    let dims = t.model.dims();
    Ok(json!({
        "trained": trained,
        "final_loss": t.log.epoch_losses.last(),
        "layers": dims.layers, "heads": dims.heads, "dim": dims.dim,
        "records": records,
        "model": model_path,
    }))
}

fn load_calibration(out: &Path, task: TaskArg) -> Result<Calibration> {
    let mut parts = Vec::new();
    let mut dims = None;
    for role in [Role::Untrusted, Role::TrustedGeneral, Role::TrustedQuery] {
        let path = activation_path(out, task, role);
        require(&path, "dump-activations")?;
        let (header, recs) = read_records(&path)?;
        if dims.is_some_and(|d| d != header.dims) {
            return Err(Error::DimMismatch(format!("{} disagrees with its siblings", path.display())));
        }
        dims = Some(header.dims);
        parts.push(recs);
    }
    let trusted_query = parts.pop().expect("three roles");
    let trusted_general = parts.pop().expect("three roles");
    let untrusted = parts.pop().expect("three roles");
    Ok(Calibration { dims: dims.expect("three roles"), untrusted, trusted_general, trusted_query })
}

fn compute_field(cfg: &PipelineConfig, out: &Path, task: TaskArg) -> Result<Value> {
    let cal = load_calibration(out, task)?;
    let pairing = pair_by_sample(cal.dims, &cal.trusted_general, &cal.untrusted)?;
    let field = compute_general_field(&pairing.paired)?;
    let e = cfg.experiment();
    let plan = EditPlan::new(&field, e.k_for(cal.dims), e.alpha, EditMode::FasPlusQao)?;
    let dir = steering_dir(out, task);
    create_dir(&dir)?;
    field.write(&dir.join("field.actv"))?;
    plan.write(&dir.join("plan.json"))?;
    Ok(json!({
        "pairs": field.pair_count,
        "unmatched": pairing.unmatched.len(),
        "K": plan.k,
        "alpha": plan.alpha,
        "selected": plan.selected,
        "top_magnitude": plan.selected.first().map(|&(l, h)| field.magnitude(l, h)),
    }))
}

fn load_field_and_plan(out: &Path, task: TaskArg) -> Result<(SteeringField, EditPlan)> {
    let dir = steering_dir(out, task);
    let fpath = dir.join("field.actv");
    require(&fpath, "compute-field")?;
    let field = SteeringField::read(&fpath)?;
    let plan = EditPlan::read(&dir.join("plan.json"), field.dims)?;
    Ok((field, plan))
}

fn train_offset(cfg: &PipelineConfig, out: &Path, task: TaskArg) -> Result<Value> {
    let cal = load_calibration(out, task)?;
    let (field, plan) = load_field_and_plan(out, task)?;
    let pairing = pair_by_sample(cal.dims, &cal.trusted_query, &cal.untrusted)?;
    let dataset = build_offset_dataset(&pairing.paired, &field)?;
    let est = train_for(cal.dims, &dataset, &plan, &cfg.experiment().estimator)?;
    let path = steering_dir(out, task).join("estimator.json");
    est.write(&path)?;
    Ok(json!({ "heads": est.heads.len(), "samples": dataset.len(), "final_losses": est.final_losses(), "out": path }))
}

fn load_steering(out: &Path, task: TaskArg, k: Option<usize>, alpha: f32) -> Result<Steering> {
    let (field, stored) = load_field_and_plan(out, task)?;
    let path = steering_dir(out, task).join("estimator.json");
    require(&path, "train-offset")?;
    let estimator = OffsetEstimator::read(&path)?;
    let plan = match k {
        // A different K reselects heads; the estimator must cover them.
        Some(k) if k != stored.k => EditPlan::new(&field, k, alpha, stored.mode)?,
        _ => stored.with_alpha(alpha),
    };
    for &(l, h) in &plan.selected {
        if estimator.head((l, h)).is_none() {
            return Err(Error::UncoveredHead { layer: l, head: h });
        }
    }
    Ok(Steering { field, plan, estimator })
}

fn eval(cfg: &PipelineConfig, out: &Path, mode: ModeArg) -> Result<Value> {
    let e = cfg.experiment();
    let t = load_trained(&e, cfg.seed, out)?;
    let questions = eval_questions(&t, &e, cfg.seed)?;
    let (label, report) = match mode {
        ModeArg::Baseline => {
            let d = run_discriminative_eval(&t.model, &t.vocab, &t.eval, &questions, None)?;
            let (g, _) = run_generative_eval(&t.model, &t.vocab, &t.eval, None, e.max_new_tokens)?;
            ("baseline", d.merged_with_generative(&g))
        }
        ModeArg::Fas | ModeArg::After => {
            let arm = if mode == ModeArg::Fas { Arm::Fas } else { Arm::After };
            let disc = load_steering(out, TaskArg::Discriminative, cfg.steering.k, e.alpha)?;
            let gen = load_steering(out, TaskArg::Generative, cfg.steering.k, e.alpha)?;
            let d = discriminative_arm(&t, &questions, &disc, arm, e.alpha)?;
            let g = generative_arm(&t, &gen, arm, e.alpha, e.max_new_tokens)?;
            (arm.as_str(), d.merged_with_generative(&g))
        }
    };
    let mut report = EvalReport { label: label.to_string(), ..report };
    report.tokens_per_second = 0.0;
    let dir = out.join("eval");
    create_dir(&dir)?;
    report.write_json(&dir.join(format!("{label}.json")))?;
    EvalReport::write_csv(std::slice::from_ref(&report), &dir.join(format!("{label}.csv")))?;
    let mut summary = json!({
        "mode": label,
        "alpha": e.alpha,
        "accuracy": report.overall.accuracy,
        "f1": report.overall.f1,
        "conflict_accuracy": report.conflict.accuracy,
        "non_conflict_accuracy": report.non_conflict.accuracy,
        "chair": report.overall.chair,
        "hal": report.overall.hal,
        "cover": report.overall.cover,
    });
    if mode == ModeArg::Baseline {
        summary["bias_target_met"] = check_bias_target(&report).is_ok().into();
    }
    Ok(summary)
}

fn run_sweep(cfg: &PipelineConfig, out: &Path, ks: &[usize], alphas: &[f32]) -> Result<Value> {
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument(format!("--alpha values must be finite and >= 0, got {a}")));
    }
    let e = cfg.experiment();
    let t = load_trained(&e, cfg.seed, out)?;
    let cal = load_calibration(out, TaskArg::Discriminative)?;
    let questions = eval_questions(&t, &e, cfg.seed)?;
    let points = sweep(&t, &cal, &questions, ks, alphas, &e.estimator)?;
    let mut csv = String::from("K,alpha,accuracy,f1,conflict_accuracy,conflict_f1,non_conflict_accuracy,non_conflict_f1\n");
    let mut best: Option<(usize, f32, f64)> = None;
    for p in &points {
        let r = &p.report;
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.k, p.alpha, r.overall.accuracy, r.overall.f1, r.conflict.accuracy, r.conflict.f1, r.non_conflict.accuracy, r.non_conflict.f1
        )
        .expect("writing to a String");
        if best.map_or(true, |b| r.overall.accuracy > b.2) {
            best = Some((p.k, p.alpha, r.overall.accuracy));
        }
    }
    let path = out.join("sweep.csv");
    write_text(&path, &csv)?;
    let best = best.map(|(k, a, acc)| json!({ "K": k, "alpha": a, "accuracy": acc }));
    Ok(json!({ "points": points.len(), "best": best, "out": path }))
}

fn analyze(
    out: &Path,
    magnitudes: bool,
    pca: bool,
    layer: Option<usize>,
    head: Option<usize>,
    task: TaskArg,
) -> Result<Value> {
    if !magnitudes && !pca {
        return Err(Error::InvalidArgument("analyze needs --magnitudes and/or --pca".into()));
    }
    let (field, plan) = load_field_and_plan(out, task)?;
    let dir = out.join("analysis");
    create_dir(&dir)?;
    let mut summary = serde_json::Map::new();
    if magnitudes {
        let rank: BTreeMap<(usize, usize), usize> =
            steerkit::rank_heads(&field, field.dims.cells()).into_iter().enumerate().map(|(i, c)| (c, i + 1)).collect();
        let mut csv = String::from("layer,head,magnitude,rank\n");
        for l in 0..field.dims.layers {
            for h in 0..field.dims.heads {
                writeln!(csv, "{l},{h},{:.6},{}", field.magnitude(l, h), rank[&(l, h)]).expect("writing to a String");
            }
        }
        let path = dir.join("magnitudes.csv");
        write_text(&path, &csv)?;
        summary.insert("magnitudes".into(), json!({ "cells": field.dims.cells(), "out": path }));
    }
    if pca {
        let cell = match (layer, head) {
            (Some(l), Some(h)) if l < field.dims.layers && h < field.dims.heads => (l, h),
            (Some(_), Some(_)) => return Err(Error::InvalidArgument("--layer/--head outside the model".into())),
            (None, None) => *plan.selected.first().ok_or_else(|| Error::InvalidArgument("plan selects no heads".into()))?,
            _ => return Err(Error::InvalidArgument("--layer and --head go together".into())),
        };
        let cal = load_calibration(out, task)?;
        let mut rows: Vec<(u64, &str)> = Vec::new();
        let mut vectors = Vec::new();
        for (recs, role) in [(&cal.trusted_general, "trusted"), (&cal.untrusted, "untrusted")] {
            for r in recs.iter().filter(|r| (r.layer, r.head) == cell) {
                rows.push((r.sample_id, role));
                vectors.push(r.vector.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>());
            }
        }
        let p = pca_project_1d(&vectors)?;
        let mut csv = String::from("sample_id,role,projection\n");
        for ((id, role), x) in rows.iter().zip(&p.projections) {
            writeln!(csv, "{id},{role},{x:.6}").expect("writing to a String");
        }
        let path = dir.join(format!("pca_l{}h{}.csv", cell.0, cell.1));
        write_text(&path, &csv)?;
        summary.insert("pca".into(), json!({ "layer": cell.0, "head": cell.1, "explained": p.explained, "out": path }));
    }
    Ok(Value::Object(summary))
}
