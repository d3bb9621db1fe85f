//! Existence-question and description evaluation of the toy model.

use std::time::Instant;

use super::model::{EditHook, Hook, LogitRows, Sequence, ToyModel};
use super::tokenizer::{self, prompt, Context, Vocab};
use super::world::World;
use crate::error::{Error, Result};
use crate::metrics::{binary_scores, extract_mentions, generative_scores, Answer, EvalReport, MentionExtraction, SplitReport};
use crate::textualizer::{Question, QuestionGenerator, TaskKind, DESCRIBE_PROMPT};

/// Sequences per forward call during evaluation.
const EVAL_BATCH: usize = 64;

/// An existence question about one scene of a world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalQuestion {
    pub scene: usize,
    pub question: Question,
    pub gold: Answer,
}

/// Generator whose distractors prefer each scene's missing prior object.
pub fn question_generator(world: &World) -> QuestionGenerator {
    let mut g = QuestionGenerator::with_vocabulary(world.categories.iter().cloned());
    g.co_occurrence = world
        .config
        .prior_table
        .iter()
        .map(|r| (r.context.clone(), r.biased.clone()))
        .collect();
    g
}

/// `per_scene` balanced questions per scene (present and absent objects).
pub fn existence_questions(world: &World, per_scene: usize, seed: u64) -> Result<Vec<EvalQuestion>> {
    let g = question_generator(world);
    let mut out = Vec::new();
    for (i, f) in world.facts.iter().enumerate() {
        for q in g.generate(f, TaskKind::Discriminative, per_scene, seed)? {
            let gold = Answer::from_bool(q.referenced_categories.iter().all(|c| f.has_category(c)));
            out.push(EvalQuestion {
                scene: i,
                question: q,
                gold,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyQuestions);
    }
    Ok(out)
}

/// Scores predictions against the questions, split by the conflict flag.
pub fn score_discriminative(world: &World, questions: &[EvalQuestion], predictions: &[Answer]) -> Result<EvalReport> {
    if questions.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: questions.len(),
        });
    }
    let split = |want: Option<bool>| -> Result<SplitReport> {
        let (p, g): (Vec<Answer>, Vec<Answer>) = questions
            .iter()
            .zip(predictions)
            .filter(|(q, _)| want.map_or(true, |w| world.scenes[q.scene].prior_conflict == w))
            .map(|(q, p)| (*p, q.gold))
            .unzip();
        if g.is_empty() {
            return Ok(SplitReport::default());
        }
        Ok(SplitReport::default().with_binary(&binary_scores(&p, &g)?))
    };
    Ok(EvalReport {
        label: String::new(),
        overall: split(None)?,
        conflict: split(Some(true))?,
        non_conflict: split(Some(false))?,
        tokens_per_second: 0.0,
    })
}

/// Image-mode answers to `questions`: "yes" when its logit beats "no".
pub fn answer_questions(
    model: &ToyModel,
    vocab: &Vocab,
    world: &World,
    questions: &[EvalQuestion],
    edit: Option<EditHook<'_>>,
) -> Result<(Vec<Answer>, usize)> {
    let yes = vocab.id(tokenizer::YES) as usize;
    let no = vocab.id(tokenizer::NO) as usize;
    let hook = edit.map(Hook::editing);
    let mut answers = Vec::with_capacity(questions.len());
    let mut tokens = 0;
    for chunk in questions.chunks(EVAL_BATCH) {
        let prompts: Vec<Vec<u32>> = chunk
            .iter()
            .map(|q| prompt(vocab, Context::Image(&world.scenes[q.scene]), &q.question.text))
            .collect();
        let seqs: Vec<Sequence<'_>> = prompts.iter().map(|p| Sequence::prompt(p)).collect();
        tokens += prompts.iter().map(Vec::len).sum::<usize>();
        let out = model.forward(&seqs, hook.as_ref(), LogitRows::Last)?;
        for i in 0..chunk.len() {
            let row = out.row(i);
            answers.push(Answer::from_bool(row[yes] > row[no]));
        }
    }
    Ok((answers, tokens))
}

pub fn run_discriminative_eval(
    model: &ToyModel,
    vocab: &Vocab,
    world: &World,
    questions: &[EvalQuestion],
    edit: Option<EditHook<'_>>,
) -> Result<EvalReport> {
    let start = Instant::now();
    let (answers, tokens) = answer_questions(model, vocab, world, questions, edit)?;
    let mut report = score_discriminative(world, questions, &answers)?;
    report.tokens_per_second = tokens as f64 / start.elapsed().as_secs_f64().max(1e-9);
    Ok(report)
}

/// Greedy continuation of each prompt until `<eos>` or `max_new` tokens.
/// Edits, when present, apply from the last prompt position onward.
pub fn generate(
    model: &ToyModel,
    vocab: &Vocab,
    prompts: &[Vec<u32>],
    max_new: usize,
    edit: Option<EditHook<'_>>,
) -> Result<Vec<Vec<u32>>> {
    let eos = vocab.id(tokenizer::EOS);
    let hook = edit.map(Hook::editing);
    let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
    let mut done = vec![false; prompts.len()];
    for _ in 0..max_new {
        let active: Vec<usize> = (0..seqs.len())
            .filter(|&i| !done[i] && model.fits(prompts[i].len(), seqs[i].len() + 1))
            .collect();
        if active.is_empty() {
            break;
        }
        for chunk in active.chunks(EVAL_BATCH) {
            let batch: Vec<Sequence<'_>> = chunk
                .iter()
                .map(|&i| Sequence {
                    tokens: &seqs[i],
                    prompt_len: prompts[i].len(),
                })
                .collect();
            let out = model.forward(&batch, hook.as_ref(), LogitRows::Last)?;
            let next: Vec<u32> = (0..chunk.len())
                .map(|r| {
                    let row = out.row(r);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best as u32
                })
                .collect();
            for (&i, t) in chunk.iter().zip(next) {
                if t == eos {
                    done[i] = true;
                } else {
                    seqs[i].push(t);
                }
            }
        }
        for i in 0..seqs.len() {
            if !model.fits(prompts[i].len(), seqs[i].len() + 1) {
                done[i] = true;
            }
        }
    }
    Ok(seqs
        .into_iter()
        .zip(prompts)
        .map(|(s, p)| s[p.len()..].to_vec())
        .collect())
}

/// Mentions in each response against its scene's objects.
pub fn extract_world_mentions(world: &World, scenes: &[usize], responses: &[String]) -> Vec<MentionExtraction> {
    scenes
        .iter()
        .zip(responses)
        .map(|(&i, r)| {
            extract_mentions(
                r,
                &world.categories,
                world.scenes[i].objects.iter().map(|o| o.category.clone()),
            )
        })
        .collect()
}

pub fn score_generative(world: &World, scenes: &[usize], responses: &[String]) -> EvalReport {
    let ex = extract_world_mentions(world, scenes, responses);
    let split = |want: Option<bool>| {
        let sel: Vec<MentionExtraction> = scenes
            .iter()
            .zip(&ex)
            .filter(|(i, _)| want.map_or(true, |w| world.scenes[**i].prior_conflict == w))
            .map(|(_, e)| e.clone())
            .collect();
        SplitReport::default().with_generative(&generative_scores(&sel))
    };
    EvalReport {
        label: String::new(),
        overall: split(None),
        conflict: split(Some(true)),
        non_conflict: split(Some(false)),
        tokens_per_second: 0.0,
    }
}

/// Describe-prompt responses for every scene, scored with CHAIR/Hal/Cover.
pub fn run_generative_eval(
    model: &ToyModel,
    vocab: &Vocab,
    world: &World,
    edit: Option<EditHook<'_>>,
    max_new: usize,
) -> Result<(EvalReport, Vec<String>)> {
    let start = Instant::now();
    let prompts: Vec<Vec<u32>> = world
        .scenes
        .iter()
        .map(|s| prompt(vocab, Context::Image(s), DESCRIBE_PROMPT))
        .collect();
    let outputs = generate(model, vocab, &prompts, max_new, edit)?;
    let tokens: usize = prompts.iter().map(Vec::len).sum::<usize>() + outputs.iter().map(Vec::len).sum::<usize>();
    let responses: Vec<String> = outputs.iter().map(|o| vocab.decode(o)).collect();
    let scenes: Vec<usize> = (0..world.len()).collect();
    let mut report = score_generative(world, &scenes, &responses);
    report.tokens_per_second = tokens as f64 / start.elapsed().as_secs_f64().max(1e-9);
    Ok((report, responses))
}
