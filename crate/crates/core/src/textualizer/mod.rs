//! Fact sets to trusted text: full descriptions, query-focused
//! descriptions, question sets and trusted/untrusted pairs.

mod remote;
mod template;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annotations::ImageRecord;
use crate::error::{Error, Result};
use crate::facts::FactSet;

pub use remote::{RemoteBackendConfig, RemoteClient, RemoteRequest};

/// The 80 COCO instance category names.
pub const COCO_CATEGORIES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

pub const DESCRIBE_PROMPT: &str = "Describe this image.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    Template,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactualDescription {
    pub image_id: u64,
    pub text: String,
    pub source: TextSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Discriminative,
    Generative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: u64,
    pub text: String,
    pub referenced_categories: Vec<String>,
    pub task: TaskKind,
}

impl Question {
    pub fn existence(question_id: u64, category: &str) -> Question {
        Question {
            question_id,
            text: format!("Is there {} {category} in the image?", template::article(category)),
            referenced_categories: vec![category.to_string()],
            task: TaskKind::Discriminative,
        }
    }

    pub fn describe(question_id: u64) -> Question {
        Question {
            question_id,
            text: DESCRIBE_PROMPT.to_string(),
            referenced_categories: Vec::new(),
            task: TaskKind::Generative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub image_id: u64,
    pub question_id: u64,
    pub trusted_text: String,
    pub untrusted_is_image: bool,
}

/// Where descriptions come from.
#[derive(Debug, Clone, Default)]
pub enum Backend {
    #[default]
    Template,
    Remote(RemoteClient),
}

pub fn compose_description(f: &FactSet, backend: &Backend) -> Result<FactualDescription> {
    if f.categories.is_empty() {
        return Err(Error::EmptyFacts {
            image_id: f.image_id,
        });
    }
    let (text, source) = match backend {
        Backend::Template => (template::render(f), TextSource::Template),
        Backend::Remote(client) => {
            let text = client.send(&RemoteRequest {
                instruction: &client.config().fst_instruction,
                image_id: f.image_id,
                facts: f,
                text: None,
            })?;
            (text, TextSource::Remote)
        }
    };
    Ok(FactualDescription {
        image_id: f.image_id,
        text,
        source,
    })
}

/// Composes many descriptions; remote calls run with bounded concurrency.
pub fn compose_many(facts: &[FactSet], backend: &Backend) -> Vec<Result<FactualDescription>> {
    match backend {
        Backend::Template => facts.iter().map(|f| compose_description(f, backend)).collect(),
        Backend::Remote(client) => {
            let texts = client.send_all(facts.len(), |i, send| {
                let f = &facts[i];
                if f.categories.is_empty() {
                    return Err(Error::EmptyFacts {
                        image_id: f.image_id,
                    });
                }
                send(&RemoteRequest {
                    instruction: &client.config().fst_instruction,
                    image_id: f.image_id,
                    facts: f,
                    text: None,
                })
            });
            texts
                .into_iter()
                .zip(facts)
                .map(|(t, f)| {
                    t.map(|text| FactualDescription {
                        image_id: f.image_id,
                        text,
                        source: TextSource::Remote,
                    })
                })
                .collect()
        }
    }
}

/// Sentence stating that a category is absent.
pub fn absence_sentence(category: &str) -> String {
    format!("There is no {category} in the image.")
}

/// Builds the query-focused description for `q`: for every referenced
/// category present in the facts its sub-description, otherwise the
/// absence sentence. Questions without referenced categories keep `t_plus`.
pub fn query_focus(
    t_plus: &FactualDescription,
    f: &FactSet,
    q: &Question,
    backend: &Backend,
) -> Result<String> {
    if t_plus.image_id != f.image_id {
        return Err(Error::InvalidArgument(format!(
            "description for image {} used with facts of image {}",
            t_plus.image_id, f.image_id
        )));
    }
    if q.referenced_categories.is_empty() {
        return Ok(t_plus.text.clone());
    }
    let mut parts: Vec<String> = Vec::new();
    match backend {
        Backend::Template => {
            let sentences = template::sentences(&t_plus.text);
            let mut used = vec![false; sentences.len()];
            for cat in &q.referenced_categories {
                if f.has_category(cat) {
                    for (i, s) in sentences.iter().enumerate() {
                        if !used[i] && template::mentions(s, cat) {
                            used[i] = true;
                            parts.push(s.to_string());
                        }
                    }
                } else {
                    parts.push(absence_sentence(cat));
                }
            }
        }
        Backend::Remote(client) => {
            for cat in &q.referenced_categories {
                if f.has_category(cat) {
                    let instruction = client.config().qst_instruction.replace("{category}", cat);
                    parts.push(client.send(&RemoteRequest {
                        instruction: &instruction,
                        image_id: f.image_id,
                        facts: f,
                        text: Some(&t_plus.text),
                    })?);
                } else {
                    parts.push(absence_sentence(cat));
                }
            }
        }
    }
    Ok(parts.join(" "))
}

/// Question-set construction with a distractor vocabulary for absent
/// objects. Co-occurrence partners, when given, are preferred as
/// distractors (adversarial sampling).
#[derive(Debug, Clone)]
pub struct QuestionGenerator {
    pub vocabulary: Vec<String>,
    /// `(context, partner)`: when `context` is present and `partner` is
    /// absent, `partner` is asked about before random distractors.
    pub co_occurrence: Vec<(String, String)>,
    pub generative_prompts: Vec<String>,
}

impl Default for QuestionGenerator {
    fn default() -> Self {
        QuestionGenerator {
            vocabulary: COCO_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            co_occurrence: Vec::new(),
            generative_prompts: vec![DESCRIBE_PROMPT.to_string()],
        }
    }
}

impl QuestionGenerator {
    pub fn with_vocabulary<I, S>(vocabulary: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        QuestionGenerator {
            vocabulary: vocabulary.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    fn rng(f: &FactSet, seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed ^ f.image_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Up to `n` questions. Discriminative sets alternate present and absent
    /// objects so their counts differ by at most one; they can be shorter
    /// than `n` when the image or the vocabulary runs out of categories.
    pub fn generate(&self, f: &FactSet, task: TaskKind, n: usize, seed: u64) -> Result<Vec<Question>> {
        if n == 0 {
            return Err(Error::InvalidArgument("question count n must be at least 1".into()));
        }
        let mut rng = Self::rng(f, seed);
        match task {
            TaskKind::Generative => {
                let prompts = if self.generative_prompts.is_empty() {
                    vec![DESCRIBE_PROMPT.to_string()]
                } else {
                    self.generative_prompts.clone()
                };
                Ok((0..n)
                    .map(|i| Question {
                        question_id: i as u64,
                        text: prompts[i % prompts.len()].clone(),
                        referenced_categories: Vec::new(),
                        task: TaskKind::Generative,
                    })
                    .collect())
            }
            TaskKind::Discriminative => {
                let mut present: Vec<&str> = f.category_names().collect();
                present.shuffle(&mut rng);

                let mut partners: Vec<&str> = Vec::new();
                for (ctx, partner) in &self.co_occurrence {
                    if f.has_category(ctx) && !f.has_category(partner) && !partners.contains(&partner.as_str()) {
                        partners.push(partner);
                    }
                }
                partners.shuffle(&mut rng);
                let mut random: Vec<&str> = self
                    .vocabulary
                    .iter()
                    .map(String::as_str)
                    .filter(|c| !f.has_category(c) && !partners.contains(c))
                    .collect();
                random.shuffle(&mut rng);
                let absent: Vec<&str> = partners.into_iter().chain(random).collect();

                let n_present = n.div_ceil(2).min(present.len());
                let n_absent = (n - n_present).min(n_present + 1).min(absent.len());
                let n_present = n_present.min(n_absent + 1);

                let mut chosen: Vec<(&str, bool)> = present[..n_present]
                    .iter()
                    .map(|c| (*c, true))
                    .chain(absent[..n_absent].iter().map(|c| (*c, false)))
                    .collect();
                chosen.shuffle(&mut rng);
                Ok(chosen
                    .into_iter()
                    .enumerate()
                    .map(|(i, (c, _))| Question::existence(i as u64, c))
                    .collect())
            }
        }
    }
}

/// Question set with the default generator (COCO distractors).
pub fn generate_question_set(f: &FactSet, task: TaskKind, n: usize, seed: u64) -> Result<Vec<Question>> {
    QuestionGenerator::default().generate(f, task, n, seed)
}

/// Which trusted text a pair carries.
#[derive(Debug, Clone, Copy)]
pub enum TrustedMode<'a> {
    /// The full description for every question.
    General,
    /// The query-focused description derived with these facts.
    QueryFocused(&'a FactSet, &'a Backend),
}

pub fn build_contrast_pairs(
    img: &ImageRecord,
    t_plus: &FactualDescription,
    qs: &[Question],
    mode: TrustedMode<'_>,
) -> Result<Vec<ContrastPair>> {
    if qs.is_empty() {
        return Err(Error::EmptyQuestions);
    }
    qs.iter()
        .map(|q| {
            let trusted_text = match mode {
                TrustedMode::General => t_plus.text.clone(),
                TrustedMode::QueryFocused(f, backend) => query_focus(t_plus, f, q, backend)?,
            };
            Ok(ContrastPair {
                image_id: img.image_id,
                question_id: q.question_id,
                trusted_text,
                untrusted_is_image: true,
            })
        })
        .collect()
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::malformed(path.display(), format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub(crate) use template::plural;
