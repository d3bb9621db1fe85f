//! Token inventory and prompt layout for the toy model.
//!
//! ```text
//! image mode: <bos> <img> v:cat c:color p:rc ... </img> <q> words <a> answer <eos>
//! text mode:  <bos> <txt> words ...              </txt> <q> words <a> answer <eos>
//! ```

use std::collections::HashMap;

use super::model::ComposedToken;
use super::world::{SyntheticScene, World, SCENE_SHAPES};
use crate::facts::Palette;
use crate::textualizer::plural;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMG: &str = "<img>";
pub const IMG_END: &str = "</img>";
pub const TXT: &str = "<txt>";
pub const TXT_END: &str = "</txt>";
pub const Q: &str = "<q>";
pub const A: &str = "<a>";
pub const UNK: &str = "<unk>";
/// Answer tokens; distinct from the text words "yes" and "no".
pub const YES: &str = "<yes>";
pub const NO: &str = "<no>";

/// Words dropped from text before tokenization.
pub const STOPWORDS: [&str; 12] = [
    "the", "a", "an", "and", "of", "to", "in", "image", "contains", "this", "is", "there",
];

const TEMPLATE_WORDS: [&str; 23] = [
    "are", "left", "right", "above", "below", "overlapping", "first", "second", "third", "fourth",
    "describe", "no", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "other",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    /// Inventory for a world: specials, visual tokens, then words.
    pub fn for_categories(categories: &[String], grid: usize) -> Vocab {
        let mut tokens: Vec<String> = [BOS, EOS, IMG, IMG_END, TXT, TXT_END, Q, A, UNK, YES, NO]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let palette = Palette::default();
        for c in categories {
            tokens.push(format!("v:{c}"));
        }
        for name in palette.names() {
            tokens.push(format!("c:{name}"));
        }
        for r in 0..grid {
            for c in 0..grid {
                tokens.push(format!("p:{r}{c}"));
            }
        }
        let mut words: Vec<String> = categories.to_vec();
        words.extend(palette.names().map(str::to_string));
        words.extend(SCENE_SHAPES.iter().map(|s| s.as_str().to_string()));
        words.push("irregular".into());
        words.extend(TEMPLATE_WORDS.iter().map(|s| s.to_string()));
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn for_world(world: &World) -> Vocab {
        Vocab::for_categories(&world.categories, world.config.grid)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercases, drops punctuation and stopwords, folds plurals.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split(|c: char| !c.is_alphanumeric() && c != '-')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .filter(|w| !STOPWORDS.contains(&w.as_str()))
            .map(|w| {
                if let Some(&id) = self.index.get(&w) {
                    return id;
                }
                for cut in [2, 1] {
                    if w.len() > cut {
                        let stem = &w[..w.len() - cut];
                        if let Some(&id) = self.index.get(stem) {
                            if plural(stem) == w || cut == 1 {
                                return id;
                            }
                        }
                    }
                }
                self.index[UNK]
            })
            .collect()
    }

    /// `category color position` triples in scene order.
    pub fn encode_scene(&self, scene: &SyntheticScene) -> Vec<u32> {
        scene
            .objects
            .iter()
            .flat_map(|o| {
                [
                    self.id(&format!("v:{}", o.category)),
                    self.id(&format!("c:{}", o.color)),
                    self.id(&format!("p:{}{}", o.cell.0, o.cell.1)),
                ]
            })
            .collect()
    }

    /// Visual tokens as their word (or themselves) plus the `<img>` row.
    pub fn composed_tokens(&self) -> Vec<ComposedToken> {
        let modality = self.index[IMG];
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.starts_with("v:") || t.starts_with("c:") || t.starts_with("p:"))
            .map(|(i, t)| {
                let base = self.index.get(&t[2..]).copied().unwrap_or(i as u32);
                ComposedToken {
                    token: i as u32,
                    base,
                    modality,
                }
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Evidence channel of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context<'a> {
    Image(&'a SyntheticScene),
    Text(&'a str),
}

/// Prompt tokens ending with `<a>`.
pub fn prompt(vocab: &Vocab, context: Context<'_>, question: &str) -> Vec<u32> {
    let mut out = vec![vocab.id(BOS)];
    match context {
        Context::Image(scene) => {
            out.push(vocab.id(IMG));
            out.extend(vocab.encode_scene(scene));
            out.push(vocab.id(IMG_END));
        }
        Context::Text(text) => {
            out.push(vocab.id(TXT));
            out.extend(vocab.encode_text(text));
            out.push(vocab.id(TXT_END));
        }
    }
    out.push(vocab.id(Q));
    out.extend(vocab.encode_text(question));
    out.push(vocab.id(A));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_encoding_drops_stopwords_and_folds_plurals() {
        let v = Vocab::for_categories(&["dog".into(), "bus".into(), "knife".into()], 4);
        let ids = v.encode_text("There are 2 dogs and 1 bus. The dog is red.");
        assert_eq!(v.decode(&ids), "are 2 dog 1 bus dog red");
        assert_eq!(v.decode(&v.encode_text("two buses")), "<unk> bus");
        assert_eq!(v.decode(&v.encode_text("Is there a knife in the image?")), "knife");
    }
}
