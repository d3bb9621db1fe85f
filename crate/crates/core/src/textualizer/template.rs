//! Deterministic sentence templates for fact sets.

use crate::facts::{AttributeKind, FactSet, Relation};

pub(crate) fn article(noun: &str) -> &'static str {
    match noun.chars().next() {
        Some(c) if "aeiou".contains(c.to_ascii_lowercase()) => "an",
        _ => "a",
    }
}

pub(crate) fn plural(noun: &str) -> String {
    if noun.ends_with('s') || noun.ends_with('x') || noun.ends_with("ch") || noun.ends_with("sh") {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

fn ordinal(i: usize) -> String {
    const WORDS: [&str; 10] = [
        "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
        "tenth",
    ];
    WORDS
        .get(i)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("{}th", i + 1))
}

/// Noun phrase naming one object, e.g. "the dog" or "the second dog".
fn object_phrase(f: &FactSet, object_id: i64) -> Option<String> {
    let fact = f.categories.iter().find(|c| c.object_ids.contains(&object_id))?;
    if fact.object_ids.len() == 1 {
        return Some(format!("the {}", fact.category));
    }
    let idx = fact.object_ids.iter().position(|&id| id == object_id)?;
    Some(format!("the {} {}", ordinal(idx), fact.category))
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn relation_phrase(r: Relation) -> &'static str {
    match r {
        Relation::LeftOf => "is to the left of",
        Relation::RightOf => "is to the right of",
        Relation::Above => "is above",
        Relation::Below => "is below",
        Relation::Overlapping => "is overlapping",
    }
}

/// Renders the description: categories, counts, colors, shapes, relations.
pub(crate) fn render(f: &FactSet) -> String {
    let mut sentences: Vec<String> = Vec::new();

    let names: Vec<String> = f
        .categories
        .iter()
        .map(|c| format!("{} {}", article(&c.category), c.category))
        .collect();
    sentences.push(format!("The image contains {}.", join_list(&names)));

    let counts: Vec<(usize, String)> = f
        .categories
        .iter()
        .filter_map(|c| f.count_of(&c.category).map(|n| (n, c.category.clone())))
        .map(|(n, c)| (n, if n == 1 { format!("1 {c}") } else { format!("{n} {}", plural(&c)) }))
        .collect();
    if let Some(&(first, _)) = counts.first() {
        let verb = if first == 1 { "is" } else { "are" };
        let items: Vec<String> = counts.into_iter().map(|(_, s)| s).collect();
        sentences.push(format!("There {verb} {}.", join_list(&items)));
    }

    for kind in [AttributeKind::Color, AttributeKind::Shape] {
        for a in f.attributes.iter().filter(|a| a.kind == kind) {
            if let Some(subject) = object_phrase(f, a.object_id) {
                sentences.push(format!("{} is {}.", capitalize(&subject), a.value));
            }
        }
    }

    for r in &f.relations {
        if let (Some(s), Some(o)) = (object_phrase(f, r.subject_id), object_phrase(f, r.object_id)) {
            sentences.push(format!("{} {} {o}.", capitalize(&s), relation_phrase(r.relation)));
        }
    }
    sentences.join(" ")
}

/// Splits template text into sentences (terminated by '.').
pub(crate) fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'.' && (i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace()) {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whole-word, plural-tolerant category match.
pub(crate) fn mentions(sentence: &str, category: &str) -> bool {
    let hay = words(sentence);
    let needle = words(category);
    if needle.is_empty() || hay.len() < needle.len() {
        return false;
    }
    let last = needle.len() - 1;
    let plural_last = plural(&needle[last]);
    hay.windows(needle.len()).any(|w| {
        w[..last] == needle[..last] && (w[last] == needle[last] || w[last] == plural_last)
    })
}
