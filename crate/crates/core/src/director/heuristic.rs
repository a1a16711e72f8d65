//! Rule-based stand-in for a chat model, answering the builtin director and
//! benchmark prompts offline. Every answer is a pure function of the
//! message list.

use serde_json::json;

use super::templates::TemplateSet;
use super::RETRY_PREFIX;
use crate::backends::{LlmClient, Message, Role};
use crate::error::{Error, Result};
use crate::text::{contains_whole_word, replace_whole_word};
use crate::types::derive_seed;

const TYPE_NOUNS: [&str; 24] = [
    "man", "woman", "girl", "boy", "child", "baby", "dog", "puppy", "cat", "kitten", "gorilla",
    "fox", "bear", "wolf", "horse", "bird", "owl", "dragon", "robot", "knight", "wizard",
    "monkey", "rabbit", "lion",
];

const NOT_ADJECTIVES: [&str; 12] = [
    "a", "an", "the", "his", "her", "their", "its", "named", "called", "and", "of", "with",
];

const NOT_NAMES: [&str; 16] = [
    "I", "The", "A", "An", "And", "But", "Then", "When", "While", "After", "Before", "He", "She",
    "They", "It", "One",
];

const POOL_NAMES: [&str; 32] = [
    "Arlo", "Bea", "Cosmo", "Dalia", "Ezra", "Fern", "Gus", "Hana", "Ivo", "Juno", "Kip", "Lumi",
    "Milo", "Nell", "Otto", "Pia", "Quill", "Rosa", "Sol", "Tess", "Uma", "Vik", "Wren", "Xavi",
    "Yara", "Zeb", "Alba", "Bram", "Cleo", "Dex", "Elio", "Faye",
];

const POOL_KINDS: [(&str, &str); 8] = [
    ("girl", "freckled girl with red pigtails and a denim jacket"),
    ("man", "bearded man with a grey flat cap and a tweed coat"),
    ("dog", "shaggy white terrier with a blue bandana"),
    ("woman", "tall woman with a black bob and a mustard raincoat"),
    ("cat", "sleek black cat with green eyes and a silver bell"),
    ("boy", "small boy with curly hair and oversized goggles"),
    ("robot", "rusty round robot with glowing teal eyes"),
    ("fox", "lean red fox with a white-tipped tail"),
];

const SETTINGS: [&str; 6] = [
    "in a sunlit meadow",
    "on a busy harbor pier",
    "inside a cozy library",
    "at a snowy mountain cabin",
    "in a neon-lit night market",
    "beside a quiet forest lake",
];

const ACTIVITIES: [&str; 4] = [
    "share a picnic",
    "explore together",
    "watch the sunset",
    "race each other",
];

pub struct HeuristicLlm {
    templates: TemplateSet,
    model_id: String,
}

impl HeuristicLlm {
    pub fn new(templates: TemplateSet) -> Self {
        Self {
            templates,
            model_id: "heuristic-director".into(),
        }
    }
}

impl Default for HeuristicLlm {
    fn default() -> Self {
        Self::new(TemplateSet::builtin())
    }
}

fn field<'t>(request: &'t str, label: &str) -> &'t str {
    request
        .lines()
        .find_map(|l| l.strip_prefix(label).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_default()
        .trim()
}

fn block_after<'t>(request: &'t str, label: &str) -> &'t str {
    request
        .split_once(&format!("{label}:\n"))
        .map(|(_, rest)| rest.trim())
        .unwrap_or_default()
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            let s = current.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            current.clear();
        }
    }
    let s = current.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

fn words(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
            w.strip_suffix("'s").unwrap_or(w).to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_capitalized(word: &str) -> bool {
    word.len() > 1
        && word.chars().next().is_some_and(char::is_uppercase)
        && word.chars().all(char::is_alphabetic)
}

/// Capitalised words seen at least once away from a sentence start, in
/// order of first appearance.
fn story_names(story: &str) -> Vec<String> {
    let mut confirmed = Vec::new();
    for s in sentences(story) {
        for (i, w) in words(&s).iter().enumerate() {
            if i > 0 && is_capitalized(w) && !NOT_NAMES.contains(&w.as_str()) && !confirmed.contains(w) {
                confirmed.push(w.clone());
            }
        }
    }
    let mut ordered = Vec::new();
    for s in sentences(story) {
        for w in words(&s) {
            if confirmed.contains(&w) && !ordered.contains(&w) {
                ordered.push(w);
            }
        }
    }
    ordered
}

/// Type noun closest to the first mention of `name`, with the adjective
/// directly before it.
fn describe(story: &str, name: &str) -> (String, Option<String>) {
    for s in sentences(story) {
        let ws = words(&s);
        let Some(pos) = ws.iter().position(|w| w == name) else {
            continue;
        };
        let best = ws
            .iter()
            .enumerate()
            .filter(|(_, w)| TYPE_NOUNS.contains(&w.to_lowercase().as_str()))
            .min_by_key(|(i, _)| i.abs_diff(pos));
        if let Some((i, noun)) = best {
            let adjective = i
                .checked_sub(1)
                .map(|j| ws[j].to_lowercase())
                .filter(|a| {
                    !NOT_ADJECTIVES.contains(&a.as_str())
                        && a.chars().all(char::is_alphabetic)
                        && !is_capitalized(&ws[i - 1])
                });
            return (noun.to_lowercase(), adjective);
        }
    }
    ("person".into(), None)
}

fn pick<T>(items: &[T], seed: u64, offset: usize) -> &T {
    &items[(seed as usize).wrapping_add(offset) % items.len()]
}

fn truncate_words(text: &str, limit: usize) -> String {
    text.split_whitespace().take(limit.max(1)).collect::<Vec<_>>().join(" ")
}

impl HeuristicLlm {
    fn answer(&self, stage: &str, request: &str) -> String {
        let seed = derive_seed(0, request);
        match stage {
            "subjects" => {
                let max: usize = field(request, "Max subjects").parse().unwrap_or(4);
                let names: Vec<_> = story_names(block_after(request, "Story"))
                    .into_iter()
                    .take(max)
                    .map(|n| json!({ "name": n }))
                    .collect();
                json!({ "has_characters": !names.is_empty(), "subjects": names }).to_string()
            }
            "subject_details" => {
                let (noun, adjective) = describe(block_after(request, "Story"), field(request, "Subject"));
                let look = match adjective {
                    Some(a) => format!("{a} {noun}"),
                    None => noun.clone(),
                };
                json!({
                    "portrait_prompt": format!("a {look}, full body portrait, plain studio background"),
                    "type_token": noun,
                    "style_tags": [],
                })
                .to_string()
            }
            "descriptor" => {
                let portrait = field(request, "Portrait");
                let head = portrait.split(',').next().unwrap_or(portrait);
                let head = head
                    .strip_prefix("a ")
                    .or_else(|| head.strip_prefix("an "))
                    .unwrap_or(head);
                let max: usize = field(request, "Max words").parse().unwrap_or(6);
                json!({ "short_descriptor": truncate_words(head, max) }).to_string()
            }
            "scenes" => {
                let all = sentences(block_after(request, "Story"));
                let limit: usize = field(request, "Word limit").parse().unwrap_or(40);
                let count: usize = field(request, "Scene count")
                    .parse()
                    .unwrap_or_else(|_| all.len().clamp(1, 12));
                let scenes: Vec<String> = (0..count)
                    .map(|i| {
                        if all.is_empty() {
                            return "An empty landscape".to_string();
                        }
                        if count <= all.len() {
                            let (from, to) = (i * all.len() / count, (i + 1) * all.len() / count);
                            truncate_words(&all[from..to].join(" "), limit)
                        } else {
                            truncate_words(&all[i % all.len()], limit)
                        }
                    })
                    .collect();
                json!({ "scenes": scenes }).to_string()
            }
            "presence" => {
                let present = contains_whole_word(field(request, "Scene"), field(request, "Subject"));
                json!({ "present": present }).to_string()
            }
            "rewrite" => {
                let mut scene = field(request, "Scene").to_string();
                for line in block_after(request, "Replacements").lines() {
                    if let Some((name, descriptor)) = line.split_once(" -> ") {
                        let (name, descriptor) = (name.trim(), descriptor.trim());
                        scene = if contains_whole_word(&scene, name) {
                            replace_whole_word(&scene, name, &format!("the {descriptor}"))
                        } else {
                            format!("{scene}, with the {descriptor}")
                        };
                    }
                }
                json!({ "rewritten": scene }).to_string()
            }
            "pool" => {
                let n: usize = field(request, "Count").parse().unwrap_or(1);
                let avoid: Vec<&str> = field(request, "Avoid names").split(", ").collect();
                let start = (seed % POOL_NAMES.len() as u64) as usize;
                let subjects: Vec<_> = (0..POOL_NAMES.len())
                    .map(|i| POOL_NAMES[(start + i) % POOL_NAMES.len()])
                    .filter(|n| !avoid.contains(n))
                    .take(n)
                    .map(|name| {
                        let (noun, look) = pick(&POOL_KINDS, derive_seed(seed, name), 0);
                        json!({
                            "name": name,
                            "portrait_prompt": format!("a {look}, known as {name}"),
                            "short_descriptor": look.split(" with ").next().unwrap_or(noun),
                            "type_token": noun,
                        })
                    })
                    .collect();
                json!({ "subjects": subjects }).to_string()
            }
            "case" => {
                let limit: usize = field(request, "Word limit").parse().unwrap_or(40);
                let names: Vec<&str> = block_after(request, "Subjects")
                    .lines()
                    .filter_map(|l| l.strip_prefix("- "))
                    .filter_map(|l| l.split(" (").next())
                    .collect();
                let setting = pick(&SETTINGS, seed, 0);
                let prompt = match names.as_slice() {
                    [] => format!("An empty scene {setting} at golden hour"),
                    [one] => format!("{one} stands alone {setting}"),
                    [init @ .., last] => format!(
                        "{} and {last} {} {setting}",
                        init.join(", "),
                        pick(&ACTIVITIES, seed, 1)
                    ),
                };
                json!({ "scene_prompt": truncate_words(&prompt, limit) }).to_string()
            }
            _ => String::new(),
        }
    }
}

impl LlmClient for HeuristicLlm {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, messages: &[Message]) -> Result<String> {
        let system = messages
            .first()
            .filter(|m| m.role == Role::System)
            .ok_or_else(|| Error::LlmTransport("conversation has no system message".into()))?;
        let stage = self
            .templates
            .stage_of(&system.content)
            .ok_or_else(|| Error::LlmTransport("prompt does not match any known template".into()))?;
        let request = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User && !m.content.starts_with(RETRY_PREFIX))
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        Ok(self.answer(stage, request))
    }
}
