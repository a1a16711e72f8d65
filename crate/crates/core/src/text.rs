//! Small lexical helpers used by the director and the benchmark builder.

use std::collections::BTreeSet;

/// Whitespace-separated word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte offsets of case-sensitive whole-word occurrences of `needle`.
pub fn whole_word_matches(haystack: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    haystack
        .match_indices(needle)
        .filter(|(start, _)| {
            let before = haystack[..*start].chars().next_back();
            let after = haystack[start + needle.len()..].chars().next();
            !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
        })
        .map(|(start, _)| start)
        .collect()
}

pub fn contains_whole_word(haystack: &str, needle: &str) -> bool {
    !whole_word_matches(haystack, needle).is_empty()
}

/// Replaces every whole-word occurrence of `needle` with `replacement`.
pub fn replace_whole_word(haystack: &str, needle: &str, replacement: &str) -> String {
    let matches = whole_word_matches(haystack, needle);
    let mut out = String::with_capacity(haystack.len());
    let mut last = 0;
    for start in matches {
        out.push_str(&haystack[last..start]);
        out.push_str(replacement);
        last = start + needle.len();
    }
    out.push_str(&haystack[last..]);
    out
}

fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !is_word_char(c))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Jaccard overlap of the lowercase word sets of two texts.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let a = word_set(a);
    let b = word_set(b);
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}
