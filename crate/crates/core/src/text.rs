//! Small text helpers shared by the builders: normalization, rule-based
//! number inflection, and word tokenization.

/// Lowercases, trims, and collapses internal whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Trims and collapses whitespace but keeps case.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

// (singular, plural)
const IRREGULAR: &[(&str, &str)] = &[
    ("person", "people"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("goose", "geese"),
    ("mouse", "mice"),
    ("ox", "oxen"),
    ("sheep", "sheep"),
    ("deer", "deer"),
    ("fish", "fish"),
    ("glasses", "glasses"),
    ("skis", "skis"),
    ("pants", "pants"),
    ("jeans", "jeans"),
    ("shorts", "shorts"),
    ("scissors", "scissors"),
    ("knife", "knives"),
    ("leaf", "leaves"),
    ("shelf", "shelves"),
    ("wolf", "wolves"),
    ("life", "lives"),
    ("wife", "wives"),
    ("bus", "buses"),
    ("cactus", "cacti"),
];

// Singular nouns ending in "s" that the suffix rules would mangle.
const S_SINGULARS: &[&str] = &["glass", "grass", "dress", "bus", "cross", "class", "boss", "bass", "gas", "lens", "canvas", "tennis"];

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Singularizes the last word of a (lowercase) noun phrase.
pub fn singularize(word: &str) -> String {
    let w = word.trim();
    if let Some((head, last)) = w.rsplit_once(' ') {
        return format!("{head} {}", singularize(last));
    }
    if let Some((s, _)) = IRREGULAR.iter().find(|(_, p)| *p == w) {
        return (*s).to_string();
    }
    if IRREGULAR.iter().any(|(s, _)| *s == w) || S_SINGULARS.contains(&w) {
        return w.to_string();
    }
    if w.len() > 3 && w.ends_with("ies") {
        return format!("{}y", &w[..w.len() - 3]);
    }
    for suffix in ["ches", "shes", "sses", "xes", "zes"] {
        if w.ends_with(suffix) {
            return w[..w.len() - 2].to_string();
        }
    }
    if w.len() > 3 && w.ends_with("oes") {
        return w[..w.len() - 2].to_string();
    }
    if w.len() > 2 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

/// Pluralizes the last word of a (lowercase) noun phrase.
pub fn pluralize(word: &str) -> String {
    let w = word.trim();
    if let Some((head, last)) = w.rsplit_once(' ') {
        return format!("{head} {}", pluralize(last));
    }
    if let Some((_, p)) = IRREGULAR.iter().find(|(s, _)| *s == w) {
        return (*p).to_string();
    }
    let mut chars = w.chars().rev();
    let last = chars.next();
    let before = chars.next();
    match (before, last) {
        (Some(b), Some('y')) if !is_vowel(b) => format!("{}ies", &w[..w.len() - 1]),
        (_, Some('s' | 'x' | 'z')) => format!("{w}es"),
        (Some('c' | 's'), Some('h')) => format!("{w}es"),
        _ => format!("{w}s"),
    }
}

/// Splits a question into lowercase word tokens; punctuation is dropped.
pub fn tokenize(question: &str) -> Vec<String> {
    question
        .split(|c: char| c.is_whitespace() || matches!(c, '?' | ',' | '.' | '!' | ';' | ':' | '"'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Uppercases the first character.
pub fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
