//! String normalization and fuzzy scoring shared by the matcher and metrics.

use std::collections::BTreeSet;

/// Normalized token set: lowercase, punctuation-free, nonempty tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSet(BTreeSet<String>);

impl TokenSet {
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn union(&self, other: &TokenSet) -> TokenSet {
        TokenSet(self.0.union(&other.0).cloned().collect())
    }
}

impl FromIterator<String> for TokenSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        TokenSet(iter.into_iter().filter(|t| !t.is_empty()).collect())
    }
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !is_punctuation(*c))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn normalize_tokens(text: &str) -> TokenSet {
    tokenize(text).into_iter().collect()
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercase and trim.
pub fn normalize_light(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Lowercase, trim and collapse internal whitespace runs to one space.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (short, long) = if a.len() <= b.len() {
        (&a, &b)
    } else {
        (&b, &a)
    };
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let above = row[j + 1];
            let cost = usize::from(lc != sc);
            row[j + 1] = (above + 1).min(row[j] + 1).min(diag + cost);
            diag = above;
        }
    }
    row[short.len()]
}

/// Edit distance divided by the longer length; 0 when both are empty.
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    edit_distance(a, b) as f64 / longest as f64
}

/// Best similarity of `s` to any of `answers`, after lowercasing and trimming.
///
/// Returns `None` when `answers` is empty.
pub fn score_text<S: AsRef<str>>(s: &str, answers: &[S]) -> Option<f64> {
    let s = normalize_light(s);
    answers
        .iter()
        .map(|a| 1.0 - normalized_levenshtein(&s, &normalize_light(a.as_ref())))
        .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.max(v))))
}

/// Best similarity of a name against any token of `tokens`; 0 for an empty set.
pub fn score_name(name: &str, tokens: &TokenSet) -> f64 {
    let name = normalize_light(name);
    tokens
        .iter()
        .map(|u| 1.0 - normalized_levenshtein(&name, u))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(words: &[&str]) -> TokenSet {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn tokens_are_normalized() {
        assert_eq!(normalize_tokens("Hello, World!"), set(&["hello", "world"]));
        assert!(normalize_tokens("").is_empty());
        assert_eq!(normalize_tokens("A a A."), set(&["a"]));
        assert!(normalize_tokens(" ... ").is_empty());
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(normalized_levenshtein("abc", "abc"), 0.0);
        assert!((normalized_levenshtein("hello", "help") - 0.4).abs() < 1e-15);
        assert_eq!(normalized_levenshtein("", "x"), 1.0);
        assert_eq!(normalized_levenshtein("", ""), 0.0);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
    }

    #[test]
    fn score_text_examples() {
        assert_eq!(score_text("PlayStation ", &["playstation"]), Some(1.0));
        let near = score_text("playstatlon", &["playstation"]).unwrap();
        assert!((near - (1.0 - 1.0 / 11.0)).abs() < 1e-12);
        let far = score_text("zzzzzzzzzzzzzzzzzzzz", &["ab"]).unwrap();
        assert_eq!(far, 0.0);
        assert_eq!(score_text::<&str>("x", &[]), None);
    }

    #[test]
    fn score_name_examples() {
        assert_eq!(score_name("car", &set(&["red", "car"])), 1.0);
        let s = score_name("persn", &set(&["person"]));
        assert!((s - (1.0 - 1.0 / 6.0)).abs() < 1e-12);
        assert_eq!(score_name("car", &TokenSet::default()), 0.0);
    }

    #[test]
    fn answer_normalization_collapses_whitespace() {
        assert_eq!(normalize_answer("  Red \t  CAR "), "red car");
    }
}
