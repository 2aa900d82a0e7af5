//! Tokenization and case folding.
//!
//! A deliberately small replacement for a full rule-based tokenizer: text is split
//! on whitespace and sentence punctuation is detached from word boundaries.
//! Word-internal hyphens and apostrophes are kept.

const DETACHED: &[char] = &[
    '.', ',', '!', '?', ';', ':', '"', '(', ')', '[', ']', '{', '}', '«', '»', '„', '“', '”',
];

pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && DETACHED.contains(&chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut tail = Vec::new();
        while end > start && DETACHED.contains(&chars[end - 1]) {
            tail.push(chars[end - 1].to_string());
            end -= 1;
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Whitespace-only split, used for files that are already tokenized.
pub fn split_tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

pub fn fold(token: &str) -> String {
    token.to_lowercase()
}

pub fn fold_phrase(tokens: &[String]) -> String {
    tokens.iter().map(|t| fold(t)).collect::<Vec<_>>().join(" ")
}

/// True iff `needle` occurs as a contiguous token run inside `haystack`,
/// with `eq(needle_token, hay_token, is_last)` deciding token equality.
pub fn contains_run<F>(haystack: &[String], needle: &[String], mut eq: F) -> bool
where
    F: FnMut(&str, &str, bool) -> bool,
{
    if needle.is_empty() || needle.len() > haystack.len() {
        return needle.is_empty();
    }
    let last = needle.len() - 1;
    (0..=haystack.len() - needle.len()).any(|start| {
        needle
            .iter()
            .enumerate()
            .all(|(i, n)| eq(n, &haystack[start + i], i == last))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detaches_punctuation() {
        assert_eq!(
            tokenize("on Thursday. \"when the"),
            vec!["on", "Thursday", ".", "\"", "when", "the"]
        );
        assert_eq!(tokenize("Stellvertreter-quelle"), vec!["Stellvertreter-quelle"]);
        assert_eq!(tokenize("(a)"), vec!["(", "a", ")"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn contiguous_runs() {
        let hay: Vec<String> = split_tokens("a b c d");
        let eq = |a: &str, b: &str, _| a == b;
        assert!(contains_run(&hay, &split_tokens("b c"), eq));
        assert!(!contains_run(&hay, &split_tokens("b d"), eq));
        assert!(!contains_run(&hay, &split_tokens("a b c d e"), eq));
    }
}
