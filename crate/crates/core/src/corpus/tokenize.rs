//! Whitespace + punctuation tokenizer.
//!
//! Text is lowercased and split on whitespace; leading and trailing ASCII
//! punctuation is peeled off each chunk into single-character tokens, while
//! punctuation inside a word (`don't`, `e-mail`) is kept.

/// Splits raw text into lowercase tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && chars[start].is_ascii_punctuation() {
            out.push(chars[start].to_string());
            start += 1;
        }
        let mut trailing = Vec::new();
        while end > start && chars[end - 1].is_ascii_punctuation() {
            trailing.push(chars[end - 1].to_string());
            end -= 1;
        }
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Joins tokens with single spaces. `tokenize(detokenize(s)) == s` for any
/// sequence produced by [`tokenize`].
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}
