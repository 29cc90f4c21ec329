//! Answer canonicalization for scoring.

use crate::agent::prompts::choice_letter;

/// Canonical form of any answer that cannot be matched; always scored wrong.
pub const INVALID: &str = "INVALID";

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Strips wrappers such as `(b)`, `b)`, `b.`, `Answer: b`.
fn strip_wrappers(s: &str) -> &str {
    let mut s = s.trim();
    for prefix in ["answer:", "answer :", "final answer:"] {
        if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
            s = s[prefix.len()..].trim();
        }
    }
    s.trim_start_matches(['(', '[', '"', '\''])
        .trim_end_matches([')', ']', '.', ':', '"', '\''])
        .trim()
}

/// Maps a raw answer to a choice letter, a vocabulary label, or [`INVALID`].
///
/// Matching is exact after trimming and case folding; there is no fuzzy
/// matching.
pub fn normalize_answer(raw: &str, choices: Option<&[String]>, vocabulary: &[String]) -> String {
    let core = strip_wrappers(raw);
    if let Some(choices) = choices.filter(|c| !c.is_empty()) {
        let mut chars = core.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if c.is_ascii_alphabetic() {
                let idx = (c.to_ascii_uppercase() as u8 - b'A') as usize;
                if idx < choices.len() {
                    return choice_letter(idx).to_string();
                }
            }
        }
        let folded = fold(core);
        let full = fold(raw);
        if let Some(i) = choices.iter().position(|c| fold(c) == folded || fold(c) == full) {
            return choice_letter(i).to_string();
        }
        return INVALID.to_string();
    }
    let folded = fold(core);
    vocabulary
        .iter()
        .find(|v| fold(v) == folded || fold(v) == fold(raw))
        .cloned()
        .unwrap_or_else(|| INVALID.to_string())
}
