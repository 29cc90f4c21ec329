//! Prompt templates. Templates are text files with `${name}` placeholders,
//! selected by id; the loop only fills them in.

#[derive(Debug, Clone, Copy)]
pub struct PromptSet {
    pub id: &'static str,
    pub initial: &'static str,
    pub tool_line: &'static str,
    pub crop: &'static str,
    pub tool_result: &'static str,
    pub tool_error: &'static str,
    pub correction: &'static str,
    pub forced_final: &'static str,
    pub baseline_thumbnail: &'static str,
    pub baseline_patch: &'static str,
}

pub const DEFAULT_PROMPT_ID: &str = "giant-v1";

const GIANT_V1: PromptSet = PromptSet {
    id: "giant-v1",
    initial: include_str!("../../prompts/giant-v1/initial.txt"),
    tool_line: include_str!("../../prompts/giant-v1/tool_line.txt"),
    crop: include_str!("../../prompts/giant-v1/crop.txt"),
    tool_result: include_str!("../../prompts/giant-v1/tool_result.txt"),
    tool_error: include_str!("../../prompts/giant-v1/tool_error.txt"),
    correction: include_str!("../../prompts/giant-v1/correction.txt"),
    forced_final: include_str!("../../prompts/giant-v1/forced_final.txt"),
    baseline_thumbnail: include_str!("../../prompts/giant-v1/baseline_thumbnail.txt"),
    baseline_patch: include_str!("../../prompts/giant-v1/baseline_patch.txt"),
};

impl PromptSet {
    pub fn by_id(id: &str) -> Option<PromptSet> {
        match id {
            "giant-v1" => Some(GIANT_V1),
            _ => None,
        }
    }
}

/// Replaces `${key}` placeholders; unknown placeholders are left as-is.
pub fn render(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("${{{key}}}"), value);
    }
    out.trim_end().to_string()
}

/// `Choices:` block with lettered options, or an empty string.
pub fn format_choices(choices: Option<&[String]>) -> String {
    match choices {
        Some(list) if !list.is_empty() => {
            let mut s = String::from("Choices:\n");
            for (i, c) in list.iter().enumerate() {
                s.push_str(&format!("{}) {}\n", choice_letter(i), c));
            }
            s
        }
        _ => String::new(),
    }
}

pub fn choice_letter(index: usize) -> char {
    (b'A' + (index % 26) as u8) as char
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_filled() {
        let p = PromptSet::by_id(DEFAULT_PROMPT_ID).unwrap();
        let text = render(
            p.forced_final,
            &[("max_crops", "19".into()), ("max_steps", "20".into())],
        );
        assert!(text.contains("all 19 crops"));
        assert!(text.contains("iteration limit 20"));
        assert!(!text.contains("${"));
        assert!(PromptSet::by_id("nope").is_none());
    }

    #[test]
    fn choices_are_lettered() {
        let c = vec!["alpha".to_string(), "beta".to_string()];
        assert_eq!(format_choices(Some(&c)), "Choices:\nA) alpha\nB) beta\n");
        assert_eq!(format_choices(None), "");
    }
}
