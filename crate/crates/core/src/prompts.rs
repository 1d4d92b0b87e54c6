//! Prompt templates shipped under `assets/prompts/`.
//!
//! Placeholders are written `{{name}}`. Rendering fails on a placeholder
//! with no value and on a value with no placeholder, so template and caller
//! cannot drift apart silently. Substituted values are never re-scanned.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template {template}: no value for placeholder {{{{{name}}}}}")]
    Missing { template: &'static str, name: String },
    #[error("template {template}: value {name} has no placeholder")]
    Unused { template: &'static str, name: String },
    #[error("template {template}: unterminated placeholder")]
    Unterminated { template: &'static str },
}

#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! asset {
    ($path:literal) => {
        Template {
            name: $path,
            text: include_str!(concat!("../assets/prompts/", $path)),
        }
    };
}

pub const CAPTION_SHORT: Template = asset!("captioning/short.txt");
pub const CAPTION_MEDIUM: Template = asset!("captioning/medium.txt");
pub const CAPTION_LONG: Template = asset!("captioning/long.txt");
pub const CONTEXTUALIZE: Template = asset!("memory/contextualize.txt");
pub const CONTEXTUALIZE_REMINDER: Template = asset!("memory/format_reminder.txt");
pub const SYNOPSIS: Template = asset!("memory/synopsis.txt");
pub const QA: Template = asset!("grounding/qa.txt");
pub const VERIFICATION: Template = asset!("grounding/verification.txt");
pub const QA_FORMAT_REMINDER: Template = asset!("grounding/format_reminder.txt");
pub const QUESTION_GENERATION: Template = asset!("dataset/question_generation.txt");

impl Template {
    pub fn placeholders(&self) -> Result<Vec<&'static str>, PromptError> {
        let mut out = Vec::new();
        let mut rest = self.text;
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or(PromptError::Unterminated { template: self.name })?;
            out.push(&after[..close]);
            rest = &after[close + 2..];
        }
        Ok(out)
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let values: BTreeMap<&str, &str> = vars.iter().copied().collect();
        let mut used = BTreeMap::new();
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text;
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or(PromptError::Unterminated { template: self.name })?;
            let name = &after[..close];
            let value = values.get(name).ok_or_else(|| PromptError::Missing {
                template: self.name,
                name: name.to_string(),
            })?;
            out.push_str(value);
            used.insert(name, ());
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        if let Some((name, _)) = vars.iter().find(|(n, _)| !used.contains_key(n)) {
            return Err(PromptError::Unused {
                template: self.name,
                name: name.to_string(),
            });
        }
        Ok(out.trim_end().to_string())
    }
}

/// Formats seconds without a trailing `.0` for whole values (`10`, `12.5`).
pub fn fmt_seconds(s: f64) -> String {
    format!("{s}")
}
