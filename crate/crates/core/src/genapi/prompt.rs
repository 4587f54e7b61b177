//! Prompt templates.
//!
//! Placeholders are written `{name}`. A span in square brackets is optional:
//! it is kept only when every placeholder inside it has a non-empty value,
//! which lets one template serve with and without a label, keyword, tone or
//! word target. Brackets do not nest.

use serde::{Deserialize, Serialize};

use crate::config::VariationMethod;

pub const RANDOM_PLACEHOLDERS: &[&str] = &["label", "keyword", "word_count"];
pub const PARAPHRASE_PLACEHOLDERS: &[&str] = &["input", "tone", "word_count"];
pub const FILL_PLACEHOLDERS: &[&str] = &["masked_input", "tone", "word_count"];
pub const DEMO_PLACEHOLDERS: &[&str] = &["input", "output"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub random_template: String,
    pub paraphrase_template: String,
    pub fill_template: String,
    pub demonstration_template: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            random_template: "Please write a short text[ in the category \"{label}\"]\
                [ about {keyword}][ with {word_count} words]."
                .to_string(),
            paraphrase_template: "Please rephrase the below sentences[ {tone}]\
                [ with {word_count} words]:\nInput: {input}\nOutput:"
                .to_string(),
            fill_template: "Please fill in the blanks for the below sentences[ {tone}]\
                [ with {word_count} words]:\nInput: {masked_input}\nOutput:"
                .to_string(),
            demonstration_template: "Input: {input}\nOutput: {output}\n\n".to_string(),
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Var(&'a str),
}

fn pieces(s: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            out.push(Piece::Text(&rest[..open]));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| format!("unclosed placeholder in {s:?}"))?;
        out.push(Piece::Var(&rest[open + 1..open + close]));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    Ok(out)
}

/// Splits into (is_optional, body) spans.
fn spans(template: &str) -> Result<Vec<(bool, &str)>, String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('[') {
        if let Some(stray) = rest[..open].find(']') {
            return Err(format!("unbalanced ']' at offset {stray} in {template:?}"));
        }
        out.push((false, &rest[..open]));
        let close = rest[open..]
            .find(']')
            .ok_or_else(|| format!("unclosed '[' in {template:?}"))?;
        let body = &rest[open + 1..open + close];
        if body.contains('[') {
            return Err(format!("nested '[' in {template:?}"));
        }
        out.push((true, body));
        rest = &rest[open + close + 1..];
    }
    if rest.contains(']') {
        return Err(format!("unbalanced ']' in {template:?}"));
    }
    out.push((false, rest));
    Ok(out)
}

/// Placeholder names used by `template`.
pub fn placeholders(template: &str) -> Result<Vec<String>, String> {
    let mut names = Vec::new();
    for (_, body) in spans(template)? {
        for p in pieces(body)? {
            if let Piece::Var(v) = p {
                names.push(v.to_string());
            }
        }
    }
    Ok(names)
}

/// Fills `template`. Missing or empty values drop their optional span, or
/// render as nothing outside one.
pub fn render(template: &str, vars: &[(&str, Option<&str>)]) -> String {
    let lookup = |name: &str| {
        vars.iter()
            .find(|(k, _)| *k == name)
            .and_then(|(_, v)| *v)
            .filter(|v| !v.is_empty())
    };
    let mut out = String::new();
    // templates are validated up front; an invalid one renders verbatim
    let Ok(spans) = spans(template) else {
        return template.to_string();
    };
    for (optional, body) in spans {
        let Ok(parts) = pieces(body) else {
            out.push_str(body);
            continue;
        };
        if optional
            && parts
                .iter()
                .any(|p| matches!(p, Piece::Var(v) if lookup(v).is_none()))
        {
            continue;
        }
        for p in parts {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Var(v) => out.push_str(lookup(v).unwrap_or("")),
            }
        }
    }
    out
}

impl PromptTemplate {
    /// Problems with the templates; empty when valid.
    pub fn check(&self, method: VariationMethod) -> Vec<String> {
        let mut errs = Vec::new();
        let mut one = |field: &str, template: &str, allowed: &[&str], required: Option<&str>| {
            match placeholders(template) {
                Err(e) => errs.push(format!("prompts.{field}: {e}")),
                Ok(names) => {
                    for n in &names {
                        if !allowed.contains(&n.as_str()) {
                            errs.push(format!("prompts.{field}: unknown placeholder {{{n}}}"));
                        }
                    }
                    if let Some(r) = required {
                        if !names.iter().any(|n| n == r) {
                            errs.push(format!("prompts.{field}: missing placeholder {{{r}}}"));
                        }
                    }
                }
            }
        };
        one("random_template", &self.random_template, RANDOM_PLACEHOLDERS, None);
        let (p_req, f_req) = match method {
            VariationMethod::Paraphrase => (Some("input"), None),
            VariationMethod::FillInBlanks => (None, Some("masked_input")),
        };
        one("paraphrase_template", &self.paraphrase_template, PARAPHRASE_PLACEHOLDERS, p_req);
        one("fill_template", &self.fill_template, FILL_PLACEHOLDERS, f_req);
        one(
            "demonstration_template",
            &self.demonstration_template,
            DEMO_PLACEHOLDERS,
            None,
        );
        errs
    }
}
