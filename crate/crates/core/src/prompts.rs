//! Auditor and verifier prompt templates.
//!
//! Templates are plain-text assets split into `@@ <section>` blocks:
//!
//! ```text
//! @@ role_definition      system turn, first paragraph
//! @@ prior_knowledge      system turn, the in-scope vulnerability classes
//! @@ user                 user turn, must contain {{code}} exactly once
//! @@ reasoning_scaffold   chain-of-thought steps (cot only)
//! @@ response_format      final instruction; its last line fixes the answer shape
//! ```
//!
//! Placeholders: `{{code}}`, `{{description}}`, `{{claimed_label}}`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AuditSample, Message, Role};
use crate::label::VulnerabilityLabel;

pub const CODE_PLACEHOLDER: &str = "{{code}}";
pub const DESCRIPTION_PLACEHOLDER: &str = "{{description}}";
pub const CLAIMED_LABEL_PLACEHOLDER: &str = "{{claimed_label}}";

/// Default limit on the estimated token count of the contract code.
pub const DEFAULT_TOKEN_BUDGET: usize = 8192;

const BUILTIN_BASIC: &str = include_str!("../templates/basic.txt");
const BUILTIN_COT: &str = include_str!("../templates/cot.txt");
const BUILTIN_VERIFIER: &str = include_str!("../templates/verifier.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{template}`: {reason}")]
    InvalidTemplate { template: String, reason: String },
    #[error("contract code is {tokens} tokens, {overflow} over the budget of {budget}")]
    TokenBudget {
        tokens: usize,
        budget: usize,
        overflow: usize,
    },
    #[error("a verifier prompt needs a vulnerable claimed label, got `none`")]
    NoClaim,
    #[error("template `{0}` is not a verifier template")]
    NotVerifier(String),
    #[error("template `{0}` is a verifier template; use render_verifier")]
    IsVerifier(String),
    #[error("rendered prompt's final instruction does not admit a parseable answer")]
    UnparseableFormat,
    #[error("unknown template name `{0}`")]
    UnknownTemplate(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateName {
    Basic,
    Cot,
    Verifier,
}

impl TemplateName {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Basic => "basic",
            TemplateName::Cot => "cot",
            TemplateName::Verifier => "verifier",
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(TemplateName::Basic),
            "cot" => Ok(TemplateName::Cot),
            "verifier" => Ok(TemplateName::Verifier),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub role_definition: String,
    pub prior_knowledge: String,
    pub user: String,
    pub reasoning_scaffold: Option<String>,
    pub response_format: String,
    pub token_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<Message>,
    pub template_name: String,
    pub sample_id: String,
}

impl RenderedPrompt {
    pub fn final_line(&self) -> &str {
        self.messages
            .last()
            .and_then(|m| m.content.lines().last())
            .unwrap_or("")
    }
}

/// Rough token estimate: each identifier/number run counts once, every other
/// non-whitespace character counts once.
pub fn estimate_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

fn parse_sections(name: TemplateName, text: &str) -> Result<PromptTemplate, PromptError> {
    let invalid = |reason: String| PromptError::InvalidTemplate {
        template: name.to_string(),
        reason,
    };
    let mut sections: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        if let Some(header) = line.strip_prefix("@@ ") {
            sections.push((header.trim().to_string(), String::new()));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push_str(line);
            body.push('\n');
        } else if !line.trim().is_empty() {
            return Err(invalid("text before the first section header".into()));
        }
    }
    let mut take = |key: &str| -> Option<String> {
        let pos = sections.iter().position(|(k, _)| k == key)?;
        let (_, body) = sections.remove(pos);
        Some(body.trim().to_string())
    };
    let mut required = |key: &str| -> Result<String, PromptError> {
        match take(key) {
            Some(body) if !body.is_empty() => Ok(body),
            _ => Err(invalid(format!("missing or empty section `{key}`"))),
        }
    };
    let role_definition = required("role_definition")?;
    let prior_knowledge = required("prior_knowledge")?;
    let user = required("user")?;
    let response_format = required("response_format")?;
    let reasoning_scaffold = take("reasoning_scaffold").filter(|s| !s.is_empty());
    if let Some((k, _)) = sections.first() {
        return Err(invalid(format!("unknown section `{k}`")));
    }

    let template = PromptTemplate {
        name,
        role_definition,
        prior_knowledge,
        user,
        reasoning_scaffold,
        response_format,
        token_budget: DEFAULT_TOKEN_BUDGET,
    };
    template.check().map_err(invalid)?;
    Ok(template)
}

impl PromptTemplate {
    pub fn parse(name: TemplateName, text: &str) -> Result<Self, PromptError> {
        parse_sections(name, text)
    }

    pub fn builtin(name: TemplateName) -> Self {
        let text = match name {
            TemplateName::Basic => BUILTIN_BASIC,
            TemplateName::Cot => BUILTIN_COT,
            TemplateName::Verifier => BUILTIN_VERIFIER,
        };
        Self::parse(name, text).expect("builtin templates are valid")
    }

    /// Loads `<dir>/<name>.txt`.
    pub fn load(dir: &Path, name: TemplateName) -> Result<Self, PromptError> {
        let path = dir.join(format!("{name}.txt"));
        let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(name, &text)
    }

    pub fn with_token_budget(mut self, budget: usize) -> Self {
        self.token_budget = budget;
        self
    }

    fn check(&self) -> Result<(), String> {
        let all = [
            &self.role_definition,
            &self.prior_knowledge,
            &self.user,
            &self.response_format,
        ];
        let code_slots: usize = all
            .iter()
            .map(|s| s.matches(CODE_PLACEHOLDER).count())
            .sum::<usize>()
            + self
                .reasoning_scaffold
                .as_deref()
                .map_or(0, |s| s.matches(CODE_PLACEHOLDER).count());
        if code_slots != 1 || !self.user.contains(CODE_PLACEHOLDER) {
            return Err("`{{code}}` must appear exactly once, in the user section".into());
        }
        for label in VulnerabilityLabel::VULNERABLE {
            if !self.prior_knowledge.contains(label.canonical_name()) {
                return Err(format!("prior_knowledge does not mention `{label}`"));
            }
        }
        match (self.name, &self.reasoning_scaffold) {
            (TemplateName::Cot, None) => return Err("cot template needs a reasoning_scaffold".into()),
            (TemplateName::Basic | TemplateName::Verifier, Some(_)) => {
                return Err("reasoning_scaffold is only allowed in the cot template".into())
            }
            _ => {}
        }
        let has_claim = self.user.contains(CLAIMED_LABEL_PLACEHOLDER);
        if (self.name == TemplateName::Verifier) != has_claim {
            return Err("`{{claimed_label}}` belongs in, and only in, the verifier template".into());
        }
        Ok(())
    }

    fn check_budget(&self, code: &str) -> Result<(), PromptError> {
        let tokens = estimate_tokens(code);
        if tokens > self.token_budget {
            return Err(PromptError::TokenBudget {
                tokens,
                budget: self.token_budget,
                overflow: tokens - self.token_budget,
            });
        }
        Ok(())
    }

    fn assemble(&self, user_body: String, extra: Option<&str>, sample: &AuditSample) -> RenderedPrompt {
        let system = format!("{}\n\n{}", self.role_definition, self.prior_knowledge);
        let mut user = user_body;
        if let Some(extra) = extra {
            user.push_str("\n\n");
            user.push_str(extra);
        }
        if let Some(scaffold) = &self.reasoning_scaffold {
            user.push_str("\n\n");
            user.push_str(scaffold);
        }
        user.push_str("\n\n");
        user.push_str(&self.response_format);
        RenderedPrompt {
            messages: vec![Message::new(Role::System, system), Message::new(Role::User, user)],
            template_name: self.name.to_string(),
            sample_id: sample.id.clone(),
        }
    }
}

// Placeholders are substituted in a single left-to-right pass so that
// placeholder-like text inside the contract is never expanded again.
fn substitute(template: &str, code: &str, description: &str, claimed: &str) -> String {
    let mut out = String::with_capacity(template.len() + code.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with(CODE_PLACEHOLDER) {
            (code, CODE_PLACEHOLDER.len())
        } else if tail.starts_with(DESCRIPTION_PLACEHOLDER) {
            (description, DESCRIPTION_PLACEHOLDER.len())
        } else if tail.starts_with(CLAIMED_LABEL_PLACEHOLDER) {
            (claimed, CLAIMED_LABEL_PLACEHOLDER.len())
        } else {
            ("{{", 2)
        };
        out.push_str(value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

fn self_parse_check(prompt: &RenderedPrompt, verifier: bool) -> Result<(), PromptError> {
    let line = prompt.final_line();
    let ok = if verifier {
        line.contains("CONFIRM") && line.contains("REJECT")
    } else {
        line.contains("LABEL:")
            && VulnerabilityLabel::ALL
                .iter()
                .all(|l| line.contains(l.canonical_name()))
    };
    if ok {
        Ok(())
    } else {
        Err(PromptError::UnparseableFormat)
    }
}

/// Renders an auditor prompt (basic or cot) for one sample.
pub fn render(template: &PromptTemplate, sample: &AuditSample) -> Result<RenderedPrompt, PromptError> {
    if template.name == TemplateName::Verifier {
        return Err(PromptError::IsVerifier(template.name.to_string()));
    }
    template.check_budget(&sample.source_code)?;
    let user = substitute(&template.user, &sample.source_code, &sample.description, "");
    let prompt = template.assemble(user, None, sample);
    self_parse_check(&prompt, false)?;
    Ok(prompt)
}

/// Renders the verifier prompt for an auditor's claim using the builtin
/// verifier template.
pub fn render_verifier(claimed: VulnerabilityLabel, sample: &AuditSample) -> Result<RenderedPrompt, PromptError> {
    render_verifier_with(&PromptTemplate::builtin(TemplateName::Verifier), claimed, sample, None)
}

/// Verifier rendering with an explicit template and, optionally, the
/// auditor's reasoning shown to the verifier.
pub fn render_verifier_with(
    template: &PromptTemplate,
    claimed: VulnerabilityLabel,
    sample: &AuditSample,
    auditor_reasoning: Option<&str>,
) -> Result<RenderedPrompt, PromptError> {
    if template.name != TemplateName::Verifier {
        return Err(PromptError::NotVerifier(template.name.to_string()));
    }
    if !claimed.is_vulnerable() {
        return Err(PromptError::NoClaim);
    }
    template.check_budget(&sample.source_code)?;
    let user = substitute(
        &template.user,
        &sample.source_code,
        &sample.description,
        claimed.canonical_name(),
    );
    let extra = auditor_reasoning.map(|r| format!("Auditor reasoning:\n{r}"));
    let prompt = template.assemble(user, extra.as_deref(), sample);
    self_parse_check(&prompt, true)?;
    Ok(prompt)
}
