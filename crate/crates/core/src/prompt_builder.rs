//! System prompt assembly and per-directive generation requests.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directive_store::Directive;

pub const CONTEXT_PLACEHOLDER: &str = "{CONTEXT}";

/// Prompt used by the editor application. The skeleton source is spliced in
/// at `{CONTEXT}`.
pub const DEFAULT_SYSTEM_TEMPLATE: &str = "You are a programmer. You should use the preexisting code in the file DynamicTextEditor.py and create the requested functions so the code operates without error. Pay attention to the imports in DynamicTextEditor and choose code that works within those imports.\n{CONTEXT}";

/// Prompt used for corpus evaluation, where there is no host skeleton.
pub const EVAL_SYSTEM_TEMPLATE: &str = "You are a programmer. Complete the requested Python function so that it passes its unit tests. Use only the Python standard library.\n{CONTEXT}";

pub const FENCED_INSTRUCTION: &str =
    "Return only the function source inside one fenced code block delimited by three back ticks.";

/// The envelope's field name `code` is this project's choice.
pub const ENVELOPE_INSTRUCTION: &str = "Return only a JSON object of the form {\"code\": \"<function source>\"} and nothing else.";

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("context source not readable: {}", .path.display())]
    FileNotFound {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("system template lacks the {{CONTEXT}} placeholder")]
    MissingPlaceholder,
}

/// How the model is asked to package its reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseContract {
    #[default]
    Fenced,
    JsonEnvelope,
}

impl ResponseContract {
    pub fn instruction(self) -> &'static str {
        match self {
            ResponseContract::Fenced => FENCED_INSTRUCTION,
            ResponseContract::JsonEnvelope => ENVELOPE_INSTRUCTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub model_id: String,
    pub system_template: String,
    pub contract: ResponseContract,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            model_id: DEFAULT_MODEL.to_string(),
            system_template: DEFAULT_SYSTEM_TEMPLATE.to_string(),
            contract: ResponseContract::Fenced,
        }
    }
}

impl PromptConfig {
    pub fn for_eval() -> Self {
        Self {
            model_id: DEFAULT_MODEL.to_string(),
            system_template: EVAL_SYSTEM_TEMPLATE.to_string(),
            contract: ResponseContract::JsonEnvelope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub model_id: String,
    pub temperature: f64,
    pub response_contract: ResponseContract,
}

/// Splices every context source into `template` at `{CONTEXT}`, each file
/// preceded by a `### FILE: <path>` header line. Relative paths are read
/// from `base_dir` but the header shows them as given.
pub fn build_system_prompt(
    context_sources: &[String],
    base_dir: &Path,
    template: &str,
) -> Result<String, PromptError> {
    if !template.contains(CONTEXT_PLACEHOLDER) {
        return Err(PromptError::MissingPlaceholder);
    }
    let mut context = String::new();
    for source in context_sources {
        let path = base_dir.join(source);
        let contents = fs::read_to_string(&path)
            .map_err(|source| PromptError::FileNotFound { path, source })?;
        context.push_str("### FILE: ");
        context.push_str(source);
        context.push('\n');
        context.push_str(&contents);
        if !contents.ends_with('\n') {
            context.push('\n');
        }
    }
    Ok(template.replacen(CONTEXT_PLACEHOLDER, &context, 1))
}

/// Pure mapping from a directive to the request sent to the model.
pub fn build_request(directive: &Directive, system_text: &str, config: &PromptConfig) -> PromptBundle {
    let instruction = config.contract.instruction();
    let mut user_text = String::with_capacity(directive.text.len() + instruction.len() + 2);
    user_text.push_str(&directive.text);
    user_text.push_str("\n\n");
    user_text.push_str(instruction);
    PromptBundle {
        system_text: system_text.to_string(),
        user_text,
        model_id: config.model_id.clone(),
        temperature: directive.policy.effective_temperature(),
        response_contract: config.contract,
    }
}
