use std::path::Path;
use std::sync::Arc;

use tracing::debug;

use super::{BlockStatus, GeneratedBlock};
use crate::code_loader::{CodeLoader, CompiledUnit, ExecEnv, FunctionRegistry, Owner};
use crate::directive_store::{Directive, HostKind};
use crate::failure::FailureRecord;
use crate::hashing::{render_temperature, sha256_hex};
use crate::llm_client::{CompletionBackend, CompletionRequest, RequestOrigin};
use crate::prompt_builder::{build_request, build_system_prompt, PromptConfig};
use crate::response_parser::extract_code;
use crate::sandbox::{HostState, ImportGuard};

/// SHA-256 over the inputs that determine what the model is asked.
/// The directive version is not hashed, so an edit that leaves the text
/// unchanged keeps its cached block.
pub fn cache_key(directive: &Directive, config: &PromptConfig) -> String {
    let p = &directive.policy;
    sha256_hex(format!(
        "{}\n{}\n{}\n{}\n{}\n{}",
        directive.text,
        directive.entry_point,
        config.system_template,
        config.model_id,
        p.mode.as_str(),
        render_temperature(p.temperature)
    ))
}

/// Host state a directive's code starts from, if it needs one.
pub fn default_host(directive: &Directive) -> Option<HostState> {
    directive.host.map(|HostKind::Editor| HostState::default())
}

/// One generation attempt's inputs.
pub struct GenerationInput<'a> {
    pub directive: &'a Directive,
    pub base_dir: &'a Path,
    pub prompt: &'a PromptConfig,
    pub sample_index: Option<u32>,
    pub keep_raw_response: bool,
}

#[derive(Debug)]
pub struct Generated {
    pub block: GeneratedBlock,
    pub unit: Option<Arc<CompiledUnit>>,
}

/// The directive-to-registered-code sequence. Each stage either hands its
/// output to the next or ends the attempt with a failed block.
pub struct Pipeline {
    pub backend: Arc<dyn CompletionBackend>,
    pub loader: CodeLoader,
    pub guard: ImportGuard,
}

impl Pipeline {
    pub fn generate(&self, input: &GenerationInput<'_>, registry: &FunctionRegistry) -> Generated {
        let d = input.directive;
        let mut block = GeneratedBlock {
            directive_id: d.id.clone(),
            directive_version: d.version,
            cache_key: cache_key(d, input.prompt),
            raw_response: String::new(),
            source: String::new(),
            source_hash: None,
            status: BlockStatus::Failed,
            failure: None,
            created_at: crate::timestamp::now(),
        };
        let unit = match self.run(input, registry, &mut block) {
            Ok(unit) => {
                block.status = BlockStatus::Ready;
                Some(unit)
            }
            Err(failure) => {
                debug!(directive = %d.id, %failure, "generation failed");
                block.failure = Some(failure);
                None
            }
        };
        if !input.keep_raw_response {
            block.raw_response.clear();
        }
        block.created_at = crate::timestamp::now();
        Generated { block, unit }
    }

    fn run(
        &self,
        input: &GenerationInput<'_>,
        registry: &FunctionRegistry,
        block: &mut GeneratedBlock,
    ) -> Result<Arc<CompiledUnit>, FailureRecord> {
        let d = input.directive;
        let system = build_system_prompt(&d.context_sources, input.base_dir, &input.prompt.system_template)
            .map_err(|e| FailureRecord::backend(format!("prompt: {e}")))?;
        let bundle = build_request(d, &system, input.prompt);
        let contract = bundle.response_contract;
        let request = CompletionRequest::new(
            bundle,
            RequestOrigin {
                directive_id: d.id.clone(),
                directive_version: d.version,
                sample_index: input.sample_index,
            },
        );
        let response = self
            .backend
            .complete(&request)
            .map_err(|e| FailureRecord::backend(e.to_string()))?;
        block.raw_response = response.text;

        let extracted = extract_code(&block.raw_response, contract)?;
        block.source_hash = Some(sha256_hex(&extracted.source));
        block.source = extracted.source;

        let guarded = self.guard.apply_policy(&block.source, &d.policy)?;
        if guarded != block.source {
            block.source_hash = Some(sha256_hex(&guarded));
            block.source = guarded;
        }

        let unit = self.loader.compile_block(&block.source)?;
        let env = ExecEnv {
            host: default_host(d),
            timeout_ms: d.policy.timeout_ms,
            expect_entry: Some(d.entry_point.clone()),
        };
        let owner = Owner {
            directive_id: d.id.clone(),
            directive_version: d.version,
        };
        self.loader.register(&unit, registry, &owner, &env)?;
        Ok(unit)
    }
}
