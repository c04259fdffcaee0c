//! Failure taxonomy shared by the orchestrator and the evaluation harness.

use std::fmt;

use serde::{Deserialize, Serialize};

/// What went wrong with a generation attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureCategory {
    ExtractionFailure,
    CompileError,
    MissingEntryPoint,
    DisallowedImport,
    Timeout,
    RuntimeError,
    TestFailure,
    BackendError,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 8] = [
        FailureCategory::ExtractionFailure,
        FailureCategory::CompileError,
        FailureCategory::MissingEntryPoint,
        FailureCategory::DisallowedImport,
        FailureCategory::Timeout,
        FailureCategory::RuntimeError,
        FailureCategory::TestFailure,
        FailureCategory::BackendError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCategory::ExtractionFailure => "ExtractionFailure",
            FailureCategory::CompileError => "CompileError",
            FailureCategory::MissingEntryPoint => "MissingEntryPoint",
            FailureCategory::DisallowedImport => "DisallowedImport",
            FailureCategory::Timeout => "Timeout",
            FailureCategory::RuntimeError => "RuntimeError",
            FailureCategory::TestFailure => "TestFailure",
            FailureCategory::BackendError => "BackendError",
        }
    }

    /// Pipeline stages at which this category may be reported.
    pub fn stages(self) -> &'static [Stage] {
        match self {
            FailureCategory::BackendError => &[Stage::Generate],
            FailureCategory::ExtractionFailure => &[Stage::Extract],
            FailureCategory::DisallowedImport => &[Stage::Guard],
            FailureCategory::CompileError => &[Stage::Compile],
            FailureCategory::MissingEntryPoint => &[Stage::Register, Stage::Invoke],
            FailureCategory::Timeout | FailureCategory::RuntimeError => {
                &[Stage::Register, Stage::Invoke, Stage::Test]
            }
            FailureCategory::TestFailure => &[Stage::Test],
        }
    }
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pipeline stage, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Extract,
    Guard,
    Compile,
    Register,
    Invoke,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub category: FailureCategory,
    pub detail: String,
    pub stage: Stage,
}

impl FailureRecord {
    pub fn new(category: FailureCategory, stage: Stage, detail: impl Into<String>) -> Self {
        debug_assert!(
            category.stages().contains(&stage),
            "{category} reported at stage {stage:?}"
        );
        Self {
            category,
            detail: detail.into(),
            stage,
        }
    }

    pub fn backend(detail: impl Into<String>) -> Self {
        Self::new(FailureCategory::BackendError, Stage::Generate, detail)
    }

    pub fn extraction(detail: impl Into<String>) -> Self {
        Self::new(FailureCategory::ExtractionFailure, Stage::Extract, detail)
    }

    pub fn is_consistent(&self) -> bool {
        self.category.stages().contains(&self.stage)
    }
}

impl fmt::Display for FailureRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {:?}: {}", self.category, self.stage, self.detail)
    }
}

impl std::error::Error for FailureRecord {}
