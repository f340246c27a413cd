//! Experiment documents: XML reading, include resolution, validation and
//! lowering into [`Experiment`](crate::model::Experiment).

mod include;
mod lower;
mod timespec;
mod tree;

pub use include::resolve_includes;
pub use lower::{validate_and_lower, Validated};
pub use timespec::{parse_duration, parse_timespec, parse_timestamp, BadTimeSpec};
pub use tree::{parse_document, parse_str, Attribute, Document, Element};

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Error,
    Warning,
}

/// Stable identifiers for every diagnostic the parser can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum DiagnosticCode {
    IoError,
    XmlSyntaxError,
    IncludeCycle,
    IncludeNotFound,
    StepsInInclude,
    UnknownElement,
    UnknownAttribute,
    MissingAttribute,
    MissingElement,
    DuplicateElement,
    UnexpectedText,
    BadAttributeValue,
    AttributeAlias,
    InvalidTarget,
    DuplicateName,
    UnknownReference,
    CallCycle,
    CleanupCycle,
    GroupCycle,
    UnboundedRepeat,
    BadTimeSpec,
    StartNotBeforeStop,
    MultipleStepsElements,
    MissingSteps,
}

impl DiagnosticCode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagnosticCode::IoError => "IoError",
            DiagnosticCode::XmlSyntaxError => "XmlSyntaxError",
            DiagnosticCode::IncludeCycle => "IncludeCycle",
            DiagnosticCode::IncludeNotFound => "IncludeNotFound",
            DiagnosticCode::StepsInInclude => "StepsInInclude",
            DiagnosticCode::UnknownElement => "UnknownElement",
            DiagnosticCode::UnknownAttribute => "UnknownAttribute",
            DiagnosticCode::MissingAttribute => "MissingAttribute",
            DiagnosticCode::MissingElement => "MissingElement",
            DiagnosticCode::DuplicateElement => "DuplicateElement",
            DiagnosticCode::UnexpectedText => "UnexpectedText",
            DiagnosticCode::BadAttributeValue => "BadAttributeValue",
            DiagnosticCode::AttributeAlias => "AttributeAlias",
            DiagnosticCode::InvalidTarget => "InvalidTarget",
            DiagnosticCode::DuplicateName => "DuplicateName",
            DiagnosticCode::UnknownReference => "UnknownReference",
            DiagnosticCode::CallCycle => "CallCycle",
            DiagnosticCode::CleanupCycle => "CleanupCycle",
            DiagnosticCode::GroupCycle => "GroupCycle",
            DiagnosticCode::UnboundedRepeat => "UnboundedRepeat",
            DiagnosticCode::BadTimeSpec => "BadTimeSpec",
            DiagnosticCode::StartNotBeforeStop => "StartNotBeforeStop",
            DiagnosticCode::MultipleStepsElements => "MultipleStepsElements",
            DiagnosticCode::MissingSteps => "MissingSteps",
        }
    }
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Location {
    pub document: Arc<PathBuf>,
    pub line: u32,
    pub column: u32,
}

impl Location {
    pub fn new(document: Arc<PathBuf>, line: u32, column: u32) -> Self {
        Self {
            document,
            line,
            column,
        }
    }

    pub fn start_of(document: &Path) -> Self {
        Self::new(Arc::new(document.to_path_buf()), 1, 1)
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.document.display(), self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: DiagnosticCode,
    pub message: String,
    pub location: Location,
}

impl Diagnostic {
    pub fn error(code: DiagnosticCode, location: Location, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            code,
            message: message.into(),
            location,
        }
    }

    pub fn warning(code: DiagnosticCode, location: Location, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            code,
            message: message.into(),
            location,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}: {sev}[{}]: {}", self.location, self.code, self.message)
    }
}

/// Reads, merges and validates the experiment at `path`.
///
/// On failure every diagnostic found is returned, warnings included.
pub fn load_experiment(path: &Path) -> Result<Validated, Vec<Diagnostic>> {
    let doc = parse_document(path).map_err(|d| vec![d])?;
    let merged = resolve_includes(doc)?;
    validate_and_lower(&merged)
}

/// Like [`load_experiment`] for an in-memory document. `path` names the
/// document in diagnostics and anchors relative includes.
pub fn parse_experiment_str(text: &str, path: &Path) -> Result<Validated, Vec<Diagnostic>> {
    let doc = tree::parse_str(text, path).map_err(|d| vec![d])?;
    let merged = resolve_includes(doc)?;
    validate_and_lower(&merged)
}
