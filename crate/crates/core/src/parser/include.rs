use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::tree::{parse_document, Document, Element};
use super::{Diagnostic, DiagnosticCode};

/// Replaces every root-level `include` with the definitions of the referenced
/// document. Paths resolve against the directory of the including document.
///
/// A document reached a second time through a different branch is merged
/// only once; reaching a document that is still on the inclusion stack is an
/// `IncludeCycle`.
pub fn resolve_includes(doc: Document) -> Result<Document, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let mut stack = vec![canonical_or_self(&doc.path)];
    let mut merged = HashSet::new();
    let root = expand(doc.root, &doc.path, &mut stack, &mut merged, &mut diags);
    if diags.iter().any(Diagnostic::is_error) {
        Err(diags)
    } else {
        Ok(Document {
            path: doc.path,
            root,
        })
    }
}

fn canonical_or_self(path: &Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| path.to_path_buf())
}

fn expand(
    root: Element,
    doc_path: &Path,
    stack: &mut Vec<PathBuf>,
    merged: &mut HashSet<PathBuf>,
    diags: &mut Vec<Diagnostic>,
) -> Element {
    let Element {
        name,
        attributes,
        children,
        text,
        location,
    } = root;
    let base = doc_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(children.len());

    for child in children {
        if child.name != "include" {
            out.push(child);
            continue;
        }
        for a in &child.attributes {
            if a.name != "file" {
                diags.push(Diagnostic::error(
                    DiagnosticCode::UnknownAttribute,
                    a.location.clone(),
                    format!("unknown attribute '{}' on include", a.name),
                ));
            }
        }
        if let Some(c) = child.children.first() {
            diags.push(Diagnostic::error(
                DiagnosticCode::UnknownElement,
                c.location.clone(),
                format!("include may not contain '{}'", c.name),
            ));
        }
        let Some(file) = child.attr_value("file") else {
            diags.push(Diagnostic::error(
                DiagnosticCode::MissingAttribute,
                child.location.clone(),
                "include requires a 'file' attribute",
            ));
            continue;
        };
        let target = base.join(file);
        let Ok(canonical) = target.canonicalize() else {
            diags.push(Diagnostic::error(
                DiagnosticCode::IncludeNotFound,
                child.location.clone(),
                format!("included document {} not found", target.display()),
            ));
            continue;
        };
        if let Some(pos) = stack.iter().position(|p| *p == canonical) {
            let chain: Vec<String> = stack[pos..]
                .iter()
                .chain(std::iter::once(&canonical))
                .map(|p| p.display().to_string())
                .collect();
            diags.push(Diagnostic::error(
                DiagnosticCode::IncludeCycle,
                child.location.clone(),
                format!("include cycle: {}", chain.join(" -> ")),
            ));
            continue;
        }
        if !merged.insert(canonical.clone()) {
            continue;
        }
        let included = match parse_document(&target) {
            Ok(d) => d,
            Err(d) => {
                diags.push(d);
                continue;
            }
        };
        if included.root.name != "experiment" {
            diags.push(Diagnostic::error(
                DiagnosticCode::UnknownElement,
                included.root.location.clone(),
                format!(
                    "included document root must be 'experiment', found '{}'",
                    included.root.name
                ),
            ));
            continue;
        }
        stack.push(canonical);
        let inner = expand(included.root, &target, stack, merged, diags);
        stack.pop();
        for def in inner.children {
            if def.name == "steps" {
                diags.push(Diagnostic::error(
                    DiagnosticCode::StepsInInclude,
                    def.location.clone(),
                    "included documents may only define targets and tasklists",
                ));
            } else {
                out.push(def);
            }
        }
    }

    Element {
        name,
        attributes,
        children: out,
        text,
        location,
    }
}
