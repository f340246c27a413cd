use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Diagnostic, DiagnosticCode, Location};

#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub value: String,
    pub location: Location,
}

/// Owned XML element with source locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub attributes: Vec<Attribute>,
    pub children: Vec<Element>,
    /// Concatenated direct text content.
    pub text: String,
    pub location: Location,
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn attr_value(&self, name: &str) -> Option<&str> {
        self.attr(name).map(|a| a.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub path: PathBuf,
    pub root: Element,
}

pub fn parse_document(path: &Path) -> Result<Document, Diagnostic> {
    let text = fs::read_to_string(path).map_err(|e| {
        Diagnostic::error(
            DiagnosticCode::IoError,
            Location::start_of(path),
            format!("cannot read {}: {e}", path.display()),
        )
    })?;
    parse_str(&text, path)
}

/// Parses XML text; `path` is used for locations and include resolution.
pub fn parse_str(text: &str, path: &Path) -> Result<Document, Diagnostic> {
    let doc_name = Arc::new(path.to_path_buf());
    let xml = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        Diagnostic::error(
            DiagnosticCode::XmlSyntaxError,
            Location::new(doc_name.clone(), pos.row, pos.col),
            e.to_string(),
        )
    })?;
    let root = convert(&xml, xml.root_element(), &doc_name);
    Ok(Document {
        path: path.to_path_buf(),
        root,
    })
}

fn location(xml: &roxmltree::Document, offset: usize, doc: &Arc<PathBuf>) -> Location {
    let pos = xml.text_pos_at(offset);
    Location::new(doc.clone(), pos.row, pos.col)
}

fn convert(xml: &roxmltree::Document, node: roxmltree::Node, doc: &Arc<PathBuf>) -> Element {
    let attributes = node
        .attributes()
        .map(|a| Attribute {
            name: a.name().to_string(),
            value: a.value().to_string(),
            location: location(xml, a.range().start, doc),
        })
        .collect();
    let mut children = Vec::new();
    let mut text = String::new();
    for child in node.children() {
        if child.is_element() {
            children.push(convert(xml, child, doc));
        } else if child.is_text() {
            text.push_str(child.text().unwrap_or_default());
        }
    }
    Element {
        name: node.tag_name().name().to_string(),
        attributes,
        children,
        text,
        location: location(xml, node.range().start, doc),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document() {
        let doc = parse_str("<experiment><steps/></experiment>", Path::new("min.xml")).unwrap();
        assert_eq!(doc.root.name, "experiment");
        assert_eq!(doc.root.children.len(), 1);
        assert_eq!(doc.root.children[0].name, "steps");
        assert_eq!(doc.root.location.line, 1);
    }

    #[test]
    fn locations_track_lines() {
        let doc = parse_str(
            "<experiment>\n  <steps>\n    <synchronize/>\n  </steps>\n</experiment>",
            Path::new("x.xml"),
        )
        .unwrap();
        let sync = &doc.root.children[0].children[0];
        assert_eq!((sync.location.line, sync.location.column), (3, 5));
    }

    #[test]
    fn truncated_file_reports_position() {
        let err = parse_str("<experiment>\n  <steps>\n  </stpes>", Path::new("t.xml")).unwrap_err();
        assert_eq!(err.code, DiagnosticCode::XmlSyntaxError);
        assert_eq!(err.location.line, 3, "{}", err.message);
    }

    #[test]
    fn text_and_entities() {
        let doc = parse_str("<run>tcpdump -w x.pcap &amp;</run>", Path::new("r.xml")).unwrap();
        assert_eq!(doc.root.text, "tcpdump -w x.pcap &");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_document(Path::new("/nonexistent/nosuchfile.xml")).unwrap_err();
        assert_eq!(err.code, DiagnosticCode::IoError);
    }
}
