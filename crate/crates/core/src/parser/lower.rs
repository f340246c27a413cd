use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use super::timespec::{parse_duration, parse_timespec, parse_timestamp};
use super::tree::{Attribute, Document, Element};
use super::{Diagnostic, DiagnosticCode as Code, Location};
use crate::model::{
    EnvVar, ErrorMode, Experiment, GroupMember, RegisterTeardown, Repeat, Step, StepsItem,
    StepsProgram, TargetDef, TargetKind, Task, Tasklist, TimeSpec,
};

/// A successfully lowered experiment plus any warnings produced on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated {
    pub experiment: Experiment,
    pub warnings: Vec<Diagnostic>,
}

/// Checks the merged document and converts it into an [`Experiment`].
///
/// All problems are collected; the result is an error if any diagnostic has
/// error severity.
pub fn validate_and_lower(doc: &Document) -> Result<Validated, Vec<Diagnostic>> {
    let mut lw = Lowerer::default();
    let experiment = lw.lower_root(&doc.root);
    lw.check_references();
    lw.check_cycles(&experiment);
    if lw.diags.iter().any(Diagnostic::is_error) {
        Err(lw.diags)
    } else {
        Ok(Validated {
            experiment,
            warnings: lw.diags,
        })
    }
}

#[derive(Clone, Copy)]
enum RefKind {
    Tasklist,
    Target,
}

#[derive(Default)]
struct Lowerer {
    diags: Vec<Diagnostic>,
    target_defs: Vec<(String, Location)>,
    tasklist_defs: Vec<(String, Location)>,
    refs: Vec<(RefKind, String, Location, &'static str)>,
    documents: Vec<PathBuf>,
}

fn is_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Lowerer {
    fn error(&mut self, code: Code, loc: &Location, msg: impl Into<String>) {
        self.diags.push(Diagnostic::error(code, loc.clone(), msg));
    }

    fn note_document(&mut self, loc: &Location) {
        let doc = loc.document.as_ref();
        if !self.documents.iter().any(|d| d == doc) {
            self.documents.push(doc.clone());
        }
    }

    fn check_attrs(&mut self, el: &Element, allowed: &[&str]) {
        for a in &el.attributes {
            if !allowed.contains(&a.name.as_str()) {
                self.error(
                    Code::UnknownAttribute,
                    &a.location,
                    format!("unknown attribute '{}' on <{}>", a.name, el.name),
                );
            }
        }
    }

    fn required<'e>(&mut self, el: &'e Element, name: &str) -> Option<&'e Attribute> {
        let a = el.attr(name);
        if a.is_none() {
            self.error(
                Code::MissingAttribute,
                &el.location,
                format!("<{}> requires attribute '{}'", el.name, name),
            );
        }
        a
    }

    fn no_text(&mut self, el: &Element) {
        if !el.text.trim().is_empty() {
            self.error(
                Code::UnexpectedText,
                &el.location,
                format!("<{}> does not take text content", el.name),
            );
        }
    }

    fn no_children(&mut self, el: &Element) {
        for c in &el.children {
            self.error(
                Code::UnknownElement,
                &c.location,
                format!("<{}> may not contain <{}>", el.name, c.name),
            );
        }
    }

    /// Text of a leaf element such as `<host>` or `<run>`.
    fn leaf_text(&mut self, el: &Element) -> Option<String> {
        self.check_attrs(el, &[]);
        self.no_children(el);
        let text = el.text.trim();
        if text.is_empty() {
            self.error(
                Code::BadAttributeValue,
                &el.location,
                format!("<{}> must not be empty", el.name),
            );
            None
        } else {
            Some(text.to_string())
        }
    }

    fn reference(&mut self, kind: RefKind, name: &str, loc: &Location, what: &'static str) {
        self.refs.push((kind, name.to_string(), loc.clone(), what));
    }

    fn lower_root(&mut self, root: &Element) -> Experiment {
        let mut targets = Vec::new();
        let mut tasklists = Vec::new();
        let mut steps: Option<StepsProgram> = None;
        self.note_document(&root.location);

        if root.name != "experiment" {
            self.error(
                Code::UnknownElement,
                &root.location,
                format!("root element must be <experiment>, found <{}>", root.name),
            );
        } else {
            self.check_attrs(root, &[]);
            self.no_text(root);
            for child in &root.children {
                self.note_document(&child.location);
                match child.name.as_str() {
                    "targets" => {
                        self.check_attrs(child, &[]);
                        self.no_text(child);
                        for t in &child.children {
                            if let Some(GroupMember::Inline(def)) = self.lower_target(t, false) {
                                targets.push(def);
                            }
                        }
                    }
                    "tasklists" => {
                        self.check_attrs(child, &[]);
                        self.no_text(child);
                        for t in &child.children {
                            if t.name == "tasklist" {
                                if let Some(tl) = self.lower_tasklist(t) {
                                    tasklists.push(tl);
                                }
                            } else {
                                self.error(
                                    Code::UnknownElement,
                                    &t.location,
                                    format!("<tasklists> may not contain <{}>", t.name),
                                );
                            }
                        }
                    }
                    "tasklist" => {
                        if let Some(tl) = self.lower_tasklist(child) {
                            tasklists.push(tl);
                        }
                    }
                    "steps" => {
                        if steps.is_some() {
                            self.error(
                                Code::MultipleStepsElements,
                                &child.location,
                                "an experiment has exactly one <steps> element",
                            );
                        } else {
                            self.check_attrs(child, &[]);
                            self.no_text(child);
                            steps = Some(StepsProgram {
                                items: self.lower_steps_items(&child.children),
                            });
                        }
                    }
                    "include" => self.error(
                        Code::UnknownElement,
                        &child.location,
                        "unresolved <include>; resolve includes before validation",
                    ),
                    other => self.error(
                        Code::UnknownElement,
                        &child.location,
                        format!("unknown element <{other}> in <experiment>"),
                    ),
                }
            }
            if steps.is_none() {
                self.error(
                    Code::MissingSteps,
                    &root.location,
                    "an experiment requires a <steps> element",
                );
            }
        }

        Experiment {
            targets,
            tasklists,
            steps: steps.unwrap_or_default(),
            source_documents: self.documents.clone(),
        }
    }

    fn lower_target(&mut self, el: &Element, in_group: bool) -> Option<GroupMember> {
        if el.name != "target" {
            self.error(
                Code::UnknownElement,
                &el.location,
                format!("expected <target>, found <{}>", el.name),
            );
            return None;
        }
        // Inside a group, a bare `<target name="X"/>` refers to a target defined elsewhere.
        if in_group && el.attr("type").is_none() && el.children.is_empty() {
            self.check_attrs(el, &["name"]);
            self.no_text(el);
            let name = self.required(el, "name")?;
            self.reference(RefKind::Target, &name.value, &name.location, "group member");
            return Some(GroupMember::Ref(name.value.clone()));
        }

        let name = self.required(el, "name").map(|a| a.value.clone());
        let kind = match self.required(el, "type") {
            Some(a) => match a.value.as_str() {
                "local" => Some(TargetKind::Local),
                "ssh" => Some(TargetKind::Ssh),
                "planetlab" => Some(TargetKind::PlanetLab),
                "group" => Some(TargetKind::Group),
                other => {
                    self.error(
                        Code::BadAttributeValue,
                        &a.location,
                        format!("unknown target type '{other}'"),
                    );
                    None
                }
            },
            None => None,
        };
        self.no_text(el);
        let (name, kind) = (name?, kind?);
        self.target_defs.push((name.clone(), el.location.clone()));

        let allowed: &[&str] = match kind {
            TargetKind::PlanetLab => &["name", "type", "api-url", "slice", "user"],
            _ => &["name", "type"],
        };
        self.check_attrs(el, allowed);

        let mut def = TargetDef {
            name: name.clone(),
            kind,
            ssh_user: None,
            ssh_password: None,
            ssh_host: None,
            planetlab_api_url: el.attr_value("api-url").map(str::to_string),
            planetlab_slice: el.attr_value("slice").map(str::to_string),
            planetlab_user: el.attr_value("user").map(str::to_string),
            members: Vec::new(),
            env_exports: Vec::new(),
        };
        if kind != TargetKind::PlanetLab {
            def.planetlab_api_url = None;
            def.planetlab_slice = None;
            def.planetlab_user = None;
        }

        for child in &el.children {
            match (child.name.as_str(), kind) {
                ("export-env", _) => {
                    self.check_attrs(child, &["var", "value"]);
                    self.no_children(child);
                    self.no_text(child);
                    let var = self.required(child, "var");
                    let value = self.required(child, "value");
                    if let (Some(var), Some(value)) = (var, value) {
                        if !is_env_name(&var.value) {
                            self.error(
                                Code::BadAttributeValue,
                                &var.location,
                                format!("'{}' is not a valid environment variable name", var.value),
                            );
                        } else {
                            def.env_exports.push(EnvVar::new(&var.value, &value.value));
                        }
                    }
                }
                ("user" | "username", TargetKind::Ssh) => {
                    let v = self.leaf_text(child);
                    self.set_once(&mut def.ssh_user, v, child, "user");
                }
                ("host", TargetKind::Ssh) => {
                    let v = self.leaf_text(child);
                    self.set_once(&mut def.ssh_host, v, child, "host");
                }
                ("password", TargetKind::Ssh | TargetKind::PlanetLab) => {
                    let v = self.leaf_text(child);
                    self.set_once(&mut def.ssh_password, v, child, "password");
                }
                ("target", TargetKind::Group) => {
                    if let Some(m) = self.lower_target(child, true) {
                        def.members.push(m);
                    }
                }
                (other, _) => self.error(
                    Code::UnknownElement,
                    &child.location,
                    format!("<{other}> is not allowed in a {kind} target"),
                ),
            }
        }

        match kind {
            TargetKind::Ssh => {
                if def.ssh_host.is_none() {
                    self.error(
                        Code::MissingElement,
                        &el.location,
                        format!("ssh target '{name}' requires <host>"),
                    );
                }
                if def.ssh_user.is_none() {
                    self.error(
                        Code::MissingElement,
                        &el.location,
                        format!("ssh target '{name}' requires <user>"),
                    );
                }
            }
            TargetKind::PlanetLab => {
                for attr in ["api-url", "slice", "user"] {
                    if el.attr(attr).is_none() {
                        self.error(
                            Code::MissingAttribute,
                            &el.location,
                            format!("planetlab target '{name}' requires attribute '{attr}'"),
                        );
                    }
                }
            }
            TargetKind::Group => {
                if def.members.is_empty() {
                    self.error(
                        Code::InvalidTarget,
                        &el.location,
                        format!("group '{name}' has no members"),
                    );
                }
            }
            TargetKind::Local => {}
        }
        Some(GroupMember::Inline(def))
    }

    fn set_once(&mut self, slot: &mut Option<String>, value: Option<String>, el: &Element, what: &str) {
        if slot.is_some() {
            self.error(
                Code::DuplicateElement,
                &el.location,
                format!("{what} given more than once"),
            );
        } else {
            *slot = value;
        }
    }

    fn lower_tasklist(&mut self, el: &Element) -> Option<Tasklist> {
        self.check_attrs(el, &["name", "on-error", "error", "timeout", "cleanup"]);
        self.no_text(el);
        let name = self.required(el, "name")?.value.clone();
        self.tasklist_defs.push((name.clone(), el.location.clone()));

        let mut on_error = ErrorMode::default();
        let mode_attr = match (el.attr("on-error"), el.attr("error")) {
            (Some(canonical), Some(alias)) => {
                self.error(
                    Code::BadAttributeValue,
                    &alias.location,
                    "both 'on-error' and its alias 'error' are given",
                );
                Some(canonical)
            }
            (Some(canonical), None) => Some(canonical),
            (None, Some(alias)) => {
                self.diags.push(Diagnostic::warning(
                    Code::AttributeAlias,
                    alias.location.clone(),
                    "'error' is an alias; prefer 'on-error'",
                ));
                Some(alias)
            }
            (None, None) => None,
        };
        if let Some(a) = mode_attr {
            match ErrorMode::parse(&a.value) {
                Some(m) => on_error = m,
                None => self.error(
                    Code::BadAttributeValue,
                    &a.location,
                    format!(
                        "unknown failure mode '{}'; expected abort-tasklist, abort-step or panic",
                        a.value
                    ),
                ),
            }
        }

        let timeout = el.attr("timeout").and_then(|a| match parse_duration(&a.value) {
            Ok(d) if !d.is_zero() => Some(d),
            Ok(_) => {
                self.error(Code::BadTimeSpec, &a.location, "timeout must be positive");
                None
            }
            Err(e) => {
                self.error(Code::BadTimeSpec, &a.location, e.to_string());
                None
            }
        });

        let cleanup = el.attr("cleanup").map(|a| {
            self.reference(RefKind::Tasklist, &a.value, &a.location, "cleanup");
            a.value.clone()
        });

        let tasks = self.lower_tasks(&el.children);
        Some(Tasklist {
            name,
            tasks,
            on_error,
            timeout,
            cleanup,
        })
    }

    fn lower_tasks(&mut self, elements: &[Element]) -> Vec<Task> {
        elements.iter().filter_map(|el| self.lower_task(el)).collect()
    }

    fn lower_task(&mut self, el: &Element) -> Option<Task> {
        match el.name.as_str() {
            "run" => self.leaf_text(el).map(Task::Run),
            "get" => self.leaf_text(el).map(Task::Get),
            "put" => self.leaf_text(el).map(Task::Put),
            "seq" | "par" => {
                self.check_attrs(el, &[]);
                self.no_text(el);
                let children = self.lower_tasks(&el.children);
                Some(if el.name == "seq" {
                    Task::Seq(children)
                } else {
                    Task::Par(children)
                })
            }
            "call" => {
                self.check_attrs(el, &["ref"]);
                self.no_children(el);
                self.no_text(el);
                let r = self.required(el, "ref")?;
                self.reference(RefKind::Tasklist, &r.value, &r.location, "call");
                Some(Task::Call(r.value.clone()))
            }
            other => {
                self.error(
                    Code::UnknownElement,
                    &el.location,
                    format!("unknown task <{other}>"),
                );
                None
            }
        }
    }

    fn timespec(&mut self, a: Option<&Attribute>) -> Option<TimeSpec> {
        let a = a?;
        match parse_timespec(&a.value) {
            Ok(t) => Some(t),
            Err(e) => {
                self.error(Code::BadTimeSpec, &a.location, e.to_string());
                None
            }
        }
    }

    fn lower_steps_items(&mut self, elements: &[Element]) -> Vec<StepsItem> {
        let mut items = Vec::new();
        for el in elements {
            match el.name.as_str() {
                "step" => {
                    self.check_attrs(el, &["tasklist", "targets", "start", "stop"]);
                    self.no_children(el);
                    self.no_text(el);
                    let tl = self.required(el, "tasklist");
                    let tg = self.required(el, "targets");
                    let start = self.timespec(el.attr("start"));
                    let stop = self.timespec(el.attr("stop"));
                    let ordered = match (start, stop) {
                        (Some(TimeSpec::Relative(a)), Some(TimeSpec::Relative(b))) => a < b,
                        (Some(TimeSpec::Absolute(a)), Some(TimeSpec::Absolute(b))) => a < b,
                        _ => true,
                    };
                    if !ordered {
                        self.error(
                            Code::StartNotBeforeStop,
                            &el.location,
                            "step start must be before its stop",
                        );
                    }
                    if let (Some(tl), Some(tg)) = (tl, tg) {
                        self.reference(RefKind::Tasklist, &tl.value, &tl.location, "step");
                        self.reference(RefKind::Target, &tg.value, &tg.location, "step");
                        items.push(StepsItem::Step(Step {
                            tasklist: tl.value.clone(),
                            targets: tg.value.clone(),
                            start,
                            stop,
                        }));
                    }
                }
                "synchronize" => {
                    self.check_attrs(el, &[]);
                    self.no_children(el);
                    self.no_text(el);
                    items.push(StepsItem::Synchronize);
                }
                "register-teardown" => {
                    self.check_attrs(el, &["ref", "targets"]);
                    self.no_children(el);
                    self.no_text(el);
                    let r = self.required(el, "ref");
                    let tg = self.required(el, "targets");
                    if let (Some(r), Some(tg)) = (r, tg) {
                        self.reference(RefKind::Tasklist, &r.value, &r.location, "register-teardown");
                        self.reference(RefKind::Target, &tg.value, &tg.location, "register-teardown");
                        items.push(StepsItem::RegisterTeardown(RegisterTeardown {
                            tasklist: r.value.clone(),
                            targets: tg.value.clone(),
                        }));
                    }
                }
                "repeat" => {
                    self.check_attrs(el, &["iterations", "during", "until"]);
                    self.no_text(el);
                    let iterations = el.attr("iterations").and_then(|a| match a.value.trim().parse::<u32>() {
                        Ok(n) if n > 0 => Some(n),
                        _ => {
                            self.error(
                                Code::BadAttributeValue,
                                &a.location,
                                format!("iterations must be a positive integer, got '{}'", a.value),
                            );
                            None
                        }
                    });
                    let during = el.attr("during").and_then(|a| match parse_duration(&a.value) {
                        Ok(d) => Some(d),
                        Err(e) => {
                            self.error(Code::BadTimeSpec, &a.location, e.to_string());
                            None
                        }
                    });
                    let until = el.attr("until").and_then(|a| match parse_timestamp(&a.value) {
                        Ok(t) => Some(t),
                        Err(e) => {
                            self.error(Code::BadTimeSpec, &a.location, e.to_string());
                            None
                        }
                    });
                    let bounded = ["iterations", "during", "until"]
                        .iter()
                        .any(|a| el.attr(a).is_some());
                    if !bounded {
                        self.error(
                            Code::UnboundedRepeat,
                            &el.location,
                            "<repeat> needs at least one of iterations, during or until",
                        );
                    }
                    let body = self.lower_steps_items(&el.children);
                    if bounded && (iterations.is_some() || during.is_some() || until.is_some()) {
                        items.push(StepsItem::Repeat(Repeat {
                            body,
                            iterations,
                            during,
                            until,
                        }));
                    }
                }
                other => self.error(
                    Code::UnknownElement,
                    &el.location,
                    format!("unknown element <{other}> in <steps>"),
                ),
            }
        }
        items
    }

    fn check_references(&mut self) {
        let mut first: HashMap<&str, &Location> = HashMap::new();
        let target_defs = std::mem::take(&mut self.target_defs);
        let tasklist_defs = std::mem::take(&mut self.tasklist_defs);
        for (kind, defs) in [("target", &target_defs), ("tasklist", &tasklist_defs)] {
            first.clear();
            for (name, loc) in defs.iter() {
                if let Some(prev) = first.get(name.as_str()) {
                    let msg = format!("{kind} '{name}' is already defined at {prev}");
                    self.error(Code::DuplicateName, loc, msg);
                } else {
                    first.insert(name, loc);
                }
            }
        }
        let refs = std::mem::take(&mut self.refs);
        for (kind, name, loc, what) in &refs {
            let (known, noun) = match kind {
                RefKind::Target => (target_defs.iter().any(|(n, _)| n == name), "target"),
                RefKind::Tasklist => (tasklist_defs.iter().any(|(n, _)| n == name), "tasklist"),
            };
            if !known {
                self.error(
                    Code::UnknownReference,
                    loc,
                    format!("{what} references unknown {noun} '{name}'"),
                );
            }
        }
        self.target_defs = target_defs;
        self.tasklist_defs = tasklist_defs;
    }

    fn location_of(defs: &[(String, Location)], name: &str) -> Location {
        defs.iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| l.clone())
            .unwrap_or_else(|| Location::start_of(std::path::Path::new("<unknown>")))
    }

    fn check_cycles(&mut self, exp: &Experiment) {
        let known: Vec<&str> = exp.tasklists.iter().map(|t| t.name.as_str()).collect();
        let mut calls: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for tl in &exp.tasklists {
            let edges = calls.entry(tl.name.as_str()).or_default();
            for c in tl.calls() {
                if known.contains(&c) && !edges.contains(&c) {
                    edges.push(c);
                }
            }
        }
        let order: Vec<&str> = known.clone();
        let call_cycles = find_cycles(&order, &calls);
        for cycle in &call_cycles {
            let loc = Self::location_of(&self.tasklist_defs, cycle[0]);
            self.error(
                Code::CallCycle,
                &loc,
                format!("call cycle: {}", cycle.join(" -> ")),
            );
        }
        if call_cycles.is_empty() {
            let mut combined = calls.clone();
            for tl in &exp.tasklists {
                if let Some(c) = tl.cleanup.as_deref().filter(|c| known.contains(c)) {
                    let edges = combined.entry(tl.name.as_str()).or_default();
                    if !edges.contains(&c) {
                        edges.push(c);
                    }
                }
            }
            for cycle in find_cycles(&order, &combined) {
                let loc = Self::location_of(&self.tasklist_defs, cycle[0]);
                self.error(
                    Code::CleanupCycle,
                    &loc,
                    format!("cleanup chain never terminates: {}", cycle.join(" -> ")),
                );
            }
        }

        let index = exp.target_index();
        let groups: Vec<&str> = {
            let mut g: Vec<&str> = index
                .values()
                .filter(|t| t.kind == TargetKind::Group)
                .map(|t| t.name.as_str())
                .collect();
            g.sort_unstable();
            g
        };
        let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for g in &groups {
            let def = index[g];
            let e = edges.entry(g).or_default();
            for m in &def.members {
                let name = match m {
                    GroupMember::Inline(t) => t.name.as_str(),
                    GroupMember::Ref(r) => r.as_str(),
                };
                if groups.contains(&name) {
                    e.push(name);
                }
            }
        }
        for cycle in find_cycles(&groups, &edges) {
            let loc = Self::location_of(&self.target_defs, cycle[0]);
            self.error(
                Code::GroupCycle,
                &loc,
                format!("group membership cycle: {}", cycle.join(" -> ")),
            );
        }
    }
}

/// Depth-first search reporting one cycle per back edge, each as the path
/// from the re-entered node back to itself.
fn find_cycles<'a>(order: &[&'a str], edges: &BTreeMap<&'a str, Vec<&'a str>>) -> Vec<Vec<&'a str>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    fn visit<'a>(
        n: &'a str,
        edges: &BTreeMap<&'a str, Vec<&'a str>>,
        color: &mut HashMap<&'a str, Color>,
        stack: &mut Vec<&'a str>,
        out: &mut Vec<Vec<&'a str>>,
    ) {
        color.insert(n, Color::Grey);
        stack.push(n);
        for &m in edges.get(n).map(Vec::as_slice).unwrap_or_default() {
            match color.get(m).copied().unwrap_or(Color::White) {
                Color::White => visit(m, edges, color, stack, out),
                Color::Grey => {
                    let pos = stack.iter().position(|s| *s == m).unwrap();
                    let mut cycle = stack[pos..].to_vec();
                    cycle.push(m);
                    out.push(cycle);
                }
                Color::Black => {}
            }
        }
        stack.pop();
        color.insert(n, Color::Black);
    }
    let mut color = HashMap::new();
    let mut out = Vec::new();
    for &n in order {
        if color.get(n).copied().unwrap_or(Color::White) == Color::White {
            visit(n, edges, &mut color, &mut Vec::new(), &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::tree::parse_str;
    use super::*;
    use std::path::Path;
    use std::time::Duration;

    fn lower(xml: &str) -> Result<Validated, Vec<Diagnostic>> {
        validate_and_lower(&parse_str(xml, Path::new("t.xml")).unwrap())
    }

    fn codes(xml: &str) -> Vec<Code> {
        lower(xml)
            .unwrap_err()
            .into_iter()
            .filter(Diagnostic::is_error)
            .map(|d| d.code)
            .collect()
    }

    const TARGETS: &str = r#"<targets><target name="n" type="local"/></targets>"#;

    #[test]
    fn minimal_experiment() {
        let v = lower("<experiment><steps/></experiment>").unwrap();
        assert!(v.experiment.steps.items.is_empty());
        assert!(v.warnings.is_empty());
    }

    #[test]
    fn unbounded_repeat_is_rejected() {
        let xml = format!(
            r#"<experiment>{TARGETS}<tasklists><tasklist name="t"/></tasklists>
            <steps><repeat><step tasklist="t" targets="n"/></repeat></steps></experiment>"#
        );
        assert_eq!(codes(&xml), vec![Code::UnboundedRepeat]);
    }

    #[test]
    fn mutual_calls_form_a_cycle() {
        let xml = r#"<experiment><tasklists>
            <tasklist name="X"><call ref="Y"/></tasklist>
            <tasklist name="Y"><call ref="X"/></tasklist>
            </tasklists><steps/></experiment>"#;
        let diags = lower(xml).unwrap_err();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].code, Code::CallCycle);
        assert!(diags[0].message.contains("X -> Y -> X"), "{}", diags[0].message);
    }

    #[test]
    fn cleanup_chain_cycle() {
        let xml = r#"<experiment><tasklists>
            <tasklist name="a" cleanup="b"/>
            <tasklist name="b" cleanup="a"/>
            </tasklists><steps/></experiment>"#;
        assert_eq!(codes(xml), vec![Code::CleanupCycle]);
    }

    #[test]
    fn error_alias_warns() {
        let xml = r#"<experiment><tasklists><tasklist name="a" error="panic"/></tasklists><steps/></experiment>"#;
        let v = lower(xml).unwrap();
        assert_eq!(v.experiment.tasklists[0].on_error, ErrorMode::Panic);
        assert_eq!(v.warnings.len(), 1);
        assert_eq!(v.warnings[0].code, Code::AttributeAlias);
    }

    #[test]
    fn default_error_mode_is_abort_tasklist() {
        let xml = r#"<experiment><tasklists><tasklist name="a" timeout="PT5S"/></tasklists><steps/></experiment>"#;
        let tl = &lower(xml).unwrap().experiment.tasklists[0];
        assert_eq!(tl.on_error, ErrorMode::AbortTasklist);
        assert_eq!(tl.timeout, Some(Duration::from_secs(5)));
    }

    #[test]
    fn username_spelling_accepted() {
        let xml = r#"<experiment><targets><target name="s" type="ssh"><username>u</username><host>h</host></target></targets><steps/></experiment>"#;
        let t = &lower(xml).unwrap().experiment.targets[0];
        assert_eq!(t.ssh_user.as_deref(), Some("u"));
    }

    #[test]
    fn unknown_elements_and_attributes_are_errors() {
        let xml = r#"<experiment><tasklits/><steps foo="1"><stpe/></steps></experiment>"#;
        assert_eq!(
            codes(xml),
            vec![Code::UnknownElement, Code::UnknownAttribute, Code::UnknownElement]
        );
    }

    #[test]
    fn multiple_and_missing_steps() {
        assert_eq!(
            codes("<experiment><steps/><steps/></experiment>"),
            vec![Code::MultipleStepsElements]
        );
        assert_eq!(codes("<experiment/>"), vec![Code::MissingSteps]);
    }

    #[test]
    fn duplicate_names_across_nesting() {
        let xml = r#"<experiment><targets>
            <target name="A" type="local"/>
            <target name="g" type="group"><target name="A" type="local"/></target>
            </targets><tasklists><tasklist name="t"/><tasklist name="t"/></tasklists><steps/></experiment>"#;
        assert_eq!(codes(xml), vec![Code::DuplicateName, Code::DuplicateName]);
    }

    #[test]
    fn unknown_references_everywhere() {
        let xml = r#"<experiment><targets><target name="g" type="group"><target name="ghost"/></target></targets>
            <tasklists><tasklist name="t" cleanup="nope"><call ref="missing"/></tasklist></tasklists>
            <steps><step tasklist="zzz" targets="g"/><register-teardown ref="t" targets="nobody"/></steps></experiment>"#;
        assert_eq!(codes(xml), vec![Code::UnknownReference; 5]);
    }

    #[test]
    fn group_reference_cycle() {
        let xml = r#"<experiment><targets>
            <target name="g" type="group"><target name="h"/></target>
            <target name="h" type="group"><target name="g"/></target>
            </targets><steps/></experiment>"#;
        assert_eq!(codes(xml), vec![Code::GroupCycle]);
    }

    #[test]
    fn time_specs_on_steps() {
        let xml = format!(
            r#"<experiment>{TARGETS}<tasklists><tasklist name="t"/></tasklists><steps>
            <step tasklist="t" targets="n" start="PT10S" stop="PT5S"/>
            <step tasklist="t" targets="n" start="soon"/>
            <step tasklist="t" targets="n" start="2016-01-12T02:00:00Z" stop="PT1H"/>
            </steps></experiment>"#
        );
        assert_eq!(codes(&xml), vec![Code::StartNotBeforeStop, Code::BadTimeSpec]);
    }

    #[test]
    fn target_shape_errors() {
        let xml = r#"<experiment><targets>
            <target name="s" type="ssh"><host>h</host></target>
            <target name="p" type="planetlab" slice="x"/>
            <target name="e" type="group"/>
            <target name="l" type="local"><host>h</host></target>
            <target name="b" type="bogus"/>
            </targets><steps/></experiment>"#;
        assert_eq!(
            codes(xml),
            vec![
                Code::MissingElement,
                Code::MissingAttribute,
                Code::MissingAttribute,
                Code::InvalidTarget,
                Code::UnknownElement,
                Code::BadAttributeValue,
            ]
        );
    }

    #[test]
    fn env_names_must_be_identifiers() {
        let xml = r#"<experiment><targets><target name="l" type="local">
            <export-env var="1bad" value="x"/><export-env var="ok_1" value="y"/>
            </target></targets><steps/></experiment>"#;
        assert_eq!(codes(xml), vec![Code::BadAttributeValue]);
    }

    #[test]
    fn repeat_attributes() {
        let xml = format!(
            r#"<experiment>{TARGETS}<tasklists><tasklist name="t"/></tasklists><steps>
            <repeat iterations="0"><step tasklist="t" targets="n"/></repeat>
            <repeat during="PT5S" until="2030-01-01T00:00:00Z" iterations="3"><synchronize/></repeat>
            </steps></experiment>"#
        );
        assert_eq!(codes(&xml), vec![Code::BadAttributeValue]);
    }

    #[test]
    fn tasks_lower_structurally() {
        let xml = r#"<experiment><tasklists>
            <tasklist name="t"><seq><run>a</run><par><get>f</get><put>g</put></par></seq><call ref="u"/></tasklist>
            <tasklist name="u"/>
            </tasklists><steps/></experiment>"#;
        let exp = lower(xml).unwrap().experiment;
        assert_eq!(
            exp.tasklists[0].tasks,
            vec![
                Task::Seq(vec![
                    Task::Run("a".into()),
                    Task::Par(vec![Task::Get("f".into()), Task::Put("g".into())])
                ]),
                Task::Call("u".into())
            ]
        );
        assert!(exp.audit().is_empty());
    }

    #[test]
    fn cycle_finder_reports_self_loop() {
        let mut edges = BTreeMap::new();
        edges.insert("a", vec!["a"]);
        assert_eq!(find_cycles(&["a"], &edges), vec![vec!["a", "a"]]);
    }
}
