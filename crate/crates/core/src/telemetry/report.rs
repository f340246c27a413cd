use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{EventKind, ExecutionEvent};
use crate::model::{ExperimentReport, NodeOutcome, NodeSummary, Overall};

#[derive(Default)]
struct TaskCounts {
    run: usize,
    failed: usize,
}

/// Builds the final report from a closed event log.
///
/// Per-node outcomes come from the `nodes` map of each `StepEnd` and
/// `TeardownEnd`; task counts are taken from the matching `TaskEnd` events.
pub fn render_report(events: &[ExecutionEvent]) -> (ExperimentReport, String) {
    let mut counts: BTreeMap<(String, String), TaskCounts> = BTreeMap::new();
    let mut per_node = Vec::new();
    let mut fetched = Vec::new();
    let mut captures = Vec::new();
    let mut panicked = false;
    let mut errors = false;

    for ev in events {
        match ev.kind {
            EventKind::TaskEnd => {
                if let Some(node) = &ev.node {
                    let c = counts.entry((node.clone(), occurrence(ev))).or_default();
                    c.run += 1;
                    if ev.outcome.is_some_and(|o| o.is_failure()) {
                        c.failed += 1;
                    }
                }
                if let Some(f) = &ev.fetched {
                    fetched.push(f.clone());
                }
                captures.extend(ev.captures.iter().cloned());
            }
            EventKind::StepEnd | EventKind::TeardownEnd => {
                for (node, outcome) in ev.nodes.iter().flatten() {
                    errors |= outcome.is_error();
                    per_node.push((
                        node.clone(),
                        occurrence(ev),
                        ev.tasklist.clone().unwrap_or_default(),
                        *outcome,
                    ));
                }
            }
            EventKind::Panic => panicked = true,
            _ => {}
        }
    }

    let per_node_outcomes: Vec<NodeSummary> = per_node
        .into_iter()
        .map(|(node, occurrence, tasklist, outcome)| {
            let c = counts.remove(&(node.clone(), occurrence.clone())).unwrap_or_default();
            NodeSummary {
                node,
                occurrence,
                tasklist,
                outcome,
                tasks_run: c.run,
                tasks_failed: c.failed,
            }
        })
        .collect();

    let overall = if panicked {
        Overall::Panicked
    } else if errors {
        Overall::CompletedWithErrors
    } else {
        Overall::Completed
    };

    let report = ExperimentReport {
        events: events.to_vec(),
        per_node_outcomes,
        overall,
        fetched_artifacts: fetched,
        output_captures: captures,
    };
    let text = summary_text(&report);
    (report, text)
}

fn occurrence(ev: &ExecutionEvent) -> String {
    match (ev.step, ev.teardown) {
        (Some(s), _) => format!("step {s}"),
        (None, Some(t)) => format!("teardown {t}"),
        (None, None) => "-".to_string(),
    }
}

fn summary_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let counts: Vec<String> = tally(report)
        .into_iter()
        .map(|(outcome, n)| format!("{n} {outcome:?}"))
        .collect();
    if counts.is_empty() {
        let _ = writeln!(out, "overall: {:?}", report.overall);
    } else {
        let _ = writeln!(out, "overall: {:?} ({})", report.overall, counts.join(", "));
    }
    let failing: std::collections::BTreeSet<&str> = report
        .per_node_outcomes
        .iter()
        .filter(|s| s.outcome.is_error())
        .map(|s| s.node.as_str())
        .collect();
    if !failing.is_empty() {
        let failing: Vec<&str> = failing.into_iter().collect();
        let _ = writeln!(out, "failing nodes: {}", failing.join(", "));
    }
    if !report.per_node_outcomes.is_empty() {
        let _ = writeln!(
            out,
            "\n{:<24} {:<12} {:<20} {:<10} {:>5} {:>6}",
            "node", "occurrence", "tasklist", "outcome", "tasks", "failed"
        );
        for s in &report.per_node_outcomes {
            let _ = writeln!(
                out,
                "{:<24} {:<12} {:<20} {:<10} {:>5} {:>6}",
                s.node,
                s.occurrence,
                s.tasklist,
                format!("{:?}", s.outcome),
                s.tasks_run,
                s.tasks_failed
            );
        }
    }
    if !report.fetched_artifacts.is_empty() {
        let _ = writeln!(out, "\nfetched artifacts:");
        for a in &report.fetched_artifacts {
            let _ = writeln!(out, "  {a}");
        }
    }
    out
}

/// Number of node occurrences per outcome.
fn tally(report: &ExperimentReport) -> BTreeMap<NodeOutcome, usize> {
    let mut map = BTreeMap::new();
    for s in &report.per_node_outcomes {
        *map.entry(s.outcome).or_default() += 1;
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskOutcome;

    fn step_end(step: usize, tasklist: &str, nodes: &[(&str, NodeOutcome)]) -> ExecutionEvent {
        let mut ev = ExecutionEvent::new(EventKind::StepEnd)
            .step(Some(step))
            .tasklist(tasklist);
        ev.nodes = Some(nodes.iter().map(|(n, o)| (n.to_string(), *o)).collect());
        ev
    }

    fn task_end(node: &str, step: usize, outcome: TaskOutcome) -> ExecutionEvent {
        let mut ev = ExecutionEvent::new(EventKind::TaskEnd)
            .node(node)
            .step(Some(step))
            .tasklist("t");
        ev.outcome = Some(outcome);
        ev
    }

    #[test]
    fn start_and_end_only_is_completed() {
        let events = vec![
            ExecutionEvent::new(EventKind::ExperimentStart),
            ExecutionEvent::new(EventKind::ExperimentEnd),
        ];
        let (report, text) = render_report(&events);
        assert_eq!(report.overall, Overall::Completed);
        assert!(report.per_node_outcomes.is_empty());
        assert!(report.fetched_artifacts.is_empty());
        assert!(text.starts_with("overall: Completed"));
    }

    #[test]
    fn one_failed_node_of_three() {
        let events = vec![
            ExecutionEvent::new(EventKind::ExperimentStart),
            task_end("a", 0, TaskOutcome::Success),
            task_end("b", 0, TaskOutcome::Failed),
            task_end("c", 0, TaskOutcome::Success),
            step_end(
                0,
                "t",
                &[
                    ("a", NodeOutcome::Succeeded),
                    ("b", NodeOutcome::Failed),
                    ("c", NodeOutcome::Succeeded),
                ],
            ),
            ExecutionEvent::new(EventKind::ExperimentEnd),
        ];
        let (report, text) = render_report(&events);
        assert_eq!(report.overall, Overall::CompletedWithErrors);
        let failing: Vec<_> = report
            .per_node_outcomes
            .iter()
            .filter(|s| s.outcome == NodeOutcome::Failed)
            .collect();
        assert_eq!(failing.len(), 1);
        assert_eq!(failing[0].node, "b");
        assert_eq!(failing[0].tasks_failed, 1);
        assert!(text.contains("failing nodes: b"));
        assert_eq!(tally(&report)[&NodeOutcome::Succeeded], 2);
    }

    #[test]
    fn panic_dominates() {
        let events = vec![
            ExecutionEvent::new(EventKind::ExperimentStart),
            ExecutionEvent::new(EventKind::Panic),
            step_end(0, "t", &[("a", NodeOutcome::Succeeded)]),
        ];
        assert_eq!(render_report(&events).0.overall, Overall::Panicked);
    }

    #[test]
    fn artifacts_are_indexed() {
        let mut get = task_end("monitor", 2, TaskOutcome::Success);
        get.fetched = Some("monitor/testrun.pcap".into());
        let mut run = task_end("monitor", 0, TaskOutcome::Success);
        run.captures = vec!["monitor/stdout-s0-0.log".into(), "monitor/stderr-s0-0.log".into()];
        let (report, text) = render_report(&[run, get]);
        assert_eq!(report.fetched_artifacts, vec!["monitor/testrun.pcap"]);
        assert_eq!(report.output_captures.len(), 2);
        assert!(text.contains("monitor/testrun.pcap"));
    }
}
