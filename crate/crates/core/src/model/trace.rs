use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::event::{Direction, FlowEvent, HttpOp};

/// Source name recorded when the sender of `m_in` is unknown.
pub const UNKNOWN_SOURCE: &str = "?";

/// A `(url, op)` pair sent by a function.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Flow {
    pub url: String,
    pub op: HttpOp,
}

impl Flow {
    pub fn new(url: impl Into<String>, op: HttpOp) -> Self {
        Flow { url: url.into(), op }
    }
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.op, self.url)
    }
}

/// The flows of one function execution, between its entry and exit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub function: String,
    pub execution_id: String,
    /// Declared source of the message that started the execution.
    pub source: String,
    pub flows: Vec<Flow>,
    /// Whether the execution reached its exit (an `Out` event was seen).
    pub completed: bool,
}

/// Marker-bracketed view of a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step<'a> {
    Entry(&'a str),
    Flow(&'a Flow),
    Exit,
}

impl Trace {
    pub fn steps(&self) -> Vec<Step<'_>> {
        let mut steps = Vec::with_capacity(self.flows.len() + 2);
        steps.push(Step::Entry(&self.source));
        steps.extend(self.flows.iter().map(Step::Flow));
        if self.completed {
            steps.push(Step::Exit);
        }
        steps
    }

    /// Step count, markers excluded.
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }
}

/// All events recorded for one application execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppExecution {
    pub id: String,
    pub events: Vec<FlowEvent>,
}

impl AppExecution {
    pub fn app_trace(&self) -> AppTrace {
        extract_app_trace(&self.id, &self.events)
    }
}

/// Function start order of one application execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppTrace {
    pub execution_id: String,
    pub function_sequence: Vec<AppStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppStep {
    pub function: String,
    pub start: u64,
    pub source: String,
    /// Timestamp and URL of every request this execution sent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sends: Vec<(u64, String)>,
}

/// Splits an event stream into per-execution traces.
///
/// Events are grouped by `(function, instance)` and ordered by timestamp
/// (stable for ties). Within an instance an `In` event opens an execution
/// and an `Out` closes it. Sends seen outside any open execution start an
/// execution with an unknown source. Output is ordered by the timestamp of
/// each execution's first event.
pub fn extract_traces(events: &[FlowEvent]) -> Vec<Trace> {
    let mut streams: BTreeMap<(&str, &str), Vec<&FlowEvent>> = BTreeMap::new();
    for e in events {
        streams
            .entry((e.function.as_str(), e.instance.as_str()))
            .or_default()
            .push(e);
    }
    let mut out: Vec<(u64, Trace)> = Vec::new();
    for ((function, instance), mut stream) in streams {
        stream.sort_by_key(|e| e.timestamp);
        let mut current: Option<(u64, Trace)> = None;
        let mut ordinal = 0usize;
        let open = |source: &str, ts: u64, ordinal: &mut usize| {
            let t = Trace {
                function: function.to_string(),
                execution_id: format!("{instance}:{ordinal}"),
                source: source.to_string(),
                flows: Vec::new(),
                completed: false,
            };
            *ordinal += 1;
            (ts, t)
        };
        for e in stream {
            match e.direction {
                Direction::In => {
                    if let Some(done) = current.take() {
                        out.push(done);
                    }
                    current = Some(open(&e.url, e.timestamp, &mut ordinal));
                }
                Direction::Send => {
                    let (_, t) = current
                        .get_or_insert_with(|| open(UNKNOWN_SOURCE, e.timestamp, &mut ordinal));
                    t.flows.push(Flow::new(e.url.clone(), e.op));
                }
                Direction::Out => {
                    let (ts, mut t) = current
                        .take()
                        .unwrap_or_else(|| open(UNKNOWN_SOURCE, e.timestamp, &mut ordinal));
                    t.completed = true;
                    out.push((ts, t));
                }
                Direction::Recv => {}
            }
        }
        if let Some(done) = current {
            out.push(done);
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.into_iter().map(|(_, t)| t).collect()
}

/// Function start order for the events of a single application execution.
pub fn extract_app_trace(execution_id: &str, events: &[FlowEvent]) -> AppTrace {
    let mut ordered: Vec<&FlowEvent> = events.iter().collect();
    ordered.sort_by_key(|e| e.timestamp);
    let mut seq: Vec<AppStep> = Vec::new();
    let mut open: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for e in ordered {
        let key = (e.function.as_str(), e.instance.as_str());
        match e.direction {
            Direction::In => {
                open.insert(key, seq.len());
                seq.push(AppStep {
                    function: e.function.clone(),
                    start: e.timestamp,
                    source: e.url.clone(),
                    sends: Vec::new(),
                });
            }
            Direction::Send => {
                if let Some(&i) = open.get(&key) {
                    seq[i].sends.push((e.timestamp, e.url.clone()));
                }
            }
            Direction::Out => {
                open.remove(&key);
            }
            Direction::Recv => {}
        }
    }
    AppTrace {
        execution_id: execution_id.to_string(),
        function_sequence: seq,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: u64, f: &str, inst: &str, dir: Direction, url: &str) -> FlowEvent {
        FlowEvent {
            timestamp: ts,
            function: f.into(),
            instance: inst.into(),
            direction: dir,
            url: url.into(),
            op: HttpOp::Get,
            session: "s".into(),
            payload_digest: None,
        }
    }

    #[test]
    fn splits_executions_per_instance() {
        use Direction::*;
        let events = vec![
            ev(1, "A", "i1", In, "user"),
            ev(2, "A", "i1", Send, "https://x.com/1"),
            ev(3, "B", "j1", In, "A"),
            ev(4, "A", "i1", Recv, "https://x.com/1"),
            ev(5, "A", "i1", Send, "https://x.com/2"),
            ev(6, "A", "i1", Out, "user"),
            ev(7, "A", "i1", In, "user"),
            ev(8, "B", "j1", Send, "https://y.com"),
        ];
        let traces = extract_traces(&events);
        assert_eq!(traces.len(), 3);
        assert_eq!(traces[0].function, "A");
        assert_eq!(traces[0].flows.len(), 2);
        assert!(traces[0].completed);
        assert_eq!(traces[1].function, "B");
        assert_eq!(traces[1].source, "A");
        assert!(!traces[1].completed);
        assert_eq!(traces[2].execution_id, "i1:1");
        assert!(traces[2].flows.is_empty());
        let steps = traces[0].steps();
        assert_eq!(steps.first(), Some(&Step::Entry("user")));
        assert_eq!(steps.last(), Some(&Step::Exit));
    }

    #[test]
    fn orphan_send_gets_unknown_source() {
        let events = vec![ev(1, "A", "i", Direction::Send, "https://x.com")];
        let t = extract_traces(&events);
        assert_eq!(t[0].source, UNKNOWN_SOURCE);
    }

    #[test]
    fn app_trace_orders_by_start() {
        use Direction::*;
        let events = vec![
            ev(5, "C", "k", In, "s3"),
            ev(1, "A", "i", In, "user"),
            ev(3, "B", "j", In, "A"),
        ];
        let at = extract_app_trace("r0", &events);
        let names: Vec<_> = at.function_sequence.iter().map(|s| s.function.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
    }
}
