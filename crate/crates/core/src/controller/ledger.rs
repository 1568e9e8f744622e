use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::protocol::{GuardId, RequestId, Tag};

/// One function execution as seen by the controller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRecord {
    pub guard: GuardId,
    pub tag: Option<Tag>,
    pub start_ns: u64,
    /// Services this execution sent messages to.
    pub sent_to: BTreeSet<String>,
    pub completed: bool,
    /// `(successor, service)` pairs this execution already triggered.
    consumed: BTreeSet<(String, String)>,
}

/// Per-application record of function executions, used to pair a
/// service-triggered execution with the execution that triggered it.
#[derive(Debug, Default)]
pub struct ExecutionLedger {
    /// Executions per function in the order their `m_in` arrived.
    lists: BTreeMap<String, Vec<ExecRecord>>,
    current: HashMap<GuardId, (String, usize)>,
    /// Functions visited by each application execution, in order.
    paths: HashMap<RequestId, Vec<String>>,
}

impl ExecutionLedger {
    pub fn start(&mut self, function: &str, guard: GuardId, tag: Option<Tag>, now_ns: u64) {
        if let Some(t) = &tag {
            self.paths.entry(t.request_id).or_default().push(function.to_string());
        }
        let list = self.lists.entry(function.to_string()).or_default();
        list.push(ExecRecord {
            guard,
            tag,
            start_ns: now_ns,
            sent_to: BTreeSet::new(),
            completed: false,
            consumed: BTreeSet::new(),
        });
        self.current.insert(guard, (function.to_string(), list.len() - 1));
    }

    fn current_mut(&mut self, guard: GuardId) -> Option<&mut ExecRecord> {
        let (f, i) = self.current.get(&guard)?;
        self.lists.get_mut(f)?.get_mut(*i)
    }

    pub fn record_send(&mut self, guard: GuardId, service: &str) {
        if let Some(r) = self.current_mut(guard) {
            r.sent_to.insert(service.to_string());
        }
    }

    pub fn complete(&mut self, guard: GuardId) {
        if let Some(r) = self.current_mut(guard) {
            r.completed = true;
        }
        self.current.remove(&guard);
    }

    /// Pairs a new execution of `successor`, triggered through `via`, with
    /// the earliest execution of `predecessor` that sent to `via` and has
    /// not yet triggered `successor` that way.
    pub fn pair(&mut self, successor: &str, predecessor: &str, via: &str) -> Option<ExecRecord> {
        let key = (successor.to_string(), via.to_string());
        let list = self.lists.get_mut(predecessor)?;
        let rec = list
            .iter_mut()
            .find(|r| r.sent_to.contains(via) && !r.consumed.contains(&key))?;
        rec.consumed.insert(key);
        Some(rec.clone())
    }

    pub fn executions(&self, function: &str) -> &[ExecRecord] {
        self.lists.get(function).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn path(&self, request: &RequestId) -> &[String] {
        self.paths.get(request).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: u8) -> GuardId {
        GuardId([n; 16])
    }

    #[test]
    fn pairs_in_start_order() {
        let mut l = ExecutionLedger::default();
        l.start("U", g(1), None, 1);
        l.start("U", g(2), None, 2);
        l.record_send(g(1), "s3");
        l.record_send(g(2), "s3");
        assert_eq!(l.pair("P", "U", "s3").unwrap().guard, g(1));
        assert_eq!(l.pair("P", "U", "s3").unwrap().guard, g(2));
        assert!(l.pair("P", "U", "s3").is_none());
    }

    #[test]
    fn skips_executions_that_have_not_sent() {
        let mut l = ExecutionLedger::default();
        l.start("U", g(1), None, 1);
        l.start("U", g(2), None, 2);
        l.record_send(g(2), "s3");
        assert_eq!(l.pair("P", "U", "s3").unwrap().guard, g(2));
        assert!(l.pair("P", "U", "s3").is_none());
        l.record_send(g(1), "s3");
        assert_eq!(l.pair("P", "U", "s3").unwrap().guard, g(1));
    }

    #[test]
    fn no_predecessor() {
        let mut l = ExecutionLedger::default();
        assert!(l.pair("P", "U", "s3").is_none());
        l.start("U", g(1), None, 1);
        l.record_send(g(1), "dynamo");
        assert!(l.pair("P", "U", "s3").is_none());
    }

    #[test]
    fn paths_follow_request() {
        let mut l = ExecutionLedger::default();
        let tag = |f: &str, n| Tag { function: f.into(), guard_id: g(n), request_id: RequestId([9; 16]) };
        l.start("U", g(1), Some(tag("U", 1)), 1);
        l.complete(g(1));
        l.start("P", g(2), Some(tag("P", 2)), 2);
        assert_eq!(l.path(&RequestId([9; 16])), ["U", "P"]);
        assert!(l.executions("U")[0].completed);
    }
}
