use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::spec::{invocation_url, invoked_function, AppSpec, Directive, Repeat, SendSpec, TemplateScope};
use super::{render, Delivery, DecisionRecord, ExtraInvocation, HarnessError, RunOptions, RunReport, Side};
use crate::clock::{Clock, SimClock};
use crate::controller::{Controller, InProcessLink};
use crate::credential::HttpMessage;
use crate::enforcer::{Action, Decision};
use crate::guard::Guard;
use crate::model::{normalize_url, AppExecution, Direction, FlowEvent, HttpOp, Topology};
use crate::protocol::ProtocolError;

/// Source name of requests that come from outside the application.
pub const USER: &str = "user";

struct Instance {
    id: String,
    busy: bool,
    guard: Option<Guard>,
}

struct Exec {
    function: String,
    instance: usize,
    request: usize,
    source: String,
    idx: u32,
    pc: usize,
    iter: u32,
    vars: BTreeMap<String, String>,
    sends: u32,
}

enum SimEvent {
    Invoke { function: String, source: String, message: Vec<u8>, request: usize, idx: u32 },
    Step(usize),
    Tick,
}

/// Discrete-event run of an application. Deliveries take no simulated
/// time; each script step takes `step_ns`.
pub(super) struct Sim<'a> {
    app: &'a AppSpec,
    opts: &'a RunOptions,
    topology: Topology,
    rng: ChaCha8Rng,
    clock: Arc<SimClock>,
    controller: Option<Arc<Controller>>,
    queue: BTreeMap<(u64, u64), SimEvent>,
    seq: u64,
    pools: BTreeMap<String, Vec<Instance>>,
    execs: Vec<Option<Exec>>,
    inputs: Vec<BTreeMap<String, String>>,
    events: BTreeMap<usize, Vec<FlowEvent>>,
    regexes: BTreeMap<String, Regex>,
    report: RunReport,
}

fn response(status: u16, body: &str) -> Vec<u8> {
    HttpMessage::response(status, &[("Content-Type", "application/json")], body.as_bytes()).to_bytes()
}

fn target_of(url: &str) -> (String, String) {
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    match rest.find('/') {
        Some(i) => (rest[..i].to_string(), rest[i..].to_string()),
        None => (rest.to_string(), "/".to_string()),
    }
}

impl<'a> Sim<'a> {
    pub(super) fn new(app: &'a AppSpec, opts: &'a RunOptions, controller: Option<Arc<Controller>>) -> Result<Self, HarnessError> {
        app.validate()?;
        let mut regexes = BTreeMap::new();
        for f in &app.functions {
            for d in &f.script {
                if let Directive::Send(SendSpec { capture: Some(c), .. }) = d {
                    let re = Regex::new(&c.regex).map_err(|e| HarnessError::Spec(format!("capture regex: {e}")))?;
                    regexes.insert(c.regex.clone(), re);
                }
            }
        }
        Ok(Sim {
            app,
            opts,
            topology: app.topology(),
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            clock: Arc::new(SimClock::new(0)),
            controller,
            queue: BTreeMap::new(),
            seq: 0,
            pools: BTreeMap::new(),
            execs: Vec::new(),
            inputs: Vec::new(),
            events: BTreeMap::new(),
            regexes,
            report: RunReport::default(),
        })
    }

    fn schedule(&mut self, at: u64, ev: SimEvent) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn now(&self) -> u64 {
        self.clock.now_ns()
    }

    fn sample_input(&mut self) -> BTreeMap<String, String> {
        let specs = &self.app.inputs;
        specs.iter().map(|(k, s)| (k.clone(), s.sample(&mut self.rng))).collect()
    }

    fn user_request(&mut self, request: usize) -> (String, Vec<u8>) {
        let entries = &self.app.entry_functions;
        let function = entries[self.rng.gen_range(0..entries.len())].clone();
        let body = serde_json::to_string(&self.inputs[request]).expect("inputs serialize");
        let (host, path) = target_of(&invocation_url(&function));
        let msg = HttpMessage::request("POST", &path, &[("Host", &host)], body.as_bytes()).to_bytes();
        (function, msg)
    }

    pub(super) fn run(mut self, extra: &[ExtraInvocation]) -> Result<RunReport, HarnessError> {
        for r in 0..self.opts.requests {
            let input = self.sample_input();
            self.inputs.push(input);
            let (function, message) = self.user_request(r);
            let at = r as u64 * self.opts.request_gap_ns;
            self.schedule(at, SimEvent::Invoke { function, source: USER.into(), message, request: r, idx: 0 });
        }
        for (k, inv) in extra.iter().enumerate() {
            let request = self.opts.requests + k;
            let input = self.sample_input();
            self.inputs.push(input);
            let body = serde_json::to_string(&self.inputs[request]).expect("inputs serialize");
            let message = HttpMessage::request("POST", "/invocations", &[], body.as_bytes()).to_bytes();
            let at = inv.after_requests as u64 * self.opts.request_gap_ns + inv.delay_ns;
            self.schedule(
                at,
                SimEvent::Invoke { function: inv.function.clone(), source: inv.source.clone(), message, request, idx: 0 },
            );
        }
        if self.controller.is_some() {
            self.schedule(self.heartbeat_period(), SimEvent::Tick);
        }
        while let Some(((at, _), ev)) = self.queue.pop_first() {
            self.clock.set(at);
            match ev {
                SimEvent::Invoke { function, source, message, request, idx } => {
                    self.invoke(&function, &source, &message, request, idx)?
                }
                SimEvent::Step(e) => self.step(e)?,
                SimEvent::Tick => self.tick(),
            }
            self.check_fan_out();
        }
        let mut report = self.report;
        report.executions = self
            .events
            .into_iter()
            .map(|(r, events)| AppExecution { id: format!("req-{r:05}"), events })
            .collect();
        if let Some(c) = &self.controller {
            report.alarms = c.alarms();
        }
        Ok(report)
    }

    fn heartbeat_period(&self) -> u64 {
        let ms = self.controller.as_ref().map_or(1000, |c| c.config().heartbeat.period_ms);
        ms * 1_000_000
    }

    fn tick(&mut self) {
        let Some(c) = self.controller.clone() else { return };
        let now = self.now();
        for g in c.heartbeat_sweep(now) {
            self.report.errors.push(format!("guard {g} expired"));
        }
        c.tick(now);
        for inst in self.pools.values_mut().flatten() {
            if let Some(g) = inst.guard.as_mut() {
                g.poll();
            }
        }
        if self.queue.values().any(|e| !matches!(e, SimEvent::Tick)) {
            self.schedule(now + self.heartbeat_period(), SimEvent::Tick);
        }
    }

    fn check_fan_out(&mut self) {
        let Some(c) = &self.controller else { return };
        for (f, limit) in &self.app.fan_out {
            let live = c.live_count(f);
            if live > *limit {
                self.report.errors.push(format!("{f}: {live} live instances exceed the limit of {limit}"));
            }
        }
    }

    fn log_event(&mut self, request: usize, function: &str, instance: &str, direction: Direction, url: &str, op: HttpOp, session: &str) {
        let ev = FlowEvent {
            timestamp: self.now(),
            function: function.to_string(),
            instance: instance.to_string(),
            direction,
            url: url.to_string(),
            op,
            session: session.to_string(),
            payload_digest: None,
        };
        self.events.entry(request).or_default().push(ev);
    }

    #[allow(clippy::too_many_arguments)]
    fn record_decision(&mut self, request: usize, function: &str, instance: &str, direction: Direction, url: &str, op: HttpOp, d: &Decision) {
        self.report.decisions.push(DecisionRecord {
            request,
            function: function.to_string(),
            instance: instance.to_string(),
            direction,
            url: url.to_string(),
            op,
            verdict: d.verdict,
            reason: d.reason,
            at_ns: self.now(),
        });
    }

    fn deliver(&mut self, request: usize, side: Side, name: &str, url: &str, message: &[u8], origin: Option<&[u8]>) {
        self.report.deliveries.push(Delivery {
            request,
            side,
            name: name.to_string(),
            url: url.to_string(),
            message: String::from_utf8_lossy(message).into_owned(),
            origin: origin.map(|o| String::from_utf8_lossy(o).into_owned()),
        });
    }

    /// Picks an idle instance or cold-starts one. `None` when the
    /// controller refuses the new instance.
    fn acquire(&mut self, function: &str) -> Result<Option<usize>, HarnessError> {
        let pool = self.pools.entry(function.to_string()).or_default();
        if let Some(i) = pool.iter().position(|inst| !inst.busy) {
            pool[i].busy = true;
            return Ok(Some(i));
        }
        let id = format!("{function}-{}", pool.len());
        let guard = match &self.controller {
            None => None,
            Some(c) => {
                let link = Box::new(InProcessLink::new(Arc::clone(c), self.clock.clone()));
                match Guard::start(link, self.clock.clone(), &id, function) {
                    Ok(g) => Some(g),
                    Err(ProtocolError::FanOutExceeded { .. }) => {
                        self.report.throttled.push(function.to_string());
                        return Ok(None);
                    }
                    Err(e) => return Err(HarnessError::Protocol(e)),
                }
            }
        };
        let pool = self.pools.get_mut(function).expect("pool exists");
        pool.push(Instance { id, busy: true, guard });
        Ok(Some(pool.len() - 1))
    }

    fn release(&mut self, function: &str, instance: usize) {
        if let Some(inst) = self.pools.get_mut(function).and_then(|p| p.get_mut(instance)) {
            inst.busy = false;
        }
    }

    fn invoke(&mut self, function: &str, source: &str, message: &[u8], request: usize, idx: u32) -> Result<(), HarnessError> {
        let Some(instance) = self.acquire(function)? else {
            return Ok(());
        };
        let inst_id = self.pools[function][instance].id.clone();
        let session = format!("{inst_id}/in");
        let mut delivered = message.to_vec();
        let mut source = source.to_string();
        if let Some(guard) = self.pools.get_mut(function).unwrap()[instance].guard.as_mut() {
            let d = guard.on_invoke(&source, HttpOp::Post, &session, message);
            if let Some(t) = crate::protocol::strip_tag(message).ok().and_then(|(t, _)| t) {
                source = t.function;
            }
            self.record_decision(request, function, &inst_id, Direction::In, &source, HttpOp::Post, &d);
            if !d.is_allow() {
                self.release(function, instance);
                return Ok(());
            }
            if let Some(Action::UpdateMessage(m)) = d.action {
                delivered = m;
            }
        }
        self.log_event(request, function, &inst_id, Direction::In, &source, HttpOp::Post, &session);
        self.deliver(request, Side::Function, function, &invocation_url(function), &delivered, None);
        // Captures that never match leave their variable empty.
        let vars = self.app.function(function).expect("validated").script.iter().filter_map(|d| match d {
            Directive::Send(SendSpec { capture: Some(c), .. }) => Some((c.name.clone(), String::new())),
            _ => None,
        });
        let vars = vars.collect();
        self.execs.push(Some(Exec {
            function: function.to_string(),
            instance,
            request,
            source,
            idx,
            pc: 0,
            iter: 0,
            vars,
            sends: 0,
        }));
        let e = self.execs.len() - 1;
        let at = self.now() + self.opts.step_ns;
        self.schedule(at, SimEvent::Step(e));
        Ok(())
    }

    fn finish(&mut self, e: usize, returned: bool) {
        let Some(ex) = self.execs[e].take() else { return };
        if returned {
            let inst = &mut self.pools.get_mut(&ex.function).unwrap()[ex.instance];
            let inst_id = inst.id.clone();
            let session = format!("{inst_id}/in");
            let msg = response(200, "{}");
            if let Some(guard) = inst.guard.as_mut() {
                let d = guard.on_return(&ex.source, HttpOp::Post, &session, &msg);
                self.record_decision(ex.request, &ex.function, &inst_id, Direction::Out, &ex.source, HttpOp::Post, &d);
            }
            self.log_event(ex.request, &ex.function, &inst_id, Direction::Out, &ex.source, HttpOp::Post, &session);
        }
        self.release(&ex.function, ex.instance);
    }

    fn step(&mut self, e: usize) -> Result<(), HarnessError> {
        loop {
            let Some(ex) = self.execs[e].as_ref() else { return Ok(()) };
            let script = &self.app.function(&ex.function).expect("validated").script;
            let Some(directive) = script.get(ex.pc).cloned() else {
                self.finish(e, true);
                return Ok(());
            };
            match directive {
                Directive::Return => {
                    self.finish(e, true);
                    return Ok(());
                }
                Directive::Fail { probability } => {
                    if self.rng.gen_bool(probability) {
                        self.finish(e, false);
                        return Ok(());
                    }
                    self.execs[e].as_mut().unwrap().pc += 1;
                }
                Directive::Send(spec) => {
                    if self.next_iteration(e, &spec.repeat)? {
                        self.send(e, &spec)?;
                        return self.advance(e);
                    }
                }
                Directive::Invoke { function, repeat } => {
                    if self.next_iteration(e, &repeat)? {
                        let mut spec = SendSpec::new(invocation_url(&function), HttpOp::Post);
                        spec.body = "{\"index\":{i}}".into();
                        self.send(e, &spec)?;
                        return self.advance(e);
                    }
                }
            }
        }
    }

    /// True if the current directive has another repetition to run;
    /// otherwise moves on to the next directive.
    fn next_iteration(&mut self, e: usize, repeat: &Repeat) -> Result<bool, HarnessError> {
        let ex = self.execs[e].as_mut().unwrap();
        let n = repeat.eval(&self.inputs[ex.request])?;
        if ex.iter < n {
            return Ok(true);
        }
        ex.pc += 1;
        ex.iter = 0;
        Ok(false)
    }

    fn advance(&mut self, e: usize) -> Result<(), HarnessError> {
        if let Some(ex) = self.execs[e].as_mut() {
            ex.iter += 1;
            let at = self.now() + self.opts.step_ns;
            self.schedule(at, SimEvent::Step(e));
        }
        Ok(())
    }

    fn send(&mut self, e: usize, spec: &SendSpec) -> Result<(), HarnessError> {
        let ex = self.execs[e].as_mut().unwrap();
        ex.sends += 1;
        let (function, instance, request, idx, i) = (ex.function.clone(), ex.instance, ex.request, ex.idx, ex.iter);
        let vars = ex.vars.clone();
        let scope = TemplateScope { input: &self.inputs[request], vars: &vars, i, idx, request };
        let raw_url = render(&spec.url, &scope, &mut self.rng)?;
        let url = normalize_url(&raw_url).map_err(|e| HarnessError::Script(e.to_string()))?;
        let body = render(&spec.body, &scope, &mut self.rng)?;
        let mut headers = Vec::new();
        for (k, v) in &spec.headers {
            headers.push((k.clone(), render(v, &scope, &mut self.rng)?));
        }
        let (host, path) = target_of(&url);
        let mut hdrs: Vec<(&str, &str)> = vec![("Host", host.as_str())];
        hdrs.extend(headers.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        let message = HttpMessage::request(spec.op.as_str(), &path, &hdrs, body.as_bytes()).to_bytes();

        let inst_id = self.pools[&function][instance].id.clone();
        let session = format!("{inst_id}/{}", self.execs[e].as_ref().unwrap().sends);
        let mut wire = message.clone();
        if let Some(guard) = self.pools.get_mut(&function).unwrap()[instance].guard.as_mut() {
            let d = guard.on_send(&url, spec.op, &session, &message);
            self.record_decision(request, &function, &inst_id, Direction::Send, &url, spec.op, &d);
            if !d.is_allow() {
                return Ok(());
            }
            if let Some(Action::UpdateMessage(m)) = d.action {
                wire = m;
            }
        }
        self.log_event(request, &function, &inst_id, Direction::Send, &url, spec.op, &session);

        let reply = self.route(&function, &url, spec.op, &wire, &message, request, i)?;

        let mut seen = reply.clone();
        if let Some(guard) = self.pools.get_mut(&function).unwrap()[instance].guard.as_mut() {
            let d = guard.on_recv(&url, spec.op, &session, &reply);
            self.record_decision(request, &function, &inst_id, Direction::Recv, &url, spec.op, &d);
            if !d.is_allow() {
                return Ok(());
            }
            if let Some(Action::UpdateMessage(m)) = d.action {
                seen = m;
            }
        }
        self.log_event(request, &function, &inst_id, Direction::Recv, &url, spec.op, &session);
        self.deliver(request, Side::Function, &function, &url, &seen, None);

        if let Some(c) = &spec.capture {
            let text = String::from_utf8_lossy(&seen);
            if let Some(v) = self.regexes[&c.regex].captures(&text).and_then(|m| m.get(1)) {
                let v = v.as_str().to_string();
                self.execs[e].as_mut().unwrap().vars.insert(c.name.clone(), v);
            }
        }
        Ok(())
    }

    /// Hands a sent message to its destination and returns the response.
    #[allow(clippy::too_many_arguments)]
    fn route(&mut self, sender: &str, url: &str, op: HttpOp, wire: &[u8], original: &[u8], request: usize, i: u32) -> Result<Vec<u8>, HarnessError> {
        if let Some(target) = invoked_function(url) {
            if self.app.function(target).is_none() {
                return Ok(response(404, "{}"));
            }
            let at = self.now();
            self.schedule(
                at,
                SimEvent::Invoke { function: target.to_string(), source: sender.to_string(), message: wire.to_vec(), request, idx: i },
            );
            return Ok(response(202, "{}"));
        }
        let Some(service) = self.topology.resolve(url).map(str::to_string) else {
            self.deliver(request, Side::External, "", url, wire, Some(original));
            return Ok(response(200, "{}"));
        };
        self.deliver(request, Side::Service, &service, url, wire, Some(original));
        let spec = self.app.services.iter().find(|s| s.name == service).expect("topology comes from services");
        let parsed = HttpMessage::parse(wire).ok();
        let ops: Vec<String> = parsed.as_ref().map(|m| m.operations().iter().map(|s| s.to_string()).collect()).unwrap_or_default();
        let text = String::from_utf8_lossy(wire);
        let mut reply = response(200, "{}");
        if let Some(rule) = spec.responses.iter().find(|r| {
            url.starts_with(&r.prefix) && ops.iter().any(|o| o.eq_ignore_ascii_case(&r.op))
        }) {
            reply = if rule.require.iter().all(|s| text.contains(s.as_str())) {
                response(200, &rule.body)
            } else {
                response(403, "{\"message\":\"not authorized\"}")
            };
        }
        let triggered: Vec<String> = spec
            .triggers
            .iter()
            .filter(|t| t.op == op && url.starts_with(&t.prefix) && t.from.as_deref().map_or(true, |f| f == sender))
            .map(|t| t.function.clone())
            .collect();
        for function in triggered {
            let body = serde_json::json!({ "Records": [{ "source": service, "url": url }] }).to_string();
            let message = HttpMessage::request("POST", "/invocations", &[], body.as_bytes()).to_bytes();
            let at = self.now();
            self.schedule(at, SimEvent::Invoke { function, source: service.clone(), message, request, idx: 0 });
        }
        Ok(reply)
    }
}
