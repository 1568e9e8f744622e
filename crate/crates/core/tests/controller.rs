use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use seclambda::builder::{build_policies, BuildOptions, PolicySet};
use seclambda::clock::{Clock, SimClock, SystemClock, NANOS_PER_SEC};
use seclambda::controller::{
    serve, AlarmKind, ApplicationConfig, Controller, ControllerConfig, HeartbeatConfig, InProcessLink, RateLimitEntry,
};
use seclambda::enforcer::{DenyReason, EnforcementMode, Verdict};
use seclambda::guard::Guard;
use seclambda::harness::{self, fixtures, RunOptions};
use seclambda::model::{Direction, FlowEvent, HttpOp};
use seclambda::protocol::{ControllerLink, EventEnvelope, EventType, GuardId, ProtocolError, TcpLink};

const PUT_URL: &str = "https://s3.amazonaws.com/bucket/obj";

fn single_app(functions: &[&str], mode: EnforcementMode) -> ControllerConfig {
    ControllerConfig {
        applications: vec![ApplicationConfig {
            name: "app".into(),
            functions: functions.iter().map(|f| f.to_string()).collect(),
            fail_mode: mode,
            ..Default::default()
        }],
        ..Default::default()
    }
}

fn start(controller: &Arc<Controller>, clock: &Arc<SimClock>, instance: &str, function: &str) -> Result<Guard, ProtocolError> {
    let link = InProcessLink::new(Arc::clone(controller), clock.clone() as Arc<dyn Clock>);
    Guard::start(Box::new(link), clock.clone(), instance, function)
}

/// Remembers the type of every event the controller pushed.
struct Recording {
    inner: InProcessLink,
    seen: Arc<Mutex<Vec<EventType>>>,
}

impl ControllerLink for Recording {
    fn request(&mut self, env: EventEnvelope) -> Result<EventEnvelope, ProtocolError> {
        self.inner.request(env)
    }
    fn notify(&mut self, env: EventEnvelope) -> Result<(), ProtocolError> {
        self.inner.notify(env)
    }
    fn poll(&mut self) -> Result<Vec<EventEnvelope>, ProtocolError> {
        let pushed = self.inner.poll()?;
        self.seen.lock().unwrap().extend(pushed.iter().filter_map(|e| e.kind()));
        Ok(pushed)
    }
    fn attach(&mut self, guard: GuardId) -> Result<(), ProtocolError> {
        self.inner.attach(guard)
    }
}

fn photo_policies() -> (seclambda::harness::AppSpec, PolicySet, Vec<FlowEvent>) {
    let app = fixtures::photo();
    let run = harness::record(&app, &RunOptions { requests: 20, ..Default::default() }).unwrap();
    let policies = build_policies(&run.executions, &app.topology(), BuildOptions::default()).unwrap();
    (app, policies, run.executions[0].events.clone())
}

fn sends_of<'a>(events: &'a [FlowEvent], function: &'a str) -> impl Iterator<Item = &'a FlowEvent> {
    events.iter().filter(move |e| e.function == function && e.direction == Direction::Send)
}

#[test]
fn fan_out_limit_and_heartbeat_expiry() {
    let mut cfg = single_app(&["f"], EnforcementMode::Open);
    cfg.fan_out.insert("f".into(), 5);
    let controller = Arc::new(Controller::new(cfg).unwrap());
    let clock = Arc::new(SimClock::new(0));

    let mut guards: Vec<Guard> = (0..5).map(|i| start(&controller, &clock, &format!("i-{i}"), "f").unwrap()).collect();
    assert_eq!(controller.live_count("f"), 5);
    match start(&controller, &clock, "i-5", "f") {
        Err(ProtocolError::FanOutExceeded { limit: 5, .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("sixth guard registered"),
    }
    // Registering an existing instance again is not a new instance.
    assert!(start(&controller, &clock, "i-0", "f").is_ok());
    assert_eq!(controller.live_count("f"), 5);

    // Guard 0 answers heartbeats; the other four stay silent.
    for s in 1..=2 {
        clock.set(s * NANOS_PER_SEC);
        assert!(controller.heartbeat_sweep(clock.now_ns()).is_empty());
        assert_eq!(guards[0].poll(), 1);
    }
    assert!(start(&controller, &clock, "i-5", "f").is_err());

    clock.set(3 * NANOS_PER_SEC);
    let expired = controller.heartbeat_sweep(clock.now_ns());
    assert_eq!(expired.len(), 4);
    assert!(!expired.contains(&guards[0].guard_id()));
    assert!(controller.is_registered(guards[0].guard_id()));
    assert_eq!(controller.live_count("f"), 1);

    guards.push(start(&controller, &clock, "i-5", "f").unwrap());
    assert_eq!(controller.live_count("f"), 2);
    assert!(matches!(start(&controller, &clock, "i-0", "nope"), Err(ProtocolError::UnknownFunction(_))));
}

#[test]
fn rate_limit_stops_and_resumes() {
    let mut cfg = single_app(&["f"], EnforcementMode::Open);
    cfg.rate_limits.push(RateLimitEntry { function: "f".into(), pattern: "https://s3.amazonaws.com/bucket/*".into(), op: HttpOp::Put, rate: 10 });
    let controller = Arc::new(Controller::new(cfg).unwrap());
    let clock = Arc::new(SimClock::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let link = Recording { inner: InProcessLink::new(Arc::clone(&controller), clock.clone()), seen: Arc::clone(&seen) };
    let mut g = Guard::start(Box::new(link), clock.clone(), "i-1", "f").unwrap();

    assert!(g.on_invoke("user", HttpOp::Post, "s/in", b"go").is_allow());
    let mut allowed = 0;
    let mut limited = 0;
    for k in 0..25u64 {
        clock.set(k * 40_000_000);
        let d = g.on_send(PUT_URL, HttpOp::Put, &format!("s/{k}"), b"x");
        match d.reason {
            Some(DenyReason::RateLimited) => {
                assert_eq!(d.verdict, Verdict::Deny);
                limited += 1;
            }
            _ => {
                assert!(d.is_allow());
                allowed += 1;
            }
        }
    }
    assert_eq!((allowed, limited), (10, 15));
    // Other flows of the same function are not affected.
    assert!(g.on_send("https://s3.amazonaws.com/other/obj", HttpOp::Put, "s/o", b"x").is_allow());

    for s in 1..=3 {
        clock.set(s * NANOS_PER_SEC);
        controller.tick(clock.now_ns());
        g.poll();
    }
    assert!(g.on_send(PUT_URL, HttpOp::Put, "s/after", b"x").is_allow());
    let seen = seen.lock().unwrap();
    assert_eq!(seen.iter().filter(|k| **k == EventType::Stop).count(), 1);
    assert_eq!(seen.iter().filter(|k| **k == EventType::Resume).count(), 1);
}

#[test]
fn pushed_policy_applies_to_the_next_execution() {
    let (app, policies, events) = photo_policies();
    let cfg = single_app(&["UpdatePhoto", "ProcessPhoto"], EnforcementMode::Closed);
    let controller = Arc::new(Controller::new(ControllerConfig {
        applications: vec![ApplicationConfig { topology: app.topology(), ..cfg.applications[0].clone() }],
        ..cfg
    }).unwrap());
    let clock = Arc::new(SimClock::new(0));
    let mut g = start(&controller, &clock, "i-1", "UpdatePhoto").unwrap();
    assert!(!g.has_policy());
    assert_eq!(g.on_invoke("user", HttpOp::Post, "a/in", b"{}").reason, Some(DenyReason::NoPolicy));
    g.on_return("user", HttpOp::Post, "a/in", b"{}");

    let local = serde_json::to_value(&policies.local["UpdatePhoto"]).unwrap();
    let wrong = serde_json::to_value(&policies.local["ProcessPhoto"]).unwrap();
    let v1 = controller.push_policy(g.guard_id(), wrong).unwrap();
    let v2 = controller.push_policy(g.guard_id(), serde_json::json!({"nodes": 3})).unwrap();
    let v3 = controller.push_policy(g.guard_id(), local).unwrap();
    assert_eq!(g.poll(), 3);
    let acks: Vec<(u64, bool)> = controller.policy_acks("app").iter().map(|(_, a)| (a.version, a.ok)).collect();
    assert_eq!(acks, [(v1, false), (v2, false), (v3, true)]);

    assert!(g.on_invoke("user", HttpOp::Post, "b/in", b"{}").is_allow());
    assert!(g.has_policy());
    for (i, e) in sends_of(&events, "UpdatePhoto").enumerate() {
        assert!(g.on_send(&e.url, e.op, &format!("b/{i}"), b"").is_allow(), "{}", e.url);
    }
    assert!(g.on_return("user", HttpOp::Post, "b/in", b"{}").is_allow());

    assert!(g.on_invoke("user", HttpOp::Post, "c/in", b"{}").is_allow());
    let d = g.on_send("https://attacker.example.net/", HttpOp::Post, "c/0", b"");
    assert_eq!(d.reason, Some(DenyReason::NoMatchingSuccessor));
    assert!(controller.push_policy(GuardId([7; 16]), serde_json::Value::Null).is_err());
}

#[test]
fn service_triggered_execution_pairs_with_its_sender() {
    let (app, policies, events) = photo_policies();
    let controller = harness::controller_for(&app, Some(policies), EnforcementMode::Closed).unwrap();
    let clock = Arc::new(SimClock::new(0));
    let mut up = start(&controller, &clock, "u-1", "UpdatePhoto").unwrap();
    let mut pp = start(&controller, &clock, "p-1", "ProcessPhoto").unwrap();

    // Nothing has written to s3 yet.
    let d = pp.on_invoke("s3", HttpOp::Put, "p/in", b"{}");
    assert_eq!(d.reason, Some(DenyReason::NoPredecessorAvailable));
    pp.on_return("s3", HttpOp::Put, "p/in", b"{}");
    let alarms = controller.alarms();
    assert_eq!(alarms.len(), 1);
    assert_eq!(alarms[0].kind, AlarmKind::NoPredecessorAvailable);

    assert!(up.on_invoke("user", HttpOp::Post, "u/in", b"{}").is_allow());
    let request = up.current_tag().unwrap().request_id;
    for (i, e) in sends_of(&events, "UpdatePhoto").enumerate() {
        clock.advance(1_000);
        assert!(up.on_send(&e.url, e.op, &format!("u/{i}"), b"").is_allow());
    }
    clock.advance(1_000);
    assert!(pp.on_invoke("s3", HttpOp::Put, "p/in2", b"{}").is_allow());
    assert_eq!(pp.current_tag().unwrap().request_id, request);
    assert!(up.on_return("user", HttpOp::Post, "u/in", b"{}").is_allow());
    for (i, e) in sends_of(&events, "ProcessPhoto").enumerate() {
        assert!(pp.on_send(&e.url, e.op, &format!("p/{i}"), b"").is_allow());
    }
    assert!(pp.on_return("s3", HttpOp::Put, "p/in2", b"{}").is_allow());

    // One write triggers one execution.
    assert!(!pp.on_invoke("s3", HttpOp::Put, "p/in3", b"{}").is_allow());
    assert_eq!(controller.alarms().len(), 2);
    let path = controller.with_ledger("photo", |l| l.path(&request).to_vec()).unwrap();
    assert_eq!(path, ["UpdatePhoto", "ProcessPhoto"]);
}

fn wait_until(what: &str, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn guards_work_over_tcp() {
    let (app, policies, events) = photo_policies();
    let mut cfg = harness::controller_config(&app, Some(policies), EnforcementMode::Closed);
    cfg.heartbeat = HeartbeatConfig { period_ms: 50, miss_threshold: 3 };
    let controller = Arc::new(Controller::new(cfg).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::default());
    {
        let controller = Arc::clone(&controller);
        let clock = Arc::clone(&clock);
        thread::spawn(move || serve(controller, listener, clock));
    }

    let link = TcpLink::connect(addr).unwrap();
    let mut g = Guard::start(Box::new(link), Arc::clone(&clock), "u-1", "UpdatePhoto").unwrap();
    assert!(g.has_policy());
    assert!(g.on_invoke("user", HttpOp::Post, "t/in", b"{}").is_allow());
    for (i, e) in sends_of(&events, "UpdatePhoto").enumerate() {
        assert!(g.on_send(&e.url, e.op, &format!("t/{i}"), b"").is_allow());
    }
    assert!(!g.on_send("https://attacker.example.net/", HttpOp::Post, "t/x", b"").is_allow());
    wait_until("the event log", || controller.log("photo").len() == 4);
    let log = controller.log("photo");
    assert_eq!(log.last().unwrap().decision, Verdict::Deny);

    // Idle for several heartbeat periods: the link answers on its own.
    thread::sleep(Duration::from_millis(400));
    assert!(controller.is_registered(g.guard_id()));

    let id = g.guard_id();
    drop(g);
    wait_until("expiry", || !controller.is_registered(id));
    assert_eq!(controller.live_count("UpdatePhoto"), 0);
}
