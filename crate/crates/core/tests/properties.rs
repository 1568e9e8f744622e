mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Write};

use proptest::prelude::*;
use proptest::test_runner::Config;

use seclambda::builder::{build_function_graph, compress_trace, lcp_group, lcp_len, BuildOptions, Unit};
use seclambda::controller::{ApplicationConfig, Controller, ControllerConfig};
use seclambda::credential::TokenVault;
use seclambda::enforcer::{EnforcementMode, PolicyEngine, Verdict};
use seclambda::harness::{self, fixtures, RunOptions};
use seclambda::model::{
    extract_traces, read_trace_log, write_trace_log, Direction, Edge, Flow, FlowEvent, FlowNode, FlowPattern, HttpOp,
    LocalFlowGraph, Trace,
};
use seclambda::protocol::{insert_tag, strip_tag, EventEnvelope, GuardId, LocalEnvelope, RequestId, Tag};

fn op() -> impl Strategy<Value = HttpOp> {
    prop_oneof![Just(HttpOp::Get), Just(HttpOp::Post), Just(HttpOp::Put), Just(HttpOp::Delete), Just(HttpOp::Other)]
}

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::Send), Just(Direction::Recv), Just(Direction::In), Just(Direction::Out)]
}

fn flow_event() -> impl Strategy<Value = FlowEvent> {
    (
        any::<u64>(),
        "[a-zA-Z][a-zA-Z0-9_-]{0,8}",
        ".{0,6}",
        direction(),
        ".{0,24}",
        op(),
        ".{0,6}",
        proptest::option::of("[0-9a-f]{32}"),
    )
        .prop_map(|(timestamp, function, instance, direction, url, op, session, payload_digest)| FlowEvent {
            timestamp,
            function,
            instance,
            direction,
            url,
            op,
            session,
            payload_digest,
        })
}

// Trace logs

proptest! {
    #[test]
    fn trace_log_round_trips_through_a_file(events in prop::collection::vec(flow_event(), 0..20)) {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        write_trace_log(&mut file, &events).unwrap();
        file.flush().unwrap();
        let back = read_trace_log(file.path()).unwrap();
        prop_assert_eq!(&back, &events);
        let mut again = Vec::new();
        write_trace_log(&mut again, &back).unwrap();
        prop_assert_eq!(again, std::fs::read(file.path()).unwrap());
    }

    #[test]
    fn extraction_is_deterministic_and_keeps_send_order(
        raw in prop::collection::vec((0..2usize, 0..2usize, direction(), 0..4usize), 0..30),
        shuffle in any::<u64>(),
    ) {
        // Distinct timestamps, handed over in a scrambled order.
        let mut events: Vec<FlowEvent> = raw
            .iter()
            .enumerate()
            .map(|(i, &(f, inst, direction, u))| FlowEvent {
                timestamp: i as u64 * 10,
                function: format!("f{f}"),
                instance: format!("i{inst}"),
                direction,
                url: format!("https://x.com/{u}"),
                op: HttpOp::Get,
                session: String::new(),
                payload_digest: None,
            })
            .collect();
        let n = events.len();
        for i in 0..n {
            let j = (shuffle.wrapping_mul(i as u64 + 7) % n as u64) as usize;
            events.swap(i, j);
        }
        let traces = extract_traces(&events);
        prop_assert_eq!(&traces, &extract_traces(&events));

        let mut sent: BTreeMap<(String, String), Vec<(u64, Flow)>> = BTreeMap::new();
        for e in events.iter().filter(|e| e.direction == Direction::Send) {
            sent.entry((e.function.clone(), e.instance.clone())).or_default().push((e.timestamp, Flow::new(e.url.clone(), e.op)));
        }
        let mut seen: BTreeMap<(String, String), Vec<Flow>> = BTreeMap::new();
        for t in &traces {
            let instance = t.execution_id.split(':').next().unwrap().to_string();
            seen.entry((t.function.clone(), instance)).or_default().extend(t.flows.iter().cloned());
        }
        for (key, mut flows) in sent {
            flows.sort_by_key(|(ts, _)| *ts);
            let expected: Vec<Flow> = flows.into_iter().map(|(_, f)| f).collect();
            prop_assert_eq!(seen.remove(&key).unwrap_or_default(), expected);
        }
        prop_assert!(seen.values().all(|f| f.is_empty()));
    }
}

// Compression

fn check_compression(steps: &[u8]) -> Result<(), TestCaseError> {
    let c = compress_trace(steps);
    prop_assert_eq!(c.expand(), steps.to_vec());
    prop_assert_eq!(common::expand(&c.items), steps.to_vec());
    for item in &c.items {
        prop_assert!(item.counter >= 1);
        if let Unit::Group(body) = &item.unit {
            prop_assert!(body.len() >= 2 && item.counter >= 2, "{:?}", c.items);
            // A group body is not itself a repetition of a shorter block.
            let n = body.len();
            prop_assert!(
                !(1..n).any(|d| n % d == 0 && body.chunks(d).all(|ch| ch == &body[..d])),
                "non-primitive group {:?}",
                body
            );
        }
    }
    Ok(())
}

#[test]
fn compression_expands_back_exhaustively() {
    for len in 0..=8u32 {
        for code in 0..3u32.pow(len) {
            let steps: Vec<u8> = (0..len).map(|i| (code / 3u32.pow(i) % 3) as u8).collect();
            check_compression(&steps).unwrap();
        }
    }
}

proptest! {
    #[test]
    fn compression_expands_back(steps in prop::collection::vec(0..8u8, 0..=16)) {
        check_compression(&steps)?;
    }

    #[test]
    fn compression_expands_back_on_repetitive_input(
        blocks in prop::collection::vec((prop::collection::vec(0..3u8, 1..4), 1..4usize), 0..5),
    ) {
        let steps: Vec<u8> = blocks.iter().flat_map(|(b, k)| b.iter().copied().cycle().take(b.len() * k)).collect();
        check_compression(&steps)?;
    }
}

// LCP grouping

fn url_set() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[ab/]{0,6}", 1..8)
        .prop_map(|tails| tails.into_iter().map(|t| format!("a.com/{t}")).collect())
}

proptest! {
    #[test]
    fn lcp_grouping_matches_pairwise_oracle(urls in url_set(), t_lcp in 1..4usize) {
        let groups = lcp_group(urls.iter().map(String::as_str), t_lcp);
        let got: BTreeSet<_> = groups.iter().map(|g| (g.members.clone(), g.lcp.clone(), g.generalized)).collect();
        prop_assert_eq!(got, common::lcp_groups(&urls, t_lcp));
    }

    #[test]
    fn lcp_groups_partition_by_prefix(urls in url_set()) {
        let groups = lcp_group(urls.iter().map(String::as_str), 1);
        let all: BTreeSet<&str> = urls.iter().map(String::as_str).collect();
        prop_assert_eq!(groups.iter().map(|g| g.members.len()).sum::<usize>(), all.len());
        for g in &groups {
            for u in &g.members {
                for v in &all {
                    let d = lcp_len(u, v);
                    if g.members.contains(*v) {
                        prop_assert!(u == v || d >= g.lcp.len(), "{u} {v} in {:?}", g);
                    } else {
                        prop_assert!(d <= g.lcp.len(), "{u} {v} outside {:?}", g);
                    }
                }
            }
        }
    }
}

// Graph construction

fn training_trace() -> impl Strategy<Value = Trace> {
    let flow = (0..3usize, 0..4usize, prop_oneof![Just(HttpOp::Get), Just(HttpOp::Put)])
        .prop_map(|(dir, obj, op)| Flow::new(format!("https://s.example.com/{dir}/obj{obj}"), op));
    (prop::collection::vec(flow, 0..10), prop_oneof![Just("user"), Just("queue")]).prop_map(|(flows, source)| Trace {
        function: "f".into(),
        execution_id: String::new(),
        source: source.into(),
        flows,
        completed: true,
    })
}

proptest! {
    #![proptest_config(Config::with_cases(128))]

    #[test]
    fn built_graphs_are_dags_accept_their_traces_and_are_deterministic(
        traces in prop::collection::vec(training_trace(), 1..6),
        t_lcp in 1..4usize,
    ) {
        let refs: Vec<&Trace> = traces.iter().collect();
        let opts = BuildOptions { t_lcp };
        let g = build_function_graph("f", &refs, opts).unwrap();
        prop_assert!(g.topo_order().is_ok());
        prop_assert_eq!(g.to_json(), build_function_graph("f", &refs, opts).unwrap().to_json());
        let engine = PolicyEngine::new(&g).unwrap();
        for t in &traces {
            let mut st = engine.begin(&t.source, EnforcementMode::Closed).unwrap();
            for f in &t.flows {
                prop_assert!(engine.step(&mut st, &f.url, f.op).is_allow(), "{f} denied\n{}", g.to_json());
            }
            prop_assert!(engine.end(&mut st).is_allow());
        }
    }
}

// Policy engine

const ALPHABET: [&str; 3] = ["A", "B", "C"];

#[derive(Debug, Clone)]
enum Shape {
    Flow(usize),
    Group(Vec<usize>),
}

/// Random small graph: node `i` gets at least one edge from an earlier node
/// (or the entry) and one to a later node (or the exit).
fn small_graph() -> impl Strategy<Value = LocalFlowGraph> {
    let shape = prop_oneof![
        (0..3usize).prop_map(Shape::Flow),
        prop::collection::vec(0..3usize, 2..4).prop_map(Shape::Group),
    ];
    prop::collection::vec((shape, 1..4u32), 1..5)
        .prop_flat_map(|nodes| {
            let n = nodes.len();
            let extra = prop::collection::vec((0..=n, 1..=n + 1), 0..6);
            let ins = prop::collection::vec(any::<prop::sample::Index>(), n);
            let outs = prop::collection::vec(any::<prop::sample::Index>(), n);
            (Just(nodes), extra, ins, outs)
        })
        .prop_map(|(nodes, extra, ins, outs)| {
            let n = nodes.len() as u32;
            let exit = n + 1;
            let mut edges = BTreeSet::new();
            for i in 1..=n {
                edges.insert((ins[i as usize - 1].index(i as usize) as u32, i));
                edges.insert((i, i + 1 + outs[i as usize - 1].index((exit - i) as usize) as u32));
            }
            for (a, b) in extra {
                if (a as u32) < b as u32 {
                    edges.insert((a as u32, b as u32));
                }
            }
            let mut graph_nodes = vec![FlowNode::entry(0, &["user".to_string()])];
            for (i, (shape, counter)) in nodes.into_iter().enumerate() {
                let id = i as u32 + 1;
                graph_nodes.push(match shape {
                    Shape::Flow(l) => FlowNode::flow(id, ALPHABET[l], HttpOp::Get, counter),
                    Shape::Group(body) => FlowNode::group(
                        id,
                        body.into_iter().map(|l| FlowPattern::new(ALPHABET[l], HttpOp::Get)).collect(),
                        counter,
                    ),
                });
            }
            graph_nodes.push(FlowNode::exit(exit));
            LocalFlowGraph {
                function: "f".into(),
                nodes: graph_nodes,
                edges: edges.into_iter().map(|(from, to)| Edge { from, to }).collect(),
                entry: 0,
                exit,
            }
        })
}

proptest! {
    #![proptest_config(Config::with_cases(512))]

    #[test]
    fn engine_with_groups_matches_path_enumeration(g in small_graph()) {
        let alphabet: Vec<FlowPattern> = ALPHABET.iter().map(|l| FlowPattern::new(*l, HttpOp::Get)).collect();
        common::engine_matches_language(&g, &alphabet).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn fail_open_reports_where_fail_closed_denies(g in small_graph(), word in prop::collection::vec(0..3usize, 0..12)) {
        let engine = PolicyEngine::new(&g).unwrap();
        let mut closed = engine.begin("user", EnforcementMode::Closed).unwrap();
        let mut open = engine.begin("user", EnforcementMode::Open).unwrap();
        let mut first_denial = None;
        for (i, &l) in word.iter().enumerate() {
            let c = engine.step(&mut closed, ALPHABET[l], HttpOp::Get);
            let o = engine.step(&mut open, ALPHABET[l], HttpOp::Get);
            prop_assert_eq!(o.verdict, Verdict::Allow);
            prop_assert_eq!(c.reason, o.reason);
            if c.verdict == Verdict::Deny && first_denial.is_none() {
                first_denial = Some(i);
            }
        }
        let upto = |v: &[seclambda::enforcer::Violation]| -> Vec<usize> {
            v.iter().map(|x| x.event_index).filter(|&i| first_denial.is_some_and(|d| i <= d)).collect()
        };
        prop_assert_eq!(upto(&open.violations), upto(&closed.violations));
        prop_assert_eq!(open.violations.first().map(|v| v.event_index), first_denial);
    }
}

// Wire format

fn id16() -> impl Strategy<Value = [u8; 16]> {
    any::<[u8; 16]>()
}

proptest! {
    #![proptest_config(Config::with_cases(10_000))]

    #[test]
    fn envelopes_round_trip(
        guard in id16(),
        function_type in any::<u16>(),
        event_type in any::<u16>(),
        body in prop::collection::vec(any::<u8>(), 0..300),
    ) {
        let env = EventEnvelope { guard_id: GuardId(guard), function_type, event_type, body: body.clone() };
        let bytes = env.encode();
        prop_assert_eq!(bytes.len(), 24 + body.len());
        prop_assert_eq!(&EventEnvelope::decode(&bytes).unwrap(), &env);
        prop_assert_eq!(EventEnvelope::decode_prefix(&bytes).unwrap(), Some((env.clone(), bytes.len())));
        prop_assert_eq!(EventEnvelope::read_from(&mut Cursor::new(&bytes)).unwrap(), Some(env.clone()));
        let local = LocalEnvelope { function_type, event_type, body };
        prop_assert_eq!(LocalEnvelope::decode(&local.encode()).unwrap(), local);
    }
}

proptest! {
    #![proptest_config(Config::with_cases(300))]

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..=65536)) {
        let _ = EventEnvelope::decode(&bytes);
        let _ = EventEnvelope::decode_prefix(&bytes);
        let _ = EventEnvelope::read_from(&mut Cursor::new(&bytes));
        let _ = LocalEnvelope::decode(&bytes);
    }
}

// Tags

fn http_message() -> impl Strategy<Value = Vec<u8>> {
    let header = ("[A-Za-z][A-Za-z0-9-]{0,12}", "[ -~]{0,20}")
        .prop_filter("not the tag header", |(n, _)| !n.eq_ignore_ascii_case(seclambda::protocol::TAG_HEADER));
    (
        prop_oneof![
            "(GET|POST|PUT|DELETE) /[ -~&&[^ ]]{0,20} HTTP/1\\.1",
            "HTTP/1\\.1 [1-5][0-9]{2} [A-Za-z ]{0,10}",
        ],
        prop::collection::vec(header, 0..5),
        prop::collection::vec(any::<u8>(), 0..64),
    )
        .prop_map(|(start, headers, body)| {
            let mut m = format!("{start}\r\n");
            for (n, v) in headers {
                m.push_str(&format!("{n}: {v}\r\n"));
            }
            m.push_str("\r\n");
            let mut bytes = m.into_bytes();
            bytes.extend(body);
            bytes
        })
}

fn tag() -> impl Strategy<Value = Tag> {
    ("[a-zA-Z0-9_.-]{1,20}", id16(), id16()).prop_map(|(function, g, r)| Tag {
        function,
        guard_id: GuardId(g),
        request_id: RequestId(r),
    })
}

proptest! {
    #[test]
    fn tag_insert_and_strip_are_inverse(msg in http_message(), t in tag()) {
        prop_assert_eq!(strip_tag(&msg).unwrap(), (None, msg.clone()));
        let tagged = insert_tag(&msg, &t).unwrap();
        let (found, rest) = strip_tag(&tagged).unwrap();
        prop_assert_eq!(found.as_ref(), Some(&t));
        prop_assert_eq!(&rest, &msg);
        prop_assert_eq!(insert_tag(&rest, &t).unwrap(), tagged);
    }
}

// Token vault

proptest! {
    #[test]
    fn vault_swaps_tokens_both_ways(
        tokens in prop::collection::btree_set("[A-Za-z0-9]{12,40}", 1..5)
            .prop_filter("no token inside another", |ts| {
                ts.iter().all(|a| ts.iter().all(|b| a == b || !a.contains(b.as_str())))
            }),
        layout in prop::collection::vec((any::<prop::sample::Index>(), "[ ,;:={}\"]{0,6}"), 0..10),
        seed in any::<u64>(),
    ) {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let mut vault = TokenVault::new(seed);
        for t in &tokens {
            let fake = vault.obfuscate(t);
            prop_assert_eq!(fake.len(), t.len());
            prop_assert_ne!(&fake, t);
            prop_assert_eq!(vault.obfuscate(t), fake.clone());
            prop_assert_eq!(vault.real(&fake), Some(t.as_str()));
        }
        let mut msg = String::new();
        for (pick, filler) in &layout {
            msg.push_str(filler);
            msg.push_str(&tokens[pick.index(tokens.len())]);
        }
        let hidden = vault.obfuscate_known(msg.as_bytes());
        prop_assert_eq!(hidden.len(), msg.len());
        let hidden_text = String::from_utf8(hidden.clone()).unwrap();
        prop_assert!(tokens.iter().all(|t| !hidden_text.contains(t.as_str())));
        prop_assert_eq!(vault.deobfuscate(&hidden), msg.into_bytes());
    }
}

// Controller registry

#[derive(Debug, Clone)]
enum RegistryOp {
    Register(usize),
    Answer(usize),
    Wait(u64),
}

proptest! {
    #[test]
    fn fan_out_never_exceeds_the_limit(
        ops in prop::collection::vec(prop_oneof![
            (0..8usize).prop_map(RegistryOp::Register),
            (0..8usize).prop_map(RegistryOp::Answer),
            (0..2500u64).prop_map(RegistryOp::Wait),
        ], 0..60),
    ) {
        const LIMIT: usize = 3;
        const STALE_NS: u64 = 3_000_000_000;
        let cfg = ControllerConfig {
            applications: vec![ApplicationConfig { name: "app".into(), functions: vec!["f".into()], ..Default::default() }],
            fan_out: BTreeMap::from([("f".to_string(), LIMIT)]),
            ..Default::default()
        };
        let controller = Controller::new(cfg).unwrap();
        let id = |i: usize| seclambda::protocol::derive_guard_id(&format!("i-{i}"), "f");
        // Model: instance -> last time it was heard from.
        let mut live: BTreeMap<usize, u64> = BTreeMap::new();
        let mut now = 0u64;
        for op in ops {
            match op {
                RegistryOp::Register(i) => {
                    let accepted = controller.handle_register(&format!("i-{i}"), "f", now).is_ok();
                    let expected = live.contains_key(&i) || live.len() < LIMIT;
                    prop_assert_eq!(accepted, expected);
                    if accepted {
                        live.entry(i).or_insert(now);
                    }
                }
                RegistryOp::Answer(i) => {
                    controller.heartbeat_ack(id(i), 1, now);
                    if let Some(t) = live.get_mut(&i) {
                        *t = now;
                    }
                }
                RegistryOp::Wait(ms) => {
                    now += ms * 1_000_000;
                    controller.heartbeat_sweep(now);
                    live.retain(|_, t| now - *t < STALE_NS);
                }
            }
            prop_assert!(controller.live_count("f") <= LIMIT);
            prop_assert_eq!(controller.live_count("f"), live.len());
            for i in 0..8 {
                prop_assert_eq!(controller.is_registered(id(i)), live.contains_key(&i));
            }
        }
    }
}

// Simulator

proptest! {
    #![proptest_config(Config::with_cases(24))]

    #[test]
    fn simulation_is_deterministic_and_logs_every_allowed_flow(
        fixture in 0..fixtures::NAMES.len(),
        seed in any::<u64>(),
        requests in 1..4usize,
    ) {
        let app = fixtures::by_name(fixtures::NAMES[fixture]).unwrap();
        let opts = RunOptions { seed, requests, ..Default::default() };
        let a = harness::record(&app, &opts).unwrap();
        let b = harness::record(&app, &opts).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        for ex in &a.executions {
            let mut last: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for e in &ex.events {
                let prev = last.insert((&e.function, &e.instance), e.timestamp).unwrap_or(0);
                prop_assert!(e.timestamp >= prev, "clock went back in {}", ex.id);
            }
        }

        let policies = seclambda::builder::build_policies(&a.executions, &app.topology(), BuildOptions::default()).unwrap();
        let controller = harness::controller_for(&app, Some(policies), EnforcementMode::Closed).unwrap();
        let run = harness::enforce(&app, controller.clone(), &opts, &[]).unwrap();
        let key = |f: &str, i: &str, d: Direction, u: &str, o: HttpOp| (f.to_string(), i.to_string(), d, u.to_string(), o);
        let mut allowed: Vec<_> = run
            .decisions
            .iter()
            .filter(|d| d.verdict == Verdict::Allow && d.direction == Direction::Send)
            .map(|d| key(&d.function, &d.instance, d.direction, &d.url, d.op))
            .collect();
        let mut logged: Vec<_> = controller
            .log(&app.name)
            .iter()
            .filter(|r| r.decision == Verdict::Allow && r.event.direction == Direction::Send)
            .map(|r| key(&r.event.function, &r.event.instance, r.event.direction, &r.event.url, r.event.op))
            .collect();
        allowed.sort();
        logged.sort();
        prop_assert_eq!(logged, allowed);
    }
}
