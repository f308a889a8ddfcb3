//! Acceptance suite: one PASS/FAIL line per criterion on stdout, then the
//! test fails if any criterion did.

use std::collections::BTreeSet;
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::{Duration, Instant};

use hermes::harness::builders::{cluster, headers, listener, rule, NodeBuilder};
use hermes::harness::ports::free_addr;
use hermes::harness::report::Report;
use hermes::harness::scenarios::{run_scenario, Mode, ScenarioName, ScenarioSpec};
use hermes::harness::stubs::{self, http_exchange};
use hermes::model::{ListenerMode, NodeConfig, RetryOn, RetryPolicy, TunnelKind};
use hermes::proxy::{execute_with_retry, AttemptError, Proxy};
use hermes::splitnet::{internet_checksum, Ipv4Prefix, SplitTable};
use hermes::wire::{encode_capsule, parse_message_head, CapsuleDecoder, HeadError, MessageHead};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

type Suite = fn(u32) -> Result<(), String>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn emit(n: u32, title: &str, v: &Verdict, took: Duration) {
    let line = format!(
        "criterion {n} {}: {title} ({:.1}s) {}\n",
        if v.pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        v.detail
    );
    // straight to the process stdout so the lines show without --nocapture
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn within(v: Verdict, took: Duration, budget: Duration) -> Verdict {
    if took <= budget {
        v
    } else {
        Verdict { pass: false, detail: format!("{} | over the {budget:?} budget", v.detail) }
    }
}

fn checks(r: &Report) -> String {
    r.checks.iter().map(|c| format!("[{}: {}]", c.name, c.detail)).collect::<Vec<_>>().join(" ")
}

async fn scenario(spec: ScenarioSpec) -> Result<Report, String> {
    run_scenario(&spec).await.map_err(|e| e.to_string())
}

async fn intermittent() -> Verdict {
    let direct = ScenarioSpec::new(ScenarioName::Intermittent).mode(Mode::Direct).trials(10);
    let overlay = ScenarioSpec::new(ScenarioName::Intermittent).mode(Mode::Overlay).trials(10);
    let (d, o) = tokio::join!(scenario(direct), scenario(overlay));
    match (d, o) {
        (Ok(d), Ok(o)) => {
            let (ds, os) = (d.aggregates.all.success_ratio, o.aggregates.all.success_ratio);
            Verdict {
                pass: ds == 0.0 && os == 1.0 && d.trials.len() == 10 && o.trials.len() == 10,
                detail: format!("direct success {ds:.2}, overlay success {os:.2}"),
            }
        }
        (d, o) => Verdict { pass: false, detail: format!("setup: {:?} {:?}", d.err(), o.err()) },
    }
}

async fn video() -> Verdict {
    let o = scenario(ScenarioSpec::new(ScenarioName::Video).mode(Mode::Overlay)).await;
    let d = scenario(ScenarioSpec::new(ScenarioName::Video).mode(Mode::Direct)).await;
    match (o, d) {
        (Ok(o), Ok(d)) => Verdict { pass: o.pass && d.pass, detail: format!("overlay {} direct {}", checks(&o), checks(&d)) },
        (o, d) => Verdict { pass: false, detail: format!("setup: {:?} {:?}", o.err(), d.err()) },
    }
}

async fn single(name: ScenarioName) -> Verdict {
    match scenario(ScenarioSpec::new(name)).await {
        Ok(r) => Verdict { pass: r.pass, detail: checks(&r) },
        Err(e) => Verdict { pass: false, detail: format!("setup: {e}") },
    }
}

async fn reconfig() -> Verdict {
    match scenario(ScenarioSpec::new(ScenarioName::Reconfig).trials(5)).await {
        Ok(r) => {
            let times: Vec<String> = r.trials.iter().map(|t| format!("{:.0}", t.duration_ms)).collect();
            Verdict { pass: r.pass && r.trials.len() == 5, detail: format!("update ms [{}] {}", times.join(", "), checks(&r)) }
        }
        Err(e) => Verdict { pass: false, detail: format!("setup: {e}") },
    }
}

// ---- property suites ----

fn capsule_round_trip(cases: u32) -> Result<(), String> {
    let strategy = (
        prop::collection::vec(prop::collection::vec(any::<u8>(), 0..1500), 0..20),
        prop::collection::vec(1usize..64, 1..40),
    );
    TestRunner::new(Config::with_cases(cases))
        .run(&strategy, |(datagrams, cuts)| {
            let stream: Vec<u8> = datagrams.iter().flat_map(|d| encode_capsule(d).unwrap()).collect();
            let mut dec = CapsuleDecoder::new();
            let mut got = Vec::new();
            let mut at = 0;
            let mut cut = cuts.iter().cycle();
            while at < stream.len() {
                let end = (at + cut.next().unwrap()).min(stream.len());
                dec.extend(&stream[at..end]);
                at = end;
                while let Some(d) = dec.next_datagram() {
                    got.push(d.to_vec());
                }
            }
            prop_assert_eq!(&got, &datagrams);
            prop_assert_eq!(dec.pending(), 0);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn head_fuzz(cases: u32) -> Result<(), String> {
    let token = "[A-Za-z0-9-]{1,12}";
    let valid = (token, "/[a-z0-9/]{0,20}", prop::collection::vec((token, "[ -~]{0,30}"), 0..8))
        .prop_map(|(m, t, hs)| {
            let mut s = format!("{m} {t} HTTP/1.1\r\n");
            for (n, v) in hs {
                s.push_str(&format!("{n}: {}\r\n", v.trim()));
            }
            s.push_str("\r\n");
            s.into_bytes()
        });
    let strategy = prop_oneof![
        prop::collection::vec(any::<u8>(), 0..512),
        (valid, prop::collection::vec(any::<u8>(), 0..64)).prop_map(|(mut h, tail)| {
            h.extend(tail);
            h
        }),
    ];
    TestRunner::new(Config::with_cases(cases))
        .run(&strategy, |buf| {
            let term = buf.windows(4).position(|w| w == b"\r\n\r\n");
            match parse_message_head(&buf) {
                Ok((_, used)) => {
                    prop_assert!(used <= buf.len(), "consumed {} of {}", used, buf.len());
                    prop_assert_eq!(Some(used), term.map(|t| t + 4));
                }
                Err(HeadError::Incomplete) => prop_assert!(term.is_none()),
                Err(HeadError::Malformed(_)) => {}
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Sum of big-endian 16-bit words in a u32 accumulator, folded at the end.
fn checksum_oracle(bytes: &[u8]) -> u16 {
    let mut acc: u32 = 0;
    let mut i = 0;
    while i < bytes.len() {
        let hi = u32::from(bytes[i]);
        let lo = if i + 1 < bytes.len() { u32::from(bytes[i + 1]) } else { 0 };
        acc = acc.wrapping_add(hi * 256 + lo);
        i += 2;
    }
    let mut folded = acc;
    while folded > 0xffff {
        folded = (folded >> 16) + (folded & 0xffff);
    }
    0xffff - folded as u16
}

fn checksum_vs_oracle(cases: u32) -> Result<(), String> {
    TestRunner::new(Config::with_cases(cases))
        .run(&prop::collection::vec(any::<u8>(), 0..2048), |bytes| {
            prop_assert_eq!(internet_checksum(&bytes), checksum_oracle(&bytes));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn brute_force_classify(routes: &[(u32, u8, u16)], dst: u32) -> Option<u16> {
    let mut best: Option<(u8, u16)> = None;
    for &(net, len, port) in routes {
        let mask = if len == 0 { 0 } else { u32::MAX << (32 - u32::from(len)) };
        if dst & mask == net && best.is_none_or(|(l, _)| len > l) {
            best = Some((len, port));
        }
    }
    best.map(|(_, p)| p)
}

fn classify_vs_brute_force(cases: u32) -> Result<(), String> {
    // a few /8 bases so random prefixes overlap and nest
    let route = (0u32..4, any::<u32>(), 0u8..=32, any::<u16>()).prop_map(|(base, low, len, port)| {
        let raw = (10 + base) << 24 | (low >> 8);
        let mask = if len == 0 { 0 } else { u32::MAX << (32 - u32::from(len)) };
        (raw & mask, len, port)
    });
    let dst = (0u32..5, any::<u32>()).prop_map(|(base, low)| (10 + base) << 24 | (low >> 8));
    let strategy = (prop::collection::vec(route, 0..24), prop::collection::vec(dst, 1..32));
    TestRunner::new(Config::with_cases(cases))
        .run(&strategy, |(routes, dsts)| {
            let table = SplitTable::new(
                routes.iter().map(|&(net, len, port)| (Ipv4Prefix::new(Ipv4Addr::from(net), len).unwrap(), port)),
            )
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
            for d in dsts {
                prop_assert_eq!(table.classify(Ipv4Addr::from(d)), brute_force_classify(&routes, d), "dst {}", Ipv4Addr::from(d));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn policy(num_retries: u32, on: &BTreeSet<RetryOn>) -> RetryPolicy {
    RetryPolicy {
        num_retries,
        retry_on: on.clone(),
        per_try_timeout: Duration::from_millis(50),
        backoff: Duration::from_millis(1),
        ..RetryPolicy::default()
    }
}

/// Every failure class against every retry_on subset: a stub that fails
/// `fail_first` times with `class` must be called exactly as often as the
/// policy allows.
async fn retry_accounting() -> Result<(), String> {
    for mask in 0u32..(1 << RetryOn::ALL.len()) {
        let on: BTreeSet<RetryOn> =
            RetryOn::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect();
        for class in RetryOn::ALL {
            for num_retries in 0..3u32 {
                for fail_first in 0..5u32 {
                    let p = policy(num_retries, &on);
                    let calls = AtomicU32::new(0);
                    let out = execute_with_retry(&p, |_| {
                        let n = calls.fetch_add(1, Ordering::SeqCst) + 1;
                        async move {
                            if n <= fail_first {
                                Err(AttemptError::new(class, "stub"))
                            } else {
                                Ok(n)
                            }
                        }
                    })
                    .await;
                    let retryable = on.contains(&class);
                    let expect_calls = match (fail_first, retryable) {
                        (0, _) => 1,
                        (_, false) => 1,
                        (f, true) => (f + 1).min(num_retries + 1),
                    };
                    let expect_ok = fail_first == 0 || (retryable && fail_first <= num_retries);
                    let got = calls.load(Ordering::SeqCst);
                    if got != expect_calls || out.attempts != got || out.result.is_ok() != expect_ok {
                        return Err(format!(
                            "class {class:?} retry_on {on:?} retries {num_retries} fail_first {fail_first}: \
                             {got} calls, {} attempts, ok {}",
                            out.attempts,
                            out.result.is_ok()
                        ));
                    }
                }
            }
        }
    }
    // a hung attempt is a gateway error: retried only when that class is listed
    for listed in [false, true] {
        let on: BTreeSet<RetryOn> = if listed { [RetryOn::GatewayError].into() } else { BTreeSet::new() };
        let calls = AtomicU32::new(0);
        let out = execute_with_retry(&policy(2, &on), |_| {
            calls.fetch_add(1, Ordering::SeqCst);
            std::future::pending::<Result<(), AttemptError>>()
        })
        .await;
        let want = if listed { 3 } else { 1 };
        let err = out.result.as_ref().err();
        if calls.load(Ordering::SeqCst) != want || err.map(|e| e.downstream_status()) != Some(504) {
            return Err(format!("timeouts with gateway_error listed={listed}: {} calls", calls.load(Ordering::SeqCst)));
        }
    }
    Ok(())
}

async fn properties() -> Verdict {
    let mut failures = Vec::new();
    let mut done = Vec::new();
    let suites: [(&str, Suite, u32); 4] = [
        ("capsule split round trip", capsule_round_trip, 1_000),
        ("head fuzz", head_fuzz, 10_000),
        ("checksum vs oracle", checksum_vs_oracle, 10_000),
        ("classify vs brute force", classify_vs_brute_force, 1_000),
    ];
    for (name, suite, cases) in suites {
        match suite(cases) {
            Ok(()) => done.push(format!("{name} x{cases}")),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    match retry_accounting().await {
        Ok(()) => done.push("retry accounting, all classes".into()),
        Err(e) => failures.push(format!("retry accounting: {e}")),
    }
    Verdict {
        pass: failures.is_empty(),
        detail: if failures.is_empty() { done.join(", ") } else { failures.join("; ") },
    }
}

// ---- swap atomicity ----

fn versioned(http: SocketAddr, version: u64, upstream: SocketAddr) -> NodeConfig {
    let mut r = rule(&[], "up");
    r.append = headers(&[("x-config-version", &version.to_string())]);
    NodeBuilder::new("swap", version)
        .listener(listener(http, ListenerMode::Http, "http"))
        .route(r)
        .cluster(cluster("up", TunnelKind::PlainTcp, &[upstream]))
        .drain(Duration::from_secs(2))
        .build()
}

/// Each stub identifies itself as the version whose config points at it and
/// echoes the version header the proxy appended; a request that saw a mix of
/// both configs would show a mismatch.
async fn swap_atomicity() -> Verdict {
    let (s1, s2) = match (stubs::header_echo(free_addr(), "1").await, stubs::header_echo(free_addr(), "2").await) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Verdict { pass: false, detail: "stub bind failed".into() },
    };
    let http = free_addr();
    let proxy = match Proxy::start(versioned(http, 1, s1.addr)).await {
        Ok(p) => p,
        Err(e) => return Verdict { pass: false, detail: format!("start: {e}") },
    };
    let total = 200u32;
    let spread = Duration::from_millis(400);
    let mut tasks = tokio::task::JoinSet::new();
    for i in 0..total {
        tasks.spawn(async move {
            tokio::time::sleep(spread * i / total).await;
            let head = MessageHead::request("GET", "/v").with_header("host", "anything");
            let (resp, body) = http_exchange(http, &head).await.map_err(|e| e.to_string())?;
            let v: serde_json::Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
            let stub = resp.headers.get("x-stub").unwrap_or("").to_string();
            let seen: Vec<String> = v["headers"]
                .as_object()
                .map(|h| h.iter().filter(|(k, _)| k.as_str() == "x-config-version").map(|(_, v)| v.as_str().unwrap_or("").to_string()).collect())
                .unwrap_or_default();
            Ok::<_, String>((resp.status(), stub, seen))
        });
    }
    tokio::time::sleep(spread / 2).await;
    let swapped = proxy.swap_config(versioned(http, 2, s2.addr));
    let mut ok = 0;
    let mut per_version = [0u32; 2];
    let mut bad = Vec::new();
    let (swap, ()) = tokio::join!(swapped, async {
        while let Some(r) = tasks.join_next().await {
            match r.map_err(|e| e.to_string()).and_then(|x| x) {
                Ok((Some(200), stub, seen)) if seen.len() == 1 && seen[0] == stub => {
                    ok += 1;
                    per_version[if stub == "1" { 0 } else { 1 }] += 1;
                }
                Ok(other) => bad.push(format!("{other:?}")),
                Err(e) => bad.push(e),
            }
        }
    });
    proxy.shutdown();
    let swap_ok = swap.as_ref().is_ok_and(|r| r.applied);
    Verdict {
        pass: ok == total && swap_ok && per_version.iter().all(|&n| n > 0),
        detail: format!(
            "{ok}/{total} consistent, v1 {} v2 {}, swap applied {swap_ok}{}",
            per_version[0],
            per_version[1],
            bad.first().map(|b| format!(", first bad {b}")).unwrap_or_default()
        ),
    }
}

#[test]
fn acceptance() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let mut failed = Vec::new();
    let budgets: [(u32, &str, u64); 7] = [
        (1, "intermittent delivery", 300),
        (2, "loss elimination under tunneling", 120),
        (3, "reconfiguration latency", 120),
        (4, "RTT staircase", 180),
        (5, "namespace routing and balancing", 120),
        (6, "codec and numeric property suites", 60),
        (7, "swap atomicity", 60),
    ];
    for (n, title, budget) in budgets {
        let start = Instant::now();
        let v = rt.block_on(async {
            match n {
                1 => intermittent().await,
                2 => video().await,
                3 => reconfig().await,
                4 => single(ScenarioName::IpReconfig).await,
                5 => single(ScenarioName::Namespace).await,
                6 => properties().await,
                _ => swap_atomicity().await,
            }
        });
        let took = start.elapsed();
        let v = within(v, took, Duration::from_secs(budget));
        emit(n, title, &v, took);
        if !v.pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
