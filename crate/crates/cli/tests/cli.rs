use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use hermes::harness::builders::{cluster, listener, rule, NodeBuilder};
use hermes::harness::overlay::write_config;
use hermes::harness::ports::free_addr;
use hermes::model::{ListenerMode, TunnelKind};

struct Kill(Child);

impl Drop for Kill {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn bin(name: &str) -> Command {
    let path = match name {
        "hermes-harness" => env!("CARGO_BIN_EXE_hermes-harness"),
        "hermes-proxy" => env!("CARGO_BIN_EXE_hermes-proxy"),
        "hermes-controller" => env!("CARGO_BIN_EXE_hermes-controller"),
        "hermes-relay" => env!("CARGO_BIN_EXE_hermes-relay"),
        _ => unreachable!(),
    };
    let mut c = Command::new(path);
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn harness_lists_every_scenario() {
    let out = bin("hermes-harness").arg("list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["video", "intermittent", "ip_reconfig", "namespace", "reconfig"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from\n{text}");
    }
}

#[test]
fn harness_run_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ns.json");
    let status = bin("hermes-harness").args(["run", "namespace", "--seed", "7", "--out"]).arg(&out).stderr(Stdio::null()).status().unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["scenario"], "namespace");
    assert_eq!(report["seed"], 7);
    assert_eq!(report["pass"], true);
}

#[test]
fn harness_rejects_unknown_or_unsupported_input() {
    assert_eq!(bin("hermes-harness").args(["run", "namespace", "--mode", "direct"]).stderr(Stdio::null()).status().unwrap().code(), Some(2));
    assert!(!bin("hermes-harness").args(["run", "nope"]).stderr(Stdio::null()).status().unwrap().success());
}

#[test]
fn relay_refuses_bad_loss() {
    let st = bin("hermes-relay")
        .args(["--listen", "127.0.0.1:0", "--forward", "127.0.0.1:9", "--loss", "1.5"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert!(!st.success());
}

#[tokio::test]
async fn controller_configures_proxy_process() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    std::fs::create_dir(&store).unwrap();
    let secrets = dir.path().join("secrets.json");
    std::fs::write(&secrets, r#"{"edge": "s3cret"}"#).unwrap();
    let cfg = |version| {
        NodeBuilder::new("edge", version)
            .listener(listener(free_addr(), ListenerMode::Http, "http"))
            .route(rule(&[], "up"))
            .cluster(cluster("up", TunnelKind::PlainTcp, &[free_addr()]))
            .build()
    };
    write_config(&store, &cfg(1)).unwrap();

    let ctl_addr = free_addr();
    let _ctl = Kill(
        bin("hermes-controller")
            .arg("--store")
            .arg(&store)
            .arg("--secrets")
            .arg(&secrets)
            .args(["--listen", &ctl_addr.to_string(), "--poll-ms", "200"])
            .spawn()
            .unwrap(),
    );
    let admin = free_addr();
    let _proxy = Kill(
        bin("hermes-proxy")
            .args(["--id", "edge", "--controller", &ctl_addr.to_string(), "--passphrase", "s3cret"])
            .args(["--admin", &admin.to_string()])
            .spawn()
            .unwrap(),
    );

    let wait_for = |want: u64| async move {
        let start = Instant::now();
        while start.elapsed() < Duration::from_secs(15) {
            if let Ok((200, v)) = hermes::admin::request(admin, "GET", "/config_version").await {
                if v["version"] == want {
                    return true;
                }
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
        false
    };
    assert!(wait_for(1).await, "proxy never reached version 1");
    write_config(&store, &cfg(2)).unwrap();
    assert!(wait_for(2).await, "edit was not pushed");
}
