//! Edits one node's config file in the controller's store and times how
//! long the proxy takes to report the new version on its admin endpoint.

use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;

use super::{ms, ScenarioSpec};
use crate::admin;
use crate::harness::builders::{cluster, listener, rule, NodeBuilder};
use crate::harness::overlay::Overlay;
use crate::harness::ports::free_addr;
use crate::harness::report::{Check, Report, Scaling, Trial};
use crate::model::{ListenerMode, NodeConfig, TunnelKind};

#[derive(Debug, Clone, Serialize)]
pub struct ReconfigParams {
    pub poll_interval: Duration,
    pub drain_time: Duration,
    pub max_reconfig: Duration,
    pub admin_poll: Duration,
}

impl Default for ReconfigParams {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_secs(5),
            drain_time: Duration::from_secs(5),
            max_reconfig: Duration::from_secs(10),
            admin_poll: Duration::from_millis(50),
        }
    }
}

fn node(p: &ReconfigParams, bind: std::net::SocketAddr, version: u64) -> NodeConfig {
    NodeBuilder::new("edge", version)
        .drain(p.drain_time)
        .listener(listener(bind, ListenerMode::Http, "http"))
        .route(rule(&[], "upstream"))
        .cluster(cluster("upstream", TunnelKind::PlainTcp, &[free_addr()]))
        .build()
}

pub async fn run(spec: &ScenarioSpec) -> std::io::Result<Report> {
    run_with(spec, &ReconfigParams::default()).await
}

pub async fn run_with(spec: &ScenarioSpec, p: &ReconfigParams) -> std::io::Result<Report> {
    let mut report = Report::new("reconfig", spec.mode.as_str(), spec.seed, json!(p));
    report.scaling = vec![
        Scaling::new("poll interval", "5 s", &format!("{:?}", p.poll_interval), "unchanged"),
        Scaling::new("drain time", "5 s", &format!("{:?}", p.drain_time), "unchanged"),
        Scaling::new("observer", "operator", &format!("admin endpoint every {:?}", p.admin_poll), ""),
    ];
    let bind = free_addr();
    let overlay = Overlay::boot(&[node(p, bind, 1)], p.poll_interval).await?;
    let admin_addr = overlay.serve_admin("edge").await?;

    let mut worst = Duration::ZERO;
    let mut all_ok = true;
    for i in 0..spec.trials {
        let version = 2 + u64::from(i);
        let start = Instant::now();
        overlay.publish(&node(p, bind, version))?;
        let limit = p.max_reconfig * 2;
        let mut seen = None;
        while start.elapsed() < limit {
            if let Ok((200, body)) = admin::request(admin_addr, "GET", "/config_version").await {
                if body["version"].as_u64() == Some(version) {
                    seen = Some(start.elapsed());
                    break;
                }
            }
            tokio::time::sleep(p.admin_poll).await;
        }
        let took = seen.unwrap_or(limit);
        worst = worst.max(took);
        let ok = seen.is_some_and(|d| d < p.max_reconfig);
        all_ok &= ok;
        let mut t = Trial::new(i, "update", ok, ms(took));
        t.reconfig_ms = seen.map(ms);
        t.detail = json!({ "version": version });
        report.trials.push(t);
    }
    report.config_versions = overlay.versions();
    report.checks.push(Check::new(
        "every update visible in time",
        all_ok && spec.trials > 0,
        format!("worst {:.0} ms, limit {:?}", ms(worst), p.max_reconfig),
    ));
    Ok(report)
}
