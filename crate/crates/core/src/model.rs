//! Configuration schema shared by the proxy, the controller and the harness.
//!
//! A [`NodeConfig`] is the complete behavior of one proxy. It is read from a
//! UTF-8 JSON document (one file per node in the controller's store) and must
//! pass [`validate_config`] before a proxy activates it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::splitnet::Ipv4Prefix;

/// Header map with names canonicalized to lowercase.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct HeaderMap(BTreeMap<String, String>);

impl HeaderMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl AsRef<str>, value: impl Into<String>) -> Option<String> {
        self.0.insert(name.as_ref().to_ascii_lowercase(), value.into())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        if name.bytes().any(|b| b.is_ascii_uppercase()) {
            self.0.get(&name.to_ascii_lowercase()).map(String::as_str)
        } else {
            self.0.get(name).map(String::as_str)
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn remove(&mut self, name: &str) -> Option<String> {
        self.0.remove(&name.to_ascii_lowercase())
    }

    /// Inserts every entry of `other`, replacing values already present.
    pub fn merge_from(&mut self, other: &HeaderMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<K: AsRef<str>, V: Into<String>> FromIterator<(K, V)> for HeaderMap {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut map = HeaderMap::new();
        for (k, v) in iter {
            map.insert(k, v);
        }
        map
    }
}

impl Serialize for HeaderMap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for HeaderMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        Ok(raw.into_iter().collect())
    }
}

/// Returns true when `name` is a non-empty lowercase HTTP token.
pub fn is_valid_header_name(name: &str) -> bool {
    !name.is_empty()
        && name.bytes().all(|b| {
            b.is_ascii_lowercase()
                || b.is_ascii_digit()
                || matches!(
                    b,
                    b'!' | b'#' | b'$' | b'%' | b'&' | b'\'' | b'*' | b'+' | b'-' | b'.' | b'^' | b'_' | b'`' | b'|' | b'~'
                )
        })
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub(crate) mod opt_duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&(d.as_millis() as u64)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<u64>::deserialize(d)?.map(Duration::from_millis))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Tcp,
    Udp,
}

/// An IP endpoint with its transport.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub transport: Transport,
}

impl Endpoint {
    pub fn tcp(host: impl Into<String>, port: u16) -> Self {
        Self { host: host.into(), port, transport: Transport::Tcp }
    }

    pub fn udp(host: impl Into<String>, port: u16) -> Self {
        Self { host: host.into(), port, transport: Transport::Udp }
    }

    pub fn from_addr(addr: SocketAddr, transport: Transport) -> Self {
        Self { host: addr.ip().to_string(), port: addr.port(), transport }
    }

    /// `host:port` form used as a CONNECT target.
    pub fn authority(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    pub async fn resolve(&self) -> std::io::Result<SocketAddr> {
        tokio::net::lookup_host(self.authority())
            .await?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.transport {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        };
        write!(f, "{}/{}:{}", t, self.host, self.port)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListenerMode {
    Http,
    TcpForward,
    UdpIngest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListenerSpec {
    pub bind: Endpoint,
    pub mode: ListenerMode,
    #[serde(default)]
    pub port_tag: String,
    /// Headers attached to all traffic entering through this listener.
    #[serde(default)]
    pub implicit_headers: HeaderMap,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteMatch {
    #[serde(default)]
    pub headers: HeaderMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port_tag: Option<String>,
}

impl RouteMatch {
    pub fn is_catch_all(&self) -> bool {
        self.headers.is_empty() && self.port_tag.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRule {
    #[serde(rename = "match", default)]
    pub matcher: RouteMatch,
    /// Target cluster name.
    pub action: String,
    #[serde(default)]
    pub append: HeaderMap,
    /// Header names this node must pass through without interpreting.
    #[serde(default)]
    pub defer: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_gate: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbPolicy {
    RoundRobin,
    FirstHealthy,
}

/// Failure classes a retry policy may retry on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryOn {
    ConnectFailure,
    RefusedStream,
    GatewayError,
    Reset,
    Status5xx,
}

impl RetryOn {
    pub const ALL: [RetryOn; 5] = [
        RetryOn::ConnectFailure,
        RetryOn::RefusedStream,
        RetryOn::GatewayError,
        RetryOn::Reset,
        RetryOn::Status5xx,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default)]
    pub num_retries: u32,
    #[serde(rename = "per_try_timeout_ms", with = "duration_ms")]
    pub per_try_timeout: Duration,
    #[serde(default)]
    pub retry_on: BTreeSet<RetryOn>,
    /// Dial budget for plain TCP forwarders.
    #[serde(default = "default_connect_attempts")]
    pub max_connect_attempts: u32,
    #[serde(rename = "backoff_ms", with = "duration_ms", default)]
    pub backoff: Duration,
}

fn default_connect_attempts() -> u32 {
    1
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            num_retries: 0,
            per_try_timeout: Duration::from_secs(5),
            retry_on: BTreeSet::new(),
            max_connect_attempts: 1,
            backoff: Duration::ZERO,
        }
    }
}

impl RetryPolicy {
    pub fn retries(&self, class: RetryOn) -> bool {
        self.retry_on.contains(&class)
    }

    pub fn max_attempts(&self) -> u32 {
        1 + self.num_retries
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunnelKind {
    UdpOverHttp,
    TcpConnect,
    PlainTcp,
    PlainUdp,
}

impl TunnelKind {
    /// Whether the upstream carries datagrams (as opposed to a byte stream).
    pub fn is_datagram(self) -> bool {
        matches!(self, TunnelKind::UdpOverHttp | TunnelKind::PlainUdp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TunnelKind::UdpOverHttp => "udp_over_http",
            TunnelKind::TcpConnect => "tcp_connect",
            TunnelKind::PlainTcp => "plain_tcp",
            TunnelKind::PlainUdp => "plain_udp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub name: String,
    pub endpoints: Vec<Endpoint>,
    pub lb: LbPolicy,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub tunnel_kind: TunnelKind,
    /// Datagram sessions toward this cluster close after this much silence.
    #[serde(
        rename = "idle_timeout_ms",
        with = "opt_duration_ms",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub idle_timeout: Option<Duration>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVerdict {
    Allow,
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrant {
    pub decision: PolicyVerdict,
    #[serde(default)]
    pub append: HeaderMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    pub id: String,
    #[serde(default)]
    pub tokens: BTreeMap<String, TokenGrant>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRoute {
    pub prefix: Ipv4Prefix,
    pub port: u16,
}

/// Complete behavior of one proxy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub version: u64,
    #[serde(default)]
    pub listeners: Vec<ListenerSpec>,
    #[serde(default)]
    pub routes: Vec<RouteRule>,
    #[serde(default)]
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub address_spaces: BTreeMap<String, String>,
    #[serde(rename = "drain_time_ms", with = "duration_ms", default)]
    pub drain_time: Duration,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub policies: Vec<PolicyRule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub split_tunnel: Vec<SplitRoute>,
}

impl NodeConfig {
    /// The configuration a proxy runs before it has received anything.
    pub fn empty(node_id: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            version: 0,
            listeners: Vec::new(),
            routes: Vec::new(),
            clusters: Vec::new(),
            address_spaces: BTreeMap::new(),
            drain_time: Duration::ZERO,
            policies: Vec::new(),
            split_tunnel: Vec::new(),
        }
    }

    pub fn cluster(&self, name: &str) -> Option<&ClusterSpec> {
        self.clusters.iter().find(|c| c.name == name)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &str> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Error)
            .map(|f| f.message.as_str())
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<&str> = self.findings.iter().map(|f| f.message.as_str()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

struct Findings(Vec<Finding>);

impl Findings {
    fn error(&mut self, message: String) {
        self.0.push(Finding { severity: Severity::Error, message });
    }

    fn warn(&mut self, message: String) {
        self.0.push(Finding { severity: Severity::Warning, message });
    }

    fn header_names<'a>(&mut self, what: &str, names: impl Iterator<Item = &'a str>) {
        for name in names {
            if !is_valid_header_name(name) {
                self.error(format!("{what}: invalid header name {name:?}"));
            }
        }
    }

    fn endpoint(&mut self, what: &str, ep: &Endpoint) {
        if ep.host.is_empty() {
            self.error(format!("{what}: endpoint host is empty"));
        }
        if ep.port == 0 {
            self.error(format!("{what}: endpoint port 0 out of range"));
        }
    }
}

/// Checks every referential and range invariant of `cfg`, reporting all
/// violations rather than stopping at the first.
pub fn validate_config(cfg: &NodeConfig) -> ValidationReport {
    let mut f = Findings(Vec::new());

    if cfg.node_id.is_empty() {
        f.error("node_id is empty".into());
    }
    if cfg.version < 1 {
        f.error(format!("version {} must be at least 1", cfg.version));
    }

    let mut binds = HashSet::new();
    for (i, l) in cfg.listeners.iter().enumerate() {
        let what = format!("listener {i}");
        f.endpoint(&what, &l.bind);
        let expected = match l.mode {
            ListenerMode::UdpIngest => Transport::Udp,
            _ => Transport::Tcp,
        };
        if l.bind.transport != expected {
            f.error(format!("{what}: mode {:?} requires {:?} bind", l.mode, expected));
        }
        if l.mode == ListenerMode::UdpIngest && l.port_tag.is_empty() {
            f.error(format!("{what}: udp_ingest listener requires a port_tag"));
        }
        if !binds.insert((l.bind.host.clone(), l.bind.port, l.bind.transport)) {
            f.error(format!("{what}: duplicate bind {}", l.bind));
        }
        f.header_names(&what, l.implicit_headers.names());
    }

    let mut names = HashSet::new();
    for c in &cfg.clusters {
        let what = format!("cluster {}", c.name);
        if c.name.is_empty() {
            f.error("cluster name is empty".into());
        }
        if !names.insert(c.name.as_str()) {
            f.error(format!("duplicate cluster {}", c.name));
        }
        if c.endpoints.is_empty() {
            f.error(format!("{what}: cluster has no endpoints"));
        }
        let expected = match c.tunnel_kind {
            TunnelKind::PlainUdp => Transport::Udp,
            _ => Transport::Tcp,
        };
        for ep in &c.endpoints {
            f.endpoint(&what, ep);
            if ep.transport != expected {
                f.error(format!(
                    "{what}: endpoint {ep} must use {:?} for {}",
                    expected,
                    c.tunnel_kind.as_str()
                ));
            }
        }
        if c.retry.max_connect_attempts == 0 {
            f.error(format!("{what}: max_connect_attempts must be positive"));
        }
        if c.retry.per_try_timeout.is_zero() {
            f.error(format!("{what}: per_try_timeout must be positive"));
        }
    }

    let policy_ids: HashSet<&str> = cfg.policies.iter().map(|p| p.id.as_str()).collect();
    let tags: HashSet<&str> = cfg.listeners.iter().map(|l| l.port_tag.as_str()).collect();
    let mut catch_all_at = None;
    for (i, r) in cfg.routes.iter().enumerate() {
        let what = format!("route {i}");
        if !names.contains(r.action.as_str()) {
            f.error(format!("{what}: unknown cluster {}", r.action));
        }
        f.header_names(&what, r.matcher.headers.names());
        f.header_names(&what, r.append.names());
        f.header_names(&what, r.defer.iter().map(String::as_str));
        for d in &r.defer {
            if r.matcher.headers.contains(d) {
                f.error(format!("{what}: header {d} is both matched and deferred"));
            }
            if r.append.contains(d) {
                f.error(format!("{what}: header {d} is both appended and deferred"));
            }
        }
        if let Some(tag) = &r.matcher.port_tag {
            if !tags.contains(tag.as_str()) {
                f.warn(format!("{what}: no listener carries port_tag {tag}"));
            }
        }
        if let Some(gate) = &r.policy_gate {
            if !policy_ids.contains(gate.as_str()) {
                f.error(format!("{what}: unknown policy {gate}"));
            }
        }
        if let Some(at) = catch_all_at {
            f.warn(format!("{what}: unreachable after catch-all route {at}"));
        } else if r.matcher.is_catch_all() {
            catch_all_at = Some(i);
        }
    }

    for (space, cluster) in &cfg.address_spaces {
        if !names.contains(cluster.as_str()) {
            f.error(format!("address space {space}: unknown cluster {cluster}"));
        }
    }

    let mut seen_policies = HashSet::new();
    for p in &cfg.policies {
        if !seen_policies.insert(p.id.as_str()) {
            f.error(format!("duplicate policy {}", p.id));
        }
        for grant in p.tokens.values() {
            f.header_names(&format!("policy {}", p.id), grant.append.names());
        }
    }

    for s in &cfg.split_tunnel {
        if !s.prefix.is_canonical() {
            f.error(format!("split route {}: host bits set", s.prefix));
        }
        if s.port == 0 {
            f.error(format!("split route {}: port 0 out of range", s.prefix));
        }
    }

    let ok = !f.0.iter().any(|x| x.severity == Severity::Error);
    ValidationReport { ok, findings: f.0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> NodeConfig {
        serde_json::from_str(
            r#"{
              "node_id": "p1",
              "version": 1,
              "listeners": [{"bind": {"host": "127.0.0.1", "port": 9000, "transport": "tcp"},
                             "mode": "http", "port_tag": "main"}],
              "routes": [{"match": {}, "action": "up"}],
              "clusters": [{"name": "up", "lb": "round_robin", "tunnel_kind": "plain_tcp",
                            "endpoints": [{"host": "127.0.0.1", "port": 9100, "transport": "tcp"}]}],
              "address_spaces": {},
              "drain_time_ms": 5000
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_config_is_valid() {
        let report = validate_config(&minimal());
        assert!(report.ok);
        assert!(report.findings.is_empty(), "{report}");
    }

    #[test]
    fn unknown_cluster_is_reported() {
        let mut cfg = minimal();
        cfg.routes[0].action = "X".into();
        let report = validate_config(&cfg);
        assert!(!report.ok);
        assert!(report.errors().any(|m| m.contains("unknown cluster X")));
    }

    #[test]
    fn empty_cluster_is_reported() {
        let mut cfg = minimal();
        cfg.clusters[0].endpoints.clear();
        let report = validate_config(&cfg);
        assert!(!report.ok);
        assert!(report.errors().any(|m| m.contains("cluster has no endpoints")));
    }

    #[test]
    fn all_violations_are_listed() {
        let mut cfg = minimal();
        cfg.node_id.clear();
        cfg.version = 0;
        cfg.routes[0].action = "X".into();
        cfg.address_spaces.insert("VIDEO".into(), "nope".into());
        cfg.listeners[0].mode = ListenerMode::UdpIngest;
        cfg.listeners[0].port_tag.clear();
        let report = validate_config(&cfg);
        assert!(report.errors().count() >= 6, "{report}");
    }

    #[test]
    fn defer_must_not_overlap_match() {
        let mut cfg = minimal();
        cfg.routes[0].matcher.headers.insert("service", "NDN");
        cfg.routes[0].defer.insert("service".into());
        let report = validate_config(&cfg);
        assert!(report.errors().any(|m| m.contains("matched and deferred")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal().to_json_pretty().replace("\"node_id\"", "\"bogus\": 1, \"node_id\"");
        assert!(NodeConfig::from_json(&text).is_err());
    }

    #[test]
    fn header_names_are_lowercased_on_load() {
        let mut v: serde_json::Value = serde_json::from_str(&minimal().to_json_pretty()).unwrap();
        v["listeners"][0]["implicit_headers"] = serde_json::json!({"User": "u1"});
        let text = v.to_string();
        let cfg = NodeConfig::from_json(&text).unwrap();
        assert_eq!(cfg.listeners[0].implicit_headers.get("user"), Some("u1"));
        assert!(validate_config(&cfg).ok);
    }

    #[test]
    fn validation_is_deterministic() {
        let mut cfg = minimal();
        cfg.routes[0].action = "X".into();
        cfg.clusters[0].endpoints.clear();
        assert_eq!(validate_config(&cfg), validate_config(&cfg.clone()));
    }

    #[test]
    fn json_round_trip() {
        let cfg = minimal();
        let back = NodeConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }
}
