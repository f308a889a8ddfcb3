use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{HeaderMap, RouteRule};

/// What a node knows about one piece of traffic when routing it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingInput {
    pub port_tag: String,
    pub headers: HeaderMap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteDecision {
    pub cluster: String,
    pub appended: HeaderMap,
    pub deferred: BTreeSet<String>,
    pub policy_gate: Option<String>,
    pub rule_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no route")]
pub struct NoRoute;

/// Strips an optional `:port` from a host header value.
pub fn host_name(host: &str) -> &str {
    if let Some(rest) = host.strip_prefix('[') {
        return rest.split(']').next().unwrap_or(rest);
    }
    match host.rsplit_once(':') {
        Some((name, port)) if port.bytes().all(|b| b.is_ascii_digit()) => name,
        _ => host,
    }
}

fn rule_matches(rule: &RouteRule, input: &RoutingInput) -> bool {
    if let Some(tag) = &rule.matcher.port_tag {
        if *tag != input.port_tag {
            return false;
        }
    }
    rule.matcher.headers.iter().all(|(k, v)| input.headers.get(k) == Some(v))
}

/// First matching rule wins. A symbolic `host` found in `address_spaces`
/// overrides the rule's action with the mapped cluster.
pub fn route(
    input: &RoutingInput,
    routes: &[RouteRule],
    address_spaces: &BTreeMap<String, String>,
) -> Result<RouteDecision, NoRoute> {
    let (rule_index, rule) = routes.iter().enumerate().find(|(_, r)| rule_matches(r, input)).ok_or(NoRoute)?;
    let symbolic = input.headers.get("host").and_then(|h| address_spaces.get(host_name(h)));
    Ok(RouteDecision {
        cluster: symbolic.unwrap_or(&rule.action).clone(),
        appended: rule.append.clone(),
        deferred: rule.defer.clone(),
        policy_gate: rule.policy_gate.clone(),
        rule_index,
    })
}

/// Headers sent to the next hop: everything received, with the rule's
/// appended values replacing incoming ones.
pub fn outgoing_headers(input: &HeaderMap, decision: &RouteDecision) -> HeaderMap {
    let mut out = input.clone();
    out.merge_from(&decision.appended);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RouteMatch;

    fn rule(headers: &[(&str, &str)], action: &str) -> RouteRule {
        RouteRule {
            matcher: RouteMatch { headers: headers.iter().copied().collect(), port_tag: None },
            action: action.into(),
            append: HeaderMap::new(),
            defer: BTreeSet::new(),
            policy_gate: None,
        }
    }

    fn input(tag: &str, headers: &[(&str, &str)]) -> RoutingInput {
        RoutingInput { port_tag: tag.into(), headers: headers.iter().copied().collect() }
    }

    #[test]
    fn service_header_routes_and_defers_namespace() {
        let mut r = rule(&[("service", "NDN")], "domain2");
        r.defer.insert("namespace".into());
        let d = route(&input("dev", &[("service", "NDN"), ("namespace", "DEV")]), &[r], &BTreeMap::new()).unwrap();
        assert_eq!(d.cluster, "domain2");
        assert_eq!(d.deferred, BTreeSet::from(["namespace".to_string()]));
        assert!(d.appended.is_empty());
    }

    #[test]
    fn symbolic_host_maps_through_address_space() {
        let mut r = rule(&[], "default");
        r.append.insert("user", "user1");
        let spaces = BTreeMap::from([("VIDEO".to_string(), "video-distributors".to_string())]);
        let d = route(&input("http", &[("host", "VIDEO")]), &[r.clone()], &spaces).unwrap();
        assert_eq!(d.cluster, "video-distributors");
        assert_eq!(d.appended.get("user"), Some("user1"));
        let d = route(&input("http", &[("host", "VIDEO:80")]), &[r.clone()], &spaces).unwrap();
        assert_eq!(d.cluster, "video-distributors");
        let d = route(&input("http", &[("host", "10.1.1.1:80")]), &[r], &spaces).unwrap();
        assert_eq!(d.cluster, "default");
    }

    #[test]
    fn user_and_network_headers_pick_the_org_cluster() {
        let routes = vec![
            rule(&[("user", "user1")], "org-us-user1"),
            rule(&[("user", "user2"), ("ipaddress", "128.252.0.0")], "org-us-user2"),
            rule(&[("user", "user2")], "personal-user2"),
        ];
        let d = route(&input("p3", &[("user", "user2"), ("ipaddress", "128.252.0.0")]), &routes, &BTreeMap::new())
            .unwrap();
        assert_eq!((d.cluster.as_str(), d.rule_index), ("org-us-user2", 1));
    }

    #[test]
    fn first_match_wins_and_port_tag_filters() {
        let mut tagged = rule(&[], "a");
        tagged.matcher.port_tag = Some("p1".into());
        let routes = vec![tagged, rule(&[], "b")];
        assert_eq!(route(&input("p1", &[]), &routes, &BTreeMap::new()).unwrap().cluster, "a");
        assert_eq!(route(&input("p2", &[]), &routes, &BTreeMap::new()).unwrap().cluster, "b");
    }

    #[test]
    fn no_match_is_no_route() {
        let routes = vec![rule(&[("service", "NDN")], "x")];
        assert_eq!(route(&input("p", &[("service", "IP")]), &routes, &BTreeMap::new()), Err(NoRoute));
        assert_eq!(route(&input("p", &[]), &[], &BTreeMap::new()), Err(NoRoute));
    }

    #[test]
    fn appended_values_replace_incoming() {
        let mut r = rule(&[], "c");
        r.append.insert("user", "user1");
        let inp = input("p", &[("user", "mallory"), ("namespace", "DEV")]);
        let d = route(&inp, &[r], &BTreeMap::new()).unwrap();
        let out = outgoing_headers(&inp.headers, &d);
        assert_eq!(out.get("user"), Some("user1"));
        assert_eq!(out.get("namespace"), Some("DEV"));
    }

    #[test]
    fn host_name_strips_port() {
        assert_eq!(host_name("VIDEO"), "VIDEO");
        assert_eq!(host_name("s3:9000"), "s3");
        assert_eq!(host_name("[::1]:80"), "::1");
    }
}
