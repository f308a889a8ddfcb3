//! Token table consulted by routes that carry a `policy_gate`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::model::{HeaderMap, PolicyRule, PolicyVerdict};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub allow: bool,
    pub append: HeaderMap,
}

impl Decision {
    fn deny() -> Self {
        Self { allow: false, append: HeaderMap::new() }
    }
}

/// Policy rules of one config epoch.
#[derive(Debug, Default)]
pub struct PolicyTable {
    rules: HashMap<String, PolicyRule>,
    missing_rule: AtomicU64,
}

impl PolicyTable {
    pub fn new(rules: &[PolicyRule]) -> Self {
        Self {
            rules: rules.iter().map(|r| (r.id.clone(), r.clone())).collect(),
            missing_rule: AtomicU64::new(0),
        }
    }

    /// Fails closed: unknown rules and unknown tokens deny with no headers.
    pub fn evaluate(&self, rule_id: &str, token: Option<&str>, _headers: &HeaderMap) -> Decision {
        let Some(rule) = self.rules.get(rule_id) else {
            self.missing_rule.fetch_add(1, Ordering::Relaxed);
            return Decision::deny();
        };
        let Some(grant) = token.and_then(|t| rule.tokens.get(t)) else {
            return Decision::deny();
        };
        match grant.decision {
            PolicyVerdict::Allow => Decision { allow: true, append: grant.append.clone() },
            PolicyVerdict::Deny => Decision::deny(),
        }
    }

    pub fn missing_rule_count(&self) -> u64 {
        self.missing_rule.load(Ordering::Relaxed)
    }
}

/// Extracts the bearer token from request headers (`authorization`, with an
/// optional `Bearer ` prefix).
pub fn request_token(headers: &HeaderMap) -> Option<&str> {
    headers
        .get("authorization")
        .map(|v| v.strip_prefix("Bearer ").unwrap_or(v).trim())
}
