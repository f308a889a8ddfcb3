use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Node id to passphrase, loaded from a JSON object file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Secrets(BTreeMap<String, String>);

#[derive(Debug, Error)]
pub enum SecretsError {
    #[error("reading secrets: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing secrets: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Secrets {
    pub fn load(path: &Path) -> Result<Self, SecretsError> {
        Ok(Self(serde_json::from_str(&std::fs::read_to_string(path)?)?))
    }

    pub fn insert(&mut self, node_id: impl Into<String>, passphrase: impl Into<String>) {
        self.0.insert(node_id.into(), passphrase.into());
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for Secrets {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Reject {
    #[error("unknown node")]
    UnknownNode,
    #[error("bad credentials")]
    BadCredentials,
}

/// Compares digests so the time taken does not depend on where, or whether,
/// the passphrases differ.
fn same_secret(a: &str, b: &str) -> bool {
    let (da, db) = (Sha256::digest(a.as_bytes()), Sha256::digest(b.as_bytes()));
    da.iter().zip(db.iter()).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn authenticate(node_id: &str, passphrase: &str, secrets: &Secrets) -> Result<(), Reject> {
    let expected = secrets.0.get(node_id).ok_or(Reject::UnknownNode)?;
    if same_secret(expected, passphrase) {
        Ok(())
    } else {
        Err(Reject::BadCredentials)
    }
}
