use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use tracing::warn;

use crate::model::{validate_config, NodeConfig};

/// Directory of `<node_id>.json` files. A file is re-read when its mtime or
/// length changes; it replaces the stored config only if it parses,
/// validates, names the right node and carries a strictly higher version.
#[derive(Debug)]
pub struct ConfigStore {
    dir: PathBuf,
    entries: HashMap<String, Arc<NodeConfig>>,
    seen: HashMap<String, (SystemTime, u64)>,
}

impl ConfigStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let mut store = Self { dir: dir.into(), entries: HashMap::new(), seen: HashMap::new() };
        store.reload()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, node_id: &str) -> Option<Arc<NodeConfig>> {
        self.entries.get(node_id).cloned()
    }

    pub fn version(&self, node_id: &str) -> Option<u64> {
        self.entries.get(node_id).map(|c| c.version)
    }

    /// Rescans the directory; returns the node ids whose config advanced.
    pub fn reload(&mut self) -> std::io::Result<Vec<String>> {
        let mut advanced = Vec::new();
        for item in std::fs::read_dir(&self.dir)? {
            let path = item?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(node_id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else { continue };
            if self.reload_file(&node_id, &path) {
                advanced.push(node_id);
            }
        }
        advanced.sort();
        Ok(advanced)
    }

    /// Rereads one node's file regardless of the directory scan.
    pub fn reload_node(&mut self, node_id: &str) -> bool {
        let path = self.dir.join(format!("{node_id}.json"));
        self.reload_file(node_id, &path)
    }

    fn reload_file(&mut self, node_id: &str, path: &Path) -> bool {
        let Ok(meta) = std::fs::metadata(path) else { return false };
        let stamp = (meta.modified().unwrap_or(SystemTime::UNIX_EPOCH), meta.len());
        if self.seen.get(node_id) == Some(&stamp) {
            return false;
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                warn!(?path, "unreadable config: {e}");
                return false;
            }
        };
        self.seen.insert(node_id.to_string(), stamp);
        let cfg = match NodeConfig::from_json(&text) {
            Ok(c) => c,
            Err(e) => {
                warn!(?path, "unparsable config: {e}");
                return false;
            }
        };
        if cfg.node_id != node_id {
            warn!(?path, "file holds config for node {:?}", cfg.node_id);
            return false;
        }
        let report = validate_config(&cfg);
        if !report.ok {
            warn!(?path, "invalid config:\n{report}");
            return false;
        }
        if self.version(node_id).is_some_and(|v| cfg.version <= v) {
            return false;
        }
        self.entries.insert(node_id.to_string(), Arc::new(cfg));
        true
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::builders::{cluster, listener, rule, NodeBuilder};
    use crate::model::{ListenerMode, TunnelKind};

    fn cfg(node: &str, version: u64) -> NodeConfig {
        let a = "127.0.0.1:9".parse().unwrap();
        NodeBuilder::new(node, version)
            .listener(listener("127.0.0.1:8080".parse().unwrap(), ListenerMode::Http, "http"))
            .route(rule(&[], "a"))
            .cluster(cluster("a", TunnelKind::PlainTcp, &[a]))
            .build()
    }

    fn write(dir: &Path, node: &str, text: &str) {
        // vary the length so the change is seen even with coarse mtimes
        let pad = " ".repeat(text.len() % 7 + 1);
        std::fs::write(dir.join(format!("{node}.json")), format!("{text}{pad}")).unwrap();
    }

    #[test]
    fn picks_up_only_higher_valid_versions() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "p1", &cfg("p1", 2).to_json_pretty());
        let mut store = ConfigStore::open(dir.path()).unwrap();
        assert_eq!(store.version("p1"), Some(2));

        write(dir.path(), "p1", &cfg("p1", 1).to_json_pretty());
        assert!(store.reload().unwrap().is_empty());
        assert_eq!(store.version("p1"), Some(2));

        write(dir.path(), "p1", "{ not json");
        assert!(store.reload().unwrap().is_empty());

        let mut bad = cfg("p1", 5);
        bad.routes[0].action = "nowhere".into();
        write(dir.path(), "p1", &bad.to_json_pretty());
        assert!(store.reload().unwrap().is_empty());

        write(dir.path(), "p1", &cfg("p1", 3).to_json_pretty());
        assert_eq!(store.reload().unwrap(), ["p1"]);
        assert_eq!(store.version("p1"), Some(3));
    }

    #[test]
    fn file_name_must_match_node() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "p1", &cfg("p2", 1).to_json_pretty());
        let store = ConfigStore::open(dir.path()).unwrap();
        assert_eq!(store.get("p1"), None);
        assert_eq!(store.get("p2"), None);
    }
}
