//! In-process overlay: a controller with a config directory and one proxy
//! per node, each fed by its own agent.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use tempfile::TempDir;
use tokio::net::TcpListener;

use crate::control::{run_agent, start_controller, ControllerHandle, ControllerOptions, Secrets};
use crate::model::NodeConfig;
use crate::proxy::Proxy;

const BOOT_TIMEOUT: Duration = Duration::from_secs(15);

fn passphrase(node_id: &str) -> String {
    format!("pw-{node_id}")
}

pub struct Overlay {
    store: TempDir,
    pub controller: ControllerHandle,
    proxies: BTreeMap<String, Proxy>,
}

impl Overlay {
    /// Writes `configs` to a fresh store, starts the controller and one
    /// proxy per config, and waits until every proxy runs its config.
    pub async fn boot(configs: &[NodeConfig], poll_interval: Duration) -> io::Result<Overlay> {
        let store = tempfile::tempdir()?;
        for cfg in configs {
            write_config(store.path(), cfg)?;
        }
        let secrets: Secrets = configs.iter().map(|c| (c.node_id.clone(), passphrase(&c.node_id))).collect();
        let controller = start_controller(ControllerOptions {
            store_dir: store.path().to_path_buf(),
            listen: "127.0.0.1:0".parse().unwrap(),
            secrets,
            poll_interval,
            admin: None,
        })
        .await?;
        let mut proxies = BTreeMap::new();
        for cfg in configs {
            let proxy = Proxy::new(cfg.node_id.clone());
            tokio::spawn(run_agent(proxy.clone(), controller.addr.to_string(), passphrase(&cfg.node_id)));
            proxies.insert(cfg.node_id.clone(), proxy);
        }
        let overlay = Overlay { store, controller, proxies };
        for cfg in configs {
            if overlay.wait_version(&cfg.node_id, cfg.version, BOOT_TIMEOUT).await.is_none() {
                return Err(io::Error::other(format!("node {} did not reach version {}", cfg.node_id, cfg.version)));
            }
        }
        Ok(overlay)
    }

    pub fn proxy(&self, node_id: &str) -> &Proxy {
        &self.proxies[node_id]
    }

    /// Publishes a config to the store; the controller picks it up on its
    /// next poll.
    pub fn publish(&self, cfg: &NodeConfig) -> io::Result<()> {
        write_config(self.store.path(), cfg)
    }

    /// Time until `node_id` runs `version`, or `None` after `within`.
    pub async fn wait_version(&self, node_id: &str, version: u64, within: Duration) -> Option<Duration> {
        let proxy = self.proxies.get(node_id)?;
        let start = Instant::now();
        while proxy.config_version() < version {
            if start.elapsed() > within {
                return None;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        Some(start.elapsed())
    }

    pub fn versions(&self) -> BTreeMap<String, u64> {
        self.proxies.iter().map(|(id, p)| (id.clone(), p.config_version())).collect()
    }

    /// Starts the admin endpoint of one proxy on an ephemeral port.
    pub async fn serve_admin(&self, node_id: &str) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let proxy = self.proxy(node_id).clone();
        tokio::spawn(async move { proxy.serve_admin(listener).await });
        Ok(addr)
    }
}

impl Drop for Overlay {
    fn drop(&mut self) {
        for p in self.proxies.values() {
            p.shutdown();
        }
    }
}

/// Writes through a temporary name so the store never sees half a file.
pub fn write_config(dir: &std::path::Path, cfg: &NodeConfig) -> io::Result<()> {
    let tmp = dir.join(format!(".{}.tmp", cfg.node_id));
    std::fs::write(&tmp, cfg.to_json_pretty())?;
    std::fs::rename(tmp, dir.join(format!("{}.json", cfg.node_id)))
}
