use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NodeConfig;

/// One message of the controller <-> proxy protocol. Encoded as a single JSON
/// object per `\n`-terminated line, discriminated by `kind`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMsg {
    Hello { node_id: String, passphrase: String },
    ConfigPush { node_id: String, version: u64, body: Box<NodeConfig> },
    Ack { node_id: String, version: u64 },
    RequestUpdate { node_id: String },
    Reject { node_id: String, reason: String },
}

impl ControlMsg {
    pub fn node_id(&self) -> &str {
        match self {
            ControlMsg::Hello { node_id, .. }
            | ControlMsg::ConfigPush { node_id, .. }
            | ControlMsg::Ack { node_id, .. }
            | ControlMsg::RequestUpdate { node_id }
            | ControlMsg::Reject { node_id, .. } => node_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("malformed control message: {0}")]
    Malformed(String),
}

/// Encodes `msg` as one line, including the trailing newline.
pub fn encode_control(msg: &ControlMsg) -> String {
    let mut line = serde_json::to_string(msg).expect("control messages serialize");
    line.push('\n');
    line
}

pub fn decode_control(line: &str) -> Result<ControlMsg, ControlError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ControlError::Malformed(e.to_string()))?;
    let Some(obj) = value.as_object() else {
        return Err(ControlError::Malformed("not an object".into()));
    };
    if !obj.contains_key("kind") {
        return Err(ControlError::Malformed("missing kind".into()));
    }
    serde_json::from_value(value).map_err(|e| ControlError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_round_trips_on_one_line() {
        let msg = ControlMsg::Hello { node_id: "p2".into(), passphrase: "s".into() };
        let line = encode_control(&msg);
        assert!(line.ends_with('\n'));
        assert_eq!(line.matches('\n').count(), 1);
        assert!(line.contains("p2") && line.contains("\"passphrase\":\"s\""));
        assert_eq!(decode_control(&line).unwrap(), msg);
    }

    #[test]
    fn config_push_round_trips() {
        let mut cfg = NodeConfig::empty("p2");
        cfg.version = 7;
        let msg = ControlMsg::ConfigPush { node_id: "p2".into(), version: 7, body: Box::new(cfg) };
        assert_eq!(decode_control(&encode_control(&msg)).unwrap(), msg);
    }

    #[test]
    fn missing_kind_is_malformed() {
        assert_eq!(decode_control("{}"), Err(ControlError::Malformed("missing kind".into())));
    }

    #[test]
    fn missing_field_names_the_field() {
        let err = decode_control(r#"{"kind":"ack","node_id":"p"}"#).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
