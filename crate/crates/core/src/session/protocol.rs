//! Line-delimited JSON messages exchanged with session clients.

use serde::{Deserialize, Serialize};

use crate::episode::{Decision, Episode};
use crate::scenario::Phase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMsg {
    Start {
        driver_id: String,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        session_id: Option<String>,
    },
    Control {
        throttle: f64,
        brake: f64,
    },
    Decision {
        choice: Decision,
    },
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMsg {
    State {
        t: f64,
        pos_m: f64,
        speed_mps: f64,
        phase: Phase,
        yellow_remaining_s: f64,
        decided: bool,
    },
    Ack {
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Summary(Summary),
    Error {
        code: String,
        message: String,
    },
}

/// Episode header sent when a session ends. `decision` is absent for
/// aborted or undecided sessions, which are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub session_id: String,
    pub driver_id: String,
    pub seed: u64,
    pub stored: bool,
    pub decision: Option<Decision>,
    pub decision_t_s: Option<f64>,
    pub ran_red: Option<bool>,
    pub crossed_line_t_s: Option<f64>,
    pub ticks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Summary {
    pub fn stored(session_id: &str, episode: &Episode) -> Self {
        Self {
            session_id: session_id.to_string(),
            driver_id: episode.driver_id.clone(),
            seed: episode.scenario.seed,
            stored: true,
            decision: Some(episode.decision),
            decision_t_s: Some(episode.decision_t_s),
            ran_red: Some(episode.ran_red),
            crossed_line_t_s: episode.crossed_line_t_s,
            ticks: episode.samples.len(),
            reason: None,
        }
    }
}

impl ServerMsg {
    pub fn ack() -> Self {
        ServerMsg::Ack {
            accepted: true,
            reason: None,
        }
    }

    pub fn reject(reason: impl Into<String>) -> Self {
        ServerMsg::Ack {
            accepted: false,
            reason: Some(reason.into()),
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("server messages always serialize");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_parse() {
        let m: ClientMsg = serde_json::from_str(r#"{"type":"control","throttle":0.5,"brake":0}"#).unwrap();
        assert_eq!(m, ClientMsg::Control { throttle: 0.5, brake: 0.0 });
        let m: ClientMsg = serde_json::from_str(r#"{"type":"decision","choice":"go"}"#).unwrap();
        assert_eq!(m, ClientMsg::Decision { choice: Decision::Go });
        let m: ClientMsg = serde_json::from_str(r#"{"type":"start","driver_id":"p1","seed":4}"#).unwrap();
        assert_eq!(
            m,
            ClientMsg::Start {
                driver_id: "p1".into(),
                seed: Some(4),
                session_id: None
            }
        );
        let m: ClientMsg = serde_json::from_str(r#"{"type":"abort"}"#).unwrap();
        assert_eq!(m, ClientMsg::Abort);
        assert!(serde_json::from_str::<ClientMsg>(r#"{"type":"warp"}"#).is_err());
    }

    #[test]
    fn state_message_layout() {
        let m = ServerMsg::State {
            t: 0.02,
            pos_m: 100.0,
            speed_mps: 20.0,
            phase: Phase::Yellow,
            yellow_remaining_s: 3.0,
            decided: false,
        };
        let v: serde_json::Value = serde_json::from_str(&m.to_line()).unwrap();
        assert_eq!(v["type"], "state");
        assert_eq!(v["phase"], "yellow");
        assert_eq!(v["pos_m"], 100.0);
        assert_eq!(v["decided"], false);
        let r = ServerMsg::reject("decision already recorded").to_line();
        assert_eq!(r, "{\"type\":\"ack\",\"accepted\":false,\"reason\":\"decision already recorded\"}\n");
    }
}
