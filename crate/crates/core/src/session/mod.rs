//! Human-in-the-loop episode collection.
//!
//! A [`Session`] wraps the same [`Drive`] core that persona rollouts use, so
//! a human episode and a scripted one with equal inputs are identical tick
//! for tick. Controls are sampled at tick boundaries: the last control
//! received before a tick is the one applied.

pub mod client;
mod protocol;
mod server;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use protocol::{ClientMsg, ServerMsg, Summary};
pub use server::{serve, ServerConfig, ServerHandle};

use crate::dataset::{append_jsonl, read_jsonl};
use crate::episode::{Decision, Drive, Episode};
use crate::error::{Error, Result};
use crate::kinematics::VehicleState;
use crate::scenario::{generate_scenario, Phase, Scenario, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub throttle: f64,
    pub brake: f64,
}

impl Control {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("throttle", self.throttle), ("brake", self.brake)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Rejected(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

pub struct Session {
    session_id: String,
    driver_id: String,
    drive: Drive,
    control: Control,
    status: Status,
}

impl Session {
    pub fn start(session_id: &str, driver_id: &str, seed: u64, cfg: &ScenarioConfig) -> Result<Self> {
        validate_driver_id(driver_id)?;
        let scenario = generate_scenario(seed, cfg)?;
        Ok(Self::with_scenario(session_id, driver_id, scenario))
    }

    pub fn with_scenario(session_id: &str, driver_id: &str, scenario: Scenario) -> Self {
        Self {
            session_id: session_id.to_string(),
            driver_id: driver_id.to_string(),
            drive: Drive::new(scenario),
            control: Control::default(),
            status: Status::Running,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn driver_id(&self) -> &str {
        &self.driver_id
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn current(&self) -> &VehicleState {
        self.drive.state()
    }

    pub fn phase(&self) -> Phase {
        self.drive.phase()
    }

    pub fn scenario(&self) -> &Scenario {
        self.drive.scenario()
    }

    pub fn decision(&self) -> Option<(Decision, f64)> {
        self.drive.decision()
    }

    pub fn samples(&self) -> &[crate::episode::TickSample] {
        self.drive.samples()
    }

    /// Acceleration command for the current control.
    pub fn accel_cmd(&self) -> f64 {
        let l = &self.drive.scenario().limits;
        self.control.throttle * l.a_max - self.control.brake * l.b_max
    }

    pub fn state_msg(&self) -> ServerMsg {
        let s = self.drive.state();
        ServerMsg::State {
            t: self.drive.t(),
            pos_m: s.position_m,
            speed_mps: s.speed_mps,
            phase: self.drive.phase(),
            yellow_remaining_s: self.drive.yellow_remaining(),
            decided: self.drive.decision().is_some(),
        }
    }

    pub fn set_control(&mut self, control: Control) -> Result<()> {
        self.ensure_running()?;
        control.validate()?;
        self.control = control;
        Ok(())
    }

    /// Latches the first decision at the current tick time.
    pub fn decide(&mut self, choice: Decision) -> Result<()> {
        self.ensure_running()?;
        if self.drive.decision().is_some() {
            return Err(Error::Rejected("decision already recorded".into()));
        }
        if self.drive.phase() == Phase::Green {
            return Err(Error::Rejected("no decision is possible before the yellow onset".into()));
        }
        let t = self.drive.t();
        self.drive.latch(choice, t)
    }

    /// Advances one tick with the latest control.
    pub fn tick(&mut self) -> Result<()> {
        self.ensure_running()?;
        let a = self.accel_cmd();
        self.drive.advance(a)?;
        if self.drive.is_done() {
            self.status = Status::Finished;
        }
        Ok(())
    }

    /// Assembles the episode; sessions without a decision are an error.
    pub fn finish(self) -> Result<Episode> {
        if self.status != Status::Finished {
            return Err(Error::Rejected("session is still running".into()));
        }
        self.drive.into_episode(self.driver_id)
    }

    fn ensure_running(&self) -> Result<()> {
        match self.status {
            Status::Running => Ok(()),
            Status::Finished => Err(Error::Rejected("session has finished".into())),
        }
    }
}

/// Offline equivalent of a scripted session: controls applied one per
/// tick, the decision latched before tick `decide_at.0` at that tick's time.
pub fn replay(
    scenario: Scenario,
    driver_id: &str,
    controls: &[Control],
    decide_at: (u64, Decision),
) -> Result<Episode> {
    let mut drive = Drive::new(scenario);
    let limits = drive.scenario().limits;
    for c in controls {
        if drive.tick() == decide_at.0 {
            drive.latch(decide_at.1, drive.t())?;
        }
        if drive.is_done() {
            break;
        }
        drive.advance(c.throttle * limits.a_max - c.brake * limits.b_max)?;
    }
    drive.into_episode(driver_id)
}

pub fn validate_driver_id(driver_id: &str) -> Result<()> {
    let ok = !driver_id.is_empty()
        && driver_id.len() <= 64
        && driver_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "driver_id {driver_id:?} must be 1-64 characters of [A-Za-z0-9_-]"
        )))
    }
}

/// Per-driver JSONL files of finished episodes.
#[derive(Clone)]
pub struct EpisodeStore {
    dir: PathBuf,
    write_lock: Arc<Mutex<()>>,
}

impl EpisodeStore {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            write_lock: Arc::new(Mutex::new(())),
        })
    }

    pub fn path_for(&self, driver_id: &str) -> PathBuf {
        self.dir.join(format!("{driver_id}.jsonl"))
    }

    pub fn append(&self, episode: &Episode) -> Result<()> {
        validate_driver_id(&episode.driver_id)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        append_jsonl(&self.path_for(&episode.driver_id), std::slice::from_ref(episode))
    }

    pub fn load(&self, driver_id: &str) -> Result<Vec<Episode>> {
        let p = self.path_for(driver_id);
        if !p.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&p)
    }
}

/// Session ids currently running across all connections.
#[derive(Clone, Default)]
pub struct Registry(Arc<Mutex<HashSet<String>>>);

impl Registry {
    pub fn claim(&self, session_id: &str) -> Result<()> {
        let mut set = self.0.lock().unwrap_or_else(|e| e.into_inner());
        if !set.insert(session_id.to_string()) {
            return Err(Error::Conflict(format!("session {session_id} is already running")));
        }
        Ok(())
    }

    pub fn release(&self, session_id: &str) {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).remove(session_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig {
            speed_range_mps: [20.0, 20.0],
            green_range_s: [1.0, 1.0],
            ..Default::default()
        }
    }

    fn set(s: &mut Session, throttle: f64, brake: f64) {
        s.set_control(Control { throttle, brake }).unwrap();
    }

    #[test]
    fn control_mapping() {
        let mut s = Session::start("a", "p1", 1, &cfg()).unwrap();
        set(&mut s, 1.0, 0.0);
        assert_eq!(s.accel_cmd(), 3.0);
        set(&mut s, 0.5, 0.5);
        assert_eq!(s.accel_cmd(), 0.0);
        set(&mut s, 0.0, 1.0);
        assert_eq!(s.accel_cmd(), -3.0);
        assert!(s.set_control(Control { throttle: 1.5, brake: 0.0 }).is_err());
        assert!(s.set_control(Control { throttle: f64::NAN, brake: 0.0 }).is_err());
    }

    #[test]
    fn first_state_is_deterministic() {
        let a = Session::start("a", "p1", 9, &ScenarioConfig::default()).unwrap();
        let b = Session::start("b", "p1", 9, &ScenarioConfig::default()).unwrap();
        assert_eq!(a.state_msg(), b.state_msg());
    }

    #[test]
    fn invalid_driver_rejected() {
        assert!(matches!(
            Session::start("a", "../etc", 1, &cfg()),
            Err(Error::Config(_))
        ));
        assert!(Session::start("a", "", 1, &cfg()).is_err());
    }

    #[test]
    fn latch_rules() {
        let mut s = Session::start("a", "p1", 1, &cfg()).unwrap();
        assert!(matches!(s.decide(Decision::Go), Err(Error::Rejected(_))));
        while s.phase() == Phase::Green {
            s.tick().unwrap();
        }
        s.decide(Decision::Stop).unwrap();
        match s.decide(Decision::Go) {
            Err(Error::Rejected(r)) => assert_eq!(r, "decision already recorded"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.decision().unwrap().0, Decision::Stop);
    }

    #[test]
    fn scripted_constant_throttle_matches_step() {
        let mut s = Session::start("a", "p1", 3, &cfg()).unwrap();
        set(&mut s, 0.4, 0.0);
        let limits = s.scenario().limits;
        let dt = s.scenario().dt_s;
        let mut expect = *s.current();
        for k in 1..=200u64 {
            s.tick().unwrap();
            expect = kinematics::step(&expect, 0.4 * 3.0, dt, &limits).unwrap();
            let got = s.current();
            assert_eq!(got.position_m, expect.position_m, "tick {k}");
            assert_eq!(got.speed_mps, expect.speed_mps);
            expect.t_s = got.t_s;
            if s.status() == Status::Finished {
                break;
            }
        }
    }

    fn drive_to_end(s: &mut Session) {
        while s.status() == Status::Running {
            s.tick().unwrap();
        }
    }

    #[test]
    fn stop_before_line_is_not_red_run() {
        let mut s = Session::start("a", "p1", 1, &cfg()).unwrap();
        while s.phase() == Phase::Green {
            s.tick().unwrap();
        }
        s.decide(Decision::Stop).unwrap();
        // 20 m/s at onset is 130 m out; 1.0 brake stops in about 67 m.
        set(&mut s, 0.0, 1.0);
        drive_to_end(&mut s);
        assert!(s.set_control(Control::default()).is_err());
        let ep = s.finish().unwrap();
        assert!(!ep.ran_red);
        assert!(ep.samples.last().unwrap().position_m > 0.0);
    }

    #[test]
    fn late_crossing_runs_red() {
        let mut s = Session::start("a", "p1", 1, &cfg()).unwrap();
        while s.phase() == Phase::Green {
            s.tick().unwrap();
        }
        s.decide(Decision::Go).unwrap();
        set(&mut s, 0.0, 0.0);
        drive_to_end(&mut s);
        let ep = s.finish().unwrap();
        let red = ep.scenario.timing.red_onset();
        assert!(ep.crossed_line_t_s.unwrap() >= red);
        assert!(ep.ran_red);
    }

    #[test]
    fn undecided_session_cannot_finish() {
        let mut s = Session::start("a", "p1", 1, &cfg()).unwrap();
        set(&mut s, 0.0, 1.0);
        drive_to_end(&mut s);
        assert!(s.finish().is_err());
    }

    #[test]
    fn replay_matches_session() {
        let mut s = Session::start("a", "p1", 4, &cfg()).unwrap();
        let scenario = s.scenario().clone();
        let mut controls = Vec::new();
        let mut k = 0u64;
        let mut decided_at = None;
        while s.status() == Status::Running {
            if decided_at.is_none() && s.phase() == Phase::Yellow && k % 7 == 0 {
                s.decide(Decision::Stop).unwrap();
                decided_at = Some(k);
            }
            let c = if decided_at.is_some() {
                Control { throttle: 0.0, brake: 0.8 }
            } else {
                Control { throttle: 0.1, brake: 0.0 }
            };
            s.set_control(c).unwrap();
            controls.push(c);
            s.tick().unwrap();
            k += 1;
        }
        let live = s.finish().unwrap();
        let offline = replay(scenario, "p1", &controls, (decided_at.unwrap(), Decision::Stop)).unwrap();
        assert_eq!(live, offline);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = EpisodeStore::open(dir.path()).unwrap();
        assert!(store.load("p1").unwrap().is_empty());
        let mut s = Session::start("a", "p1", 1, &cfg()).unwrap();
        while s.phase() == Phase::Green {
            s.tick().unwrap();
        }
        s.decide(Decision::Go).unwrap();
        drive_to_end(&mut s);
        let ep = s.finish().unwrap();
        store.append(&ep).unwrap();
        store.append(&ep).unwrap();
        assert_eq!(store.load("p1").unwrap(), vec![ep.clone(), ep]);
    }

    #[test]
    fn registry_conflicts() {
        let r = Registry::default();
        r.claim("x").unwrap();
        assert!(matches!(r.claim("x"), Err(Error::Conflict(_))));
        r.release("x");
        r.claim("x").unwrap();
    }
}
