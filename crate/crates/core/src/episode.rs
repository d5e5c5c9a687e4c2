//! Episode records and the fixed-tick approach simulator shared by synthetic
//! rollouts and live sessions.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::kinematics::{self, VehicleState};
use crate::scenario::{phase_at, Phase, Scenario};

/// Positions below `-LINE_TOL` count as past the stop-line. Absorbs rounding
/// when a stop is aimed exactly at the line.
pub const LINE_TOL_M: f64 = 1e-6;

/// Seconds simulated after the line crossing before an episode closes.
pub const POST_CROSS_S: f64 = 2.0;

/// Hard cap on episode length.
pub const MAX_EPISODE_S: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Stop,
    Go,
}

impl Decision {
    pub fn label(self) -> u8 {
        match self {
            Decision::Stop => 0,
            Decision::Go => 1,
        }
    }

    pub fn from_label(label: u8) -> Self {
        if label == 0 {
            Decision::Stop
        } else {
            Decision::Go
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Stop => "stop",
            Decision::Go => "go",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickSample {
    pub t_s: f64,
    pub position_m: f64,
    pub speed_mps: f64,
    pub accel_mps2: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub driver_id: String,
    pub scenario: Scenario,
    pub samples: Vec<TickSample>,
    pub decision: Decision,
    pub decision_t_s: f64,
    pub ran_red: bool,
    pub crossed_line_t_s: Option<f64>,
}

impl Episode {
    pub fn yellow_onset_index(&self) -> usize {
        self.scenario.yellow_onset_tick() as usize
    }

    /// Index of the first sample at or after the decision time.
    pub fn decision_index(&self) -> usize {
        let k = (self.decision_t_s / self.scenario.dt_s - 1e-9).ceil().max(0.0) as usize;
        k.min(self.samples.len().saturating_sub(1))
    }

    pub fn decision_sample(&self) -> &TickSample {
        &self.samples[self.decision_index()]
    }

    /// Seconds between yellow onset and the decision.
    pub fn decision_latency(&self) -> f64 {
        self.decision_t_s - self.scenario.timing.yellow_onset()
    }

    /// Red-light running: crossing the line at or after red onset, or
    /// coming to rest past the line after choosing to stop.
    pub fn compute_ran_red(&self) -> bool {
        let red = self.scenario.timing.red_onset();
        let late_cross = self.crossed_line_t_s.is_some_and(|t| t >= red);
        let stopped_over = self.decision == Decision::Stop
            && self
                .samples
                .last()
                .is_some_and(|s| s.position_m < -LINE_TOL_M);
        late_cross || stopped_over
    }
}

/// Fixed-step simulation of one approach. Every tick advances time by
/// exactly `scenario.dt_s`; tick `k` sits at `k * dt`.
#[derive(Debug, Clone)]
pub struct Drive {
    scenario: Scenario,
    state: VehicleState,
    tick: u64,
    samples: Vec<TickSample>,
    decision: Option<(Decision, f64)>,
    crossed_t: Option<f64>,
}

impl Drive {
    pub fn new(scenario: Scenario) -> Self {
        let mut state = scenario.initial;
        state.t_s = 0.0;
        let first = TickSample {
            t_s: 0.0,
            position_m: state.position_m,
            speed_mps: state.speed_mps,
            accel_mps2: state.accel_mps2,
            phase: phase_at(&scenario.timing, 0.0).unwrap_or(Phase::Green),
        };
        Self {
            scenario,
            state,
            tick: 0,
            samples: vec![first],
            decision: None,
            crossed_t: None,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn t(&self) -> f64 {
        self.scenario.tick_time(self.tick)
    }

    pub fn phase(&self) -> Phase {
        self.samples.last().map(|s| s.phase).unwrap_or(Phase::Green)
    }

    pub fn yellow_remaining(&self) -> f64 {
        self.scenario.timing.yellow_remaining(self.t())
    }

    pub fn decision(&self) -> Option<(Decision, f64)> {
        self.decision
    }

    pub fn crossed_line_t(&self) -> Option<f64> {
        self.crossed_t
    }

    pub fn samples(&self) -> &[TickSample] {
        &self.samples
    }

    /// Record the decision; a second call is an error.
    pub fn latch(&mut self, decision: Decision, t: f64) -> Result<()> {
        if self.decision.is_some() {
            return Err(domain("decision already recorded"));
        }
        self.decision = Some((decision, t));
        Ok(())
    }

    /// Apply `accel_cmd` over one tick.
    pub fn advance(&mut self, accel_cmd: f64) -> Result<&TickSample> {
        let prev = self.state;
        let mut next = kinematics::step(&prev, accel_cmd, self.scenario.dt_s, &self.scenario.limits)?;
        self.tick += 1;
        let t = self.t();
        next.t_s = t;
        if self.crossed_t.is_none() && next.position_m < -LINE_TOL_M {
            let t_prev = self.scenario.tick_time(self.tick - 1);
            let into_tick = kinematics::travel_time(prev.position_m, prev.speed_mps, next.accel_mps2)
                .unwrap_or(self.scenario.dt_s)
                .min(self.scenario.dt_s);
            self.crossed_t = Some(t_prev + into_tick);
        }
        self.state = next;
        self.samples.push(TickSample {
            t_s: t,
            position_m: next.position_m,
            speed_mps: next.speed_mps,
            accel_mps2: next.accel_mps2,
            phase: phase_at(&self.scenario.timing, t)?,
        });
        Ok(self.samples.last().expect("just pushed"))
    }

    /// At rest, two seconds past the line, or out of time.
    pub fn is_done(&self) -> bool {
        let t = self.t();
        (self.tick > 0 && self.state.speed_mps == 0.0)
            || self.crossed_t.is_some_and(|c| t >= c + POST_CROSS_S)
            || t >= MAX_EPISODE_S
    }

    pub fn into_episode(self, driver_id: impl Into<String>) -> Result<Episode> {
        let (decision, decision_t_s) = self
            .decision
            .ok_or_else(|| domain("episode finished without a decision"))?;
        let mut ep = Episode {
            driver_id: driver_id.into(),
            scenario: self.scenario,
            samples: self.samples,
            decision,
            decision_t_s,
            ran_red: false,
            crossed_line_t_s: self.crossed_t,
        };
        ep.ran_red = ep.compute_ran_red();
        Ok(ep)
    }
}
