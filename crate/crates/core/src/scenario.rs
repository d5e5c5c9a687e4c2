//! Randomized dilemma-zone encounters and signal phase queries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::kinematics::{KinematicLimits, VehicleState, ZoneTimes};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Green,
    Yellow,
    Red,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Green => "green",
            Phase::Yellow => "yellow",
            Phase::Red => "red",
        }
    }
}

/// Signal plan measured from scenario start. Red is held for the rest of
/// the episode once it begins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalTiming {
    pub green_remaining_s: f64,
    pub yellow_s: f64,
    pub all_red_s: f64,
}

impl SignalTiming {
    pub fn yellow_onset(&self) -> f64 {
        self.green_remaining_s
    }

    pub fn red_onset(&self) -> f64 {
        self.green_remaining_s + self.yellow_s
    }

    /// Seconds of yellow left at time `t`, zero outside the yellow phase.
    pub fn yellow_remaining(&self, t: f64) -> f64 {
        if t < self.yellow_onset() {
            0.0
        } else {
            (self.red_onset() - t).max(0.0)
        }
    }
}

pub fn phase_at(timing: &SignalTiming, t: f64) -> Result<Phase> {
    if t < 0.0 || t.is_nan() {
        return Err(domain(format!("time must be non-negative, got {t}")));
    }
    Ok(if t < timing.yellow_onset() {
        Phase::Green
    } else if t < timing.red_onset() {
        Phase::Yellow
    } else {
        Phase::Red
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub initial: VehicleState,
    pub timing: SignalTiming,
    pub limits: KinematicLimits,
    pub dt_s: f64,
}

impl Scenario {
    /// Tick index of yellow onset. Generated scenarios place the onset on
    /// the tick grid.
    pub fn yellow_onset_tick(&self) -> u64 {
        (self.timing.yellow_onset() / self.dt_s).round() as u64
    }

    pub fn tick_time(&self, tick: u64) -> f64 {
        tick as f64 * self.dt_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Initial speed range in m/s.
    pub speed_range_mps: [f64; 2],
    /// Remaining green at scenario start, seconds.
    pub green_range_s: [f64; 2],
    pub yellow_s: f64,
    pub all_red_s: f64,
    pub dt_s: f64,
    pub limits: KinematicLimits,
    pub zone: ZoneTimes,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            speed_range_mps: [40.0 / 3.6, 100.0 / 3.6],
            green_range_s: [1.0, 5.0],
            yellow_s: 3.5,
            all_red_s: 1.0,
            dt_s: 0.02,
            limits: KinematicLimits::default(),
            zone: ZoneTimes::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let [v_lo, v_hi] = self.speed_range_mps;
        if !(v_lo > 0.0 && v_lo <= v_hi && v_hi.is_finite()) {
            return Err(config(format!("speed range must satisfy 0 < lo <= hi, got [{v_lo}, {v_hi}]")));
        }
        let [g_lo, g_hi] = self.green_range_s;
        if !(g_lo >= 0.0 && g_lo <= g_hi && g_hi.is_finite()) {
            return Err(config(format!("green range must satisfy 0 <= lo <= hi, got [{g_lo}, {g_hi}]")));
        }
        if !(self.yellow_s > 0.0) {
            return Err(config(format!("yellow_s must be positive, got {}", self.yellow_s)));
        }
        if !(self.all_red_s >= 0.0) {
            return Err(config(format!("all_red_s must be non-negative, got {}", self.all_red_s)));
        }
        if !(self.dt_s > 0.0) {
            return Err(config(format!("dt_s must be positive, got {}", self.dt_s)));
        }
        if !(self.zone.near_s > 0.0 && self.zone.far_s > self.zone.near_s) {
            return Err(config("zone times must satisfy far > near > 0"));
        }
        self.limits.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Draw an encounter: uniform speed, uniform remaining green (snapped to
/// the tick grid), and a start position from which constant-speed travel
/// reaches the far edge of the option zone exactly at yellow onset.
pub fn generate_scenario(seed: u64, cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = SimRng::new(seed);
    let v0 = rng.uniform_range(cfg.speed_range_mps[0], cfg.speed_range_mps[1]);
    let g_raw = rng.uniform_range(cfg.green_range_s[0], cfg.green_range_s[1]);
    let green = (g_raw / cfg.dt_s).round() * cfg.dt_s;
    let x0 = cfg.zone.far_s * v0 + v0 * green;
    Ok(Scenario {
        seed,
        initial: VehicleState::new(x0, v0),
        timing: SignalTiming {
            green_remaining_s: green,
            yellow_s: cfg.yellow_s,
            all_red_s: cfg.all_red_s,
        },
        limits: cfg.limits,
        dt_s: cfg.dt_s,
    })
}
