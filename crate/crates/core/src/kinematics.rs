//! Closed-form longitudinal kinematics for a single vehicle approaching a
//! stop-line.
//!
//! Positions are measured upstream of the stop-line: a positive position is
//! before the line, zero is on it and negative values are past it. Braking
//! capability is stored as a positive magnitude.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

/// Longitudinal state of the ego vehicle at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Meters upstream of the stop-line.
    pub position_m: f64,
    pub speed_mps: f64,
    pub accel_mps2: f64,
    pub t_s: f64,
}

impl VehicleState {
    pub fn new(position_m: f64, speed_mps: f64) -> Self {
        Self {
            position_m,
            speed_mps,
            accel_mps2: 0.0,
            t_s: 0.0,
        }
    }
}

/// Acceleration envelope of the vehicle. Both rates are magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicLimits {
    pub a_max: f64,
    pub b_max: f64,
    /// Comfortable braking rate. Exposed for callers; zone classification
    /// always uses `b_max`.
    pub comfort_decel: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        Self {
            a_max: 3.0,
            b_max: 3.0,
            comfort_decel: 3.0,
        }
    }
}

impl KinematicLimits {
    pub fn new(a_max: f64, b_max: f64) -> Result<Self> {
        let limits = Self {
            a_max,
            b_max,
            comfort_decel: b_max,
        };
        limits.validate()?;
        Ok(limits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_max > 0.0 && self.a_max.is_finite()) {
            return Err(config(format!("a_max must be positive, got {}", self.a_max)));
        }
        if !(self.b_max > 0.0 && self.b_max.is_finite()) {
            return Err(config(format!("b_max must be positive, got {}", self.b_max)));
        }
        if !(self.comfort_decel > 0.0 && self.comfort_decel <= self.b_max) {
            return Err(config(format!(
                "comfort_decel must lie in (0, b_max], got {}",
                self.comfort_decel
            )));
        }
        Ok(())
    }

    /// Clamp an acceleration command into `[-b_max, a_max]`.
    pub fn clamp(&self, accel: f64) -> f64 {
        accel.clamp(-self.b_max, self.a_max)
    }
}

/// Constant-speed travel times that bound the option zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoneTimes {
    pub far_s: f64,
    pub near_s: f64,
}

impl Default for ZoneTimes {
    fn default() -> Self {
        Self {
            far_s: 5.5,
            near_s: 2.5,
        }
    }
}

/// Distances (m upstream) where the option zone starts and ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneBounds {
    pub start_m: f64,
    pub end_m: f64,
}

impl ZoneBounds {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.end_m && x <= self.start_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZoneClass {
    /// Upstream of the option zone.
    BeforeZone,
    /// Option zone: both stopping and going are feasible.
    TypeII,
    /// Between the end of the option zone and the stop-line.
    PastZone,
    /// Neither a stop at max braking nor a clearance before red is possible.
    TypeI,
    /// At or past the stop-line.
    Clear,
}

fn check_speed(v0: f64) -> Result<()> {
    if v0 < 0.0 || !v0.is_finite() {
        return Err(domain(format!("speed must be finite and non-negative, got {v0}")));
    }
    Ok(())
}

/// Time to decelerate to standstill at maximum braking, `v0 / b_max`.
pub fn time_to_stop(v0: f64, limits: &KinematicLimits) -> Result<f64> {
    check_speed(v0)?;
    Ok(v0 / limits.b_max)
}

/// Braking distance at maximum deceleration, `v0² / (2 b_max)`.
pub fn stop_distance(v0: f64, limits: &KinematicLimits) -> Result<f64> {
    check_speed(v0)?;
    Ok(v0 * v0 / (2.0 * limits.b_max))
}

/// Time to reach the stop-line `x` meters ahead while accelerating at
/// `a_max` from `v0`.
///
/// Evaluated as `2x / (v0 + sqrt(v0² + 2 a x))`, the positive root of
/// `x = v0 t + a t² / 2` without the cancellation of the textbook form.
pub fn time_to_clear(x: f64, v0: f64, limits: &KinematicLimits) -> Result<f64> {
    if x < 0.0 || !x.is_finite() {
        return Err(domain(format!("distance to line must be non-negative, got {x}")));
    }
    check_speed(v0)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    travel_time(x, v0, limits.a_max)
        .ok_or_else(|| domain(format!("stop-line at {x} m is unreachable from v0={v0}")))
}

/// Smallest `t > 0` with `v t + a t² / 2 = dist` for a constant acceleration
/// of either sign, or `None` when the vehicle stops first.
pub fn travel_time(dist: f64, v: f64, a: f64) -> Option<f64> {
    if dist <= 0.0 {
        return Some(0.0);
    }
    let disc = v * v + 2.0 * a * dist;
    if disc < 0.0 {
        return None;
    }
    let denom = v + disc.sqrt();
    if denom <= 0.0 {
        return None;
    }
    Some(2.0 * dist / denom)
}

/// Option-zone boundaries for a vehicle travelling at `v0`.
pub fn dz_bounds(v0: f64, times: ZoneTimes) -> Result<ZoneBounds> {
    check_speed(v0)?;
    if !(times.near_s > 0.0 && times.far_s > times.near_s) {
        return Err(config(format!(
            "zone times must satisfy far > near > 0, got far={} near={}",
            times.far_s, times.near_s
        )));
    }
    Ok(ZoneBounds {
        start_m: times.far_s * v0,
        end_m: times.near_s * v0,
    })
}

/// Classify where a vehicle sits relative to the dilemma zones. Type I wins
/// over option-zone membership.
pub fn classify_zone(
    state: &VehicleState,
    yellow_remaining: f64,
    limits: &KinematicLimits,
    times: ZoneTimes,
) -> Result<ZoneClass> {
    if yellow_remaining < 0.0 {
        return Err(domain(format!(
            "yellow_remaining must be non-negative, got {yellow_remaining}"
        )));
    }
    let x = state.position_m;
    let v0 = state.speed_mps;
    if x <= 0.0 {
        return Ok(ZoneClass::Clear);
    }
    let cannot_stop = stop_distance(v0, limits)? > x;
    if cannot_stop && time_to_clear(x, v0, limits)? > yellow_remaining {
        return Ok(ZoneClass::TypeI);
    }
    let band = dz_bounds(v0, times)?;
    Ok(if x > band.start_m {
        ZoneClass::BeforeZone
    } else if x >= band.end_m {
        ZoneClass::TypeII
    } else {
        ZoneClass::PastZone
    })
}

/// Advance one tick under a constant acceleration command.
///
/// The update is exact for constant acceleration, including a stop that
/// happens part-way through the tick.
pub fn step(
    state: &VehicleState,
    accel_cmd: f64,
    dt: f64,
    limits: &KinematicLimits,
) -> Result<VehicleState> {
    if !(dt > 0.0) {
        return Err(domain(format!("dt must be positive, got {dt}")));
    }
    let a = limits.clamp(accel_cmd);
    let v = state.speed_mps;
    let v_end = v + a * dt;
    let (speed, dist) = if v_end < 0.0 {
        // a < 0 here; the vehicle halts after v / |a| seconds.
        (0.0, v * v / (-2.0 * a))
    } else {
        (v_end, v * dt + 0.5 * a * dt * dt)
    };
    Ok(VehicleState {
        position_m: state.position_m - dist,
        speed_mps: speed,
        accel_mps2: a,
        t_s: state.t_s + dt,
    })
}
