//! Synthetic drivers: reaction-time draws, a logistic stop-or-go choice on
//! the clearance margin, and full 50 Hz rollouts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::{Decision, Drive, Episode};
use crate::error::{config, Result};
use crate::kinematics::{self, KinematicLimits, VehicleState};
use crate::rng::SimRng;
use crate::scenario::{generate_scenario, Phase, Scenario, ScenarioConfig};

/// Reaction draws are truncated to this window (seconds).
pub const REACTION_BOUNDS_S: (f64, f64) = (0.2, 2.0);

/// Proportional gain (1/s) of speed tracking before the decision.
pub const TRACKING_GAIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub name: String,
    pub desired_speed_mps: f64,
    pub reaction_mean_s: f64,
    pub reaction_sd_s: f64,
    /// Additive shift of the go log-odds.
    pub go_bias: f64,
    /// Log-odds slope on the clearance margin, 1/s.
    pub decision_gain: f64,
    pub comfort_decel_mps2: f64,
    pub go_accel_mps2: f64,
    /// Go share the calibration sweep aims for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_pof_go: Option<f64>,
}

impl PersonaProfile {
    pub fn validate(&self, limits: &KinematicLimits) -> Result<()> {
        if !(self.reaction_mean_s > 0.0) {
            return Err(config(format!("{}: reaction_mean_s must be positive", self.name)));
        }
        if !(self.reaction_sd_s >= 0.0) {
            return Err(config(format!("{}: reaction_sd_s must be non-negative", self.name)));
        }
        if !(self.decision_gain > 0.0) {
            return Err(config(format!("{}: decision_gain must be positive", self.name)));
        }
        if !(self.comfort_decel_mps2 > 0.0 && self.comfort_decel_mps2 <= limits.b_max) {
            return Err(config(format!("{}: comfort_decel must lie in (0, b_max]", self.name)));
        }
        if !(self.go_accel_mps2 > 0.0 && self.go_accel_mps2 <= limits.a_max) {
            return Err(config(format!("{}: go_accel must lie in (0, a_max]", self.name)));
        }
        if !(self.desired_speed_mps > 0.0) {
            return Err(config(format!("{}: desired_speed must be positive", self.name)));
        }
        Ok(())
    }
}

pub fn load_personas(path: &Path) -> Result<Vec<PersonaProfile>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_personas(path: &Path, personas: &[PersonaProfile]) -> Result<()> {
    let text = serde_json::to_string_pretty(personas)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// The four calibrated personas shipped with the crate.
pub fn default_personas() -> Vec<PersonaProfile> {
    serde_json::from_str(include_str!("../fixtures/personas.json"))
        .expect("bundled persona fixture is valid JSON")
}

/// Truncated log-normal reaction time with the profile's mean and sd.
pub fn sample_reaction(profile: &PersonaProfile, rng: &mut SimRng) -> f64 {
    let (lo, hi) = REACTION_BOUNDS_S;
    let mean = profile.reaction_mean_s;
    let sd = profile.reaction_sd_s;
    if sd == 0.0 {
        return mean;
    }
    let s2 = (1.0 + (sd / mean).powi(2)).ln();
    let mu = mean.ln() - 0.5 * s2;
    let s = s2.sqrt();
    // Rejection keeps the shape inside the window; the cap only matters for
    // profiles whose mass lies almost entirely outside it.
    for _ in 0..1000 {
        let draw = (mu + s * rng.standard_normal()).exp();
        if (lo..=hi).contains(&draw) {
            return draw;
        }
    }
    mean.clamp(lo, hi)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability that the persona chooses to go with `yellow_remaining`
/// seconds of yellow left.
pub fn go_probability(
    profile: &PersonaProfile,
    state: &VehicleState,
    yellow_remaining: f64,
    limits: &KinematicLimits,
) -> Result<f64> {
    let x = state.position_m.max(0.0);
    let t_clear = kinematics::time_to_clear(x, state.speed_mps, limits)?;
    let margin = yellow_remaining - t_clear;
    Ok(sigmoid(profile.decision_gain * margin + profile.go_bias))
}

pub fn decide(
    profile: &PersonaProfile,
    state: &VehicleState,
    yellow_remaining: f64,
    limits: &KinematicLimits,
    rng: &mut SimRng,
) -> Result<Decision> {
    let p = go_probability(profile, state, yellow_remaining, limits)?;
    Ok(if rng.bernoulli(p) { Decision::Go } else { Decision::Stop })
}

/// Constant deceleration that brings the vehicle to rest at the line,
/// bounded to `[comfort, b_max]`.
pub fn stop_decel(profile: &PersonaProfile, state: &VehicleState, limits: &KinematicLimits) -> f64 {
    let x = state.position_m;
    let v = state.speed_mps;
    if x <= 0.0 {
        return limits.b_max;
    }
    let required = v * v / (2.0 * x);
    required.clamp(profile.comfort_decel_mps2, limits.b_max)
}

/// Roll one approach out to completion.
pub fn rollout(profile: &PersonaProfile, scenario: &Scenario, rng: &mut SimRng) -> Result<Episode> {
    profile.validate(&scenario.limits)?;
    let limits = scenario.limits;
    let onset = scenario.timing.yellow_onset();
    let reaction = sample_reaction(profile, rng);
    let decision_t = onset + reaction;

    let mut drive = Drive::new(scenario.clone());
    let mut command: Option<f64> = None;
    while !drive.is_done() {
        if command.is_none() && drive.t() >= decision_t - 1e-9 && drive.phase() != Phase::Green {
            let state = *drive.state();
            let choice = decide(profile, &state, drive.yellow_remaining(), &limits, rng)?;
            drive.latch(choice, decision_t)?;
            command = Some(match choice {
                Decision::Stop => -stop_decel(profile, &state, &limits),
                Decision::Go => profile.go_accel_mps2,
            });
        }
        let accel = command.unwrap_or_else(|| {
            let v = drive.state().speed_mps;
            (TRACKING_GAIN * (profile.desired_speed_mps - v))
                .clamp(-profile.comfort_decel_mps2, profile.go_accel_mps2)
        });
        drive.advance(accel)?;
    }
    drive.into_episode(profile.name.clone())
}

/// Scenario seed for encounter `index` of a fleet run. Every persona sees
/// the same encounter sequence.
pub fn encounter_seed(fleet_seed: u64, index: u64) -> u64 {
    SimRng::stream(fleet_seed, index).next_u64()
}

/// `episodes` rollouts per persona, ordered by persona then encounter.
pub fn simulate_fleet(
    personas: &[PersonaProfile],
    episodes: usize,
    fleet_seed: u64,
    cfg: &ScenarioConfig,
) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(personas.len() * episodes);
    for (pi, persona) in personas.iter().enumerate() {
        out.extend(simulate_persona(persona, pi as u64, episodes, fleet_seed, cfg)?);
    }
    Ok(out)
}

pub fn simulate_persona(
    persona: &PersonaProfile,
    persona_index: u64,
    episodes: usize,
    fleet_seed: u64,
    cfg: &ScenarioConfig,
) -> Result<Vec<Episode>> {
    (0..episodes as u64)
        .map(|j| {
            let seed = encounter_seed(fleet_seed, j);
            let scenario = generate_scenario(seed, cfg)?;
            let mut rng = SimRng::stream(seed, 1 + persona_index);
            rollout(persona, &scenario, &mut rng)
        })
        .collect()
}

pub fn pof_go(episodes: &[Episode]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    let go = episodes.iter().filter(|e| e.decision == Decision::Go).count();
    go as f64 / episodes.len() as f64
}

/// Bisect `go_bias` until the simulated go share matches `target`.
///
/// The encounter and noise streams are held fixed across iterations, so each
/// individual decision is monotone in the bias and so is the share.
pub fn calibrate_go_bias(
    persona: &PersonaProfile,
    persona_index: u64,
    target: f64,
    episodes: usize,
    fleet_seed: u64,
    cfg: &ScenarioConfig,
) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&target) {
        return Err(config(format!("target go share must lie in [0, 1], got {target}")));
    }
    let share = |bias: f64| -> Result<f64> {
        let p = PersonaProfile {
            go_bias: bias,
            ..persona.clone()
        };
        Ok(pof_go(&simulate_persona(&p, persona_index, episodes, fleet_seed, cfg)?))
    };
    let (mut lo, mut hi) = (-15.0, 15.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if share(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bias = 0.5 * (lo + hi);
    // Round so the fixture file stays readable.
    let bias = (bias * 1e4).round() / 1e4;
    Ok((bias, share(bias)?))
}
