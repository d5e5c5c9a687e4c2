//! Episodes to model samples: per-driver statistics, fixed-length windows
//! after yellow onset, stratified splits, normalization and JSONL files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::episode::{Decision, Episode};
use crate::error::{config, domain, Error, Result};
use crate::kinematics::KinematicLimits;
use crate::rng::SimRng;

pub const COMMON_FEATURES: usize = 3;
pub const PERSONAL_FEATURES: usize = 5;
pub const DEFAULT_WINDOW: usize = 25;
pub const MIN_EPISODES_PER_DRIVER: usize = 10;

/// Per-driver behavior at the decision moment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonalStats {
    pub pof_go: f64,
    pub pof_rr: f64,
    pub avg_spd_mps: f64,
    pub avg_dts_m: f64,
    pub avg_yt_s: f64,
}

impl PersonalStats {
    pub fn to_array(&self) -> [f64; PERSONAL_FEATURES] {
        [self.pof_go, self.pof_rr, self.avg_spd_mps, self.avg_dts_m, self.avg_yt_s]
    }
}

pub fn compute_personal_stats(episodes: &[Episode]) -> Result<PersonalStats> {
    let first = episodes
        .first()
        .ok_or_else(|| domain("personal statistics need at least one episode"))?;
    if let Some(other) = episodes.iter().find(|e| e.driver_id != first.driver_id) {
        return Err(domain(format!(
            "episodes mix drivers {:?} and {:?}",
            first.driver_id, other.driver_id
        )));
    }
    let n = episodes.len() as f64;
    let mut stats = PersonalStats {
        pof_go: 0.0,
        pof_rr: 0.0,
        avg_spd_mps: 0.0,
        avg_dts_m: 0.0,
        avg_yt_s: 0.0,
    };
    for e in episodes {
        let s = e.decision_sample();
        stats.pof_go += f64::from(u8::from(e.decision == Decision::Go));
        stats.pof_rr += f64::from(u8::from(e.ran_red));
        stats.avg_spd_mps += s.speed_mps;
        stats.avg_dts_m += s.position_m;
        stats.avg_yt_s += e.decision_latency();
    }
    stats.pof_go /= n;
    stats.pof_rr /= n;
    stats.avg_spd_mps /= n;
    stats.avg_dts_m /= n;
    stats.avg_yt_s /= n;
    Ok(stats)
}

/// One model input: the common window, the driver's statistics vector and
/// the recorded decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub driver_id: String,
    /// 0 = stop, 1 = go.
    pub label: u8,
    pub personal: [f64; PERSONAL_FEATURES],
    pub common_seq: Vec<[f64; COMMON_FEATURES]>,
}

/// First `w` ticks at and after yellow onset as rows of
/// (speed, distance to stop-line, elapsed yellow). `None` when the episode
/// ends too early.
pub fn extract_window(episode: &Episode, w: usize) -> Option<Vec<[f64; COMMON_FEATURES]>> {
    let start = episode.yellow_onset_index();
    let rows = episode.samples.get(start..start + w)?;
    let dt = episode.scenario.dt_s;
    Some(
        rows.iter()
            .enumerate()
            .map(|(i, s)| [s.speed_mps, s.position_m, i as f64 * dt])
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub mean: f64,
    pub sd: f64,
}

impl Scale {
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self {
            mean,
            sd: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Per-feature standardization fit on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub common: [Scale; COMMON_FEATURES],
    pub personal: [Scale; PERSONAL_FEATURES],
}

impl Normalizer {
    pub fn fit(train: &[Sample]) -> Self {
        let common = std::array::from_fn(|c| {
            Scale::fit(train.iter().flat_map(move |s| s.common_seq.iter().map(move |r| r[c])))
        });
        let personal = std::array::from_fn(|c| Scale::fit(train.iter().map(move |s| s.personal[c])));
        Self { common, personal }
    }

    pub fn apply(&self, s: &Sample) -> Sample {
        Sample {
            driver_id: s.driver_id.clone(),
            label: s.label,
            personal: std::array::from_fn(|c| self.personal[c].apply(s.personal[c])),
            common_seq: s
                .common_seq
                .iter()
                .map(|r| std::array::from_fn(|c| self.common[c].apply(r[c])))
                .collect(),
        }
    }

    pub fn apply_all(&self, samples: &[Sample]) -> Vec<Sample> {
        samples.iter().map(|s| self.apply(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSplit {
    /// Indices into the driver's episode list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub window: usize,
    pub dt_s: f64,
    #[serde(default)]
    pub limits: KinematicLimits,
    pub normalization: Normalizer,
    pub split_seed: u64,
    pub holdout_fraction: f64,
    pub personal_stats: BTreeMap<String, PersonalStats>,
    pub splits: BTreeMap<String, DriverSplit>,
}

/// Raw (unnormalized) samples plus the metadata needed to normalize them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn train_normalized(&self) -> Vec<Sample> {
        self.meta.normalization.apply_all(&self.train)
    }

    pub fn test_normalized(&self) -> Vec<Sample> {
        self.meta.normalization.apply_all(&self.test)
    }
}

pub fn group_by_driver(episodes: Vec<Episode>) -> BTreeMap<String, Vec<Episode>> {
    let mut out: BTreeMap<String, Vec<Episode>> = BTreeMap::new();
    for e in episodes {
        out.entry(e.driver_id.clone()).or_default().push(e);
    }
    out
}

/// Stratified-by-driver random split. Statistics are computed from each
/// driver's training episodes and attached to both splits.
pub fn build_dataset(
    by_driver: &BTreeMap<String, Vec<Episode>>,
    window: usize,
    split_seed: u64,
    holdout_fraction: f64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(config(format!("holdout_fraction must lie in [0, 1), got {holdout_fraction}")));
    }
    if window == 0 {
        return Err(config("window must hold at least one tick"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut stats_by_driver = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut dt_s = None;
    let mut limits = None;
    for (di, (driver, episodes)) in by_driver.iter().enumerate() {
        if episodes.len() < MIN_EPISODES_PER_DRIVER {
            return Err(config(format!(
                "driver {driver} has {} episodes, need at least {MIN_EPISODES_PER_DRIVER}",
                episodes.len()
            )));
        }
        dt_s.get_or_insert(episodes[0].scenario.dt_s);
        limits.get_or_insert(episodes[0].scenario.limits);
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        SimRng::stream(split_seed, di as u64).shuffle(&mut order);
        let n_test = (holdout_fraction * episodes.len() as f64).round() as usize;
        let mut test_idx = order[..n_test].to_vec();
        let mut train_idx = order[n_test..].to_vec();
        test_idx.sort_unstable();
        train_idx.sort_unstable();

        let train_eps: Vec<Episode> = train_idx.iter().map(|&i| episodes[i].clone()).collect();
        let stats = compute_personal_stats(&train_eps)?;
        if stats.pof_go == 0.0 || stats.pof_go == 1.0 {
            warn!("driver {driver} made only one kind of decision in training");
        }
        let personal = stats.to_array();
        for (indices, dst) in [(&train_idx, &mut train), (&test_idx, &mut test)] {
            for &i in indices.iter() {
                let ep = &episodes[i];
                match extract_window(ep, window) {
                    Some(common_seq) => dst.push(Sample {
                        driver_id: driver.clone(),
                        label: ep.decision.label(),
                        personal,
                        common_seq,
                    }),
                    None => warn!("driver {driver} episode {i} is shorter than the window; skipped"),
                }
            }
        }
        stats_by_driver.insert(driver.clone(), stats);
        splits.insert(
            driver.clone(),
            DriverSplit {
                train: train_idx,
                test: test_idx,
            },
        );
    }
    let normalization = Normalizer::fit(&train);
    Ok(Dataset {
        train,
        test,
        meta: DatasetMeta {
            window,
            dt_s: dt_s.unwrap_or(0.02),
            limits: limits.unwrap_or_default(),
            normalization,
            split_seed,
            holdout_fraction,
            personal_stats: stats_by_driver,
            splits,
        },
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Append records to a JSONL file, creating it when missing.
pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Tick-level CSV for external plotting.
pub fn export_episodes_csv(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "driver_id",
        "episode",
        "t_s",
        "position_m",
        "speed_mps",
        "accel_mps2",
        "phase",
        "decision",
        "decision_t_s",
        "ran_red",
    ])?;
    for (k, e) in episodes.iter().enumerate() {
        for s in &e.samples {
            w.write_record([
                e.driver_id.clone(),
                k.to_string(),
                s.t_s.to_string(),
                s.position_m.to_string(),
                s.speed_mps.to_string(),
                s.accel_mps2.to_string(),
                s.phase.as_str().to_string(),
                e.decision.as_str().to_string(),
                e.decision_t_s.to_string(),
                e.ran_red.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
