//! Behavior tables, decision-moment analysis and the three-way accuracy
//! comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, compute_personal_stats, Dataset, PersonalStats, Sample};
use crate::episode::{Decision, Episode};
use crate::error::{Error, Result};
use crate::kinematics::{time_to_clear, time_to_stop};
use crate::model::{
    logistic_inputs, logistic_train, train, Hyper, LogisticConfig, ModelKind, Predictor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRow {
    pub driver_id: String,
    pub episodes: usize,
    pub stats: PersonalStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTable {
    pub rows: Vec<BehaviorRow>,
    /// All drivers' episodes pooled.
    pub fleet: BehaviorRow,
}

/// One statistics row per driver plus a pooled fleet row. Drivers without
/// episodes are skipped with a warning.
pub fn behavior_metrics(by_driver: &BTreeMap<String, Vec<Episode>>) -> Result<BehaviorTable> {
    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    for (driver, episodes) in by_driver {
        if episodes.is_empty() {
            warn!("driver {driver} has no episodes; excluded");
            continue;
        }
        rows.push(BehaviorRow {
            driver_id: driver.clone(),
            episodes: episodes.len(),
            stats: compute_personal_stats(episodes)?,
        });
        pooled.extend(episodes.iter().map(|e| Episode {
            driver_id: "fleet".into(),
            ..e.clone()
        }));
    }
    if pooled.is_empty() {
        return Err(Error::Domain("no episodes to summarize".into()));
    }
    let fleet = BehaviorRow {
        driver_id: "fleet".into(),
        episodes: pooled.len(),
        stats: compute_personal_stats(&pooled)?,
    };
    Ok(BehaviorTable { rows, fleet })
}

const BEHAVIOR_HEADER: [&str; 7] = [
    "driver",
    "episodes",
    "pof_go",
    "pof_rr",
    "avg_spd_mps",
    "avg_dts_m",
    "avg_yt_s",
];

fn behavior_fields(r: &BehaviorRow) -> [String; 7] {
    let s = &r.stats;
    [
        r.driver_id.clone(),
        r.episodes.to_string(),
        format!("{:.4}", s.pof_go),
        format!("{:.4}", s.pof_rr),
        format!("{:.3}", s.avg_spd_mps),
        format!("{:.3}", s.avg_dts_m),
        format!("{:.3}", s.avg_yt_s),
    ]
}

impl BehaviorTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12}{:>9}{:>9}{:>9}{:>13}{:>11}{:>10}",
            "driver", "episodes", "PofGo", "PofRR", "AvgSpd m/s", "AvgDTS m", "AvgYT s"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.fleet)) {
            let s = &r.stats;
            let _ = writeln!(
                out,
                "{:<12}{:>9}{:>8.1}%{:>8.1}%{:>13.2}{:>11.2}{:>10.3}",
                r.driver_id,
                r.episodes,
                100.0 * s.pof_go,
                100.0 * s.pof_rr,
                s.avg_spd_mps,
                s.avg_dts_m,
                s.avg_yt_s
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(BEHAVIOR_HEADER)?;
        for r in self.rows.iter().chain(std::iter::once(&self.fleet)) {
            w.write_record(behavior_fields(r))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Kinematic view of one decision moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub driver_id: String,
    pub decision: Decision,
    /// Decision time minus yellow onset.
    pub latency_s: f64,
    pub speed_mps: f64,
    pub distance_m: f64,
    pub t_a_s: f64,
    pub t_b_s: f64,
    pub yellow_remaining_s: f64,
    /// `t_b` for stop decisions, `t_a` for go decisions.
    pub time_to_line_s: f64,
}

/// Per-episode timing rows recomputed from the decision tick.
pub fn decision_timing(episodes: &[Episode]) -> Result<Vec<TimingRow>> {
    episodes
        .iter()
        .map(|e| {
            let s = e.decision_sample();
            let limits = &e.scenario.limits;
            let t_a = time_to_clear(s.position_m.max(0.0), s.speed_mps, limits)?;
            let t_b = time_to_stop(s.speed_mps, limits)?;
            Ok(TimingRow {
                driver_id: e.driver_id.clone(),
                decision: e.decision,
                latency_s: e.decision_latency(),
                speed_mps: s.speed_mps,
                distance_m: s.position_m,
                t_a_s: t_a,
                t_b_s: t_b,
                yellow_remaining_s: e.scenario.timing.yellow_remaining(e.decision_t_s),
                time_to_line_s: match e.decision {
                    Decision::Stop => t_b,
                    Decision::Go => t_a,
                },
            })
        })
        .collect()
}

/// Mean refined time-to-line at stop and at go decisions; `NaN` when a
/// class is absent.
pub fn mean_time_to_line(rows: &[TimingRow]) -> (f64, f64) {
    let mean = |d: Decision| {
        let v: Vec<f64> = rows.iter().filter(|r| r.decision == d).map(|r| r.time_to_line_s).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(Decision::Stop), mean(Decision::Go))
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "driver_id",
        "decision",
        "latency_s",
        "speed_mps",
        "distance_m",
        "t_a_s",
        "t_b_s",
        "yellow_remaining_s",
        "time_to_line_s",
    ])?;
    for r in rows {
        w.write_record([
            r.driver_id.clone(),
            r.decision.as_str().to_string(),
            r.latency_s.to_string(),
            r.speed_mps.to_string(),
            r.distance_m.to_string(),
            r.t_a_s.to_string(),
            r.t_b_s.to_string(),
            r.yellow_remaining_s.to_string(),
            r.time_to_line_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One model's prediction for one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub seed: u64,
    pub model: ModelKind,
    pub driver_id: String,
    pub index: usize,
    pub label: u8,
    pub p_go: f64,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        u8::from(self.p_go >= 0.5) == self.label
    }
}

pub fn prediction_records(
    seed: u64,
    predictor: &Predictor,
    test: &[Sample],
) -> Result<Vec<PredictionRecord>> {
    let probs = predictor.predict(test)?;
    Ok(test
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(index, (s, p_go))| PredictionRecord {
            seed,
            model: predictor.kind(),
            driver_id: s.driver_id.clone(),
            index,
            label: s.label,
            p_go,
        })
        .collect())
}

/// Test accuracies averaged over seeds. Only accuracies are stored;
/// improvements are derived on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub seeds: Vec<u64>,
    pub drivers: Vec<String>,
    /// Per model: per-driver accuracy.
    pub per_driver: BTreeMap<ModelKind, BTreeMap<String, f64>>,
    /// Per model: pooled random-split accuracy.
    pub pooled: BTreeMap<ModelKind, f64>,
    /// Models that failed to train, with the error text.
    pub failures: Vec<String>,
}

fn ratio(records: &[&PredictionRecord]) -> f64 {
    records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64
}

impl AccuracyReport {
    /// Rebuilds the report from a prediction dump.
    pub fn from_predictions(records: &[PredictionRecord]) -> Self {
        let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let mut drivers: Vec<String> = records.iter().map(|r| r.driver_id.clone()).collect();
        drivers.sort();
        drivers.dedup();
        let mut per_driver = BTreeMap::new();
        let mut pooled = BTreeMap::new();
        for model in ModelKind::ALL {
            let mine: Vec<&PredictionRecord> = records.iter().filter(|r| r.model == model).collect();
            if mine.is_empty() {
                continue;
            }
            let mut model_seeds: Vec<u64> = mine.iter().map(|r| r.seed).collect();
            model_seeds.dedup();
            let mean_over_seeds = |keep: &dyn Fn(&PredictionRecord) -> bool| -> Option<f64> {
                let accs: Vec<f64> = model_seeds
                    .iter()
                    .filter_map(|&s| {
                        let sel: Vec<&PredictionRecord> =
                            mine.iter().copied().filter(|r| r.seed == s && keep(r)).collect();
                        (!sel.is_empty()).then(|| ratio(&sel))
                    })
                    .collect();
                (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
            };
            let mut by_driver = BTreeMap::new();
            for d in &drivers {
                if let Some(a) = mean_over_seeds(&|r| &r.driver_id == d) {
                    by_driver.insert(d.clone(), a);
                }
            }
            per_driver.insert(model, by_driver);
            if let Some(a) = mean_over_seeds(&|_| true) {
                pooled.insert(model, a);
            }
        }
        Self {
            seeds,
            drivers,
            per_driver,
            pooled,
            failures: Vec::new(),
        }
    }

    /// `new − old` in percentage points on the pooled split.
    pub fn improvement_pp(&self, new: ModelKind, old: ModelKind) -> Option<f64> {
        Some(100.0 * (self.pooled.get(&new)? - self.pooled.get(&old)?))
    }

    /// `(new − old)/old` in percent on the pooled split.
    pub fn improvement_rel(&self, new: ModelKind, old: ModelKind) -> Option<f64> {
        let o = *self.pooled.get(&old)?;
        Some(100.0 * (self.pooled.get(&new)? - o) / o)
    }

    fn columns(&self) -> Vec<String> {
        let mut c = self.drivers.clone();
        c.push("random".into());
        c
    }

    fn cell(&self, model: ModelKind, column: &str) -> Option<f64> {
        if column == "random" {
            self.pooled.get(&model).copied()
        } else {
            self.per_driver.get(&model)?.get(column).copied()
        }
    }

    pub fn render_text(&self) -> String {
        let cols = self.columns();
        let mut out = String::new();
        let _ = write!(out, "{:<28}", "model");
        for c in &cols {
            let _ = write!(out, "{c:>10}");
        }
        out.push('\n');
        let label = |m: ModelKind| match m {
            ModelKind::Logistic => "B.L.R.",
            ModelKind::Generic => "Generic Transformer",
            ModelKind::Personalized => "Personalized Transformer",
        };
        for m in ModelKind::ALL {
            let _ = write!(out, "{:<28}", label(m));
            for c in &cols {
                match self.cell(m, c) {
                    Some(a) => {
                        let _ = write!(out, "{:>9.1}%", 100.0 * a);
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for (new, old) in [
            (ModelKind::Personalized, ModelKind::Generic),
            (ModelKind::Personalized, ModelKind::Logistic),
            (ModelKind::Generic, ModelKind::Logistic),
        ] {
            if let (Some(pp), Some(rel)) = (self.improvement_pp(new, old), self.improvement_rel(new, old)) {
                let _ = writeln!(
                    out,
                    "{} vs {}: {pp:+.2} pp ({rel:+.2}% relative)",
                    new.as_str(),
                    old.as_str()
                );
            }
        }
        let _ = writeln!(out, "seeds: {:?}", self.seeds);
        for f in &self.failures {
            let _ = writeln!(out, "failed: {f}");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let cols = self.columns();
        let mut header = vec!["model".to_string()];
        header.extend(cols.iter().cloned());
        w.write_record(&header)?;
        for m in ModelKind::ALL {
            let mut row = vec![m.as_str().to_string()];
            row.extend(
                cols.iter()
                    .map(|c| self.cell(m, c).map_or_else(String::new, |a| format!("{a:.6}"))),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub window: usize,
    pub holdout_fraction: f64,
    pub hyper: Hyper,
    pub logistic: LogisticConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            window: crate::dataset::DEFAULT_WINDOW,
            holdout_fraction: 0.25,
            hyper: Hyper::default(),
            logistic: LogisticConfig::default(),
        }
    }
}

/// Trains one predictor of `kind` on the dataset's training split.
pub fn fit_predictor(kind: ModelKind, ds: &Dataset, hyper: &Hyper, logistic: &LogisticConfig, seed: u64) -> Result<(Predictor, Vec<f64>)> {
    match kind.variant() {
        None => {
            let limits = ds.meta.limits;
            let (f, y) = logistic_inputs(&ds.train, &limits)?;
            let model = logistic_train(&f, &y, logistic)?;
            Ok((Predictor::Logistic { model, limits }, Vec::new()))
        }
        Some(variant) => {
            let (params, history) = train(&ds.train_normalized(), hyper, seed, variant)?;
            Ok((
                Predictor::Transformer {
                    params,
                    normalizer: ds.meta.normalization.clone(),
                },
                history,
            ))
        }
    }
}

/// For each seed: split with that seed, train all three models with that
/// seed and predict the held-out samples. A model that fails is recorded
/// and the others still run.
pub fn compare_models(
    by_driver: &BTreeMap<String, Vec<Episode>>,
    seeds: &[u64],
    cfg: &CompareConfig,
) -> Result<(AccuracyReport, Vec<PredictionRecord>)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let ds = build_dataset(by_driver, cfg.window, seed, cfg.holdout_fraction)?;
        if ds.test.is_empty() {
            return Err(Error::Config("holdout split is empty".into()));
        }
        for kind in ModelKind::ALL {
            match fit_predictor(kind, &ds, &cfg.hyper, &cfg.logistic, seed) {
                Ok((p, _)) => records.extend(prediction_records(seed, &p, &ds.test)?),
                Err(e @ (Error::Diverged { .. } | Error::Numeric { .. })) => {
                    warn!("seed {seed}: {} failed: {e}", kind.as_str());
                    failures.push(format!("seed {seed} {}: {e}", kind.as_str()));
                }
                Err(e) => return Err(e),
            }
        }
    }
    let mut report = AccuracyReport::from_predictions(&records);
    report.seeds = seeds.to_vec();
    report.failures = failures;
    Ok((report, records))
}
