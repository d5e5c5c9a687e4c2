use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dzlab::dataset::{build_dataset, export_episodes_csv, group_by_driver, read_jsonl, write_jsonl, Dataset};
use dzlab::episode::Episode;
use dzlab::eval::{
    behavior_metrics, compare_models, decision_timing, fit_predictor, mean_time_to_line,
    prediction_records, write_timing_csv, AccuracyReport, PredictionRecord,
};
use dzlab::model::{write_loss_history, Checkpoint};
use dzlab::persona::{calibrate_go_bias, default_personas, load_personas, save_personas, simulate_fleet, PersonaProfile};
use dzlab::session::{serve, ServerConfig};
use dzlab::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::plot::{html_page, timing_svg};
use crate::{Cli, Command, DataArgs, HyperArgs};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SPLIT_FILE: &str = "split.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

pub fn run(cli: Cli) -> Result<()> {
    let (mut cfg, _) = RunConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => {
            cfg.validate()?;
            let personas = personas(a.personas.as_deref())?;
            fs::create_dir_all(&a.out)?;
            let episodes = simulate_fleet(&personas, a.episodes, a.seed, &cfg.scenario)?;
            write_jsonl(&a.out.join(EPISODES_FILE), &episodes)?;
            save_personas(&a.out.join("personas.json"), &personas)?;
            if a.csv {
                export_episodes_csv(&a.out.join("episodes.csv"), &episodes)?;
            }
            let inputs: Vec<PathBuf> = a.personas.into_iter().collect();
            Manifest::new("simulate", &cfg, vec![a.seed]).with_inputs(&inputs)?.write(&a.out)?;
            println!("wrote {} episodes to {}", episodes.len(), a.out.join(EPISODES_FILE).display());
            Ok(())
        }
        Command::Collect(a) => {
            cfg.validate()?;
            fs::create_dir_all(&a.store)?;
            Manifest::new("collect", &cfg, vec![a.seed]).write(&a.store)?;
            let handle = serve(
                &a.serve,
                ServerConfig {
                    scenario: cfg.scenario.clone(),
                    store_dir: a.store.clone(),
                    fast: a.fast,
                    base_seed: a.seed,
                },
            )?;
            println!("listening on {}", handle.addr());
            handle.wait();
            Ok(())
        }
        Command::Train(a) => {
            apply_data(&mut cfg, &a.data);
            apply_hyper(&mut cfg, &a.hyper);
            cfg.validate()?;
            let (by_driver, inputs) = load_episodes(&a.data.episodes)?;
            let ds = build_dataset(&by_driver, cfg.window, a.seed, cfg.holdout_fraction)?;
            if ds.train.is_empty() {
                return Err(Error::Config("training split is empty".into()));
            }
            fs::create_dir_all(&a.out)?;
            let (predictor, history) = fit_predictor(a.variant, &ds, &cfg.hyper, &cfg.logistic, a.seed)?;
            Checkpoint::new(predictor).save(&a.out.join(CHECKPOINT_FILE))?;
            if !history.is_empty() {
                write_loss_history(&a.out.join("loss_history.csv"), &history)?;
            }
            SplitInfo::from(&ds).save(&a.out)?;
            Manifest::new("train", &cfg, vec![a.seed]).with_inputs(&inputs)?.write(&a.out)?;
            println!(
                "trained {} on {} samples; checkpoint in {}",
                a.variant.as_str(),
                ds.train.len(),
                a.out.display()
            );
            Ok(())
        }
        Command::Eval(a) => {
            apply_data(&mut cfg, &a.data);
            apply_hyper(&mut cfg, &a.hyper);
            if let Some(s) = &a.seeds {
                cfg.seeds.clone_from(s);
            }
            cfg.validate()?;
            let (by_driver, inputs) = load_episodes(&a.data.episodes)?;
            fs::create_dir_all(&a.out)?;
            let (report, records, seeds) = if a.checkpoint.is_empty() {
                let (report, records) = compare_models(&by_driver, &cfg.seeds, &cfg.compare())?;
                (report, records, cfg.seeds.clone())
            } else {
                score_checkpoints(&by_driver, &a.checkpoint)?
            };
            write_jsonl(&a.out.join(PREDICTIONS_FILE), &records)?;
            write_accuracy(&a.out, &report)?;
            Manifest::new("eval", &cfg, seeds).with_inputs(&inputs)?.write(&a.out)?;
            print!("{}", report.render_text());
            Ok(())
        }
        Command::Report(a) => {
            cfg.validate()?;
            let (by_driver, inputs) = load_episodes(&a.episodes)?;
            fs::create_dir_all(&a.out)?;
            let table = behavior_metrics(&by_driver)?;
            table.write_csv(&a.out.join("behavior.csv"))?;
            let table_text = table.render_text();
            fs::write(a.out.join("behavior.txt"), &table_text)?;

            let all: Vec<Episode> = by_driver.values().flatten().cloned().collect();
            let rows = decision_timing(&all)?;
            write_timing_csv(&a.out.join("decision_timing.csv"), &rows)?;
            let (stop, go) = mean_time_to_line(&rows);
            let timing_text = format!(
                "mean time to stop-line at decision: stop {stop:.3} s, go {go:.3} s ({} episodes)\n",
                rows.len()
            );
            let svg = timing_svg(&rows);
            fs::write(a.out.join("decision_timing.svg"), &svg)?;

            let mut sections = vec![
                ("Driving behavior".to_string(), table_text.clone()),
                ("Decision moments".to_string(), timing_text.clone()),
            ];
            let mut all_inputs = inputs;
            if let Some(eval_dir) = &a.eval {
                let dump = eval_dir.join(PREDICTIONS_FILE);
                let records: Vec<PredictionRecord> = read_jsonl(&dump)?;
                let report = AccuracyReport::from_predictions(&records);
                write_accuracy(&a.out, &report)?;
                sections.push(("Prediction accuracy".to_string(), report.render_text()));
                all_inputs.push(dump);
            }
            let page = html_page(
                "Dilemma-zone report",
                &sections,
                &[("Time to stop-line at the decision moment".to_string(), svg)],
            );
            fs::write(a.out.join("report.html"), page)?;
            Manifest::new("report", &cfg, Vec::new()).with_inputs(&all_inputs)?.write(&a.out)?;
            print!("{table_text}{timing_text}");
            Ok(())
        }
        Command::Sweep(a) => {
            cfg.validate()?;
            let mut personas = personas(a.personas.as_deref())?;
            println!("{:<12}{:>10}{:>10}{:>10}", "persona", "target", "go_bias", "share");
            for (i, p) in personas.iter_mut().enumerate() {
                let Some(target) = p.target_pof_go else {
                    info!("{} has no target go share; left as is", p.name);
                    continue;
                };
                let (bias, share) = calibrate_go_bias(p, i as u64, target, a.episodes, a.seed, &cfg.scenario)?;
                p.go_bias = bias;
                println!("{:<12}{target:>10.3}{bias:>10.4}{share:>10.4}", p.name);
            }
            if let Some(parent) = a.out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            save_personas(&a.out, &personas)?;
            Ok(())
        }
    }
}

fn personas(path: Option<&Path>) -> Result<Vec<PersonaProfile>> {
    match path {
        Some(p) => load_personas(p),
        None => Ok(default_personas()),
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(w) = a.window {
        cfg.window = w;
    }
    if let Some(h) = a.holdout {
        cfg.holdout_fraction = h;
    }
}

fn apply_hyper(cfg: &mut RunConfig, a: &HyperArgs) {
    if let Some(e) = a.epochs {
        cfg.hyper.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.hyper.adam.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.hyper.batch_size = b;
    }
    if let Some(k) = a.k_mix {
        cfg.hyper.k_mix = k;
    }
}

/// Episodes from one JSONL file or every `*.jsonl` in a directory, grouped
/// by driver, plus the files read.
fn load_episodes(path: &Path) -> Result<(BTreeMap<String, Vec<Episode>>, Vec<PathBuf>)> {
    if !path.exists() {
        return Err(Error::Config(format!("episode input {} does not exist", path.display())));
    }
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut all = Vec::new();
    for f in &files {
        all.extend(read_jsonl::<Episode>(f)?);
    }
    if all.is_empty() {
        return Err(Error::Config(format!("no episodes found in {}", path.display())));
    }
    Ok((group_by_driver(all), files))
}

/// Split parameters stored next to a checkpoint so evaluation can rebuild
/// the same held-out set.
#[derive(Debug, Serialize, Deserialize)]
struct SplitInfo {
    window: usize,
    split_seed: u64,
    holdout_fraction: f64,
    train_samples: usize,
    test_samples: usize,
}

impl SplitInfo {
    fn from(ds: &Dataset) -> Self {
        Self {
            window: ds.meta.window,
            split_seed: ds.meta.split_seed,
            holdout_fraction: ds.meta.holdout_fraction,
            train_samples: ds.train.len(),
            test_samples: ds.test.len(),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(SPLIT_FILE))?)?)
    }
}

fn score_checkpoints(
    by_driver: &BTreeMap<String, Vec<Episode>>,
    dirs: &[PathBuf],
) -> Result<(AccuracyReport, Vec<PredictionRecord>, Vec<u64>)> {
    let mut records = Vec::new();
    let mut seeds = Vec::new();
    for dir in dirs {
        let split = SplitInfo::load(dir)?;
        let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let ds = build_dataset(by_driver, split.window, split.split_seed, split.holdout_fraction)?;
        if ds.test.is_empty() {
            return Err(Error::Config(format!("{}: held-out split is empty", dir.display())));
        }
        records.extend(prediction_records(split.split_seed, &ck.predictor, &ds.test)?);
        seeds.push(split.split_seed);
    }
    seeds.sort_unstable();
    seeds.dedup();
    Ok((AccuracyReport::from_predictions(&records), records, seeds))
}

fn write_accuracy(dir: &Path, report: &AccuracyReport) -> Result<()> {
    report.write_csv(&dir.join("accuracy.csv"))?;
    fs::write(dir.join("accuracy.txt"), report.render_text())?;
    fs::write(dir.join("accuracy.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}
