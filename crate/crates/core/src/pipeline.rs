//! End-to-end steps shared by the command line and the acceptance suite:
//! scene sourcing, splitting, windowing, training and checkpoint restore.

use std::path::Path;

use patternrnn_autodiff::ParameterStore;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synth::synth_generate;
use crate::data::{filter_min_agents, load_dataset, make_all_samples, DatasetFormat, Sample, Scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, TOOL_VERSION};
use crate::model::{Ablation, SceneTensors, SocialPatternModel};
use crate::rng::StreamKey;
use crate::training::{EpochRecord, TrainOutcome, Trainer};

/// Scenes from `dir`, or generated ones when the format is synthetic and
/// no directory is given.
fn scenes(cfg: &RunConfig, dir: Option<&Path>, synth_seed: u64, synth_scenes: usize) -> Result<Vec<Scene>> {
    let scenes = match dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::Data(format!("data directory {} does not exist", dir.display())));
            }
            load_dataset(dir, &cfg.dataset_config())?
        }
        None if cfg.data.format == DatasetFormat::Synth => {
            let spec = crate::data::synth::SynthSpec {
                scenes: synth_scenes,
                ..cfg.synth_spec()
            };
            synth_generate(&spec, synth_seed)?.into_iter().map(|g| g.scene).collect()
        }
        None => {
            return Err(Error::Data(format!(
                "format {} needs a data directory",
                cfg.data.format
            )))
        }
    };
    if let Some(s) = scenes.iter().find(|s| s.dim != cfg.dim) {
        return Err(Error::Config(format!(
            "scene {} has {}-D positions but the configuration expects {}-D",
            s.scene_id, s.dim, cfg.dim
        )));
    }
    Ok(scenes)
}

pub fn training_scenes(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<Scene>> {
    scenes(cfg, dir, cfg.synth_seed, cfg.synth.scenes)
}

pub fn evaluation_scenes(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<Scene>> {
    scenes(cfg, dir, cfg.synth_eval_seed, cfg.synth_eval_scenes)
}

/// Seeded split of whole scenes into training and validation parts.
pub fn split_scenes(scenes: Vec<Scene>, val_fraction: f64, seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    let n = scenes.len();
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut StreamKey::new("split", seed).rng());
    let val_ids: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let (val, train): (Vec<_>, Vec<_>) = scenes.into_iter().enumerate().partition(|(i, _)| val_ids.contains(i));
    (train.into_iter().map(|x| x.1).collect(), val.into_iter().map(|x| x.1).collect())
}

/// Windows with at least `min_agents` fully observed agents.
pub fn windows(cfg: &RunConfig, scenes: Vec<Scene>) -> Result<Vec<Sample>> {
    let data = cfg.dataset_config();
    let kept = filter_min_agents(scenes, data.min_agents, data.window());
    let samples: Vec<Sample> = make_all_samples(&kept, &data)?
        .into_iter()
        .filter(|s| s.agents.iter().filter(|a| a.complete).count() >= data.min_agents)
        .collect();
    Ok(samples)
}

/// Training and validation windows.
pub fn training_windows(cfg: &RunConfig, dir: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, val) = split_scenes(training_scenes(cfg, dir)?, cfg.data.val_fraction, cfg.train.seed);
    let train = windows(cfg, train)?;
    if train.is_empty() {
        return Err(Error::Data(format!(
            "no training window of {} steps with {} complete agents",
            cfg.data.window(),
            cfg.data.min_agents
        )));
    }
    Ok((train, windows(cfg, val)?))
}

pub fn tensors(samples: &[Sample]) -> Result<Vec<SceneTensors>> {
    samples.iter().map(SceneTensors::from_sample).collect()
}

pub struct TrainedRun {
    pub model: SocialPatternModel,
    pub outcome: TrainOutcome,
}

/// Initialises from `cfg.train.seed` and trains with early stopping.
pub fn train(cfg: &RunConfig, train: &[Sample], val: &[Sample], on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainedRun> {
    cfg.validate()?;
    let model = SocialPatternModel::new(cfg.model_config())?;
    let store = model.init_params(cfg.train.seed)?;
    let outcome = Trainer::new(&model, cfg.train.clone(), store)?.fit(&tensors(train)?, &tensors(val)?, on_epoch)?;
    Ok(TrainedRun { model, outcome })
}

pub fn checkpoint(cfg: &RunConfig, outcome: &TrainOutcome) -> Checkpoint {
    Checkpoint {
        config: cfg.to_text(),
        epoch: outcome.best_epoch as u64,
        best_metric: outcome.best_metric,
        params: outcome.best_store.clone(),
        adam: outcome.best_adam.clone(),
    }
}

/// Rebuilds the configuration and model a checkpoint was trained with.
pub fn restore(ck: &Checkpoint) -> Result<(RunConfig, SocialPatternModel, ParameterStore)> {
    let cfg = RunConfig::from_text(&ck.config).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    let model = SocialPatternModel::new(cfg.model_config())?;
    model.check_store(&ck.params)?;
    Ok((cfg, model, ck.params.clone()))
}

/// One ablation mode trained and scored under several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub label: String,
    pub param_count: usize,
    pub seeds: Vec<u64>,
    pub best_epochs: Vec<usize>,
    pub min_ade: Vec<f64>,
    pub min_fde: Vec<f64>,
    /// Single-sample errors under the same seeds.
    pub k1_ade: Vec<f64>,
    pub k1_fde: Vec<f64>,
    pub mean_min_ade: f64,
    pub mean_min_fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tool_version: String,
    pub dataset: String,
    pub units: String,
    pub k: usize,
    pub rows: Vec<AblationRow>,
    pub config: String,
}

impl AblationReport {
    pub fn row(&self, mode: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode.name())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,label,param_count,seeds,mean_min_ade,mean_min_fde\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!(
                "{},\"{}\",{},{},{},{}\n",
                r.mode,
                r.label,
                r.param_count,
                seeds.join(" "),
                r.mean_min_ade,
                r.mean_min_fde
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains and evaluates each mode under every seed. The seed fixes
/// initialisation, shuffling, latent noise and sampling; data and the
/// train/validation split stay those of `cfg`.
pub fn ablate(
    cfg: &RunConfig,
    train_dir: Option<&Path>,
    test_dir: Option<&Path>,
    modes: &[Ablation],
    seeds: &[u64],
    mut on_epoch: impl FnMut(Ablation, u64, &EpochRecord),
) -> Result<AblationReport> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(Error::Config("ablation needs at least one mode and one seed".into()));
    }
    let (train_w, val_w) = training_windows(cfg, train_dir)?;
    let test_w = windows(cfg, evaluation_scenes(cfg, test_dir)?)?;
    let mut rows = Vec::new();
    for &mode in modes {
        let mut row = AblationRow {
            mode: mode.name().to_string(),
            label: mode.label().to_string(),
            param_count: 0,
            seeds: seeds.to_vec(),
            best_epochs: Vec::new(),
            min_ade: Vec::new(),
            min_fde: Vec::new(),
            k1_ade: Vec::new(),
            k1_fde: Vec::new(),
            mean_min_ade: 0.0,
            mean_min_fde: 0.0,
        };
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.model.ablation = mode;
            run_cfg.train.seed = seed;
            run_cfg.eval.seed = seed;
            let run = train(&run_cfg, &train_w, &val_w, |r| on_epoch(mode, seed, r))?;
            let (metrics, _) = evaluate(&run.model, &run.outcome.best_store, &test_w, &run_cfg.eval)?;
            let single = EvalOptions { k: 1, ..run_cfg.eval };
            let (k1, _) = evaluate(&run.model, &run.outcome.best_store, &test_w, &single)?;
            row.param_count = run.model.param_count();
            row.best_epochs.push(run.outcome.best_epoch);
            row.min_ade.push(metrics.min_ade);
            row.min_fde.push(metrics.min_fde);
            row.k1_ade.push(k1.min_ade);
            row.k1_fde.push(k1.min_fde);
        }
        row.mean_min_ade = mean(&row.min_ade);
        row.mean_min_fde = mean(&row.min_fde);
        rows.push(row);
    }
    Ok(AblationReport {
        tool_version: TOOL_VERSION.to_string(),
        dataset: cfg.data.format.name().to_string(),
        units: cfg.data.format.units().to_string(),
        k: cfg.eval.k,
        rows,
        config: cfg.to_text(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("synth_scenes", "6"),
            ("history", "3"),
            ("future", "3"),
            ("pattern", "2"),
            ("synth_length", "6"),
            ("d_h", "8"),
            ("d_x", "4"),
            ("d_z", "4"),
            ("d_p", "4"),
            ("d_s", "4"),
            ("max_epochs", "2"),
            ("val_fraction", "0.34"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let cfg = tiny_cfg();
        let scenes = training_scenes(&cfg, None).unwrap();
        let (a, b) = split_scenes(scenes.clone(), 0.34, 3);
        assert_eq!((a.len(), b.len()), (4, 2));
        let (a2, b2) = split_scenes(scenes.clone(), 0.34, 3);
        assert_eq!((a, b), (a2, b2));
        let (all, none) = split_scenes(scenes, 0.0, 3);
        assert_eq!((all.len(), none.len()), (6, 0));
    }

    #[test]
    fn train_and_restore_round_trip() {
        let cfg = tiny_cfg();
        let (train_w, val_w) = training_windows(&cfg, None).unwrap();
        let run = train(&cfg, &train_w, &val_w, |_| {}).unwrap();
        assert_eq!(run.outcome.log.len(), 2);
        let ck = checkpoint(&cfg, &run.outcome);
        let (cfg2, _, store) = restore(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        for ((a, x), (b, y)) in store.iter().zip(run.outcome.best_store.iter()) {
            assert_eq!((a, x.data()), (b, y.data()));
        }
    }

    #[test]
    fn missing_directory_is_a_data_error() {
        let err = training_scenes(&tiny_cfg(), Some(Path::new("/no/such/dir"))).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("/no/such/dir")));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut cfg = tiny_cfg();
        cfg.set("dim", "3").unwrap();
        let mut scenes = training_scenes(&tiny_cfg(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::data::write_scenes_csv(&dir.path().join("s.csv"), &scenes.drain(..1).collect::<Vec<_>>()).unwrap();
        assert!(matches!(training_scenes(&cfg, Some(dir.path())), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_rows_follow_table_order() {
        let mut cfg = tiny_cfg();
        cfg.set("max_epochs", "1").unwrap();
        cfg.set("k", "2").unwrap();
        cfg.set("synth_eval_scenes", "2").unwrap();
        let report = ablate(&cfg, None, None, &Ablation::ALL, &[0], |_, _, _| {}).unwrap();
        let modes: Vec<&str> = report.rows.iter().map(|r| r.mode.as_str()).collect();
        assert_eq!(modes, ["vrnn", "pat", "pat_soc", "pat_soc_att"]);
        assert!(report.rows[0].param_count < report.rows[3].param_count);
        assert_eq!(report.to_csv().lines().count(), 5);
    }
}
