//! Flat `key = value` run configuration covering data, model, training and
//! evaluation settings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::synth::{PatternRule, SynthSpec};
use crate::data::{DatasetConfig, DatasetFormat};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{ModelConfig, PatternSource, TrainHorizon};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Window stride 0 means one window length.
    pub data: DatasetConfig,
    pub dim: usize,
    pub synth: SynthSpec,
    pub synth_seed: u64,
    pub synth_eval_seed: u64,
    pub synth_eval_scenes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DatasetConfig {
                stride: 0,
                ..DatasetConfig::default()
            },
            dim: 2,
            synth: SynthSpec::default(),
            synth_seed: 0,
            synth_eval_seed: 1,
            synth_eval_scenes: 32,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Every configuration key with its description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("format", "dataset layout: trajair, sdd, nba or synth"),
    ("dim", "spatial dimension of positions, 2 or 3"),
    ("history", "observed steps per window"),
    ("future", "predicted steps per window"),
    ("pattern", "motion pattern length in steps"),
    ("stride", "window stride in steps; 0 uses history + future"),
    ("min_agents", "drop windows with fewer fully observed agents"),
    ("downsample", "keep every n-th frame of the native grid"),
    ("units_scale", "multiplier applied to loaded coordinates"),
    ("val_fraction", "fraction of scenes held out for early stopping"),
    ("synth_agents", "synthetic agents per scene"),
    ("synth_scenes", "synthetic training scenes"),
    ("synth_length", "frames per synthetic scene"),
    ("synth_rule", "synthetic motion rule: straight, circuit or weave"),
    ("synth_speed_min", "lowest synthetic speed per step"),
    ("synth_speed_max", "highest synthetic speed per step"),
    ("synth_heading_noise", "standard deviation of per-step heading noise, radians"),
    ("synth_repulsion_radius", "distance below which synthetic agents repel"),
    ("synth_repulsion_strength", "repulsion displacement at zero distance"),
    ("synth_circuit_width", "circuit extent along x"),
    ("synth_circuit_height", "circuit extent along y"),
    ("synth_weave_amplitude", "weave heading amplitude, radians"),
    ("synth_weave_period", "weave period in steps"),
    ("synth_spawn_extent", "side of the square straight and weave agents spawn in"),
    ("synth_climb_max", "largest vertical rate of 3-D straight and weave agents"),
    ("synth_seed", "seed of the synthetic training scenes"),
    ("synth_eval_seed", "seed of the synthetic evaluation scenes"),
    ("synth_eval_scenes", "synthetic evaluation scenes"),
    ("d_x", "location feature width"),
    ("d_z", "latent width"),
    ("d_h", "recurrent state width"),
    ("d_p", "pattern feature width"),
    ("d_s", "social feature width"),
    ("heads", "attention heads; must divide d_s"),
    ("mlp_depth", "layers per feature and head network"),
    ("ablation", "conditioning blocks: vrnn, pat, pat_soc or pat_soc_att"),
    ("rnn_context", "feed the context feature into the recurrent update"),
    ("prior_context", "condition the prior on the context feature"),
    ("influence_lag", "steps between sub-goal prediction and its social use, 0 or 1"),
    ("train_patterns", "patterns feeding the context in training: teacher or predicted"),
    ("warmup_teacher_patterns", "use ground-truth patterns while warming up on the history"),
    ("lr", "Adam learning rate"),
    ("max_epochs", "upper bound on training epochs"),
    ("batch_size", "scenes per optimiser step"),
    ("clip_norm", "global gradient norm bound"),
    ("patience", "epochs without validation improvement before stopping"),
    ("seed", "seed of initialisation, shuffling, latent noise and sampling"),
    ("kl_weight", "weight of the KL term"),
    ("pattern_weight", "weight of the pattern loss"),
    ("kl_warmup_epochs", "epochs of linear KL weight ramp; 0 disables"),
    ("train_horizon", "steps in the training loss: history or full"),
    ("beta1", "Adam first moment decay"),
    ("beta2", "Adam second moment decay"),
    ("adam_eps", "Adam denominator offset"),
    ("k", "sampled futures per agent for best-of-K metrics"),
    ("joint_best", "score ADE and FDE on one jointly best sample"),
    ("noise_scale", "multiplier on latent noise at sampling time"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for {key}: {e}")))
}

impl RunConfig {
    /// Defaults with the window profile of one dataset layout.
    pub fn for_format(format: DatasetFormat) -> Self {
        let mut cfg = Self::default();
        cfg.data.format = format;
        let d = &mut cfg.data;
        match format {
            DatasetFormat::Sdd => (d.history, d.future, d.pattern) = (8, 12, 6),
            DatasetFormat::Nba => (d.history, d.future, d.pattern) = (10, 40, 8),
            DatasetFormat::TrajAir => {
                (d.history, d.future, d.pattern) = (8, 20, 4);
                d.downsample = 5;
                d.min_agents = 4;
                cfg.dim = 3;
            }
            DatasetFormat::Synth => {}
        }
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.data;
        let s = &mut self.synth;
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "format" => d.format = v.parse()?,
            "dim" => self.dim = parse(key, v)?,
            "history" => d.history = parse(key, v)?,
            "future" => d.future = parse(key, v)?,
            "pattern" => d.pattern = parse(key, v)?,
            "stride" => d.stride = parse(key, v)?,
            "min_agents" => d.min_agents = parse(key, v)?,
            "downsample" => d.downsample = parse(key, v)?,
            "units_scale" => d.units_scale = parse(key, v)?,
            "val_fraction" => d.val_fraction = parse(key, v)?,
            "synth_agents" => s.agents = parse(key, v)?,
            "synth_scenes" => s.scenes = parse(key, v)?,
            "synth_length" => s.length = parse(key, v)?,
            "synth_rule" => s.rule = v.parse::<PatternRule>()?,
            "synth_speed_min" => s.speed_min = parse(key, v)?,
            "synth_speed_max" => s.speed_max = parse(key, v)?,
            "synth_heading_noise" => s.heading_noise = parse(key, v)?,
            "synth_repulsion_radius" => s.repulsion_radius = parse(key, v)?,
            "synth_repulsion_strength" => s.repulsion_strength = parse(key, v)?,
            "synth_circuit_width" => s.circuit_width = parse(key, v)?,
            "synth_circuit_height" => s.circuit_height = parse(key, v)?,
            "synth_weave_amplitude" => s.weave_amplitude = parse(key, v)?,
            "synth_weave_period" => s.weave_period = parse(key, v)?,
            "synth_spawn_extent" => s.spawn_extent = parse(key, v)?,
            "synth_climb_max" => s.climb_max = parse(key, v)?,
            "synth_seed" => self.synth_seed = parse(key, v)?,
            "synth_eval_seed" => self.synth_eval_seed = parse(key, v)?,
            "synth_eval_scenes" => self.synth_eval_scenes = parse(key, v)?,
            "d_x" => m.d_x = parse(key, v)?,
            "d_z" => m.d_z = parse(key, v)?,
            "d_h" => m.d_h = parse(key, v)?,
            "d_p" => m.d_p = parse(key, v)?,
            "d_s" => m.d_s = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "mlp_depth" => m.mlp_depth = parse(key, v)?,
            "ablation" => m.ablation = v.parse()?,
            "rnn_context" => m.rnn_context = parse(key, v)?,
            "prior_context" => m.prior_context = parse(key, v)?,
            "influence_lag" => m.influence_lag = parse(key, v)?,
            "train_patterns" => t.patterns = v.parse::<PatternSource>()?,
            "warmup_teacher_patterns" => e.warmup_teacher_patterns = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "seed" => {
                t.seed = parse(key, v)?;
                e.seed = t.seed;
            }
            "kl_weight" => t.weights.kl = parse(key, v)?,
            "pattern_weight" => t.weights.pattern = parse(key, v)?,
            "kl_warmup_epochs" => t.kl_warmup_epochs = parse(key, v)?,
            "train_horizon" => t.horizon = v.parse::<TrainHorizon>()?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "k" => e.k = parse(key, v)?,
            "joint_best" => e.joint_best = parse(key, v)?,
            "noise_scale" => e.noise_scale = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let s = &self.synth;
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        Some(match key {
            "format" => d.format.to_string(),
            "dim" => self.dim.to_string(),
            "history" => d.history.to_string(),
            "future" => d.future.to_string(),
            "pattern" => d.pattern.to_string(),
            "stride" => d.stride.to_string(),
            "min_agents" => d.min_agents.to_string(),
            "downsample" => d.downsample.to_string(),
            "units_scale" => d.units_scale.to_string(),
            "val_fraction" => d.val_fraction.to_string(),
            "synth_agents" => s.agents.to_string(),
            "synth_scenes" => s.scenes.to_string(),
            "synth_length" => s.length.to_string(),
            "synth_rule" => s.rule.to_string(),
            "synth_speed_min" => s.speed_min.to_string(),
            "synth_speed_max" => s.speed_max.to_string(),
            "synth_heading_noise" => s.heading_noise.to_string(),
            "synth_repulsion_radius" => s.repulsion_radius.to_string(),
            "synth_repulsion_strength" => s.repulsion_strength.to_string(),
            "synth_circuit_width" => s.circuit_width.to_string(),
            "synth_circuit_height" => s.circuit_height.to_string(),
            "synth_weave_amplitude" => s.weave_amplitude.to_string(),
            "synth_weave_period" => s.weave_period.to_string(),
            "synth_spawn_extent" => s.spawn_extent.to_string(),
            "synth_climb_max" => s.climb_max.to_string(),
            "synth_seed" => self.synth_seed.to_string(),
            "synth_eval_seed" => self.synth_eval_seed.to_string(),
            "synth_eval_scenes" => self.synth_eval_scenes.to_string(),
            "d_x" => m.d_x.to_string(),
            "d_z" => m.d_z.to_string(),
            "d_h" => m.d_h.to_string(),
            "d_p" => m.d_p.to_string(),
            "d_s" => m.d_s.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_depth" => m.mlp_depth.to_string(),
            "ablation" => m.ablation.to_string(),
            "rnn_context" => m.rnn_context.to_string(),
            "prior_context" => m.prior_context.to_string(),
            "influence_lag" => m.influence_lag.to_string(),
            "train_patterns" => t.patterns.to_string(),
            "warmup_teacher_patterns" => e.warmup_teacher_patterns.to_string(),
            "lr" => t.lr.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "patience" => t.patience.to_string(),
            "seed" => t.seed.to_string(),
            "kl_weight" => t.weights.kl.to_string(),
            "pattern_weight" => t.weights.pattern.to_string(),
            "kl_warmup_epochs" => t.kl_warmup_epochs.to_string(),
            "train_horizon" => t.horizon.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "k" => e.k.to_string(),
            "joint_best" => e.joint_best.to_string(),
            "noise_scale" => e.noise_scale.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            self.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Reads a config file; keys it omits keep the profile of its
    /// `format`, or the synthetic defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let format = text
            .lines()
            .filter_map(|l| l.split('#').next()?.split_once('='))
            .find(|(k, _)| k.trim() == "format")
            .map(|(_, v)| v.trim().parse::<DatasetFormat>())
            .transpose()?
            .unwrap_or(DatasetFormat::Synth);
        let mut cfg = Self::for_format(format);
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key in file order, fully determining the run.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Help text listing each key, its default and its meaning.
    pub fn describe_keys() -> String {
        let defaults = Self::default();
        let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "  {key:width$}  {doc} (default {})", defaults.get(key).expect("listed key"));
        }
        out
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut d = self.data.clone();
        if d.stride == 0 {
            d.stride = d.window();
        }
        d
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            dim: self.dim,
            ..self.synth.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            pattern: self.data.pattern,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::Config(format!("dim must be 2 or 3, got {}", self.dim)));
        }
        self.dataset_config().validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.eval.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.eval.noise_scale.is_finite() && self.eval.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be finite and >= 0".into()));
        }
        if self.data.format == DatasetFormat::Synth {
            self.synth_spec().validate()?;
            if self.synth_eval_scenes < 1 {
                return Err(Error::Config("synth_eval_scenes must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut cfg = RunConfig::for_format(DatasetFormat::TrajAir);
        cfg.set("lr", "0.0025").unwrap();
        cfg.set("ablation", "pat_soc").unwrap();
        cfg.set("train_patterns", "teacher").unwrap();
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len());
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let err = RunConfig::from_text("learning_rate = 1").unwrap_err().to_string();
        assert!(err.contains("unknown config key `learning_rate`"), "{err}");
        assert!(RunConfig::from_text("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::from_text("seed").is_err());
        assert!(RunConfig::from_text("seed = x").is_err());
    }

    #[test]
    fn comments_and_profiles() {
        let cfg = RunConfig::from_text("# nba run\nformat = nba  # court\n\nseed = 4\n").unwrap();
        assert_eq!((cfg.data.history, cfg.data.future, cfg.data.pattern), (10, 40, 8));
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.eval.seed, 4);
        let sdd = RunConfig::for_format(DatasetFormat::Sdd);
        assert_eq!((sdd.data.history, sdd.data.future, sdd.data.pattern), (8, 12, 6));
        let air = RunConfig::for_format(DatasetFormat::TrajAir);
        assert_eq!((air.data.downsample, air.data.min_agents, air.dim), (5, 4, 3));
    }

    #[test]
    fn every_key_is_documented_and_valid_by_default() {
        let help = RunConfig::describe_keys();
        for (key, _) in KEYS {
            assert!(help.contains(key));
        }
        RunConfig::default().validate().unwrap();
        for f in [DatasetFormat::Sdd, DatasetFormat::Nba, DatasetFormat::TrajAir] {
            RunConfig::for_format(f).validate().unwrap();
        }
        assert_eq!(RunConfig::default().dataset_config().stride, 20);
    }

    #[test]
    fn derived_model_dimensions() {
        let mut cfg = RunConfig::default();
        cfg.set("dim", "3").unwrap();
        cfg.set("pattern", "6").unwrap();
        let m = cfg.model_config();
        assert_eq!((m.dim, m.pattern), (3, 6));
        cfg.set("heads", "5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
