//! Optimisation loop: Adam, global-norm clipping, early stopping and the
//! epoch driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use patternrnn_autodiff::{Graph, ParameterStore};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LossOptions, PatternSource, SceneTensors, SocialPatternModel, TrainHorizon};
use crate::objective::{LossBreakdown, LossWeights};
use crate::rng::{AgentNoise, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    /// Zero moments for every parameter of `store`.
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = store.iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect();
        Self {
            config,
            state: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState) -> Self {
        Self { config, state }
    }

    /// One bias-corrected update of every parameter from its gradient.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Invalid(format!("missing gradient for {name}")));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, param) in store.iter_mut() {
            let grad = param.grad().expect("checked above").to_vec();
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the metric has not strictly improved for `patience` epochs.
/// Epochs up to `warmup` always replace the best, since the training
/// objective is still changing under them.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    warmup: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self::with_warmup(patience, 0)
    }

    pub fn with_warmup(patience: usize, warmup: usize) -> Self {
        Self {
            patience,
            warmup,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = match self.best {
            _ if epoch <= self.warmup => metric.is_finite(),
            None => metric.is_finite(),
            Some((_, best)) => metric < best,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    /// Epoch and value of the best metric so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Replays a metric history (epoch 1 first); returns the epoch at which
/// training stops, if any, and the best epoch.
pub fn early_stop(history: &[f64], patience: usize) -> (Option<usize>, Option<usize>) {
    let mut rule = EarlyStopping::new(patience);
    for (i, &m) in history.iter().enumerate() {
        if rule.observe(i + 1, m) == StopDecision::Stop {
            return (Some(i + 1), rule.best().map(|b| b.0));
        }
    }
    (None, rule.best().map(|b| b.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Scenes per optimiser step.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Linear ramp of the KL weight over this many epochs; 0 disables it.
    pub kl_warmup_epochs: usize,
    pub horizon: TrainHorizon,
    pub patterns: PatternSource,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 1000,
            batch_size: 32,
            clip_norm: 10.0,
            patience: 10,
            seed: 0,
            weights: LossWeights::default(),
            kl_warmup_epochs: 0,
            horizon: TrainHorizon::Full,
            patterns: PatternSource::Predicted,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return bad("patience, batch_size and max_epochs must be >= 1".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.weights.kl >= 0.0 && self.weights.pattern >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }

    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if self.kl_warmup_epochs == 0 {
            self.weights.kl
        } else {
            self.weights.kl * (epoch as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }

    fn loss_options(&self, epoch: usize) -> LossOptions {
        LossOptions {
            weights: LossWeights {
                kl: self.kl_weight(epoch),
                pattern: self.weights.pattern,
            },
            horizon: self.horizon,
            patterns: self.patterns,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: LossBreakdown,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub batches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub grad_norm: f64,
    pub improved: bool,
}

impl EpochRecord {
    /// The early-stopping metric.
    pub fn metric(&self) -> f64 {
        self.val.map_or(self.train.total, |v| v.total)
    }
}

pub const LOSS_LOG_HEADER: &str =
    "epoch,train_total,train_nll,train_kl,train_pattern_mse,val_total,val_nll,val_kl,val_pattern_mse,grad_norm,improved";

/// CSV loss log, one row per epoch.
pub fn loss_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for r in records {
        let t = r.train;
        let _ = write!(out, "{},{},{},{},{}", r.epoch, t.total, t.nll, t.kl, t.pattern_mse);
        match r.val {
            Some(v) => {
                let _ = write!(out, ",{},{},{},{}", v.total, v.nll, v.kl, v.pattern_mse);
            }
            None => out.push_str(",,,,"),
        }
        let _ = writeln!(out, ",{},{}", r.grad_norm, r.improved);
    }
    out
}

/// Parameters and optimiser state at the best epoch, plus the full log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_store: ParameterStore,
    pub best_adam: AdamState,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub struct Trainer<'m> {
    pub model: &'m SocialPatternModel,
    pub config: TrainConfig,
    pub store: ParameterStore,
    pub adam: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m SocialPatternModel, config: TrainConfig, store: ParameterStore) -> Result<Self> {
        model.check_store(&store)?;
        let adam = Adam::new(config.adam, &store);
        Ok(Self {
            model,
            config,
            store,
            adam,
            epoch: 0,
        })
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &[SceneTensors]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        self.epoch += 1;
        let epoch = self.epoch;
        let opts = self.config.loss_options(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut StreamKey::new("shuffle", self.config.seed).with_u64(epoch as u64).rng());
        let mut losses = Vec::with_capacity(data.len());
        let mut norm_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            self.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in *batch {
                let scene = &data[i];
                let key = StreamKey::new("train", self.config.seed)
                    .with_u64(epoch as u64)
                    .with_str(&scene.scene_id)
                    .with_u64(scene.window as u64);
                let mut noise = AgentNoise::new(&key, &scene.agent_ids);
                let mut g = Graph::new();
                let (loss, breakdown) = self.model.teacher_forced_loss(&mut g, &self.store, scene, &mut noise, &opts)?;
                if !breakdown.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch} batch {b} sample {}#{}: nll={} kl={} pattern_mse={} total={}",
                        scene.scene_id, scene.window, breakdown.nll, breakdown.kl, breakdown.pattern_mse, breakdown.total
                    )));
                }
                let scaled = g.scale(loss, scale);
                g.backward_into(scaled, &mut self.store)?;
                losses.push(breakdown);
            }
            let norm = clip_grad_norm(&mut self.store, self.config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch} batch {b}: gradient norm {norm}")));
            }
            norm_sum += norm;
            self.adam.step(&mut self.store, self.config.lr)?;
        }
        Ok(EpochStats {
            loss: LossBreakdown::average(&losses),
            grad_norm: norm_sum / batches.len() as f64,
            batches: batches.len(),
        })
    }

    /// Mean loss over `data` with fixed noise and the full KL weight.
    pub fn evaluate_loss(&self, data: &[SceneTensors]) -> Result<LossBreakdown> {
        validation_loss(self.model, &self.store, &self.config, data)
    }

    /// Trains until `max_epochs` or early stopping. `on_epoch` sees every
    /// record as it is produced.
    pub fn fit(
        mut self,
        train: &[SceneTensors],
        val: &[SceneTensors],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome> {
        self.config.validate()?;
        let mut stopper = EarlyStopping::with_warmup(self.config.patience, self.config.kl_warmup_epochs);
        let mut best = (self.store.clone(), self.adam.state.clone());
        let mut log = Vec::new();
        let mut stopped_early = false;
        while self.epoch < self.config.max_epochs {
            let stats = self.train_epoch(train)?;
            let val_loss = if val.is_empty() { None } else { Some(self.evaluate_loss(val)?) };
            let mut record = EpochRecord {
                epoch: self.epoch,
                train: stats.loss,
                val: val_loss,
                grad_norm: stats.grad_norm,
                improved: false,
            };
            let decision = stopper.observe(record.epoch, record.metric());
            record.improved = decision == StopDecision::Improved;
            if record.improved {
                best = (self.store.clone(), self.adam.state.clone());
            }
            on_epoch(&record);
            log.push(record);
            if decision == StopDecision::Stop {
                stopped_early = true;
                break;
            }
        }
        let (best_epoch, best_metric) = stopper
            .best()
            .ok_or_else(|| Error::NonFinite("no epoch produced a finite metric".into()))?;
        Ok(TrainOutcome {
            best_store: best.0,
            best_adam: best.1,
            best_epoch,
            best_metric,
            log,
            stopped_early,
        })
    }
}

/// Mean teacher-forced loss with per-sample noise fixed by `config.seed`.
/// Samples are scored in parallel and averaged in input order.
pub fn validation_loss(
    model: &SocialPatternModel,
    store: &ParameterStore,
    config: &TrainConfig,
    data: &[SceneTensors],
) -> Result<LossBreakdown> {
    let opts = LossOptions {
        weights: config.weights,
        ..config.loss_options(0)
    };
    let losses = data
        .par_iter()
        .map(|scene| {
            let key = StreamKey::new("val", config.seed)
                .with_str(&scene.scene_id)
                .with_u64(scene.window as u64);
            let mut noise = AgentNoise::new(&key, &scene.agent_ids);
            let mut g = Graph::new();
            Ok(model.teacher_forced_loss(&mut g, store, scene, &mut noise, &opts)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::average(&losses))
}
