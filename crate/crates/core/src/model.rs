//! The full predictor: backbone plus optional pattern and social context,
//! with the teacher-forced training pass and the warm-up / rollout
//! inference path.

use std::fmt;
use std::str::FromStr;

use patternrnn_autodiff::{finite_difference_check, GradCheckReport, Graph, OpKind, ParameterStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::context::{ContextConfig, ContextNet, SocialMode};
use crate::data::{make_samples, DatasetConfig, Sample, Scene, SceneAgent};
use crate::error::{Error, Result};
use crate::nn::{init_store, random_store, ParamSpec};
use crate::objective::graph::{gaussian_nll, kl_diag, masked_sum};
use crate::objective::{LossBreakdown, LossWeights};
use crate::rng::{AgentNoise, StreamKey};

/// Which conditioning blocks are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Backbone only, no context.
    Vrnn,
    /// Pattern feature only.
    Pat,
    /// Pattern feature plus averaged social embedding.
    PatSoc,
    /// Pattern feature plus attentive social aggregation.
    PatSocAtt,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Vrnn, Ablation::Pat, Ablation::PatSoc, Ablation::PatSocAtt];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Vrnn => "vrnn",
            Ablation::Pat => "pat",
            Ablation::PatSoc => "pat_soc",
            Ablation::PatSocAtt => "pat_soc_att",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Vrnn => "VRNN",
            Ablation::Pat => "+ PAT",
            Ablation::PatSoc => "+ PAT + SOC",
            Ablation::PatSocAtt => "+ PAT + SOC + ATT",
        }
    }

    pub fn social(self) -> SocialMode {
        match self {
            Ablation::Vrnn | Ablation::Pat => SocialMode::Off,
            Ablation::PatSoc => SocialMode::Mean,
            Ablation::PatSocAtt => SocialMode::Attention,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected vrnn, pat, pat_soc or pat_soc_att)")))
    }
}

/// Where the patterns that feed the context come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternSource {
    /// Ground-truth patterns (teacher forcing).
    Teacher,
    /// The pattern predictor's own outputs.
    Predicted,
}

impl FromStr for PatternSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(PatternSource::Teacher),
            "predicted" => Ok(PatternSource::Predicted),
            other => Err(Error::Config(format!("unknown pattern source `{other}` (expected teacher or predicted)"))),
        }
    }
}

impl fmt::Display for PatternSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternSource::Teacher => "teacher",
            PatternSource::Predicted => "predicted",
        })
    }
}

/// Steps that enter the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainHorizon {
    History,
    Full,
}

impl FromStr for TrainHorizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "history" => Ok(TrainHorizon::History),
            "full" => Ok(TrainHorizon::Full),
            other => Err(Error::Config(format!("unknown train horizon `{other}` (expected history or full)"))),
        }
    }
}

impl fmt::Display for TrainHorizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainHorizon::History => "history",
            TrainHorizon::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub pattern: usize,
    pub d_x: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub d_p: usize,
    pub d_s: usize,
    pub heads: usize,
    pub mlp_depth: usize,
    pub ablation: Ablation,
    pub rnn_context: bool,
    pub prior_context: bool,
    /// Social features at step `k` use sub-goals from step `k − lag`.
    pub influence_lag: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            pattern: 4,
            d_x: 16,
            d_z: 16,
            d_h: 64,
            d_p: 16,
            d_s: 16,
            heads: 4,
            mlp_depth: 2,
            ablation: Ablation::PatSocAtt,
            rnn_context: true,
            prior_context: true,
            influence_lag: 1,
        }
    }
}

impl ModelConfig {
    /// Every width 4, used for gradient checks.
    pub fn tiny(ablation: Ablation) -> Self {
        Self {
            dim: 2,
            pattern: 2,
            d_x: 4,
            d_z: 4,
            d_h: 4,
            d_p: 4,
            d_s: 4,
            heads: 4,
            mlp_depth: 2,
            ablation,
            ..Self::default()
        }
    }

    fn context_config(&self) -> Option<ContextConfig> {
        (self.ablation != Ablation::Vrnn).then(|| ContextConfig {
            dim: self.dim,
            pattern: self.pattern,
            d_p: self.d_p,
            d_s: self.d_s,
            d_h: self.d_h,
            heads: self.heads,
            mlp_depth: self.mlp_depth,
            social: self.ablation.social(),
        })
    }

    pub fn d_c(&self) -> usize {
        self.context_config().map_or(0, |c| c.d_c())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            dim: self.dim,
            d_x: self.d_x,
            d_z: self.d_z,
            d_c: self.d_c(),
            d_h: self.d_h,
            mlp_depth: self.mlp_depth,
            rnn_context: self.rnn_context,
            prior_context: self.prior_context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.influence_lag > 1 {
            return Err(Error::Config(format!("influence_lag must be 0 or 1, got {}", self.influence_lag)));
        }
        self.backbone_config().validate()?;
        if let Some(c) = self.context_config() {
            c.validate()?;
        }
        Ok(())
    }
}

/// Per-step tensors of one sample with agents as rows.
#[derive(Clone, Debug)]
pub struct SceneTensors {
    pub scene_id: String,
    pub window: usize,
    pub agent_ids: Vec<String>,
    pub history: usize,
    /// `[N, D]` displacement into each step.
    pub displacements: Vec<Tensor>,
    /// `[N, P·D]` ground-truth pattern starting at each step.
    pub patterns: Vec<Tensor>,
    /// `[N, D]` position each step's displacement starts from.
    pub anchors: Vec<Tensor>,
    pub present: Vec<Vec<bool>>,
    /// Agents observed over the whole window.
    pub complete: Vec<bool>,
}

impl SceneTensors {
    pub fn from_sample(sample: &Sample) -> Result<Self> {
        let n = sample.agents.len();
        if n == 0 {
            return Err(Error::Invalid(format!("sample {}#{} has no agents", sample.scene_id, sample.window)));
        }
        let steps = sample.steps();
        let absolute: Vec<Vec<Vec<f64>>> = sample.agents.iter().map(|a| a.absolute()).collect();
        let per_step = |f: &dyn Fn(usize, usize) -> Vec<f64>| -> Result<Vec<Tensor>> {
            (0..steps)
                .map(|k| Tensor::from_rows(&(0..n).map(|i| f(i, k)).collect::<Vec<_>>()).map_err(Error::from))
                .collect()
        };
        Ok(Self {
            scene_id: sample.scene_id.clone(),
            window: sample.window,
            agent_ids: sample.agent_ids(),
            history: sample.history,
            displacements: per_step(&|i, k| sample.agents[i].displacements[k].clone())?,
            patterns: per_step(&|i, k| sample.agents[i].gt_patterns[k].clone())?,
            anchors: per_step(&|i, k| absolute[i][k.saturating_sub(1)].clone())?,
            present: (0..steps).map(|k| sample.agents.iter().map(|a| a.present[k]).collect()).collect(),
            complete: sample.agents.iter().map(|a| a.complete).collect(),
        })
    }

    pub fn agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn steps(&self) -> usize {
        self.displacements.len()
    }

    /// Absolute position after `step`.
    pub fn position_after(&self, step: usize) -> Vec<Vec<f64>> {
        let a = &self.anchors[step];
        let d = &self.displacements[step];
        (0..self.agents())
            .map(|i| a.row(i).iter().zip(d.row(i)).map(|(p, v)| p + v).collect())
            .collect()
    }
}

/// Settings of the teacher-forced training pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub horizon: TrainHorizon,
    pub patterns: PatternSource,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            horizon: TrainHorizon::Full,
            patterns: PatternSource::Predicted,
        }
    }
}

/// Graph outputs of one teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherPass {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Pattern predicted at each step from 1 on, empty without context.
    pub predicted: Vec<Var>,
}

/// Recurrent quantities carried between steps inside one graph.
#[derive(Clone, Debug)]
struct Carry {
    h: Var,
    ctx: Option<Var>,
    /// Influence tensor of the previous step and its agent mask.
    snapshot: Option<(Var, Vec<bool>)>,
}

/// Recurrent state between inference steps, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    pub h: Tensor,
    pub ctx: Option<Tensor>,
    pub snapshot: Option<(Tensor, Vec<bool>)>,
    /// Current absolute positions.
    pub positions: Vec<Vec<f64>>,
    /// Agents that take part in social context during rollout.
    pub present: Vec<bool>,
}

impl RolloutState {
    fn load(&self, g: &mut Graph) -> Carry {
        Carry {
            h: g.constant(self.h.clone()),
            ctx: self.ctx.clone().map(|c| g.constant(c)),
            snapshot: self.snapshot.clone().map(|(t, m)| (g.constant(t), m)),
        }
    }

    fn store(&mut self, g: &Graph, carry: &Carry) {
        self.h = g.value(carry.h).clone();
        self.ctx = carry.ctx.map(|c| g.value(c).clone());
        self.snapshot = carry.snapshot.as_ref().map(|(v, m)| (g.value(*v).clone(), m.clone()));
    }
}

/// Per-step outputs of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `[agent][step]` displacements.
    pub displacements: Vec<Vec<Vec<f64>>>,
    /// `[agent][step]` predicted patterns.
    pub patterns: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct SocialPatternModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub context: Option<ContextNet>,
}

impl SocialPatternModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let context = config.context_config().map(ContextNet::new).transpose()?;
        Ok(Self {
            backbone: Backbone::new(config.backbone_config())?,
            context,
            config,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.backbone.specs();
        if let Some(c) = &self.context {
            s.extend(c.specs());
        }
        s
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        init_store(&self.specs(), seed)
    }

    pub fn param_count(&self) -> usize {
        self.specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn check_store(&self, store: &ParameterStore) -> Result<()> {
        let specs = self.specs();
        for s in &specs {
            match store.get(&s.name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {}", s.name))),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, model expects {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = store.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
            return Err(Error::Checkpoint(format!("unknown parameter {extra}")));
        }
        Ok(())
    }

    /// Context for the current step from `pattern`, rolling the social
    /// snapshot forward.
    fn contextualize(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        pattern: Var,
        anchors: &Tensor,
        present: &[bool],
        carry: &mut Carry,
    ) -> Result<Option<Var>> {
        let Some(cn) = &self.context else {
            return Ok(None);
        };
        let pf = cn.extract_pattern_feature(g, store, pattern)?;
        let social = if cn.social_embed.is_some() {
            let current = (cn.influences(g, pattern, anchors)?, present.to_vec());
            let source = match (&carry.snapshot, self.config.influence_lag) {
                (Some(prev), 1) => prev.clone(),
                _ => current.clone(),
            };
            carry.snapshot = Some(current);
            cn.social_feature(g, store, source.0, &source.1)?.map(|s| s.feature)
        } else {
            None
        };
        Ok(Some(cn.build_context(g, pf, social)?))
    }

    fn predict_pattern(&self, g: &mut Graph, store: &ParameterStore, carry: &Carry) -> Result<Option<Var>> {
        match (&self.context, carry.ctx) {
            (Some(cn), Some(ctx)) => Ok(Some(cn.predict_pattern(g, store, ctx, carry.h)?)),
            _ => Ok(None),
        }
    }

    /// Initial carry; `boot` is the pattern the first context is built from.
    fn start(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        scene: &SceneTensors,
        boot: Tensor,
    ) -> Result<Carry> {
        let n = scene.agents();
        let mut carry = Carry {
            h: g.constant(Tensor::zeros(&[n, self.config.d_h])),
            ctx: None,
            snapshot: None,
        };
        if self.context.is_some() {
            let p = g.constant(boot);
            carry.ctx = self.contextualize(g, store, p, &scene.anchors[0], &scene.present[0], &mut carry)?;
        }
        Ok(carry)
    }

    /// Records the teacher-forced loss of one sample and returns the loss
    /// node with its breakdown.
    pub fn teacher_forced_loss(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        scene: &SceneTensors,
        noise: &mut AgentNoise,
        opts: &LossOptions,
    ) -> Result<(Var, LossBreakdown)> {
        let pass = self.teacher_forced(g, store, scene, noise, opts)?;
        Ok((pass.loss, pass.breakdown))
    }

    /// Teacher-forced pass over the training horizon. Latent noise comes
    /// from `noise`, one row per agent and step.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        scene: &SceneTensors,
        noise: &mut AgentNoise,
        opts: &LossOptions,
    ) -> Result<TeacherPass> {
        let end = match opts.horizon {
            TrainHorizon::Full => scene.steps(),
            TrainHorizon::History => scene.history,
        };
        let complete = scene.complete.iter().filter(|&&c| c).count();
        let pairs = complete * end.saturating_sub(1);
        if pairs == 0 {
            return Err(Error::Invalid("no complete agent contributes to the loss".into()));
        }
        let bb = &self.backbone;
        let mut carry = self.start(g, store, scene, scene.patterns[0].clone())?;
        let mut nll_terms = Vec::with_capacity(end);
        let mut kl_terms = Vec::with_capacity(end);
        let mut pat_terms = Vec::with_capacity(end);
        let mut predicted = Vec::with_capacity(end);
        for k in 0..end {
            let x = g.constant(scene.displacements[k].clone());
            let ctx = match self.predict_pattern(g, store, &carry)? {
                Some(pred) => {
                    let truth = g.constant(scene.patterns[k].clone());
                    if k >= 1 {
                        predicted.push(pred);
                        let err = g.sub(pred, truth)?;
                        let sq = g.mul(err, err)?;
                        pat_terms.push(masked_sum(g, sq, &scene.complete)?);
                    }
                    let used = match opts.patterns {
                        PatternSource::Teacher => truth,
                        PatternSource::Predicted => pred,
                    };
                    self.contextualize(g, store, used, &scene.anchors[k], &scene.present[k], &mut carry)?
                }
                None => None,
            };
            let xf = bb.extract_location_feature(g, store, x)?;
            let q = bb.encode_posterior(g, store, xf, ctx, carry.h)?;
            let p = bb.prior(g, store, ctx, carry.h)?;
            let eps = g.constant(noise.draw(self.config.d_z));
            let z = bb.sample_latent(g, q, eps)?;
            let zf = bb.latent_feature(g, store, z)?;
            let dec = bb.decode(g, store, zf, ctx, carry.h)?;
            if k >= 1 {
                let nll = gaussian_nll(g, x, dec)?;
                nll_terms.push(masked_sum(g, nll, &scene.complete)?);
                let kl = kl_diag(g, q, p)?;
                kl_terms.push(masked_sum(g, kl, &scene.complete)?);
            }
            carry.h = bb.rnn_step(g, store, xf, zf, ctx, carry.h)?;
            carry.ctx = ctx;
        }
        let total_of = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
            let mut rows = Vec::with_capacity(terms.len());
            for &t in terms {
                rows.push(g.reshape(t, &[1])?);
            }
            let stacked = g.concat(&rows, 0)?;
            Ok(g.sum(stacked))
        };
        let nll_sum = total_of(g, &nll_terms)?;
        let kl_sum = total_of(g, &kl_terms)?;
        let inv_pairs = 1.0 / pairs as f64;
        let nll = g.scale(nll_sum, inv_pairs);
        let kl = g.scale(kl_sum, inv_pairs);
        let kl_w = g.scale(kl, opts.weights.kl);
        let mut total = g.add(nll, kl_w)?;
        let mut breakdown = LossBreakdown {
            nll: g.item(nll),
            kl: g.item(kl),
            pairs,
            ..LossBreakdown::default()
        };
        if !pat_terms.is_empty() {
            let elements = pairs * self.config.pattern * self.config.dim;
            let pat_sum = total_of(g, &pat_terms)?;
            let pat = g.scale(pat_sum, 1.0 / elements as f64);
            breakdown.pattern_mse = g.item(pat);
            breakdown.pattern_elements = elements;
            let weighted = g.scale(pat, opts.weights.pattern);
            total = g.add(total, weighted)?;
        }
        breakdown.total = g.item(total);
        Ok(TeacherPass {
            loss: total,
            breakdown,
            predicted,
        })
    }

    /// Runs the recurrence over the observed history with ground-truth
    /// displacements and posterior-mean latents.
    pub fn warmup(&self, store: &ParameterStore, scene: &SceneTensors, teacher_patterns: bool) -> Result<RolloutState> {
        let h = scene.history;
        if h == 0 || h > scene.steps() {
            return Err(Error::Invalid(format!("history length {h} outside the window")));
        }
        if !scene.present[h - 1].iter().any(|&p| p) {
            return Err(Error::Invalid("every agent is absent at the end of the history".into()));
        }
        let bb = &self.backbone;
        let mut g = Graph::new();
        let boot = Tensor::zeros(&[scene.agents(), self.config.pattern * self.config.dim]);
        let mut carry = self.start(&mut g, store, scene, boot)?;
        for k in 0..h {
            let x = g.constant(scene.displacements[k].clone());
            let ctx = match self.predict_pattern(&mut g, store, &carry)? {
                Some(pred) => {
                    let used = if teacher_patterns { g.constant(scene.patterns[k].clone()) } else { pred };
                    self.contextualize(&mut g, store, used, &scene.anchors[k], &scene.present[k], &mut carry)?
                }
                None => None,
            };
            let xf = bb.extract_location_feature(&mut g, store, x)?;
            let q = bb.encode_posterior(&mut g, store, xf, ctx, carry.h)?;
            let zf = bb.latent_feature(&mut g, store, q.mu)?;
            carry.h = bb.rnn_step(&mut g, store, xf, zf, ctx, carry.h)?;
            carry.ctx = ctx;
        }
        if !g.value(carry.h).is_finite() {
            return Err(Error::NonFinite("hidden state after warm-up".into()));
        }
        let mut state = RolloutState {
            h: Tensor::scalar(0.0),
            ctx: None,
            snapshot: None,
            positions: scene.position_after(h - 1),
            present: scene.present[h - 1].clone(),
        };
        state.store(&g, &carry);
        Ok(state)
    }

    /// Generates `steps` displacements per agent from a warmed-up state,
    /// sampling latents from the prior and emitting decoder means.
    pub fn rollout(&self, store: &ParameterStore, state: &RolloutState, steps: usize, noise: &mut AgentNoise) -> Result<Rollout> {
        let n = state.positions.len();
        let bb = &self.backbone;
        let mut state = state.clone();
        let mut out = Rollout {
            displacements: vec![Vec::with_capacity(steps); n],
            patterns: vec![Vec::with_capacity(steps); n],
        };
        for step in 0..steps {
            let mut g = Graph::new();
            let mut carry = state.load(&mut g);
            let anchors = Tensor::from_rows(&state.positions)?;
            let ctx = match self.predict_pattern(&mut g, store, &carry)? {
                Some(pred) => {
                    for (i, row) in out.patterns.iter_mut().enumerate() {
                        row.push(g.value(pred).row(i).to_vec());
                    }
                    self.contextualize(&mut g, store, pred, &anchors, &state.present, &mut carry)?
                }
                None => None,
            };
            let prior = bb.prior(&mut g, store, ctx, carry.h)?;
            let eps = g.constant(noise.draw(self.config.d_z));
            let z = bb.sample_latent(&mut g, prior, eps)?;
            let zf = bb.latent_feature(&mut g, store, z)?;
            let dec = bb.decode(&mut g, store, zf, ctx, carry.h)?;
            let x = dec.mu;
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!("rollout displacement at step {step}")));
            }
            let xf = bb.extract_location_feature(&mut g, store, x)?;
            carry.h = bb.rnn_step(&mut g, store, xf, zf, ctx, carry.h)?;
            carry.ctx = ctx;
            if !g.value(carry.h).is_finite() {
                return Err(Error::NonFinite(format!("hidden state at rollout step {step}")));
            }
            for i in 0..n {
                let d = g.value(x).row(i).to_vec();
                state.positions[i].iter_mut().zip(&d).for_each(|(p, v)| *p += v);
                out.displacements[i].push(d);
            }
            state.store(&g, &carry);
        }
        Ok(out)
    }
}

/// Two interacting agents over a five-frame window with `H = 3`, `F = 2`
/// and `P = 2`.
pub fn gradcheck_sample() -> Sample {
    let t = 5;
    let agents = (0..2)
        .map(|i| {
            let positions = (0..t)
                .map(|k| {
                    let k = k as f64;
                    vec![0.3 * k + i as f64, (0.7 * k + i as f64).sin()]
                })
                .collect();
            SceneAgent {
                agent_id: format!("a{i}"),
                positions,
                mask: vec![true; t],
            }
        })
        .collect();
    let scene = Scene {
        scene_id: "gradcheck".into(),
        dim: 2,
        frames: (0..t as i64).collect(),
        agents,
    };
    let cfg = DatasetConfig {
        history: 3,
        future: 2,
        pattern: 2,
        stride: 5,
        ..Default::default()
    };
    make_samples(&scene, &cfg)
        .expect("fixture window fits")
        .remove(0)
}

/// Compares the analytic gradient of the full training loss of the tiny
/// model against central differences. `faults` corrupt the analytic pass.
pub fn gradcheck(ablation: Ablation, patterns: PatternSource, faults: &[(OpKind, f64)]) -> Result<GradCheckReport> {
    let scene = SceneTensors::from_sample(&gradcheck_sample())?;
    let model = SocialPatternModel::new(ModelConfig::tiny(ablation))?;
    let store = random_store(&model.specs(), 11, 0.8)?;
    let key = StreamKey::new("gradcheck", 0);
    let opts = LossOptions {
        patterns,
        ..LossOptions::default()
    };
    finite_difference_check::<Error, _>(&store, 1e-5, faults, |g, s| {
        let mut noise = AgentNoise::new(&key, &scene.agent_ids);
        Ok(model.teacher_forced_loss(g, s, &scene, &mut noise, &opts)?.0)
    })
}
