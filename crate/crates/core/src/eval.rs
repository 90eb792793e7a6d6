//! Best-of-K sampling, displacement metrics and prediction export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use patternrnn_autodiff::ParameterStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{reconstruct, Sample};
use crate::error::{Error, Result};
use crate::model::{SceneTensors, SocialPatternModel};
use crate::rng::{AgentNoise, StreamKey};

pub const TOOL_VERSION: &str = concat!("patternrnn ", env!("CARGO_PKG_VERSION"));

fn check_shapes(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<()> {
    let same = pred.len() == gt.len() && pred.iter().zip(gt).all(|(p, g)| p.len() == g.len());
    if !same || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "prediction has {} steps, ground truth {}; shapes must match and be non-empty",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over steps.
pub fn ade(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| distance(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Euclidean distance at the last step.
pub fn fde(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(distance(&pred[pred.len() - 1], &gt[gt.len() - 1]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub seed: u64,
    pub noise_scale: f64,
    /// Score ADE and FDE on the single sample with the lowest ADE.
    pub joint_best: bool,
    pub warmup_teacher_patterns: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 20,
            seed: 0,
            noise_scale: 1.0,
            joint_best: false,
            warmup_teacher_patterns: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentPrediction {
    pub agent_id: String,
    /// Fully observed over the window; only these agents are scored.
    pub complete: bool,
    /// Absolute history positions.
    pub history: Vec<Vec<f64>>,
    /// Absolute ground-truth future.
    pub truth: Vec<Vec<f64>>,
    /// `[k][step]` absolute predicted futures.
    pub samples: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub scene_id: String,
    pub window: usize,
    pub agents: Vec<AgentPrediction>,
}

impl PredictionSet {
    /// Ground truth of `sample` with no predictions yet.
    pub fn empty(sample: &Sample) -> Self {
        let h = sample.history;
        let agents = sample
            .agents
            .iter()
            .map(|a| {
                let abs = a.absolute();
                AgentPrediction {
                    agent_id: a.agent_id.clone(),
                    complete: a.complete,
                    history: abs[..h].to_vec(),
                    truth: abs[h..].to_vec(),
                    samples: Vec::new(),
                }
            })
            .collect();
        Self {
            scene_id: sample.scene_id.clone(),
            window: sample.window,
            agents,
        }
    }
}

/// Noise stream of rollout `k` of one window.
pub fn rollout_key(seed: u64, scene_id: &str, window: usize, k: usize) -> StreamKey {
    StreamKey::new("rollout", seed)
        .with_str(scene_id)
        .with_u64(window as u64)
        .with_u64(k as u64)
}

/// Warms up once on the history and draws `opts.k` futures, each from its
/// own noise stream.
pub fn sample_k(model: &SocialPatternModel, store: &ParameterStore, sample: &Sample, opts: &EvalOptions) -> Result<PredictionSet> {
    if opts.k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let scene = SceneTensors::from_sample(sample)?;
    let state = model.warmup(store, &scene, opts.warmup_teacher_patterns)?;
    let mut set = PredictionSet::empty(sample);
    for k in 0..opts.k {
        let key = rollout_key(opts.seed, &sample.scene_id, sample.window, k);
        let mut noise = AgentNoise::new(&key, &scene.agent_ids).with_scale(opts.noise_scale);
        let rollout = model.rollout(store, &state, sample.future, &mut noise)?;
        for ((agent, disp), start) in set.agents.iter_mut().zip(&rollout.displacements).zip(&state.positions) {
            let mut path = reconstruct(start, disp);
            path.remove(0);
            agent.samples.push(path);
        }
    }
    Ok(set)
}

/// Best-of-K errors of one agent.
pub fn best_of_k(samples: &[Vec<Vec<f64>>], truth: &[Vec<f64>], joint_best: bool) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Invalid("no predicted samples".into()));
    }
    let scores = samples
        .iter()
        .map(|s| Ok((ade(s, truth)?, fde(s, truth)?)))
        .collect::<Result<Vec<(f64, f64)>>>()?;
    if joint_best {
        let best = scores.iter().copied().fold((f64::INFINITY, f64::INFINITY), |b, s| if s.0 < b.0 { s } else { b });
        return Ok(best);
    }
    Ok(scores.iter().fold((f64::INFINITY, f64::INFINITY), |(a, f), s| (a.min(s.0), f.min(s.1))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub min_ade: f64,
    pub min_fde: f64,
    /// Scored (agent, window) pairs.
    pub agent_windows: usize,
    pub windows: usize,
}

/// Means of best-of-K errors over every complete agent-window.
pub fn score(sets: &[PredictionSet], joint_best: bool) -> Result<Metrics> {
    let mut ade_sum = 0.0;
    let mut fde_sum = 0.0;
    let mut count = 0;
    for set in sets {
        for agent in set.agents.iter().filter(|a| a.complete) {
            let (a, f) = best_of_k(&agent.samples, &agent.truth, joint_best).map_err(|e| {
                Error::Invalid(format!("{}#{} agent {}: {e}", set.scene_id, set.window, agent.agent_id))
            })?;
            ade_sum += a;
            fde_sum += f;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no complete agent-window to evaluate".into()));
    }
    Ok(Metrics {
        min_ade: ade_sum / count as f64,
        min_fde: fde_sum / count as f64,
        agent_windows: count,
        windows: sets.len(),
    })
}

/// Samples every window in parallel and scores the predictions.
pub fn evaluate(
    model: &SocialPatternModel,
    store: &ParameterStore,
    samples: &[Sample],
    opts: &EvalOptions,
) -> Result<(Metrics, Vec<PredictionSet>)> {
    if samples.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let sets = samples
        .par_iter()
        .map(|s| sample_k(model, store, s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((score(&sets, opts.joint_best)?, sets))
}

/// JSON evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tool_version: String,
    pub dataset: String,
    pub units: String,
    pub ablation: String,
    pub k: usize,
    pub seed: u64,
    pub joint_best: bool,
    pub min_ade: f64,
    pub min_fde: f64,
    pub agent_windows: usize,
    pub windows: usize,
    /// How per-agent errors are pooled.
    pub averaging: String,
    pub config: String,
}

impl MetricsReport {
    pub fn new(metrics: Metrics, dataset: &str, units: &str, ablation: &str, opts: &EvalOptions, config: String) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            dataset: dataset.to_string(),
            units: units.to_string(),
            ablation: ablation.to_string(),
            k: opts.k,
            seed: opts.seed,
            joint_best: opts.joint_best,
            min_ade: metrics.min_ade,
            min_fde: metrics.min_fde,
            agent_windows: metrics.agent_windows,
            windows: metrics.windows,
            averaging: "mean over complete agent-windows".to_string(),
            config,
        }
    }
}

/// Predictions as `scene_id,window,agent_id,k,t,x,y[,z]` with `t` the
/// future step counted from 1.
pub fn predictions_csv(sets: &[PredictionSet]) -> Result<String> {
    let dim = sets
        .iter()
        .flat_map(|s| &s.agents)
        .find_map(|a| a.truth.first().map(Vec::len))
        .unwrap_or(2);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["scene_id", "window", "agent_id", "k", "t", "x", "y"];
    if dim == 3 {
        header.push("z");
    }
    let csv_err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for set in sets {
        for a in &set.agents {
            for (k, path) in a.samples.iter().enumerate() {
                for (t, p) in path.iter().enumerate() {
                    let mut row = vec![set.scene_id.clone(), set.window.to_string(), a.agent_id.clone(), k.to_string(), (t + 1).to_string()];
                    row.extend(p.iter().map(|v| v.to_string()));
                    w.write_record(&row).map_err(csv_err)?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// `(scene_id, window, agent_id)` to `[k][step]` positions.
pub type PredictionTable = BTreeMap<(String, usize, String), Vec<Vec<Vec<f64>>>>;

/// Parses a file written by [`predictions_csv`].
pub fn read_predictions_csv(path: &Path) -> Result<PredictionTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let bad = |line: u64, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut table = PredictionTable::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        if rec.len() < 7 {
            return Err(bad(line, format!("expected at least 7 fields, got {}", rec.len())));
        }
        let int = |j: usize| rec[j].trim().parse::<usize>().map_err(|e| bad(line, format!("field {j}: {e}")));
        let (window, k, t) = (int(1)?, int(3)?, int(4)?);
        if t == 0 {
            return Err(bad(line, "t counts future steps from 1".into()));
        }
        let point = (5..rec.len())
            .map(|j| rec[j].trim().parse::<f64>().map_err(|e| bad(line, format!("field {j}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let entry = table.entry((rec[0].to_string(), window, rec[2].to_string())).or_default();
        if entry.len() <= k {
            entry.resize(k + 1, Vec::new());
        }
        let path_k = &mut entry[k];
        if path_k.len() < t {
            path_k.resize(t, Vec::new());
        }
        path_k[t - 1] = point;
    }
    Ok(table)
}

/// Ground truth of `samples` paired with externally supplied predictions.
pub fn attach_predictions(samples: &[Sample], table: &PredictionTable) -> Result<Vec<PredictionSet>> {
    samples
        .iter()
        .map(|s| {
            let mut set = PredictionSet::empty(s);
            for a in set.agents.iter_mut().filter(|a| a.complete) {
                let key = (set.scene_id.clone(), set.window, a.agent_id.clone());
                a.samples = table.get(&key).cloned().ok_or_else(|| {
                    Error::Data(format!("no prediction for scene {} window {} agent {}", key.0, key.1, key.2))
                })?;
            }
            Ok(set)
        })
        .collect()
}

/// Single-file SVG of history (black), ground truth (green) and sampled
/// futures (blue) projected on the first two axes.
pub fn render_svg(set: &PredictionSet) -> String {
    const SIZE: f64 = 600.0;
    const MARGIN: f64 = 20.0;
    let points = set
        .agents
        .iter()
        .flat_map(|a| a.history.iter().chain(&a.truth).chain(a.samples.iter().flatten()));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let project = |p: &[f64]| (MARGIN + (p[0] - lo[0]) * scale, SIZE - MARGIN - (p[1] - lo[1]) * scale);
    let polyline = |out: &mut String, path: &[Vec<f64>], style: &str| {
        let pts: Vec<String> = path
            .iter()
            .map(|p| {
                let (x, y) = project(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, pts.join(" "));
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, "<title>{} window {}</title>", set.scene_id, set.window);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for a in &set.agents {
        let anchor = a.history.last().cloned();
        for s in &a.samples {
            let path: Vec<Vec<f64>> = anchor.iter().cloned().chain(s.iter().cloned()).collect();
            polyline(&mut out, &path, r##"stroke="#1f5fbf" stroke-opacity="0.35" stroke-width="1""##);
        }
        let truth: Vec<Vec<f64>> = anchor.iter().cloned().chain(a.truth.iter().cloned()).collect();
        polyline(&mut out, &truth, r##"stroke="#1a9641" stroke-width="2""##);
        polyline(&mut out, &a.history, r##"stroke="black" stroke-width="2""##);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gradcheck_sample, Ablation, ModelConfig};

    #[test]
    fn displacement_metrics() {
        let gt = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.5]];
        assert_eq!(ade(&gt, &gt).unwrap(), 0.0);
        assert_eq!(fde(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = gt.iter().map(|p| vec![p[0] + 3.0, p[1] + 4.0]).collect();
        assert_eq!(ade(&shifted, &gt).unwrap(), 5.0);
        assert_eq!(fde(&shifted, &gt).unwrap(), 5.0);
        assert!(ade(&gt[..2], &gt).is_err());
    }

    #[test]
    fn metrics_match_a_step_loop() {
        let pred = vec![vec![0.5, -1.0], vec![2.0, 2.0], vec![-1.0, 0.0], vec![4.0, 4.0]];
        let gt = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        let mut total = 0.0;
        for t in 0..4 {
            let dx: f64 = pred[t][0] - gt[t][0];
            let dy = pred[t][1] - gt[t][1];
            total += dx.hypot(dy);
        }
        assert!((ade(&pred, &gt).unwrap() - total / 4.0).abs() < 1e-15);
        assert!((fde(&pred, &gt).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    fn agent(samples: Vec<Vec<Vec<f64>>>, truth: Vec<Vec<f64>>) -> AgentPrediction {
        AgentPrediction {
            agent_id: "a".into(),
            complete: true,
            history: vec![vec![0.0, 0.0]],
            truth,
            samples,
        }
    }

    #[test]
    fn hand_computed_report() {
        // Agent 1: sample 0 ade 1 fde 2, sample 1 ade 1.5 fde 0.5.
        let truth = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let a1 = agent(vec![vec![vec![0.0, 0.0], vec![2.0, 0.0]], vec![vec![2.5, 0.0], vec![0.5, 0.0]]], truth.clone());
        // Agent 2: one sample, ade 3 fde 3.
        let a2 = agent(vec![vec![vec![3.0, 0.0], vec![0.0, 3.0]]], truth);
        let sets = vec![
            PredictionSet { scene_id: "s".into(), window: 0, agents: vec![a1] },
            PredictionSet { scene_id: "s".into(), window: 1, agents: vec![a2] },
        ];
        let m = score(&sets, false).unwrap();
        assert_eq!((m.min_ade, m.min_fde, m.agent_windows), ((1.0 + 3.0) / 2.0, (0.5 + 3.0) / 2.0, 2));
        let j = score(&sets, true).unwrap();
        assert_eq!((j.min_ade, j.min_fde), ((1.0 + 3.0) / 2.0, (2.0 + 3.0) / 2.0));
    }

    fn tiny_model() -> (SocialPatternModel, ParameterStore) {
        let model = SocialPatternModel::new(ModelConfig::tiny(Ablation::PatSocAtt)).unwrap();
        let store = model.init_params(4).unwrap();
        (model, store)
    }

    #[test]
    fn k_one_is_the_first_stream() {
        let (model, store) = tiny_model();
        let sample = gradcheck_sample();
        let opts = EvalOptions { k: 1, ..EvalOptions::default() };
        let one = sample_k(&model, &store, &sample, &opts).unwrap();
        let many = sample_k(&model, &store, &sample, &EvalOptions { k: 5, ..opts }).unwrap();
        for (a, b) in one.agents.iter().zip(&many.agents) {
            assert_eq!(a.samples[0], b.samples[0]);
            assert!(b.samples[1..].iter().all(|s| *s != b.samples[0]));
        }
        let m1 = score(&[one], false).unwrap();
        let m5 = score(&[many], false).unwrap();
        assert!(m5.min_ade <= m1.min_ade && m5.min_fde <= m1.min_fde);
    }

    #[test]
    fn zero_noise_collapses_samples() {
        let (model, store) = tiny_model();
        let opts = EvalOptions { noise_scale: 0.0, ..EvalOptions::default() };
        let set = sample_k(&model, &store, &gradcheck_sample(), &opts).unwrap();
        for a in &set.agents {
            assert_eq!(a.samples.len(), 20);
            assert!(a.samples.iter().all(|s| *s == a.samples[0]));
        }
    }

    #[test]
    fn streams_differ_per_index() {
        let ids = vec!["a0".to_string()];
        let firsts: Vec<f64> = (0..20)
            .map(|k| AgentNoise::new(&rollout_key(0, "s", 0, k), &ids).draw(1).data()[0])
            .collect();
        for i in 0..20 {
            for j in i + 1..20 {
                assert_ne!(firsts[i], firsts[j]);
            }
        }
    }

    #[test]
    fn evaluation_leaves_parameters_untouched() {
        let (model, store) = tiny_model();
        let before = store.clone();
        evaluate(&model, &store, &[gradcheck_sample()], &EvalOptions::default()).unwrap();
        assert_eq!(store, before);
        assert!(evaluate(&model, &store, &[], &EvalOptions::default()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (model, store) = tiny_model();
        let sample = gradcheck_sample();
        let set = sample_k(&model, &store, &sample, &EvalOptions { k: 3, ..EvalOptions::default() }).unwrap();
        let text = predictions_csv(std::slice::from_ref(&set)).unwrap();
        assert!(text.starts_with("scene_id,window,agent_id,k,t,x,y\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, text).unwrap();
        let table = read_predictions_csv(&path).unwrap();
        let back = attach_predictions(&[sample], &table).unwrap();
        assert_eq!(back[0], set);
    }

    #[test]
    fn svg_draws_every_path() {
        let (model, store) = tiny_model();
        let set = sample_k(&model, &store, &gradcheck_sample(), &EvalOptions { k: 2, ..EvalOptions::default() }).unwrap();
        let svg = render_svg(&set);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2 * (2 + 2));
    }
}
