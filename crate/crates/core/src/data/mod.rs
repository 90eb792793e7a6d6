//! Multi-agent trajectory data: loading, relative displacements, windowing
//! into history/future samples, ground-truth motion patterns, and a
//! synthetic scene generator.

mod loader;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loader::{load_dataset, read_trajectory_csv, write_scenes_csv};

/// Supported dataset layouts. All share the trajectory CSV format; they
/// differ in default profile and units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    TrajAir,
    Sdd,
    Nba,
    Synth,
}

impl DatasetFormat {
    pub fn units(self) -> &'static str {
        match self {
            DatasetFormat::TrajAir => "km",
            DatasetFormat::Sdd => "m",
            DatasetFormat::Nba => "ft",
            DatasetFormat::Synth => "m",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetFormat::TrajAir => "trajair",
            DatasetFormat::Sdd => "sdd",
            DatasetFormat::Nba => "nba",
            DatasetFormat::Synth => "synth",
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajair" => Ok(DatasetFormat::TrajAir),
            "sdd" => Ok(DatasetFormat::Sdd),
            "nba" => Ok(DatasetFormat::Nba),
            "synth" => Ok(DatasetFormat::Synth),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected trajair, sdd, nba or synth)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    pub history: usize,
    pub future: usize,
    pub pattern: usize,
    /// Window stride in grid steps.
    pub stride: usize,
    pub min_agents: usize,
    /// Keep every `downsample`-th frame of the native grid.
    pub downsample: usize,
    pub units_scale: f64,
    pub val_fraction: f64,
}

impl DatasetConfig {
    pub fn window(&self) -> usize {
        self.history + self.future
    }

    pub fn validate(&self) -> Result<()> {
        if self.history < 1 || self.future < 1 {
            return Err(Error::Config("history and future must be >= 1".into()));
        }
        if self.pattern < 1 || self.pattern > self.future {
            return Err(Error::Config(format!(
                "pattern length must satisfy 1 <= P <= F, got P={} F={}",
                self.pattern, self.future
            )));
        }
        if self.stride < 1 || self.downsample < 1 || self.min_agents < 1 {
            return Err(Error::Config(
                "stride, downsample and min_agents must be >= 1".into(),
            ));
        }
        if !(self.units_scale.is_finite() && self.units_scale > 0.0) {
            return Err(Error::Config("units_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            format: DatasetFormat::Synth,
            history: 8,
            future: 12,
            pattern: 4,
            stride: 20,
            min_agents: 1,
            downsample: 1,
            units_scale: 1.0,
            val_fraction: 0.1,
        }
    }
}

/// One agent's observations in native frame indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrack {
    pub agent_id: String,
    pub frames: Vec<i64>,
    pub positions: Vec<Vec<f64>>,
}

/// An agent resampled onto its scene's frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneAgent {
    pub agent_id: String,
    /// Absolute positions per grid step; only meaningful where `mask` is set.
    pub positions: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub dim: usize,
    /// Native frame index of every grid step.
    pub frames: Vec<i64>,
    pub agents: Vec<SceneAgent>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Agents observed at every step of `start..start + len`.
    pub fn complete_agents(&self, start: usize, len: usize) -> usize {
        self.agents
            .iter()
            .filter(|a| a.mask[start..start + len].iter().all(|&m| m))
            .count()
    }
}

/// Per-agent slice of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleAgent {
    pub agent_id: String,
    /// Absolute position at the first step of the window.
    pub start_abs: Vec<f64>,
    /// `H + F` displacements; entry 0 is the zero move into the first step.
    pub displacements: Vec<Vec<f64>>,
    pub present: Vec<bool>,
    /// Observed over the whole window, hence included in losses and metrics.
    pub complete: bool,
    /// Per step, the next `P` displacements flattened to `P * D` values.
    pub gt_patterns: Vec<Vec<f64>>,
}

impl SampleAgent {
    pub fn history(&self, h: usize) -> &[Vec<f64>] {
        &self.displacements[..h]
    }

    pub fn future(&self, h: usize) -> &[Vec<f64>] {
        &self.displacements[h..]
    }

    /// Absolute positions recovered by cumulative summation.
    pub fn absolute(&self) -> Vec<Vec<f64>> {
        let mut pos = self.start_abs.clone();
        self.displacements
            .iter()
            .map(|d| {
                pos.iter_mut().zip(d).for_each(|(p, v)| *p += v);
                pos.clone()
            })
            .collect()
    }
}

/// One `H + F` window of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene_id: String,
    pub window: usize,
    pub start_frame: i64,
    pub dim: usize,
    pub history: usize,
    pub future: usize,
    pub pattern: usize,
    pub agents: Vec<SampleAgent>,
}

impl Sample {
    pub fn steps(&self) -> usize {
        self.history + self.future
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.agent_id.clone()).collect()
    }

    /// Same window with the agents reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Sample {
        let mut s = self.clone();
        s.agents = order.iter().map(|&i| self.agents[i].clone()).collect();
        s
    }
}

/// Splits an absolute track into its start and consecutive displacements.
pub fn to_relative(abs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if abs.len() < 2 {
        return Err(Error::Invalid(format!(
            "to_relative needs at least 2 positions, got {}",
            abs.len()
        )));
    }
    let disp = abs
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect();
    Ok((abs[0].clone(), disp))
}

/// Inverse of [`to_relative`].
pub fn reconstruct(start: &[f64], disp: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(disp.len() + 1);
    let mut pos = start.to_vec();
    out.push(pos.clone());
    for d in disp {
        pos.iter_mut().zip(d).for_each(|(p, v)| *p += v);
        out.push(pos.clone());
    }
    out
}

/// The `p` displacements starting at 1-based step `t`. Past the end of the
/// sequence the last displacement repeats (constant-velocity continuation).
pub fn extract_pattern(disp: &[Vec<f64>], t: usize, p: usize) -> Result<Vec<Vec<f64>>> {
    if t < 1 || t > disp.len() {
        return Err(Error::Invalid(format!(
            "pattern step {t} outside 1..={}",
            disp.len()
        )));
    }
    if p == 0 {
        return Err(Error::Invalid("pattern length must be >= 1".into()));
    }
    let last = disp.len() - 1;
    Ok((0..p).map(|k| disp[(t - 1 + k).min(last)].clone()).collect())
}

/// Fills absent steps with the nearest observed position so that missing
/// spans produce zero displacement. Returns `None` if nothing is observed.
fn fill_gaps(positions: &[Vec<f64>], mask: &[bool]) -> Option<Vec<Vec<f64>>> {
    let first = mask.iter().position(|&m| m)?;
    let mut out = Vec::with_capacity(positions.len());
    let mut last = positions[first].clone();
    for (p, &m) in positions.iter().zip(mask) {
        if m {
            last = p.clone();
        }
        out.push(last.clone());
    }
    Some(out)
}

/// Slides an `H + F` window over the scene.
///
/// Agents observed anywhere in a window are kept for social context; only
/// agents observed over the whole window are marked `complete`. Windows
/// without any complete agent are skipped.
pub fn make_samples(scene: &Scene, cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let len = cfg.window();
    let mut out = Vec::new();
    if scene.len() < len {
        return Ok(out);
    }
    let mut window = 0;
    let mut start = 0;
    while start + len <= scene.len() {
        let mut agents = Vec::new();
        for a in &scene.agents {
            let mask = &a.mask[start..start + len];
            let Some(filled) = fill_gaps(&a.positions[start..start + len], mask) else {
                continue;
            };
            let (start_abs, rel) = to_relative(&filled)?;
            let mut displacements = Vec::with_capacity(len);
            displacements.push(vec![0.0; scene.dim]);
            displacements.extend(rel);
            let gt_patterns = (1..=len)
                .map(|t| extract_pattern(&displacements, t, cfg.pattern).map(|p| p.concat()))
                .collect::<Result<Vec<_>>>()?;
            agents.push(SampleAgent {
                agent_id: a.agent_id.clone(),
                start_abs,
                displacements,
                present: mask.to_vec(),
                complete: mask.iter().all(|&m| m),
                gt_patterns,
            });
        }
        if agents.iter().any(|a| a.complete) {
            out.push(Sample {
                scene_id: scene.scene_id.clone(),
                window,
                start_frame: scene.frames[start],
                dim: scene.dim,
                history: cfg.history,
                future: cfg.future,
                pattern: cfg.pattern,
                agents,
            });
        }
        window += 1;
        start += cfg.stride;
    }
    Ok(out)
}

/// Keeps scenes with at least `n` agents observed together over some full
/// window of `window_len` steps. Order is preserved; `n <= 1` keeps all.
pub fn filter_min_agents(scenes: Vec<Scene>, n: usize, window_len: usize) -> Vec<Scene> {
    if n <= 1 {
        return scenes;
    }
    scenes
        .into_iter()
        .filter(|s| {
            s.len() >= window_len
                && (0..=s.len() - window_len).any(|start| s.complete_agents(start, window_len) >= n)
        })
        .collect()
}

/// Windows every scene in order.
pub fn make_all_samples(scenes: &[Scene], cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(make_samples(s, cfg)?);
    }
    Ok(out)
}
