//! Context conditioning: motion-pattern features, the pattern predictor,
//! sub-goals, social influences and their aggregation into one social
//! feature per agent.

use std::fmt;
use std::str::FromStr;

use patternrnn_autodiff::{Graph, ParameterStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::join;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Mlp, ParamSpec};

/// Additive logit for keys of absent agents.
const MASKED_LOGIT: f64 = -1e9;

/// How social influences are aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SocialMode {
    Off,
    /// Embedded influences averaged over present agents.
    Mean,
    /// Multi-head self-attention over embedded influences, then averaged.
    Attention,
}

impl fmt::Display for SocialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SocialMode::Off => "off",
            SocialMode::Mean => "mean",
            SocialMode::Attention => "attention",
        })
    }
}

impl FromStr for SocialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(SocialMode::Off),
            "mean" => Ok(SocialMode::Mean),
            "attention" => Ok(SocialMode::Attention),
            other => Err(Error::Config(format!("unknown social mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextConfig {
    pub dim: usize,
    /// Pattern length in steps.
    pub pattern: usize,
    pub d_p: usize,
    pub d_s: usize,
    /// Width of the recurrent state the pattern predictor reads.
    pub d_h: usize,
    pub heads: usize,
    pub mlp_depth: usize,
    pub social: SocialMode,
}

impl ContextConfig {
    /// Width of the combined context feature.
    pub fn d_c(&self) -> usize {
        self.d_p + self.social_width()
    }

    pub fn social_width(&self) -> usize {
        if self.social == SocialMode::Off {
            0
        } else {
            self.d_s
        }
    }

    pub fn pattern_width(&self) -> usize {
        self.pattern * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_p == 0 || self.pattern == 0 || self.d_h == 0 || self.mlp_depth == 0 {
            return Err(Error::Config("d_p, pattern, d_h and mlp_depth must be >= 1".into()));
        }
        if self.social != SocialMode::Off && self.d_s == 0 {
            return Err(Error::Config("social aggregation needs d_s >= 1".into()));
        }
        if self.social == SocialMode::Attention && (self.heads == 0 || !self.d_s.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "d_s = {} is not divisible by {} attention heads",
                self.d_s, self.heads
            )));
        }
        Ok(())
    }
}

/// Absolute endpoint of `pattern` started from `x_abs`.
pub fn compute_subgoal(x_abs: &[f64], pattern: &[Vec<f64>]) -> Vec<f64> {
    let mut g = x_abs.to_vec();
    for step in pattern {
        g.iter_mut().zip(step).for_each(|(a, b)| *a += b);
    }
    g
}

/// Displacements from one agent to every agent's sub-goal.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialInfluenceSet {
    pub rows: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

/// Row `j` is `subgoals[j] − positions[i]`; absent agents give a zero,
/// invalid row.
pub fn compute_social_influences(
    positions: &[Vec<f64>],
    subgoals: &[Vec<f64>],
    present: &[bool],
    i: usize,
) -> Result<SocialInfluenceSet> {
    if i >= positions.len() {
        return Err(Error::Invalid(format!("agent index {i} out of range for {} agents", positions.len())));
    }
    if subgoals.len() != positions.len() || present.len() != positions.len() {
        return Err(Error::Invalid("positions, sub-goals and mask differ in length".into()));
    }
    let rows = subgoals
        .iter()
        .zip(present)
        .map(|(g, &p)| {
            if p {
                g.iter().zip(&positions[i]).map(|(a, b)| a - b).collect()
            } else {
                vec![0.0; g.len()]
            }
        })
        .collect();
    Ok(SocialInfluenceSet {
        rows,
        valid: present.to_vec(),
    })
}

/// Query, key, value and output projections of multi-head self-attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    fn new(prefix: &str, width: usize, heads: usize) -> Self {
        let lin = |n: &str| Linear::new(&format!("{prefix}.{n}"), width, width);
        Self {
            query: lin("query"),
            // A key bias shifts every logit of a query equally.
            key: Linear::without_bias(&format!("{prefix}.key"), width, width),
            value: lin("value"),
            output: lin("output"),
            heads,
        }
    }

    fn specs(&self) -> Vec<ParamSpec> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.specs(Init::Glorot))
            .collect()
    }

    /// Attends over the rows of `x` (`[B, N, W]`) with keys restricted to
    /// `mask`. Returns `[B, N, W]` and the `[B, N, N]` weights of each head.
    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, mask: &[bool]) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(x).to_vec();
        let (b, n, w) = (shape[0], shape[1], shape[2]);
        let dh = w / self.heads;
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let bias: Vec<f64> = (0..b * n)
            .flat_map(|_| mask.iter().map(|&m| if m { 0.0 } else { MASKED_LOGIT }))
            .collect();
        let bias = g.constant(Tensor::new(vec![b, n, n], bias)?);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 2, h * dh, (h + 1) * dh)?;
            let kh = g.slice(k, 2, h * dh, (h + 1) * dh)?;
            let vh = g.slice(v, 2, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, bias)?;
            let att = g.softmax(scores);
            outs.push(g.matmul(att, vh)?);
            weights.push(att);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2)? };
        Ok((self.output.forward(g, store, merged)?, weights))
    }
}

/// Social feature of each focal agent plus the attention weights, if any.
#[derive(Clone, Debug)]
pub struct SocialOutput {
    pub feature: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ContextNet {
    pub config: ContextConfig,
    pub pattern_feature: Mlp,
    pub pattern_body: Mlp,
    pub pattern_head: Linear,
    pub social_embed: Option<Mlp>,
    pub attention: Option<Attention>,
    /// `[P·D, D]` block matrix summing a flattened pattern's steps.
    summation: Tensor,
}

impl ContextNet {
    pub fn new(config: ContextConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let social_embed = (c.social != SocialMode::Off).then(|| Mlp::new("context.social_embed", c.dim, c.d_s, c.mlp_depth));
        let attention = (c.social == SocialMode::Attention).then(|| Attention::new("context.attention", c.d_s, c.heads));
        let pw = c.pattern_width();
        let mut sum = vec![0.0; pw * c.dim];
        for k in 0..c.pattern {
            for d in 0..c.dim {
                sum[(k * c.dim + d) * c.dim + d] = 1.0;
            }
        }
        Ok(Self {
            pattern_feature: Mlp::new("context.pattern_feature", pw, c.d_p, c.mlp_depth),
            pattern_body: Mlp::new("context.pattern_net.body", c.d_c() + c.d_h, c.d_h, c.mlp_depth),
            pattern_head: Linear::new("context.pattern_net.head", c.d_h, pw),
            social_embed,
            attention,
            summation: Tensor::new(vec![pw, c.dim], sum)?,
            config,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.pattern_feature.specs();
        s.extend(self.pattern_body.specs());
        s.extend(self.pattern_head.specs(Init::Glorot));
        if let Some(e) = &self.social_embed {
            s.extend(e.specs());
        }
        if let Some(a) = &self.attention {
            s.extend(a.specs());
        }
        s
    }

    /// Feature of `[N, P·D]` flattened patterns.
    pub fn extract_pattern_feature(&self, g: &mut Graph, store: &ParameterStore, pattern: Var) -> Result<Var> {
        self.pattern_feature.forward(g, store, pattern)
    }

    /// Flattened `[N, P·D]` pattern predicted from the previous context and
    /// recurrent state.
    pub fn predict_pattern(&self, g: &mut Graph, store: &ParameterStore, ctx_prev: Var, h_prev: Var) -> Result<Var> {
        let input = join(g, &[Some(ctx_prev), Some(h_prev)])?;
        let h = self.pattern_body.forward(g, store, input)?;
        let h = g.relu(h);
        self.pattern_head.forward(g, store, h)
    }

    /// Sub-goals `[N, D]` of flattened patterns started at `anchors`.
    pub fn subgoals(&self, g: &mut Graph, pattern: Var, anchors: &Tensor) -> Result<Var> {
        let sum = g.constant(self.summation.clone());
        let travel = g.matmul(pattern, sum)?;
        let a = g.constant(anchors.clone());
        Ok(g.add(travel, a)?)
    }

    /// Influence tensor `[N, N, D]` with entry `(i, j)` = `g_j − a_i`.
    pub fn influences(&self, g: &mut Graph, pattern: Var, anchors: &Tensor) -> Result<Var> {
        let goals = self.subgoals(g, pattern, anchors)?;
        let (n, d) = (anchors.shape()[0], anchors.shape()[1]);
        let zeros = g.constant(Tensor::zeros(&[n, n, d]));
        let tiled = g.add(zeros, goals)?;
        let own: Vec<f64> = (0..n).flat_map(|i| (0..n).flat_map(move |_| anchors.row(i).to_vec())).collect();
        let own = g.constant(Tensor::new(vec![n, n, d], own)?);
        Ok(g.sub(tiled, own)?)
    }

    /// Aggregates `[B, N, D]` influence rows into `[B, d_s]` social features,
    /// using only rows whose agent is marked in `mask`. A focal agent with
    /// no valid rows gets a zero feature.
    pub fn social_feature(&self, g: &mut Graph, store: &ParameterStore, influences: Var, mask: &[bool]) -> Result<Option<SocialOutput>> {
        let Some(embed) = &self.social_embed else {
            return Ok(None);
        };
        let shape = g.shape(influences).to_vec();
        let (b, n) = (shape[0], shape[1]);
        if mask.len() != n {
            return Err(Error::Invalid(format!("mask has {} entries for {n} rows", mask.len())));
        }
        let mut rows = embed.forward(g, store, influences)?;
        let mut attention = Vec::new();
        if let Some(att) = &self.attention {
            let (out, weights) = att.forward(g, store, rows, mask)?;
            rows = out;
            attention = weights;
        }
        let count = mask.iter().filter(|&&m| m).count();
        let w: Vec<f64> = (0..b)
            .flat_map(|_| mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }))
            .collect();
        let w = g.constant(Tensor::new(vec![b, 1, n], w)?);
        let pooled = g.matmul(w, rows)?;
        let feature = g.reshape(pooled, &[b, self.config.d_s])?;
        Ok(Some(SocialOutput { feature, attention }))
    }

    /// Social feature `[1, d_s]` of a single influence set.
    pub fn interaction_attend(&self, g: &mut Graph, store: &ParameterStore, set: &SocialInfluenceSet) -> Result<SocialOutput> {
        if !set.valid.iter().any(|&v| v) {
            return Err(Error::Invalid("every influence row is masked".into()));
        }
        let n = set.rows.len();
        let d = set.rows[0].len();
        let rows = g.constant(Tensor::new(vec![1, n, d], set.rows.concat())?);
        self.social_feature(g, store, rows, &set.valid)?
            .ok_or_else(|| Error::Invalid("social aggregation is disabled".into()))
    }

    /// Concatenates pattern and social features.
    pub fn build_context(&self, g: &mut Graph, pattern_feature: Var, social: Option<Var>) -> Result<Var> {
        join(g, &[Some(pattern_feature), social])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_store;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(social: SocialMode) -> ContextConfig {
        ContextConfig {
            dim: 2,
            pattern: 3,
            d_p: 4,
            d_s: 8,
            d_h: 5,
            heads: 4,
            mlp_depth: 2,
            social,
        }
    }

    fn net(social: SocialMode, seed: u64) -> (ContextNet, ParameterStore) {
        let n = ContextNet::new(config(social)).unwrap();
        let s = init_store(&n.specs(), seed).unwrap();
        (n, s)
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
    }

    #[test]
    fn subgoal_examples() {
        assert_eq!(compute_subgoal(&[0.0, 0.0], &[vec![1.0, 0.0], vec![1.0, 0.0]]), vec![2.0, 0.0]);
        assert_eq!(compute_subgoal(&[1.5, -2.0], &vec![vec![0.0, 0.0]; 3]), vec![1.5, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_rows(&mut rng, 1, 3).remove(0);
        let p = random_rows(&mut rng, 4, 3);
        let g = compute_subgoal(&x, &p);
        for d in 0..3 {
            let mut acc = 0.0;
            for step in &p {
                acc += step[d];
            }
            assert!((g[d] - (x[d] + acc)).abs() < 1e-12);
        }
    }

    #[test]
    fn influence_examples() {
        let one = compute_social_influences(&[vec![1.0, 1.0]], &[vec![3.0, 0.0]], &[true], 0).unwrap();
        assert_eq!(one.rows, vec![vec![2.0, -1.0]]);
        let pos = [vec![1.0, 1.0], vec![5.0, 5.0]];
        let goals = [vec![0.0, 0.0], vec![2.0, 0.0]];
        let s = compute_social_influences(&pos, &goals, &[true, true], 0).unwrap();
        assert_eq!(s.rows[1], vec![1.0, -1.0]);
        let s = compute_social_influences(&pos, &goals, &[true, false], 0).unwrap();
        assert_eq!(s.rows[1], vec![0.0, 0.0]);
        assert!(!s.valid[1]);
        assert!(compute_social_influences(&[vec![0.0, 0.0]], &[vec![0.0, 0.0]], &[true], 1).is_err());
    }

    #[test]
    fn graph_influences_match_double_loop() {
        let (cn, _) = net(SocialMode::Attention, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 5;
        let anchors = random_rows(&mut rng, n, 2);
        let patterns = random_rows(&mut rng, n, 6);
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&patterns).unwrap());
        let a = Tensor::from_rows(&anchors).unwrap();
        let inf = cn.influences(&mut g, p, &a).unwrap();
        let goals: Vec<Vec<f64>> = (0..n)
            .map(|j| compute_subgoal(&anchors[j], &patterns[j].chunks(2).map(<[f64]>::to_vec).collect::<Vec<_>>()))
            .collect();
        let data = g.data(inf);
        for i in 0..n {
            for j in 0..n {
                for d in 0..2 {
                    let expect = goals[j][d] - anchors[i][d];
                    assert!((data[(i * n + j) * 2 + d] - expect).abs() < 1e-12);
                }
            }
            // Self row is the own pattern's displacement sum.
            let own: f64 = patterns[i].iter().step_by(2).sum();
            assert!((data[(i * n + i) * 2] - own).abs() < 1e-12);
        }
    }

    #[test]
    fn pattern_feature_examples() {
        let (cn, mut store) = net(SocialMode::Off, 2);
        for l in &cn.pattern_feature.layers {
            if let Some(b) = &l.bias {
                store.set_values(b, &vec![0.0; l.outputs]).unwrap();
            }
        }
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[1, 6]));
        let f = cn.extract_pattern_feature(&mut g, &store, zero).unwrap();
        assert!(g.data(f).iter().all(|&v| v == 0.0));
        let p = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let two = g.constant(Tensor::from_rows(&[p.clone(), p.clone()]).unwrap());
        let f = cn.extract_pattern_feature(&mut g, &store, two).unwrap();
        assert_eq!(g.value(f).row(0), g.value(f).row(1));
        let expect = cn.pattern_feature.eval_row(&store, &p);
        for (a, b) in g.value(f).row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_head_predicts_stationarity() {
        let (cn, mut store) = net(SocialMode::Attention, 3);
        let h = &cn.pattern_head;
        store.set_values(&h.weight, &vec![0.0; h.inputs * h.outputs]).unwrap();
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(&[2, 12], 0.7));
        let hp = g.constant(Tensor::filled(&[2, 5], -0.2));
        let p = cn.predict_pattern(&mut g, &store, c, hp).unwrap();
        assert_eq!(g.shape(p), &[2, 6]);
        assert!(g.data(p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_attention_is_projected_self_embedding() {
        let (cn, store) = net(SocialMode::Attention, 4);
        let set = SocialInfluenceSet {
            rows: vec![vec![0.4, -1.3]],
            valid: vec![true],
        };
        let mut g = Graph::new();
        let out = cn.interaction_attend(&mut g, &store, &set).unwrap();
        let att = cn.attention.as_ref().unwrap();
        let e = cn.social_embed.as_ref().unwrap().eval_row(&store, &set.rows[0]);
        let expect = att.output.eval_row(&store, &att.value.eval_row(&store, &e));
        for (a, b) in g.data(out.feature).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_permutation_leaves_feature_unchanged() {
        for mode in [SocialMode::Mean, SocialMode::Attention] {
            let (cn, store) = net(mode, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let rows = random_rows(&mut rng, 5, 2);
            let valid = vec![true, false, true, true, true];
            let order = [3, 0, 4, 1, 2];
            let perm = SocialInfluenceSet {
                rows: order.iter().map(|&i| rows[i].clone()).collect(),
                valid: order.iter().map(|&i| valid[i]).collect(),
            };
            let set = SocialInfluenceSet { rows, valid };
            let mut g = Graph::new();
            let a = cn.interaction_attend(&mut g, &store, &set).unwrap().feature;
            let b = cn.interaction_attend(&mut g, &store, &perm).unwrap().feature;
            for (x, y) in g.data(a).iter().zip(g.data(b)) {
                assert!((x - y).abs() < 1e-12, "{mode}");
            }
        }
    }

    #[test]
    fn attention_weights_are_distributions_over_present_rows() {
        let (cn, store) = net(SocialMode::Attention, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = SocialInfluenceSet {
            rows: random_rows(&mut rng, 6, 2),
            valid: vec![true, true, false, true, false, true],
        };
        let mut g = Graph::new();
        let out = cn.interaction_attend(&mut g, &store, &set).unwrap();
        assert_eq!(out.attention.len(), 4);
        for w in out.attention {
            for row in g.data(w).chunks(6) {
                let live: f64 = row.iter().zip(&set.valid).filter(|(_, &v)| v).map(|(x, _)| x).sum();
                assert!((live - 1.0).abs() < 1e-12);
                assert!(row.iter().zip(&set.valid).filter(|(_, &v)| !v).all(|(x, _)| *x == 0.0));
            }
        }
    }

    #[test]
    fn masked_rows_do_not_matter() {
        let (cn, store) = net(SocialMode::Attention, 9);
        let base = SocialInfluenceSet {
            rows: vec![vec![0.5, 0.5], vec![9.0, -9.0]],
            valid: vec![true, false],
        };
        let other = SocialInfluenceSet {
            rows: vec![vec![0.5, 0.5], vec![-3.0, 1.0]],
            valid: vec![true, false],
        };
        let mut g = Graph::new();
        let a = cn.interaction_attend(&mut g, &store, &base).unwrap().feature;
        let b = cn.interaction_attend(&mut g, &store, &other).unwrap().feature;
        assert_eq!(g.data(a), g.data(b));
    }

    #[test]
    fn attend_errors() {
        let (cn, store) = net(SocialMode::Attention, 0);
        let set = SocialInfluenceSet {
            rows: vec![vec![0.0, 0.0]],
            valid: vec![false],
        };
        assert!(cn.interaction_attend(&mut Graph::new(), &store, &set).is_err());
        let bad = ContextConfig { d_s: 6, ..config(SocialMode::Attention) };
        assert!(ContextNet::new(bad).is_err());
    }

    #[test]
    fn context_concatenation() {
        let (cn, _) = net(SocialMode::Mean, 0);
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let s = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let c = cn.build_context(&mut g, p, Some(s)).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
        let back_p = g.slice(c, 1, 0, 2).unwrap();
        let back_s = g.slice(c, 1, 2, 4).unwrap();
        assert_eq!(g.data(back_p), &[1.0, 2.0]);
        assert_eq!(g.data(back_s), &[3.0, 4.0]);
        let only = cn.build_context(&mut g, p, None).unwrap();
        assert_eq!(g.data(only), &[1.0, 2.0]);
    }
}
