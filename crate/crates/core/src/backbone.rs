//! Variational recurrent backbone: location and latent feature extractors,
//! Gaussian posterior, prior and decoder heads, and the recurrent update.
//!
//! Every operation works on a batch of agents stored as rows, and no
//! operation mixes rows, so agents only interact through the context input.

use patternrnn_autodiff::{Graph, ParameterStore, Var};

use crate::error::{Error, Result};
use crate::nn::{GruCell, Init, Linear, Mlp, ParamSpec};

/// Log-variances are clamped to this range before exponentiation.
pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub d_x: usize,
    pub d_z: usize,
    /// Context width; zero disables conditioning entirely.
    pub d_c: usize,
    pub d_h: usize,
    pub mlp_depth: usize,
    /// Feed the context into the recurrent update.
    pub rnn_context: bool,
    /// Condition the prior on the context as well as the hidden state.
    pub prior_context: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::Config(format!("coordinate dimension must be 2 or 3, got {}", self.dim)));
        }
        if [self.d_x, self.d_z, self.d_h, self.mlp_depth].contains(&0) {
            return Err(Error::Config("d_x, d_z, d_h and mlp_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Plain mean and log-variance of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::Invalid(format!(
                "mean has {} entries but log-variance has {}",
                mu.len(),
                logvar.len()
            )));
        }
        Ok(Self { mu, logvar })
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Diagonal Gaussians for a batch of agents, `[N, width]` each.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mu: Var,
    pub logvar: Var,
}

impl Gaussian {
    /// Row `i` as plain parameters.
    pub fn row(&self, g: &Graph, i: usize) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).row(i).to_vec(),
            logvar: g.value(self.logvar).row(i).to_vec(),
        }
    }
}

/// MLP body followed by separate mean and log-variance heads.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub body: Mlp,
    pub mu: Linear,
    pub logvar: Linear,
}

impl GaussianHead {
    pub fn new(prefix: &str, inputs: usize, hidden: usize, outputs: usize, depth: usize) -> Self {
        Self {
            body: Mlp::new(&format!("{prefix}.body"), inputs, hidden, depth),
            mu: Linear::new(&format!("{prefix}.mu"), hidden, outputs),
            logvar: Linear::new(&format!("{prefix}.logvar"), hidden, outputs),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.body.specs();
        s.extend(self.mu.specs(Init::Glorot));
        s.extend(self.logvar.specs(Init::Glorot));
        s
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Gaussian> {
        let h = self.body.forward(g, store, x)?;
        let h = g.relu(h);
        let mu = self.mu.forward(g, store, h)?;
        let lv = self.logvar.forward(g, store, h)?;
        let logvar = g.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
        Ok(Gaussian { mu, logvar })
    }
}

/// Concatenates `[N, *]` blocks along the feature axis, skipping absent ones.
pub fn join(g: &mut Graph, parts: &[Option<Var>]) -> Result<Var> {
    let present: Vec<Var> = parts.iter().flatten().copied().collect();
    match present.as_slice() {
        [] => Err(Error::Invalid("nothing to concatenate".into())),
        [one] => Ok(*one),
        many => Ok(g.concat(many, 1)?),
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub location: Mlp,
    pub latent: Mlp,
    pub encoder: GaussianHead,
    pub prior: GaussianHead,
    pub decoder: GaussianHead,
    pub rnn: GruCell,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let prior_in = c.d_h + if c.prior_context { c.d_c } else { 0 };
        let rnn_in = c.d_x + c.d_z + if c.rnn_context { c.d_c } else { 0 };
        Ok(Self {
            location: Mlp::new("backbone.location", c.dim, c.d_x, c.mlp_depth),
            latent: Mlp::new("backbone.latent", c.d_z, c.d_z, c.mlp_depth),
            encoder: GaussianHead::new("backbone.encoder", c.d_x + c.d_c + c.d_h, c.d_h, c.d_z, c.mlp_depth),
            prior: GaussianHead::new("backbone.prior", prior_in, c.d_h, c.d_z, c.mlp_depth),
            decoder: GaussianHead::new("backbone.decoder", c.d_z + c.d_c + c.d_h, c.d_h, c.dim, c.mlp_depth),
            rnn: GruCell::new("backbone.rnn", rnn_in, c.d_h),
            config,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.location.specs();
        s.extend(self.latent.specs());
        s.extend(self.encoder.specs());
        s.extend(self.prior.specs());
        s.extend(self.decoder.specs());
        s.extend(self.rnn.specs());
        s
    }

    fn context(&self, ctx: Option<Var>) -> Option<Var> {
        if self.config.d_c == 0 {
            None
        } else {
            ctx
        }
    }

    /// Location feature of `[N, D]` displacements.
    pub fn extract_location_feature(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        self.location.forward(g, store, x)
    }

    pub fn latent_feature(&self, g: &mut Graph, store: &ParameterStore, z: Var) -> Result<Var> {
        self.latent.forward(g, store, z)
    }

    /// Posterior over the latent given location feature, context and state.
    pub fn encode_posterior(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x_feat: Var,
        ctx: Option<Var>,
        h_prev: Var,
    ) -> Result<Gaussian> {
        let input = join(g, &[Some(x_feat), self.context(ctx), Some(h_prev)])?;
        self.encoder.forward(g, store, input)
    }

    pub fn prior(&self, g: &mut Graph, store: &ParameterStore, ctx: Option<Var>, h_prev: Var) -> Result<Gaussian> {
        let ctx = if self.config.prior_context { self.context(ctx) } else { None };
        let input = join(g, &[ctx, Some(h_prev)])?;
        self.prior.forward(g, store, input)
    }

    /// Reparameterised draw `mu + exp(logvar / 2) ⊙ noise`.
    pub fn sample_latent(&self, g: &mut Graph, dist: Gaussian, noise: Var) -> Result<Var> {
        let half = g.scale(dist.logvar, 0.5);
        let sigma = g.exp(half);
        let spread = g.mul(sigma, noise)?;
        Ok(g.add(dist.mu, spread)?)
    }

    /// Distribution of the next displacement given the latent feature.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        z_feat: Var,
        ctx: Option<Var>,
        h_prev: Var,
    ) -> Result<Gaussian> {
        let input = join(g, &[Some(z_feat), self.context(ctx), Some(h_prev)])?;
        self.decoder.forward(g, store, input)
    }

    pub fn rnn_step(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x_feat: Var,
        z_feat: Var,
        ctx: Option<Var>,
        h_prev: Var,
    ) -> Result<Var> {
        let ctx = if self.config.rnn_context { self.context(ctx) } else { None };
        let input = join(g, &[Some(x_feat), Some(z_feat), ctx])?;
        self.rnn.forward(g, store, input, h_prev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_store, random_store};
    use patternrnn_autodiff::{finite_difference_check, Tensor};

    fn config(d_c: usize) -> BackboneConfig {
        BackboneConfig {
            dim: 2,
            d_x: 3,
            d_z: 2,
            d_c,
            d_h: 4,
            mlp_depth: 2,
            rnn_context: true,
            prior_context: true,
        }
    }

    fn zero_heads(store: &mut ParameterStore, head: &GaussianHead) {
        for l in [&head.mu, &head.logvar] {
            store.set_values(&l.weight, &vec![0.0; l.inputs * l.outputs]).unwrap();
        }
    }

    fn rows(g: &mut Graph, n: usize, w: usize, seed: f64) -> Var {
        let data = (0..n * w).map(|i| ((i as f64 + seed) * 0.77).sin()).collect();
        g.constant(Tensor::new(vec![n, w], data).unwrap())
    }

    #[test]
    fn zero_heads_give_unit_gaussians_and_no_motion() {
        let bb = Backbone::new(config(2)).unwrap();
        let mut store = init_store(&bb.specs(), 3).unwrap();
        for h in [&bb.encoder, &bb.prior, &bb.decoder] {
            zero_heads(&mut store, h);
        }
        let mut g = Graph::new();
        let x = rows(&mut g, 2, 2, 0.0);
        let c = rows(&mut g, 2, 2, 1.0);
        let h = rows(&mut g, 2, 4, 2.0);
        let xf = bb.extract_location_feature(&mut g, &store, x).unwrap();
        let q = bb.encode_posterior(&mut g, &store, xf, Some(c), h).unwrap();
        let p = bb.prior(&mut g, &store, Some(c), h).unwrap();
        for d in [q, p] {
            assert!(g.data(d.mu).iter().chain(g.data(d.logvar)).all(|&v| v == 0.0));
        }
        let z = bb.sample_latent(&mut g, q, c).unwrap();
        let zf = bb.latent_feature(&mut g, &store, z).unwrap();
        let dec = bb.decode(&mut g, &store, zf, Some(c), h).unwrap();
        assert!(g.data(dec.mu).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reparameterisation_examples() {
        let bb = Backbone::new(config(0)).unwrap();
        let mut g = Graph::new();
        let mu = g.constant(Tensor::vector(vec![0.5, -1.0]));
        let lv = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let n = g.constant(Tensor::vector(vec![0.3, 2.0]));
        let dist = Gaussian { mu, logvar: lv };
        let z0 = bb.sample_latent(&mut g, dist, zero).unwrap();
        assert_eq!(g.data(z0), &[0.5, -1.0]);
        let z1 = bb.sample_latent(&mut g, dist, n).unwrap();
        assert_eq!(g.data(z1), &[0.8, 1.0]);
    }

    #[test]
    fn reparameterisation_partials() {
        let bb = Backbone::new(config(0)).unwrap();
        let mu = [0.2, -0.4];
        let lv = [0.3, -1.2];
        let noise = [0.7, -1.1];
        let mut g = Graph::new();
        let m = g.input(Tensor::vector(mu.to_vec()).with_requires_grad(true));
        let l = g.input(Tensor::vector(lv.to_vec()).with_requires_grad(true));
        let n = g.constant(Tensor::vector(noise.to_vec()));
        let z = bb.sample_latent(&mut g, Gaussian { mu: m, logvar: l }, n).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(m).unwrap(), &[1.0, 1.0]);
        for d in 0..2 {
            let fd = |lv: f64| mu[d] + (0.5 * lv).exp() * noise[d];
            let numeric = (fd(lv[d] + 1e-6) - fd(lv[d] - 1e-6)) / 2e-6;
            let analytic = g.grad(l).unwrap()[d];
            assert!((analytic - numeric).abs() < 1e-8);
            assert!((analytic - 0.5 * noise[d] * (0.5 * lv[d]).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_is_deterministic() {
        let bb = Backbone::new(config(2)).unwrap();
        let store = init_store(&bb.specs(), 9).unwrap();
        let run = || {
            let mut g = Graph::new();
            let x = rows(&mut g, 3, 2, 0.0);
            let c = rows(&mut g, 3, 2, 1.0);
            let h = rows(&mut g, 3, 4, 2.0);
            let xf = bb.extract_location_feature(&mut g, &store, x).unwrap();
            let q = bb.encode_posterior(&mut g, &store, xf, Some(c), h).unwrap();
            (g.data(q.mu).to_vec(), g.data(q.logvar).to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn context_free_prior_ignores_context() {
        let bb = Backbone::new(BackboneConfig {
            prior_context: false,
            ..config(2)
        })
        .unwrap();
        assert_eq!(bb.prior.body.layers[0].inputs, 4);
        let store = init_store(&bb.specs(), 1).unwrap();
        let mut g = Graph::new();
        let h = rows(&mut g, 1, 4, 0.0);
        let c1 = rows(&mut g, 1, 2, 1.0);
        let c2 = rows(&mut g, 1, 2, 5.0);
        let p1 = bb.prior(&mut g, &store, Some(c1), h).unwrap();
        let p2 = bb.prior(&mut g, &store, Some(c2), h).unwrap();
        assert_eq!(g.data(p1.mu), g.data(p2.mu));
    }

    #[test]
    fn identical_agents_get_identical_states() {
        let bb = Backbone::new(config(2)).unwrap();
        let store = init_store(&bb.specs(), 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap());
        let z = g.constant(Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.5, -0.5]).unwrap());
        let c = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let h = g.constant(Tensor::new(vec![2, 4], vec![0.1, 0.0, -0.1, 0.3, 0.1, 0.0, -0.1, 0.3]).unwrap());
        let out = bb.rnn_step(&mut g, &store, x, z, Some(c), h).unwrap();
        assert_eq!(g.value(out).row(0), g.value(out).row(1));
    }

    /// Six steps of the recurrence with a decoder NLL and posterior/prior KL
    /// at every step, differentiated end to end.
    #[test]
    fn backprop_through_time_matches_finite_differences() {
        let bb = Backbone::new(config(0)).unwrap();
        let store = random_store(&bb.specs(), 21, 0.8).unwrap();
        let report = finite_difference_check::<Error, _>(&store, 1e-6, &[], |g, s| {
            let mut h = g.constant(Tensor::zeros(&[2, 4]));
            let mut total = None;
            for t in 0..6 {
                let x = rows(g, 2, 2, t as f64);
                let eps = rows(g, 2, 2, 10.0 + t as f64);
                let xf = bb.extract_location_feature(g, s, x)?;
                let q = bb.encode_posterior(g, s, xf, None, h)?;
                let p = bb.prior(g, s, None, h)?;
                let z = bb.sample_latent(g, q, eps)?;
                let zf = bb.latent_feature(g, s, z)?;
                let dec = bb.decode(g, s, zf, None, h)?;
                let nll = crate::objective::graph::gaussian_nll(g, x, dec)?;
                let kl = crate::objective::graph::kl_diag(g, q, p)?;
                let step = {
                    let a = g.sum(nll);
                    let b = g.sum(kl);
                    g.add(a, b)?
                };
                total = Some(match total {
                    None => step,
                    Some(acc) => g.add(acc, step)?,
                });
                h = bb.rnn_step(g, s, xf, zf, None, h)?;
            }
            let last = g.sum(h);
            Ok(g.add(total.unwrap(), last)?)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
