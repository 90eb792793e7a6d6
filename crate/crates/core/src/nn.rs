//! Parameterised layers that record into an autodiff [`Graph`].
//!
//! Layers only hold parameter names; values live in a [`ParameterStore`] so
//! one store can be shared, checkpointed and updated independently.

use patternrnn_autodiff::{Graph, ParameterStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::rng::StreamKey;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    Uniform(f64),
}

/// Name, shape and initialiser of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }

    /// Draws initial values from a stream keyed by the parameter name, so
    /// adding a layer never changes the initial values of the others.
    pub fn materialize(&self, seed: u64) -> Tensor {
        let n: usize = self.shape.iter().product();
        let bound = match self.init {
            Init::Zeros => 0.0,
            Init::Glorot => {
                let fan_in = self.shape[0] as f64;
                let fan_out = *self.shape.last().unwrap_or(&1) as f64;
                (6.0 / (fan_in + fan_out)).sqrt()
            }
            Init::Uniform(b) => b,
        };
        let data = if bound == 0.0 {
            vec![0.0; n]
        } else {
            let mut rng = StreamKey::new("init", seed).with_str(&self.name).rng();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        Tensor::new(self.shape.clone(), data).expect("positive parameter shape")
    }
}

/// Inserts freshly initialised tensors for every spec.
pub fn init_store(specs: &[ParamSpec], seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    for s in specs {
        store.insert(s.name.clone(), s.materialize(seed))?;
    }
    Ok(store)
}

/// Draws every parameter, biases included, uniformly from `±bound`. Used to
/// evaluate gradients at a generic point away from ReLU kinks.
pub fn random_store(specs: &[ParamSpec], seed: u64, bound: f64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    for s in specs {
        let spec = ParamSpec::new(s.name.clone(), s.shape.clone(), Init::Uniform(bound));
        store.insert(s.name.clone(), spec.materialize(seed))?;
    }
    Ok(store)
}

/// Applies `f` to rows of a rank-2 or rank-3 input by folding the leading
/// axes together.
fn rowwise(g: &mut Graph, x: Var, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() == 2 {
        return f(g, x);
    }
    let cols = *shape.last().expect("non-scalar input");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, cols])?;
    let y = f(g, flat)?;
    let out_cols = g.shape(y)[1];
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(out_cols);
    Ok(g.reshape(y, &out_shape)?)
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(prefix: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: Some(format!("{prefix}.bias")),
            inputs,
            outputs,
        }
    }

    pub fn without_bias(prefix: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            bias: None,
            ..Self::new(prefix, inputs, outputs)
        }
    }

    pub fn specs(&self, init: Init) -> Vec<ParamSpec> {
        let weight = ParamSpec::new(self.weight.clone(), vec![self.inputs, self.outputs], init);
        let bias = self.bias.iter().map(|b| ParamSpec::new(b.clone(), vec![self.outputs], Init::Zeros));
        std::iter::once(weight).chain(bias).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = self.bias.as_ref().map(|b| g.param(store, b)).transpose()?;
        rowwise(g, x, |g, x| {
            let xw = g.matmul(x, w)?;
            Ok(match b {
                Some(b) => g.add(xw, b)?,
                None => xw,
            })
        })
    }

    /// Plain evaluation of one input row, independent of the graph.
    pub fn eval_row(&self, store: &ParameterStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(&self.weight).expect("registered weight").data();
        let b = self.bias.as_ref().map(|b| store.get(b).expect("registered bias").data());
        (0..self.outputs)
            .map(|o| b.map_or(0.0, |b| b[o]) + (0..self.inputs).map(|i| x[i] * w[i * self.outputs + o]).sum::<f64>())
            .collect()
    }
}

/// Stack of linear layers with ReLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `depth` layers; hidden layers have the output width.
    pub fn new(prefix: &str, inputs: usize, outputs: usize, depth: usize) -> Self {
        let layers = (0..depth.max(1))
            .map(|l| {
                let fan_in = if l == 0 { inputs } else { outputs };
                Linear::new(&format!("{prefix}.l{l}"), fan_in, outputs)
            })
            .collect();
        Self { layers }
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(|l| l.specs(Init::Glorot)).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn eval_row(&self, store: &ParameterStore, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = layer.eval_row(store, &h);
        }
        h
    }
}

/// Gated recurrent unit with reset, update and candidate gates:
///
/// ```text
/// r = σ(x W_ir + b_ir + h W_hr + b_hr)
/// u = σ(x W_iu + b_iu + h W_hu + b_hu)
/// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
///
/// With all weights and biases zero, `h' = h / 2`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub width: usize,
}

impl GruCell {
    pub fn new(prefix: &str, inputs: usize, width: usize) -> Self {
        Self {
            input: Linear::new(&format!("{prefix}.ih"), inputs, 3 * width),
            hidden: Linear::new(&format!("{prefix}.hh"), width, 3 * width),
            width,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let bound = 1.0 / (self.width as f64).sqrt();
        let mut specs = self.input.specs(Init::Uniform(bound));
        specs.extend(self.hidden.specs(Init::Uniform(bound)));
        specs
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        let w = self.width;
        let gi = self.input.forward(g, store, x)?;
        let gh = self.hidden.forward(g, store, h)?;
        let gate = |g: &mut Graph, k: usize| -> Result<(Var, Var)> {
            Ok((g.slice(gi, 1, k * w, (k + 1) * w)?, g.slice(gh, 1, k * w, (k + 1) * w)?))
        };
        let (ir, hr) = gate(g, 0)?;
        let (iu, hu) = gate(g, 1)?;
        let (inn, hn) = gate(g, 2)?;
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let u = g.add(iu, hu)?;
        let u = g.sigmoid(u);
        let rh = g.mul(r, hn)?;
        let n = g.add(inn, rh)?;
        let n = g.tanh(n);
        // n + u ⊙ (h − n)
        let diff = g.sub(h, n)?;
        let ud = g.mul(u, diff)?;
        Ok(g.add(n, ud)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_for(specs: &[ParamSpec], seed: u64) -> ParameterStore {
        init_store(specs, seed).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = Mlp::new("m", 3, 4, 2);
        let mut store = store_for(&mlp.specs(), 0);
        for l in &mlp.layers {
            let n = l.inputs * l.outputs;
            store.set_values(&l.weight, &vec![0.0; n]).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1., -2., 3., 4., 5., -6.]).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let lin = Linear::new("id", 3, 3);
        let mut store = store_for(&lin.specs(Init::Glorot), 0);
        store
            .set_values(&lin.weight, &[1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let x = g.reshape(x, &[1, 3]).unwrap();
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.data(y), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn graph_matches_plain_evaluation() {
        let mlp = Mlp::new("m", 3, 5, 3);
        let mut store = store_for(&mlp.specs(), 11);
        for l in &mlp.layers {
            let bias: Vec<f64> = (0..l.outputs).map(|i| 0.1 * i as f64 - 0.2).collect();
            store.set_values(l.bias.as_ref().unwrap(), &bias).unwrap();
        }
        let rows = vec![vec![0.3, -0.7, 1.1], vec![-1.0, 0.2, 0.05]];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let expect = mlp.eval_row(&store, r);
            for (a, b) in g.value(y).row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rank3_inputs_fold_leading_axes() {
        let lin = Linear::new("l", 2, 3);
        let store = store_for(&lin.specs(Init::Glorot), 5);
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3, 2], data.clone()).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3]);
        let expect = lin.eval_row(&store, &data[10..12]);
        assert_eq!(&g.data(y)[15..18], expect.as_slice());
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let cell = GruCell::new("gru", 3, 2);
        let mut store = ParameterStore::new();
        for s in cell.specs() {
            let n: usize = s.shape.iter().product();
            store.insert(s.name.clone(), Tensor::new(s.shape.clone(), vec![0.0; n]).unwrap()).unwrap();
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., -1., -2., -3.]).unwrap());
        let h = g.constant(Tensor::new(vec![2, 2], vec![0.8, -0.4, 0.0, 0.0]).unwrap());
        let out = cell.forward(&mut g, &store, x, h).unwrap();
        assert_eq!(g.data(out), &[0.4, -0.2, 0.0, 0.0]);
    }

    #[test]
    fn initialisation_is_keyed_by_name() {
        let a = ParamSpec::new("x.weight".into(), vec![3, 4], Init::Glorot);
        let b = ParamSpec::new("y.weight".into(), vec![3, 4], Init::Glorot);
        assert_eq!(a.materialize(1), a.materialize(1));
        assert_ne!(a.materialize(1), b.materialize(1));
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.materialize(1).data().iter().all(|v| v.abs() < bound));
    }
}
