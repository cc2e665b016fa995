use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
            Activation::Softplus => g.softplus(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
        };
        f.write_str(s)
    }
}

/// Fully connected network description. Weights live in a [`ParameterSet`]
/// under `{prefix}.l{i}.w` (in x out) and `{prefix}.l{i}.b` (1 x out).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Mlp {
    /// `sizes` has one more entry than `activations`.
    pub fn new(prefix: impl Into<String>, sizes: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(
            sizes.len(),
            activations.len() + 1,
            "one activation per layer"
        );
        Self {
            prefix: prefix.into(),
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
        }
    }

    /// Hidden layers share `hidden_act`; the output layer uses `out_act`.
    pub fn uniform(
        prefix: impl Into<String>,
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        out_act: Activation,
    ) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![hidden_act; hidden.len()];
        acts.push(out_act);
        Self::new(prefix, &sizes, &acts)
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng, trainable: bool) {
        for (i, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            params.insert(
                self.weight_name(i),
                Tensor::new(fan_in, fan_out, data),
                trainable,
            );
            params.insert(self.bias_name(i), Tensor::zeros(1, fan_out), trainable);
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, input: Var) -> Result<Var> {
        let mut h = input;
        for (i, act) in self.activations.iter().enumerate() {
            let width = g.shape(h)[1];
            if width != self.sizes[i] {
                return Err(Error::dim(
                    format!("{} layer {i} input", self.prefix),
                    self.sizes[i],
                    width,
                ));
            }
            let w = g.param(params, &self.weight_name(i));
            let b = g.param(params, &self.bias_name(i));
            let z = g.matmul(h, w);
            let z = g.add_row(z, b);
            h = act.apply(g, z);
        }
        Ok(h)
    }

    /// Forward pass without keeping the tape.
    pub fn eval(&self, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, params, x)?;
        Ok(g.value(y).clone())
    }
}

/// Gated recurrent unit.
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// n  = tanh(x·Wn + (r ⊙ h)·Un + bn)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// Stored as `{prefix}.wx` (in x 3H, columns [z | r | n]), `{prefix}.uzr`
/// (H x 2H), `{prefix}.un` (H x H) and `{prefix}.b` (1 x 3H).
#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

/// Scale of the uniform GRU initialisation, as a multiple of 1/sqrt(H).
pub const GRU_INIT_SCALE: f64 = 1.0;

impl Gru {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn names(&self) -> [String; 4] {
        ["wx", "uzr", "un", "b"].map(|s| format!("{}.{s}", self.prefix))
    }

    /// Uniform in ±GRU_INIT_SCALE/sqrt(H), zero biases.
    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) {
        let h = self.hidden;
        let bound = GRU_INIT_SCALE / (h as f64).sqrt();
        let mut uniform = |r: usize, c: usize| {
            Tensor::new(
                r,
                c,
                (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        let [wx, uzr, un, b] = self.names();
        params.insert(wx, uniform(self.input, 3 * h), true);
        params.insert(uzr, uniform(h, 2 * h), true);
        params.insert(un, uniform(h, h), true);
        params.insert(b, Tensor::zeros(1, 3 * h), true);
    }

    pub fn step(&self, g: &mut Graph, params: &ParameterSet, h_prev: Var, x: Var) -> Result<Var> {
        let h = self.hidden;
        let [hr, hc] = g.shape(h_prev);
        if hc != h {
            return Err(Error::dim(format!("{} hidden state", self.prefix), h, hc));
        }
        let [xr, xc] = g.shape(x);
        if xc != self.input || xr != hr {
            return Err(Error::dim(
                format!("{} input", self.prefix),
                format!("{hr}x{}", self.input),
                format!("{xr}x{xc}"),
            ));
        }
        let [wx, uzr, un, b] = self.names();
        let wx = g.param(params, &wx);
        let uzr = g.param(params, &uzr);
        let un = g.param(params, &un);
        let b = g.param(params, &b);

        let gx = g.matmul(x, wx);
        let gx = g.add_row(gx, b);
        let gh = g.matmul(h_prev, uzr);
        let gx_zr = g.slice_cols(gx, 0, 2 * h);
        let zr_pre = g.add(gx_zr, gh);
        let zr = g.sigmoid(zr_pre);
        let z = g.slice_cols(zr, 0, h);
        let r = g.slice_cols(zr, h, 2 * h);
        let rh = g.mul(r, h_prev);
        let nh = g.matmul(rh, un);
        let gx_n = g.slice_cols(gx, 2 * h, 3 * h);
        let n_pre = g.add(gx_n, nh);
        let n = g.tanh(n_pre);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h_prev, n);
        let zd = g.mul(z, diff);
        Ok(g.add(n, zd))
    }

    pub fn eval(&self, params: &ParameterSet, h_prev: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let hv = g.constant(h_prev.clone());
        let xv = g.constant(x.clone());
        let out = self.step(&mut g, params, hv, xv)?;
        Ok(g.value(out).clone())
    }
}
