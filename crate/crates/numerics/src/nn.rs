//! Layers shared by every model component.

use rand_chacha::ChaCha8Rng;

use crate::error::{NumericsError, Result};
use crate::param::{Ctx, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine map `x · W + b` with `W` stored `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[input, output], Init::Xavier, rng)?;
        let bias = store.add(&format!("{name}.bias"), &[output], Init::Zeros, rng)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[input, output], Init::Xavier, rng)?;
        Ok(Self { weight, bias: None })
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.tensor(self.weight).shape()[0]
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.tensor(self.weight).shape()[1]
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.weight))?;
        match self.bias {
            Some(b) => ctx.tape.add_bias(y, ctx.p(b)),
            None => Ok(y),
        }
    }
}

/// Affine/activation chain; the last layer gets `final_activation`.
pub fn mlp_forward(
    ctx: &Ctx<'_>,
    x: Var,
    layers: &[Linear],
    activation: Activation,
    final_activation: Activation,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let width = ctx.tape.shape(h).last().copied().unwrap_or(0);
        let expected = layer.input_dim(ctx.params());
        if width != expected {
            return Err(NumericsError::LayerMismatch {
                layer: ctx.params().get(layer.weight).name.clone(),
                expected,
                got: width,
            });
        }
        h = layer.forward(ctx, h)?;
        let act = if i + 1 == layers.len() { final_activation } else { activation };
        h = act.apply(&ctx.tape, h)?;
    }
    Ok(h)
}

/// Stack of linear layers with a fixed activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub final_activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        final_activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NumericsError::Config(format!("mlp {name} needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation, final_activation })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        mlp_forward(ctx, x, &self.layers, self.activation, self.final_activation)
    }
}

/// `softmax(Q Kᵀ / √d) V` for `Q: q×d`, `K: m×d`, `V: m×d_v`.
pub fn scaled_dot_attention(tape: &Tape, queries: Var, keys: Var, values: Var) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(queries), tape.shape(keys), tape.shape(values));
    let d = *qs.last().unwrap_or(&0);
    if d == 0 {
        return Err(NumericsError::Config("attention width must be positive".into()));
    }
    if ks.last() != Some(&d) {
        return Err(NumericsError::Shape { op: "attention", lhs: qs, rhs: ks });
    }
    if ks[0] != vs[0] {
        return Err(NumericsError::Shape { op: "attention", lhs: ks, rhs: vs });
    }
    let scores = tape.matmul_t(queries, false, keys, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, values)
}

/// Multi-head attention with per-head projections and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Config(format!("{name}: width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, rng)?,
            heads,
        })
    }

    /// Attends from the rows of `x_q` over the rows of `x_kv`.
    pub fn forward(&self, ctx: &Ctx<'_>, x_q: Var, x_kv: Var) -> Result<Var> {
        let tape = &ctx.tape;
        let q = self.query.forward(ctx, x_q)?;
        let k = self.key.forward(ctx, x_kv)?;
        let v = self.value.forward(ctx, x_kv)?;
        let d = *tape.shape(q).last().unwrap();
        let dh = d / self.heads;
        let heads = if self.heads == 1 {
            vec![scaled_dot_attention(tape, q, k, v)?]
        } else {
            (0..self.heads)
                .map(|h| {
                    let cols = |x| tape.slice_cols(x, h * dh, (h + 1) * dh);
                    scaled_dot_attention(tape, cols(q)?, cols(k)?, cols(v)?)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.output.forward(ctx, joined)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), &[d], Init::Const(1.0), rng)?,
            bias: store.add(&format!("{name}.bias"), &[d], Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), Self::EPS)
    }
}

/// Standard sine/cosine position table, `len × d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("positive extents")
}
