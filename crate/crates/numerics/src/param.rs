use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NumericsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)) over the last two extents.
    Xavier,
    Zeros,
    Const(f64),
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a] => (*a, 1),
                    [.., a, b] => (*a, *b),
                    [] => (1, 1),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    /// Overwrite a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(NumericsError::Shape {
                op: "set",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    pub values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.values {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// Forward-pass context: a tape, read-only parameters bound lazily as
/// tracked leaves, the train/eval switch and the dropout stream.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, train: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: RefCell::new(vec![None; params.len()]),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn eval(params: &'a ParamStore) -> Self {
        Self::new(params, false, 0)
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.tensor(id).clone(), true);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x);
        let n: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self.with_rng(|rng| {
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        });
        self.tape.mask_mul(x, Tensor::new(shape, mask)?)
    }

    /// Runs backward from `loss` and adds parameter gradients into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads) -> Result<()> {
        self.tape.backward(loss)?;
        for (i, slot) in self.bound.borrow().iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.tape.grad(*v) {
                    for (dst, src) in grads.values[i].iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(())
    }

    /// Resets the tape and parameter bindings for the next forward pass.
    pub fn clear(&self) {
        self.tape.reset();
        self.bound.borrow_mut().iter_mut().for_each(|b| *b = None);
    }
}
