//! Named parameter storage and the convolutional building blocks.

use crate::error::{Error, Result};
use diffcore::{Tape, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to existing tape variables.
    pub fn from_vars<I: IntoIterator<Item = (String, Var)>>(pairs: I) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -a, a, rng)
}

/// Square-kernel convolution with bias and "same"-style padding `k / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        let shape = [self.cout, self.cin, self.k, self.k];
        ps.insert(self.weight(), fan_in_uniform(&shape, self.cin * self.k * self.k, rng));
        ps.insert(self.bias(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p.get(&self.weight())?, p.get(&self.bias())?, self.stride, self.k / 2)?)
    }
}

/// Transposed convolution; `k = stride` for exact upsampling by `stride`,
/// `k = 3, stride = 1` for a size-preserving block.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Deconv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, stride: usize) -> Self {
        let k = if stride == 1 { 3 } else { stride };
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
        }
    }

    fn pad(&self) -> usize {
        if self.stride == 1 {
            self.k / 2
        } else {
            0
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        // each output pixel receives cin·(k/stride)² taps
        let taps = (self.k / self.stride).max(1);
        let shape = [self.cin, self.cout, self.k, self.k];
        ps.insert(self.weight(), fan_in_uniform(&shape, self.cin * taps * taps, rng));
        ps.insert(self.bias(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.deconv2d(x, p.get(&self.weight())?, p.get(&self.bias())?, self.stride, self.pad())?)
    }
}

/// Two 3×3 convolutions with a shortcut (1×1 projection when the shape
/// changes), followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| Conv::new(format!("{name}.proj"), cin, cout, 1, stride));
        Self {
            conv1: Conv::new(format!("{name}.conv1"), cin, cout, 3, stride),
            conv2: Conv::new(format!("{name}.conv2"), cout, cout, 3, 1),
            shortcut,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        self.conv1.init(ps, rng);
        self.conv2.init(ps, rng);
        if let Some(s) = &self.shortcut {
            s.init(ps, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(tape, p, x)?,
            None => x,
        };
        let y = tape.add(h, s)?;
        Ok(tape.relu(y))
    }
}
