use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenseArray, Module, NumericsError, Parameter, Tape, Var};

/// Fully connected layer `y = x·W + b`, `W: [inputs, outputs]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Uniform(±1/√fan_in) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::with_gain(name, inputs, outputs, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain / (inputs.max(1) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let weight = DenseArray::new(vec![inputs, outputs], data).expect("weight shape");
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight).expect("finite init"),
            bias: Parameter::new(format!("{name}.bias"), DenseArray::zeros(&[outputs]))
                .expect("finite init"),
        }
    }

    pub fn zeros(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), DenseArray::zeros(&[inputs, outputs]))
                .expect("finite init"),
            bias: Parameter::new(format!("{name}.bias"), DenseArray::zeros(&[outputs]))
                .expect("finite init"),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Self::Elu => tape.elu(x),
            Self::Gelu => tape.gelu(x),
            Self::Tanh => tape.tanh(x),
        }
    }
}

/// Stack of linear layers with an activation between (not after) them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output. The output layer
    /// is initialized with `output_gain` times the default bound.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        sizes: &[usize],
        activation: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { output_gain } else { 1.0 };
                Linear::with_gain(&format!("{name}.{i}"), w[0], w[1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var, NumericsError> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i + 1 < n {
                x = self.activation.apply(tape, x);
            }
        }
        Ok(x)
    }
}

impl Module for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}
