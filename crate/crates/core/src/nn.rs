//! Dense layers and multi-layer perceptrons with tape bindings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Silu => tape.silu(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std");
        Linear {
            weight: Matrix::from_shape_simple_fn((input, output), || normal.sample(rng)),
            bias: Matrix::zeros((1, output)),
        }
    }

    /// He-style initialization, `std = gain / sqrt(input)`.
    pub fn init(input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self::new(input, output, gain / (input as f64).sqrt(), rng)
    }

    pub fn identity(dim: usize) -> Self {
        Linear { weight: Matrix::eye(dim), bias: Matrix::zeros((1, dim)) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        let (w, b) = if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        };
        LinearVars { weight: w, bias: b }
    }

    pub fn forward(tape: &mut Tape, vars: LinearVars, x: Var) -> Var {
        let h = tape.matmul(x, vars.weight);
        tape.add_row(h, vars.bias)
    }

    pub fn eval(&self, x: &Matrix) -> Matrix {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Linear layers with one activation between consecutive layers (none after
/// the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let gain = match activation {
            Activation::Relu => 2f64.sqrt(),
            _ => 1.0,
        };
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], gain, rng)).collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("layers").output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<LinearVars> {
        self.layers.iter().map(|l| l.bind(tape, trainable)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[LinearVars], x: Var) -> Var {
        let mut h = x;
        for (i, v) in vars.iter().enumerate() {
            h = Linear::forward(tape, *v, h);
            if i + 1 < vars.len() {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    /// Forward pass without recording.
    pub fn eval(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.eval(&h);
            if i + 1 < self.layers.len() {
                h.mapv_inplace(|v| self.activation.eval(v));
            }
        }
        h
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn param_vars(vars: &[LinearVars]) -> Vec<Var> {
        vars.iter().flat_map(|v| [v.weight, v.bias]).collect()
    }
}

/// Stack row vectors into a matrix.
pub fn stack_rows(rows: &[&[f64]]) -> Matrix {
    let width = rows.first().map_or(0, |r| r.len());
    let mut m = Matrix::zeros((rows.len(), width));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        assert_eq!(src.len(), width, "ragged rows");
        dst.assign(&ndarray::ArrayView1::from(*src));
    }
    m
}
