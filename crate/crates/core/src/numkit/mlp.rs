use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Matrix, NodeId, Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu if x > T::zero() => x,
            Activation::Relu => T::zero(),
            Activation::Identity => x,
        }
    }
}

/// Fully connected layer acting on row-batched inputs: `act(x · W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `in × out`.
    pub weights: Matrix<T>,
    /// `1 × out`.
    pub bias: Matrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weights: Matrix<T>, bias: Matrix<T>, activation: Activation) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weights.cols() {
            return Err(Error::shape(format!(
                "dense: bias {:?} for weights {:?}",
                bias.shape(),
                weights.shape()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform(±1/√in) initialization for weights and bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..bound));
        let weights = Matrix::from_fn(inputs, outputs, |_, _| draw());
        let bias = Matrix::from_fn(1, outputs, |_, _| draw());
        Self {
            weights,
            bias,
            activation,
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let h = x.matmul(&self.weights)?.add_row(&self.bias)?;
        Ok(match self.activation {
            Activation::Identity => h,
            act => h.map(|v| act.apply(v)),
        })
    }

    /// Records the layer on `tape`; returns the output node and the
    /// `(weights, bias)` leaves.
    pub fn record(&self, tape: &mut Tape<T>, x: NodeId) -> Result<(NodeId, [NodeId; 2])> {
        let w = tape.leaf(self.weights.clone());
        let b = tape.leaf(self.bias.clone());
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        let out = match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Identity => h,
        };
        Ok((out, [w, b]))
    }
}

/// Chain of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// ReLU hidden layers of the given widths followed by a linear output.
    pub fn init(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = inputs;
        for &h in hidden {
            layers.push(Dense::init(prev, h, Activation::Relu, rng));
            prev = h;
        }
        layers.push(Dense::init(prev, outputs, Activation::Identity, rng));
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        mlp_forward(&self.layers, x)
    }

    /// Records every layer; returns the output node and all parameter leaves
    /// in `[w0, b0, w1, b1, ...]` order.
    pub fn record(&self, tape: &mut Tape<T>, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut h = x;
        let mut leaves = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            let (out, ids) = layer.record(tape, h)?;
            leaves.extend(ids);
            h = out;
        }
        Ok((h, leaves))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}

/// Forward pass through `layers` without recording.
pub fn mlp_forward<T: Scalar>(layers: &[Dense<T>], x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        if h.cols() != layer.inputs() {
            return Err(Error::shape(format!(
                "layer {i} expects {} inputs, got {}",
                layer.inputs(),
                h.cols()
            )));
        }
        h = layer.forward(&h)?;
    }
    Ok(h)
}
