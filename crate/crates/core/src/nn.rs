//! Fully-connected layers with hand-written backpropagation, shared by the
//! correlation networks and the stage-two mappings.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::{sigmoid_scalar, FeatureMatrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// `y = act(x W + b)` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: FeatureMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weights: FeatureMatrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// Identity weights when square, otherwise uniform in
    /// `±1/sqrt(fan_in)`; zero bias either way.
    pub fn init(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let weights = if inputs == outputs {
            FeatureMatrix::identity(inputs)
        } else {
            FeatureMatrix::uniform(inputs, outputs, 1.0 / (inputs.max(1) as f64).sqrt(), rng)
        };
        Self {
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut out = x.matmul(&self.weights)?;
        out.add_row_vector(&self.bias)?;
        let act = self.activation;
        out.map_inplace(|v| act.apply(v));
        Ok(out)
    }

    /// Gradients of the loss w.r.t. this layer's parameters and its input,
    /// given the loss gradient w.r.t. its output.
    pub fn backward(
        &self,
        input: &FeatureMatrix,
        output: &FeatureMatrix,
        grad_output: &FeatureMatrix,
    ) -> Result<(FeatureMatrix, DenseGrad)> {
        let act = self.activation;
        let delta = grad_output.zip_map(output, |g, y| g * act.derivative_at_output(y))?;
        let weights = input.matmul_tn(&delta)?;
        let bias = delta.column_sums();
        let grad_input = delta.matmul_nt(&self.weights)?;
        Ok((grad_input, DenseGrad { weights, bias }))
    }

    fn zero_grad(&self) -> DenseGrad {
        DenseGrad {
            weights: FeatureMatrix::zeros(self.inputs(), self.outputs()),
            bias: vec![0.0; self.outputs()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer values kept by a training forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// `inputs[i]` is the input to layer `i`.
    pub inputs: Vec<FeatureMatrix>,
    /// Post-activation output of each layer, before dropout.
    pub outputs: Vec<FeatureMatrix>,
    /// Inverted-dropout multipliers applied after each layer, if any.
    pub masks: Vec<Option<FeatureMatrix>>,
}

impl MlpTrace {
    /// The value the network emitted (after any dropout on the last layer).
    pub fn output(&self) -> FeatureMatrix {
        let last = self.outputs.len() - 1;
        match &self.masks[last] {
            Some(mask) => self.outputs[last].hadamard(mask).expect("mask shape"),
            None => self.outputs[last].clone(),
        }
    }
}

impl Mlp {
    /// `dims = [input, h1, ..., out]`; `activations[i]` is used by layer `i`.
    pub fn init(dims: &[usize], activations: &[Activation], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "network needs at least one layer and one activation per layer (dims {dims:?})"
            )));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::init(w[0], w[1], act, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::outputs))
            .collect()
    }

    pub fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "network forward",
                x.shape(),
                self.layers[0].weights.shape(),
            ));
        }
        let mut act = x.clone();
        for layer in &self.layers {
            act = layer.forward(&act)?;
        }
        Ok(act)
    }

    /// Forward pass that records activations. `dropout[i]` is the drop
    /// rate applied after layer `i` (0 disables it).
    pub fn forward_trace(
        &self,
        x: &FeatureMatrix,
        dropout: &[f64],
        rng: &mut SeededRng,
    ) -> Result<MlpTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "network forward",
                x.shape(),
                self.layers[0].weights.shape(),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&act)?;
            let rate = dropout.get(i).copied().unwrap_or(0.0);
            let (next, mask) = if rate > 0.0 {
                let keep = 1.0 - rate;
                let mask = FeatureMatrix::zeros(out.rows(), out.cols()).map(|_| {
                    if rng.uniform() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                (out.hadamard(&mask)?, Some(mask))
            } else {
                (out.clone(), None)
            };
            inputs.push(std::mem::replace(&mut act, next));
            outputs.push(out);
            masks.push(mask);
        }
        Ok(MlpTrace {
            inputs,
            outputs,
            masks,
        })
    }

    /// Backpropagates `grad_output` (w.r.t. the traced output) and returns
    /// per-layer parameter gradients and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        grad_output: &FeatureMatrix,
    ) -> Result<(Vec<DenseGrad>, FeatureMatrix)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut grad = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if let Some(mask) = &trace.masks[i] {
                grad = grad.hadamard(mask)?;
            }
            let (grad_input, g) = layer.backward(&trace.inputs[i], &trace.outputs[i], &grad)?;
            grads.push(g);
            grad = grad_input;
        }
        grads.reverse();
        Ok((grads, grad))
    }

    pub fn zero_grads(&self) -> Vec<DenseGrad> {
        self.layers.iter().map(DenseLayer::zero_grad).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Appends all parameters (layer by layer: weights then bias).
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`Mlp::write_params`]; returns the unread tail.
    pub fn read_params<'a>(&mut self, mut values: &'a [f64]) -> &'a [f64] {
        for l in &mut self.layers {
            let n = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&values[..n]);
            values = &values[n..];
            let m = l.bias.len();
            l.bias.copy_from_slice(&values[..m]);
            values = &values[m..];
        }
        values
    }
}

/// Flattens gradients in [`Mlp::write_params`] order.
pub fn write_grads(grads: &[DenseGrad], out: &mut Vec<f64>) {
    for g in grads {
        out.extend_from_slice(g.weights.as_slice());
        out.extend_from_slice(&g.bias);
    }
}

/// SGD with classical momentum over one network.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    velocity: Vec<DenseGrad>,
}

impl MomentumSgd {
    pub fn new(net: &Mlp) -> Self {
        Self {
            velocity: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[DenseGrad], lr: f64, momentum: f64) {
        for ((layer, vel), g) in net.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            descend(
                layer.weights.as_mut_slice(),
                vel.weights.as_mut_slice(),
                g.weights.as_slice(),
                lr,
                momentum,
            );
            descend(&mut layer.bias, &mut vel.bias, &g.bias, lr, momentum);
        }
    }
}

fn descend(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        if *v != 0.0 {
            *p += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_grad;

    #[test]
    fn square_layers_start_as_identity() {
        let mut rng = SeededRng::new(0);
        let net = Mlp::init(&[4, 4, 4], &[Activation::Identity; 2], &mut rng).unwrap();
        let x = FeatureMatrix::gaussian(3, 4, 1.0, &mut rng);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let mut net = Mlp::init(
            &[3, 4, 2],
            &[Activation::Sigmoid, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        // break the identity/symmetric start
        let mut p = Vec::new();
        net.write_params(&mut p);
        let p: Vec<f64> = p.iter().map(|v| v + 0.3 * rng.normal()).collect();
        net.read_params(&p);
        let x = FeatureMatrix::gaussian(5, 3, 1.0, &mut rng);
        let target = FeatureMatrix::gaussian(5, 2, 1.0, &mut rng);

        let loss = |params: &[f64]| {
            let mut n = net.clone();
            n.read_params(params);
            n.forward(&x).unwrap().sub(&target).unwrap().sum_squares()
        };
        let trace = net.forward_trace(&x, &[], &mut rng).unwrap();
        let grad_out = trace.output().sub(&target).unwrap().scale(2.0);
        let (grads, _) = net.backward(&trace, &grad_out).unwrap();
        let mut analytic = Vec::new();
        write_grads(&grads, &mut analytic);
        let numeric = finite_diff_grad(loss, &p, 1e-6).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_network_unchanged() {
        let mut rng = SeededRng::new(2);
        let mut net = Mlp::init(&[3, 2], &[Activation::Relu], &mut rng).unwrap();
        let before = net.clone();
        let mut opt = MomentumSgd::new(&net);
        let grads = vec![DenseGrad {
            weights: FeatureMatrix::filled(3, 2, 1.0),
            bias: vec![1.0, 1.0],
        }];
        opt.step(&mut net, &grads, 0.0, 0.9);
        assert_eq!(net, before);
    }

    #[test]
    fn dropout_masks_scale_survivors() {
        let mut rng = SeededRng::new(5);
        let net = Mlp::init(&[6, 6], &[Activation::Identity], &mut rng).unwrap();
        let x = FeatureMatrix::filled(50, 6, 1.0);
        let trace = net.forward_trace(&x, &[0.5], &mut rng).unwrap();
        let out = trace.output();
        assert!(out.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(out.as_slice().contains(&0.0));
    }
}
