//! Reverse-mode differentiation over the operators in [`crate::ops`].
//!
//! A [`Tape`] records every operator application in execution order. Nodes
//! can only reference earlier nodes, so the record list is topologically
//! sorted by construction and one reverse sweep computes all gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Padding, Scalar, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor4<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operators.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// The most recently recorded node.
    pub fn last(&self) -> Option<Var> {
        self.nodes.len().checked_sub(1).map(Var)
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Graph input. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Named trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<Var> {
        let name = name.into();
        if self.params.iter().any(|(n, _)| *n == name) {
            return Err(Error::usage(format!("parameter {name} registered twice")));
        }
        let v = self.leaf(value, true);
        self.params.push((name, v));
        Ok(v)
    }

    /// Convolution; `bias` is a `1×1×1×out_c` node.
    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let b = self.value(bias);
        if b.dims()[..3] != [1, 1, 1] {
            return Err(Error::shape("bias node must be 1x1x1xC"));
        }
        let out = ops::conv2d_raw(self.value(input), self.value(weights), b.data(), stride, padding)?;
        let rg = self.needs(&[input, weights, bias]);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weights,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_with_argmax(self.value(input), window, stride)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.needs(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::channel_concat(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor4::new(x.dims(), data)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Dropout { input, mask }, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.needs(&[input]);
        self.push(Tensor4::scalar(s), Op::Sum { input }, rg)
    }

    /// Mean categorical cross-entropy of `softmax(logits)` against class
    /// indices. Probabilities are clamped at `1e-7` inside the log.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let [n, h, w, c] = z.dims();
        if h != 1 || w != 1 {
            return Err(Error::shape("cross-entropy expects n x 1 x 1 x C logits"));
        }
        if labels.len() != n || n == 0 {
            return Err(Error::usage(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::usage(format!("label {bad} out of range for {c} classes")));
        }
        let probs = ops::softmax(z);
        let loss = mean_nll(&probs, labels);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Probabilities saved by a cross-entropy node.
    pub fn probabilities(&self, loss: Var) -> Option<&Tensor4<T>> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }
}

/// `-(1/n) Σ log(max(p_true, 1e-7))`.
pub(crate) fn mean_nll<T: Scalar>(probs: &Tensor4<T>, labels: &[usize]) -> T {
    let c = probs.channels();
    let floor = T::of(1e-7);
    let total = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data()[i * c + l].max(floor).ln())
        .fold(T::zero(), |a, b| a + b);
    total / T::of(labels.len() as f64)
}

/// Gradients of a scalar loss with respect to parameters and tracked leaves.
#[derive(Clone, Debug)]
pub struct GradientSet<T = f32> {
    params: Vec<(String, Tensor4<T>)>,
    leaves: Vec<(Var, Tensor4<T>)>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor4<T>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }

    /// Parameter gradients in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4<T>)> {
        self.params.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, g)| g.all_finite())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Reverse sweep from the tape's final node, which must be a scalar.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss_seed: T) -> Result<GradientSet<T>> {
    let last = tape
        .last()
        .ok_or_else(|| Error::usage("backward on an empty tape"))?;
    if !tape.value(last).is_scalar() {
        return Err(Error::usage(format!(
            "terminal node has dims {:?}, expected a scalar loss",
            tape.value(last).dims()
        )));
    }
    let mut grads: Vec<Option<Tensor4<T>>> = (0..tape.len()).map(|_| None).collect();
    grads[last.0] = Some(Tensor4::scalar(loss_seed));

    for idx in (0..tape.len()).rev() {
        let node = &tape.nodes[idx];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[idx].take() else { continue };
        let wants = |v: &Var| tape.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {
                grads[idx] = Some(g);
            }
            Op::Conv {
                input,
                weights,
                bias,
                stride,
                padding,
            } => {
                let cg = ops::conv2d_backward(
                    tape.value(*input),
                    tape.value(*weights),
                    *stride,
                    *padding,
                    &g,
                    wants(input),
                )?;
                if let Some(gi) = cg.input {
                    accumulate(&mut grads[input.0], gi);
                }
                if wants(weights) {
                    accumulate(&mut grads[weights.0], cg.weights);
                }
                if wants(bias) {
                    let dims = tape.value(*bias).dims();
                    accumulate(&mut grads[bias.0], Tensor4::new(dims, cg.bias)?);
                }
            }
            Op::MaxPool { input, argmax } => {
                let gi = ops::maxpool2d_backward(tape.value(*input).dims(), argmax, &g)?;
                accumulate(&mut grads[input.0], gi);
            }
            Op::Relu { input } => {
                let gi = ops::relu_backward(tape.value(*input), &g)?;
                accumulate(&mut grads[input.0], gi);
            }
            Op::GlobalAvgPool { input } => {
                let gi = ops::global_avg_pool_backward(tape.value(*input).dims(), &g)?;
                accumulate(&mut grads[input.0], gi);
            }
            Op::Concat { a, b } => {
                let (ga, gb) = ops::channel_split(&g, tape.value(*a).channels())?;
                if wants(a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                accumulate(&mut grads[input.0], Tensor4::new(g.dims(), data)?);
            }
            Op::Sum { input } => {
                let seed = g.data()[0];
                accumulate(&mut grads[input.0], Tensor4::filled(tape.value(*input).dims(), seed));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let seed = g.data()[0];
                let c = probs.channels();
                let scale = seed / T::of(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = d[i * c + l] - T::one();
                }
                for v in d.iter_mut() {
                    *v = *v * scale;
                }
                accumulate(&mut grads[logits.0], Tensor4::new(probs.dims(), d)?);
            }
        }
    }

    let params = tape
        .params
        .iter()
        .map(|(name, v)| {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor4::zeros(tape.value(*v).dims()));
            (name.clone(), g)
        })
        .collect();
    let leaves = tape
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, n)| {
            matches!(n.op, Op::Leaf) && n.requires_grad && !tape.params.iter().any(|(_, p)| p.0 == *i)
        })
        .map(|(i, n)| {
            let g = grads[i].clone().unwrap_or_else(|| Tensor4::zeros(n.value.dims()));
            (Var(i), g)
        })
        .collect();
    Ok(GradientSet { params, leaves })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor4::new([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap(), true);
        let r = tape.relu(x);
        tape.sum(r);
        let g = backward(&tape, 1.0).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn gap_uniform_spread() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor4::new([1, 2, 2, 1], vec![1.0, -2.0, 3.0, 4.0]).unwrap(), true);
        let p = tape.global_avg_pool(x).unwrap();
        tape.sum(p);
        let g = backward(&tape, 1.0).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_terminal_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor4::zeros([1, 2, 2, 1]), true);
        tape.relu(x);
        assert!(matches!(backward(&tape, 1.0), Err(Error::Usage(_))));
        assert!(matches!(backward(&Tape::<f32>::new(), 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut tape = Tape::<f32>::new();
        tape.param("w", Tensor4::zeros([1, 1, 1, 1])).unwrap();
        assert!(tape.param("w", Tensor4::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn softmax_ce_closed_form() {
        let z = Tensor4::new([2, 1, 1, 2], vec![0.3f64, -1.2, 2.0, 0.5]).unwrap();
        let mut tape = Tape::<f64>::new();
        let zv = tape.leaf(z.clone(), true);
        tape.softmax_cross_entropy(zv, &[1, 0]).unwrap();
        let g = backward(&tape, 1.0).unwrap();
        let p = ops::softmax(&z);
        let expected = [
            (p.data()[0]) / 2.0,
            (p.data()[1] - 1.0) / 2.0,
            (p.data()[2] - 1.0) / 2.0,
            (p.data()[3]) / 2.0,
        ];
        assert_eq!(g.wrt(zv).unwrap().data(), &expected);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("unused", Tensor4::filled([1, 1, 1, 3], 1.0)).unwrap();
        let x = tape.leaf(Tensor4::filled([1, 1, 1, 1], 2.0), false);
        tape.sum(x);
        let _ = w;
        // terminal not requiring grad: everything is zero
        let g = backward(&tape, 1.0).unwrap();
        assert_eq!(g.get("unused").unwrap().data(), &[0.0; 3]);
        assert_eq!(g.len(), 1);
    }
}

/// Parameters a gradient check will perturb at most.
pub const GRAD_CHECK_MAX_PARAMS: usize = 50_000;

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    /// Worst relative error over all parameters.
    pub max_relative_error: f64,
    /// Worst relative error per parameter tensor, canonical order.
    pub per_tensor: Vec<(String, f64)>,
    pub params_checked: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backpropagated gradients of the mean cross-entropy loss against
/// central differences `(L(θ+ε) − L(θ−ε)) / 2ε` for every parameter.
pub fn grad_check(
    network: &crate::arch::Network<f64>,
    input: &Tensor4<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-2).contains(&epsilon) {
        return Err(Error::usage(format!("epsilon {epsilon} outside [1e-7, 1e-2]")));
    }
    let total = network.param_count();
    if total > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::usage(format!(
            "{total} parameters exceeds the gradient-check budget of {GRAD_CHECK_MAX_PARAMS}"
        )));
    }
    let analytic = network.loss_and_grads::<rand_chacha::ChaCha8Rng>(input, labels, None)?.grads;
    let mut probe = network.clone();
    let names: Vec<String> = network.tensors().into_iter().map(|(n, _)| n).collect();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("no gradient for {name}")))?
            .data()
            .to_vec();
        let original: Vec<f64> = probe
            .tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.to_vec())
            .expect("name comes from the same network");
        let mut values = original.clone();
        let mut tensor_worst = 0.0f64;
        for i in 0..values.len() {
            values[i] = original[i] + epsilon;
            probe.set_tensor(name, &values)?;
            let plus = probe.loss(input, labels)?;
            values[i] = original[i] - epsilon;
            probe.set_tensor(name, &values)?;
            let minus = probe.loss(input, labels)?;
            values[i] = original[i];
            let numeric = (plus - minus) / (2.0 * epsilon);
            tensor_worst = tensor_worst.max(relative_error(grad[i], numeric));
        }
        probe.set_tensor(name, &original)?;
        worst = worst.max(tensor_worst);
        per_tensor.push((name.clone(), tensor_worst));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        per_tensor,
        params_checked: total,
    })
}
