//! Feed-forward network with explicit backprop.
//!
//! Every linear layer records its per-sample, per-token inputs on the forward
//! pass and its output-gradients on the backward pass. Those two streams are
//! all the projection and curvature code ever needs.

mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix};

pub use train::{batch_grad, train, Reduction, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// `½‖o − y‖²` per token.
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    /// `n_out x n_in`
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl LinearLayer {
    pub fn n_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Rows of `x` are tokens: returns `x Wᵀ + b`.
    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.n_out());
        for t in 0..x.rows() {
            let xr = x.row(t);
            for (j, o) in out.row_mut(t).iter_mut().enumerate() {
                *o = dot(self.weight.row(j), xr) + self.bias.as_ref().map_or(0.0, |b| b[j]);
            }
        }
        out
    }
}

/// Target for one token.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
    /// Masked token: contributes neither loss nor gradient.
    Ignore,
}

/// One example: `T` tokens of input features with a target per token.
/// Classification and regression samples have `T = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `T x n_in`
    pub inputs: Matrix,
    pub targets: Vec<Target>,
}

impl Sample {
    pub fn classification(features: &[f64], class: usize) -> Self {
        Self {
            inputs: Matrix::from_rows(&[features]),
            targets: vec![Target::Class(class)],
        }
    }

    pub fn regression(features: &[f64], target: &[f64]) -> Self {
        Self {
            inputs: Matrix::from_rows(&[features]),
            targets: vec![Target::Values(target.to_vec())],
        }
    }

    pub fn sequence(inputs: Matrix, targets: Vec<Target>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "sequence targets",
                expected: inputs.rows(),
                found: targets.len(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn token_count(&self) -> usize {
        self.inputs.rows()
    }

    pub fn class(&self) -> Option<usize> {
        match self.targets.first() {
            Some(Target::Class(c)) => Some(*c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LinearLayer>,
    /// One per layer, applied to that layer's output.
    activations: Vec<Activation>,
    loss: LossKind,
}

impl Model {
    pub fn new(layers: Vec<LinearLayer>, activations: Vec<Activation>, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        if activations.len() != layers.len() {
            return Err(Error::DimensionMismatch {
                context: "activation count",
                expected: layers.len(),
                found: activations.len(),
            });
        }
        for (i, layer) in layers.iter().enumerate() {
            if !layer.weight.is_finite() || layer.bias.iter().flatten().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("layer parameters"));
            }
            if let Some(b) = &layer.bias {
                if b.len() != layer.n_out() {
                    return Err(Error::DimensionMismatch {
                        context: "bias length",
                        expected: layer.n_out(),
                        found: b.len(),
                    });
                }
            }
            if i > 0 && layers[i - 1].n_out() != layer.n_in() {
                return Err(Error::DimensionMismatch {
                    context: "adjacent layer widths",
                    expected: layers[i - 1].n_out(),
                    found: layer.n_in(),
                });
            }
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate layer name {}",
                    layer.name
                )));
            }
        }
        Ok(Self {
            layers,
            activations,
            loss,
        })
    }

    /// Fully connected network `widths[0] -> ... -> widths[last]`, layers named
    /// `fc0, fc1, ...`, `hidden` after every layer but the last.
    ///
    /// Weights and biases are drawn uniformly from `±1/√n_in`.
    pub fn mlp(
        widths: &[usize],
        hidden: Activation,
        bias: bool,
        loss: LossKind,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp widths must have at least two positive entries, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut activations = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(n_in as f64);
            let data = (0..n_in * n_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let weight = Matrix::new(n_out, n_in, data)?;
            let b = bias.then(|| (0..n_out).map(|_| rng.random_range(-bound..bound)).collect());
            layers.push(LinearLayer {
                name: format!("fc{i}"),
                weight,
                bias: b,
            });
            activations.push(if i + 2 == widths.len() {
                Activation::Identity
            } else {
                hidden
            });
        }
        Self::new(layers, activations, loss)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn layer(&self, name: &str) -> Option<&LinearLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LinearLayer::param_count).sum()
    }

    /// Output for a single sample (`T x n_out`), no traces kept.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        check_input(self, inputs)?;
        let mut x = inputs.clone();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut z = layer.apply(&x);
            z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            x = z;
        }
        Ok(x)
    }
}

/// Captured activations for one linear layer over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer_name: String,
    /// Per sample, `T x n_in`: the inputs `x_i` of every token.
    pub fwd_inputs: Vec<Matrix>,
    /// Per sample, `T x n_out`: the gradients `𝒟x_o` w.r.t. the pre-activation output.
    /// Empty until [`backward`] runs.
    pub bwd_outgrads: Vec<Matrix>,
}

impl LayerTrace {
    pub fn sample_count(&self) -> usize {
        self.fwd_inputs.len()
    }

    pub fn has_backward(&self) -> bool {
        self.bwd_outgrads.len() == self.fwd_inputs.len()
    }

    /// `Σ_t 𝒟x_{o,t} x_{i,t}ᵀ` for sample `s`.
    pub fn sample_weight_grad(&self, s: usize) -> Result<Matrix> {
        if !self.has_backward() {
            return Err(Error::MissingTraces("backward output-gradients"));
        }
        let x = &self.fwd_inputs[s];
        let d = &self.bwd_outgrads[s];
        let mut g = Matrix::zeros(d.cols(), x.cols());
        for t in 0..x.rows() {
            g.add_outer(d.row(t), x.row(t));
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Per sample, `T x n_out` model outputs.
    pub outputs: Vec<Matrix>,
    pub traces: Vec<LayerTrace>,
    /// Per layer, per sample pre-activation outputs.
    pre_activations: Vec<Vec<Matrix>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

fn check_input(model: &Model, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "sample features",
            expected: model.input_dim(),
            found: inputs.cols(),
        });
    }
    Ok(())
}

pub fn forward(model: &Model, batch: &[Sample]) -> Result<ForwardPass> {
    for s in batch {
        check_input(model, &s.inputs)?;
    }
    let n_layers = model.layers.len();
    let mut traces: Vec<LayerTrace> = model
        .layers
        .iter()
        .map(|l| LayerTrace {
            layer_name: l.name.clone(),
            fwd_inputs: Vec::with_capacity(batch.len()),
            bwd_outgrads: Vec::new(),
        })
        .collect();
    let mut pre_activations = vec![Vec::with_capacity(batch.len()); n_layers];
    let mut outputs = Vec::with_capacity(batch.len());
    for s in batch {
        let mut x = s.inputs.clone();
        for (l, (layer, act)) in model.layers.iter().zip(&model.activations).enumerate() {
            let z = layer.apply(&x);
            let mut y = z.clone();
            y.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            traces[l].fwd_inputs.push(x);
            pre_activations[l].push(z);
            x = y;
        }
        outputs.push(x);
    }
    Ok(ForwardPass {
        outputs,
        traces,
        pre_activations,
    })
}

/// Per-sample losses and their gradients w.r.t. the model outputs.
/// Token losses are summed within a sample.
pub fn loss_and_grads(
    kind: LossKind,
    outputs: &[Matrix],
    batch: &[Sample],
) -> Result<(Vec<f64>, Vec<Matrix>)> {
    if outputs.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            context: "outputs vs samples",
            expected: batch.len(),
            found: outputs.len(),
        });
    }
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for (out, s) in outputs.iter().zip(batch) {
        if s.targets.len() != out.rows() {
            return Err(Error::DimensionMismatch {
                context: "targets per token",
                expected: out.rows(),
                found: s.targets.len(),
            });
        }
        let mut g = Matrix::zeros(out.rows(), out.cols());
        let mut loss = 0.0;
        for (t, target) in s.targets.iter().enumerate() {
            let o = out.row(t);
            match (kind, target) {
                (_, Target::Ignore) => {}
                (LossKind::CrossEntropy, Target::Class(c)) => {
                    if *c >= o.len() {
                        return Err(Error::InvalidArgument(format!(
                            "class {c} out of range for {} outputs",
                            o.len()
                        )));
                    }
                    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = o.iter().map(|v| libm::exp(v - m)).sum();
                    let log_z = m + libm::log(z);
                    loss += log_z - o[*c];
                    let gr = g.row_mut(t);
                    for (k, gk) in gr.iter_mut().enumerate() {
                        *gk = libm::exp(o[k] - log_z);
                    }
                    gr[*c] -= 1.0;
                }
                (LossKind::MeanSquaredError, Target::Values(y)) => {
                    if y.len() != o.len() {
                        return Err(Error::DimensionMismatch {
                            context: "regression target",
                            expected: o.len(),
                            found: y.len(),
                        });
                    }
                    let gr = g.row_mut(t);
                    for k in 0..o.len() {
                        let r = o[k] - y[k];
                        loss += 0.5 * r * r;
                        gr[k] = r;
                    }
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "target kind does not match loss".into(),
                    ))
                }
            }
        }
        losses.push(loss);
        grads.push(g);
    }
    Ok((losses, grads))
}

/// Backpropagates `loss_grads` (per sample, w.r.t. outputs) through a recorded
/// forward pass, fills every trace's `bwd_outgrads`, and returns weight and bias
/// gradients summed over samples and tokens.
pub fn backward(model: &Model, pass: &mut ForwardPass, loss_grads: &[Matrix]) -> Result<Vec<LayerGrad>> {
    let n_layers = model.layers.len();
    if pass.traces.len() != n_layers || pass.pre_activations.len() != n_layers {
        return Err(Error::MissingTraces("forward pass does not match model"));
    }
    let n_samples = pass.outputs.len();
    if loss_grads.len() != n_samples {
        return Err(Error::DimensionMismatch {
            context: "loss gradients per sample",
            expected: n_samples,
            found: loss_grads.len(),
        });
    }
    for (trace, layer) in pass.traces.iter().zip(&model.layers) {
        if trace.fwd_inputs.len() != n_samples || trace.layer_name != layer.name {
            return Err(Error::MissingTraces("forward inputs"));
        }
    }

    let mut grads: Vec<LayerGrad> = model
        .layers
        .iter()
        .map(|l| LayerGrad {
            weight: Matrix::zeros(l.n_out(), l.n_in()),
            bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
        })
        .collect();
    let mut outgrads: Vec<Vec<Matrix>> = vec![Vec::with_capacity(n_samples); n_layers];

    for (s, lg) in loss_grads.iter().enumerate() {
        if lg.shape() != pass.outputs[s].shape() {
            return Err(Error::DimensionMismatch {
                context: "loss gradient shape",
                expected: pass.outputs[s].as_slice().len(),
                found: lg.as_slice().len(),
            });
        }
        let mut upstream = lg.clone();
        for l in (0..n_layers).rev() {
            let layer = &model.layers[l];
            let act = model.activations[l];
            let z = &pass.pre_activations[l][s];
            let mut dz = upstream;
            for (d, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= act.derivative(zv);
            }
            let x = &pass.traces[l].fwd_inputs[s];
            let g = &mut grads[l];
            for t in 0..dz.rows() {
                g.weight.add_outer(dz.row(t), x.row(t));
                if let Some(b) = &mut g.bias {
                    axpy(1.0, dz.row(t), b);
                }
            }
            let mut dx = Matrix::zeros(dz.rows(), layer.n_in());
            for t in 0..dz.rows() {
                let row = layer.weight.matvec_t(dz.row(t))?;
                dx.row_mut(t).copy_from_slice(&row);
            }
            outgrads[l].push(dz);
            upstream = dx;
        }
    }
    for (trace, og) in pass.traces.iter_mut().zip(outgrads) {
        trace.bwd_outgrads = og;
    }
    Ok(grads)
}

/// Forward and backward with per-sample (sum-over-tokens) losses.
///
/// Since samples never interact, the recorded output-gradients of every
/// sample are exactly those of its own loss.
pub fn capture(model: &Model, batch: &[Sample]) -> Result<(ForwardPass, Vec<f64>)> {
    let mut pass = forward(model, batch)?;
    let (losses, grads) = loss_and_grads(model.loss, &pass.outputs, batch)?;
    backward(model, &mut pass, &grads)?;
    Ok((pass, losses))
}

pub fn per_sample_grad(model: &Model, sample: &Sample) -> Result<Vec<LayerGrad>> {
    let mut pass = forward(model, core::slice::from_ref(sample))?;
    let (_, grads) = loss_and_grads(model.loss, &pass.outputs, core::slice::from_ref(sample))?;
    backward(model, &mut pass, &grads)
}

pub fn sample_loss(model: &Model, sample: &Sample) -> Result<f64> {
    let out = model.predict(&sample.inputs)?;
    let (losses, _) = loss_and_grads(model.loss, core::slice::from_ref(&out), core::slice::from_ref(sample))?;
    Ok(losses[0])
}

/// Index of the largest output on the first token.
pub fn predict_class(model: &Model, sample: &Sample) -> Result<usize> {
    let out = model.predict(&sample.inputs)?;
    let row = out.row(0);
    Ok(row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0)
}
