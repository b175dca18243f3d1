//! Add-on encoder → bottleneck → decoder branch next to a linear layer.
//!
//! The branch output `P_oᵀ B P_i x` is added to the layer's pre-activation.
//! With `B = 0` the network computes exactly what it did before, and the
//! gradient of `B` for one sample is `Σ_t (P_o 𝒟x_t)(P_i x_t)ᵀ`, whose
//! column-major `vec` is the projected gradient.

use alloc::vec::Vec;

use super::{ProjectionPair, ProjectionSet};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grads, LayerGrad, Model, Sample};
use crate::numerics::{axpy, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `k_i x n_i`, initialized with `P_i`.
    pub encoder: Matrix,
    /// `k_o x k_i`, zero.
    pub bottleneck: Matrix,
    /// `n_o x k_o`, initialized with `P_oᵀ`.
    pub decoder: Matrix,
}

impl Adapter {
    fn from_pair(pair: &ProjectionPair) -> Self {
        Self {
            encoder: pair.p_in.clone(),
            bottleneck: Matrix::zeros(pair.k_out(), pair.k_in()),
            decoder: pair.p_out.transpose(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckModel {
    base: Model,
    /// Parallel to `base.layers()`.
    adapters: Vec<Option<Adapter>>,
    /// Adapted layer indices in projection-set order.
    order: Vec<usize>,
}

/// What one sample's forward/backward through the augmented network yields.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGrads {
    pub outputs: Matrix,
    /// Per adapted layer, in projection-set order: `k_o x k_i`.
    pub bottleneck: Vec<Matrix>,
    /// Gradients of the original layers.
    pub base: Vec<LayerGrad>,
}

pub fn attach_bottleneck(model: &Model, set: &ProjectionSet) -> Result<BottleneckModel> {
    set.check_model(model)?;
    let mut adapters: Vec<Option<Adapter>> = model.layers().iter().map(|_| None).collect();
    let mut order = Vec::with_capacity(set.pairs().len());
    for pair in set.pairs() {
        let idx = model
            .layers()
            .iter()
            .position(|l| l.name == pair.layer_name)
            .ok_or_else(|| Error::UnknownLayer(pair.layer_name.clone()))?;
        adapters[idx] = Some(Adapter::from_pair(pair));
        order.push(idx);
    }
    Ok(BottleneckModel {
        base: model.clone(),
        adapters,
        order,
    })
}

fn rows_times_transpose(x: &Matrix, m: &Matrix) -> Result<Matrix> {
    // (T x a) · (b x a)ᵀ
    x.matmul(&m.transpose())
}

impl BottleneckModel {
    pub fn base(&self) -> &Model {
        &self.base
    }

    pub fn adapter(&self, layer: &str) -> Option<&Adapter> {
        let idx = self.base.layers().iter().position(|l| l.name == layer)?;
        self.adapters[idx].as_ref()
    }

    pub fn adapter_mut(&mut self, layer: &str) -> Option<&mut Adapter> {
        let idx = self.base.layers().iter().position(|l| l.name == layer)?;
        self.adapters[idx].as_mut()
    }

    pub fn forward_outputs(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cache(inputs)?.0)
    }

    /// Returns outputs plus, per layer, (input, pre-activation, encoder output).
    #[allow(clippy::type_complexity)]
    fn forward_cache(&self, inputs: &Matrix) -> Result<(Matrix, Vec<(Matrix, Matrix, Option<Matrix>)>)> {
        if inputs.cols() != self.base.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "sample features",
                expected: self.base.input_dim(),
                found: inputs.cols(),
            });
        }
        let mut cache = Vec::with_capacity(self.adapters.len());
        let mut x = inputs.clone();
        for ((layer, act), adapter) in self
            .base
            .layers()
            .iter()
            .zip(self.base.activations())
            .zip(&self.adapters)
        {
            let mut z = rows_times_transpose(&x, &layer.weight)?;
            if let Some(b) = &layer.bias {
                for t in 0..z.rows() {
                    axpy(1.0, b, z.row_mut(t));
                }
            }
            let h1 = match adapter {
                Some(a) => {
                    let h1 = rows_times_transpose(&x, &a.encoder)?;
                    let h2 = rows_times_transpose(&h1, &a.bottleneck)?;
                    let branch = rows_times_transpose(&h2, &a.decoder)?;
                    z.add_scaled(1.0, &branch);
                    Some(h1)
                }
                None => None,
            };
            let mut y = z.clone();
            y.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            cache.push((x, z, h1));
            x = y;
        }
        Ok((x, cache))
    }

    /// Forward and backward of one sample's loss through the augmented network.
    pub fn run(&self, sample: &Sample) -> Result<AugmentedGrads> {
        let (outputs, cache) = self.forward_cache(&sample.inputs)?;
        let (_, mut loss_grads) = loss_and_grads(
            self.base.loss_kind(),
            core::slice::from_ref(&outputs),
            core::slice::from_ref(sample),
        )?;
        let mut upstream = loss_grads.pop().expect("one sample");
        let n = self.base.layers().len();
        let mut base: Vec<Option<LayerGrad>> = (0..n).map(|_| None).collect();
        let mut bottleneck: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();

        for l in (0..n).rev() {
            let layer = &self.base.layers()[l];
            let act = self.base.activations()[l];
            let (x, z, h1) = &cache[l];
            let mut dz = upstream;
            for (d, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *d *= act.derivative(zv);
            }
            // original layer
            let weight = dz.transpose().matmul(x)?;
            let bias = layer.bias.as_ref().map(|b| {
                let mut s = alloc::vec![0.0; b.len()];
                for t in 0..dz.rows() {
                    axpy(1.0, dz.row(t), &mut s);
                }
                s
            });
            let mut dx = dz.matmul(&layer.weight)?;
            // adapter branch
            if let (Some(a), Some(h1)) = (&self.adapters[l], h1) {
                let dh2 = dz.matmul(&a.decoder)?;
                bottleneck[l] = Some(dh2.transpose().matmul(h1)?);
                let dh1 = dh2.matmul(&a.bottleneck)?;
                dx.add_scaled(1.0, &dh1.matmul(&a.encoder)?);
            }
            base[l] = Some(LayerGrad { weight, bias });
            upstream = dx;
        }
        Ok(AugmentedGrads {
            outputs,
            bottleneck: self
                .order
                .iter()
                .map(|&i| bottleneck[i].take().expect("adapted layer"))
                .collect(),
            base: base.into_iter().map(|g| g.expect("every layer")).collect(),
        })
    }

    /// Column-major `vec` of every bottleneck gradient, concatenated in
    /// projection-set order.
    pub fn bottleneck_grad(&self, sample: &Sample) -> Result<Vec<f64>> {
        let grads = self.run(sample)?;
        Ok(grads
            .bottleneck
            .iter()
            .flat_map(|g| g.vec_col_major())
            .collect())
    }
}
