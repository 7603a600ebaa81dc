//! Multi-layer perceptron feature extractor, growable linear classifier head
//! and the momentum SGD optimizer that trains them.
//!
//! Batches are row-major matrices with one sample per row. Gradients are
//! derived by hand; `forward_batch` keeps the activations the backward pass
//! needs.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{check_finite, gemm, Mat, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `fan_in × fan_out`, so a batch maps as `X · W + b`.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        let bias = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        DenseLayer { weight: Mat::from_vec(fan_in, fan_out, weight).expect("finite init"), bias }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Feature extractor `g(x)`: rectifier on hidden layers, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBackbone {
    layers: Vec<DenseLayer>,
    frozen: bool,
}

/// Activations recorded during a batch forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer (the batch itself for layer 0, rectified activations after).
    inputs: Vec<Mat>,
    /// Pre-activation output of each layer; the last one is the feature batch.
    pre: Vec<Mat>,
}

impl MlpTrace {
    pub fn features(&self) -> &Mat {
        self.pre.last().expect("at least one layer")
    }

    pub fn into_features(mut self) -> Mat {
        self.pre.pop().expect("at least one layer")
    }

    /// Smallest |pre-activation| over hidden units, used to steer gradient
    /// checks away from rectifier kinks.
    pub fn min_hidden_margin(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpBackbone {
    /// `dims = [input_dim, hidden..., output_dim]`, weights uniform in ±1/√fan_in.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| DenseLayer::uniform(w[0], w[1], rng)).collect();
        Ok(MlpBackbone { layers, frozen: false })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("backbone needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].fan_out(), pair[1].fan_in())?;
        }
        for l in &layers {
            check_dim(l.fan_out(), l.bias.len())?;
            if !l.weight.is_finite() {
                return Err(Error::InvalidInput("non-finite layer weight".into()));
            }
            check_finite(&l.bias)?;
        }
        Ok(MlpBackbone { layers, frozen: false })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn forward_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let batch = Mat::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&batch)?.into_features().into_vec())
    }

    pub fn forward_batch(&self, x: &Mat) -> Result<MlpTrace> {
        check_dim(self.input_dim(), x.cols())?;
        let n = x.rows();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Mat::zeros(n, layer.fan_out());
            for r in 0..n {
                z.row_mut(r).copy_from_slice(&layer.bias);
            }
            gemm(1.0, &current, false, &layer.weight, false, 1.0, &mut z);
            let next = if i < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                Some(a)
            } else {
                None
            };
            inputs.push(current);
            pre.push(z);
            match next {
                Some(a) => current = a,
                None => break,
            }
        }
        Ok(MlpTrace { inputs, pre })
    }

    /// Gradients of the batch loss w.r.t. every parameter, given `dL/dfeatures`.
    pub fn backward(&self, trace: &MlpTrace, grad_features: &Mat) -> Result<BackboneGrads> {
        check_dim(trace.features().rows(), grad_features.rows())?;
        check_dim(self.output_dim(), grad_features.cols())?;
        let count = self.layers.len();
        let mut weights = vec![Mat::zeros(0, 0); count];
        let mut biases = vec![Vec::new(); count];
        let mut delta = grad_features.clone();
        for i in (0..count).rev() {
            let layer = &self.layers[i];
            let mut gw = Mat::zeros(layer.fan_in(), layer.fan_out());
            gemm(1.0, &trace.inputs[i], true, &delta, false, 0.0, &mut gw);
            let mut gb = vec![0.0; layer.fan_out()];
            for r in 0..delta.rows() {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            weights[i] = gw;
            biases[i] = gb;
            if i > 0 {
                let mut prev = Mat::zeros(delta.rows(), layer.fan_in());
                gemm(1.0, &delta, false, &layer.weight, true, 0.0, &mut prev);
                // rectifier derivative; the kink itself gets 0
                for (g, z) in prev.as_mut_slice().iter_mut().zip(trace.pre[i - 1].as_slice()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(BackboneGrads { weights, biases })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameters flattened layer by layer (weights then bias).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.parameter_count(), values.len())?;
        check_finite(values)?;
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let b = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        fnv1a(self.parameters().iter().copied())
    }
}

impl BackboneGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

pub(crate) fn fnv1a(values: impl Iterator<Item = f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Linear classifier `logits = Wᵀ f (+ b)` with one column per seen class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `d × classes`
    weight: Mat,
    bias: Option<Vec<f64>>,
    session_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weight: Mat,
    pub bias: Option<Vec<f64>>,
}

impl ClassifierHead {
    pub fn new(weight: Mat, bias: Option<Vec<f64>>, session_id: usize) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::InvalidInput("non-finite head weight".into()));
        }
        if let Some(b) = &bias {
            check_dim(weight.cols(), b.len())?;
            check_finite(b)?;
        }
        Ok(ClassifierHead { weight, bias, session_id })
    }

    pub fn random(dim: usize, classes: usize, with_bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let w = (0..dim * classes).map(|_| rng.uniform(-bound, bound)).collect();
        let bias = with_bias.then(|| vec![0.0; classes]);
        ClassifierHead {
            weight: Mat::from_vec(dim, classes, w).expect("finite init"),
            bias,
            session_id: 0,
        }
    }

    /// One column per prototype.
    pub fn from_columns(columns: &[Vec<f64>], with_bias: bool, session_id: usize) -> Result<Self> {
        let dim = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("head needs at least one column".into()))?;
        let weight = Mat::zeros(dim, 0).append_cols(columns)?;
        let bias = with_bias.then(|| vec![0.0; columns.len()]);
        Ok(ClassifierHead { weight, bias, session_id })
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn session_id(&self) -> usize {
        self.session_id
    }

    pub fn weight(&self) -> &Mat {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        self.weight.col(class)
    }

    pub fn forward_logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), f.len())?;
        let mut logits: Vec<f64> = self.bias.clone().unwrap_or_else(|| vec![0.0; self.num_classes()]);
        for (r, fr) in f.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(self.weight.row(r)) {
                *l += fr * w;
            }
        }
        Ok(logits)
    }

    pub fn forward_batch(&self, features: &Mat) -> Result<Mat> {
        check_dim(self.dim(), features.cols())?;
        let mut out = Mat::zeros(features.rows(), self.num_classes());
        if let Some(b) = &self.bias {
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(b);
            }
        }
        gemm(1.0, features, false, &self.weight, false, 1.0, &mut out);
        Ok(out)
    }

    /// Parameter gradients and `dL/dfeatures` for a batch.
    pub fn backward(&self, features: &Mat, grad_logits: &Mat) -> Result<(HeadGrads, Mat)> {
        check_dim(features.rows(), grad_logits.rows())?;
        check_dim(self.num_classes(), grad_logits.cols())?;
        let mut gw = Mat::zeros(self.dim(), self.num_classes());
        gemm(1.0, features, true, grad_logits, false, 0.0, &mut gw);
        let gb = self.bias.as_ref().map(|_| {
            let mut gb = vec![0.0; self.num_classes()];
            for r in 0..grad_logits.rows() {
                for (g, d) in gb.iter_mut().zip(grad_logits.row(r)) {
                    *g += d;
                }
            }
            gb
        });
        let mut gf = Mat::zeros(features.rows(), self.dim());
        gemm(1.0, grad_logits, false, &self.weight, true, 0.0, &mut gf);
        Ok((HeadGrads { weight: gw, bias: gb }, gf))
    }

    /// Appends one column per prototype; existing columns are copied bit for bit.
    pub fn extend(&self, prototypes: &[Vec<f64>], session_id: usize) -> Result<Self> {
        let weight = self.weight.append_cols(prototypes)?;
        let bias = self.bias.as_ref().map(|b| {
            let mut b = b.clone();
            b.resize(b.len() + prototypes.len(), 0.0);
            b
        });
        Ok(ClassifierHead { weight, bias, session_id })
    }

    /// Keeps the first `classes` columns.
    pub fn truncate(&self, classes: usize) -> Result<Self> {
        if classes == 0 || classes > self.num_classes() {
            return Err(Error::InvalidInput(format!(
                "cannot keep {classes} of {} columns",
                self.num_classes()
            )));
        }
        let keep: Vec<usize> = (0..classes).collect();
        Ok(ClassifierHead {
            weight: self.weight.select_cols(&keep),
            bias: self.bias.as_ref().map(|b| b[..classes].to_vec()),
            session_id: self.session_id,
        })
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = self.weight.as_slice().to_vec();
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let nw = self.weight.as_slice().len();
        check_dim(nw + self.bias.as_ref().map_or(0, Vec::len), values.len())?;
        check_finite(values)?;
        self.weight.as_mut_slice().copy_from_slice(&values[..nw]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&values[nw..]);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> HeadSnapshot {
        HeadSnapshot { head: self.clone() }
    }
}

impl HeadGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weight.as_slice().to_vec();
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
        out
    }
}

/// Frozen copy of a head captured at the end of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSnapshot {
    head: ClassifierHead,
}

impl HeadSnapshot {
    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn session_id(&self) -> usize {
        self.head.session_id
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn forward_logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.head.forward_logits(f)
    }

    pub fn forward_batch(&self, features: &Mat) -> Result<Mat> {
        self.head.forward_batch(features)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0005 }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `g ← grad + wd·w; v ← μ·v + g; w ← w − lr·v`.
/// Momentum buffers are keyed by slot and persist across steps.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd::default()
    }

    pub fn update(&mut self, cfg: &SgdConfig, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim(params.len(), grads.len())?;
        if self.buffers.len() <= slot {
            self.buffers.resize(slot + 1, Vec::new());
        }
        let buf = &mut self.buffers[slot];
        if buf.len() != params.len() {
            *buf = vec![0.0; params.len()];
        }
        for ((w, g), v) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
            let g = g + cfg.weight_decay * *w;
            *v = cfg.momentum * *v + g;
            *w -= cfg.learning_rate * *v;
        }
        Ok(())
    }

    /// Updates every backbone parameter; a frozen backbone is left untouched.
    pub fn step_backbone(&mut self, cfg: &SgdConfig, model: &mut MlpBackbone, grads: &BackboneGrads) -> Result<()> {
        check_dim(model.layers.len(), grads.weights.len())?;
        if model.frozen {
            return Ok(());
        }
        for (i, layer) in model.layers.iter_mut().enumerate() {
            check_dim(layer.weight.as_slice().len(), grads.weights[i].as_slice().len())?;
            self.update(cfg, 2 * i, layer.weight.as_mut_slice(), grads.weights[i].as_slice())?;
            self.update(cfg, 2 * i + 1, &mut layer.bias, &grads.biases[i])?;
        }
        Ok(())
    }

    pub fn step_head(&mut self, cfg: &SgdConfig, head: &mut ClassifierHead, grads: &HeadGrads) -> Result<()> {
        self.update(cfg, 0, head.weight.as_mut_slice(), grads.weight.as_slice())?;
        if let (Some(b), Some(gb)) = (&mut head.bias, &grads.bias) {
            self.update(cfg, 1, b, gb)?;
        }
        Ok(())
    }
}

/// Backpropagates `dL/dlogits` (plus any extra `dL/dfeatures`, e.g. from a
/// metric loss) through head and backbone and applies one optimizer step to
/// each. The backbone is skipped entirely when frozen.
#[allow(clippy::too_many_arguments)]
pub fn backward_and_step(
    model: &mut MlpBackbone,
    head: &mut ClassifierHead,
    trace: &MlpTrace,
    grad_logits: &Mat,
    extra_feature_grad: Option<&Mat>,
    cfg: &SgdConfig,
    backbone_opt: &mut Sgd,
    head_opt: &mut Sgd,
) -> Result<()> {
    let (head_grads, mut grad_features) = head.backward(trace.features(), grad_logits)?;
    if !model.is_frozen() {
        if let Some(extra) = extra_feature_grad {
            check_dim(grad_features.rows(), extra.rows())?;
            check_dim(grad_features.cols(), extra.cols())?;
            for (g, e) in grad_features.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                *g += e;
            }
        }
        let grads = model.backward(trace, &grad_features)?;
        backbone_opt.step_backbone(cfg, model, &grads)?;
    }
    head_opt.step_head(cfg, head, &head_grads)
}
