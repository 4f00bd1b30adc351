//! Minimal dense-network engine.
//!
//! Networks are plain MLPs described by a [`NetSpec`] and parameterised by a
//! flat [`ParamVector`]. Layer `l` stores its weight matrix `[out x in]`
//! row-major, followed by its bias `[out]`. Everything here is a pure
//! function of its inputs.

mod checkpoint;
mod matrix;

pub use checkpoint::{
    decode_records, encode_records, read_checkpoint, write_checkpoint, CheckpointRecord,
    FORMAT_VERSION, MAGIC,
};
pub use matrix::{argmax, Matrix};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped here before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Logits,
    Softmax,
}

/// Layer layout of a dense network.
///
/// `layer_dims` lists input, hidden and output widths; `activations` has one
/// entry per hidden layer. The head only describes how the output is meant to
/// be read: [`forward`] always returns pre-head logits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub head: Head,
}

impl NetSpec {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>, head: Head) -> Result<Self> {
        let spec = Self {
            layer_dims,
            activations,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// ReLU on every hidden layer.
    pub fn mlp(layer_dims: &[usize], head: Head) -> Result<Self> {
        let hidden = layer_dims.len().saturating_sub(2);
        Self::new(layer_dims.to_vec(), vec![Activation::Relu; hidden], head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::config("a network needs at least input and output dims"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::config("layer dims must be positive"));
        }
        if self.activations.len() != self.layer_dims.len() - 2 {
            return Err(Error::config(format!(
                "{} hidden layers but {} activations",
                self.layer_dims.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of layer `l`'s weight block inside the flat vector.
    fn layer_offset(&self, l: usize) -> usize {
        self.layer_dims[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// FNV-1a over the layout; binds parameter vectors to their network.
    pub fn spec_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for &d in &self.layer_dims {
            feed(&(d as u64).to_le_bytes());
        }
        feed(&[0xff]);
        for a in &self.activations {
            feed(&[*a as u8]);
        }
        feed(&[0xfe, self.head as u8]);
        h
    }
}

/// Flat parameter block of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    spec_hash: u64,
}

impl ParamVector {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            spec_hash: spec.spec_hash(),
        }
    }

    pub fn from_values(spec: &NetSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::config(format!(
                "parameter vector has {} values, network needs {}",
                values.len(),
                spec.param_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            values,
            spec_hash: spec.spec_hash(),
        })
    }

    /// Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(spec.param_count());
        for w in spec.layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..a)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            values,
            spec_hash: spec.spec_hash(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec_hash
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_spec(&self, spec: &NetSpec) -> Result<()> {
        if self.spec_hash != spec.spec_hash() || self.values.len() != spec.param_count() {
            return Err(Error::Protocol(format!(
                "parameter vector (hash {:016x}, len {}) does not match network {:?}",
                self.spec_hash,
                self.values.len(),
                spec.layer_dims
            )));
        }
        Ok(())
    }

    fn same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.spec_hash != other.spec_hash || self.values.len() != other.values.len() {
            return Err(Error::Protocol("parameter vectors belong to different networks".into()));
        }
        Ok(())
    }
}

/// Labeled minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::config("empty batch"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::config(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::numeric("batch inputs are not finite"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_inputs(spec: &NetSpec, params: &ParamVector, inputs: &Matrix) -> Result<()> {
    params.check_spec(spec)?;
    if inputs.cols() != spec.input_dim() {
        return Err(Error::config(format!(
            "input width {} does not match network input {}",
            inputs.cols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Applies weight layer `l` to `input`, without activation.
fn affine(spec: &NetSpec, params: &ParamVector, l: usize, input: &Matrix) -> Matrix {
    let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
    let off = spec.layer_offset(l);
    let w = &params.values[off..off + fan_in * fan_out];
    let b = &params.values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
    let mut out = Matrix::zeros(input.rows(), fan_out);
    for i in 0..input.rows() {
        let x = input.row(i);
        let y = out.row_mut(i);
        for o in 0..fan_out {
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for k in 0..fan_in {
                acc += wr[k] * x[k];
            }
            y[o] = acc;
        }
    }
    out
}

fn activate(m: &mut Matrix, act: Activation) {
    if act == Activation::Relu {
        for v in m.as_mut_slice() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// All layer outputs: entry 0 is the input, entry `l + 1` the (activated)
/// output of weight layer `l`; the last entry holds the logits.
fn forward_trace(
    spec: &NetSpec,
    params: &ParamVector,
    inputs: &Matrix,
    upto: usize,
) -> Result<Vec<Matrix>> {
    check_inputs(spec, params, inputs)?;
    let mut acts = Vec::with_capacity(upto + 1);
    acts.push(inputs.clone());
    for l in 0..upto {
        let mut z = affine(spec, params, l, &acts[l]);
        if l + 1 < spec.depth() {
            activate(&mut z, spec.activations[l]);
        }
        acts.push(z);
    }
    Ok(acts)
}

/// Logits `[n x C]` of the network on `inputs` (the head is not applied).
pub fn forward(spec: &NetSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    let mut acts = forward_trace(spec, params, inputs, spec.depth())?;
    let logits = acts.pop().unwrap();
    if !logits.is_finite() {
        return Err(Error::numeric("forward pass produced non-finite logits"));
    }
    Ok(logits)
}

/// Activations of `layer` (index into `layer_dims`; 0 is the input itself).
pub fn activations_at(
    spec: &NetSpec,
    params: &ParamVector,
    inputs: &Matrix,
    layer: usize,
) -> Result<Matrix> {
    if layer >= spec.layer_dims.len() {
        return Err(Error::config(format!(
            "layer {layer} out of range for a {}-layer network",
            spec.layer_dims.len()
        )));
    }
    Ok(forward_trace(spec, params, inputs, layer)?.pop().unwrap())
}

/// Applies the network's head: softmax rows for [`Head::Softmax`], logits otherwise.
pub fn predict_head(spec: &NetSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    let logits = forward(spec, params, inputs)?;
    Ok(match spec.head {
        Head::Softmax => softmax_rows(&logits),
        Head::Logits => logits,
    })
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let p = softmax(logits.row(i));
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// Mean negative log-likelihood of `labels` under row distributions `probs`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> f64 {
    let n = labels.len();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.get(i, y).max(LOG_CLAMP).ln())
        .sum();
    total / n as f64
}

/// Which loss the gradient is taken of.
#[derive(Clone, Copy, Debug)]
pub enum LossKind<'a> {
    /// Softmax cross-entropy on the network's own logits.
    CeOnLogits,
    /// Softmax cross-entropy on `weights[j] * f(x_j) + offset[j]`: the
    /// network's contribution to a mixture whose other members are frozen
    /// into `offset`.
    CeOnMixture {
        weights: &'a [f64],
        offset: &'a Matrix,
    },
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::config(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Gradient of the mean softmax cross-entropy w.r.t. logits, and the loss.
fn ce_logit_grad(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let probs = softmax_rows(logits);
    let loss = cross_entropy(&probs, labels);
    let n = labels.len() as f64;
    let mut grad = probs;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (loss, grad)
}

/// Backpropagates `dout` (gradient w.r.t. the logits) through the network.
fn backprop(
    spec: &NetSpec,
    params: &ParamVector,
    acts: &[Matrix],
    dout: Matrix,
) -> Result<ParamVector> {
    let mut grad = ParamVector::zeros(spec);
    let mut delta = dout;
    for l in (0..spec.depth()).rev() {
        let (fan_in, fan_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
        let off = spec.layer_offset(l);
        let input = &acts[l];
        {
            let (gw, gb) = grad.values[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for i in 0..delta.rows() {
                let d = delta.row(i);
                let x = input.row(i);
                for o in 0..fan_out {
                    let dv = d[o];
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    let gr = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for k in 0..fan_in {
                        gr[k] += dv * x[k];
                    }
                }
            }
            if !gw.iter().chain(gb.iter()).all(|v| v.is_finite()) {
                return Err(Error::Numeric {
                    context: "non-finite gradient".into(),
                    layer: Some(l),
                });
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.values[off..off + fan_in * fan_out];
        let mut next = Matrix::zeros(delta.rows(), fan_in);
        for i in 0..delta.rows() {
            let d = delta.row(i);
            let out = next.row_mut(i);
            for o in 0..fan_out {
                let dv = d[o];
                if dv == 0.0 {
                    continue;
                }
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                for k in 0..fan_in {
                    out[k] += dv * wr[k];
                }
            }
        }
        if spec.activations[l - 1] == Activation::Relu {
            let a = &acts[l];
            for (g, &h) in next.as_mut_slice().iter_mut().zip(a.as_slice()) {
                if h <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = next;
    }
    Ok(grad)
}

/// Loss value and parameter gradient for one network.
pub fn loss_and_grad(
    spec: &NetSpec,
    params: &ParamVector,
    batch: &Batch,
    kind: LossKind<'_>,
) -> Result<(f64, ParamVector)> {
    let mut acts = forward_trace(spec, params, &batch.inputs, spec.depth())?;
    check_labels(&batch.labels, spec.output_dim())?;
    let logits = acts.pop().unwrap();
    let (loss, dout) = match kind {
        LossKind::CeOnLogits => ce_logit_grad(&logits, &batch.labels),
        LossKind::CeOnMixture { weights, offset } => {
            if weights.len() != batch.len()
                || offset.rows() != batch.len()
                || offset.cols() != logits.cols()
            {
                return Err(Error::config("mixture weights/offset do not match the batch"));
            }
            let mut z = offset.clone();
            for i in 0..z.rows() {
                let f = logits.row(i);
                for (zv, fv) in z.row_mut(i).iter_mut().zip(f) {
                    *zv += weights[i] * fv;
                }
            }
            let (loss, mut dz) = ce_logit_grad(&z, &batch.labels);
            for i in 0..dz.rows() {
                for v in dz.row_mut(i) {
                    *v *= weights[i];
                }
            }
            (loss, dz)
        }
    };
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    acts.push(logits);
    let grad = backprop(spec, params, &acts, dout)?;
    Ok((loss, grad))
}

pub fn backward(
    spec: &NetSpec,
    params: &ParamVector,
    batch: &Batch,
    kind: LossKind<'_>,
) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch, kind).map(|(_, g)| g)
}

/// Backpropagates an arbitrary upstream gradient on the logits.
///
/// Used by losses defined outside this module (the gate's mixture loss).
pub fn grad_from_logit_grad(
    spec: &NetSpec,
    params: &ParamVector,
    inputs: &Matrix,
    dlogits: Matrix,
) -> Result<ParamVector> {
    let acts = forward_trace(spec, params, inputs, spec.depth())?;
    if dlogits.rows() != inputs.rows() || dlogits.cols() != spec.output_dim() {
        return Err(Error::config("logit gradient shape does not match the network"));
    }
    backprop(spec, params, &acts, dlogits)
}

/// Member of a mixture: its layout and parameters.
pub type Member<'a> = (&'a NetSpec, &'a ParamVector);

/// Per-sample weighted sum of member logits. `gate_weights` is `[n x K]`.
pub fn mixture_forward(members: &[Member<'_>], gate_weights: &Matrix, inputs: &Matrix) -> Result<Matrix> {
    if members.is_empty() {
        return Err(Error::config("mixture needs at least one expert"));
    }
    if gate_weights.rows() != inputs.rows() || gate_weights.cols() != members.len() {
        return Err(Error::config("gate weights must be [n x K]"));
    }
    let mut combined: Option<Matrix> = None;
    for (k, (spec, params)) in members.iter().enumerate() {
        let f = forward(spec, params, inputs)?;
        let acc = combined.get_or_insert_with(|| Matrix::zeros(f.rows(), f.cols()));
        if acc.cols() != f.cols() {
            return Err(Error::config("mixture members disagree on output width"));
        }
        for i in 0..f.rows() {
            let w = gate_weights.get(i, k);
            for (a, v) in acc.row_mut(i).iter_mut().zip(f.row(i)) {
                *a += w * v;
            }
        }
    }
    Ok(combined.unwrap())
}

/// Loss and gradients of a mixture's cross-entropy.
#[derive(Clone, Debug)]
pub struct MixtureGrad {
    pub loss: f64,
    pub expert_grads: Vec<ParamVector>,
    /// dL/dw for every entry of the `[n x K]` gate weight matrix.
    pub weight_grad: Matrix,
}

/// Cross-entropy of `softmax(sum_k w_jk f_k(x_j))` and its gradients w.r.t.
/// every member and every gate weight.
pub fn mixture_loss_grad(members: &[Member<'_>], gate_weights: &Matrix, batch: &Batch) -> Result<MixtureGrad> {
    if members.is_empty() {
        return Err(Error::config("mixture needs at least one expert"));
    }
    let n = batch.len();
    if gate_weights.rows() != n || gate_weights.cols() != members.len() {
        return Err(Error::config("gate weights must be [n x K]"));
    }
    let mut traces = Vec::with_capacity(members.len());
    for (spec, params) in members {
        traces.push(forward_trace(spec, params, &batch.inputs, spec.depth())?);
    }
    let classes = traces[0].last().unwrap().cols();
    if traces.iter().any(|t| t.last().unwrap().cols() != classes) {
        return Err(Error::config("mixture members disagree on output width"));
    }
    check_labels(&batch.labels, classes)?;
    let mut z = Matrix::zeros(n, classes);
    for (k, t) in traces.iter().enumerate() {
        let f = t.last().unwrap();
        for i in 0..n {
            let w = gate_weights.get(i, k);
            for (a, v) in z.row_mut(i).iter_mut().zip(f.row(i)) {
                *a += w * v;
            }
        }
    }
    let (loss, dz) = ce_logit_grad(&z, &batch.labels);
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite mixture loss"));
    }
    let mut weight_grad = Matrix::zeros(n, members.len());
    let mut expert_grads = Vec::with_capacity(members.len());
    for (k, ((spec, params), t)) in members.iter().zip(&traces).enumerate() {
        let f = t.last().unwrap();
        let mut df = dz.clone();
        for i in 0..n {
            let dzi = dz.row(i);
            weight_grad.set(i, k, dzi.iter().zip(f.row(i)).map(|(a, b)| a * b).sum());
            let w = gate_weights.get(i, k);
            for v in df.row_mut(i) {
                *v *= w;
            }
        }
        expert_grads.push(backprop(spec, params, t, df)?);
    }
    Ok(MixtureGrad {
        loss,
        expert_grads,
        weight_grad,
    })
}

/// SGD-with-momentum state for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            velocity: vec![0.0; len],
            lr,
            momentum,
        })
    }

    /// `v <- momentum * v + grad; params <- params - lr * v`, in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.same_layout(grad)?;
        if self.velocity.len() != params.len() {
            return Err(Error::config("optimizer velocity length does not match parameters"));
        }
        for ((p, v), g) in params
            .values
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(&grad.values)
        {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// Pure form of [`OptimizerState::step`].
pub fn sgdm_step(
    params: &ParamVector,
    grad: &ParamVector,
    opt: &OptimizerState,
) -> Result<(ParamVector, OptimizerState)> {
    let mut p = params.clone();
    let mut o = opt.clone();
    o.step(&mut p, grad)?;
    Ok((p, o))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}
