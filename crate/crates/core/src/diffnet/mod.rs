//! Differentiable fully-connected network core.
//!
//! Provides forward evaluation with activation capture, exact reverse-mode
//! gradients of the MSE loss, and exact Hessian-vector products — everything
//! second-order MAML needs. All arithmetic is in `f64`.

mod kernel;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::scalar::{Dual, Real};

pub use kernel::BN_EPS;
use kernel::{BnUse, Mat, Params};

/// Activation applied after every hidden layer (never after the output layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    ReLU,
    Sigmoid,
    Identity,
}

/// Architecture of a fully-connected network with L affine layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Widths d_0..d_L (input dim first, output dim last).
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub use_batchnorm: bool,
}

impl NetSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, use_batchnorm: bool) -> Result<Self> {
        if layer_widths.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 layers (3 widths), got {} widths",
                layer_widths.len()
            )));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("all layer widths must be >= 1".into()));
        }
        Ok(NetSpec {
            layer_widths,
            activation,
            use_batchnorm,
        })
    }

    /// Number of affine layers L.
    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Widths of the hidden (representation) layers d_1..d_{L-1}.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_widths[1..self.layer_widths.len() - 1]
    }

    /// Total parameter count P = Σ d_l·(d_{l-1} + 1).
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }
}

/// Per-layer weights and biases of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    /// `weights[l]` has shape d_{l+1} × d_l.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Gradient with the same shape family as [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

fn flatten_layers(weights: &[DMatrix<f64>], biases: &[DVector<f64>]) -> DVector<f64> {
    let p: usize = weights
        .iter()
        .zip(biases)
        .map(|(w, b)| w.len() + b.len())
        .sum();
    let mut flat = Vec::with_capacity(p);
    for (w, b) in weights.iter().zip(biases) {
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                flat.push(w[(r, c)]);
            }
        }
        flat.extend(b.iter().copied());
    }
    DVector::from_vec(flat)
}

fn unflatten_layers(spec: &NetSpec, flat: &DVector<f64>) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>)> {
    if flat.len() != spec.param_count() {
        return Err(Error::dims("unflatten", spec.param_count(), flat.len()));
    }
    let mut weights = Vec::with_capacity(spec.layer_count());
    let mut biases = Vec::with_capacity(spec.layer_count());
    let mut idx = 0;
    for l in 0..spec.layer_count() {
        let (d_in, d_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let mut w = DMatrix::zeros(d_out, d_in);
        for r in 0..d_out {
            for c in 0..d_in {
                w[(r, c)] = flat[idx];
                idx += 1;
            }
        }
        let b = DVector::from_iterator(d_out, flat.as_slice()[idx..idx + d_out].iter().copied());
        idx += d_out;
        weights.push(w);
        biases.push(b);
    }
    Ok((weights, biases))
}

impl NetParams {
    /// Row-major per-layer flattening: W_1 rows, b_1, W_2 rows, b_2, ...
    pub fn flatten(&self) -> DVector<f64> {
        flatten_layers(&self.weights, &self.biases)
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn matches(&self, spec: &NetSpec) -> bool {
        self.weights.len() == spec.layer_count()
            && self.biases.len() == spec.layer_count()
            && (0..spec.layer_count()).all(|l| {
                self.weights[l].nrows() == spec.layer_widths[l + 1]
                    && self.weights[l].ncols() == spec.layer_widths[l]
                    && self.biases[l].len() == spec.layer_widths[l + 1]
            })
    }

    /// Gradient step `θ − lr·g`, leaving `self` untouched.
    pub fn step(&self, g: &Gradient, lr: f64) -> NetParams {
        let weights = self
            .weights
            .iter()
            .zip(&g.weights)
            .map(|(w, gw)| w - gw * lr)
            .collect();
        let biases = self
            .biases
            .iter()
            .zip(&g.biases)
            .map(|(b, gb)| b - gb * lr)
            .collect();
        NetParams { weights, biases }
    }
}

impl Gradient {
    pub fn flatten(&self) -> DVector<f64> {
        flatten_layers(&self.weights, &self.biases)
    }

    pub fn from_flat(spec: &NetSpec, flat: &DVector<f64>) -> Result<Gradient> {
        let (weights, biases) = unflatten_layers(spec, flat)?;
        Ok(Gradient { weights, biases })
    }
}

/// Inverse of [`NetParams::flatten`].
pub fn unflatten(spec: &NetSpec, flat: &DVector<f64>) -> Result<NetParams> {
    let (weights, biases) = unflatten_layers(spec, flat)?;
    Ok(NetParams { weights, biases })
}

/// Whether batch normalization uses per-batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    BatchStats,
    RunningStats,
}

/// Running normalization statistics for the hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    /// One vector per hidden layer, length d_l.
    pub running_mean: Vec<DVector<f64>>,
    pub running_var: Vec<DVector<f64>>,
    pub momentum: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    /// Fresh state: zero means, unit variances, batch-statistics mode.
    pub fn new(spec: &NetSpec) -> Self {
        BatchNormState {
            running_mean: spec
                .hidden_widths()
                .iter()
                .map(|&d| DVector::zeros(d))
                .collect(),
            running_var: spec
                .hidden_widths()
                .iter()
                .map(|&d| DVector::from_element(d, 1.0))
                .collect(),
            momentum: 0.1,
            mode: BnMode::BatchStats,
        }
    }

    fn matches(&self, spec: &NetSpec) -> bool {
        let hw = spec.hidden_widths();
        self.running_mean.len() == hw.len()
            && self.running_var.len() == hw.len()
            && hw.iter().enumerate().all(|(i, &d)| {
                self.running_mean[i].len() == d && self.running_var[i].len() == d
            })
    }

    /// Exponential-moving-average update from batch statistics captured in a
    /// trace: `running ← (1 − momentum)·running + momentum·batch`.
    pub fn absorb_trace(&mut self, trace: &ForwardTrace) -> Result<()> {
        let (means, vars) = match (&trace.batch_means, &trace.batch_vars) {
            (Some(m), Some(v)) => (m, v),
            _ => {
                return Err(Error::InvalidConfig(
                    "trace carries no batch statistics to absorb".into(),
                ))
            }
        };
        if means.len() != self.running_mean.len() {
            return Err(Error::dims("absorb_trace", self.running_mean.len(), means.len()));
        }
        let m = self.momentum;
        for l in 0..means.len() {
            self.running_mean[l] = &self.running_mean[l] * (1.0 - m) + &means[l] * m;
            self.running_var[l] = &self.running_var[l] * (1.0 - m) + &vars[l] * m;
        }
        Ok(())
    }
}

/// Per-layer post-activation matrices captured during a forward pass,
/// retained for backpropagation checks and representation analysis.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// H_1..H_L, each n×d_l; the last entry is the network output.
    pub layers: Vec<DMatrix<f64>>,
    /// Batch statistics per hidden layer when BN ran in batch mode.
    pub batch_means: Option<Vec<DVector<f64>>>,
    pub batch_vars: Option<Vec<DVector<f64>>>,
}

impl ForwardTrace {
    /// The hidden-layer activations H_1..H_{L-1}.
    pub fn hidden(&self) -> &[DMatrix<f64>] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.layers[self.layers.len() - 1]
    }
}

/// Deterministic fan-in-scaled initialization: weights uniform on
/// (−1/√d_in, +1/√d_in), biases zero.
pub fn init_params(spec: &NetSpec, seed: u64) -> NetParams {
    let mut rng = rng_from(seed);
    let mut weights = Vec::with_capacity(spec.layer_count());
    let mut biases = Vec::with_capacity(spec.layer_count());
    for l in 0..spec.layer_count() {
        let (d_in, d_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut w = DMatrix::zeros(d_out, d_in);
        for r in 0..d_out {
            for c in 0..d_in {
                w[(r, c)] = rng.random_range(-bound..bound);
            }
        }
        weights.push(w);
        biases.push(DVector::zeros(d_out));
    }
    NetParams { weights, biases }
}

fn mat_from_dmatrix<S: Real>(m: &DMatrix<f64>) -> Mat<S> {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, S::from_f64(m[(i, j)]));
        }
    }
    out
}

fn dmatrix_from_mat(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.rows, m.cols, m.data.iter().copied())
}

fn params_const<S: Real>(p: &NetParams) -> Params<S> {
    Params {
        w: p.weights.iter().map(mat_from_dmatrix).collect(),
        b: p
            .biases
            .iter()
            .map(|b| b.iter().map(|&x| S::from_f64(x)).collect())
            .collect(),
    }
}

/// Parameters seeded with tangents from `v`, following the flat layout.
fn params_dual(p: &NetParams, v: &DVector<f64>) -> Params<Dual> {
    let mut idx = 0;
    let mut w_out = Vec::with_capacity(p.weights.len());
    let mut b_out = Vec::with_capacity(p.biases.len());
    for (w, b) in p.weights.iter().zip(&p.biases) {
        let mut mw = Mat::zeros(w.nrows(), w.ncols());
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                mw.set(r, c, Dual::new(w[(r, c)], v[idx]));
                idx += 1;
            }
        }
        let mut vb = Vec::with_capacity(b.len());
        for e in b.iter() {
            vb.push(Dual::new(*e, v[idx]));
            idx += 1;
        }
        w_out.push(mw);
        b_out.push(vb);
    }
    Params { w: w_out, b: b_out }
}

fn bn_use<S: Real>(spec: &NetSpec, bn: Option<&BatchNormState>, n: usize) -> Result<BnUse<S>> {
    if !spec.use_batchnorm {
        return Ok(BnUse::Off);
    }
    let state = bn.ok_or_else(|| {
        Error::InvalidConfig("spec uses batchnorm but no BatchNormState was provided".into())
    })?;
    if !state.matches(spec) {
        return Err(Error::dims(
            "batchnorm state",
            format!("{:?}", spec.hidden_widths()),
            format!("{} layers", state.running_mean.len()),
        ));
    }
    match state.mode {
        BnMode::BatchStats => {
            if n < 2 {
                return Err(Error::BatchTooSmall(n));
            }
            Ok(BnUse::Batch)
        }
        BnMode::RunningStats => Ok(BnUse::Running {
            mean: state
                .running_mean
                .iter()
                .map(|v| v.iter().map(|&x| S::from_f64(x)).collect())
                .collect(),
            var: state
                .running_var
                .iter()
                .map(|v| v.iter().map(|&x| S::from_f64(x)).collect())
                .collect(),
        }),
    }
}

fn check_forward_dims(spec: &NetSpec, params: &NetParams, x: &DMatrix<f64>) -> Result<()> {
    if !params.matches(spec) {
        return Err(Error::dims(
            "params vs spec",
            format!("{:?}", spec.layer_widths),
            "mismatched parameter shapes",
        ));
    }
    if x.ncols() != spec.input_dim() {
        return Err(Error::dims("input columns", spec.input_dim(), x.ncols()));
    }
    Ok(())
}

/// Runs the network on `x` (rows are samples) and captures every layer's
/// post-activation output.
pub fn forward(
    spec: &NetSpec,
    params: &NetParams,
    x: &DMatrix<f64>,
    bn: Option<&BatchNormState>,
) -> Result<(DMatrix<f64>, ForwardTrace)> {
    check_forward_dims(spec, params, x)?;
    let bnu = bn_use::<f64>(spec, bn, x.nrows())?;
    let p = params_const::<f64>(params);
    let xm = mat_from_dmatrix::<f64>(x);
    let trace = kernel::forward(&spec.layer_widths, spec.activation, &p, &xm, &bnu);

    let layers: Vec<DMatrix<f64>> = trace.h.iter().map(dmatrix_from_mat).collect();
    let (batch_means, batch_vars) = if matches!(bnu, BnUse::Batch) {
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for bt in trace.bn.iter().flatten() {
            means.push(DVector::from_vec(bt.mean.clone()));
            vars.push(DVector::from_vec(bt.var.clone()));
        }
        (Some(means), Some(vars))
    } else {
        (None, None)
    };
    let output = layers.last().unwrap().clone();
    Ok((
        output,
        ForwardTrace {
            layers,
            batch_means,
            batch_vars,
        },
    ))
}

/// Mean of squared entry-wise differences over all n·d entries.
pub fn mse_loss(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dims(
            "mse_loss",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let n = pred.nrows() * pred.ncols();
    if n == 0 {
        return Err(Error::InvalidConfig("mse_loss on empty matrices".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / n as f64)
}

fn check_loss_dims(spec: &NetSpec, t: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<()> {
    if t.ncols() != spec.output_dim() || t.nrows() != x.nrows() {
        return Err(Error::dims(
            "target shape",
            format!("{}x{}", x.nrows(), spec.output_dim()),
            format!("{}x{}", t.nrows(), t.ncols()),
        ));
    }
    Ok(())
}

/// MSE loss and its exact reverse-mode gradient w.r.t. every parameter.
/// With BN in batch mode the gradient flows through the batch statistics.
pub fn loss_grad(
    spec: &NetSpec,
    params: &NetParams,
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    bn: Option<&BatchNormState>,
) -> Result<(f64, Gradient)> {
    check_forward_dims(spec, params, x)?;
    check_loss_dims(spec, t, x)?;
    let bnu = bn_use::<f64>(spec, bn, x.nrows())?;
    let p = params_const::<f64>(params);
    let xm = mat_from_dmatrix::<f64>(x);
    let tm = mat_from_dmatrix::<f64>(t);
    let (loss, grads) = kernel::loss_and_grad(&spec.layer_widths, spec.activation, &p, &xm, &tm, &bnu);
    Ok((
        loss,
        Gradient {
            weights: grads.w.iter().map(dmatrix_from_mat).collect(),
            biases: grads.b.iter().map(|b| DVector::from_vec(b.clone())).collect(),
        },
    ))
}

/// Exact Hessian-vector product H·v of the MSE loss at `params`, computed by
/// differentiating the gradient along direction `v` with dual numbers.
pub fn hessian_vector_product(
    spec: &NetSpec,
    params: &NetParams,
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    v: &DVector<f64>,
    bn: Option<&BatchNormState>,
) -> Result<DVector<f64>> {
    check_forward_dims(spec, params, x)?;
    check_loss_dims(spec, t, x)?;
    if v.len() != spec.param_count() {
        return Err(Error::dims("hvp direction", spec.param_count(), v.len()));
    }
    let bnu = bn_use::<Dual>(spec, bn, x.nrows())?;
    let p = params_dual(params, v);
    let xm = mat_from_dmatrix::<Dual>(x);
    let tm = mat_from_dmatrix::<Dual>(t);
    let (_, grads) = kernel::loss_and_grad(&spec.layer_widths, spec.activation, &p, &xm, &tm, &bnu);

    let mut hv = Vec::with_capacity(spec.param_count());
    for (w, b) in grads.w.iter().zip(&grads.b) {
        for r in 0..w.rows {
            for c in 0..w.cols {
                hv.push(w.at(r, c).d);
            }
        }
        hv.extend(b.iter().map(|d| d.d));
    }
    Ok(DVector::from_vec(hv))
}

#[cfg(test)]
mod tests;
