//! Generic forward / backward kernels.
//!
//! Written once over [`Real`] so that the same code yields plain gradients at
//! `S = f64` and exact Hessian-vector products at `S = Dual` (the tangent of
//! the gradient map is `H·v`).

use super::Activation;
use crate::scalar::Real;

/// Epsilon added to the variance denominator in batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Dense row-major matrix over a generic scalar.
pub(crate) struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Real> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }
}

/// Layered parameters: `w[l]` is `d_l × d_{l-1}` (row o = output unit o).
pub(crate) struct Params<S> {
    pub w: Vec<Mat<S>>,
    pub b: Vec<Vec<S>>,
}

/// How batch normalization enters the computation.
pub(crate) enum BnUse<S> {
    Off,
    /// Normalize with per-batch statistics; differentiated through them.
    Batch,
    /// Normalize with frozen running statistics (constants in the graph).
    Running { mean: Vec<Vec<S>>, var: Vec<Vec<S>> },
}

pub(crate) struct BnLayerTrace<S> {
    pub zhat: Mat<S>,
    pub inv_std: Vec<S>,
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub from_batch: bool,
}

pub(crate) struct Trace<S> {
    /// Post-activation `H_l` for l = 1..L; the last entry is the output.
    pub h: Vec<Mat<S>>,
    /// Per hidden layer, the normalization trace (None when BN is off).
    pub bn: Vec<Option<BnLayerTrace<S>>>,
}

#[inline]
fn act_apply<S: Real>(act: Activation, z: S) -> S {
    match act {
        Activation::ReLU => {
            if z.primal() > 0.0 {
                z
            } else {
                S::zero()
            }
        }
        Activation::Sigmoid => {
            let one = S::from_f64(1.0);
            one / (one + (-z).exp())
        }
        Activation::Identity => z,
    }
}

/// Derivative of the activation, reconstructed from the stored output `h`.
/// For ReLU the sign of `h` determines the mask (the subgradient at 0 is 0).
#[inline]
fn act_deriv<S: Real>(act: Activation, h: S) -> S {
    match act {
        Activation::ReLU => {
            if h.primal() > 0.0 {
                S::from_f64(1.0)
            } else {
                S::zero()
            }
        }
        Activation::Sigmoid => h * (S::from_f64(1.0) - h),
        Activation::Identity => S::from_f64(1.0),
    }
}

/// `z = a·wᵀ + b` with `a` n×k and `w` m×k.
fn affine<S: Real>(a: &Mat<S>, w: &Mat<S>, b: &[S]) -> Mat<S> {
    let (n, k, m) = (a.rows, a.cols, w.rows);
    debug_assert_eq!(w.cols, k);
    let mut z = Mat::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for o in 0..m {
            let wrow = &w.data[o * k..(o + 1) * k];
            let mut acc = b[o];
            for t in 0..k {
                acc = acc + arow[t] * wrow[t];
            }
            z.data[i * m + o] = acc;
        }
    }
    z
}

/// `dzᵀ·a` with `dz` n×m and `a` n×k, yielding the m×k weight gradient.
fn weight_grad<S: Real>(dz: &Mat<S>, a: &Mat<S>) -> Mat<S> {
    let (n, m, k) = (dz.rows, dz.cols, a.cols);
    let mut g = Mat::zeros(m, k);
    for i in 0..n {
        for o in 0..m {
            let c = dz.at(i, o);
            let grow = &mut g.data[o * k..(o + 1) * k];
            let arow = &a.data[i * k..(i + 1) * k];
            for t in 0..k {
                grow[t] = grow[t] + c * arow[t];
            }
        }
    }
    g
}

/// `dz·w` with `dz` n×m and `w` m×k, propagating the gradient to the inputs.
fn input_grad<S: Real>(dz: &Mat<S>, w: &Mat<S>) -> Mat<S> {
    let (n, m, k) = (dz.rows, dz.cols, w.cols);
    let mut g = Mat::zeros(n, k);
    for i in 0..n {
        let grow_base = i * k;
        for o in 0..m {
            let c = dz.at(i, o);
            let wrow = &w.data[o * k..(o + 1) * k];
            for t in 0..k {
                g.data[grow_base + t] = g.data[grow_base + t] + c * wrow[t];
            }
        }
    }
    g
}

fn col_sums<S: Real>(m: &Mat<S>) -> Vec<S> {
    let mut s = vec![S::zero(); m.cols];
    for i in 0..m.rows {
        for j in 0..m.cols {
            s[j] = s[j] + m.at(i, j);
        }
    }
    s
}

fn normalize<S: Real>(z: &Mat<S>, mean: &[S], inv_std: &[S]) -> Mat<S> {
    let mut zh = Mat::zeros(z.rows, z.cols);
    for i in 0..z.rows {
        for j in 0..z.cols {
            zh.set(i, j, (z.at(i, j) - mean[j]) * inv_std[j]);
        }
    }
    zh
}

pub(crate) fn forward<S: Real>(
    widths: &[usize],
    act: Activation,
    p: &Params<S>,
    x: &Mat<S>,
    bn: &BnUse<S>,
) -> Trace<S> {
    let layers = widths.len() - 1;
    let n = x.rows;
    let inv_n = S::from_f64(1.0 / n as f64);
    let eps = S::from_f64(BN_EPS);

    let mut h_list: Vec<Mat<S>> = Vec::with_capacity(layers);
    let mut bn_list: Vec<Option<BnLayerTrace<S>>> = Vec::with_capacity(layers - 1);

    for l in 0..layers {
        let z = {
            let a = if l == 0 { x } else { &h_list[l - 1] };
            affine(a, &p.w[l], &p.b[l])
        };
        if l == layers - 1 {
            // Output layer: affine only.
            h_list.push(z);
            continue;
        }
        let (pre_act, trace) = match bn {
            BnUse::Off => (z, None),
            BnUse::Batch => {
                let d = z.cols;
                let mut mean = col_sums(&z);
                for m in &mut mean {
                    *m = *m * inv_n;
                }
                let mut var = vec![S::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        let c = z.at(i, j) - mean[j];
                        var[j] = var[j] + c * c;
                    }
                }
                for v in &mut var {
                    *v = *v * inv_n;
                }
                let inv_std: Vec<S> = var
                    .iter()
                    .map(|&v| S::from_f64(1.0) / (v + eps).sqrt())
                    .collect();
                let zhat = normalize(&z, &mean, &inv_std);
                let trace = BnLayerTrace {
                    inv_std,
                    mean,
                    var,
                    zhat: Mat::zeros(0, 0),
                    from_batch: true,
                };
                (zhat, Some(trace))
            }
            BnUse::Running { mean, var } => {
                let inv_std: Vec<S> = var[l]
                    .iter()
                    .map(|&v| S::from_f64(1.0) / (v + eps).sqrt())
                    .collect();
                let zhat = normalize(&z, &mean[l], &inv_std);
                let trace = BnLayerTrace {
                    inv_std,
                    mean: mean[l].clone(),
                    var: var[l].clone(),
                    zhat: Mat::zeros(0, 0),
                    from_batch: false,
                };
                (zhat, Some(trace))
            }
        };
        let mut h = Mat::zeros(n, pre_act.cols);
        for idx in 0..pre_act.data.len() {
            h.data[idx] = act_apply(act, pre_act.data[idx]);
        }
        let trace = trace.map(|mut t| {
            t.zhat = pre_act;
            t
        });
        h_list.push(h);
        bn_list.push(trace);
    }

    Trace {
        h: h_list,
        bn: bn_list,
    }
}

/// Mean squared error over all entries, plus its gradient w.r.t. every
/// parameter, in a single reverse sweep.
pub(crate) fn loss_and_grad<S: Real>(
    widths: &[usize],
    act: Activation,
    p: &Params<S>,
    x: &Mat<S>,
    t: &Mat<S>,
    bn: &BnUse<S>,
) -> (S, Params<S>) {
    let layers = widths.len() - 1;
    let trace = forward(widths, act, p, x, bn);
    let pred = &trace.h[layers - 1];
    let n = pred.rows;
    let d = pred.cols;
    let inv_nd = S::from_f64(1.0 / (n as f64 * d as f64));
    let inv_n = S::from_f64(1.0 / n as f64);
    let two = S::from_f64(2.0);

    let mut loss = S::zero();
    let mut up = Mat::zeros(n, d);
    for idx in 0..pred.data.len() {
        let r = pred.data[idx] - t.data[idx];
        loss = loss + r * r * inv_nd;
        up.data[idx] = two * r * inv_nd;
    }

    let mut gw: Vec<Mat<S>> = Vec::with_capacity(layers);
    let mut gb: Vec<Vec<S>> = Vec::with_capacity(layers);
    for l in 0..layers {
        gw.push(Mat::zeros(widths[l + 1], widths[l]));
        gb.push(vec![S::zero(); widths[l + 1]]);
    }

    for l in (0..layers).rev() {
        let dz = if l == layers - 1 {
            std::mem::replace(&mut up, Mat::zeros(0, 0))
        } else {
            let h = &trace.h[l];
            let mut dzh = Mat::zeros(h.rows, h.cols);
            for idx in 0..h.data.len() {
                dzh.data[idx] = up.data[idx] * act_deriv(act, h.data[idx]);
            }
            match &trace.bn[l] {
                None => dzh,
                Some(bt) if bt.from_batch => {
                    // Backprop through per-batch mean and variance:
                    // dz = inv_std · (dzh − mean(dzh) − zhat·mean(dzh·zhat))
                    let cols = dzh.cols;
                    let mut s1 = vec![S::zero(); cols];
                    let mut s2 = vec![S::zero(); cols];
                    for i in 0..dzh.rows {
                        for j in 0..cols {
                            let g = dzh.at(i, j);
                            s1[j] = s1[j] + g;
                            s2[j] = s2[j] + g * bt.zhat.at(i, j);
                        }
                    }
                    let mut dz = Mat::zeros(dzh.rows, cols);
                    for i in 0..dzh.rows {
                        for j in 0..cols {
                            let centered = dzh.at(i, j)
                                - (s1[j] + bt.zhat.at(i, j) * s2[j]) * inv_n;
                            dz.set(i, j, bt.inv_std[j] * centered);
                        }
                    }
                    dz
                }
                Some(bt) => {
                    // Running statistics are constants.
                    let mut dz = Mat::zeros(dzh.rows, dzh.cols);
                    for i in 0..dzh.rows {
                        for j in 0..dzh.cols {
                            dz.set(i, j, dzh.at(i, j) * bt.inv_std[j]);
                        }
                    }
                    dz
                }
            }
        };

        {
            let a_prev = if l == 0 { x } else { &trace.h[l - 1] };
            gw[l] = weight_grad(&dz, a_prev);
            gb[l] = col_sums(&dz);
        }
        if l > 0 {
            up = input_grad(&dz, &p.w[l]);
        }
    }

    (loss, Params { w: gw, b: gb })
}
