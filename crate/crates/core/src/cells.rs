//! Single-step forward and backward for the plain recurrent cell
//! `h = g(W h_prev + V x + b)` and a standard forget-gate LSTM.
//!
//! Forward steps return caches holding pre-activations so the backward step
//! never recomputes anything. The `*_acc` variants accumulate parameter
//! gradients into an existing buffer; they are what the unrolled network
//! uses, the allocating versions exist for single-step use and tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{axpy, matvec_t_acc, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            // g(0) = 0, and g'(0) = 0 below.
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
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
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::invalid(format!("unknown activation {s:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        })
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_len(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("{what} len {got}"), format!("expected {want}")));
    }
    Ok(())
}

/// Parameters of one affine map `W h + V x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub v: Matrix,
    pub b: Vector,
}

impl Affine {
    pub fn new(w: Matrix, v: Matrix, b: Vector) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(Error::shape("Affine", "square W", format!("{:?}", w.shape())));
        }
        if v.rows() != w.rows() || b.len() != w.rows() {
            return Err(Error::shape(
                "Affine",
                format!("W {}x{}", w.rows(), w.cols()),
                format!("V {}x{}, b {}", v.rows(), v.cols(), b.len()),
            ));
        }
        Ok(Self { w, v, b })
    }

    pub fn zeros(h: usize, d: usize) -> Self {
        Self {
            w: Matrix::zeros(h, h),
            v: Matrix::zeros(h, d),
            b: Vector::zeros(h),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.v.cols()
    }

    /// `out = W h + V x + b`.
    #[inline]
    fn preact_into(&self, h_prev: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.v.cols();
        for (i, o) in out.iter_mut().enumerate() {
            let vx = crate::ndcore::dot(&self.v.as_slice()[i * d..(i + 1) * d], x);
            *o = crate::ndcore::dot(self.w.row(i), h_prev) + vx + self.b[i];
        }
    }

    /// Accumulate gradients for a pre-activation delta `dz` into `grad`, and
    /// add `Wᵀ dz` to `dh_prev`.
    #[inline]
    fn backprop_acc(&self, dz: &[f64], h_prev: &[f64], x: &[f64], grad: &mut Affine, dh_prev: &mut [f64]) {
        grad.w
            .add_outer(1.0, dz, h_prev)
            .expect("cache shapes checked at step time");
        grad.v.add_outer(1.0, dz, x).expect("cache shapes checked at step time");
        axpy(1.0, dz, grad.b.as_mut_slice());
        matvec_t_acc(&self.w, dz, dh_prev).expect("cache shapes checked at step time");
    }

    pub(crate) fn blocks(&self) -> [&[f64]; 3] {
        [self.w.as_slice(), self.v.as_slice(), self.b.as_slice()]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [self.w.as_mut_slice(), self.v.as_mut_slice(), self.b.as_mut_slice()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub affine: Affine,
    pub activation: Activation,
}

impl RnnParams {
    pub fn new(w: Matrix, v: Matrix, b: Vector, activation: Activation) -> Result<Self> {
        Ok(Self {
            affine: Affine::new(w, v, b)?,
            activation,
        })
    }

    pub fn hidden(&self) -> usize {
        self.affine.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.affine.input_dim()
    }

    pub fn w(&self) -> &Matrix {
        &self.affine.w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnCache {
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub preact: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnGrads {
    pub dw: Matrix,
    pub dv: Matrix,
    pub db: Vector,
}

fn check_rnn_inputs(op: &'static str, p: &RnnParams, h_prev: &[f64], x: &[f64]) -> Result<()> {
    check_len(op, "h_prev", h_prev.len(), p.hidden())?;
    check_len(op, "x", x.len(), p.input_dim())
}

/// Writes `h` and `preact` for one lane; shapes must already be checked.
#[inline]
pub(crate) fn rnn_forward_raw(p: &RnnParams, h_prev: &[f64], x: &[f64], preact: &mut [f64], h: &mut [f64]) {
    p.affine.preact_into(h_prev, x, preact);
    for (hi, &z) in h.iter_mut().zip(preact.iter()) {
        *hi = p.activation.apply(z);
    }
}

pub fn rnn_step(p: &RnnParams, h_prev: &Vector, x: &Vector) -> Result<(Vector, RnnCache)> {
    check_rnn_inputs("rnn_step", p, h_prev.as_slice(), x.as_slice())?;
    let n = p.hidden();
    let mut preact = vec![0.0; n];
    let mut h = vec![0.0; n];
    rnn_forward_raw(p, h_prev.as_slice(), x.as_slice(), &mut preact, &mut h);
    let cache = RnnCache {
        h_prev: h_prev.as_slice().to_vec(),
        x: x.as_slice().to_vec(),
        preact,
    };
    Ok((Vector::new(h), cache))
}

/// Backward through one step, accumulating into `grad` (same shapes as `p`).
/// Returns `dh_prev = Wᵀ (dh ⊙ g'(preact))`.
pub fn rnn_backstep_acc(p: &RnnParams, cache: &RnnCache, dh: &[f64], grad: &mut Affine) -> Result<Vec<f64>> {
    check_rnn_inputs("rnn_backstep", p, &cache.h_prev, &cache.x)?;
    check_len("rnn_backstep", "preact", cache.preact.len(), p.hidden())?;
    check_len("rnn_backstep", "dh", dh.len(), p.hidden())?;
    if grad.w.shape() != p.affine.w.shape() || grad.v.shape() != p.affine.v.shape() {
        return Err(Error::shape(
            "rnn_backstep",
            "gradient buffer",
            "params of a different shape",
        ));
    }
    let masked: Vec<f64> = dh
        .iter()
        .zip(&cache.preact)
        .map(|(&d, &z)| d * p.activation.derivative(z))
        .collect();
    let mut dh_prev = vec![0.0; p.hidden()];
    p.affine
        .backprop_acc(&masked, &cache.h_prev, &cache.x, grad, &mut dh_prev);
    Ok(dh_prev)
}

pub fn rnn_backstep(p: &RnnParams, cache: &RnnCache, dh: &Vector) -> Result<(Vector, RnnGrads)> {
    let mut grad = Affine::zeros(p.hidden(), p.input_dim());
    let dh_prev = rnn_backstep_acc(p, cache, dh.as_slice(), &mut grad)?;
    Ok((
        Vector::new(dh_prev),
        RnnGrads {
            dw: grad.w,
            dv: grad.v,
            db: grad.b,
        },
    ))
}

/// Standard LSTM without peepholes: input, forget, output gates and a tanh
/// candidate, each with its own `W`, `V`, `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input: Affine,
    pub forget: Affine,
    pub output: Affine,
    pub candidate: Affine,
}

impl LstmParams {
    pub fn new(input: Affine, forget: Affine, output: Affine, candidate: Affine) -> Result<Self> {
        let (h, d) = (input.hidden(), input.input_dim());
        for g in [&forget, &output, &candidate] {
            if g.hidden() != h || g.input_dim() != d {
                return Err(Error::shape(
                    "LstmParams",
                    format!("gate H={h} D={d}"),
                    format!("gate H={} D={}", g.hidden(), g.input_dim()),
                ));
            }
        }
        Ok(Self {
            input,
            forget,
            output,
            candidate,
        })
    }

    pub fn zeros(h: usize, d: usize) -> Self {
        Self {
            input: Affine::zeros(h, d),
            forget: Affine::zeros(h, d),
            output: Affine::zeros(h, d),
            candidate: Affine::zeros(h, d),
        }
    }

    pub fn hidden(&self) -> usize {
        self.input.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.input.input_dim()
    }

    /// Gates in serialization order.
    pub fn gates(&self) -> [&Affine; 4] {
        [&self.input, &self.forget, &self.output, &self.candidate]
    }

    pub fn gates_mut(&mut self) -> [&mut Affine; 4] {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.output,
            &mut self.candidate,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCache {
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub u: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

fn check_lstm_inputs(op: &'static str, p: &LstmParams, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> Result<()> {
    check_len(op, "h_prev", h_prev.len(), p.hidden())?;
    check_len(op, "c_prev", c_prev.len(), p.hidden())?;
    check_len(op, "x", x.len(), p.input_dim())
}

/// One LSTM step on raw slices. Writes `h`, `c` and fills `cache`.
pub(crate) fn lstm_forward_raw(
    p: &LstmParams,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
    h: &mut [f64],
    c: &mut [f64],
    cache: &mut LstmCache,
) {
    let n = p.hidden();
    for buf in [&mut cache.i, &mut cache.f, &mut cache.o, &mut cache.u, &mut cache.tanh_c] {
        buf.resize(n, 0.0);
    }
    p.input.preact_into(h_prev, x, &mut cache.i);
    p.forget.preact_into(h_prev, x, &mut cache.f);
    p.output.preact_into(h_prev, x, &mut cache.o);
    p.candidate.preact_into(h_prev, x, &mut cache.u);
    for k in 0..n {
        let i = sigmoid(cache.i[k]);
        let f = sigmoid(cache.f[k]);
        let o = sigmoid(cache.o[k]);
        let u = cache.u[k].tanh();
        let ck = f * c_prev[k] + i * u;
        let tc = ck.tanh();
        cache.i[k] = i;
        cache.f[k] = f;
        cache.o[k] = o;
        cache.u[k] = u;
        cache.tanh_c[k] = tc;
        c[k] = ck;
        h[k] = o * tc;
    }
    cache.h_prev.clear();
    cache.h_prev.extend_from_slice(h_prev);
    cache.c_prev.clear();
    cache.c_prev.extend_from_slice(c_prev);
    cache.x.clear();
    cache.x.extend_from_slice(x);
}

impl LstmCache {
    pub(crate) fn empty() -> Self {
        Self {
            h_prev: Vec::new(),
            c_prev: Vec::new(),
            x: Vec::new(),
            i: Vec::new(),
            f: Vec::new(),
            o: Vec::new(),
            u: Vec::new(),
            tanh_c: Vec::new(),
        }
    }
}

pub fn lstm_step(p: &LstmParams, h_prev: &Vector, c_prev: &Vector, x: &Vector) -> Result<(Vector, Vector, LstmCache)> {
    check_lstm_inputs("lstm_step", p, h_prev.as_slice(), c_prev.as_slice(), x.as_slice())?;
    let n = p.hidden();
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut cache = LstmCache::empty();
    lstm_forward_raw(
        p,
        h_prev.as_slice(),
        c_prev.as_slice(),
        x.as_slice(),
        &mut h,
        &mut c,
        &mut cache,
    );
    Ok((Vector::new(h), Vector::new(c), cache))
}

/// Backward through one LSTM step, accumulating into `grad`.
/// Returns `(dh_prev, dc_prev)`.
pub fn lstm_backstep_acc(
    p: &LstmParams,
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    grad: &mut LstmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = p.hidden();
    check_lstm_inputs("lstm_backstep", p, &cache.h_prev, &cache.c_prev, &cache.x)?;
    for (what, len) in [
        ("dh", dh.len()),
        ("dc", dc.len()),
        ("cache.i", cache.i.len()),
        ("cache.tanh_c", cache.tanh_c.len()),
    ] {
        check_len("lstm_backstep", what, len, n)?;
    }
    if grad.hidden() != n || grad.input_dim() != p.input_dim() {
        return Err(Error::shape(
            "lstm_backstep",
            "gradient buffer",
            "params of a different shape",
        ));
    }

    let mut dzi = vec![0.0; n];
    let mut dzf = vec![0.0; n];
    let mut dzo = vec![0.0; n];
    let mut dzu = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let (i, f, o, u, tc) = (cache.i[k], cache.f[k], cache.o[k], cache.u[k], cache.tanh_c[k]);
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dzo[k] = dh[k] * tc * o * (1.0 - o);
        dzi[k] = dct * u * i * (1.0 - i);
        dzf[k] = dct * cache.c_prev[k] * f * (1.0 - f);
        dzu[k] = dct * i * (1.0 - u * u);
        dc_prev[k] = dct * f;
    }

    let mut dh_prev = vec![0.0; n];
    let (h_prev, x) = (&cache.h_prev, &cache.x);
    p.input.backprop_acc(&dzi, h_prev, x, &mut grad.input, &mut dh_prev);
    p.forget.backprop_acc(&dzf, h_prev, x, &mut grad.forget, &mut dh_prev);
    p.output.backprop_acc(&dzo, h_prev, x, &mut grad.output, &mut dh_prev);
    p.candidate
        .backprop_acc(&dzu, h_prev, x, &mut grad.candidate, &mut dh_prev);
    Ok((dh_prev, dc_prev))
}

pub fn lstm_backstep(
    p: &LstmParams,
    cache: &LstmCache,
    dh: &Vector,
    dc: &Vector,
) -> Result<(Vector, Vector, LstmParams)> {
    let mut grad = LstmParams::zeros(p.hidden(), p.input_dim());
    let (dh_prev, dc_prev) = lstm_backstep_acc(p, cache, dh.as_slice(), dc.as_slice(), &mut grad)?;
    Ok((Vector::new(dh_prev), Vector::new(dc_prev), grad))
}
