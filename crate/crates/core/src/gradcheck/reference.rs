//! A deliberately naive forward pass, generic over the scalar type, used only
//! to evaluate perturbed losses for the oracle. It shares no code with the
//! production forward pass.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::dd::Dd;
use crate::cells::Activation;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::network::{CellKind, CellParams, HeadKind, ModelSpec, Params, SequenceBatch, Targets};

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn positive(self) -> bool;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
    fn positive(self) -> bool {
        self > 0.0
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

impl Real for Dd {
    fn from_f64(x: f64) -> Self {
        Dd::from_f64(x)
    }
    fn exp(self) -> Self {
        Dd::exp(self)
    }
    fn ln(self) -> Self {
        Dd::ln(self)
    }
    fn tanh(self) -> Self {
        Dd::tanh(self)
    }
    fn sigmoid(self) -> Self {
        Dd::sigmoid(self)
    }
    fn positive(self) -> bool {
        self.is_sign_positive_nonzero()
    }
    fn is_finite(self) -> bool {
        Dd::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        Dd::max(self, other)
    }
}

/// `M h + V x + b` with every product formed in `R`.
fn affine<R: Real>(w: &Matrix, v: &Matrix, b: &[f64], h: &[R], x: &[f64]) -> Vec<R> {
    (0..b.len())
        .map(|i| {
            let mut z = R::from_f64(b[i]);
            for (j, &hj) in h.iter().enumerate() {
                z = z + R::from_f64(w.get(i, j)) * hj;
            }
            for (j, &xj) in x.iter().enumerate() {
                z = z + R::from_f64(v.get(i, j)) * R::from_f64(xj);
            }
            z
        })
        .collect()
}

/// Mean batch loss and the ReLU on/off pattern of every pre-activation
/// (empty for other cells).
pub fn reference_loss<R: Real>(spec: &ModelSpec, params: &Params, batch: &SequenceBatch) -> Result<(R, Vec<bool>)> {
    let n = spec.hidden;
    let zero = R::from_f64(0.0);
    let mut pattern = Vec::new();
    let mut total = zero;
    for lane in 0..batch.lanes() {
        let mut h = vec![zero; n];
        match &params.cell {
            CellParams::Rnn(p) => {
                let act = match spec.cell {
                    CellKind::Rnn(a) => a,
                    CellKind::Lstm => return Err(Error::invalid("spec and params disagree on cell kind")),
                };
                let a = &p.affine;
                for t in 0..batch.steps() {
                    let z = affine(&a.w, &a.v, a.b.as_slice(), &h, batch.input(t, lane));
                    h = z
                        .into_iter()
                        .map(|zi| match act {
                            Activation::Relu => {
                                pattern.push(zi.positive());
                                if zi.positive() {
                                    zi
                                } else {
                                    zero
                                }
                            }
                            Activation::Tanh => zi.tanh(),
                            Activation::Linear => zi,
                        })
                        .collect();
                }
            }
            CellParams::Lstm(p) => {
                let mut c = vec![zero; n];
                for t in 0..batch.steps() {
                    let x = batch.input(t, lane);
                    let [gi, gf, go, gu] = p.gates().map(|g| affine(&g.w, &g.v, g.b.as_slice(), &h, x));
                    for k in 0..n {
                        c[k] = gf[k].sigmoid() * c[k] + gi[k].sigmoid() * gu[k].tanh();
                        h[k] = go[k].sigmoid() * c[k].tanh();
                    }
                }
            }
        }
        let u = &params.head.u;
        let logits: Vec<R> = (0..u.rows())
            .map(|i| {
                let mut z = R::from_f64(params.head.c[i]);
                for (j, &hj) in h.iter().enumerate() {
                    z = z + R::from_f64(u.get(i, j)) * hj;
                }
                z
            })
            .collect();
        let lane_loss = match (&batch.targets, spec.head) {
            (Targets::Regression(ys), HeadKind::Regression) => {
                let r = logits[0] - R::from_f64(ys[lane]);
                r * r
            }
            (Targets::Classes(ls), HeadKind::Softmax(_)) => {
                let m = logits.iter().copied().fold(logits[0], R::max);
                let s = logits.iter().fold(zero, |acc, &z| acc + (z - m).exp());
                m + s.ln() - logits[ls[lane]]
            }
            _ => return Err(Error::invalid("targets do not match head")),
        };
        total = total + lane_loss;
    }
    let loss = total / R::from_f64(batch.lanes() as f64);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: batch.steps(),
            reason: "reference loss is not finite".into(),
        });
    }
    Ok((loss, pattern))
}
