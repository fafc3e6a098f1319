//! Central-difference gradient oracle.
//!
//! Every coordinate is perturbed by ±ε and the loss re-evaluated from
//! scratch by an independent reference forward pass evaluated in
//! double-double precision, so the difference quotient is not swamped by f64
//! rounding when true gradients are tiny (saturated gates, long products of
//! small weights). Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
//!
//! Kink guard: for ReLU cells a perturbation can push a pre-activation across
//! zero, where the loss is not differentiable and the two one-sided slopes
//! differ. A coordinate is excluded when the on/off pattern of the ReLU
//! pre-activations at `θ ± ε` differs from the pattern at `θ`.

mod dd;
mod reference;

pub use dd::Dd;
pub use reference::{reference_loss, Real};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{backward, forward, CellParams, HeadKind, ModelSpec, Params, SequenceBatch, Targets};
use crate::ndcore::Rng;

pub const DEFAULT_EPSILON: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

/// Anything exposing its coordinates as a list of flat blocks.
pub trait Coordinates: Clone {
    fn coord_blocks(&self) -> Vec<&[f64]>;
    fn coord_blocks_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Coordinates for Params {
    fn coord_blocks(&self) -> Vec<&[f64]> {
        self.blocks()
    }
    fn coord_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks_mut()
    }
}

impl Coordinates for Vec<f64> {
    fn coord_blocks(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }
    fn coord_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NumericGradient {
    /// Central-difference estimates, block by block.
    pub blocks: Vec<Vec<f64>>,
    /// `(block, index)` of coordinates where a perturbed loss was non-finite.
    pub non_finite: Vec<(usize, usize)>,
    /// `(block, index)` of coordinates skipped by the kink guard.
    pub near_kink: Vec<(usize, usize)>,
}

/// A loss value that can form a difference quotient.
pub trait LossValue: Copy {
    fn finite(self) -> bool;
    /// `(self − minus) / step`, with the subtraction done at full precision.
    fn quotient(self, minus: Self, step: f64) -> f64;
}

impl LossValue for f64 {
    fn finite(self) -> bool {
        self.is_finite()
    }
    fn quotient(self, minus: Self, step: f64) -> f64 {
        (self - minus) / step
    }
}

impl LossValue for Dd {
    fn finite(self) -> bool {
        self.is_finite()
    }
    fn quotient(self, minus: Self, step: f64) -> f64 {
        (self - minus).to_f64() / step
    }
}

/// `(loss(θ+ε) − loss(θ−ε)) / 2ε` for every coordinate.
pub fn numeric_gradient<P, L, F>(loss_fn: F, params: &P, epsilon: f64) -> Result<NumericGradient>
where
    P: Coordinates,
    L: LossValue,
    F: Fn(&P) -> L,
{
    numeric_gradient_guarded(|p| Ok((loss_fn(p), Vec::new())), params, epsilon)
}

/// Like [`numeric_gradient`], but `eval` also returns an activation pattern;
/// coordinates whose perturbations change the pattern are marked near-kink
/// and get a NaN estimate.
pub fn numeric_gradient_guarded<P, L, F>(eval: F, params: &P, epsilon: f64) -> Result<NumericGradient>
where
    P: Coordinates,
    L: LossValue,
    F: Fn(&P) -> Result<(L, Vec<bool>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (_, base_pattern) = eval(params)?;
    let shape: Vec<usize> = params.coord_blocks().iter().map(|b| b.len()).collect();
    let mut out = NumericGradient {
        blocks: shape.iter().map(|&n| vec![0.0; n]).collect(),
        non_finite: Vec::new(),
        near_kink: Vec::new(),
    };
    let mut work = params.clone();
    for (bi, &len) in shape.iter().enumerate() {
        for k in 0..len {
            let orig = work.coord_blocks()[bi][k];
            let (up, down) = (orig + epsilon, orig - epsilon);
            work.coord_blocks_mut()[bi][k] = up;
            let plus = eval(&work);
            work.coord_blocks_mut()[bi][k] = down;
            let minus = eval(&work);
            work.coord_blocks_mut()[bi][k] = orig;

            let ((lp, pp), (lm, pm)) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) if !e.is_divergence() => return Err(e),
                _ => {
                    out.non_finite.push((bi, k));
                    out.blocks[bi][k] = f64::NAN;
                    continue;
                }
            };
            if !(lp.finite() && lm.finite()) {
                out.non_finite.push((bi, k));
                out.blocks[bi][k] = f64::NAN;
                continue;
            }
            if pp != base_pattern || pm != base_pattern {
                out.near_kink.push((bi, k));
                out.blocks[bi][k] = f64::NAN;
                continue;
            }
            // The realised step `up − down` is exact in f64 and may differ
            // from 2ε by rounding of `orig ± ε`.
            out.blocks[bi][k] = lp.quotient(lm, up - down);
        }
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub blocks: Vec<BlockReport>,
    pub trials: usize,
    pub non_finite: usize,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn excluded(&self) -> usize {
        self.blocks.iter().map(|b| b.excluded).sum()
    }

    /// True when every checked coordinate is within `tol` and nothing blew up.
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite == 0 && self.checked() > 0 && self.max_rel_error() < tol
    }

    fn merge(&mut self, other: GradReport) {
        if self.blocks.is_empty() {
            *self = other;
            return;
        }
        for (mine, theirs) in self.blocks.iter_mut().zip(other.blocks) {
            mine.checked += theirs.checked;
            mine.excluded += theirs.excluded;
            if theirs.max_rel_error > mine.max_rel_error {
                mine.max_rel_error = theirs.max_rel_error;
                mine.worst_index = theirs.worst_index;
                mine.analytic = theirs.analytic;
                mine.numeric = theirs.numeric;
            }
        }
        self.trials += other.trials;
        self.non_finite += other.non_finite;
    }
}

/// Compare the analytic backward pass against central differences on one
/// fixed `(spec, params, batch)` instance.
pub fn compare(spec: &ModelSpec, params: &Params, batch: &SequenceBatch, epsilon: f64) -> Result<GradReport> {
    let out = forward(spec, params, batch)?;
    let analytic = backward(spec, params, &out.tape)?;
    let numeric = numeric_gradient_guarded(|p: &Params| reference_loss::<Dd>(spec, p, batch), params, epsilon)?;

    let names = params.block_names();
    let mut blocks = Vec::with_capacity(names.len());
    for (bi, (a_block, n_block)) in analytic.blocks().iter().zip(&numeric.blocks).enumerate() {
        let mut report = BlockReport {
            name: names[bi].clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: a_block.first().copied().unwrap_or(0.0),
            numeric: n_block.first().copied().unwrap_or(0.0),
            checked: 0,
            excluded: 0,
        };
        for (k, (&a, &n)) in a_block.iter().zip(n_block).enumerate() {
            if n.is_nan() {
                report.excluded += 1;
                continue;
            }
            report.checked += 1;
            let e = relative_error(a, n);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_index = k;
                report.analytic = a;
                report.numeric = n;
            }
        }
        blocks.push(report);
    }
    Ok(GradReport {
        blocks,
        trials: 1,
        non_finite: numeric.non_finite.len(),
    })
}

/// Instance sizes used by [`check_model`].
#[derive(Clone, Copy, Debug)]
pub struct InstanceShape {
    pub steps: usize,
    pub lanes: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self { steps: 10, lanes: 3 }
    }
}

/// A random model and batch for gradient checking. Parameters are drawn at
/// O(1) scale (not the tiny training init) so every block carries signal;
/// LSTM forget biases are centred on `spec.forget_bias`.
pub fn random_instance(spec: &ModelSpec, shape: InstanceShape, rng: &mut Rng) -> Result<(Params, SequenceBatch)> {
    let mut params = Params::init(spec, rng)?;
    let h = spec.hidden as f64;
    let mut draw = |block: &mut [f64], std: f64, mean: f64| {
        block.iter_mut().for_each(|x| *x = rng.normal(mean, std));
    };
    match &mut params.cell {
        CellParams::Rnn(p) => {
            draw(p.affine.w.as_mut_slice(), 0.6 / h.sqrt(), 0.0);
            draw(p.affine.v.as_mut_slice(), 0.5, 0.0);
            draw(p.affine.b.as_mut_slice(), 0.3, 0.0);
        }
        CellParams::Lstm(p) => {
            let fb = spec.forget_bias;
            for (gi, g) in p.gates_mut().into_iter().enumerate() {
                draw(g.w.as_mut_slice(), 0.5, 0.0);
                draw(g.v.as_mut_slice(), 0.5, 0.0);
                let mean = if gi == 1 { fb } else { 0.0 };
                draw(g.b.as_mut_slice(), 0.3, mean);
            }
        }
    }
    draw(params.head.u.as_mut_slice(), 0.5, 0.0);
    draw(params.head.c.as_mut_slice(), 0.3, 0.0);

    let n = shape.steps * shape.lanes * spec.input_dim;
    let inputs = (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    let targets = match spec.head {
        HeadKind::Regression => Targets::Regression((0..shape.lanes).map(|_| rng.normal(0.0, 1.0)).collect()),
        HeadKind::Softmax(k) => Targets::Classes((0..shape.lanes).map(|_| rng.below(k)).collect()),
    };
    let batch = SequenceBatch::new(shape.steps, shape.lanes, spec.input_dim, inputs, targets)?;
    Ok((params, batch))
}

/// Runs `trials` random instances and reports the worst agreement per block.
pub fn check_model(spec: &ModelSpec, trials: usize, seed: u64) -> Result<GradReport> {
    check_model_with(spec, trials, seed, InstanceShape::default(), DEFAULT_EPSILON)
}

pub fn check_model_with(
    spec: &ModelSpec,
    trials: usize,
    seed: u64,
    shape: InstanceShape,
    epsilon: f64,
) -> Result<GradReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let base = Rng::new(seed);
    let mut report = GradReport {
        blocks: Vec::new(),
        trials: 0,
        non_finite: 0,
    };
    for trial in 0..trials {
        let mut rng = base.fork(trial as u64);
        let (params, batch) = random_instance(spec, shape, &mut rng)?;
        report.merge(compare(spec, &params, &batch, epsilon)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Activation;
    use crate::network::CellKind;

    #[test]
    fn reference_forward_matches_production_forward() {
        for spec in [
            ModelSpec::irnn(4, 2, HeadKind::Regression),
            ModelSpec::tanh_rnn(4, 2, HeadKind::Softmax(3)),
            ModelSpec::lstm(3, 2, HeadKind::Softmax(4), 4.0),
            ModelSpec::lstm(3, 2, HeadKind::Regression, 20.0),
        ] {
            let (params, batch) = random_instance(&spec, InstanceShape::default(), &mut Rng::new(9)).unwrap();
            let prod = forward(&spec, &params, &batch).unwrap().loss;
            let (r64, _) = reference_loss::<f64>(&spec, &params, &batch).unwrap();
            let (rdd, _) = reference_loss::<Dd>(&spec, &params, &batch).unwrap();
            assert!((prod - r64).abs() <= 1e-12 * prod.abs().max(1.0), "{spec:?}");
            assert!((prod - rdd.to_f64()).abs() <= 1e-12 * prod.abs().max(1.0), "{spec:?}");
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let g = numeric_gradient(|p: &Vec<f64>| p[0] * p[0], &vec![3.0], 1e-5).unwrap();
        assert!((g.blocks[0][0] - 6.0).abs() < 1e-9, "{}", g.blocks[0][0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = numeric_gradient(|_: &Vec<f64>| 4.2, &vec![1.0, -2.0, 3.0], 1e-5).unwrap();
        assert!(g.blocks[0].iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn non_finite_loss_is_reported_per_coordinate() {
        let g = numeric_gradient(|p: &Vec<f64>| if p[1] > 0.0 { f64::INFINITY } else { p[0] }, &vec![1.0, 0.0], 1e-5).unwrap();
        assert_eq!(g.non_finite, vec![(0, 1)]);
        assert!((g.blocks[0][0] - 1.0).abs() < 1e-9);
        assert!(numeric_gradient(|_: &Vec<f64>| 0.0, &vec![1.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(0.0, 1e-10), 1e-2);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn crnn_small_model_passes() {
        let spec = ModelSpec::irnn(5, 2, HeadKind::Regression);
        let r = check_model(&spec, 3, 1).unwrap();
        assert!(r.passes(1e-4), "{r:#?}");
    }

    #[test]
    fn linear_rnn_is_tight() {
        let spec = ModelSpec {
            cell: CellKind::Rnn(Activation::Linear),
            ..ModelSpec::irnn(5, 2, HeadKind::Regression)
        };
        let r = check_model(&spec, 3, 2).unwrap();
        assert_eq!(r.excluded(), 0);
        assert!(r.passes(1e-6), "{r:#?}");
    }

    #[test]
    fn saturated_lstm_passes() {
        let spec = ModelSpec::lstm(5, 2, HeadKind::Regression, 20.0);
        let r = check_model(&spec, 3, 3).unwrap();
        assert!(r.passes(1e-4), "{r:#?}");
    }

    #[test]
    fn softmax_heads_pass() {
        for spec in [
            ModelSpec::tanh_rnn(5, 2, HeadKind::Softmax(4)),
            ModelSpec::lstm(4, 2, HeadKind::Softmax(3), 1.0),
            ModelSpec::irnn(5, 2, HeadKind::Softmax(3)),
        ] {
            let r = check_model(&spec, 2, 4).unwrap();
            assert!(r.passes(1e-4), "{spec:?}: {r:#?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let spec = ModelSpec::tanh_rnn(3, 2, HeadKind::Regression);
        let (params, batch) = random_instance(&spec, InstanceShape::default(), &mut Rng::new(0)).unwrap();
        let out = forward(&spec, &params, &batch).unwrap();
        let mut g = backward(&spec, &params, &out.tape).unwrap();
        g.blocks_mut()[0][0] *= 1.01;
        let num = numeric_gradient(|p: &Params| forward(&spec, p, &batch).unwrap().loss, &params, 1e-5).unwrap();
        assert!(relative_error(g.blocks()[0][0], num.blocks[0][0]) > 1e-3);
    }
}
