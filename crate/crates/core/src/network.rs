//! The unrolled sequence model: a recurrent cell run over `T` steps from a
//! zero state, followed by a readout on the final hidden state only.
//!
//! Losses are means over the batch. Batches are processed lane by lane in a
//! fixed order, so results are bitwise reproducible.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::{
    lstm_backstep_acc, lstm_forward_raw, rnn_backstep_acc, rnn_forward_raw, Activation, Affine,
    LstmCache, LstmParams, RnnCache, RnnParams,
};
use crate::error::{Error, Result};
use crate::init::{init_input_and_bias, init_recurrent, init_tanh_baseline, InitScheme, DEFAULT_INPUT_STD};
use crate::ndcore::{axpy, gaussian_fill, gaussian_vector, matvec_into, matvec_t_acc, Matrix, Rng, Vector};

/// Activations beyond this magnitude abort the run as diverged.
pub const OVERFLOW_LIMIT: f64 = 1e100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn(Activation),
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Regression,
    Softmax(usize),
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Regression => 1,
            HeadKind::Softmax(k) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub cell: CellKind,
    pub hidden: usize,
    pub input_dim: usize,
    pub head: HeadKind,
    pub init: InitScheme,
    pub input_init_std: f64,
    /// Initial forget-gate bias; only meaningful for LSTM cells.
    pub forget_bias: f64,
}

impl ModelSpec {
    /// ReLU network with identity recurrence and 0.001-std input weights.
    pub fn irnn(hidden: usize, input_dim: usize, head: HeadKind) -> Self {
        Self {
            cell: CellKind::Rnn(Activation::Relu),
            hidden,
            input_dim,
            head,
            init: InitScheme::Identity,
            input_init_std: DEFAULT_INPUT_STD,
            forget_bias: 0.0,
        }
    }

    pub fn tanh_rnn(hidden: usize, input_dim: usize, head: HeadKind) -> Self {
        Self {
            cell: CellKind::Rnn(Activation::Tanh),
            init: InitScheme::Standard,
            ..Self::irnn(hidden, input_dim, head)
        }
    }

    pub fn lstm(hidden: usize, input_dim: usize, head: HeadKind, forget_bias: f64) -> Self {
        Self {
            cell: CellKind::Lstm,
            forget_bias,
            ..Self::irnn(hidden, input_dim, head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::invalid(format!(
                "hidden ({}) and input_dim ({}) must be at least 1",
                self.hidden, self.input_dim
            )));
        }
        if let HeadKind::Softmax(k) = self.head {
            if k < 2 {
                return Err(Error::invalid(format!("softmax head needs at least 2 classes, got {k}")));
            }
        }
        self.init.validate()?;
        if !(self.input_init_std >= 0.0 && self.input_init_std.is_finite()) {
            return Err(Error::invalid(format!("input_init_std must be >= 0, got {}", self.input_init_std)));
        }
        if !self.forget_bias.is_finite() {
            return Err(Error::invalid("forget_bias must be finite"));
        }
        Ok(())
    }
}

/// Readout `logits = U h_T + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub u: Matrix,
    pub c: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Rnn(RnnParams),
    Lstm(LstmParams),
}

/// Every trainable block of a model. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub cell: CellParams,
    pub head: HeadParams,
}

pub type Gradients = Params;

const AFFINE_NAMES: [&str; 3] = ["W", "V", "b"];
const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl Params {
    /// Draws a fresh parameter set for `spec`. Order of draws: recurrent
    /// block(s) first, then the readout.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (h, d) = (spec.hidden, spec.input_dim);
        let cell = match spec.cell {
            CellKind::Rnn(activation) => {
                let (w, v, b) = match spec.init {
                    InitScheme::Standard => init_tanh_baseline(h, d, rng)?,
                    scheme => {
                        let w = init_recurrent(scheme, h, rng)?;
                        let (v, b) = init_input_and_bias(spec.input_init_std, h, d, rng)?;
                        (w, v, b)
                    }
                };
                CellParams::Rnn(RnnParams::new(w, v, b, activation)?)
            }
            CellKind::Lstm => {
                let std = spec.input_init_std;
                let mut gate = |bias: f64| -> Result<Affine> {
                    let w = gaussian_fill(h, h, 0.0, std, rng)?;
                    let v = gaussian_fill(h, d, 0.0, std, rng)?;
                    Affine::new(w, v, Vector::new(vec![bias; h]))
                };
                let input = gate(0.0)?;
                let forget = gate(spec.forget_bias)?;
                let output = gate(0.0)?;
                let candidate = gate(0.0)?;
                CellParams::Lstm(LstmParams::new(input, forget, output, candidate)?)
            }
        };
        let k = spec.head.outputs();
        let head = HeadParams {
            u: gaussian_fill(k, h, 0.0, spec.input_init_std, rng)?,
            c: gaussian_vector(k, 0.0, spec.input_init_std, rng)?,
        };
        Ok(Self { cell, head })
    }

    pub fn zeros_like(&self) -> Self {
        let cell = match &self.cell {
            CellParams::Rnn(p) => CellParams::Rnn(RnnParams {
                affine: Affine::zeros(p.hidden(), p.input_dim()),
                activation: p.activation,
            }),
            CellParams::Lstm(p) => CellParams::Lstm(LstmParams::zeros(p.hidden(), p.input_dim())),
        };
        Self {
            cell,
            head: HeadParams {
                u: self.head.u.zeros_like(),
                c: self.head.c.zeros_like(),
            },
        }
    }

    pub fn hidden(&self) -> usize {
        match &self.cell {
            CellParams::Rnn(p) => p.hidden(),
            CellParams::Lstm(p) => p.hidden(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.cell {
            CellParams::Rnn(p) => p.input_dim(),
            CellParams::Lstm(p) => p.input_dim(),
        }
    }

    /// Blocks in the fixed order used for serialization, clipping and updates.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        match &self.cell {
            CellParams::Rnn(p) => out.extend(p.affine.blocks()),
            CellParams::Lstm(p) => {
                for g in p.gates() {
                    out.extend(g.blocks());
                }
            }
        }
        out.push(self.head.u.as_slice());
        out.push(self.head.c.as_slice());
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        match &mut self.cell {
            CellParams::Rnn(p) => out.extend(p.affine.blocks_mut()),
            CellParams::Lstm(p) => {
                for g in p.gates_mut() {
                    out.extend(g.blocks_mut());
                }
            }
        }
        out.push(self.head.u.as_mut_slice());
        out.push(self.head.c.as_mut_slice());
        out
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        match &self.cell {
            CellParams::Rnn(_) => out.extend(AFFINE_NAMES.iter().map(|s| s.to_string())),
            CellParams::Lstm(_) => {
                for g in GATE_NAMES {
                    out.extend(AFFINE_NAMES.iter().map(|s| format!("{g}.{s}")));
                }
            }
        }
        out.push("head.U".into());
        out.push("head.c".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Cheap content hash used to detect a tape recorded against other params.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for block in self.blocks() {
            for x in block {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h = h.rotate_left(7) ^ block.len() as u64;
        }
        h
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        let a = self.blocks();
        let b = other.blocks();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let cell_ok = match (&self.cell, spec.cell) {
            (CellParams::Rnn(p), CellKind::Rnn(a)) => p.activation == a,
            (CellParams::Lstm(_), CellKind::Lstm) => true,
            _ => false,
        };
        if !cell_ok
            || self.hidden() != spec.hidden
            || self.input_dim() != spec.input_dim
            || self.head.u.shape() != (spec.head.outputs(), spec.hidden)
            || self.head.c.len() != spec.head.outputs()
        {
            return Err(Error::shape(
                "model",
                format!("spec {:?} H={} D={} head {:?}", spec.cell, spec.hidden, spec.input_dim, spec.head),
                format!("params H={} D={} head {:?}", self.hidden(), self.input_dim(), self.head.u.shape()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs laid out `[T][B][D]` in one flat buffer, plus per-lane targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    steps: usize,
    lanes: usize,
    dim: usize,
    inputs: Vec<f64>,
    pub targets: Targets,
}

impl SequenceBatch {
    pub fn new(steps: usize, lanes: usize, dim: usize, inputs: Vec<f64>, targets: Targets) -> Result<Self> {
        if steps == 0 || lanes == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "batch needs T, B, D >= 1, got T={steps} B={lanes} D={dim}"
            )));
        }
        if inputs.len() != steps * lanes * dim {
            return Err(Error::shape(
                "SequenceBatch",
                format!("[{steps}][{lanes}][{dim}]"),
                format!("{} values", inputs.len()),
            ));
        }
        if targets.len() != lanes {
            return Err(Error::shape(
                "SequenceBatch",
                format!("{lanes} lanes"),
                format!("{} targets", targets.len()),
            ));
        }
        Ok(Self {
            steps,
            lanes,
            dim,
            inputs,
            targets,
        })
    }

    /// Builds a batch from per-lane sequences `lanes[b][t]`.
    pub fn from_lanes(seqs: &[Vec<Vec<f64>>], targets: Targets) -> Result<Self> {
        let lanes = seqs.len();
        let steps = seqs.first().map_or(0, Vec::len);
        let dim = seqs.first().and_then(|s| s.first()).map_or(0, Vec::len);
        let mut inputs = Vec::with_capacity(steps * lanes * dim);
        for t in 0..steps {
            for (b, seq) in seqs.iter().enumerate() {
                let x = seq.get(t).filter(|x| x.len() == dim).ok_or_else(|| {
                    Error::shape("SequenceBatch::from_lanes", format!("T={steps} D={dim}"), format!("lane {b}"))
                })?;
                inputs.extend_from_slice(x);
            }
        }
        if seqs.iter().any(|s| s.len() != steps) {
            return Err(Error::shape("SequenceBatch::from_lanes", format!("T={steps}"), "ragged lanes"));
        }
        Self::new(steps, lanes, dim, inputs, targets)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn input(&self, t: usize, lane: usize) -> &[f64] {
        let off = (t * self.lanes + lane) * self.dim;
        &self.inputs[off..off + self.dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

enum LaneTape {
    Rnn(Vec<RnnCache>),
    Lstm(Vec<LstmCache>),
}

/// Everything recorded by `forward` that `backward` needs.
pub struct Tape {
    fingerprint: u64,
    lanes: Vec<LaneTape>,
    final_h: Vec<Vec<f64>>,
    /// `∂loss/∂logits` per lane, already divided by the batch size.
    dlogits: Vec<Vec<f64>>,
}

impl Tape {
    pub fn lanes(&self) -> usize {
        self.lanes.len()
    }

    pub fn final_hidden(&self, lane: usize) -> &[f64] {
        &self.final_h[lane]
    }

    /// ReLU on/off pattern of every recorded pre-activation, lane-major.
    /// Empty for cells without kinks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for lane in &self.lanes {
            if let LaneTape::Rnn(caches) = lane {
                for c in caches {
                    out.extend(c.preact.iter().map(|&z| z > 0.0));
                }
            }
        }
        out
    }

    /// Smallest |pre-activation| seen on the tape (RNN cells only).
    pub fn min_abs_preact(&self) -> f64 {
        let mut m = f64::INFINITY;
        for lane in &self.lanes {
            if let LaneTape::Rnn(caches) = lane {
                for c in caches {
                    for z in &c.preact {
                        m = m.min(z.abs());
                    }
                }
            }
        }
        m
    }
}

pub struct ForwardOutput {
    pub loss: f64,
    pub predictions: Predictions,
    pub tape: Tape,
}

fn check_batch(spec: &ModelSpec, params: &Params, batch: &SequenceBatch) -> Result<()> {
    spec.validate()?;
    params.check_against(spec)?;
    if batch.dim() != spec.input_dim {
        return Err(Error::shape(
            "forward",
            format!("input_dim {}", spec.input_dim),
            format!("batch D={}", batch.dim()),
        ));
    }
    match (&batch.targets, spec.head) {
        (Targets::Regression(_), HeadKind::Regression) => Ok(()),
        (Targets::Classes(ls), HeadKind::Softmax(k)) => match ls.iter().find(|&&l| l >= k) {
            Some(l) => Err(Error::invalid(format!("class label {l} out of range for {k} classes"))),
            None => Ok(()),
        },
        _ => Err(Error::invalid(format!(
            "targets do not match head {:?}",
            spec.head
        ))),
    }
}

fn check_finite(step: usize, values: &[f64], what: &str) -> Result<()> {
    if let Some(&bad) = values.iter().find(|x| !(x.abs() <= OVERFLOW_LIMIT)) {
        return Err(Error::Divergence {
            step,
            reason: format!("{what} reached {bad:e}"),
        });
    }
    Ok(())
}

/// Runs the cell over one lane, returning `h_T` and optionally the caches.
fn run_lane(params: &Params, batch: &SequenceBatch, lane: usize, record: bool) -> Result<(Vec<f64>, Option<LaneTape>)> {
    let n = params.hidden();
    let t_max = batch.steps();
    match &params.cell {
        CellParams::Rnn(p) => {
            let mut h = vec![0.0; n];
            let mut next = vec![0.0; n];
            let mut preact = vec![0.0; n];
            let mut caches = Vec::with_capacity(if record { t_max } else { 0 });
            for t in 0..t_max {
                let x = batch.input(t, lane);
                rnn_forward_raw(p, &h, x, &mut preact, &mut next);
                check_finite(t, &next, "hidden state")?;
                if record {
                    caches.push(RnnCache {
                        h_prev: h.clone(),
                        x: x.to_vec(),
                        preact: preact.clone(),
                    });
                }
                std::mem::swap(&mut h, &mut next);
            }
            Ok((h, record.then_some(LaneTape::Rnn(caches))))
        }
        CellParams::Lstm(p) => {
            let mut h = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut h_next = vec![0.0; n];
            let mut c_next = vec![0.0; n];
            let mut scratch = LstmCache::empty();
            let mut caches = Vec::with_capacity(if record { t_max } else { 0 });
            for t in 0..t_max {
                let mut cache = if record { LstmCache::empty() } else { std::mem::replace(&mut scratch, LstmCache::empty()) };
                lstm_forward_raw(p, &h, &c, batch.input(t, lane), &mut h_next, &mut c_next, &mut cache);
                check_finite(t, &c_next, "cell state")?;
                check_finite(t, &h_next, "hidden state")?;
                if record {
                    caches.push(cache);
                } else {
                    scratch = cache;
                }
                std::mem::swap(&mut h, &mut h_next);
                std::mem::swap(&mut c, &mut c_next);
            }
            Ok((h, record.then_some(LaneTape::Lstm(caches))))
        }
    }
}

fn logits(head: &HeadParams, h: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; head.c.len()];
    matvec_into(&head.u, h, &mut z).expect("head shape checked");
    axpy(1.0, head.c.as_slice(), &mut z);
    z
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate() {
        if x > z[best] {
            best = i;
        }
    }
    best
}

fn forward_impl(spec: &ModelSpec, params: &Params, batch: &SequenceBatch, record: bool) -> Result<(f64, Predictions, Option<Tape>)> {
    check_batch(spec, params, batch)?;
    let b = batch.lanes();
    let inv_b = 1.0 / b as f64;
    let mut loss_sum = 0.0;
    let mut lanes = Vec::new();
    let mut final_h = Vec::new();
    let mut dlogits = Vec::new();
    let mut reg_preds = Vec::new();
    let mut cls_preds = Vec::new();

    for lane in 0..b {
        let (h, tape) = run_lane(params, batch, lane, record)?;
        let z = logits(&params.head, &h);
        check_finite(batch.steps(), &z, "logit")?;
        match &batch.targets {
            Targets::Regression(ys) => {
                let r = z[0] - ys[lane];
                loss_sum += r * r;
                reg_preds.push(z[0]);
                if record {
                    dlogits.push(vec![2.0 * r * inv_b]);
                }
            }
            Targets::Classes(ls) => {
                let lp = log_softmax(&z);
                loss_sum -= lp[ls[lane]];
                cls_preds.push(argmax(&z));
                if record {
                    let mut g: Vec<f64> = lp.iter().map(|l| l.exp() * inv_b).collect();
                    g[ls[lane]] -= inv_b;
                    dlogits.push(g);
                }
            }
        }
        if let Some(t) = tape {
            lanes.push(t);
            final_h.push(h);
        }
    }
    let loss = loss_sum * inv_b;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: batch.steps(),
            reason: format!("loss is {loss}"),
        });
    }
    let predictions = match batch.targets {
        Targets::Regression(_) => Predictions::Regression(reg_preds),
        Targets::Classes(_) => Predictions::Classes(cls_preds),
    };
    let tape = record.then(|| Tape {
        fingerprint: params.fingerprint(),
        lanes,
        final_h,
        dlogits,
    });
    Ok((loss, predictions, tape))
}

/// Mean batch loss (squared error or cross-entropy), predictions, and the tape.
pub fn forward(spec: &ModelSpec, params: &Params, batch: &SequenceBatch) -> Result<ForwardOutput> {
    let (loss, predictions, tape) = forward_impl(spec, params, batch, true)?;
    Ok(ForwardOutput {
        loss,
        predictions,
        tape: tape.expect("recording forward always yields a tape"),
    })
}

/// Loss and predictions without recording a tape.
pub fn loss_and_predictions(spec: &ModelSpec, params: &Params, batch: &SequenceBatch) -> Result<(f64, Predictions)> {
    let (loss, predictions, _) = forward_impl(spec, params, batch, false)?;
    Ok((loss, predictions))
}

pub fn predict(spec: &ModelSpec, params: &Params, batch: &SequenceBatch) -> Result<Predictions> {
    loss_and_predictions(spec, params, batch).map(|(_, p)| p)
}

/// Gradients plus the hidden-state deltas at both ends of the unroll.
pub struct BackwardOutput {
    pub grads: Gradients,
    /// `∂loss/∂h_T` per lane, as injected by the readout.
    pub injected: Vec<Vec<f64>>,
    /// `∂loss/∂h_0` per lane after propagating through every step.
    pub initial_delta: Vec<Vec<f64>>,
}

pub fn backward_full(spec: &ModelSpec, params: &Params, tape: &Tape) -> Result<BackwardOutput> {
    params.check_against(spec)?;
    if tape.fingerprint != params.fingerprint() {
        return Err(Error::invalid("tape was recorded with different parameters"));
    }
    let mut grads = params.zeros_like();
    let mut injected = Vec::with_capacity(tape.lanes.len());
    let mut initial_delta = Vec::with_capacity(tape.lanes.len());
    let n = params.hidden();

    for ((lane, h_t), dz) in tape.lanes.iter().zip(&tape.final_h).zip(&tape.dlogits) {
        grads.head.u.add_outer(1.0, dz, h_t)?;
        axpy(1.0, dz, grads.head.c.as_mut_slice());
        let mut dh = vec![0.0; n];
        matvec_t_acc(&params.head.u, dz, &mut dh)?;
        injected.push(dh.clone());

        match (lane, &params.cell, &mut grads.cell) {
            (LaneTape::Rnn(caches), CellParams::Rnn(p), CellParams::Rnn(g)) => {
                for cache in caches.iter().rev() {
                    dh = rnn_backstep_acc(p, cache, &dh, &mut g.affine)?;
                }
            }
            (LaneTape::Lstm(caches), CellParams::Lstm(p), CellParams::Lstm(g)) => {
                let mut dc = vec![0.0; n];
                for cache in caches.iter().rev() {
                    let (a, b) = lstm_backstep_acc(p, cache, &dh, &dc, g)?;
                    dh = a;
                    dc = b;
                }
            }
            _ => return Err(Error::invalid("tape cell kind does not match params")),
        }
        initial_delta.push(dh);
    }
    Ok(BackwardOutput {
        grads,
        injected,
        initial_delta,
    })
}

/// Exact gradient of the mean batch loss with respect to every block.
pub fn backward(spec: &ModelSpec, params: &Params, tape: &Tape) -> Result<Gradients> {
    backward_full(spec, params, tape).map(|o| o.grads)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IRNN0001";

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

/// Serializes a model checkpoint.
///
/// Layout, all little-endian: the 8-byte magic `IRNN0001`; u64 cell kind
/// (0 rnn, 1 lstm); u64 activation (0 relu, 1 tanh, 2 linear; 0 for lstm);
/// u64 hidden; u64 input_dim; u64 head kind (0 regression, 1 softmax); u64
/// head outputs; u64 init kind (0 identity, 1 scaled identity, 2 gaussian,
/// 3 standard); f64 init parameter (0 when unused); f64 input_init_std;
/// f64 forget_bias. Then every parameter block as raw f64 in
/// [`Params::blocks`] order: `W, V, b` (per LSTM gate in the order input,
/// forget, output, candidate), then `head.U`, `head.c`. Matrices are
/// row-major.
pub fn checkpoint_to_bytes(spec: &ModelSpec, params: &Params) -> Result<Vec<u8>> {
    params.check_against(spec)?;
    let mut out = Vec::with_capacity(88 + params.num_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let (cell, act) = match spec.cell {
        CellKind::Rnn(Activation::Relu) => (0, 0),
        CellKind::Rnn(Activation::Tanh) => (0, 1),
        CellKind::Rnn(Activation::Linear) => (0, 2),
        CellKind::Lstm => (1, 0),
    };
    put_u64(&mut out, cell);
    put_u64(&mut out, act);
    put_u64(&mut out, spec.hidden as u64);
    put_u64(&mut out, spec.input_dim as u64);
    let (head, k) = match spec.head {
        HeadKind::Regression => (0, 1),
        HeadKind::Softmax(k) => (1, k as u64),
    };
    put_u64(&mut out, head);
    put_u64(&mut out, k);
    let (init, init_param) = match spec.init {
        InitScheme::Identity => (0, 0.0),
        InitScheme::ScaledIdentity(s) => (1, s),
        InitScheme::Gaussian(s) => (2, s),
        InitScheme::Standard => (3, 0.0),
    };
    put_u64(&mut out, init);
    put_f64(&mut out, init_param);
    put_f64(&mut out, spec.input_init_std);
    put_f64(&mut out, spec.forget_bias);
    for block in params.blocks() {
        for &x in block {
            put_f64(&mut out, x);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take8(&mut self, what: &str) -> Result<[u8; 8]> {
        let slice = self.bytes.get(self.pos..self.pos + 8).ok_or_else(|| Error::Format {
            what: "checkpoint".into(),
            offset: self.pos as u64,
            reason: format!("truncated while reading {what}"),
        })?;
        self.pos += 8;
        Ok(slice.try_into().unwrap())
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.take8(what).map(u64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.take8(what).map(f64::from_le_bytes)
    }

    fn bad(&self, reason: String) -> Error {
        Error::Format {
            what: "checkpoint".into(),
            offset: self.pos as u64,
            reason,
        }
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelSpec, Params)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take8("magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            what: "checkpoint".into(),
            offset: 0,
            reason: format!("bad magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let cell_code = cur.u64("cell kind")?;
    let act_code = cur.u64("activation")?;
    let cell = match (cell_code, act_code) {
        (0, 0) => CellKind::Rnn(Activation::Relu),
        (0, 1) => CellKind::Rnn(Activation::Tanh),
        (0, 2) => CellKind::Rnn(Activation::Linear),
        (1, _) => CellKind::Lstm,
        _ => return Err(cur.bad(format!("unknown cell/activation code {cell_code}/{act_code}"))),
    };
    let hidden = cur.u64("hidden")? as usize;
    let input_dim = cur.u64("input_dim")? as usize;
    let head_code = cur.u64("head kind")?;
    let k = cur.u64("head outputs")? as usize;
    let head = match head_code {
        0 => HeadKind::Regression,
        1 => HeadKind::Softmax(k),
        other => return Err(cur.bad(format!("unknown head code {other}"))),
    };
    let init_code = cur.u64("init kind")?;
    let init_param = cur.f64("init parameter")?;
    let init = match init_code {
        0 => InitScheme::Identity,
        1 => InitScheme::ScaledIdentity(init_param),
        2 => InitScheme::Gaussian(init_param),
        3 => InitScheme::Standard,
        other => return Err(cur.bad(format!("unknown init code {other}"))),
    };
    let spec = ModelSpec {
        cell,
        hidden,
        input_dim,
        head,
        init,
        input_init_std: cur.f64("input_init_std")?,
        forget_bias: cur.f64("forget_bias")?,
    };
    spec.validate().map_err(|e| cur.bad(e.to_string()))?;

    let expected = params_len(&spec);
    let remaining = bytes.len() - cur.pos;
    if remaining != expected * 8 {
        return Err(cur.bad(format!(
            "expected {} parameter bytes, found {remaining}",
            expected * 8
        )));
    }
    let mut params = Params::init(
        &ModelSpec {
            input_init_std: 0.0,
            init: InitScheme::Identity,
            ..spec.clone()
        },
        &mut Rng::new(0),
    )?;
    for block in params.blocks_mut() {
        for x in block.iter_mut() {
            *x = cur.f64("parameter")?;
        }
    }
    Ok((spec, params))
}

fn params_len(spec: &ModelSpec) -> usize {
    let (h, d, k) = (spec.hidden, spec.input_dim, spec.head.outputs());
    let affine = h * h + h * d + h;
    let cell = match spec.cell {
        CellKind::Rnn(_) => affine,
        CellKind::Lstm => 4 * affine,
    };
    cell + k * h + k
}

pub fn save_checkpoint(path: impl AsRef<Path>, spec: &ModelSpec, params: &Params) -> Result<()> {
    let bytes = checkpoint_to_bytes(spec, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelSpec, Params)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}
