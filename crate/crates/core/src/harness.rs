//! Training loop, evaluation, metrics files and grid search.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Rng;
use crate::network::{backward, forward, loss_and_predictions, CellKind, HeadKind, ModelSpec, Params, Predictions, Targets};
use crate::optim::{clip_gradients_in_place, sgd_step, TrainConfig};
use crate::tasks::Dataset;

pub const CSV_HEADER: &str = "step,train_loss,test_loss,task_metric,grad_norm,wallclock_s";

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 250;

/// One evaluation point. `train_loss` and `grad_norm` are means over the
/// updates since the previous row; `grad_norm` is measured before clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub task_metric: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: Vec<MetricsRow>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?}",
                r.step, r.train_loss, r.test_loss, r.task_metric, r.grad_norm, r.wallclock_s
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let bad = |line: usize, reason: String| Error::Format {
            what: "metrics CSV".into(),
            offset: line as u64,
            reason,
        };
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad(0, "missing header".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(n + 1, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(n + 1, format!("field {k}: {e}")));
            rows.push(MetricsRow {
                step: f[0].parse().map_err(|e| bad(n + 1, format!("step: {e}")))?,
                train_loss: num(1)?,
                test_loss: num(2)?,
                task_metric: num(3)?,
                grad_norm: num(4)?,
                wallclock_s: num(5)?,
            });
        }
        Ok(Metrics { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// RMSE for regression, top-1 accuracy for classification.
    pub task_metric: f64,
}

/// Mean loss over the whole dataset plus the task metric.
pub fn evaluate(spec: &ModelSpec, params: &Params, ds: &dyn Dataset) -> Result<Evaluation> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let chunks: Vec<Vec<usize>> = (0..n).step_by(EVAL_CHUNK).map(|s| (s..(s + EVAL_CHUNK).min(n)).collect()).collect();
    let parts: Vec<(f64, usize)> = chunks
        .par_iter()
        .map(|idx| {
            let batch = ds.batch(idx)?;
            let (loss, preds) = loss_and_predictions(spec, params, &batch)?;
            let correct = match (&preds, &batch.targets) {
                (Predictions::Classes(p), Targets::Classes(l)) => p.iter().zip(l).filter(|(a, b)| a == b).count(),
                _ => 0,
            };
            Ok((loss * idx.len() as f64, correct))
        })
        .collect::<Result<_>>()?;
    let (sum, correct) = parts.iter().fold((0.0, 0), |(s, c), &(l, k)| (s + l, c + k));
    let loss = sum / n as f64;
    let task_metric = match spec.head {
        HeadKind::Regression => loss.sqrt(),
        HeadKind::Softmax(_) => correct as f64 / n as f64,
    };
    Ok(Evaluation { loss, task_metric })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Record elapsed seconds in the metrics. Off by default so that repeated
    /// runs produce byte-identical CSV files.
    pub wallclock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub metrics: Metrics,
    pub diverged: Option<DivergenceInfo>,
    pub steps_done: usize,
}

/// Yields minibatch index lists, reshuffling at every epoch boundary. A
/// partial tail batch is dropped.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl EpochSampler {
    fn new(n: usize, batch: usize, rng: Rng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.min(n),
            rng,
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

fn check_datasets(spec: &ModelSpec, train_ds: &dyn Dataset, test_ds: &dyn Dataset) -> Result<()> {
    spec.validate()?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::invalid("training and test sets must be non-empty"));
    }
    for (name, ds) in [("training", train_ds), ("test", test_ds)] {
        if ds.input_dim() != spec.input_dim {
            return Err(Error::shape(
                "train",
                format!("model input_dim {}", spec.input_dim),
                format!("{name} data D={}", ds.input_dim()),
            ));
        }
    }
    Ok(())
}

/// Trains from a fresh initialization drawn from `cfg.seed`.
pub fn train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train_ds: &dyn Dataset,
    test_ds: &dyn Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let rng = Rng::new(cfg.seed);
    let params = Params::init(spec, &mut rng.fork(0))?;
    train_from(spec, cfg, params, train_ds, test_ds, opts)
}

/// Trains starting from the given parameters.
pub fn train_from(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut params: Params,
    train_ds: &dyn Dataset,
    test_ds: &dyn Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_datasets(spec, train_ds, test_ds)?;
    let start = Instant::now();
    let mut sampler = EpochSampler::new(train_ds.len(), cfg.batch_size, Rng::new(cfg.seed).fork(1));
    let mut metrics = Metrics::default();
    let (mut loss_acc, mut norm_acc, mut since) = (0.0, 0.0, 0usize);

    for step in 1..=cfg.max_steps {
        let batch = train_ds.batch(sampler.next_batch())?;
        let update = (|| {
            let out = forward(spec, &params, &batch)?;
            let mut grads = backward(spec, &params, &out.tape)?;
            let norm = clip_gradients_in_place(&mut grads, cfg.clip)?;
            sgd_step(&mut params, &grads, cfg.lr)?;
            Ok::<_, Error>((out.loss, norm))
        })();
        let (loss, norm) = match update {
            Ok(v) => v,
            Err(e) if e.is_divergence() => return Ok(diverged(params, metrics, step, e)),
            Err(e) => return Err(e),
        };
        loss_acc += loss;
        norm_acc += norm;
        since += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let eval = match evaluate(spec, &params, test_ds) {
                Ok(v) => v,
                Err(e) if e.is_divergence() => return Ok(diverged(params, metrics, step, e)),
                Err(e) => return Err(e),
            };
            metrics.rows.push(MetricsRow {
                step,
                train_loss: loss_acc / since as f64,
                test_loss: eval.loss,
                task_metric: eval.task_metric,
                grad_norm: norm_acc / since as f64,
                wallclock_s: if opts.wallclock { start.elapsed().as_secs_f64() } else { 0.0 },
            });
            (loss_acc, norm_acc, since) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        diverged: None,
        steps_done: cfg.max_steps,
    })
}

fn diverged(params: Params, metrics: Metrics, step: usize, e: Error) -> TrainOutcome {
    let reason = match e {
        Error::Divergence { reason, .. } => reason,
        other => other.to_string(),
    };
    TrainOutcome {
        params,
        metrics,
        diverged: Some(DivergenceInfo { step, reason }),
        steps_done: step - 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub clips: Vec<f64>,
    /// Only swept for LSTM cells.
    pub forget_biases: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lrs: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9],
            clips: vec![1.0, 10.0, 100.0, 1000.0],
            forget_biases: vec![1.0, 4.0, 10.0, 20.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub gc: f64,
    pub fb: Option<f64>,
}

impl GridCell {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.lr
            .total_cmp(&other.lr)
            .then(self.gc.total_cmp(&other.gc))
            .then(self.fb.unwrap_or(0.0).total_cmp(&other.fb.unwrap_or(0.0)))
    }

    fn file_stem(&self, index: usize) -> String {
        let mut s = format!("cell{index:03}_lr{:e}_gc{}", self.lr, self.gc);
        if let Some(fb) = self.fb {
            let _ = write!(s, "_fb{fb}");
        }
        s
    }
}

impl GridSpec {
    pub fn validate(&self, cell: CellKind) -> Result<()> {
        let mut lists = vec![("learning rates", &self.lrs), ("clip thresholds", &self.clips)];
        if cell == CellKind::Lstm {
            lists.push(("forget biases", &self.forget_biases));
        }
        for (name, list) in lists {
            if list.is_empty() {
                return Err(Error::invalid(format!("grid list of {name} is empty")));
            }
            if let Some(bad) = list.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(Error::invalid(format!("grid {name} must be positive, got {bad}")));
            }
        }
        Ok(())
    }

    /// Cartesian product in (lr, gc, fb) nesting order.
    pub fn cells(&self, cell: CellKind) -> Vec<GridCell> {
        let fbs: Vec<Option<f64>> = match cell {
            CellKind::Lstm => self.forget_biases.iter().map(|&f| Some(f)).collect(),
            CellKind::Rnn(_) => vec![None],
        };
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &gc in &self.clips {
                for &fb in &fbs {
                    out.push(GridCell { lr, gc, fb });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub lr: f64,
    pub gc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fb: Option<f64>,
    /// Test loss at the last evaluation; `null` if the run never evaluated.
    pub final_test_loss: Option<f64>,
    pub task_metric: Option<f64>,
    pub diverged: bool,
    /// Metrics file name, relative to the output directory.
    pub metrics_path: Option<String>,
    pub seed: u64,
}

impl GridResult {
    pub fn cell(&self) -> GridCell {
        GridCell {
            lr: self.lr,
            gc: self.gc,
            fb: self.fb,
        }
    }
}

/// Completed runs by ascending final test loss, then diverged runs; ties go
/// to the lexicographically smaller `(lr, gc, fb)`.
pub fn rank_results(results: &mut [GridResult]) {
    results.sort_by(|a, b| {
        let loss = |r: &GridResult| match (r.diverged, r.final_test_loss) {
            (false, Some(l)) if !l.is_nan() => (0, l),
            (false, _) => (1, 0.0),
            (true, _) => (2, 0.0),
        };
        let (ka, la) = loss(a);
        let (kb, lb) = loss(b);
        ka.cmp(&kb).then(la.total_cmp(&lb)).then(a.cell().key_cmp(&b.cell()))
    });
}

#[derive(Clone, Debug, Default)]
pub struct GridOptions<'a> {
    /// Directory for per-cell CSVs and `summary.json`; nothing is written if absent.
    pub out_dir: Option<&'a Path>,
    /// Worker threads; 0 means the rayon default.
    pub workers: usize,
    pub train: TrainOptions,
}

/// One training run per grid cell, all from the template's seed, ranked.
pub fn grid_search(
    spec: &ModelSpec,
    grid: &GridSpec,
    template: &TrainConfig,
    train_ds: &dyn Dataset,
    test_ds: &dyn Dataset,
    opts: &GridOptions<'_>,
) -> Result<Vec<GridResult>> {
    grid.validate(spec.cell)?;
    check_datasets(spec, train_ds, test_ds)?;
    let cells = grid.cells(spec.cell);
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let run_cell = |(index, cell): (usize, &GridCell)| -> Result<GridResult> {
        let mut cell_spec = spec.clone();
        if let Some(fb) = cell.fb {
            cell_spec.forget_bias = fb;
        }
        let cfg = TrainConfig {
            lr: cell.lr,
            clip: cell.gc,
            ..template.clone()
        };
        let out = train(&cell_spec, &cfg, train_ds, test_ds, &opts.train)?;
        let metrics_path = match opts.out_dir {
            Some(dir) => {
                let name = format!("{}.csv", cell.file_stem(index));
                out.metrics.write_csv(dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let last = out.metrics.last();
        Ok(GridResult {
            lr: cell.lr,
            gc: cell.gc,
            fb: cell.fb,
            final_test_loss: last.map(|r| r.test_loss),
            task_metric: last.map(|r| r.task_metric),
            diverged: out.diverged.is_some(),
            metrics_path,
            seed: cfg.seed,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let mut results: Vec<GridResult> =
        pool.install(|| cells.par_iter().enumerate().map(run_cell).collect::<Result<_>>())?;
    rank_results(&mut results);
    if let Some(dir) = opts.out_dir {
        write_summary(dir.join("summary.json"), &results)?;
    }
    Ok(results)
}

pub fn summary_json(results: &[GridResult]) -> Result<String> {
    Ok(serde_json::to_string_pretty(results)? + "\n")
}

pub fn write_summary(path: impl AsRef<Path>, results: &[GridResult]) -> Result<()> {
    fs::write(path, summary_json(results)?)?;
    Ok(())
}
