use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use irnn_core::cells::Activation;
use irnn_core::gradcheck::check_model;
use irnn_core::harness::{evaluate, grid_search, train, GridOptions, GridSpec, TrainOptions};
use irnn_core::init::DEFAULT_INPUT_STD;
use irnn_core::ndcore::Rng;
use irnn_core::network::{load_checkpoint, save_checkpoint, CellKind, HeadKind, ModelSpec};
use irnn_core::optim::TrainConfig;
use irnn_core::tasks::{
    baseline_mse, gen_adding, load_adding, load_mnist, make_permutation, save_adding, Dataset, MnistTask,
    MNIST_CLASSES, MNIST_SIDE,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{
    Cell, EvalArgs, GenAddingArgs, GridArgs, GradcheckArgs, MakePermArgs, ModelConfig, Task,
    TrainArgs, TrainConfigArgs, UsageError,
};
use crate::manifest::{checksums, Manifest, Seeds};

/// Returned when a training run stopped on divergence.
#[derive(Debug)]
pub struct Diverged(pub String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run diverged: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PERMUTATION_FILE: &str = "permutation.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn gen_adding_cmd(a: &GenAddingArgs) -> Result<()> {
    if a.t < 2 {
        return Err(UsageError(format!("--t must be at least 2, got {}", a.t)).into());
    }
    let rng = Rng::new(a.seed);
    let train_ds = gen_adding(a.t, a.n_train, &mut rng.fork(0))?;
    let test_ds = gen_adding(a.t, a.n_test, &mut rng.fork(1))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (train_path, test_path) = (a.out.join("train.addp"), a.out.join("test.addp"));
    save_adding(&train_path, &train_ds).with_context(|| format!("writing {}", train_path.display()))?;
    save_adding(&test_path, &test_ds).with_context(|| format!("writing {}", test_path.display()))?;
    println!("wrote {} and {}", train_path.display(), test_path.display());
    println!(
        "baseline_mse train={:.6} test={:.6}",
        baseline_mse(&train_ds),
        baseline_mse(&test_ds)
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Permutation {
    pub side: usize,
    pub seed: u64,
    pub permutation: Vec<usize>,
}

fn permutation_for(side: usize, seed: u64) -> Permutation {
    Permutation {
        side,
        seed,
        permutation: make_permutation(side * side, seed),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn make_perm_cmd(a: &MakePermArgs) -> Result<()> {
    if a.side == 0 {
        return Err(UsageError("--side must be at least 1".into()).into());
    }
    write_json(&a.out, &permutation_for(a.side, a.seed))?;
    println!("wrote {} ({} positions)", a.out.display(), a.side * a.side);
    Ok(())
}

struct Loaded {
    train: Box<dyn Dataset>,
    test: Box<dyn Dataset>,
    head: HeadKind,
    input_dim: usize,
    permutation: Option<Permutation>,
}

fn mnist_task(images: &Path, labels: &Path, perm: Option<&Permutation>, side: Option<usize>) -> Result<MnistTask> {
    let data = load_mnist(images, labels).with_context(|| format!("loading MNIST from {}", images.display()))?;
    Ok(MnistTask::new(data, perm.map(|p| p.permutation.clone()), side)?)
}

fn mnist_permutation(seed: Option<u64>, side: Option<usize>) -> Option<Permutation> {
    seed.map(|s| permutation_for(side.unwrap_or(MNIST_SIDE), s))
}

fn load_datasets(cfg: &ModelConfig) -> Result<Loaded> {
    match cfg.task {
        Task::Adding => {
            let train = load_adding(&cfg.data[0]).with_context(|| format!("loading {}", cfg.data[0].display()))?;
            let test = load_adding(&cfg.data[1]).with_context(|| format!("loading {}", cfg.data[1].display()))?;
            Ok(Loaded {
                train: Box::new(train),
                test: Box::new(test),
                head: HeadKind::Regression,
                input_dim: 2,
                permutation: None,
            })
        }
        Task::Mnist => {
            if let Some(s) = cfg.downsample {
                if s == 0 || !MNIST_SIDE.is_multiple_of(s) {
                    return Err(UsageError(format!("--downsample {s} does not divide {MNIST_SIDE}")).into());
                }
            }
            let perm = mnist_permutation(cfg.permute_seed, cfg.downsample);
            let train = mnist_task(&cfg.data[0], &cfg.data[1], perm.as_ref(), cfg.downsample)?;
            let test = mnist_task(&cfg.data[2], &cfg.data[3], perm.as_ref(), cfg.downsample)?;
            Ok(Loaded {
                train: Box::new(train),
                test: Box::new(test),
                head: HeadKind::Softmax(MNIST_CLASSES),
                input_dim: 1,
                permutation: perm,
            })
        }
    }
}

fn model_spec(cfg: &ModelConfig, head: HeadKind, input_dim: usize, forget_bias: Option<f64>) -> ModelSpec {
    match cfg.cell {
        Cell::Lstm => ModelSpec::lstm(cfg.hidden, input_dim, head, forget_bias.unwrap_or(1.0)),
        Cell::Rnn => {
            let mut spec = ModelSpec::irnn(cfg.hidden, input_dim, head);
            spec.cell = CellKind::Rnn(cfg.activation.unwrap_or(Activation::Relu));
            if let Some(init) = cfg.init {
                spec.init = init;
            }
            spec.input_init_std = DEFAULT_INPUT_STD;
            spec
        }
    }
}

fn seeds(cfg: &ModelConfig) -> Seeds {
    Seeds {
        run: cfg.seed,
        permutation: cfg.permute_seed,
    }
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let (config, wallclock, out_dir) = match &a.manifest {
        Some(path) => {
            let conflicts = a.conflicts_with_manifest();
            if !conflicts.is_empty() {
                return Err(UsageError(format!("--manifest conflicts with {}", conflicts.join(", "))).into());
            }
            let m: Manifest<TrainRecord> = Manifest::read(path)?;
            if m.command != "train" {
                bail!("{} is a {} manifest, not a train manifest", path.display(), m.command);
            }
            m.verify_data()?;
            let out = a.out_dir.clone().unwrap_or_else(|| m.config.out_dir.clone());
            (m.config.run, m.wallclock || a.wallclock, out)
        }
        None => {
            let Some(out) = a.out_dir.clone() else {
                return Err(UsageError("--out-dir is required".into()).into());
            };
            (a.resolve()?, a.wallclock, out)
        }
    };
    run_training(&config, wallclock, &out_dir)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRecord {
    #[serde(flatten)]
    pub run: TrainConfigArgs,
    pub out_dir: PathBuf,
}

fn run_training(config: &TrainConfigArgs, wallclock: bool, out_dir: &Path) -> Result<()> {
    let data = checksums(&config.model.data)?;
    let loaded = load_datasets(&config.model)?;
    let spec = model_spec(&config.model, loaded.head, loaded.input_dim, config.forget_bias);
    let cfg = TrainConfig {
        lr: config.lr,
        clip: config.clip,
        batch_size: config.model.batch,
        max_steps: config.steps,
        eval_every: config.model.eval_every,
        seed: config.model.seed,
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let record = TrainRecord {
        run: config.clone(),
        out_dir: out_dir.to_path_buf(),
    };
    let mut manifest = Manifest::new("train", record, seeds(&config.model), wallclock, data);
    manifest.write(out_dir)?;

    let outcome = train(&spec, &cfg, loaded.train.as_ref(), loaded.test.as_ref(), &TrainOptions { wallclock })?;

    outcome.metrics.write_csv(out_dir.join(METRICS_FILE))?;
    save_checkpoint(out_dir.join(CHECKPOINT_FILE), &spec, &outcome.params)?;
    manifest.outputs = vec![METRICS_FILE.into(), CHECKPOINT_FILE.into()];
    if let Some(p) = &loaded.permutation {
        write_json(&out_dir.join(PERMUTATION_FILE), p)?;
        manifest.outputs.push(PERMUTATION_FILE.into());
    }
    let last = outcome.metrics.last();
    manifest.result = Some(json!({
        "steps_done": outcome.steps_done,
        "diverged": outcome.diverged,
        "final_test_loss": last.map(|r| r.test_loss),
        "task_metric": last.map(|r| r.task_metric),
    }));
    manifest.write(out_dir)?;

    match last {
        Some(r) => println!(
            "step {} train_loss {:.6} test_loss {:.6} {} {:.6}",
            r.step,
            r.train_loss,
            r.test_loss,
            metric_name(spec.head),
            r.task_metric
        ),
        None => println!("no evaluation points recorded"),
    }
    if let Some(d) = outcome.diverged {
        return Err(Diverged(format!("step {}: {}", d.step, d.reason)).into());
    }
    Ok(())
}

fn metric_name(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Regression => "rmse",
        HeadKind::Softmax(_) => "accuracy",
    }
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (spec, params) =
        load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let task = a.task.unwrap_or(match spec.head {
        HeadKind::Regression => Task::Adding,
        HeadKind::Softmax(_) => Task::Mnist,
    });
    if task == Task::Adding && (a.permute_seed.is_some() || a.downsample.is_some()) {
        return Err(UsageError("--permute-seed and --downsample conflict with --task adding".into()).into());
    }
    let want = if task == Task::Adding { 1 } else { 2 };
    if a.data.len() != want {
        return Err(UsageError(format!("--data expects {want} path(s) for this task, got {}", a.data.len())).into());
    }
    let ds: Box<dyn Dataset> = match task {
        Task::Adding => Box::new(load_adding(&a.data[0]).with_context(|| format!("loading {}", a.data[0].display()))?),
        Task::Mnist => {
            let perm = mnist_permutation(a.permute_seed, a.downsample);
            Box::new(mnist_task(&a.data[0], &a.data[1], perm.as_ref(), a.downsample)?)
        }
    };
    let e = evaluate(&spec, &params, ds.as_ref())?;
    println!(
        "{}",
        json!({
            "examples": ds.len(),
            "loss": e.loss,
            "task_metric": e.task_metric,
            "metric": metric_name(spec.head),
        })
    );
    Ok(())
}

pub fn grid_cmd(a: &GridArgs) -> Result<()> {
    let config = a.resolve()?;
    let data = checksums(&config.model.data)?;
    let loaded = load_datasets(&config.model)?;
    let first_fb = config.forget_biases.as_ref().and_then(|v| v.first().copied());
    let spec = model_spec(&config.model, loaded.head, loaded.input_dim, first_fb);
    let grid = GridSpec {
        lrs: config.lrs.clone(),
        clips: config.clips.clone(),
        forget_biases: config.forget_biases.clone().unwrap_or_default(),
    };
    let template = TrainConfig {
        lr: config.lrs[0],
        clip: config.clips[0],
        batch_size: config.model.batch,
        max_steps: config.steps_per_cell,
        eval_every: config.model.eval_every,
        seed: config.model.seed,
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut manifest = Manifest::new("grid-search", config.clone(), seeds(&config.model), false, data);
    manifest.write(&a.out_dir)?;

    let opts = GridOptions {
        out_dir: Some(&a.out_dir),
        workers: a.workers,
        train: TrainOptions::default(),
    };
    let results = grid_search(&spec, &grid, &template, loaded.train.as_ref(), loaded.test.as_ref(), &opts)?;
    manifest.outputs = std::iter::once(SUMMARY_FILE.to_string())
        .chain(results.iter().filter_map(|r| r.metrics_path.clone()))
        .collect();
    if let Some(p) = &loaded.permutation {
        write_json(&a.out_dir.join(PERMUTATION_FILE), p)?;
        manifest.outputs.push(PERMUTATION_FILE.into());
    }
    manifest.result = Some(json!({ "cells": results.len(), "best": results.first() }));
    manifest.write(&a.out_dir)?;

    println!("{} cells, summary in {}", results.len(), a.out_dir.join(SUMMARY_FILE).display());
    if let Some(best) = results.first() {
        let fb = best.fb.map(|f| format!(" fb={f}")).unwrap_or_default();
        match (best.diverged, best.final_test_loss) {
            (false, Some(loss)) => println!("best: lr={} gc={}{fb} final_test_loss={loss:.6}", best.lr, best.gc),
            _ => println!("best: lr={} gc={}{fb} (no cell completed)", best.lr, best.gc),
        }
    }
    Ok(())
}

/// Tolerance the gradcheck exit status is judged against.
pub const GRADCHECK_TOL: f64 = 1e-4;

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let spec = a.spec()?;
    let report = check_model(&spec, a.trials, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let worst = report.max_rel_error();
    if report.passes(GRADCHECK_TOL) {
        println!("PASS max relative error {worst:.3e} < {GRADCHECK_TOL:e}");
        Ok(())
    } else {
        bail!(
            "FAIL max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:e}), {} non-finite",
            report.non_finite
        )
    }
}
