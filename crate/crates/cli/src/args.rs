//! Flag definitions and their resolution into fully explicit run configs.
//!
//! Model flags are `Option`s without clap defaults so we can tell what the
//! user actually typed: conflicts are detected on explicit flags, defaults are
//! filled in afterwards, and the resolved config is what manifests record.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use irnn_core::cells::Activation;
use irnn_core::init::InitScheme;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "irnn", version, about = "Train and benchmark identity-initialized ReLU RNNs, tanh RNNs and LSTMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate adding-problem train/test files.
    GenAdding(GenAddingArgs),
    /// Train one model and write metrics, checkpoint and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Run a learning-rate × clip (× forget-bias) grid.
    GridSearch(GridArgs),
    /// Compare BPTT gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Write a seeded pixel permutation.
    MakePerm(MakePermArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Adding,
    Mnist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Rnn,
    Lstm,
}

#[derive(Debug, Args)]
pub struct GenAddingArgs {
    /// Sequence length T (at least 2).
    #[arg(long = "t")]
    pub t: usize,
    #[arg(long, default_value_t = 100_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory; receives train.addp and test.addp.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long, value_enum)]
    pub cell: Option<Cell>,
    /// relu | tanh | linear (rnn only).
    #[arg(long)]
    pub activation: Option<Activation>,
    /// identity | iscale:<s> | gauss:<std> | standard (rnn only).
    #[arg(long)]
    pub init: Option<InitScheme>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adding: TRAIN TEST. MNIST: TRAIN_IMAGES TRAIN_LABELS TEST_IMAGES TEST_LABELS.
    #[arg(long, num_args = 1..)]
    pub data: Option<Vec<PathBuf>>,
    /// Permute MNIST pixels with this seed.
    #[arg(long)]
    pub permute_seed: Option<u64>,
    /// Average-pool MNIST images to this side (must divide 28).
    #[arg(long)]
    pub downsample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    /// LSTM forget-gate bias (lstm only).
    #[arg(long)]
    pub forget_bias: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Replay the run recorded in this manifest (only --out-dir may be given alongside).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Record elapsed seconds in the metrics (makes CSVs non-reproducible).
    #[arg(long)]
    pub wallclock: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub clips: Option<Vec<f64>>,
    /// Comma-separated forget-gate biases (lstm only).
    #[arg(long, value_delimiter = ',')]
    pub forget_biases: Option<Vec<f64>>,
    #[arg(long)]
    pub steps_per_cell: Option<usize>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Adding: TEST. MNIST: TEST_IMAGES TEST_LABELS.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub permute_seed: Option<u64>,
    #[arg(long)]
    pub downsample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Cell::Rnn)]
    pub cell: Cell,
    /// relu | tanh | linear; for lstm only tanh is accepted.
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub forget_bias: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub hidden: usize,
}

#[derive(Debug, Args)]
pub struct MakePermArgs {
    #[arg(long, default_value_t = 28)]
    pub side: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A usage problem found after parsing (flag conflicts, missing values).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T, UsageError> {
    Err(UsageError(msg.into()))
}

/// Every model/data setting with defaults applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub cell: Cell,
    pub activation: Option<Activation>,
    pub init: Option<InitScheme>,
    pub hidden: usize,
    pub batch: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub data: Vec<PathBuf>,
    pub permute_seed: Option<u64>,
    pub downsample: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfigArgs {
    pub model: ModelConfig,
    pub lr: f64,
    pub clip: f64,
    pub forget_bias: Option<f64>,
    pub steps: usize,
}

pub const DEFAULT_HIDDEN: usize = 100;
pub const DEFAULT_ADDING_STEPS: usize = 100_000;
pub const DEFAULT_MNIST_STEPS: usize = 1_000_000;

impl ModelArgs {
    pub fn is_empty(&self) -> bool {
        let ModelArgs {
            task,
            cell,
            activation,
            init,
            hidden,
            batch,
            eval_every,
            seed,
            data,
            permute_seed,
            downsample,
        } = self;
        task.is_none()
            && cell.is_none()
            && activation.is_none()
            && init.is_none()
            && hidden.is_none()
            && batch.is_none()
            && eval_every.is_none()
            && seed.is_none()
            && data.is_none()
            && permute_seed.is_none()
            && downsample.is_none()
    }

    pub fn resolve(&self) -> Result<ModelConfig, UsageError> {
        let Some(task) = self.task else {
            return usage("--task is required (adding | mnist)");
        };
        let cell = self.cell.unwrap_or(Cell::Rnn);
        if cell == Cell::Lstm {
            if self.init.is_some() {
                return usage("--init conflicts with --cell lstm (only valid for rnn)");
            }
            if self.activation.is_some_and(|a| a != Activation::Tanh) {
                return usage("--activation conflicts with --cell lstm (lstm cells are fixed to tanh)");
            }
        }
        if task == Task::Adding && (self.permute_seed.is_some() || self.downsample.is_some()) {
            return usage("--permute-seed and --downsample conflict with --task adding (mnist only)");
        }
        let (activation, init) = match cell {
            Cell::Lstm => (None, None),
            Cell::Rnn => {
                let act = self.activation.unwrap_or(Activation::Relu);
                let default_init = if act == Activation::Tanh { InitScheme::Standard } else { InitScheme::Identity };
                (Some(act), Some(self.init.unwrap_or(default_init)))
            }
        };
        let data = self.data.clone().unwrap_or_default();
        let want = match task {
            Task::Adding => 2,
            Task::Mnist => 4,
        };
        if data.len() != want {
            return usage(format!(
                "--data expects {want} paths for --task {}, got {}",
                task_name(task),
                data.len()
            ));
        }
        let eval_every = self.eval_every.unwrap_or(match task {
            Task::Adding => 200,
            Task::Mnist => 1000,
        });
        let cfg = ModelConfig {
            task,
            cell,
            activation,
            init,
            hidden: self.hidden.unwrap_or(DEFAULT_HIDDEN),
            batch: self.batch.unwrap_or(irnn_core::optim::DEFAULT_BATCH_SIZE),
            eval_every,
            seed: self.seed.unwrap_or(0),
            data,
            permute_seed: self.permute_seed,
            downsample: self.downsample,
        };
        if cfg.hidden == 0 || cfg.batch == 0 || cfg.eval_every == 0 {
            return usage("--hidden, --batch and --eval-every must be at least 1");
        }
        Ok(cfg)
    }
}

pub fn task_name(t: Task) -> &'static str {
    match t {
        Task::Adding => "adding",
        Task::Mnist => "mnist",
    }
}

fn positive(name: &str, v: f64) -> Result<f64, UsageError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        usage(format!("{name} must be a positive number, got {v}"))
    }
}

impl TrainArgs {
    /// Explicit flags given alongside `--manifest` (other than `--out-dir`).
    pub fn conflicts_with_manifest(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.model.is_empty() {
            out.push("model/data flags");
        }
        for (name, set) in [
            ("--lr", self.lr.is_some()),
            ("--clip", self.clip.is_some()),
            ("--forget-bias", self.forget_bias.is_some()),
            ("--steps", self.steps.is_some()),
        ] {
            if set {
                out.push(name);
            }
        }
        out
    }

    pub fn resolve(&self) -> Result<TrainConfigArgs, UsageError> {
        let model = self.model.resolve()?;
        if model.cell == Cell::Rnn && self.forget_bias.is_some() {
            return usage("--forget-bias conflicts with --cell rnn (only valid for lstm)");
        }
        let forget_bias = match model.cell {
            Cell::Lstm => Some(self.forget_bias.unwrap_or(1.0)),
            Cell::Rnn => None,
        };
        if forget_bias.is_some_and(|f| !f.is_finite()) {
            return usage("--forget-bias must be finite");
        }
        let steps = self.steps.unwrap_or(match model.task {
            Task::Adding => DEFAULT_ADDING_STEPS,
            Task::Mnist => DEFAULT_MNIST_STEPS,
        });
        Ok(TrainConfigArgs {
            lr: positive("--lr", self.lr.unwrap_or(0.01))?,
            clip: positive("--clip", self.clip.unwrap_or(100.0))?,
            forget_bias,
            steps,
            model,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfigArgs {
    pub model: ModelConfig,
    pub lrs: Vec<f64>,
    pub clips: Vec<f64>,
    pub forget_biases: Option<Vec<f64>>,
    pub steps_per_cell: usize,
}

impl GridArgs {
    pub fn resolve(&self) -> Result<GridConfigArgs, UsageError> {
        let model = self.model.resolve()?;
        if model.cell == Cell::Rnn && self.forget_biases.is_some() {
            return usage("--forget-biases conflicts with --cell rnn (only valid for lstm)");
        }
        let defaults = irnn_core::harness::GridSpec::default();
        let check = |name: &str, list: Option<&Vec<f64>>, default: &Vec<f64>| -> Result<Vec<f64>, UsageError> {
            let list = list.cloned().unwrap_or_else(|| default.clone());
            if list.is_empty() {
                return usage(format!("{name} must not be empty"));
            }
            list.iter().map(|&v| positive(name, v)).collect()
        };
        let lrs = check("--lrs", self.lrs.as_ref(), &defaults.lrs)?;
        let clips = check("--clips", self.clips.as_ref(), &defaults.clips)?;
        let forget_biases = match model.cell {
            Cell::Lstm => Some(check("--forget-biases", self.forget_biases.as_ref(), &defaults.forget_biases)?),
            Cell::Rnn => None,
        };
        let steps_per_cell = self.steps_per_cell.unwrap_or(match model.task {
            Task::Adding => DEFAULT_ADDING_STEPS,
            Task::Mnist => DEFAULT_MNIST_STEPS,
        });
        Ok(GridConfigArgs {
            model,
            lrs,
            clips,
            forget_biases,
            steps_per_cell,
        })
    }
}

impl GradcheckArgs {
    /// The model checked: `hidden` units, D=2, T=10, B=3, regression head.
    pub fn spec(&self) -> Result<irnn_core::network::ModelSpec, UsageError> {
        use irnn_core::network::{CellKind, HeadKind, ModelSpec};
        if self.trials == 0 || self.hidden == 0 {
            return usage("--trials and --hidden must be at least 1");
        }
        match self.cell {
            Cell::Rnn => {
                if self.forget_bias.is_some() {
                    return usage("--forget-bias conflicts with --cell rnn (only valid for lstm)");
                }
                let act = self.activation.unwrap_or(Activation::Relu);
                Ok(ModelSpec {
                    cell: CellKind::Rnn(act),
                    ..ModelSpec::irnn(self.hidden, 2, HeadKind::Regression)
                })
            }
            Cell::Lstm => {
                if self.activation.is_some_and(|a| a != Activation::Tanh) {
                    return usage("--activation conflicts with --cell lstm (lstm cells are fixed to tanh)");
                }
                let fb = self.forget_bias.unwrap_or(0.0);
                if !fb.is_finite() {
                    return usage("--forget-bias must be finite");
                }
                Ok(ModelSpec::lstm(self.hidden, 2, HeadKind::Regression, fb))
            }
        }
    }
}
