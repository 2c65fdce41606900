//! Continual learners sharing one SGD training loop.
//!
//! Every method is a [`Learner`]: it chooses per-neuron rates for each step,
//! may add a penalty gradient, and may update private state after each step
//! and at task boundaries. The loop itself (shuffling, batching, masking of
//! classes not yet seen) is identical for all of them, so with their
//! regularizers disabled they reproduce plain SGD exactly.

pub mod baselines;
pub mod isyana;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Task, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, ForwardTrace, Gradients, Mlp, Params, Rates};

pub use baselines::{
    capped_penalty_gradient, fisher_diag, EwcLearner, EwcParams, NaiveLearner, OnlineEwcLearner, OnlineEwcParams, QuadraticAnchor,
    SiLearner, SiParams,
};
pub use isyana::{IsyanaLearner, IsyanaParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Ewc,
    OnlineEwc,
    Si,
    Isyana,
    IsyanaNoTt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::Ewc,
        Method::OnlineEwc,
        Method::Si,
        Method::Isyana,
        Method::IsyanaNoTt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Ewc => "ewc",
            Method::OnlineEwc => "online_ewc",
            Method::Si => "si",
            Method::Isyana => "isyana",
            Method::IsyanaNoTt => "isyana_no_tt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method '{s}'")))
    }
}

/// Loop settings shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            base_lr: 0.1,
        }
    }
}

/// Per-method hyper-parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodParams {
    #[serde(default)]
    pub ewc: EwcParams,
    #[serde(default)]
    pub online_ewc: OnlineEwcParams,
    #[serde(default)]
    pub si: SiParams,
    #[serde(default)]
    pub isyana: IsyanaParams,
}

/// What a learner sees for one mini-batch, before its step.
pub struct Batch<'a> {
    pub task: &'a TaskSpec,
    pub x: &'a ndarray::Array2<f64>,
    pub labels: &'a [usize],
    pub trace: &'a ForwardTrace,
}

pub trait Learner {
    fn method(&self) -> Method;

    fn begin_task(&mut self, _net: &Mlp, _task: &TaskSpec) -> Result<()> {
        Ok(())
    }

    /// Learning rates for this batch's step.
    fn step_rates(&mut self, net: &Mlp, batch: &Batch<'_>) -> Result<Rates>;

    /// Gradient of the method's penalty at the current parameters, if any.
    fn penalty_gradient(&self, _net: &Mlp) -> Option<Gradients> {
        None
    }

    /// Called after every step with the parameters before the step and the
    /// gradient of the task loss alone.
    fn after_step(&mut self, _before: &Params, _net: &Mlp, _task_grads: &Gradients) {}

    fn end_task(&mut self, _net: &Mlp, _task: &Task, _mask: &[bool]) -> Result<()> {
        Ok(())
    }

    /// Named numeric tables describing internal state, for the result bundle.
    fn artifacts(&self) -> Vec<(String, String)> {
        Vec::new()
    }
}

/// Builds the learner for `method`. `seed` feeds any private randomness
/// (the autoencoder initialization); it never touches the shared loop RNG.
pub fn build_learner(
    method: Method,
    params: &MethodParams,
    train: &TrainConfig,
    net: &Mlp,
    seed: u64,
) -> Result<Box<dyn Learner>> {
    Ok(match method {
        Method::Naive => Box::new(NaiveLearner::new(train.base_lr)),
        Method::Ewc => Box::new(EwcLearner::new(train.base_lr, params.ewc)),
        Method::OnlineEwc => Box::new(OnlineEwcLearner::new(train.base_lr, params.online_ewc)),
        Method::Si => Box::new(SiLearner::new(train.base_lr, params.si, net)),
        Method::Isyana => Box::new(IsyanaLearner::new(&params.isyana, net, false, seed)?),
        Method::IsyanaNoTt => Box::new(IsyanaLearner::new(&params.isyana, net, true, seed)?),
    })
}

/// Per-task training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Adds `penalty` into `grads`, skipping exact zeros so that a disabled
/// regularizer leaves the gradient bit-for-bit untouched.
fn add_penalty(grads: &mut Gradients, penalty: &Gradients) {
    grads.zip_apply(penalty, |g, p| if p == 0.0 { g } else { g + p });
}

/// Trains `net` on one task. `mask[c]` marks the output classes that may
/// receive probability mass (all classes seen so far).
pub fn train_task(
    net: &mut Mlp,
    learner: &mut dyn Learner,
    task: &Task,
    mask: &[bool],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TaskLog> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Argument("epochs and batch size must be positive".into()));
    }
    learner.begin_task(net, &task.spec)?;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut log = TaskLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = task.train.batch(chunk);
            let trace = net.forward_masked(x.view(), Some(mask))?;
            let loss = cross_entropy(&trace.probs, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "{} produced loss {loss} on task {} epoch {} step {}",
                    learner.method(),
                    task.spec.task_id,
                    epoch + 1,
                    log.steps + 1
                )));
            }
            let rates = learner.step_rates(
                net,
                &Batch {
                    task: &task.spec,
                    x: &x,
                    labels: &labels,
                    trace: &trace,
                },
            )?;
            let task_grads = net.backward_labels(&trace, &labels)?;
            let step_grads = match learner.penalty_gradient(net) {
                Some(p) => {
                    let mut g = task_grads.clone();
                    add_penalty(&mut g, &p);
                    g
                }
                None => task_grads.clone(),
            };
            let before = net.params().clone();
            net.sgd_step(&step_grads, &rates)?;
            if !net.params().all_finite() {
                return Err(Error::Divergence(format!(
                    "{} produced non-finite parameters on task {} step {}",
                    learner.method(),
                    task.spec.task_id,
                    log.steps + 1
                )));
            }
            learner.after_step(&before, net, &task_grads);
            loss_sum += loss;
            batches += 1;
            log.steps += 1;
        }
        log.epoch_losses.push(loss_sum / batches as f64);
    }
    learner.end_task(net, task, mask)?;
    Ok(log)
}
