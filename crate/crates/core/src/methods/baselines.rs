//! Plain SGD and the regularization baselines: EWC, online EWC and SI.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Batch, Learner, Method};
use crate::data::{Dataset, Task, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp, Params, Rates};

/// Rows per forward pass while estimating the Fisher diagonal.
const FISHER_CHUNK: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcParams {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
}

impl Default for EwcParams {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            fisher_samples: default_fisher_samples(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineEwcParams {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
}

impl Default for OnlineEwcParams {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            gamma: default_gamma(),
            fisher_samples: default_fisher_samples(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiParams {
    #[serde(default = "default_si_strength")]
    pub strength: f64,
    #[serde(default = "default_si_damping")]
    pub damping: f64,
}

impl Default for SiParams {
    fn default() -> Self {
        Self {
            strength: default_si_strength(),
            damping: default_si_damping(),
        }
    }
}

fn default_lambda() -> f64 {
    5000.0
}
fn default_gamma() -> f64 {
    1.0
}
fn default_fisher_samples() -> usize {
    1000
}
fn default_si_strength() -> f64 {
    1.0
}
fn default_si_damping() -> f64 {
    0.1
}

/// `out[i] = f(out[i], x[i], y[i])` over every parameter.
fn zip3(out: &mut Params, x: &Params, y: &Params, f: impl Fn(&mut f64, f64, f64)) {
    for ((o, a), b) in out.layers.iter_mut().zip(&x.layers).zip(&y.layers) {
        Zip::from(&mut o.weights)
            .and(&a.weights)
            .and(&b.weights)
            .for_each(|o, &a, &b| f(o, a, b));
        Zip::from(&mut o.bias).and(&a.bias).and(&b.bias).for_each(|o, &a, &b| f(o, a, b));
    }
}

/// Quadratic pull `(strength/2) Σ F (θ - θ*)²` towards a stored solution.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticAnchor {
    pub theta_star: Params,
    pub importance: Params,
    pub strength: f64,
}

impl QuadraticAnchor {
    pub fn new(theta_star: Params, importance: Params, strength: f64) -> Result<Self> {
        if !theta_star.same_shape(&importance) {
            return Err(Error::Shape("anchor and importance shapes differ".into()));
        }
        if importance.flatten().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Argument("importance weights must be non-negative".into()));
        }
        if !(strength >= 0.0) {
            return Err(Error::Argument(format!("penalty strength {strength} must be non-negative")));
        }
        Ok(Self {
            theta_star,
            importance,
            strength,
        })
    }

    pub fn penalty(&self, params: &Params) -> f64 {
        let mut total = 0.0;
        for ((p, s), f) in params.layers.iter().zip(&self.theta_star.layers).zip(&self.importance.layers) {
            Zip::from(&p.weights).and(&s.weights).and(&f.weights).for_each(|&p, &s, &f| {
                total += f * (p - s) * (p - s);
            });
            Zip::from(&p.bias).and(&s.bias).and(&f.bias).for_each(|&p, &s, &f| {
                total += f * (p - s) * (p - s);
            });
        }
        0.5 * self.strength * total
    }

    /// Adds `strength · F · (θ - θ*)` into `out`.
    pub fn accumulate_gradient(&self, params: &Params, out: &mut Gradients) {
        let k = self.strength;
        let mut diff = params.clone();
        diff.zip_apply(&self.theta_star, |p, s| p - s);
        zip3(out, &diff, &self.importance, |o, d, f| *o += k * f * d);
    }
}

/// Diagonal Fisher information of the predictive distribution restricted to
/// `mask`, averaged over up to `samples` evenly spaced rows of `data`.
pub fn fisher_diag(net: &Mlp, data: &Dataset, mask: &[bool], samples: usize) -> Result<Params> {
    let n = samples.min(data.len());
    if n == 0 {
        return Err(Error::Argument("Fisher estimate needs at least one sample".into()));
    }
    let rows: Vec<usize> = (0..n).map(|i| i * data.len() / n).collect();
    let mut acc = Params::zeros_like(net.params());
    for chunk in rows.chunks(FISHER_CHUNK) {
        let (x, _) = data.batch(chunk);
        let trace = net.forward_masked(x.view(), Some(mask))?;
        net.expected_squared_gradients(&trace, &mut acc);
    }
    let inv = 1.0 / n as f64;
    acc.map_inplace(|v| v * inv);
    Ok(acc)
}

pub struct NaiveLearner {
    lr: f64,
}

impl NaiveLearner {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

impl Learner for NaiveLearner {
    fn method(&self) -> Method {
        Method::Naive
    }

    fn step_rates(&mut self, net: &Mlp, _batch: &Batch<'_>) -> Result<Rates> {
        Ok(Rates::uniform(net, self.lr))
    }
}

/// Summed penalty gradient of `anchors`. Where the summed curvature
/// `Σ strength·F` of a parameter exceeds `1/lr`, its gradient is scaled down
/// to that curvature, so an SGD step at rate `lr` moves the parameter at most
/// onto the anchors' weighted centre instead of past it.
pub fn capped_penalty_gradient(anchors: &[QuadraticAnchor], params: &Params, lr: f64) -> Option<Gradients> {
    if anchors.is_empty() {
        return None;
    }
    let mut grad = Params::zeros_like(params);
    let mut curvature = Params::zeros_like(params);
    for a in anchors {
        a.accumulate_gradient(params, &mut grad);
        curvature.zip_apply(&a.importance, |c, f| c + a.strength * f);
    }
    let cap = 1.0 / lr;
    grad.zip_apply(&curvature, |g, c| if c > cap { g * (cap / c) } else { g });
    Some(grad)
}

/// One anchor and Fisher diagonal per finished task.
pub struct EwcLearner {
    lr: f64,
    params: EwcParams,
    anchors: Vec<QuadraticAnchor>,
}

impl EwcLearner {
    pub fn new(lr: f64, params: EwcParams) -> Self {
        Self {
            lr,
            params,
            anchors: Vec::new(),
        }
    }

    pub fn anchors(&self) -> &[QuadraticAnchor] {
        &self.anchors
    }
}

impl Learner for EwcLearner {
    fn method(&self) -> Method {
        Method::Ewc
    }

    fn step_rates(&mut self, net: &Mlp, _batch: &Batch<'_>) -> Result<Rates> {
        Ok(Rates::uniform(net, self.lr))
    }

    fn penalty_gradient(&self, net: &Mlp) -> Option<Gradients> {
        capped_penalty_gradient(&self.anchors, net.params(), self.lr)
    }

    fn end_task(&mut self, net: &Mlp, task: &Task, mask: &[bool]) -> Result<()> {
        let fisher = fisher_diag(net, &task.train, mask, self.params.fisher_samples)?;
        self.anchors
            .push(QuadraticAnchor::new(net.params().clone(), fisher, self.params.lambda)?);
        Ok(())
    }
}

/// A single running Fisher `F ← γF + F_new`, anchored at the latest solution.
pub struct OnlineEwcLearner {
    lr: f64,
    params: OnlineEwcParams,
    anchor: Option<QuadraticAnchor>,
}

impl OnlineEwcLearner {
    pub fn new(lr: f64, params: OnlineEwcParams) -> Self {
        Self {
            lr,
            params,
            anchor: None,
        }
    }

    pub fn anchor(&self) -> Option<&QuadraticAnchor> {
        self.anchor.as_ref()
    }
}

impl Learner for OnlineEwcLearner {
    fn method(&self) -> Method {
        Method::OnlineEwc
    }

    fn step_rates(&mut self, net: &Mlp, _batch: &Batch<'_>) -> Result<Rates> {
        Ok(Rates::uniform(net, self.lr))
    }

    fn penalty_gradient(&self, net: &Mlp) -> Option<Gradients> {
        capped_penalty_gradient(self.anchor.as_slice(), net.params(), self.lr)
    }

    fn end_task(&mut self, net: &Mlp, task: &Task, mask: &[bool]) -> Result<()> {
        let mut fisher = fisher_diag(net, &task.train, mask, self.params.fisher_samples)?;
        if let Some(old) = &self.anchor {
            let gamma = self.params.gamma;
            fisher.zip_apply(&old.importance, |new, old| gamma * old + new);
        }
        self.anchor = Some(QuadraticAnchor::new(
            net.params().clone(),
            fisher,
            self.params.lambda,
        )?);
        Ok(())
    }
}

/// Path-integral importance: each step credits every parameter with
/// `-g · Δθ`, where `g` is the task-loss gradient and `Δθ` the actual move.
pub struct SiLearner {
    lr: f64,
    params: SiParams,
    omega: Params,
    importance: Params,
    task_start: Params,
    anchor: Option<QuadraticAnchor>,
}

impl SiLearner {
    pub fn new(lr: f64, params: SiParams, net: &Mlp) -> Self {
        let zeros = Params::zeros_like(net.params());
        Self {
            lr,
            params,
            omega: zeros.clone(),
            importance: zeros,
            task_start: net.params().clone(),
            anchor: None,
        }
    }

    /// Running path integral of the current task.
    pub fn omega(&self) -> &Params {
        &self.omega
    }

    /// Consolidated importance over all finished tasks.
    pub fn importance(&self) -> &Params {
        &self.importance
    }
}

impl Learner for SiLearner {
    fn method(&self) -> Method {
        Method::Si
    }

    fn begin_task(&mut self, net: &Mlp, _task: &TaskSpec) -> Result<()> {
        self.task_start = net.params().clone();
        self.omega = Params::zeros_like(net.params());
        Ok(())
    }

    fn step_rates(&mut self, net: &Mlp, _batch: &Batch<'_>) -> Result<Rates> {
        Ok(Rates::uniform(net, self.lr))
    }

    fn penalty_gradient(&self, net: &Mlp) -> Option<Gradients> {
        capped_penalty_gradient(self.anchor.as_slice(), net.params(), self.lr)
    }

    fn after_step(&mut self, before: &Params, net: &Mlp, task_grads: &Gradients) {
        let mut moved = net.params().clone();
        moved.zip_apply(before, |after, before| after - before);
        zip3(&mut self.omega, task_grads, &moved, |w, g, d| *w -= g * d);
    }

    fn end_task(&mut self, net: &Mlp, _task: &Task, _mask: &[bool]) -> Result<()> {
        let xi = self.params.damping;
        let mut total = net.params().clone();
        total.zip_apply(&self.task_start, |end, start| end - start);
        // Negative path credit (steps that raised the task loss) is dropped.
        zip3(&mut self.importance, &self.omega, &total, |w, om, d| {
            *w += (om / (d * d + xi)).max(0.0);
        });
        self.anchor = Some(QuadraticAnchor::new(
            net.params().clone(),
            self.importance.clone(),
            self.params.strength,
        )?);
        self.omega = Params::zeros_like(net.params());
        Ok(())
    }
}
