//! Sequential-task protocol, the accuracy matrix and the transfer metrics.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Caps, StreamKind, TaskStream};
use crate::error::{Error, Result};
use crate::methods::{build_learner, train_task, Method, MethodParams, TaskLog, TrainConfig};
use crate::nn::Mlp;

/// Accuracy matrix: row `i` holds the test accuracy on every task after
/// training on task `i`, plus the untrained baseline `b_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    s: Vec<Vec<f64>>,
    b_hat: Vec<f64>,
}

fn check_unit(values: &[f64], what: &str) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Argument(format!("{what} entry {v} is outside [0, 1]"))),
        None => Ok(()),
    }
}

impl EvalMatrix {
    pub fn new(b_hat: Vec<f64>) -> Result<Self> {
        if b_hat.is_empty() {
            return Err(Error::Argument("evaluation needs at least one task".into()));
        }
        check_unit(&b_hat, "baseline")?;
        Ok(Self { s: Vec::new(), b_hat })
    }

    /// Builds a complete matrix from rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, b_hat: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(b_hat)?;
        for r in rows {
            m.push_row(r)?;
        }
        if !m.is_complete() {
            return Err(Error::Shape(format!("{} rows for {} tasks", m.s.len(), m.tasks())));
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.b_hat.len()
    }

    pub fn rows_filled(&self) -> usize {
        self.s.len()
    }

    pub fn is_complete(&self) -> bool {
        self.s.len() == self.tasks()
    }

    /// Appends the row for the next task in order.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Argument("all rows are already filled".into()));
        }
        if row.len() != self.tasks() {
            return Err(Error::Shape(format!("row of {} for {} tasks", row.len(), self.tasks())));
        }
        check_unit(&row, "accuracy")?;
        self.s.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.s
    }

    pub fn b_hat(&self) -> &[f64] {
        &self.b_hat
    }

    /// Checks shape and range, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        Self::from_rows(self.s.clone(), self.b_hat.clone()).map(|_| ())
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        if !self.is_complete() {
            return Err(Error::Argument(format!(
                "matrix has {} of {} rows",
                self.s.len(),
                self.tasks()
            )));
        }
        let t = self.tasks();
        Ok(Array2::from_shape_fn((t, t), |(i, j)| self.s[i][j]))
    }
}

fn square(s: &Array2<f64>) -> Result<usize> {
    let (r, c) = s.dim();
    if r != c || r == 0 {
        return Err(Error::Shape(format!("accuracy matrix is {r}×{c}")));
    }
    Ok(r)
}

/// Mean of the final row.
pub fn acc(s: &Array2<f64>) -> Result<f64> {
    let t = square(s)?;
    let mut sum = 0.0;
    for i in 0..t {
        sum += s[[t - 1, i]];
    }
    Ok(sum / t as f64)
}

/// Mean change on tasks `1..T-1` between training on them and the end.
pub fn bwt(s: &Array2<f64>) -> Result<f64> {
    let t = square(s)?;
    if t < 2 {
        return Err(Error::Argument("backward transfer needs at least two tasks".into()));
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += s[[t - 1, i]] - s[[i, i]];
    }
    Ok(sum / (t - 1) as f64)
}

/// Mean accuracy on task `i` just before training on it, relative to the
/// untrained network.
pub fn fwt(s: &Array2<f64>, b_hat: &[f64]) -> Result<f64> {
    let t = square(s)?;
    if t < 2 {
        return Err(Error::Argument("forward transfer needs at least two tasks".into()));
    }
    if b_hat.len() != t {
        return Err(Error::Shape(format!("{} baselines for {t} tasks", b_hat.len())));
    }
    let mut sum = 0.0;
    for i in 1..t {
        sum += s[[i - 1, i]] - b_hat[i];
    }
    Ok(sum / (t - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
    /// Set for a single task, where BWT and FWT are undefined and reported as 0.
    pub degenerate: bool,
}

impl Metrics {
    pub fn from_matrix(m: &EvalMatrix) -> Result<Self> {
        let s = m.to_array()?;
        let acc = acc(&s)?;
        if m.tasks() < 2 {
            return Ok(Self {
                acc,
                bwt: 0.0,
                fwt: 0.0,
                degenerate: true,
            });
        }
        Ok(Self {
            acc,
            bwt: bwt(&s)?,
            fwt: fwt(&s, m.b_hat())?,
            degenerate: false,
        })
    }
}

/// Everything that determines a run besides the method and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub stream: StreamKind,
    pub task_count: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub caps: Caps,
    pub params: MethodParams,
    /// Also fill a task-masked matrix (prediction restricted to the task's
    /// own classes). Diagnostic only.
    pub masked_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub stream: StreamKind,
    pub seed: u64,
    pub matrix: EvalMatrix,
    pub metrics: Metrics,
    pub masked: Option<EvalMatrix>,
    pub task_logs: Vec<TaskLog>,
    pub wall_clock_secs: f64,
    pub settings: RunSettings,
}

impl RunReport {
    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut out = format!(
            "{} on {} (seed {}): ACC {:.2}%  BWT {:+.4}  FWT {:+.4}",
            self.method,
            self.stream,
            self.seed,
            100.0 * m.acc,
            m.bwt,
            m.fwt
        );
        if m.degenerate {
            out.push_str("  [single task: BWT/FWT undefined]");
        }
        let _ = write!(out, "  ({:.1} s)", self.wall_clock_secs);
        out
    }

    /// `S` with one row per training stage, then the baseline row and the metrics.
    pub fn matrix_csv(&self) -> String {
        let t = self.matrix.tasks();
        let mut out = String::from("row");
        for j in 1..=t {
            let _ = write!(out, ",task{j}");
        }
        out.push('\n');
        for (i, row) in self.matrix.rows().iter().enumerate() {
            let _ = write!(out, "after_task{}", i + 1);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out.push_str("b_hat");
        for v in self.matrix.b_hat() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        let m = &self.metrics;
        let _ = writeln!(out, "ACC,{}\nBWT,{}\nFWT,{}", m.acc, m.bwt, m.fwt);
        out
    }

    /// Long-format accuracy over time: one line per (stage, task), plus the
    /// mean over the tasks seen so far.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("after_task,task,accuracy,seen_mean\n");
        for (i, row) in self.matrix.rows().iter().enumerate() {
            let seen_mean = seen_mean(row, i);
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{v},{seen_mean}", i + 1, j + 1);
            }
        }
        out
    }
}

/// Mean of `row[0..=i]`.
pub fn seen_mean(row: &[f64], i: usize) -> f64 {
    row[..=i].iter().sum::<f64>() / (i + 1) as f64
}

/// Accuracy of `init_net` on every task's test set over all classes.
pub fn baseline_vector(init_net: &Mlp, stream: &TaskStream) -> Result<Vec<f64>> {
    stream.tasks.iter().map(|t| init_net.accuracy(&t.test, None)).collect()
}

pub fn network_sizes(stream: &TaskStream, hidden: &[usize]) -> Result<Vec<usize>> {
    let first = stream
        .tasks
        .first()
        .ok_or_else(|| Error::Argument("empty task stream".into()))?;
    let mut sizes = vec![first.train.width()];
    sizes.extend(hidden);
    sizes.push(stream.total_classes);
    Ok(sizes)
}

/// Output of one protocol run: the report and the learner's state tables.
pub struct RunOutcome {
    pub report: RunReport,
    pub artifacts: Vec<(String, String)>,
}

/// Trains `method` on the stream task by task, filling row `i` of `S`
/// after task `i`. Evaluation is single-head over every class seen so far.
pub fn run_protocol(method: Method, stream: &TaskStream, settings: &RunSettings, seed: u64) -> Result<RunOutcome> {
    let start = Instant::now();
    let sizes = network_sizes(stream, &settings.hidden)?;
    let mut net = Mlp::new(&sizes, seed)?;
    let b_hat = baseline_vector(&net, stream)?;
    let mut matrix = EvalMatrix::new(b_hat.clone())?;
    let mut masked = if settings.masked_eval { Some(EvalMatrix::new(b_hat)?) } else { None };
    let mut learner = build_learner(method, &settings.params, &settings.train, &net, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut task_logs = Vec::with_capacity(stream.len());
    for task in &stream.tasks {
        let seen = stream.seen_classes(task.spec.task_id);
        let mask: Vec<bool> = (0..stream.total_classes).map(|c| seen.contains(&c)).collect();
        task_logs.push(train_task(&mut net, learner.as_mut(), task, &mask, &settings.train, &mut rng)?);
        let row = stream
            .tasks
            .iter()
            .map(|t| net.accuracy(&t.test, Some(&seen)))
            .collect::<Result<Vec<_>>>()?;
        info!(
            "{method} seed {seed}: after task {} seen-task mean {:.4}",
            task.spec.task_id,
            seen_mean(&row, task.spec.task_id - 1)
        );
        matrix.push_row(row)?;
        if let Some(mm) = &mut masked {
            let row = stream
                .tasks
                .iter()
                .map(|t| net.accuracy(&t.test, Some(&t.spec.class_set)))
                .collect::<Result<Vec<_>>>()?;
            mm.push_row(row)?;
        }
    }
    let metrics = Metrics::from_matrix(&matrix)?;
    let report = RunReport {
        method,
        stream: stream.kind,
        seed,
        matrix,
        metrics,
        masked,
        task_logs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        settings: settings.clone(),
    };
    info!("{}", report.summary());
    Ok(RunOutcome {
        report,
        artifacts: learner.artifacts(),
    })
}

/// Mean metrics of one (method, stream) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub stream: StreamKind,
    pub seeds: usize,
    pub acc: f64,
    pub fwt: f64,
    pub bwt: f64,
}

/// Averages reports per (method, stream), in order of first appearance.
/// Metrics are recomputed from each stored matrix.
pub fn aggregate(reports: &[RunReport]) -> Result<Vec<AggregateRow>> {
    let mut groups: Vec<(Method, StreamKind, Vec<Metrics>)> = Vec::new();
    for r in reports {
        let m = Metrics::from_matrix(&r.matrix)?;
        match groups.iter_mut().find(|(me, st, _)| *me == r.method && *st == r.stream) {
            Some(g) => g.2.push(m),
            None => groups.push((r.method, r.stream, vec![m])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(method, stream, ms)| {
            let n = ms.len() as f64;
            AggregateRow {
                method,
                stream,
                seeds: ms.len(),
                acc: ms.iter().map(|m| m.acc).sum::<f64>() / n,
                fwt: ms.iter().map(|m| m.fwt).sum::<f64>() / n,
                bwt: ms.iter().map(|m| m.bwt).sum::<f64>() / n,
            }
        })
        .collect())
}
