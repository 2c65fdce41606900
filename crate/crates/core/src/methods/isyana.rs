//! Per-neuron learning rates modulated by neuron-to-class relevance and by
//! how related earlier tasks are to the current one.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Batch, Learner, Method};
use crate::data::{Task, TaskSpec};
use crate::error::{Error, Result};
use crate::importance::{compute_modulation, EtaParams, Modulation};
use crate::latent::{ClassAtlas, Sae};
use crate::nn::{Mlp, Rates};
use crate::stats::SuAtlas;

/// Mixed into the run seed so the autoencoder never shares a stream with
/// the classifier initialization.
const SAE_SEED_SALT: u64 = 0x5ae0_5ae0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsyanaParams {
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Encoder widths after the input layer.
    #[serde(default = "default_sae_hidden")]
    pub sae_hidden: Vec<usize>,
    #[serde(default = "default_sae_lr")]
    pub sae_lr: f64,
}

impl Default for IsyanaParams {
    fn default() -> Self {
        Self {
            a: default_a(),
            b: default_b(),
            c: default_c(),
            sae_hidden: default_sae_hidden(),
            sae_lr: default_sae_lr(),
        }
    }
}

impl IsyanaParams {
    pub fn eta(&self) -> EtaParams {
        EtaParams {
            a: self.a,
            b: self.b,
            c: self.c,
        }
    }
}

fn default_a() -> f64 {
    EtaParams::default().a
}
fn default_b() -> f64 {
    EtaParams::default().b
}
fn default_c() -> f64 {
    EtaParams::default().c
}
fn default_sae_hidden() -> Vec<usize> {
    vec![128, 32]
}
fn default_sae_lr() -> f64 {
    0.01
}

pub struct IsyanaLearner {
    eta: EtaParams,
    ablate_tt: bool,
    su: SuAtlas,
    atlas: Option<ClassAtlas>,
    last: Option<Modulation>,
    /// Final modulation of every finished task.
    snapshots: Vec<(usize, Modulation)>,
}

impl IsyanaLearner {
    /// With `ablate_tt` the task relation is the indicator of the current
    /// task's classes and no autoencoder is kept.
    pub fn new(params: &IsyanaParams, net: &Mlp, ablate_tt: bool, seed: u64) -> Result<Self> {
        if !(params.sae_lr > 0.0) {
            return Err(Error::Argument(format!("autoencoder rate {} must be positive", params.sae_lr)));
        }
        let atlas = if ablate_tt {
            None
        } else {
            let mut sizes = vec![net.input_size()];
            sizes.extend(&params.sae_hidden);
            let sae = Sae::new(&sizes, seed ^ SAE_SEED_SALT)?;
            Some(ClassAtlas::new(sae, params.sae_lr))
        };
        Ok(Self {
            eta: params.eta(),
            ablate_tt,
            su: SuAtlas::new(net.hidden_sizes(), net.num_classes()),
            atlas,
            last: None,
            snapshots: Vec::new(),
        })
    }

    pub fn su(&self) -> &SuAtlas {
        &self.su
    }

    pub fn atlas(&self) -> Option<&ClassAtlas> {
        self.atlas.as_ref()
    }

    pub fn last_modulation(&self) -> Option<&Modulation> {
        self.last.as_ref()
    }

    pub fn snapshots(&self) -> &[(usize, Modulation)] {
        &self.snapshots
    }
}

impl Learner for IsyanaLearner {
    fn method(&self) -> Method {
        if self.ablate_tt {
            Method::IsyanaNoTt
        } else {
            Method::Isyana
        }
    }

    fn begin_task(&mut self, _net: &Mlp, _task: &TaskSpec) -> Result<()> {
        self.last = None;
        Ok(())
    }

    fn step_rates(&mut self, _net: &Mlp, batch: &Batch<'_>) -> Result<Rates> {
        let spec = batch.task;
        if let Some(atlas) = &mut self.atlas {
            atlas.train_step(batch.x.view())?;
            atlas.observe(spec.task_id, &spec.class_set, batch.x.view(), batch.labels)?;
        }
        self.su.update(batch.trace, batch.labels)?;
        let m = compute_modulation(
            &mut self.su,
            self.atlas.as_ref(),
            spec.task_id,
            &spec.class_set,
            self.ablate_tt,
            self.eta,
        )?;
        let rates = m.schedule.to_rates();
        self.last = Some(m);
        Ok(rates)
    }

    fn end_task(&mut self, _net: &Mlp, task: &Task, _mask: &[bool]) -> Result<()> {
        if let Some(atlas) = &mut self.atlas {
            atlas.consolidate(task.spec.task_id);
        }
        if let Some(m) = self.last.take() {
            self.snapshots.push((task.spec.task_id, m));
        }
        Ok(())
    }

    fn artifacts(&self) -> Vec<(String, String)> {
        let mut out = vec![("su_atlas.csv".to_string(), self.su.to_csv())];
        if let Some(atlas) = &self.atlas {
            out.push(("class_atlas.csv".to_string(), atlas.to_csv()));
        }
        for (task_id, m) in &self.snapshots {
            out.push((format!("modulation_task{task_id}.csv"), m.to_csv()));
            let mut tt = String::from("class,tt,defined\n");
            for (o, v) in m.tt.values.iter().enumerate() {
                let _ = writeln!(tt, "{o},{v},{}", !m.tt.undefined.contains(&o));
            }
            out.push((format!("tt_task{task_id}.csv"), tt));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures;
    use crate::data::{make_split_tasks, Caps};
    use crate::methods::{build_learner, train_task, MethodParams, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(method: Method, params: &MethodParams, tasks: usize) -> (Mlp, Box<dyn Learner>) {
        let stream = make_split_tasks(
            &fixtures::source(12),
            Caps {
                train_per_task: Some(24),
                test_per_task: Some(10),
            },
            4,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            base_lr: 0.1,
        };
        let mut net = Mlp::new(&[784, 6, 5, 10], 21).unwrap();
        let mut learner = build_learner(method, params, &cfg, &net, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for task in stream.tasks.iter().take(tasks) {
            let seen = stream.seen_classes(task.spec.task_id);
            let mask: Vec<bool> = (0..10).map(|c| seen.contains(&c)).collect();
            train_task(&mut net, learner.as_mut(), task, &mask, &cfg, &mut rng).unwrap();
        }
        (net, learner)
    }

    #[test]
    fn constant_schedule_reduces_to_plain_sgd() {
        let mut params = MethodParams::default();
        params.isyana.a = 0.1;
        params.isyana.b = 0.0;
        params.isyana.c = 0.0;
        let (naive, _) = run(Method::Naive, &params, 2);
        let (isy, _) = run(Method::Isyana, &params, 2);
        assert_eq!(naive.params(), isy.params());
    }

    #[test]
    fn rates_stay_in_band_and_artifacts_are_written() {
        let params = MethodParams::default();
        let (_, learner) = run(Method::Isyana, &params, 2);
        let names: Vec<String> = learner.artifacts().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"su_atlas.csv".to_string()));
        assert!(names.contains(&"modulation_task2.csv".to_string()));
        assert!(names.contains(&"tt_task1.csv".to_string()));
        let (lo, hi) = params.isyana.eta().band();
        for (name, csv) in learner.artifacts() {
            if !name.starts_with("modulation") {
                continue;
            }
            for line in csv.lines().skip(1) {
                let eta: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
                assert!(eta >= lo && eta <= hi, "{eta}");
            }
        }
    }
}
