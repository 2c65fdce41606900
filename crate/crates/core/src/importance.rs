//! Neuron importance from synaptic-to-task relevance weighted by task-to-task
//! relations, and the per-neuron learning rates derived from it.
//!
//! For hidden neuron `j` of layer `l` and current task `t`:
//!
//! ```text
//! φ = Σ_o TT[t,o] · ST[l][j,o]        in [0, m]
//! Z = exp(-φ)                         in (0, 1]
//! η = a · exp(-b·Z + c)
//! ```
//!
//! With `b > 0`, a neuron with no relevance to the current task or its
//! relatives (`Z = 1`) gets the lowest rate `a·e^(c-b)`; a highly relevant
//! one (`Z → 0`) approaches `a·e^c`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{ClassAtlas, TtMap};
use crate::nn::Rates;
use crate::stats::SuAtlas;

/// Constants of the rate map `η = a · exp(-b·Z + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for EtaParams {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: -0.1 }
    }
}

impl EtaParams {
    /// Closed interval that every rate falls into for `Z ∈ [0, 1]`.
    pub fn band(&self) -> (f64, f64) {
        let lo = self.a * (self.c - self.b.max(0.0)).exp();
        let hi = self.a * (self.c - self.b.min(0.0)).exp();
        (lo, hi)
    }
}

/// `Σ_o tt[o] · st_row[o]`.
pub fn phi(tt: &[f64], st_row: ArrayView1<f64>) -> Result<f64> {
    if tt.len() != st_row.len() {
        return Err(Error::Shape(format!(
            "{} task relations vs {} class relevances",
            tt.len(),
            st_row.len()
        )));
    }
    Ok(tt.iter().zip(st_row).map(|(t, s)| t * s).sum())
}

/// φ for every neuron of every hidden layer.
pub fn phi_layers(tt: &[f64], st: &[Array2<f64>]) -> Result<Vec<Array1<f64>>> {
    st.iter()
        .map(|layer| {
            if layer.ncols() != tt.len() {
                return Err(Error::Shape(format!(
                    "{} task relations vs {} classes",
                    tt.len(),
                    layer.ncols()
                )));
            }
            Ok(layer.dot(&ArrayView1::from(tt)))
        })
        .collect()
}

/// Importance `Z = exp(-φ)` per hidden neuron, with φ kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceZ {
    pub phi: Vec<Array1<f64>>,
    pub z: Vec<Array1<f64>>,
}

pub fn z_matrix(phi: Vec<Array1<f64>>) -> Result<ImportanceZ> {
    if let Some(bad) = phi.iter().flatten().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Argument(format!("node importance {bad} is not a finite non-negative value")));
    }
    let z = phi.iter().map(|p| p.mapv(|v| (-v).exp())).collect();
    Ok(ImportanceZ { phi, z })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaSchedule {
    pub params: EtaParams,
    pub rates: Vec<Array1<f64>>,
}

impl EtaSchedule {
    /// Hidden rates from the schedule; the output layer takes the largest
    /// hidden rate.
    pub fn to_rates(&self) -> Rates {
        let output = self
            .rates
            .iter()
            .flatten()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        Rates {
            hidden: self.rates.clone(),
            output,
        }
    }
}

pub fn eta_schedule(z: &ImportanceZ, params: EtaParams) -> Result<EtaSchedule> {
    if !(params.a > 0.0) {
        return Err(Error::Argument(format!("rate scale a = {} must be positive", params.a)));
    }
    let EtaParams { a, b, c } = params;
    let rates = z.z.iter().map(|zl| zl.mapv(|v| a * (-b * v + c).exp())).collect();
    Ok(EtaSchedule { params, rates })
}

/// Everything derived for one training step.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub tt: TtMap,
    pub importance: ImportanceZ,
    pub schedule: EtaSchedule,
}

impl Modulation {
    /// `layer,node,phi,z,eta` one row per hidden neuron.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,node,phi,z,eta\n");
        for (l, ((p, z), e)) in self
            .importance
            .phi
            .iter()
            .zip(&self.importance.z)
            .zip(&self.schedule.rates)
            .enumerate()
        {
            for j in 0..p.len() {
                let _ = writeln!(out, "{},{},{},{},{}", l + 1, j, p[j], z[j], e[j]);
            }
        }
        out
    }
}

/// Relation vector used when task-to-task mapping is switched off: 1 for the
/// current task's classes, 0 elsewhere.
pub fn indicator_tt(class_set: &[usize], classes: usize) -> TtMap {
    TtMap {
        values: (0..classes).map(|o| f64::from(u8::from(class_set.contains(&o)))).collect(),
        undefined: Vec::new(),
    }
}

/// Refreshes relevance from the running moments, computes task relations
/// (or the indicator when `ablate_tt`), and derives φ, Z and η for every
/// hidden neuron.
pub fn compute_modulation(
    su: &mut SuAtlas,
    atlas: Option<&ClassAtlas>,
    task_id: usize,
    class_set: &[usize],
    ablate_tt: bool,
    params: EtaParams,
) -> Result<Modulation> {
    su.refresh();
    let classes = su.classes();
    let tt = match (ablate_tt, atlas) {
        (true, _) => indicator_tt(class_set, classes),
        (false, Some(atlas)) => atlas.tt_map(task_id, class_set, classes)?,
        (false, None) => {
            return Err(Error::Argument(
                "task-to-task mapping requires a class atlas".into(),
            ))
        }
    };
    let importance = z_matrix(phi_layers(&tt.values, su.st())?)?;
    let schedule = eta_schedule(&importance, params)?;
    Ok(Modulation {
        tt,
        importance,
        schedule,
    })
}
