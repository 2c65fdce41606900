//! Streaming co-moments between hidden activations and class indicators, and
//! the symmetrical-uncertainty relevance of every hidden neuron to every class
//! under a Gaussian assumption.
//!
//! All logarithms are natural.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::nn::ForwardTrace;

/// Clamp applied to correlations so that `1 - ρ²` stays positive.
pub const RHO_LIMIT: f64 = 1.0 - 1e-12;
/// Variance used for the entropy of (near-)constant variables.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct LayerMoments {
    mean: Array1<f64>,
    m2: Array1<f64>,
    /// `cross[[j, o]] = Σ (h_j - mean_h_j)(y_o - mean_y_o)`
    cross: Array2<f64>,
}

/// Single-pass (Welford) moments of every hidden activation, every one-hot
/// class indicator, and every activation/indicator pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CoMoments {
    count: u64,
    class_mean: Array1<f64>,
    class_m2: Array1<f64>,
    layers: Vec<LayerMoments>,
}

impl CoMoments {
    pub fn new(hidden_sizes: &[usize], classes: usize) -> Self {
        Self {
            count: 0,
            class_mean: Array1::zeros(classes),
            class_m2: Array1::zeros(classes),
            layers: hidden_sizes
                .iter()
                .map(|&n| LayerMoments {
                    mean: Array1::zeros(n),
                    m2: Array1::zeros(n),
                    cross: Array2::zeros((n, classes)),
                })
                .collect(),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn classes(&self) -> usize {
        self.class_mean.len()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.mean.len()).collect()
    }

    /// Folds every row of `trace` into the running statistics.
    pub fn update(&mut self, trace: &ForwardTrace, labels: &[usize]) -> Result<()> {
        if trace.hidden.len() != self.layers.len()
            || trace.hidden.iter().zip(&self.layers).any(|(h, l)| h.ncols() != l.mean.len())
        {
            return Err(Error::Shape("trace widths do not match the moment tables".into()));
        }
        if labels.len() != trace.batch_size() {
            return Err(Error::Shape("one label per sample required".into()));
        }
        let m = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Shape(format!("label {bad} outside {m} classes")));
        }

        let mut y = Array1::<f64>::zeros(m);
        let mut y_dev = Array1::<f64>::zeros(m);
        for (i, &label) in labels.iter().enumerate() {
            self.count += 1;
            let n = self.count as f64;
            y.fill(0.0);
            y[label] = 1.0;
            Zip::from(&mut self.class_mean)
                .and(&mut self.class_m2)
                .and(&y)
                .and(&mut y_dev)
                .for_each(|mean, m2, &yo, dev| {
                    let d = yo - *mean;
                    *mean += d / n;
                    *dev = yo - *mean;
                    *m2 += d * *dev;
                });
            for (layer, h) in self.layers.iter_mut().zip(&trace.hidden) {
                let row = h.row(i);
                Zip::from(&mut layer.mean)
                    .and(&mut layer.m2)
                    .and(layer.cross.rows_mut())
                    .and(&row)
                    .for_each(|mean, m2, mut cross, &x| {
                        let d = x - *mean;
                        *mean += d / n;
                        *m2 += d * (x - *mean);
                        cross.scaled_add(d, &y_dev);
                    });
            }
        }
        Ok(())
    }

    /// Population variance of neuron `j` in layer `l`.
    pub fn activation_variance(&self, l: usize, j: usize) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.layers[l].m2[j] / self.count as f64
    }

    pub fn activation_mean(&self, l: usize, j: usize) -> f64 {
        self.layers[l].mean[j]
    }

    pub fn class_variance(&self, o: usize) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.class_m2[o] / self.count as f64
    }

    pub fn class_mean(&self, o: usize) -> f64 {
        self.class_mean[o]
    }

    /// Population covariance of neuron `j` (layer `l`) and indicator `o`.
    pub fn covariance(&self, l: usize, j: usize, o: usize) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.layers[l].cross[[j, o]] / self.count as f64
    }

    /// Pearson correlation, 0 when either variable is constant or fewer than
    /// two samples were seen.
    pub fn pearson(&self, l: usize, j: usize, o: usize) -> f64 {
        let layer = &self.layers[l];
        let (sx, sy) = (layer.m2[j], self.class_m2[o]);
        if self.count < 2 || sx <= 0.0 || sy <= 0.0 {
            return 0.0;
        }
        (layer.cross[[j, o]] / (sx * sy).sqrt()).clamp(-RHO_LIMIT, RHO_LIMIT)
    }

    /// Relevance of neuron `j` in layer `l` to class `o`, in `[0, 1]`.
    pub fn st_value(&self, l: usize, j: usize, o: usize) -> f64 {
        let rho = self.pearson(l, j, o);
        symmetrical_uncertainty(
            mutual_info(rho),
            diff_entropy(self.activation_variance(l, j).max(VARIANCE_FLOOR)),
            diff_entropy(self.class_variance(o).max(VARIANCE_FLOOR)),
        )
    }
}

/// Gaussian mutual information `-½ ln(1 - ρ²)`.
pub fn mutual_info(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// Gaussian differential entropy `½ (1 + ln(2π σ²))`. Non-positive variances
/// are floored at [`VARIANCE_FLOOR`].
pub fn diff_entropy(variance: f64) -> f64 {
    let v = if variance > 0.0 { variance } else { VARIANCE_FLOOR };
    0.5 * (1.0 + (2.0 * std::f64::consts::PI * v).ln())
}

/// `2I / (H_x + H_y)` clamped to `[0, 1]`. Differential entropies may be
/// negative; when their sum is not positive the score falls back to `min(1, I)`.
pub fn symmetrical_uncertainty(info: f64, h_x: f64, h_y: f64) -> f64 {
    let denom = h_x + h_y;
    let raw = if denom > 0.0 { 2.0 * info / denom } else { info.min(1.0) };
    if raw.is_nan() {
        0.0
    } else {
        raw.clamp(0.0, 1.0)
    }
}

/// Co-moments plus the derived neuron-to-class relevance matrices.
#[derive(Debug, Clone)]
pub struct SuAtlas {
    moments: CoMoments,
    /// One `n_l × m` matrix per hidden layer.
    st: Vec<Array2<f64>>,
}

impl SuAtlas {
    pub fn new(hidden_sizes: &[usize], classes: usize) -> Self {
        Self {
            moments: CoMoments::new(hidden_sizes, classes),
            st: hidden_sizes.iter().map(|&n| Array2::zeros((n, classes))).collect(),
        }
    }

    pub fn moments(&self) -> &CoMoments {
        &self.moments
    }

    pub fn update(&mut self, trace: &ForwardTrace, labels: &[usize]) -> Result<()> {
        self.moments.update(trace, labels)
    }

    /// Recomputes every relevance entry from the current moments.
    pub fn refresh(&mut self) {
        let cm = &self.moments;
        let m = cm.classes();
        // Class entropies are shared by every neuron.
        let class_h: Vec<f64> = (0..m)
            .map(|o| diff_entropy(cm.class_variance(o).max(VARIANCE_FLOOR)))
            .collect();
        for (l, st) in self.st.iter_mut().enumerate() {
            for j in 0..st.nrows() {
                let h_x = diff_entropy(cm.activation_variance(l, j).max(VARIANCE_FLOOR));
                for o in 0..m {
                    st[[j, o]] = symmetrical_uncertainty(mutual_info(cm.pearson(l, j, o)), h_x, class_h[o]);
                }
            }
        }
    }

    pub fn st(&self) -> &[Array2<f64>] {
        &self.st
    }

    pub fn classes(&self) -> usize {
        self.moments.classes()
    }

    /// Plain numeric table: `layer,node,class,st`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,node,class,st\n");
        for (l, st) in self.st.iter().enumerate() {
            for ((j, o), v) in st.indexed_iter() {
                let _ = writeln!(out, "{},{},{},{}", l + 1, j, o, v);
            }
        }
        out
    }
}
