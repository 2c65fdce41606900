//! Task-to-task relations from per-class prototypes in an autoencoder latent
//! space.
//!
//! A tied-weight stacked autoencoder is trained on every batch of every task.
//! During a task, each of its classes accumulates a running latent mean
//! (growing phase); at the task boundary those means are frozen
//! (consolidation) and never change again. Classes are treated as unit-covariance
//! Gaussians, so the divergence between two prototypes is `½‖μ₁ − μ₂‖²`.

use std::fmt::Write as _;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Dense};

/// Guard against a zero mean divergence in the relation score.
pub const TT_EPSILON: f64 = 1e-6;

/// Stacked autoencoder whose decoder reuses the transposed encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sae {
    sizes: Vec<usize>,
    encoder: Vec<Dense>,
    /// `decoder_bias[l]` has the width of the encoder input of layer `l`.
    decoder_bias: Vec<Array1<f64>>,
}

struct SaePass {
    /// `codes[0]` is the input, `codes[E]` the latent.
    codes: Vec<Array2<f64>>,
    /// `recon[l]` is the decoder output at width `sizes[l]`; `recon[0]` is x̂.
    recon: Vec<Array2<f64>>,
}

impl Sae {
    /// `sizes = [input, a_1, …, a_E]`; Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Construction(format!("bad autoencoder sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = sizes
            .windows(2)
            .map(|w| {
                let r = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let dist = Uniform::new_inclusive(-r, r);
                Dense {
                    weights: Array2::from_shape_simple_fn((w[1], w[0]), || dist.sample(&mut rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        let decoder_bias = sizes[..sizes.len() - 1].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            encoder,
            decoder_bias,
        })
    }

    pub fn from_parts(encoder: Vec<Dense>, decoder_bias: Vec<Array1<f64>>) -> Result<Self> {
        if encoder.is_empty() || decoder_bias.len() != encoder.len() {
            return Err(Error::Construction("one decoder bias per encoder layer".into()));
        }
        let mut sizes = vec![encoder[0].fan_in()];
        for (l, layer) in encoder.iter().enumerate() {
            if layer.fan_in() != sizes[l] || decoder_bias[l].len() != layer.fan_in() {
                return Err(Error::Shape("inconsistent autoencoder layers".into()));
            }
            sizes.push(layer.fan_out());
        }
        Ok(Self {
            sizes,
            encoder,
            decoder_bias,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn latent_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }

    /// Decoder weight of layer `l`, always the transpose of the encoder weight.
    pub fn decoder_weights(&self, l: usize) -> Array2<f64> {
        self.encoder[l].weights.t().to_owned()
    }

    fn check_width(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.sizes[0] {
            return Err(Error::Shape(format!(
                "batch has {} columns, autoencoder expects {}",
                x.ncols(),
                self.sizes[0]
            )));
        }
        Ok(())
    }

    fn pass(&self, x: ArrayView2<f64>) -> SaePass {
        let mut codes = vec![x.to_owned()];
        for layer in &self.encoder {
            let mut z = codes.last().unwrap().dot(&layer.weights.t());
            z += &layer.bias;
            z.mapv_inplace(sigmoid);
            codes.push(z);
        }
        let depth = self.encoder.len();
        let mut recon = vec![Array2::zeros((0, 0)); depth + 1];
        recon[depth] = codes[depth].clone();
        for l in (0..depth).rev() {
            let mut r = recon[l + 1].dot(&self.encoder[l].weights);
            r += &self.decoder_bias[l];
            r.mapv_inplace(sigmoid);
            recon[l] = r;
        }
        SaePass { codes, recon }
    }

    /// Batch mean of the per-sample squared reconstruction error.
    pub fn reconstruction_loss(&self, x: ArrayView2<f64>) -> Result<f64> {
        self.check_width(&x)?;
        let p = self.pass(x);
        Ok(squared_error(&p.recon[0], &x))
    }

    pub fn reconstruct(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&x)?;
        Ok(self.pass(x).recon.swap_remove(0))
    }

    /// Latent codes, one row per input row, entries in (0, 1).
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&x)?;
        let mut z = x.to_owned();
        for layer in &self.encoder {
            let mut next = z.dot(&layer.weights.t());
            next += &layer.bias;
            next.mapv_inplace(sigmoid);
            z = next;
        }
        Ok(z)
    }

    /// Gradients of [`Self::reconstruction_loss`]: per encoder layer the
    /// shared weight gradient (encoder and decoder contributions summed) and
    /// encoder bias gradient, plus decoder bias gradients.
    fn gradients(&self, x: ArrayView2<f64>, p: &SaePass) -> (Vec<Dense>, Vec<Array1<f64>>) {
        let depth = self.encoder.len();
        let batch = x.nrows() as f64;
        let mut weight_grads: Vec<Array2<f64>> =
            self.encoder.iter().map(|l| Array2::zeros(l.weights.dim())).collect();
        let mut enc_bias_grads: Vec<Array1<f64>> = vec![Array1::zeros(0); depth];
        let mut dec_bias_grads: Vec<Array1<f64>> = vec![Array1::zeros(0); depth];

        // Decoder, from the reconstruction back up to the latent.
        let mut grad = (&p.recon[0] - &x) * (2.0 / batch);
        for l in 0..depth {
            let out = &p.recon[l];
            let delta = Zip::from(&grad).and(out).map_collect(|&g, &r| g * r * (1.0 - r));
            // pre = recon[l+1] · W_l, W_l is a_l × a_{l-1}
            weight_grads[l] += &p.recon[l + 1].t().dot(&delta);
            dec_bias_grads[l] = delta.sum_axis(Axis(0));
            grad = delta.dot(&self.encoder[l].weights.t());
        }
        // Encoder, from the latent back down to the input.
        for l in (0..depth).rev() {
            let out = &p.codes[l + 1];
            let delta = Zip::from(&grad).and(out).map_collect(|&g, &z| g * z * (1.0 - z));
            weight_grads[l] += &delta.t().dot(&p.codes[l]);
            enc_bias_grads[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                grad = delta.dot(&self.encoder[l].weights);
            }
        }
        let enc = weight_grads
            .into_iter()
            .zip(enc_bias_grads)
            .map(|(weights, bias)| Dense { weights, bias })
            .collect();
        (enc, dec_bias_grads)
    }

    /// One SGD step on the reconstruction loss. Returns the loss measured
    /// before the step.
    pub fn train_step(&mut self, x: ArrayView2<f64>, lr: f64) -> Result<f64> {
        self.check_width(&x)?;
        let p = self.pass(x);
        let loss = squared_error(&p.recon[0], &x);
        let (enc, dec) = self.gradients(x, &p);
        for (layer, g) in self.encoder.iter_mut().zip(&enc) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.bias.scaled_add(-lr, &g.bias);
        }
        for (b, g) in self.decoder_bias.iter_mut().zip(&dec) {
            b.scaled_add(-lr, g);
        }
        Ok(loss)
    }
}

fn squared_error(recon: &Array2<f64>, x: &ArrayView2<f64>) -> f64 {
    let total: f64 = Zip::from(recon).and(x).fold(0.0, |acc, &r, &v| acc + (r - v).powi(2));
    total / x.nrows() as f64
}

/// Latent prototype of one class within one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCluster {
    pub task_id: usize,
    pub class_id: usize,
    pub mean: Array1<f64>,
    pub count: u64,
    pub frozen: bool,
}

/// `KL(N(μ₁, I) ‖ N(μ₂, I)) = ½‖μ₁ − μ₂‖²`.
pub fn kl_unit_gaussian(mu1: ArrayView1<f64>, mu2: ArrayView1<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() {
        return Err(Error::Shape(format!(
            "prototype dimensions {} and {}",
            mu1.len(),
            mu2.len()
        )));
    }
    Ok(0.5 * Zip::from(&mu1).and(&mu2).fold(0.0, |acc, &a, &b| acc + (a - b).powi(2)))
}

/// Relation of the current task to every class id.
#[derive(Debug, Clone, PartialEq)]
pub struct TtMap {
    pub values: Vec<f64>,
    /// Class ids without any prototype yet; their value is 0.
    pub undefined: Vec<usize>,
}

/// One relation entry; `defined == false` means no prototype exists to
/// compare against and `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtEntry {
    pub value: f64,
    pub defined: bool,
}

/// The autoencoder together with every class prototype built so far.
#[derive(Debug, Clone)]
pub struct ClassAtlas {
    sae: Sae,
    learning_rate: f64,
    clusters: Vec<ClassCluster>,
}

impl ClassAtlas {
    pub fn new(sae: Sae, learning_rate: f64) -> Self {
        Self {
            sae,
            learning_rate,
            clusters: Vec::new(),
        }
    }

    pub fn sae(&self) -> &Sae {
        &self.sae
    }

    pub fn clusters(&self) -> &[ClassCluster] {
        &self.clusters
    }

    pub fn cluster(&self, task_id: usize, class_id: usize) -> Option<&ClassCluster> {
        self.clusters
            .iter()
            .find(|c| c.task_id == task_id && c.class_id == class_id)
    }

    /// Trains the autoencoder on `x`, returns the pre-step loss.
    pub fn train_step(&mut self, x: ArrayView2<f64>) -> Result<f64> {
        self.sae.train_step(x, self.learning_rate)
    }

    /// Encodes `x` and folds each latent into the running mean of its class
    /// for `task_id`.
    pub fn observe(&mut self, task_id: usize, class_set: &[usize], x: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        let latent = self.sae.encode(x)?;
        self.grow(task_id, class_set, latent.view(), labels)
    }

    /// Growing phase: running-mean update of each class prototype.
    pub fn grow(&mut self, task_id: usize, class_set: &[usize], latent: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        if latent.nrows() != labels.len() {
            return Err(Error::Shape("one label per latent row required".into()));
        }
        if latent.ncols() != self.sae.latent_size() {
            return Err(Error::Shape("latent width does not match the autoencoder".into()));
        }
        if let Some(&bad) = labels.iter().find(|l| !class_set.contains(l)) {
            return Err(Error::Argument(format!(
                "label {bad} is not a class of task {task_id}"
            )));
        }
        for (row, &class_id) in latent.rows().into_iter().zip(labels) {
            let idx = match self
                .clusters
                .iter()
                .position(|c| c.task_id == task_id && c.class_id == class_id)
            {
                Some(i) => i,
                None => {
                    self.clusters.push(ClassCluster {
                        task_id,
                        class_id,
                        mean: Array1::zeros(row.len()),
                        count: 0,
                        frozen: false,
                    });
                    self.clusters.len() - 1
                }
            };
            let cluster = &mut self.clusters[idx];
            if cluster.frozen {
                return Err(Error::FrozenCluster {
                    task: task_id,
                    class: class_id,
                });
            }
            cluster.count += 1;
            let n = cluster.count as f64;
            Zip::from(&mut cluster.mean).and(&row).for_each(|m, &z| *m += (z - *m) / n);
        }
        Ok(())
    }

    /// Freezes every prototype of `task_id`. Returns `false` (and warns) when
    /// there was nothing left to freeze.
    pub fn consolidate(&mut self, task_id: usize) -> bool {
        let mut changed = false;
        for c in self.clusters.iter_mut().filter(|c| c.task_id == task_id) {
            if !c.frozen {
                c.frozen = true;
                changed = true;
            }
        }
        if !changed {
            warn!("task {task_id} has no unfrozen class prototypes to consolidate");
        }
        changed
    }

    /// Relation of task `task_id` (with classes `class_set`) to class `o`.
    ///
    /// Own classes relate with 1. Otherwise the score is the inverse mean
    /// divergence between the current task's prototypes and the most recent
    /// prototype of `o`, capped at 1.
    pub fn tt_value(&self, task_id: usize, class_set: &[usize], o: usize) -> Result<TtEntry> {
        if class_set.contains(&o) {
            return Ok(TtEntry { value: 1.0, defined: true });
        }
        let target = self
            .clusters
            .iter()
            .filter(|c| c.class_id == o && c.task_id != task_id)
            .max_by_key(|c| c.task_id);
        let current: Vec<&ClassCluster> = self
            .clusters
            .iter()
            .filter(|c| c.task_id == task_id && c.count > 0)
            .collect();
        let Some(target) = target else {
            return Ok(TtEntry { value: 0.0, defined: false });
        };
        if current.is_empty() {
            return Ok(TtEntry { value: 0.0, defined: false });
        }
        let mut total = 0.0;
        for c in &current {
            total += kl_unit_gaussian(c.mean.view(), target.mean.view())?;
        }
        let mean_kl = total / current.len() as f64;
        Ok(TtEntry {
            value: (1.0 / (TT_EPSILON + mean_kl)).min(1.0),
            defined: true,
        })
    }

    pub fn tt_map(&self, task_id: usize, class_set: &[usize], classes: usize) -> Result<TtMap> {
        let mut values = Vec::with_capacity(classes);
        let mut undefined = Vec::new();
        for o in 0..classes {
            let e = self.tt_value(task_id, class_set, o)?;
            if !e.defined {
                undefined.push(o);
            }
            values.push(e.value);
        }
        Ok(TtMap { values, undefined })
    }

    /// SHA-256 over the ids and exact bit patterns of every frozen prototype.
    pub fn frozen_checksum(&self) -> String {
        checksum(self.clusters.iter().filter(|c| c.frozen))
    }

    /// Like [`ClassAtlas::frozen_checksum`], restricted to one task.
    pub fn task_checksum(&self, task_id: usize) -> String {
        checksum(self.clusters.iter().filter(|c| c.frozen && c.task_id == task_id))
    }

    /// `task,class,count,frozen,mu_0,…` one row per prototype.
    pub fn to_csv(&self) -> String {
        let dim = self.sae.latent_size();
        let mut out = String::from("task,class,count,frozen");
        for k in 0..dim {
            let _ = write!(out, ",mu_{k}");
        }
        out.push('\n');
        for c in &self.clusters {
            let _ = write!(out, "{},{},{},{}", c.task_id, c.class_id, c.count, c.frozen);
            for v in &c.mean {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn checksum<'a>(clusters: impl Iterator<Item = &'a ClassCluster>) -> String {
    let mut hasher = Sha256::new();
    for c in clusters {
        hasher.update((c.task_id as u64).to_le_bytes());
        hasher.update((c.class_id as u64).to_le_bytes());
        for v in &c.mean {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}
