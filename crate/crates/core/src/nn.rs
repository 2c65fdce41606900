//! Dense sigmoid MLP with a softmax head, trained by SGD with per-neuron rates.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// One affine layer. `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// A list of layers shaped like a network: parameters, gradients, or any
/// per-parameter quantity (Fisher diagonals, path integrals, anchors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<Dense>,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All values flattened layer by layer (weights row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self[i] = f(self[i], other[i])` for every value.
    pub fn zip_apply(&mut self, other: &Params, f: impl Fn(f64, f64) -> f64) {
        assert!(self.same_shape(other), "parameter shapes differ");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            Zip::from(&mut a.weights).and(&b.weights).for_each(|x, &y| *x = f(*x, y));
            Zip::from(&mut a.bias).and(&b.bias).for_each(|x, &y| *x = f(*x, y));
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(&f);
            l.bias.mapv_inplace(&f);
        }
    }
}

/// Sigmoid hidden layers followed by a softmax output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Params,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    /// `hidden[l]` is `batch × n_l`.
    pub hidden: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-neuron learning rates for one SGD step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates {
    /// One vector per hidden layer, one entry per neuron.
    pub hidden: Vec<Array1<f64>>,
    pub output: f64,
}

impl Rates {
    pub fn uniform(net: &Mlp, rate: f64) -> Self {
        Self {
            hidden: net.hidden_sizes().iter().map(|&n| Array1::from_elem(n, rate)).collect(),
            output: rate,
        }
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes = [inputs, hidden.., outputs]`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Construction(format!(
                "need at least one hidden layer, got sizes {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Construction(format!("zero-width layer in {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-r, r);
                let weights =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: Params { layers },
        })
    }

    pub fn from_params(params: Params) -> Result<Self> {
        if params.layers.len() < 2 {
            return Err(Error::Construction("need at least one hidden layer".into()));
        }
        let mut sizes = vec![params.layers[0].fan_in()];
        for l in &params.layers {
            if l.fan_in() != *sizes.last().unwrap() || l.bias.len() != l.fan_out() {
                return Err(Error::Shape("inconsistent layer chain".into()));
            }
            sizes.push(l.fan_out());
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn hidden_layers(&self) -> &[Dense] {
        &self.params.layers[..self.params.layers.len() - 1]
    }

    pub fn output_layer(&self) -> &Dense {
        self.params.layers.last().unwrap()
    }

    /// Forward pass over all output classes.
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.forward_masked(batch, None)
    }

    /// Forward pass where only classes with `mask[c] == true` can receive
    /// probability mass; the rest get logit −∞.
    pub fn forward_masked(&self, batch: ArrayView2<f64>, mask: Option<&[bool]>) -> Result<ForwardTrace> {
        if batch.ncols() != self.input_size() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_size()
            )));
        }
        if let Some(mask) = mask {
            if mask.len() != self.num_classes() || !mask.iter().any(|&m| m) {
                return Err(Error::Shape("class mask must cover the head and allow a class".into()));
            }
        }
        let mut hidden = Vec::with_capacity(self.hidden_layers().len());
        let mut current = batch.to_owned();
        for layer in self.hidden_layers() {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.bias;
            z.mapv_inplace(sigmoid);
            hidden.push(z.clone());
            current = z;
        }
        let out = self.output_layer();
        let mut logits = current.dot(&out.weights.t());
        logits += &out.bias;
        if let Some(mask) = mask {
            for mut row in logits.rows_mut() {
                for (v, &keep) in row.iter_mut().zip(mask) {
                    if !keep {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let probs = softmax_rows(&logits);
        Ok(ForwardTrace {
            input: batch.to_owned(),
            hidden,
            logits,
            probs,
        })
    }

    /// Error signals at every layer's pre-activation given the output-layer
    /// signal. Index `l` pairs with `params.layers[l]`.
    fn layer_deltas(&self, trace: &ForwardTrace, output_delta: Array2<f64>) -> Vec<Array2<f64>> {
        let n_layers = self.params.layers.len();
        let mut deltas = vec![Array2::zeros((0, 0)); n_layers];
        deltas[n_layers - 1] = output_delta;
        for l in (0..n_layers - 1).rev() {
            let upstream = deltas[l + 1].dot(&self.params.layers[l + 1].weights);
            let h = &trace.hidden[l];
            deltas[l] = Zip::from(&upstream).and(h).map_collect(|&d, &a| d * a * (1.0 - a));
        }
        deltas
    }

    fn gradients_from_deltas(&self, trace: &ForwardTrace, deltas: &[Array2<f64>]) -> Gradients {
        let layers = deltas
            .iter()
            .enumerate()
            .map(|(l, delta)| {
                let input = if l == 0 { &trace.input } else { &trace.hidden[l - 1] };
                Dense {
                    weights: delta.t().dot(input),
                    bias: delta.sum_axis(Axis(0)),
                }
            })
            .collect();
        Params { layers }
    }

    /// Gradients of the batch-mean cross-entropy against one-hot `targets`.
    pub fn backward(&self, trace: &ForwardTrace, targets: ArrayView2<f64>) -> Result<Gradients> {
        if targets.dim() != trace.probs.dim() {
            return Err(Error::Shape(format!(
                "targets {:?} vs outputs {:?}",
                targets.dim(),
                trace.probs.dim()
            )));
        }
        if trace.hidden.len() != self.hidden_layers().len() || trace.input.ncols() != self.input_size() {
            return Err(Error::Shape("trace was not produced by this network".into()));
        }
        let batch = trace.batch_size() as f64;
        let output_delta = (&trace.probs - &targets) / batch;
        let deltas = self.layer_deltas(trace, output_delta);
        Ok(self.gradients_from_deltas(trace, &deltas))
    }

    pub fn backward_labels(&self, trace: &ForwardTrace, labels: &[usize]) -> Result<Gradients> {
        let targets = one_hot(labels, self.num_classes())?;
        self.backward(trace, targets.view())
    }

    /// Squared per-sample gradients of `-log p(c|x)` for every class `c`
    /// allowed by the trace, weighted by `p(c|x)`, summed over the rows of
    /// `trace`. The diagonal of the Fisher information up to normalization.
    pub(crate) fn expected_squared_gradients(&self, trace: &ForwardTrace, acc: &mut Params) {
        let m = self.num_classes();
        for i in 0..trace.batch_size() {
            let p = trace.probs.row(i);
            let classes: Vec<usize> = (0..m).filter(|&c| p[c] > 0.0).collect();
            let k = classes.len();
            let single = ForwardTrace {
                input: broadcast_row(&trace.input, i, k),
                hidden: trace.hidden.iter().map(|h| broadcast_row(h, i, k)).collect(),
                logits: broadcast_row(&trace.logits, i, k),
                probs: broadcast_row(&trace.probs, i, k),
            };
            let mut out_delta = single.probs.clone();
            for (r, &c) in classes.iter().enumerate() {
                out_delta[[r, c]] -= 1.0;
            }
            let weights = Array1::from_iter(classes.iter().map(|&c| p[c]));
            let deltas = self.layer_deltas(&single, out_delta);
            for (l, delta) in deltas.iter().enumerate() {
                // Each row's gradient is an outer product, so its square factorizes.
                let sq = delta.mapv(|d| d * d);
                let s = weights.dot(&sq);
                let input = if l == 0 { trace.input.row(i) } else { trace.hidden[l - 1].row(i) };
                let a2 = input.mapv(|a| a * a);
                let layer = &mut acc.layers[l];
                Zip::from(layer.weights.rows_mut()).and(&s).for_each(|mut row, &sv| {
                    row.scaled_add(sv, &a2);
                });
                layer.bias += &s;
            }
        }
    }

    /// Applies one SGD step. Row `j` of hidden layer `l` (weights and bias)
    /// moves with `rates.hidden[l][j]`; the output layer with `rates.output`.
    pub fn sgd_step(&mut self, grads: &Gradients, rates: &Rates) -> Result<()> {
        if !self.params.same_shape(grads) {
            return Err(Error::Shape("gradients do not match the network".into()));
        }
        let hidden = self.hidden_sizes().to_vec();
        if rates.hidden.len() != hidden.len()
            || rates.hidden.iter().zip(&hidden).any(|(r, &n)| r.len() != n)
        {
            return Err(Error::Shape("rate vectors do not match hidden widths".into()));
        }
        if rates.output < 0.0 || rates.hidden.iter().flatten().any(|&r| r < 0.0 || r.is_nan()) {
            return Err(Error::Argument("learning rates must be non-negative".into()));
        }
        let n = self.params.layers.len();
        for (l, (layer, grad)) in self.params.layers.iter_mut().zip(&grads.layers).enumerate() {
            if l + 1 == n {
                layer.weights.scaled_add(-rates.output, &grad.weights);
                layer.bias.scaled_add(-rates.output, &grad.bias);
            } else {
                let eta = &rates.hidden[l];
                Zip::from(layer.weights.rows_mut())
                    .and(grad.weights.rows())
                    .and(&mut layer.bias)
                    .and(&grad.bias)
                    .and(eta)
                    .for_each(|mut w, g, b, &gb, &e| {
                        w.scaled_add(-e, &g);
                        *b -= e * gb;
                    });
            }
        }
        Ok(())
    }

    /// Batch-mean cross-entropy.
    pub fn loss(&self, batch: ArrayView2<f64>, labels: &[usize], mask: Option<&[bool]>) -> Result<f64> {
        let trace = self.forward_masked(batch, mask)?;
        Ok(cross_entropy(&trace.probs, labels))
    }

    /// Fraction of samples whose arg-max class equals the label. With
    /// `class_mask`, only those class ids compete. Ties go to the lowest id.
    pub fn accuracy(&self, data: &Dataset, class_mask: Option<&[usize]>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Argument("accuracy of an empty dataset".into()));
        }
        let m = self.num_classes();
        let allowed: Vec<usize> = match class_mask {
            Some(mask) => {
                if let Some(&bad) = mask.iter().find(|&&c| c >= m) {
                    return Err(Error::Argument(format!("class {bad} outside a {m}-way head")));
                }
                let mut v = mask.to_vec();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (0..m).collect(),
        };
        const CHUNK: usize = 1000;
        let mut correct = 0usize;
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(CHUNK) {
            let (x, y) = data.batch(chunk);
            let trace = self.forward(x.view())?;
            for (row, &label) in trace.logits.rows().into_iter().zip(&y) {
                if argmax_over(row.as_slice().expect("logits are contiguous"), &allowed) == label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net: Mlp = serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
        let rebuilt = Mlp::from_params(net.params.clone())?;
        if rebuilt.sizes != net.sizes {
            return Err(Error::Shape("checkpoint sizes disagree with its arrays".into()));
        }
        Ok(net)
    }
}

fn broadcast_row(m: &Array2<f64>, i: usize, k: usize) -> Array2<f64> {
    m.slice(s![i..i + 1, ..]).broadcast((k, m.ncols())).unwrap().to_owned()
}

/// Lowest-index maximum among `allowed` (ascending ids).
fn argmax_over(values: &[f64], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &c in &allowed[1..] {
        if values[c] > values[best] {
            best = c;
        }
    }
    best
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Shape(format!("label {l} outside a {classes}-way head")));
        }
        t[[i, l]] = 1.0;
    }
    Ok(t)
}

pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[[i, l]].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Central-difference oracle over every parameter.
    fn max_rel_fd_error(net: &Mlp, x: &Array2<f64>, labels: &[usize]) -> f64 {
        let trace = net.forward(x.view()).unwrap();
        let analytic = net.backward_labels(&trace, labels).unwrap().flatten();
        let eps = 1e-5;
        let base = net.params().flatten();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut flat = base.clone();
                flat[i] += delta;
                let mut p = net.clone();
                let mut it = flat.into_iter();
                for l in &mut p.params_mut().layers {
                    l.weights.iter_mut().for_each(|v| *v = it.next().unwrap());
                    l.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
                }
                p.loss(x.view(), labels, None).unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn layer_shapes_for_split_net() {
        let net = Mlp::new(&[784, 256, 256, 10], 0).unwrap();
        assert_eq!(net.hidden_layers()[0].weights.dim(), (256, 784));
        assert_eq!(net.output_layer().weights.dim(), (10, 256));
        assert!(net.params().layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Mlp::new(&[20, 7, 3], 9).unwrap();
        assert_eq!(a, Mlp::new(&[20, 7, 3], 9).unwrap());
        assert_ne!(a, Mlp::new(&[20, 7, 3], 10).unwrap());
        let r = (6.0f64 / 27.0).sqrt();
        assert!(a.hidden_layers()[0].weights.iter().all(|w| w.abs() <= r));
        assert!(matches!(Mlp::new(&[20, 3], 0), Err(Error::Construction(_))));
    }

    #[test]
    fn zero_weights_give_half_activations_and_uniform_softmax() {
        let mut net = Mlp::new(&[4, 3, 5], 0).unwrap();
        net.params_mut().map_inplace(|_| 0.0);
        let t = net.forward(Array2::zeros((2, 4)).view()).unwrap();
        assert!(t.hidden[0].iter().all(|&h| h == 0.5));
        assert!(t.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn toy_two_two_two_matches_hand_evaluation() {
        let net = Mlp::from_params(Params {
            layers: vec![
                Dense { weights: array![[1.0, -1.0], [0.5, 2.0]], bias: array![0.0, -1.0] },
                Dense { weights: array![[1.0, 0.0], [-1.0, 1.0]], bias: array![0.5, 0.0] },
            ],
        })
        .unwrap();
        let t = net.forward(array![[1.0, 0.5]].view()).unwrap();
        // hidden: sigmoid(0.5), sigmoid(0.5 + 1.0 - 1.0) = sigmoid(0.5)
        let h = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((t.hidden[0][[0, 0]] - h).abs() < 1e-15);
        assert!((t.hidden[0][[0, 1]] - h).abs() < 1e-15);
        // logits: h + 0.5, 0 -> softmax
        let (o1, o2) = (h + 0.5, 0.0f64);
        let p1 = o1.exp() / (o1.exp() + o2.exp());
        assert!((t.probs[[0, 0]] - p1).abs() < 1e-12);
        assert!((t.probs[[0, 1]] - (1.0 - p1)).abs() < 1e-12);
    }

    #[test]
    fn finite_differences_agree_on_six_three_three() {
        let net = Mlp::new(&[6, 3, 3], 4).unwrap();
        let x = random_batch(4, 6, 5);
        let err = max_rel_fd_error(&net, &x, &[0, 2, 1, 2]);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn output_gradient_vanishes_at_perfect_prediction() {
        let net = Mlp::new(&[3, 4, 2], 1).unwrap();
        let trace = net.forward(random_batch(3, 3, 2).view()).unwrap();
        let grads = net.backward(&trace, trace.probs.view()).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let net = Mlp::new(&[5, 4, 3], 3).unwrap();
        let x = random_batch(3, 5, 8);
        let labels = [0, 1, 2];
        let g1 = net.backward_labels(&net.forward(x.view()).unwrap(), &labels).unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let labels2 = [0, 1, 2, 0, 1, 2];
        let g2 = net.backward_labels(&net.forward(x2.view()).unwrap(), &labels2).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_wrong_target_shape() {
        let net = Mlp::new(&[2, 2, 2], 0).unwrap();
        let t = net.forward(Array2::zeros((1, 2)).view()).unwrap();
        assert!(net.backward(&t, Array2::zeros((1, 3)).view()).is_err());
        assert!(net.forward(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn zero_rates_leave_parameters_unchanged() {
        let mut net = Mlp::new(&[4, 3, 2], 0).unwrap();
        let before = net.clone();
        let grads = net.backward_labels(&net.forward(random_batch(2, 4, 1).view()).unwrap(), &[0, 1]).unwrap();
        net.sgd_step(&grads, &Rates::uniform(&before, 0.0)).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn uniform_rates_equal_textbook_sgd() {
        let mut net = Mlp::new(&[4, 3, 2], 0).unwrap();
        let grads = net.backward_labels(&net.forward(random_batch(2, 4, 1).view()).unwrap(), &[0, 1]).unwrap();
        let mut expected = net.params().clone();
        expected.zip_apply(&grads, |p, g| p - 0.1 * g);
        net.sgd_step(&grads, &Rates::uniform(&net.clone(), 0.1)).unwrap();
        assert_eq!(net.params(), &expected);
    }

    #[test]
    fn per_neuron_rates_scale_row_movement() {
        let mut net = Mlp::new(&[3, 2, 2], 0).unwrap();
        let before = net.clone();
        let mut grads = Params::zeros_like(net.params());
        grads.layers[0].weights.fill(1.0);
        grads.layers[0].bias.fill(1.0);
        let rates = Rates { hidden: vec![array![0.2, 0.8]], output: 0.1 };
        net.sgd_step(&grads, &rates).unwrap();
        let moved = |j: usize| (&before.params().layers[0].weights.row(j) - &net.params().layers[0].weights.row(j)).mapv(f64::abs).sum();
        assert!((moved(1) / moved(0) - 4.0).abs() < 1e-12);
        let bad = Rates { hidden: vec![array![-0.1, 0.8]], output: 0.1 };
        assert!(matches!(net.sgd_step(&grads, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn masked_classes_get_no_probability_or_gradient() {
        let net = Mlp::new(&[3, 4, 4], 2).unwrap();
        let mask = [true, true, false, false];
        let t = net.forward_masked(random_batch(2, 3, 3).view(), Some(&mask)).unwrap();
        assert!(t.probs.column(2).iter().all(|&p| p == 0.0));
        let g = net.backward_labels(&t, &[0, 1]).unwrap();
        assert!(g.layers[1].weights.row(3).iter().all(|&v| v == 0.0));
        assert_eq!(g.layers[1].bias[2], 0.0);
    }

    fn dataset(rows: Vec<[f32; 2]>, labels: Vec<u8>) -> Dataset {
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Dataset::new(Array2::from_shape_vec((labels.len(), 2), flat).unwrap(), labels).unwrap()
    }

    #[test]
    fn accuracy_counts_and_breaks_ties_low() {
        // Identity-like head: class = larger input coordinate.
        let net = Mlp::from_params(Params {
            layers: vec![
                Dense { weights: array![[20.0, 0.0], [0.0, 20.0]], bias: array![-10.0, -10.0] },
                Dense { weights: array![[10.0, 0.0], [0.0, 10.0]], bias: array![0.0, 0.0] },
            ],
        })
        .unwrap();
        let d = dataset(vec![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![0, 1, 1]);
        assert!((net.accuracy(&d, None).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let mut flat = net.clone();
        flat.params_mut().map_inplace(|_| 0.0);
        let balanced = dataset(vec![[0.3, 0.3]; 4], vec![0, 1, 1, 0]);
        assert_eq!(flat.accuracy(&balanced, None).unwrap(), 0.5);
        assert_eq!(flat.accuracy(&balanced, Some(&[1])).unwrap(), 0.5);
        assert!(flat.accuracy(&balanced.select(&[]), None).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Mlp::new(&[5, 4, 3], 7).unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradients_match_finite_differences(seed in 0u64..1000, batch in 1usize..5) {
            let net = Mlp::new(&[4, 3, 3, 3], seed).unwrap();
            let x = random_batch(batch, 4, seed + 1);
            let labels: Vec<usize> = (0..batch).map(|i| (i + seed as usize) % 3).collect();
            prop_assert!(max_rel_fd_error(&net, &x, &labels) < 1e-5);
        }

        #[test]
        fn softmax_rows_normalize_and_sigmoids_stay_open(seed in 0u64..1000, scale in 0.1f64..5.0) {
            let net = Mlp::new(&[6, 5, 7], seed).unwrap();
            let x = random_batch(3, 6, seed) * scale;
            let t = net.forward(x.view()).unwrap();
            for row in t.probs.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
            prop_assert!(t.hidden[0].iter().all(|&h| h > 0.0 && h < 1.0));
        }
    }
}
