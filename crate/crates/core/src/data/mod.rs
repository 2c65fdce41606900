//! Digit datasets and the split / permuted / rotated task streams built on them.

pub mod idx;
pub mod rotate;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use idx::load_idx;
pub use rotate::rotate_image;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_DIGITS: usize = 10;

/// Labeled images, one row per sample, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Array2<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Array2<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} image rows but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {v} outside [0,1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| usize::from(l) >= NUM_DIGITS) {
            return Err(Error::Argument(format!("label {l} is not a digit")));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array2<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn width(&self) -> usize {
        self.images.ncols()
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows at `indices` widened to `f64` for the numeric core.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.images.select(Axis(0), indices).mapv(f64::from);
        let y = indices.iter().map(|&i| usize::from(self.labels[i])).collect();
        (x, y)
    }

    pub fn class_counts(&self) -> [usize; NUM_DIGITS] {
        let mut counts = [0; NUM_DIGITS];
        for &l in &self.labels {
            counts[usize::from(l)] += 1;
        }
        counts
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    fn map_rows(&self, f: impl Fn(&[f32]) -> Vec<f32>) -> Dataset {
        let width = self.width();
        let mut data = Vec::with_capacity(self.images.len());
        for row in self.images.rows() {
            let owned;
            let slice = match row.as_slice() {
                Some(s) => s,
                None => {
                    owned = row.to_vec();
                    &owned
                }
            };
            data.extend(f(slice));
        }
        Dataset {
            images: Array2::from_shape_vec((self.len(), width), data)
                .expect("row transform preserves width"),
            labels: self.labels.clone(),
        }
    }
}

/// The native train/test split of a digit corpus.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub train: Dataset,
    pub test: Dataset,
}

impl SourceData {
    /// Loads the four standard MNIST files from `dir`.
    pub fn load_mnist(dir: &Path) -> Result<Self> {
        let train = load_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )?;
        let test = load_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )?;
        Ok(Self { train, test })
    }
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    /// `output[i] = input[map[i]]`
    Permutation(Vec<usize>),
    /// Degrees, counter-clockwise about the image center.
    Rotation(f64),
}

impl Transform {
    pub fn apply(&self, img: &[f32]) -> Vec<f32> {
        match self {
            Transform::Identity => img.to_vec(),
            Transform::Permutation(map) => map.iter().map(|&i| img[i]).collect(),
            Transform::Rotation(angle) => rotate_image(img, *angle),
        }
    }

    /// Inverse of a permutation map.
    pub fn inverse_permutation(map: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; map.len()];
        for (i, &m) in map.iter().enumerate() {
            inv[m] = i;
        }
        inv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// 1-based position in the stream.
    pub task_id: usize,
    pub class_set: Vec<usize>,
    pub transform: Transform,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Split,
    Permuted,
    Rotated,
}

impl StreamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Split => "split",
            StreamKind::Permuted => "permuted",
            StreamKind::Rotated => "rotated",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(StreamKind::Split),
            "permuted" => Ok(StreamKind::Permuted),
            "rotated" => Ok(StreamKind::Rotated),
            other => Err(Error::Argument(format!("unknown stream '{other}'"))),
        }
    }
}

/// An ordered, visit-once sequence of tasks.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub tasks: Vec<Task>,
    /// Number of distinct global class ids across all tasks.
    pub total_classes: usize,
}

impl TaskStream {
    pub fn new(kind: StreamKind, tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Construction("a stream needs at least one task".into()));
        }
        let mut all = BTreeSet::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.spec.task_id != i + 1 {
                return Err(Error::Construction(format!(
                    "task at position {} carries id {}",
                    i + 1,
                    t.spec.task_id
                )));
            }
            let unique: BTreeSet<_> = t.spec.class_set.iter().copied().collect();
            if unique.len() != t.spec.class_set.len() {
                return Err(Error::Construction(format!(
                    "task {} repeats a class id",
                    t.spec.task_id
                )));
            }
            all.extend(unique);
        }
        // The output head is indexed by class id, so it must cover the largest id.
        let total_classes = all.iter().max().map_or(0, |&c| c + 1).max(all.len());
        Ok(Self {
            kind,
            tasks,
            total_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes seen in tasks `1..=task_id`.
    pub fn seen_classes(&self, task_id: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.tasks[..task_id]
            .iter()
            .flat_map(|t| t.spec.class_set.iter().copied())
            .collect();
        set.into_iter().collect()
    }
}

/// Optional per-task subsampling, stratified by class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_task: Option<usize>,
}

fn task_rng(seed: u64, task_id: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((task_id as u64) << 1 | salt);
    rng
}

/// Indices of the rows whose label is in `classes`, optionally reduced to
/// `cap` rows with a per-class quota as even as availability allows.
/// Returned in ascending order.
fn stratified_indices(
    d: &Dataset,
    classes: &[usize],
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            d.labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| usize::from(l) == c)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut picked = match cap {
        None => per_class.concat(),
        Some(cap) => {
            for idx in per_class.iter_mut() {
                idx.shuffle(rng);
            }
            let mut quota = vec![0usize; per_class.len()];
            let mut remaining = cap.min(per_class.iter().map(Vec::len).sum());
            // Round-robin fill so that short classes hand their share to the rest.
            while remaining > 0 {
                let mut progressed = false;
                for (k, idx) in per_class.iter().enumerate() {
                    if remaining > 0 && quota[k] < idx.len() {
                        quota[k] += 1;
                        remaining -= 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            per_class
                .iter()
                .zip(&quota)
                .flat_map(|(idx, &q)| idx[..q].iter().copied())
                .collect()
        }
    };
    picked.sort_unstable();
    picked
}

fn build_task(
    src: &SourceData,
    spec: TaskSpec,
    caps: Caps,
    seed: u64,
) -> Result<Task> {
    let mut rng_train = task_rng(seed, spec.task_id, 0);
    let mut rng_test = task_rng(seed, spec.task_id, 1);
    let train_idx = stratified_indices(&src.train, &spec.class_set, caps.train_per_task, &mut rng_train);
    let test_idx = stratified_indices(&src.test, &spec.class_set, caps.test_per_task, &mut rng_test);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Construction(format!(
            "task {} has an empty train or test set",
            spec.task_id
        )));
    }
    let mut train = src.train.select(&train_idx);
    let mut test = src.test.select(&test_idx);
    if spec.transform != Transform::Identity {
        train = train.map_rows(|r| spec.transform.apply(r));
        test = test.map_rows(|r| spec.transform.apply(r));
    }
    Ok(Task { spec, train, test })
}

fn require_all_digits(src: &SourceData) -> Result<()> {
    for (name, d) in [("train", &src.train), ("test", &src.test)] {
        if let Some(missing) = d.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::Construction(format!(
                "{name} set has no samples of class {missing}"
            )));
        }
    }
    Ok(())
}

/// Five two-way tasks over disjoint digit pairs `{0,1}, {2,3}, …, {8,9}`.
pub fn make_split_tasks(src: &SourceData, caps: Caps, seed: u64) -> Result<TaskStream> {
    require_all_digits(src)?;
    let tasks = (0..5)
        .map(|k| {
            let spec = TaskSpec {
                task_id: k + 1,
                class_set: vec![2 * k, 2 * k + 1],
                transform: Transform::Identity,
            };
            build_task(src, spec, caps, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(StreamKind::Split, tasks)
}

/// Pixel permutation used by task `task_id` of a permuted stream. Task 1 is
/// the identity; later tasks are seeded with `seed + task_id`.
pub fn permutation_for(seed: u64, task_id: usize) -> Vec<usize> {
    let mut map: Vec<usize> = (0..IMAGE_PIXELS).collect();
    if task_id > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(task_id as u64));
        map.shuffle(&mut rng);
    }
    map
}

pub fn make_permuted_tasks(
    src: &SourceData,
    t_count: usize,
    seed: u64,
    caps: Caps,
) -> Result<TaskStream> {
    if t_count == 0 {
        return Err(Error::Argument("permuted stream needs at least one task".into()));
    }
    require_all_digits(src)?;
    let tasks = (1..=t_count)
        .map(|task_id| {
            let transform = if task_id == 1 {
                Transform::Identity
            } else {
                Transform::Permutation(permutation_for(seed, task_id))
            };
            let spec = TaskSpec {
                task_id,
                class_set: (0..NUM_DIGITS).collect(),
                transform,
            };
            build_task(src, spec, caps, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(StreamKind::Permuted, tasks)
}

/// Angle of task `task_id` (1-based) in a stream of `t_count` rotated tasks,
/// evenly spaced over `[0, 180]`.
pub fn rotation_angle(task_id: usize, t_count: usize) -> f64 {
    180.0 * (task_id - 1) as f64 / (t_count - 1) as f64
}

pub fn make_rotated_tasks(
    src: &SourceData,
    t_count: usize,
    seed: u64,
    caps: Caps,
) -> Result<TaskStream> {
    if t_count < 2 {
        return Err(Error::Argument("rotated stream needs at least two tasks".into()));
    }
    require_all_digits(src)?;
    let tasks = (1..=t_count)
        .map(|task_id| {
            let angle = rotation_angle(task_id, t_count);
            let transform = if angle == 0.0 {
                Transform::Identity
            } else {
                Transform::Rotation(angle)
            };
            let spec = TaskSpec {
                task_id,
                class_set: (0..NUM_DIGITS).collect(),
                transform,
            };
            build_task(src, spec, caps, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    TaskStream::new(StreamKind::Rotated, tasks)
}

pub fn make_stream(
    kind: StreamKind,
    src: &SourceData,
    t_count: usize,
    seed: u64,
    caps: Caps,
) -> Result<TaskStream> {
    match kind {
        StreamKind::Split => make_split_tasks(src, caps, seed),
        StreamKind::Permuted => make_permuted_tasks(src, t_count, seed, caps),
        StreamKind::Rotated => make_rotated_tasks(src, t_count, seed, caps),
    }
}
