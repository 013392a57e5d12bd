//! Toy classification trainer and a logistic-regression baseline.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PiipConfig, TrainConfig};
use crate::data::{Dataset, ToySplit, CLASSES};
use crate::error::{bail, Error, Result};
use crate::model::Model;
use crate::numerics::{Tape, Tensor};
use crate::params::Bound;

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn best_train_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Loss and parameter gradients of one sample.
fn sample_grad(model: &Model<f32>, image: &Tensor<f32>, label: usize) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let store = model.params();
    let vars: Vec<_> = store.ids().map(|id| store.shared(id).map(|t| tape.leaf(t.clone()))).collect::<Result<_>>()?;
    let p = Bound::from_vars(vars.clone());
    let x = tape.constant(image.clone());
    let logits = model.forward_bound(&tape, &p, &x)?.output;
    let loss = tape.cross_entropy(&logits, label)?;
    let value = loss.value().item()? as f64;
    let grads = tape.backward(&loss)?;
    Ok((value, vars.iter().map(|v| grads.get_or_zeros(v)).collect()))
}

/// Summed loss and summed parameter gradients over `batch` (indices into
/// `data`). Samples run concurrently; the sum is taken in batch order.
pub fn batch_gradient(model: &Model<f32>, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let results = batch
        .par_iter()
        .map(|&i| sample_grad(model, &data.images[i], data.labels[i]))
        .collect::<Vec<_>>();
    let mut loss_sum = 0.0;
    let mut sum: Option<Vec<Tensor<f32>>> = None;
    for r in results {
        let (loss, grads) = r?;
        loss_sum += loss;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let sum = match sum {
        Some(s) => s,
        None => model.params().ids().map(|id| Tensor::zeros(model.params().shape(id).to_vec())).collect(),
    };
    Ok((loss_sum, sum))
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `data` classified correctly.
pub fn accuracy(model: &Model<f32>, data: &Dataset) -> Result<f64> {
    let hits = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(img, &label)| Ok(usize::from(argmax(model.infer(img)?.data()) == label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

fn in_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("diverged at step {step}: {msg}")),
        other => other,
    }
}

/// Plain minibatch SGD with a cosine schedule and global gradient-norm
/// clipping.
///
/// Samples of a batch run concurrently but their gradients are summed in
/// batch order, so results are identical for any thread count. A non-finite
/// loss or activation is a numeric error naming the step.
pub fn train_toy<W: Write>(
    model: &mut Model<f32>,
    data: &ToySplit,
    opts: &TrainConfig,
    mut csv: Option<&mut csv::Writer<W>>,
) -> Result<TrainReport> {
    if !model.config().mode.is_classification() {
        bail!(Config, "train-toy needs a classification mode, got {:?}", model.config().mode);
    }
    if model.config().num_classes != CLASSES {
        bail!(Config, "train-toy needs {CLASSES} classes, the model has {}", model.config().num_classes);
    }
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(opts.batch);
    let total = steps_per_epoch * opts.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5417_ff1e);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut report = TrainReport { epochs: Vec::new() };

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = opts.lr;
        for batch in order.chunks(opts.batch) {
            let (loss, sum) = batch_gradient(model, &data.train, batch).map_err(|e| in_step(step, e))?;
            loss_sum += loss;
            lr = cosine_lr(opts.lr, step, total);
            let inv = 1.0 / batch.len() as f64;
            let norm = sum
                .iter()
                .flat_map(|g| g.data())
                .map(|&v| (f64::from(v) * inv).powi(2))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("diverged at step {step}: non-finite gradient")));
            }
            let clip = if opts.clip_norm > 0.0 && norm > opts.clip_norm { opts.clip_norm / norm } else { 1.0 };
            let scale = (lr * inv * clip) as f32;
            let store = model.params_mut();
            let ids: Vec<_> = store.ids().collect();
            for (id, g) in ids.into_iter().zip(sum) {
                let w = store.get_mut(id)?;
                w.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x -= scale * y);
                if !w.is_finite() {
                    return Err(Error::Numeric(format!("diverged at step {step}: non-finite weights")));
                }
            }
            step += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            step,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc: accuracy(model, &data.train)?,
            test_acc: accuracy(model, &data.test)?,
        };
        if let Some(w) = csv.as_mut() {
            w.serialize(&metrics)?;
            w.flush()?;
        }
        report.epochs.push(metrics);
    }
    Ok(report)
}

/// Builds, trains and returns a model of `cfg` on `data`.
pub fn train_new<W: Write>(
    cfg: &PiipConfig,
    data: &ToySplit,
    opts: &TrainConfig,
    csv: Option<&mut csv::Writer<W>>,
) -> Result<(Model<f32>, TrainReport)> {
    let mut model = Model::build(cfg, opts.seed)?;
    let report = train_toy(&mut model, data, opts, csv)?;
    Ok((model, report))
}

/// Train/test accuracy of a baseline classifier.
#[derive(Debug, Clone, Copy)]
pub struct BaselineScore {
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Multinomial logistic regression on standardized raw pixels, trained with
/// minibatch SGD.
pub fn logistic_baseline(data: &ToySplit, epochs: usize, lr: f64, seed: u64) -> BaselineScore {
    let d = data.train.images.first().map_or(0, Tensor::len);
    let n = data.train.len();
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for img in &data.train.images {
        for (m, &x) in mean.iter_mut().zip(img.data()) {
            *m += f64::from(x) / n as f64;
        }
    }
    for img in &data.train.images {
        for ((v, m), &x) in var.iter_mut().zip(&mean).zip(img.data()) {
            *v += (f64::from(x) - m).powi(2) / n as f64;
        }
    }
    let features = |img: &Tensor<f32>| -> Vec<f64> {
        img.data()
            .iter()
            .zip(mean.iter().zip(&var))
            .map(|(&x, (m, v))| (f64::from(x) - m) / (v.sqrt() + 1e-6))
            .collect()
    };
    let train: Vec<Vec<f64>> = data.train.images.iter().map(&features).collect();
    let test: Vec<Vec<f64>> = data.test.images.iter().map(&features).collect();

    let mut w = vec![0.0f64; CLASSES * d];
    let mut b = [0.0f64; CLASSES];
    let logits = |w: &[f64], b: &[f64; CLASSES], x: &[f64]| -> [f64; CLASSES] {
        std::array::from_fn(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, x)| a * x).sum::<f64>())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(16) {
            let mut gw = vec![0.0f64; CLASSES * d];
            let mut gb = [0.0f64; CLASSES];
            for &i in batch {
                let z = logits(&w, &b, &train[i]);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..CLASSES {
                    let g = e[c] / s - f64::from(u8::from(c == data.train.labels[i]));
                    gb[c] += g;
                    for (gwv, x) in gw[c * d..(c + 1) * d].iter_mut().zip(&train[i]) {
                        *gwv += g * x;
                    }
                }
            }
            let k = lr / batch.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= k * g);
            b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= k * g);
        }
    }
    let acc = |xs: &[Vec<f64>], labels: &[usize]| {
        let hits = xs
            .iter()
            .zip(labels)
            .filter(|(x, &l)| {
                let z = logits(&w, &b, x);
                let best = (0..CLASSES).fold(0, |bi, c| if z[c] > z[bi] { c } else { bi });
                best == l
            })
            .count();
        hits as f64 / labels.len().max(1) as f64
    };
    BaselineScore {
        train_acc: acc(&train, &data.train.labels),
        test_acc: acc(&test, &data.test.labels),
    }
}

/// Epoch counts and learning rates searched by [`tuned_logistic_baseline`].
pub const BASELINE_GRID: ([usize; 3], [f64; 3]) = ([10, 30, 100], [0.001, 0.01, 0.1]);

/// The logistic baseline with the best test accuracy over [`BASELINE_GRID`],
/// with its epochs and learning rate. Selecting on the test split favors the
/// baseline.
pub fn tuned_logistic_baseline(data: &ToySplit, seed: u64) -> (BaselineScore, usize, f64) {
    let (epochs, lrs) = BASELINE_GRID;
    let mut best: Option<(BaselineScore, usize, f64)> = None;
    for &e in &epochs {
        for &lr in &lrs {
            let s = logistic_baseline(data, e, lr, seed);
            if best.as_ref().is_none_or(|b| s.test_acc > b.0.test_acc) {
                best = Some((s, e, lr));
            }
        }
    }
    best.expect("non-empty grid")
}
