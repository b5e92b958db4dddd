//! Seeded minibatch training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arch, EncodedGraph, GraphBatch, Model, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub hidden: usize,
    pub variant: Variant,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub min_lr_frac: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            lr: 3e-3,
            seed: 0,
            batch_size: 32,
            hidden: 64,
            variant: Variant::Sage,
            min_lr_frac: 0.05,
            clip: 5.0,
        }
    }
}

/// One labeled graph. For loop-head models `label` is the loop latency and
/// `il_label` the iteration latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub graph: EncodedGraph,
    pub label: f64,
    pub il_label: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub initial_train_loss: f64,
    pub best_epoch: usize,
    pub best_val_mape: f64,
}

/// Mean absolute percentage error with denominators `max(label, 1)`.
pub fn mape(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let s: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs() / l.max(1.0))
        .sum();
    Ok(100.0 * s / preds.len() as f64)
}

const EVAL_CHUNK: usize = 64;

/// Final-target predictions for a list of examples.
pub fn predict_examples(model: &Model, examples: &[Example]) -> Result<Vec<f64>> {
    predict_graphs(model, examples.iter().map(|e| &e.graph))
}

pub fn predict_graphs<'a>(model: &Model, graphs: impl IntoIterator<Item = &'a EncodedGraph>) -> Result<Vec<f64>> {
    Ok(predict_graphs_both(model, graphs)?.0)
}

/// Final and primary-head predictions.
pub fn predict_graphs_both<'a>(
    model: &Model,
    graphs: impl IntoIterator<Item = &'a EncodedGraph>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let graphs: Vec<&EncodedGraph> = graphs.into_iter().collect();
    let (mut fin, mut prim) = (Vec::with_capacity(graphs.len()), Vec::with_capacity(graphs.len()));
    for chunk in graphs.chunks(EVAL_CHUNK) {
        let (f, p) = model.predict(&GraphBatch::new(chunk)?)?;
        fin.extend(f);
        prim.extend(p);
    }
    Ok((fin, prim))
}

fn labels(examples: &[Example]) -> Vec<f64> {
    examples.iter().map(|e| e.label).collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn mean_log(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x.max(0.0).ln_1p();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Train one model; returns the parameters with the best validation MAPE
/// (last epoch when `val` is empty).
pub fn train(train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Invalid("epochs and batch size must be at least 1".into()));
    }
    let loop_head = train[0].il_label.is_some();
    if train.iter().chain(val).any(|e| e.il_label.is_some() != loop_head) {
        return Err(Error::Invalid("examples mix loop-head and plain labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(Arch::new(cfg.variant, cfg.hidden, loop_head), &mut rng);
    if loop_head {
        model.set_output_bias(
            mean_log(train.iter().filter_map(|e| e.il_label)),
            Some(mean_log(train.iter().map(|e| e.label))),
        );
    } else {
        model.set_output_bias(mean_log(train.iter().map(|e| e.label)), None);
    }
    let mut adam = Adam::new(model.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_labels = labels(val);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut initial_train_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs.max(2).saturating_sub(1) as f64;
        let lr = cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&EncodedGraph> = chunk.iter().map(|&i| &train[i].graph).collect();
            let batch = GraphBatch::new(&graphs)?;
            let (targets, loop_targets): (Vec<f64>, Option<Vec<f64>>) = if loop_head {
                (
                    chunk.iter().map(|&i| train[i].il_label.unwrap_or(0.0)).collect(),
                    Some(chunk.iter().map(|&i| train[i].label).collect()),
                )
            } else {
                (chunk.iter().map(|&i| train[i].label).collect(), None)
            };
            let (loss, mut grad) = model.loss_and_grad(&batch, &targets, loop_targets.as_deref())?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip {
                let s = cfg.clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.step(&mut model.params, &grad, lr);
        }
        let train_loss = epoch_loss / train.len() as f64;
        if epoch == 0 {
            initial_train_loss = train_loss;
        }
        let val_mape = if val.is_empty() {
            f64::NAN
        } else {
            mape(&predict_examples(&model, val)?, &val_labels)?
        };
        log::debug!("epoch {epoch}: train loss {train_loss:.5}, val MAPE {val_mape:.2}%");
        history.push(EpochStats { epoch, train_loss, val_mape });
        let score = if val.is_empty() { train_loss } else { val_mape };
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.params.clone()));
        }
    }
    let (best_score, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    let best_val_mape = if val.is_empty() { f64::NAN } else { best_score };
    Ok((
        model,
        TrainReport {
            history,
            initial_train_loss,
            best_epoch,
            best_val_mape,
        },
    ))
}
