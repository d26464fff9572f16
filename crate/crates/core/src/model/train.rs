//! Mini-batch SGD with momentum on globally pooled class maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{spatial_mean, Layer, ModelGraph};
use crate::autodiff::{BackwardMode, Tape};
use crate::dataset::{to_model_input, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Training objective on the pooled logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// Multiclass softmax cross-entropy.
    Softmax,
    /// One-vs-rest logistic loss. Absent classes are pushed below zero
    /// everywhere, so class maps stay negative off the object.
    #[default]
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.02, momentum: 0.9, batch_size: 32, seed: 0, loss: Loss::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

type BnStats = Vec<Option<(Tensor, Tensor)>>;

/// Trains `model` in place. Batch-norm layers normalize with the statistics
/// of the current mini-batch (treated as constants in the backward pass);
/// population statistics over the training split are stored at the end.
pub fn train(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!(
            "invalid training config: batch_size={} lr={} momentum={}",
            cfg.batch_size, cfg.lr, cfg.momentum
        )));
    }
    let inputs: Vec<Tensor> = data.train.iter().map(|s| to_model_input(&s.pixels)).collect();
    let labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    let has_bn = model.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let stats = if has_bn {
                let xs: Vec<&Tensor> = batch.iter().map(|&i| &inputs[i]).collect();
                Some(batch_stats(model, &xs)?)
            } else {
                None
            };
            // per-sample gradients reduced in batch order, so the result does
            // not depend on the thread count
            let per_sample: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| sample_grad(model, &inputs[i], labels[i], stats.as_ref(), cfg.loss))
                .collect::<Result<_>>()?;
            let mut grads: Option<Vec<Tensor>> = None;
            for (loss, g) in per_sample {
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged: loss {loss} at epoch {epoch}, batch {b} (lr={})",
                        cfg.lr
                    )));
                }
                loss_sum += loss;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            a.add_assign(gi)?;
                        }
                    }
                }
            }
            let grads = grads.expect("batch is nonempty");
            let inv = 1.0 / batch.len() as f64;
            for ((p, v), g) in model.params_mut().into_iter().zip(velocity.iter_mut()).zip(&grads) {
                for ((pw, vw), gw) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vw = cfg.momentum * *vw + gw * inv;
                    *pw -= cfg.lr * *vw;
                }
            }
        }
        let mean_loss = loss_sum / inputs.len() as f64;
        log::info!("epoch {}/{}: loss {mean_loss:.5}", epoch + 1, cfg.epochs);
        epoch_losses.push(mean_loss);
    }

    if has_bn {
        set_population_stats(model, &inputs)?;
    }
    let train_accuracy = accuracy(model, &data.train)?;
    let eval_accuracy = accuracy(model, &data.eval)?;
    model.meta.seed = cfg.seed;
    model.meta.epochs = cfg.epochs;
    model.meta.train_accuracy = train_accuracy;
    model.meta.eval_accuracy = eval_accuracy;
    Ok(TrainReport { epoch_losses, train_accuracy, eval_accuracy })
}

fn sample_grad(model: &ModelGraph, x: &Tensor, label: usize, stats: Option<&BnStats>, loss: Loss) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let (maps, params) = model.record(&mut tape, input, 0, stats.map(|s| s.as_slice()))?;
    let logits = tape.global_avg_pool(maps)?;
    let loss = match loss {
        Loss::Softmax => tape.cross_entropy(logits, label)?,
        Loss::Sigmoid => tape.sigmoid_cross_entropy(logits, label)?,
    };
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss, &params, BackwardMode::Standard)?;
    Ok((value, grads.into_ordered(&params)))
}

/// Per-channel mean and biased variance of a set of `[C,H,W]` activations.
fn channel_moments(acts: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = acts[0].dims3()?;
    let n = (acts.len() * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for a in acts {
        for (ch, plane) in a.data().chunks_exact(h * w).enumerate() {
            mean[ch] += plane.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for a in acts {
        for (ch, plane) in a.data().chunks_exact(h * w).enumerate() {
            var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok((Tensor::new(vec![c], mean)?, Tensor::new(vec![c], var)?))
}

fn batch_stats(model: &ModelGraph, xs: &[&Tensor]) -> Result<BnStats> {
    let mut acts: Vec<Tensor> = xs.iter().map(|&x| x.clone()).collect();
    let mut stats = vec![None; model.layers.len()];
    for (i, layer) in model.layers.iter().enumerate() {
        acts = match layer {
            Layer::BatchNorm(bn) => {
                let (m, v) = channel_moments(&acts)?;
                let next = acts
                    .iter()
                    .map(|a| ops::batchnorm_inference(a, &m, &v, &bn.gamma, &bn.beta, bn.eps))
                    .collect::<Result<_>>()?;
                stats[i] = Some((m, v));
                next
            }
            _ => acts.par_iter().map(|a| layer.forward(a)).collect::<Result<_>>()?,
        };
    }
    Ok(stats)
}

fn set_population_stats(model: &mut ModelGraph, inputs: &[Tensor]) -> Result<()> {
    for i in 0..model.layers.len() {
        if !matches!(model.layers[i], Layer::BatchNorm(_)) {
            continue;
        }
        let acts: Vec<Tensor> = inputs.par_iter().map(|x| model.forward_layers(x, 0, i)).collect::<Result<_>>()?;
        let (m, v) = channel_moments(&acts)?;
        if let Layer::BatchNorm(bn) = &mut model.layers[i] {
            bn.mean = m;
            bn.var = v;
        }
    }
    Ok(())
}

/// Fraction of `samples` whose pooled logits rank the true class first.
pub fn accuracy(model: &ModelGraph, samples: &[LabeledImage]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct: Vec<bool> = samples
        .par_iter()
        .map(|s| {
            let logits = spatial_mean(&model.class_maps(&to_model_input(&s.pixels))?);
            let d = logits.data();
            let best = (0..d.len()).fold(0, |b, k| if d[k] > d[b] { k } else { b });
            Ok(best == s.label)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64)
}
