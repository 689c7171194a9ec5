use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss, sample_loss};
use super::metrics::EvalReport;
use super::optim::{AdamConfig, AdamW};
use crate::checkpoint;
use crate::data::{augment, preprocess, AugmentPolicy, InputPair, Sample};
use crate::decoder::{NUM_NUTRIENTS, NUTRIENTS};
use crate::error::{Error, Result};
use crate::model::{NuNet, Prediction};
use crate::numerics::{Graph, ParamGrads, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Stops training after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Writes a checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Evaluates on the held-out set every this many epochs (0 = never).
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 150,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epsilon: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            lr_decay: 0.99,
            seed: 0,
            max_steps: None,
            checkpoint_every: None,
            eval_every: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.epochs >= 1
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.checkpoint_every != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training config: {self:?}")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

/// Sample with model-ready (resized, cropped, normalized) inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub dish_id: String,
    pub input: InputPair,
    pub label: [f64; NUM_NUTRIENTS],
}

pub fn eval_policy(model: &NuNet) -> AugmentPolicy {
    AugmentPolicy::eval(model.config.image_height, model.config.image_width)
}

pub fn prepare(samples: &[Sample], policy: &AugmentPolicy) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                dish_id: s.dish_id.clone(),
                input: preprocess(&s.input, policy)?,
                label: s.label,
            })
        })
        .collect()
}

/// Per-nutrient mean of the labels, floored at 1; used as head output scale.
pub fn label_scale(samples: &[Sample]) -> [f64; NUM_NUTRIENTS] {
    let mut mean = [0.0; NUM_NUTRIENTS];
    for s in samples {
        for j in 0..NUM_NUTRIENTS {
            mean[j] += s.label[j] / samples.len() as f64;
        }
    }
    mean.map(|m| m.max(1.0))
}

pub fn predict_all(model: &NuNet, params: &ParamSet, samples: &[PreparedSample]) -> Result<Vec<Prediction>> {
    samples
        .par_iter()
        .map(|s| model.predict(params, &s.input.rgb, &s.input.depth))
        .collect()
}

pub fn evaluate(model: &NuNet, params: &ParamSet, samples: &[PreparedSample]) -> Result<EvalReport> {
    let preds: Vec<_> = predict_all(model, params, samples)?.into_iter().map(|p| p.final_estimate).collect();
    let truths: Vec<_> = samples.iter().map(|s| s.label).collect();
    EvalReport::compute(&preds, &truths)
}

/// Mean loss over `samples` treated as one batch.
pub fn dataset_loss(model: &NuNet, params: &ParamSet, samples: &[PreparedSample]) -> Result<f64> {
    let preds: Vec<_> = predict_all(model, params, samples)?.into_iter().map(|p| p.final_estimate).collect();
    let truths: Vec<_> = samples.iter().map(|s| s.label).collect();
    loss(&preds, &truths)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Loss and parameter gradients of one sample's share of a batch of `m`.
pub fn sample_step(
    model: &NuNet,
    params: &ParamSet,
    input: &InputPair,
    label: &[f64; NUM_NUTRIENTS],
    m: usize,
) -> Result<(f64, ParamGrads)> {
    let g = Graph::new(params);
    let out = model.forward(&g.constant(input.rgb.clone()), &g.constant(input.depth.clone()))?;
    let l = sample_loss(&out.final_estimate, label, m)?;
    let value = l.value().data()[0];
    if !value.is_finite() {
        let (name, index) = g
            .first_non_finite()
            .unwrap_or_else(|| ("loss".to_string(), 0));
        return Err(Error::NonFinite { name, index });
    }
    Ok((value, g.backward(l)?.into_param_grads()))
}

struct LogWriter {
    csv: csv::Writer<File>,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut csv = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string(), "steps".into(), "lr".into(), "train_loss".into(), "eval_mean_mape".into()];
        header.extend(NUTRIENTS.iter().map(|n| format!("mape_{n}")));
        csv.write_record(&header)?;
        csv.flush()?;
        Ok(Self { csv })
    }

    fn append(&mut self, e: &EpochLog) -> Result<()> {
        let mut row = vec![e.epoch.to_string(), e.steps.to_string(), format!("{:e}", e.lr), e.train_loss.to_string()];
        match &e.eval {
            Some(r) => {
                row.push(r.mean_mape.to_string());
                row.extend(r.mape.iter().map(|v| v.to_string()));
            }
            None => row.extend(std::iter::repeat(String::new()).take(NUM_NUTRIENTS + 1)),
        }
        self.csv.write_record(&row)?;
        self.csv.flush()?;
        Ok(())
    }
}

/// Mini-batch training with AdamW. Per-sample gradients are computed in
/// parallel and summed in batch order, so results do not depend on the
/// thread count. With `out_dir`, writes `train_log.csv`, periodic
/// checkpoints and a final `model.ckpt`.
pub fn train(
    model: &NuNet,
    params: &mut ParamSet,
    train_set: &[Sample],
    eval_set: &[PreparedSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let eval_pol = eval_policy(model);
    let train_pol = AugmentPolicy::train(eval_pol.target_height, eval_pol.target_width);
    let fixed = if config.augment {
        None
    } else {
        Some(prepare(train_set, &eval_pol)?)
    };
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(LogWriter::create(&dir.join("train_log.csv"))?)
        }
        None => None,
    };
    let mut opt = AdamW::new(params, config.adam());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chunk = rayon::current_num_threads().max(1);
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        steps: 0,
        step_losses: Vec::new(),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = config.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        let mut done = false;
        for batch in order.chunks(config.batch_size) {
            let m = batch.len();
            let mut grads = ParamGrads::empty(params.len());
            let mut batch_loss = 0.0;
            for part in batch.chunks(chunk) {
                let shared: &ParamSet = params;
                let results: Vec<(f64, ParamGrads)> = part
                    .par_iter()
                    .map(|&i| {
                        let input = match &fixed {
                            Some(p) => p[i].input.clone(),
                            None => augment(&train_set[i].input, &mut sample_rng(config.seed, epoch, i), &train_pol)?,
                        };
                        sample_step(model, shared, &input, &train_set[i].label, m)
                    })
                    .collect::<Result<_>>()?;
                for (l, g) in results {
                    batch_loss += l;
                    grads.accumulate(g);
                }
            }
            opt.update(params, &grads, lr)?;
            params.validate_finite()?;
            outcome.steps += 1;
            outcome.step_losses.push(batch_loss);
            epoch_loss += batch_loss;
            batches += 1;
            if config.max_steps.is_some_and(|max| outcome.steps >= max) {
                done = true;
                break;
            }
        }
        let eval = if config.eval_every > 0 && !eval_set.is_empty() && (epoch + 1) % config.eval_every == 0 {
            Some(evaluate(model, params, eval_set)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            steps: outcome.steps,
            lr,
            train_loss: epoch_loss / batches.max(1) as f64,
            eval,
        };
        if let Some(w) = log.as_mut() {
            w.append(&entry)?;
        }
        outcome.epochs.push(entry);
        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if (epoch + 1) % every == 0 {
                checkpoint::save(&dir.join(format!("checkpoint_epoch{:04}.ckpt", epoch + 1)), &model.config, params)?;
            }
        }
        if done {
            break;
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("model.ckpt"), &model.config, params)?;
    }
    Ok(outcome)
}
