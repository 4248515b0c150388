//! Supervised training of the joint network on known classes only.
//!
//! Loss is lambda_cls * cross-entropy + lambda_rec * per-element mean
//! squared reconstruction error; variants without a decoder simply have no
//! second term. Plain SGD with momentum, learning rate cut by 10 at 50% and
//! 75% of the epoch budget. One seeded RNG drives shuffling and dropout, so
//! a (config, data, seed) triple pins the final weights bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, LabeledDataset};
use crate::dhrnet::DhrNet;
use crate::error::{Error, Result};
use crate::tape::{Phase, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub dropout: f64,
    /// Global gradient-norm ceiling per batch; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            lambda_cls: 1.0,
            lambda_rec: 1.0,
            dropout: 0.2,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.lambda_cls < 0.0 || self.lambda_rec < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip {}", self.grad_clip)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Step schedule: base rate, then /10 from 50% of the budget, /100 from
    /// 75%.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let half = self.epochs / 2;
        let three_quarters = (self.epochs * 3) / 4;
        let mut lr = self.learning_rate;
        if epoch >= half {
            lr *= 0.1;
        }
        if epoch >= three_quarters {
            lr *= 0.1;
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub cls_loss: f64,
    pub rec_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,cls_loss,rec_loss,val_acc\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.cls_loss, r.rec_loss, r.val_acc
            ));
        }
        s
    }
}

/// Trains `model` in place. `val` defaults to the training set; its accuracy
/// lands in the per-epoch log. Aborts with a numerical error if any op
/// produces a non-finite value.
pub fn train(
    model: &mut DhrNet,
    data: &LabeledDataset,
    val: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let classes = model.config().classes;
    data.validate_known_labels(classes)?;
    if data.sample_shape() != model.config().input {
        return Err(Error::Input(format!(
            "sample shape {:?} does not match configured input {:?}",
            data.sample_shape(),
            model.config().input
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Tensor> = (0..model.param_count())
        .map(|i| Tensor::zeros(model.param_at(i).shape().to_vec()))
        .collect();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let lr = config.rate_at(epoch);
        indices.shuffle(&mut rng);
        let mut cls_sum = 0.0;
        let mut rec_sum = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let images = data.gather_images(chunk);
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| match data.labels[i] {
                    Label::Known(k) => k,
                    Label::Unknown => unreachable!("validated above"),
                })
                .collect();

            let mut tape = Tape::new();
            let traced =
                model.forward_traced(&mut tape, &images, Phase::Train, config.dropout, &mut rng)?;
            let ce = tape.softmax_cross_entropy(traced.y, &labels)?;
            cls_sum += tape.value(ce).item() * chunk.len() as f64;
            let loss = match traced.recon {
                Some(recon) if config.lambda_rec > 0.0 => {
                    let rec = tape.mean_squared_error(recon, traced.input)?;
                    rec_sum += tape.value(rec).item() * chunk.len() as f64;
                    let a = tape.scale(ce, config.lambda_cls)?;
                    let b = tape.scale(rec, config.lambda_rec)?;
                    tape.add(a, b)?
                }
                _ => tape.scale(ce, config.lambda_cls)?,
            };
            let grads = tape.backward(loss)?;
            let mut scale = 1.0;
            if config.grad_clip > 0.0 {
                let mut sq = 0.0;
                for i in 0..model.param_count() {
                    if let Some(g) = grads.get(traced.params[i]) {
                        sq += g.data().iter().map(|v| v * v).sum::<f64>();
                    }
                }
                let norm = sq.sqrt();
                if norm > config.grad_clip {
                    scale = config.grad_clip / norm;
                }
            }
            for i in 0..model.param_count() {
                let Some(g) = grads.get(traced.params[i]) else {
                    continue;
                };
                let v = velocity[i].data_mut();
                let gd = g.data();
                let mut p = model.param_at(i).clone();
                let pd = p.data_mut();
                for j in 0..gd.len() {
                    v[j] = config.momentum * v[j] - lr * scale * gd[j];
                    pd[j] += v[j];
                }
                p.check_finite("sgd step")?;
                model.set_param_at(i, p)?;
            }
        }
        let n = data.len() as f64;
        let val_acc = closed_set_accuracy(model, val.unwrap_or(data))?;
        log.rows.push(EpochRow {
            epoch,
            cls_loss: cls_sum / n,
            rec_loss: rec_sum / n,
            val_acc,
        });
    }
    Ok(log)
}

/// Fraction of samples whose logit argmax is the true label. Evaluation
/// only; rejects sets containing the unknown sentinel.
pub fn closed_set_accuracy(model: &DhrNet, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot score an empty dataset".into()));
    }
    data.validate_known_labels(model.config().classes)?;
    let mut hits = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let out = model.forward_eval(&data.gather_images(chunk))?;
        for (row, &i) in chunk.iter().enumerate() {
            let y = out.y.row(row);
            let mut best = 0;
            for j in 1..y.len() {
                if y[j] > y[best] {
                    best = j;
                }
            }
            if Label::Known(best) == data.labels[i] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
