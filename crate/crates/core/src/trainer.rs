//! SGD with momentum, warmup + cosine learning-rate schedule, and the training loop.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, sequential_batches, AugmentConfig, Split, Splits};
use crate::error::{Error, Result};
use crate::models::{Mode, Model, Param};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::topo_loss::{batched_topo_loss, combined_loss, measure_topo_loss, SimilarityMode, TopoLayerSpec};
use crate::topography::Scheme;

const AUGMENT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub lambda: f64,
    pub scheme: Scheme,
    pub similarity: SimilarityMode,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.01,
            epochs: 20,
            warmup_fraction: 0.3,
            lambda: 0.0,
            scheme: Scheme::Grid2d,
            similarity: SimilarityMode::PerSample,
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be a positive number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be >= 0");
        }
        Ok(())
    }

    /// "topographic" when the regularizer is active, otherwise "baseline".
    pub fn model_kind(&self) -> &'static str {
        if self.lambda > 0.0 {
            "topographic"
        } else {
            "baseline"
        }
    }
}

/// Number of warmup steps: `floor(warmup_fraction * total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).floor() as usize
}

/// Linear warmup to `lr0` over the first `w` steps, then half-cosine decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("learning-rate schedule needs at least one step"));
    }
    if step >= total_steps {
        return Err(Error::invalid(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let w = warmup_steps(total_steps, cfg.warmup_fraction);
    if step < w {
        return Ok(cfg.lr0 * (step + 1) as f64 / w as f64);
    }
    let phase = (step - w) as f64 / (total_steps - w) as f64;
    Ok(cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos()))
}

/// `v ← μv + g + wd·w; w ← w − lr·v`. Nothing is modified if any gradient is non-finite.
pub fn sgd_step<T: Scalar>(
    params: &mut [Param<T>],
    velocity: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid("parameter, velocity and gradient lists differ in length"));
    }
    for ((p, v), g) in params.iter().zip(velocity.iter()).zip(grads) {
        if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
            return Err(Error::shape("sgd_step", format!("{}: gradient {:?} vs parameter {:?}", p.name, g.shape(), p.value.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((w, vel), &gr) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = mu * *vel + gr + wd * *w;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub classif_loss: f64,
    pub topo_loss_per_layer: BTreeMap<String, f64>,
    pub topo_loss_mean: f64,
}

#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub model: Model<T>,
    pub epoch: usize,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub velocity: Vec<Tensor<T>>,
    pub step: usize,
    pub seed: u64,
    pub best: Option<Snapshot<T>>,
    pub history: Vec<EpochMetrics>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, seed: u64) -> Self {
        let velocity = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        TrainState { model, velocity, step: 0, seed, best: None, history: Vec::new() }
    }

    /// Best-validation model, or the current one before any epoch finished.
    pub fn best_model(&self) -> &Model<T> {
        self.best.as_ref().map_or(&self.model, |s| &s.model)
    }

    fn offer_snapshot(&mut self, epoch: usize, val_acc: f64) {
        if self.best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
            self.best = Some(Snapshot { model: self.model.clone(), epoch, val_acc });
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub examples: usize,
}

fn argmax_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count()
}

/// Top-1 accuracy (fraction) and mean cross-entropy in evaluation mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, split: &Split, batch_size: usize) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let mut hits = 0;
    let mut loss = 0.0;
    for idx in sequential_batches(split.len(), batch_size) {
        let (x, labels) = split.batch::<T>(&idx, None);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, xv, Mode::Eval, false)?;
        let ce = tape.softmax_cross_entropy(out.logits, &labels)?;
        loss += tape.value(ce).data()[0].to_f64().unwrap_or(f64::NAN) * idx.len() as f64;
        hits += argmax_hits(tape.value(out.logits), &labels);
    }
    let n = split.len();
    Ok(EvalReport { accuracy: hits as f64 / n as f64, loss: loss / n as f64, examples: n })
}

/// Layers whose topographic loss is reported: the attached layers, or the
/// default-rule layers for a model without topography. A baseline and its
/// topographic twin therefore report the same quantities.
pub fn measured_layers<T: Scalar>(model: &Model<T>, scheme: Scheme) -> Result<Vec<TopoLayerSpec>> {
    let ids = match model.topo_layer_ids() {
        ids if !ids.is_empty() => ids,
        _ => model.default_attachment_ids(),
    };
    ids.into_iter()
        .map(|id| {
            let c = model.conv(&id).expect("layer id from model").out_channels;
            TopoLayerSpec::new(id, scheme, c)
        })
        .collect()
}

/// Minimizes `classif + λ · mean(layer topographic losses)` with SGD.
///
/// Each epoch reshuffles (seeded by `(seed, epoch)`), augments, trains, then
/// evaluates on `splits.val`; the model with the highest validation accuracy
/// is kept in `state.best`. `on_epoch` sees each metrics record as it is made.
pub fn train<T: Scalar>(
    model: Model<T>,
    splits: &Splits,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.spec().num_classes != splits.train.data.num_classes {
        return Err(Error::invalid(format!(
            "model has {} classes, data has {}",
            model.spec().num_classes,
            splits.train.data.num_classes
        )));
    }
    if cfg.lambda > 0.0 && model.topo_layer_ids().is_empty() {
        return Err(Error::invalid("lambda > 0 but the model has no topographic layers"));
    }
    let layers = measured_layers(&model, cfg.scheme)?;
    let n = splits.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = TrainState::new(model, cfg.seed);

    for epoch in 0..cfg.epochs {
        let batches = make_batches(n, cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_SALT);
        aug_rng.set_stream(epoch as u64);
        let mut hits = 0usize;
        let mut classif_sum = 0.0;
        let mut topo_sum: BTreeMap<String, f64> = layers.iter().map(|l| (l.layer_id.clone(), 0.0)).collect();
        let mut lr = 0.0;

        for idx in &batches {
            lr = lr_schedule(state.step, total_steps, cfg)?;
            let augment = cfg.augment.map(|a| (a, &mut aug_rng as &mut dyn rand::RngCore));
            let (x, labels) = splits.train.batch::<T>(idx, augment);
            let attempt = (|| -> Result<_> {
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let out = state.model.forward(&mut tape, xv, Mode::Train, true)?;
                let ce = tape.softmax_cross_entropy(out.logits, &labels)?;

                let mut layer_losses = Vec::new();
                let mut measured = BTreeMap::new();
                for spec in &layers {
                    let tap = out
                        .conv_outputs
                        .iter()
                        .find(|(id, _)| *id == spec.layer_id)
                        .map(|(_, v)| *v)
                        .expect("measured layer is a conv");
                    if cfg.lambda > 0.0 {
                        layer_losses.push((spec.layer_id.clone(), batched_topo_loss(&mut tape, tap, &spec.targets, cfg.similarity)?));
                    } else {
                        measured.insert(spec.layer_id.clone(), measure_topo_loss(tape.value(tap), &spec.targets, cfg.similarity)?);
                    }
                }
                let (total, report) = combined_loss(&mut tape, ce, &layer_losses, cfg.lambda)?;
                if cfg.lambda > 0.0 {
                    measured = report.per_layer.clone();
                }
                if !report.total.is_finite() {
                    return Err(Error::NonFinite("loss".into()));
                }
                let mut grads = tape.backward(total)?;
                let g: Vec<Tensor<T>> = out
                    .param_vars
                    .iter()
                    .zip(state.model.params())
                    .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                    .collect();
                let hits = argmax_hits(tape.value(out.logits), &labels);
                Ok((out.bn_updates, g, report, measured, hits))
            })();
            let (bn_updates, g, report, measured, batch_hits) = match attempt {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => {
                    let msg = format!("non-finite {what} at epoch {} step {}", epoch + 1, state.step);
                    return Ok(TrainOutcome { state, diverged: Some(msg) });
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = sgd_step(state.model.params_mut(), &mut state.velocity, &g, lr, cfg.momentum, cfg.weight_decay) {
                let msg = format!("epoch {} step {}: {e}", epoch + 1, state.step);
                return Ok(TrainOutcome { state, diverged: Some(msg) });
            }
            state.model.apply_bn_updates(&bn_updates);
            state.step += 1;

            let b = idx.len() as f64;
            hits += batch_hits;
            classif_sum += report.classif * b;
            for (id, v) in measured {
                *topo_sum.get_mut(&id).expect("known layer") += v * b;
            }
        }

        let val = match evaluate(&state.model, &splits.val, cfg.batch_size) {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => {
                let msg = format!("non-finite {what} while validating epoch {}", epoch + 1);
                return Ok(TrainOutcome { state, diverged: Some(msg) });
            }
            Err(e) => return Err(e),
        };
        let topo_loss_per_layer: BTreeMap<String, f64> = topo_sum.into_iter().map(|(k, v)| (k, v / n as f64)).collect();
        let topo_loss_mean = if topo_loss_per_layer.is_empty() {
            0.0
        } else {
            topo_loss_per_layer.values().sum::<f64>() / topo_loss_per_layer.len() as f64
        };
        let record = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_acc: hits as f64 / n as f64,
            val_acc: val.accuracy,
            classif_loss: classif_sum / n as f64,
            topo_loss_per_layer,
            topo_loss_mean,
        };
        on_epoch(&record);
        state.offer_snapshot(epoch + 1, val.accuracy);
        state.history.push(record);
    }
    Ok(TrainOutcome { state, diverged: None })
}
