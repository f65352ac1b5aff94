//! Adam, the step learning-rate schedule, the training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::data::{FeatureRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::metrics::{plcc, srocc};
use crate::model::{LabelScale, QualityModel};
use crate::parallel::{map_items, Execution};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub precision: Precision,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic_distortion()
    }
}

impl TrainConfig {
    pub fn synthetic_distortion() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 30,
            batch_size: 64,
            lr_decay: 0.01,
            decay_every: 10,
            loss_weights: LossWeights::default(),
            seed: 0,
            precision: Precision::Double,
            max_steps: None,
        }
    }

    pub fn authentic_distortion() -> Self {
        Self {
            learning_rate: 2e-5,
            ..Self::synthetic_distortion()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and decay_every must be at least 1".into(),
            ));
        }
        self.loss_weights.validate()
    }
}

/// `lr · decay^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.learning_rate * config.lr_decay.powi((epoch / config.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (p, g) in store.iter().zip(&grads.tensors) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in store.iter_mut().enumerate() {
        let g = grads.tensors[k].data();
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Mean loss and gradient over a batch. Items may be processed in parallel;
/// their gradients are summed in batch order.
pub fn batch_gradient(
    model: &QualityModel,
    store: &ParamStore,
    batch: &[(&FeatureRecord, f64)],
    weights: &LossWeights,
    precision: Precision,
    exec: Execution,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let share = 1.0 / batch.len() as f64;
    let per_item = map_items(batch, exec, |_, (record, target)| {
        model.record_gradient(
            store,
            &record.features(),
            *target,
            weights,
            share,
            precision,
        )
    });
    let mut grads = Gradients::zeros_like(store);
    let mut mean = LossBreakdown::default();
    for item in per_item {
        let item = item?;
        grads.accumulate(&item.grads);
        mean.main += item.loss.main * share;
        mean.aux += item.loss.aux * share;
        mean.z += item.loss.z * share;
    }
    mean.total = mean.main + weights.aux * mean.aux + weights.z * mean.z;
    Ok((mean, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub main: f64,
    pub aux: f64,
    pub z: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Sample-weighted mean loss per epoch.
    pub epoch_losses: Vec<LossBreakdown>,
    pub label_scale: LabelScale,
    pub steps: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,main,aux,z,total,lr\n");
        for r in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.step, r.main, r.aux, r.z, r.total, r.lr
            ));
        }
        out
    }
}

/// Trains `store` in place on `records`. Labels are min-max normalized with
/// a scale fitted on these records. Each epoch reshuffles with a stream of
/// the seeded generator keyed by the epoch index.
pub fn train(
    model: &QualityModel,
    store: &mut ParamStore,
    records: &[FeatureRecord],
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainReport> {
    config.validate()?;
    let labels: Vec<f64> = records.iter().map(|r| r.mos).collect();
    let label_scale = LabelScale::fit(&labels)?;
    let targets: Vec<f64> = labels.iter().map(|&m| label_scale.normalize(m)).collect();

    let mut adam = AdamState::new(store);
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = lr_at(epoch, config);
        let mut epoch_loss = LossBreakdown::default();
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<(&FeatureRecord, f64)> =
                chunk.iter().map(|&i| (&records[i], targets[i])).collect();
            let (loss, grads) = batch_gradient(
                model,
                store,
                &batch,
                &config.loss_weights,
                config.precision,
                exec,
            )?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            adam_step(store, &grads, &mut adam, lr)?;
            let n = chunk.len() as f64;
            epoch_loss.main += loss.main * n;
            epoch_loss.aux += loss.aux * n;
            epoch_loss.z += loss.z * n;
            epoch_loss.total += loss.total * n;
            seen += chunk.len();
            log.push(LogRow {
                epoch,
                step,
                main: loss.main,
                aux: loss.aux,
                z: loss.z,
                total: loss.total,
                lr,
            });
            step += 1;
        }
        if seen > 0 {
            let n = seen as f64;
            epoch_losses.push(LossBreakdown {
                main: epoch_loss.main / n,
                aux: epoch_loss.aux / n,
                z: epoch_loss.z / n,
                total: epoch_loss.total / n,
            });
        }
    }
    Ok(TrainReport {
        log,
        epoch_losses,
        label_scale,
        steps: step,
    })
}

/// Loads the training split of `manifest` and trains on it.
pub fn train_split(
    model: &QualityModel,
    store: &mut ParamStore,
    manifest: &Manifest,
    split: &Split,
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainReport> {
    let records = manifest.load_records(&split.train)?;
    train(model, store, &records, config, exec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub srocc: f64,
    pub plcc: f64,
    pub predictions: Vec<f64>,
}

/// Correlation of arbitrary predictions with the records' MOS labels.
pub fn evaluate_with<F>(
    records: &[FeatureRecord],
    exec: Execution,
    predictor: F,
) -> Result<EvalResult>
where
    F: Fn(&FeatureRecord) -> Result<f64> + Sync + Send,
{
    if records.len() < 2 {
        return Err(Error::Argument(format!(
            "evaluation needs at least 2 records, got {}",
            records.len()
        )));
    }
    let predictions = map_items(records, exec, |_, r| predictor(r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = records.iter().map(|r| r.mos).collect();
    Ok(EvalResult {
        srocc: srocc(&predictions, &targets)?,
        plcc: plcc(&predictions, &targets)?,
        predictions,
    })
}

/// Model predictions mapped back to MOS units, correlated with the labels.
pub fn evaluate(
    model: &QualityModel,
    store: &ParamStore,
    records: &[FeatureRecord],
    label_scale: &LabelScale,
    precision: Precision,
    exec: Execution,
) -> Result<EvalResult> {
    evaluate_with(records, exec, |r| {
        model
            .predict(store, &r.features(), precision)
            .map(|y| label_scale.denormalize(y))
    })
}
