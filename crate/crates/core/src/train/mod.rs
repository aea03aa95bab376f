//! Training loop, dev-set model selection and checkpoint persistence.

mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};

use crate::data::{BatchSampler, ImagePair};
use crate::model::{build, ArchitectureSpec, Model};
use crate::nn::{adam_step, mse_loss_masked, AdamConfig, Tensor4};
use crate::{Error, Result};

/// Images per forward pass during dev evaluation.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Batches per epoch; `None` means one full shuffled pass.
    pub steps_per_epoch: Option<usize>,
    pub arch: ArchitectureSpec,
    pub dev_eval_every: usize,
    /// Restrict the loss to rows holding real frames.
    pub mask_padding: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 10,
            lr: 2e-4,
            seed: 0,
            steps_per_epoch: None,
            arch: ArchitectureSpec::vgg19_unet(1.0),
            dev_eval_every: 1,
            mask_padding: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.dev_eval_every == 0 {
            return Err(Error::invalid("epochs, batch_size and dev_eval_every must be >= 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be >= 1"));
        }
        AdamConfig::with_lr(self.lr).validate()?;
        self.arch.validate()
    }

    /// One-line echo of the optimization settings.
    pub fn summary(&self) -> String {
        format!("epochs={} batch={} lr={}", self.epochs, self.batch_size, self.lr)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_mse: f64,
    /// Absent for epochs without a dev evaluation.
    pub dev_mse: Option<f64>,
    pub wall_seconds: f64,
}

/// Index of the record with the smallest dev MSE; ties keep the earliest.
pub fn select_best(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in history.iter().enumerate() {
        if let Some(d) = r.dev_mse {
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn check_pairs(pairs: &[ImagePair], side: usize, what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    let n = side * side;
    if let Some(p) = pairs.iter().find(|p| p.noisy.len() != n || p.clean.len() != n) {
        return Err(Error::invalid(format!(
            "{what} image has {}/{} pixels, the model expects {side}x{side}",
            p.noisy.len(),
            p.clean.len()
        )));
    }
    Ok(())
}

/// Stacks the selected pairs into `(input, target, valid_rows)`.
pub fn make_batch(pairs: &[ImagePair], indices: &[usize], side: usize) -> Result<(Tensor4<f32>, Tensor4<f32>, Vec<usize>)> {
    let shape = [indices.len(), 1, side, side];
    let mut x = Vec::with_capacity(indices.len() * side * side);
    let mut y = Vec::with_capacity(indices.len() * side * side);
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = pairs
            .get(i)
            .ok_or_else(|| Error::invalid(format!("batch index {i} out of range")))?;
        x.extend_from_slice(&p.noisy);
        y.extend_from_slice(&p.clean);
        rows.push(p.valid_frames.min(side));
    }
    Ok((Tensor4::from_vec(shape, x)?, Tensor4::from_vec(shape, y)?, rows))
}

/// Owns a model and its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamConfig,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build(&config.arch, config.seed)?;
        Ok(Self {
            model,
            adam: AdamConfig::with_lr(config.lr),
            config,
        })
    }

    pub fn from_checkpoint(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: ckpt.model,
            adam: AdamConfig { lr: config.lr, ..ckpt.adam },
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn rows(&self, rows: Vec<usize>) -> Vec<usize> {
        if self.config.mask_padding {
            rows
        } else {
            vec![self.config.arch.input_size; rows.len()]
        }
    }

    /// Forward, MSE, backward and one Adam update. Returns the batch loss
    /// measured before the update.
    pub fn train_step(&mut self, pairs: &[ImagePair], indices: &[usize]) -> Result<f64> {
        let (x, y, rows) = make_batch(pairs, indices, self.config.arch.input_size)?;
        let rows = self.rows(rows);
        let trace = self.model.forward_trace(&x)?;
        let (loss, grad) = mse_loss_masked(trace.output(), &y, &rows)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {loss} at step {}",
                self.adam.step_count + 1
            )));
        }
        self.model.backward(&trace, &grad)?;
        adam_step(self.model.params_mut(), &mut self.adam)?;
        Ok(loss)
    }

    /// Mean squared error over every (unmasked) pixel of `pairs`.
    pub fn evaluate(&self, pairs: &[ImagePair]) -> Result<f64> {
        evaluate(&self.model, pairs, self.config.mask_padding)
    }
}

/// Pixel-weighted MSE of `model` over `pairs`, summed in a fixed order.
pub fn evaluate(model: &Model, pairs: &[ImagePair], mask_padding: bool) -> Result<f64> {
    let side = model.spec().input_size;
    check_pairs(pairs, side, "evaluation")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let indices: Vec<usize> = (0..pairs.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y, rows) = make_batch(pairs, chunk, side)?;
        let rows = if mask_padding { rows } else { vec![side; chunk.len()] };
        let out = model.forward(&x)?;
        let (loss, _) = mse_loss_masked(&out, &y, &rows)?;
        let n: usize = rows.iter().map(|r| r * side).sum();
        sum += loss * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("evaluation set has no valid rows"));
    }
    let mse = sum / count as f64;
    if !mse.is_finite() {
        return Err(Error::Numeric(format!("evaluation MSE is {mse}")));
    }
    Ok(mse)
}

/// Result of [`train`]: the dev-selected checkpoint and the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Runs the configured number of epochs, evaluating on `dev` every
/// `dev_eval_every` epochs (and after the last) and keeping the model with
/// the lowest dev MSE. `on_epoch` sees each record as it is produced.
pub fn train(
    config: &TrainConfig,
    train_set: &[ImagePair],
    dev_set: &[ImagePair],
    run_config: serde_json::Value,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let side = config.arch.input_size;
    check_pairs(train_set, side, "training")?;
    check_pairs(dev_set, side, "dev")?;
    let mut sampler = BatchSampler::new(train_set.len(), config.batch_size, config.seed ^ 0x5eed_ba7c)?;
    let steps = config.steps_per_epoch.unwrap_or_else(|| sampler.batches_per_epoch());
    let mut queue: std::collections::VecDeque<Vec<usize>> = Default::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            if queue.is_empty() {
                queue.extend(sampler.next_epoch());
            }
            let batch = queue.pop_front().expect("refilled above");
            let loss = trainer.train_step(train_set, &batch)?;
            epoch_loss += loss;
            step_losses.push(loss);
        }
        let dev_mse = if epoch % config.dev_eval_every == 0 || epoch == config.epochs {
            Some(trainer.evaluate(dev_set)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_mse: epoch_loss / steps as f64,
            dev_mse,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        if let Some(d) = dev_mse {
            if best.as_ref().is_none_or(|(b, _)| d < *b) {
                let ckpt = Checkpoint {
                    model: trainer.model.clone(),
                    adam: trainer.adam,
                    seed: config.seed,
                    epoch,
                    history: Vec::new(),
                    run_config: run_config.clone(),
                };
                best = Some((d, ckpt));
            }
        }
    }
    let (_, mut best) = best.expect("the last epoch always evaluates");
    best.history = history.clone();
    Ok(TrainOutcome {
        best,
        history,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_pairs(n: usize, side: usize, seed: u64) -> Vec<ImagePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let clean: Vec<f32> = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
                let noisy = clean.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect();
                ImagePair { noisy, clean, valid_frames: side }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        let mut arch = ArchitectureSpec::unet(1.0 / 16.0);
        arch.input_size = 16;
        TrainConfig {
            epochs: 3,
            batch_size: 3,
            lr: 1e-3,
            seed: 5,
            arch,
            ..TrainConfig::default()
        }
    }

    fn rec(epoch: usize, dev: Option<f64>) -> EpochRecord {
        EpochRecord { epoch, train_mse: 1.0, dev_mse: dev, wall_seconds: 0.0 }
    }

    #[test]
    fn argmin_selection() {
        let h = [rec(1, Some(0.9)), rec(2, Some(0.5)), rec(3, Some(0.7))];
        assert_eq!(select_best(&h), Some(1));
        let ties = [rec(1, Some(0.5)), rec(2, None), rec(3, Some(0.5))];
        assert_eq!(select_best(&ties), Some(0));
        assert_eq!(select_best(&[rec(1, None)]), None);
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.summary(), "epochs=50 batch=10 lr=0.0002");
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { steps_per_epoch: Some(0), ..c }.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_best_dev_model() {
        let cfg = toy_config();
        let tr = toy_pairs(7, 16, 1);
        let dev = toy_pairs(2, 16, 2);
        let mut seen = 0;
        let a = train(&cfg, &tr, &dev, serde_json::Value::Null, |_| seen += 1).unwrap();
        let b = train(&cfg, &tr, &dev, serde_json::Value::Null, |_| {}).unwrap();
        assert_eq!(seen, 3);
        assert_eq!(a.step_losses.len(), 9);
        assert_eq!(a.step_losses, b.step_losses);
        let best = select_best(&a.history).unwrap();
        assert_eq!(a.best.epoch, best + 1);
        let best_dev = a.history[best].dev_mse.unwrap();
        assert!(a.history.iter().all(|r| r.dev_mse.unwrap() >= best_dev));
        let again = evaluate(&a.best.model, &dev, false).unwrap();
        assert_eq!(again, best_dev);
    }

    #[test]
    fn steps_per_epoch_and_sparse_dev() {
        let cfg = TrainConfig { steps_per_epoch: Some(1), dev_eval_every: 2, epochs: 3, ..toy_config() };
        let tr = toy_pairs(7, 16, 1);
        let out = train(&cfg, &tr, &toy_pairs(1, 16, 2), serde_json::Value::Null, |_| {}).unwrap();
        assert_eq!(out.step_losses.len(), 3);
        let devs: Vec<bool> = out.history.iter().map(|r| r.dev_mse.is_some()).collect();
        assert_eq!(devs, [false, true, true]);
    }

    #[test]
    fn rejects_empty_and_misshapen_sets() {
        let cfg = toy_config();
        let tr = toy_pairs(2, 16, 1);
        assert!(train(&cfg, &[], &tr, serde_json::Value::Null, |_| {}).is_err());
        assert!(train(&cfg, &tr, &[], serde_json::Value::Null, |_| {}).is_err());
        assert!(train(&cfg, &toy_pairs(2, 8, 1), &tr, serde_json::Value::Null, |_| {}).is_err());
    }

    #[test]
    fn nan_loss_is_a_numeric_error() {
        let mut t = Trainer::new(toy_config()).unwrap();
        let mut pairs = toy_pairs(1, 16, 1);
        pairs[0].clean[3] = f32::NAN;
        assert!(matches!(t.train_step(&pairs, &[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn masking_ignores_padded_rows() {
        let mut cfg = toy_config();
        cfg.mask_padding = true;
        let t = Trainer::new(cfg).unwrap();
        let mut pairs = toy_pairs(1, 16, 3);
        pairs[0].valid_frames = 10;
        let base = t.evaluate(&pairs).unwrap();
        pairs[0].clean[12 * 16..].fill(100.0);
        assert_eq!(t.evaluate(&pairs).unwrap(), base);
    }
}
