//! The training loop: shuffled crop-and-augment batching, the optimizer
//! step, per-epoch validation, and checkpoint selection.

use crate::data::{augment, center_crop, random_crop, stack_samples, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{edge_weight_map, ee_loss, ee_loss_with_grad};
use crate::model::{LrNet, ModelConfig, WeightStore};
use crate::nn::Adam;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Knobs of the optimization run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Side length of the square training crops; must equal the model
    /// window so that batch extents match what inference tiles use.
    pub crop: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 10,
            learning_rate: 5e-4,
            crop: 256,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.crop != model.window {
            return Err(Error::Config(format!(
                "crop size {} must equal the model window {}",
                self.crop, model.window
            )));
        }
        Ok(())
    }
}

/// One line of the training log. Epochs are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Weights after the final epoch.
    pub last: WeightStore,
    /// Weights of the epoch with the lowest validation loss.
    pub best: WeightStore,
    /// 1-based epoch the best checkpoint came from.
    pub best_epoch: usize,
}

fn tag_step(err: Error, epoch: usize, batch: usize) -> Error {
    let tag = format!("epoch {epoch}, batch {batch}");
    match err {
        Error::Config(m) => Error::Config(format!("{tag}: {m}")),
        Error::Data(m) => Error::Data(format!("{tag}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{tag}: {m}")),
        io @ Error::Io { .. } => io,
    }
}

/// Mean inference-mode loss over deterministic center crops of a held-out
/// set — the checkpoint-selection signal.
pub fn validation_loss(model: &LrNet<f32>, val_set: &[Sample], crop: usize) -> Result<f64> {
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut total = 0.0f64;
    for sample in val_set {
        let cropped = center_crop(sample, crop)?;
        let (image, mask) = stack_samples(std::slice::from_ref(&cropped))?;
        let weights = edge_weight_map(&mask)?;
        let logits = model.forward_infer_logits(&image)?;
        total += f64::from(ee_loss(&logits, &mask, &weights)?);
    }
    Ok(total / val_set.len() as f64)
}

/// Run the optimization loop and return the final and best weights plus the
/// per-epoch log. `initial` warm-starts from an earlier checkpoint;
/// `on_epoch` sees each record as soon as the epoch finishes. When
/// `val_set` is empty the training loss doubles as the selection signal.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    initial: Option<&WeightStore>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg)?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }

    let mut model = LrNet::<f32>::init(model_cfg.clone(), cfg.seed)?;
    if let Some(store) = initial {
        model.load_store(store)?;
    }
    let mut adam = Adam::<f32>::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, WeightStore)> = None;
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let step = |rng: &mut ChaCha8Rng, model: &mut LrNet<f32>, adam: &mut Adam<f32>| {
                let mut crops = Vec::with_capacity(batch.len());
                for &i in batch {
                    let cropped = random_crop(&train_set[i], cfg.crop, rng)?;
                    crops.push(augment(&cropped, &cfg.augment, rng));
                }
                let (images, masks) = stack_samples(&crops)?;
                let weights = edge_weight_map(&masks)?;
                let (logits, trace) = model.forward_train(&images)?;
                let (loss, grad) = ee_loss_with_grad(&logits, &masks, &weights)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("training diverged: loss = {loss}")));
                }
                model.zero_grads();
                model.backward(&trace, &grad)?;
                adam.step(&mut model.named_params_mut())?;
                Ok(f64::from(loss))
            };
            epoch_loss += step(&mut rng, &mut model, &mut adam)
                .map_err(|e| tag_step(e, epoch, batch_idx + 1))?;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            validation_loss(&model, val_set, cfg.crop)
                .map_err(|e| tag_step(e, epoch, 0))?
        };

        let record = EpochRecord { epoch, train_loss, val_loss };
        on_epoch(&record);
        log.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.to_store()));
        }
    }

    let (_, best_epoch, best_store) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { log, last: model.to_store(), best: best_store, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig { window: 32, ..ModelConfig::default() }
    }

    fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { epochs, batch_size: 10, crop: 32, seed, ..TrainConfig::default() }
    }

    fn easy_dataset(count: usize) -> Vec<Sample> {
        // Small frames with one bright compact target over a gentle
        // background: quickly learnable.
        let cfg = SynthConfig {
            count,
            extent_min: 32,
            extent_max: 32,
            targets_min: 1,
            targets_max: 2,
            sigma_min: 1.5,
            sigma_max: 2.0,
            amplitude_min: 0.7,
            amplitude_max: 0.9,
            noise: 0.01,
            seed: 99,
            ..SynthConfig::default()
        };
        synth_generate(&cfg).unwrap()
    }

    #[test]
    fn crop_must_match_window() {
        let err = TrainConfig { crop: 64, ..tiny_train(1, 0) }
            .validate(&tiny_model())
            .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let err =
            train(&tiny_model(), &tiny_train(1, 0), &[], &[], None, |_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let data = easy_dataset(12);
        let (tr, va) = data.split_at(10);
        let run = || train(&tiny_model(), &tiny_train(3, 5), tr, va, None, |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.last, b.last);
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn loss_decreases_on_easy_data() {
        let data = easy_dataset(200);
        let (tr, va) = data.split_at(160);
        let mut seen = 0usize;
        let out = train(&tiny_model(), &tiny_train(30, 1), tr, va, None, |r| {
            assert_eq!(r.epoch, seen + 1);
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 30);
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(
            last < first,
            "mean loss should fall over 30 epochs: first {first}, last {last}"
        );
        assert!(out.best_epoch >= 1 && out.best_epoch <= 30);
        let best_val = out.log[out.best_epoch - 1].val_loss;
        assert!(out.log.iter().all(|r| r.val_loss >= best_val));
    }

    #[test]
    fn resume_from_checkpoint_continues_improving() {
        let data = easy_dataset(60);
        let (tr, va) = data.split_at(48);
        let cold = train(&tiny_model(), &tiny_train(2, 3), tr, va, None, |_| {}).unwrap();
        let warm =
            train(&tiny_model(), &tiny_train(2, 4), tr, va, Some(&cold.last), |_| {}).unwrap();
        // A warm start on easy data beats the cold start's opening epoch.
        assert!(
            warm.log[0].train_loss < cold.log[0].train_loss,
            "warm {} vs cold {}",
            warm.log[0].train_loss,
            cold.log[0].train_loss
        );
    }

    #[test]
    fn weight_store_roundtrips_through_disk() {
        let data = easy_dataset(4);
        let out = train(&tiny_model(), &tiny_train(1, 0), &data, &[], None, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lrnw");
        out.last.save(&path).unwrap();
        assert_eq!(WeightStore::load(&path).unwrap(), out.last);
    }

    #[test]
    fn diverging_loss_is_reported_with_step_indices() {
        let data = easy_dataset(4);
        let model = LrNet::<f32>::init(tiny_model(), 0).unwrap();
        let mut store = model.to_store();
        // A finite but enormous head bias keeps every layer output finite
        // while the weighted loss sum overflows to infinity.
        let poisoned = store
            .entries
            .iter_mut()
            .find(|e| e.name == "head.bias")
            .expect("head bias present");
        poisoned.data[0] = 3.0e38;
        let err = train(&tiny_model(), &tiny_train(1, 0), &data, &[], Some(&store), |_| {})
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("epoch 1, batch 1"), "message was: {msg}");
    }
}
