use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{ModelCheckpoint, TrainingMetadata};
use super::model::{clip_tensors, Model, ModelConfig};
use super::optim::{adam_step, bce_loss, AdamState, TrainConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::pose_features::RasterClip;
use crate::rng::derive_rng;

/// Produces a freshly augmented version of training sample `index`.
pub trait ClipAugmenter: Sync {
    fn augment(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<RasterClip>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Classification at threshold 0.5; exactly 0.5 is negative.
pub fn classify(p: f64) -> bool {
    p > 0.5
}

pub fn predict(checkpoint: &ModelCheckpoint, clip: &RasterClip) -> Result<f64> {
    checkpoint.model()?.predict_clip(clip)
}

/// Loss and parameter gradients for one labelled clip.
pub fn sample_gradients(model: &Model<f32>, clip: &RasterClip) -> Result<(f64, Vec<Tensor<f32>>)> {
    let frames = clip_tensors(clip)?;
    let cache = model.forward_cached(&frames)?;
    let y = clip.label.as_f64();
    let (loss, _) = bce_loss(cache.probability, y);
    // d(BCE)/d(logit) through the sigmoid.
    let d_logit = (cache.probability - y) as f32;
    Ok((loss, model.backward(&cache, d_logit)))
}

fn check_train_set(config: &ModelConfig, set: &[RasterClip], allow_single_class: bool) -> Result<()> {
    if set.is_empty() {
        return Err(Error::config("train_set", "training set is empty"));
    }
    let pos = set.iter().filter(|c| c.label.is_positive()).count();
    if !allow_single_class && (pos == 0 || pos == set.len()) {
        return Err(Error::config(
            "train_set",
            format!("training set needs both labels ({pos} of {} positive)", set.len()),
        ));
    }
    let i = &config.input;
    for (k, c) in set.iter().enumerate() {
        if c.frames.len() != i.frames || c.width() != i.width || c.height() != i.height || i.channels != 1 {
            return Err(Error::Shape(format!(
                "training clip {k} is {}x{}x{} frames, model expects {}x{}x{}",
                c.frames.len(),
                c.height(),
                c.width(),
                i.frames,
                i.height,
                i.width
            )));
        }
    }
    Ok(())
}

/// Mini-batch Adam training with seeded shuffling.
///
/// Per-sample gradients run in parallel and are summed in batch order, so
/// results do not depend on the thread count. The augmenter, when given, is
/// called once per sample per epoch with a stream derived from
/// `(seed, epoch, sample index)`.
pub fn train(
    model_config: &ModelConfig,
    train_set: &[RasterClip],
    config: &TrainConfig,
    augmenter: Option<&dyn ClipAugmenter>,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    train_with_options(model_config, train_set, config, augmenter, &TrainOptions::default())
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Accept a training set holding a single label (degenerate folds in
    /// cross-validation); plain training rejects it.
    pub allow_single_class: bool,
    /// Called after every epoch with `(epoch, mean loss)`.
    pub on_epoch: Option<&'a (dyn Fn(usize, f64) + Sync)>,
}

pub fn train_with_options(
    model_config: &ModelConfig,
    train_set: &[RasterClip],
    config: &TrainConfig,
    augmenter: Option<&dyn ClipAugmenter>,
    options: &TrainOptions<'_>,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    config.validate("train")?;
    let mut model = Model::<f32>::init(model_config)?;
    check_train_set(model_config, train_set, options.allow_single_class)?;
    let mut state = AdamState::new(model.parameters());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut derive_rng(config.seed, "shuffle", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let clip = match augmenter {
                        Some(a) => {
                            let mut rng = derive_rng(config.seed, "augment", &[epoch as u64, i as u64]);
                            let c = a.augment(i, &mut rng)?;
                            if c.label != train_set[i].label {
                                return Err(Error::Validation("augmenter changed a label".into()));
                            }
                            Cow::Owned(c)
                        }
                        None => Cow::Borrowed(&train_set[i]),
                    };
                    sample_gradients(&model, &clip)
                })
                .collect::<Result<Vec<_>>>()?;

            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            if !batch_loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
                return Err(Error::Numeric(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            let scale = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            step += 1;
            adam_step(model.parameters_mut(), &grads, &mut state, step, config)?;
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / train_set.len() as f64;
        log::info!("epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        history.epoch_losses.push(mean);
        if let Some(f) = options.on_epoch {
            f(epoch, mean);
        }
    }

    if !model.parameters().iter().all(Tensor::all_finite) {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    let checkpoint = ModelCheckpoint::from_model(
        &model,
        TrainingMetadata {
            epochs_run: config.epochs,
            final_loss: history.epoch_losses.last().copied(),
            seed: config.seed,
            pipeline: None,
        },
    );
    Ok((checkpoint, history))
}
