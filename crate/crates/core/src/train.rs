//! Training loop.
//!
//! Every example in every epoch gets its own generator seeded from
//! `(seed, epoch, index)`, so a run is bit-reproducible for any thread count:
//! per-example gradients are computed in parallel and summed in batch order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::align::align;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::diffusion::{denoise_loop, make_random_sequence, sample_training_example, PinMode};
use crate::edit::{apply_script, Direction, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{check_vocab, loss_terms, DenoiserModel, ModelConfig};
use crate::tensor::{AdamState, Gradients, Tape};
use crate::vocab::Vocabulary;
use crate::world::{Corpus, Example};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Fraction of optimizer steps spent on linear warmup.
    pub warmup: f64,
    pub seed: u64,
    /// Validation scenes scored per epoch (0 disables the check).
    pub val_limit: usize,
    /// Length of the random input used for validation exact-match.
    pub val_len: usize,
    pub grad_clip: Option<f64>,
    /// Independent noise draws per training example per epoch.
    pub draws: usize,
    /// Probability that an example is replaced by uniform random words at
    /// `t = T`, the input distribution of generation.
    pub random_start: f64,
    /// Probability that an example is advanced one step by the current model
    /// before alignment, so the model sees and repairs its own mistakes.
    pub rollin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 30,
            batch: 16,
            warmup: 0.05,
            seed: 0,
            val_limit: 100,
            val_len: 10,
            grad_clip: None,
            draws: 6,
            random_start: 0.25,
            rollin: 0.75,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch == 0 || !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::InvalidArgument("lr > 0, batch >= 1 and warmup in [0, 1) required".into()));
        }
        if !(0.0..=1.0).contains(&self.random_start) || !(0.0..=1.0).contains(&self.rollin) {
            return Err(Error::InvalidArgument("random_start and rollin must lie in [0, 1]".into()));
        }
        if self.val_len == 0 || self.draws == 0 {
            return Err(Error::InvalidArgument("val_len and draws must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate after linear warmup and linear decay; `step` counts from 0.
pub fn learning_rate(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warm = ((total as f64 * warmup_frac).ceil() as usize).max(1).min(total.max(1));
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        base * (total - step).max(1) as f64 / (total - warm + 1) as f64
    }
}

/// Deterministic 64-bit mix of a seed and stream coordinates.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = (x ^ p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
        x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 29;
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub edit_loss: f64,
    pub lang_loss: f64,
    pub val_exact_match: Option<f64>,
    pub lr: f64,
}

/// Loss and gradients for one example.
pub struct ExampleStep {
    pub edit: f64,
    pub lang: f64,
    pub grads: Gradients,
}

/// How training inputs depart from plain forward noising.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Augment {
    /// See [`TrainConfig::random_start`].
    pub random_start: f64,
    /// See [`TrainConfig::rollin`].
    pub rollin: f64,
}

impl TrainConfig {
    pub fn augment(&self) -> Augment {
        Augment { random_start: self.random_start, rollin: self.rollin }
    }
}

/// Samples `(x_t, t)` for `ex`, aligns it back to the clean caption, and
/// backpropagates the loss.
///
/// With probability `aug.random_start` the input is `L - 4 ..= L + 4`
/// uniform random words at `t = T`, `L` being the schedule's target length.
/// With probability `aug.rollin`, and when `t >= 2`, the input is then
/// replaced by the model's own prediction applied to it, at `t - 1`; the
/// roll-in is skipped if that prediction is empty or too long for the model.
pub fn example_step(
    model: &DenoiserModel,
    ex: &Example,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    aug: Augment,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleStep> {
    let (mut x_t, mut t) = if aug.random_start > 0.0 && rng.gen_bool(aug.random_start) {
        let target = schedule.target_len();
        let n = rng.gen_range(target.saturating_sub(4).max(1)..=target + 4);
        (make_random_sequence(n, schedule.steps(), vocab, rng)?, schedule.steps())
    } else {
        sample_training_example(&ex.caption, schedule, vocab, rng)?
    };
    if aug.rollin > 0.0 && rng.gen_bool(aug.rollin) && t >= 2 {
        let script = model.predict(&ex.condition, &x_t, t)?;
        let next = apply_script(&x_t, &script, Direction::Denoising)?;
        if !next.is_empty() && model.check_inputs(&ex.condition, &next, t - 1).is_ok() {
            x_t = next;
            t -= 1;
        }
    }
    let gt = align(&x_t, &ex.caption);
    let mut tape = Tape::new();
    let dropout = (model.config().dropout > 0.0).then_some(rng);
    let logits = model.forward(&mut tape, &ex.condition, &x_t, t, dropout)?;
    let terms = loss_terms(&mut tape, logits, &gt)?;
    let (edit, lang) = (tape.value(terms.edit).item(), tape.value(terms.language).item());
    if !(edit.is_finite() && lang.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss (edit {edit}, language {lang}) on scene {} at t={t}",
            ex.scene_id
        )));
    }
    Ok(ExampleStep { edit, lang, grads: tape.gradients(terms.total)? })
}

/// Mean loss over `examples` with generators seeded from `seed` only, for
/// comparing checkpoints on an identical probe batch.
pub fn probe_loss(
    model: &DenoiserModel,
    examples: &[Example],
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<f64> {
    let losses = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX, i as u64]));
            example_step(model, ex, schedule, vocab, Augment::default(), &mut rng).map(|s| s.edit + s.lang)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Exact-match rate of generation from `len` random words over `examples`.
pub fn generation_exact_match(
    model: &DenoiserModel,
    examples: &[Example],
    steps: usize,
    len: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<f64> {
    let hits = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX - 1, i as u64]));
            let input = make_random_sequence(len, steps, vocab, &mut rng)?;
            let out = denoise_loop(model, &ex.condition, &input, steps, &BTreeMap::new(), PinMode::Soft)?;
            Ok(out.caption.ids() == ex.caption)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

/// Trains a fresh model on the corpus training split.
///
/// `on_epoch` sees each log row as soon as it is produced.
pub fn train(
    corpus: &Corpus,
    schedule: &NoiseSchedule,
    model_config: ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if model_config.max_t < schedule.steps() {
        return Err(Error::Mismatch(format!(
            "model max_t {} below schedule steps {}",
            model_config.max_t,
            schedule.steps()
        )));
    }
    let mut model = DenoiserModel::new(model_config)?;
    check_vocab(&model, &corpus.vocab)?;
    let vocab = &corpus.vocab;
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let per_epoch = (corpus.train.len() * cfg.draws).div_ceil(cfg.batch);
    let total = per_epoch * cfg.epochs;
    let val = &corpus.val[..cfg.val_limit.min(corpus.val.len())];
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<(usize, usize)> =
            (0..cfg.draws).flat_map(|d| (0..corpus.train.len()).map(move |i| (d, i))).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let (mut edit_sum, mut lang_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let results = chunk
                .par_iter()
                .map(|&(draw, idx)| {
                    let coords = [epoch as u64, idx as u64, draw as u64];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &coords[..if draw == 0 { 2 } else { 3 }]));
                    example_step(&model, &corpus.train[idx], schedule, vocab, cfg.augment(), &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let store = model.params_mut();
            for r in &results {
                edit_sum += r.edit;
                lang_sum += r.lang;
                store.accumulate(&r.grads, scale);
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = store.grad_norm();
                if norm > clip {
                    store.scale_grads(clip / norm);
                }
            }
            adam.lr = learning_rate(cfg.lr, step, total, cfg.warmup);
            adam.step(store)?;
            step += 1;
        }
        let n = order.len() as f64;
        let val_exact_match = if val.is_empty() {
            None
        } else {
            Some(generation_exact_match(&model, val, schedule.steps(), cfg.val_len, vocab, cfg.seed)?)
        };
        let log = EpochLog { epoch: epoch + 1, edit_loss: edit_sum / n, lang_loss: lang_sum / n, val_exact_match, lr: adam.lr };
        on_epoch(&log);
        logs.push(log);
    }
    let (w_r, w_d, w_i) = schedule.weights();
    let meta = CheckpointMeta {
        epochs: cfg.epochs as u64,
        train_seed: cfg.seed,
        corpus_hash: corpus.hash(),
        vocab_fingerprint: vocab.fingerprint(),
        steps: schedule.steps(),
        weights: (w_r, w_d, w_i),
    };
    Ok((Checkpoint { model, meta }, logs))
}
