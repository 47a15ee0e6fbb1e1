//! Epoch loop: fresh negatives, shuffled batches, Adam updates and
//! validation-based checkpoint selection.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::calendar::GranularityConfig;
use crate::data::{build_training_epoch, Dataset, Separation, Split};
use crate::diffcore::{Adam, Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::evalharness::{evaluate, CaseSet, Scenario, Target};
use crate::model::{Ablation, Example, HistoryTime, ModelConfig, TimelyRec};
use crate::rng;

/// Examples per parallel gradient task. Fixed so that the reduction order,
/// and therefore the result, does not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub history_len: usize,
    pub granularities: GranularityConfig,
    /// Grid: {0.01, 0.001, 0.0001}.
    pub learning_rate: f64,
    /// Grid: {0.0, 0.1, ..., 0.5}.
    pub dropout: f64,
    /// Widths grid {32, 64, 96, 128, 160}, depth grid 1..=5.
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    /// Epochs without a validation HR@10 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub separation: Separation,
    /// Scenario whose validation HR@10 selects the best epoch.
    pub selection: Scenario,
    pub utc_offset: i64,
    pub history_time: HistoryTime,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            batch_size: 256,
            history_len: 5,
            granularities: GranularityConfig::default(),
            learning_rate: 0.001,
            dropout: 0.2,
            hidden: vec![64, 64],
            max_epochs: 100,
            patience: 10,
            seed: 42,
            separation: Separation::Hour,
            selection: Scenario::Item,
            utc_offset: 0,
            history_time: HistoryTime::Interaction,
            ablation: Ablation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_users: usize, num_items: usize) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            granularities: self.granularities.clone(),
            history_len: self.history_len,
            hidden: self.hidden.clone(),
            dropout: self.dropout,
            utc_offset: self.utc_offset,
            history_time: self.history_time,
            ablation: self.ablation,
            ..ModelConfig::new(num_users, num_items)
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hr10: f64,
    pub best: bool,
    /// Training positives dropped because a negative sampler was infeasible.
    pub skipped: usize,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} val_hr10={:.4} best={} skipped={}",
            self.epoch, self.train_loss, self.val_hr10, self.best, self.skipped
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Model holding the parameters of the last completed epoch.
    pub model: TimelyRec,
    pub best_params: ParamStore,
    /// 1-based epoch of the best checkpoint; `None` before any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_hr10: f64,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn best_model(&self) -> TimelyRec {
        let mut m = self.model.clone();
        m.set_params(self.best_params.clone())
            .expect("best checkpoint shares the model layout");
        m
    }
}

/// Mean loss of `batch`, applying one Adam step to `model`.
///
/// The batch is split into fixed-size chunks whose gradients are computed in
/// parallel and summed in chunk order.
pub fn train_step(
    model: &mut TimelyRec,
    adam: &mut Adam,
    batch: &[Example],
    training: bool,
    seed: u64,
    tags: &[u64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let m: &TimelyRec = model;
    let parts = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut stream_tags = vec![rng::TAG_DROPOUT];
            stream_tags.extend_from_slice(tags);
            stream_tags.push(c as u64);
            let mut rng = rng::stream(seed, &stream_tags);
            let mut grads = Gradients::zeros_like(m.params());
            let loss = m.accumulate_gradients(chunk, weight, training, &mut rng, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let (mut total, mut grads) = parts.next().expect("non-empty batch");
    for (loss, g) in parts {
        total += loss;
        grads.accumulate(&g);
    }
    if !total.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    adam.step(model.params_mut(), &grads)?;
    Ok(total * weight)
}

/// Validation HR@10 on prebuilt cases.
pub fn validate(model: &TimelyRec, dataset: &Dataset, split: &Split, cases: &CaseSet) -> Result<f64> {
    Ok(evaluate(model, dataset, split, cases)?.hr_at(10))
}

pub fn train(
    dataset: &Dataset,
    split: &Split,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    config.validate()?;
    let model_config = config.model_config(dataset.num_users(), dataset.num_items());
    let model = TimelyRec::new(model_config, &mut rng::stream(config.seed, &[rng::TAG_INIT]))?;
    train_from(model, dataset, split, config, on_epoch)
}

/// Trains an already initialized model.
pub fn train_from(
    mut model: TimelyRec,
    dataset: &Dataset,
    split: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState> {
    config.validate()?;
    let mut state = TrainState {
        best_params: model.params().clone(),
        model: model.clone(),
        best_epoch: None,
        best_val_hr10: f64::NEG_INFINITY,
        log: Vec::new(),
    };
    if config.max_epochs == 0 {
        return Ok(state);
    }
    if split.eval_users().next().is_none() {
        return Err(Error::Input("no user has a validation interaction".into()));
    }
    let val_cases = CaseSet::build(
        dataset,
        split,
        config.selection,
        Target::Validation,
        config.separation,
        config.seed,
    )?;
    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let e = epoch as u64;
        let mut built = build_training_epoch(
            dataset,
            split,
            config.history_len,
            config.separation,
            config.seed,
            e,
        );
        if built.examples.is_empty() {
            return Err(Error::Input("no trainable interactions".into()));
        }
        built
            .examples
            .shuffle(&mut rng::stream(config.seed, &[rng::TAG_SHUFFLE, e]));
        let mut total = 0.0;
        for (b, batch) in built.examples.chunks(config.batch_size).enumerate() {
            let loss = train_step(&mut model, &mut adam, batch, true, config.seed, &[e, b as u64])
                .map_err(|err| match err {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("epoch {epoch}, batch {b}: {msg}"))
                    }
                    other => other,
                })?;
            total += loss * batch.len() as f64;
        }
        let val_hr10 = validate(&model, dataset, split, &val_cases)?;
        let best = val_hr10 > state.best_val_hr10;
        if best {
            state.best_val_hr10 = val_hr10;
            state.best_epoch = Some(epoch);
            state.best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let line = EpochLog {
            epoch,
            train_loss: total / built.examples.len() as f64,
            val_hr10,
            best,
            skipped: built.skipped,
        };
        log::info!("{line}");
        on_epoch(&line);
        state.log.push(line);
        if since_best >= config.patience {
            break;
        }
    }
    state.model = model;
    Ok(state)
}
