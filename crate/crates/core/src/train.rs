//! Fine-tuning and pre-training loops.
//!
//! Every iteration runs exactly one forward and one backward pass, builds the
//! strategy's selection mask from that gradient and applies a masked SGD step
//! with the poly learning rate. Batch contents are a pure function of
//! `(seed, iteration)`.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, collate, SegSample};
use crate::error::{Error, Result};
use crate::loss::ce_dice_loss;
use crate::optim::{poly_lr, OptimConfig, Sgd};
use crate::seed::{self, stream};
use crate::sparsify::{
    adapter_inject, lora_inject, sgst_warmup, strategy_param_count, GradientSnapshot, SelectionMask, Selector,
    StrategyConfig, StrategyKind,
};
use crate::tensor::Tensor;
use crate::unet::{build_unet, Model, ModelConfig};

/// Per-epoch shuffled mini-batches; the last batch of an epoch may be short.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    samples: usize,
    batch_size: usize,
    seed: u64,
    augment: bool,
}

impl BatchSchedule {
    pub fn new(samples: usize, batch_size: usize, seed: u64, augment: bool) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(Self {
            samples,
            batch_size,
            seed,
            augment,
        })
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.samples.div_ceil(self.batch_size)
    }

    /// Dataset indices forming batch `iteration`.
    pub fn indices(&self, iteration: usize) -> Vec<usize> {
        let per = self.iterations_per_epoch();
        let (epoch, j) = (iteration / per, iteration % per);
        let mut order: Vec<usize> = (0..self.samples).collect();
        order.shuffle(&mut seed::rng(&[self.seed, stream::DATA_ORDER, epoch as u64]));
        let end = ((j + 1) * self.batch_size).min(self.samples);
        order[j * self.batch_size..end].to_vec()
    }

    pub fn batch(&self, data: &[SegSample], iteration: usize) -> Result<(Tensor, Vec<u8>)> {
        if data.len() != self.samples {
            return Err(Error::shape("batch schedule", "samples", self.samples, data.len()));
        }
        let idx = self.indices(iteration);
        if !self.augment {
            let picked: Vec<&SegSample> = idx.iter().map(|&i| &data[i]).collect();
            return collate(&picked);
        }
        let augmented: Vec<SegSample> = idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = seed::rng(&[self.seed, stream::AUGMENT, iteration as u64, slot as u64]);
                augment(&data[i], &mut rng)
            })
            .collect();
        collate(&augmented.iter().collect::<Vec<_>>())
    }
}

/// One forward/backward pass; returns the loss and the gradient of every
/// parameter.
pub fn compute_gradients(
    model: &Model,
    images: &Tensor,
    labels: &[u8],
    iteration: usize,
) -> Result<(f64, GradientSnapshot)> {
    let mut tape = Tape::new();
    let logits = model.forward(images, &mut tape)?;
    let loss = ce_dice_loss(&mut tape, logits, labels)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let snapshot = GradientSnapshot::from_gradients(iteration, model.registry(), grads)?;
    Ok((value, snapshot))
}

/// Per-run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub strategy: StrategyConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub samples: usize,
    pub iterations: usize,
    pub backward_passes: usize,
    pub warmup_backward_passes: usize,
    pub total_scalars: usize,
    pub trainable_scalars: usize,
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub selected: Vec<usize>,
    /// Wall time of forward, backward, selection and update per iteration.
    pub iteration_seconds: Vec<f64>,
    pub mean_iteration_seconds: f64,
    pub median_iteration_seconds: f64,
}

impl TrainRecord {
    /// Copy with timing fields zeroed, for bitwise comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            iteration_seconds: Vec::new(),
            mean_iteration_seconds: 0.0,
            median_iteration_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub record: TrainRecord,
}

/// What an observer sees after each update.
pub struct StepEvent<'a> {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub grads: &'a GradientSnapshot,
    pub mask: &'a SelectionMask,
    pub before: &'a [Tensor],
    pub after: &'a Model,
}

pub type Observer<'o> = &'o mut dyn FnMut(&StepEvent<'_>);

/// The model a strategy starts from: a fresh initialization for
/// `from-scratch`, an injected copy for `lora`/`adapter`, the foundation
/// otherwise.
pub fn prepare_model(foundation: &Model, strategy: &StrategyConfig, seed: u64) -> Result<Model> {
    match strategy.kind {
        StrategyKind::FromScratch => build_unet(foundation.config(), seed::derive(&[seed, stream::INIT])),
        StrategyKind::Lora => lora_inject(foundation, strategy.lora_rank, seed::derive(&[seed, stream::INJECT])),
        StrategyKind::Adapter => adapter_inject(
            foundation,
            strategy.adapter_width,
            seed::derive(&[seed, stream::INJECT]),
        ),
        _ => Ok(foundation.clone()),
    }
}

pub fn finetune_loop(
    foundation: &Model,
    data: &[SegSample],
    strategy: &StrategyConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    finetune_loop_observed(foundation, data, strategy, optim, seed, None)
}

pub fn finetune_loop_observed(
    foundation: &Model,
    data: &[SegSample],
    strategy: &StrategyConfig,
    optim: &OptimConfig,
    seed: u64,
    observer: Option<Observer<'_>>,
) -> Result<TrainOutcome> {
    strategy.validate()?;
    optim.validate()?;
    let model = prepare_model(foundation, strategy, seed)?;
    run(model, data, strategy, optim, seed, observer)
}

/// Trains a freshly initialized model on the source domain with every
/// parameter selected.
pub fn pretrain_loop(config: &ModelConfig, data: &[SegSample], optim: &OptimConfig, seed: u64) -> Result<TrainOutcome> {
    optim.validate()?;
    let model = build_unet(config, seed::derive(&[seed, stream::INIT]))?;
    run(model, data, &StrategyConfig::new(StrategyKind::Full), optim, seed, None)
}

fn run(
    mut model: Model,
    data: &[SegSample],
    strategy: &StrategyConfig,
    optim: &OptimConfig,
    seed: u64,
    mut observer: Option<Observer<'_>>,
) -> Result<TrainOutcome> {
    let schedule = BatchSchedule::new(data.len(), optim.batch_size, seed, optim.augment)?;
    let total = optim.epochs * schedule.iterations_per_epoch();

    let mut warmup_passes = 0;
    let sgst = if strategy.kind == StrategyKind::Sgst {
        let warmup = strategy.sgst_warmup_iters.unwrap_or(schedule.iterations_per_epoch());
        warmup_passes = warmup;
        Some(sgst_warmup(&model, data, &schedule, warmup, strategy.gamma)?)
    } else {
        None
    };
    let selector = Selector::new(strategy, model.registry(), seed, sgst)?;
    let mut sgd = Sgd::new(optim.momentum, model.registry().total_scalars());

    let mut record = TrainRecord {
        strategy: strategy.clone(),
        optim: optim.clone(),
        seed,
        samples: data.len(),
        iterations: total,
        backward_passes: 0,
        warmup_backward_passes: warmup_passes,
        total_scalars: model.registry().total_scalars(),
        trainable_scalars: strategy_param_count(strategy, model.registry()),
        loss: Vec::with_capacity(total),
        lr: Vec::with_capacity(total),
        selected: Vec::with_capacity(total),
        iteration_seconds: Vec::with_capacity(total),
        mean_iteration_seconds: 0.0,
        median_iteration_seconds: 0.0,
    };

    for t in 0..total {
        let (images, labels) = schedule.batch(data, t)?;
        let lr = poly_lr(optim.lr0, t, total, optim.power)?;
        let before = observer.as_ref().map(|_| model.params().to_vec());

        let start = Instant::now();
        let (loss, grads) = compute_gradients(&model, &images, &labels, t)?;
        record.backward_passes += 1;
        let mask = selector.select(model.registry(), &grads)?;
        let Model { params, registry, .. } = &mut model;
        sgd.step(params, registry, &grads, &mask, lr)?;
        record.iteration_seconds.push(start.elapsed().as_secs_f64());

        record.loss.push(loss);
        record.lr.push(lr);
        record.selected.push(mask.count());
        if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_deref()) {
            obs(&StepEvent {
                iteration: t,
                lr,
                loss,
                grads: &grads,
                mask: &mask,
                before,
                after: &model,
            });
        }
    }
    let secs = &record.iteration_seconds;
    record.mean_iteration_seconds = if secs.is_empty() {
        0.0
    } else {
        secs.iter().sum::<f64>() / secs.len() as f64
    };
    record.median_iteration_seconds = median(secs);
    Ok(TrainOutcome { model, record })
}
