use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{adam_step, seg_loss, LossConfig, OptimizerState};
use crate::autodiff::{Dropout, Tape};
use crate::data::{save_checkpoint, Checkpoint, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{dxformer_forward_with, predict, ModelConfig, ParameterSet};
use crate::tensor::{FrameMask, Tensor};

const DROPOUT_SALT: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: u64,
    /// Stop after this many optimizer steps in total (0 = no cap).
    pub max_steps: u64,
    pub loss: LossConfig,
    /// Dropout rate on every block's update during training.
    pub dropout: f64,
    pub seed: u64,
    /// Write a checkpoint after every this many epochs (0 = only at the end).
    pub checkpoint_every: u64,
    /// Worker threads for the per-sample passes of a batch.
    pub workers: usize,
}

impl TrainConfig {
    /// Small-dataset preset: learning rate 5e−4, batch 1.
    pub fn small() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 1,
            epochs: 120,
            max_steps: 0,
            loss: LossConfig::default(),
            dropout: 0.5,
            seed: 0,
            checkpoint_every: 0,
            workers: 1,
        }
    }

    /// Large-dataset preset: learning rate 1e−3, batch 8.
    pub fn large() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return fail("lambda_smooth must be non-negative");
        }
        if !(self.loss.tau > 0.0 && self.loss.tau.is_finite()) {
            return fail("tau_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        Ok(())
    }
}

/// Summary of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Mean batch loss over the epoch's steps.
    pub loss: f64,
    /// Final-stage frame accuracy over the epoch's training passes.
    pub train_acc: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} loss={:.6} train_acc={:.2}",
            self.epoch, self.step, self.loss, self.train_acc
        )
    }
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor<f32>>,
    hits: usize,
}

fn check_compatible(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if let Some(d) = data.input_dim() {
        if d != cfg.input_dim {
            return Err(Error::Config(format!(
                "dataset features have D={d} but the model expects {}",
                cfg.input_dim
            )));
        }
    }
    if data.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model expects {}",
            data.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Mini-batch Adam training of one model.
///
/// Each sample of a batch gets its own forward and backward pass (possibly on
/// a worker thread); gradients are summed in batch order, so results do not
/// depend on the worker count.
pub struct Trainer {
    model: ModelConfig,
    train: TrainConfig,
    params: ParameterSet<f32>,
    optimizer: OptimizerState<f32>,
    epoch: u64,
    step: u64,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        let params = ParameterSet::init(&model)?;
        let optimizer = OptimizerState::new(&params);
        Self::assemble(model, train, params, optimizer, 0, 0)
    }

    /// Continues from a checkpoint. Moments missing from the checkpoint
    /// start at zero.
    pub fn from_checkpoint(ckpt: Checkpoint, train: TrainConfig) -> Result<Self> {
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => {
                let mut o = OptimizerState::new(&ckpt.params);
                o.step = ckpt.step;
                o
            }
        };
        Self::assemble(
            ckpt.config,
            train,
            ckpt.params,
            optimizer,
            ckpt.epoch,
            ckpt.step,
        )
    }

    fn assemble(
        model: ModelConfig,
        train: TrainConfig,
        params: ParameterSet<f32>,
        optimizer: OptimizerState<f32>,
        epoch: u64,
        step: u64,
    ) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        optimizer.validate(&params)?;
        let pool = if train.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(train.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            model,
            train,
            params,
            optimizer,
            epoch,
            step,
            pool,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn params(&self) -> &ParameterSet<f32> {
        &self.params
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            epoch: self.epoch,
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    fn steps_exhausted(&self) -> bool {
        self.train.max_steps > 0 && self.step >= self.train.max_steps
    }

    /// Whether [`fit`](Self::fit) has anything left to do.
    pub fn finished(&self) -> bool {
        self.epoch >= self.train.epochs || self.steps_exhausted()
    }

    /// Dropout stream of the `slot`-th sample of the current step.
    fn dropout(&self, slot: usize) -> Result<Dropout> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ DROPOUT_SALT);
        rng.set_stream(self.step * self.train.batch_size as u64 + slot as u64);
        Dropout::new(self.train.dropout, rng)
    }

    fn sample_pass(&self, sample: &Sample, slot: usize) -> Result<SampleResult> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let x = tape.constant(sample.features.clone());
        let mask = FrameMask::all(sample.frames());
        let mut dropout = self.dropout(slot)?;
        let out =
            dxformer_forward_with(&mut tape, &self.model, &bound, x, &mask, Some(&mut dropout))?;
        let logits: Vec<_> = out.stages.iter().map(|s| s.logits).collect();
        let loss = seg_loss(&mut tape, &logits, &sample.labels, &mask, self.train.loss)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Training(format!("loss is {value} on {}", sample.id)));
        }
        let pred = tape.value(out.final_logits()).argmax_columns();
        let hits = pred
            .iter()
            .zip(&sample.labels)
            .filter(|(p, g)| p == g)
            .count();
        tape.backward(loss)?;
        Ok(SampleResult {
            loss: value,
            grads: bound.take_grads(&mut tape),
            hits,
        })
    }

    fn batch_passes(&self, batch: &[&Sample]) -> Vec<Result<SampleResult>> {
        match &self.pool {
            Some(pool) => pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| self.sample_pass(s, i))
                    .collect()
            }),
            None => batch
                .iter()
                .enumerate()
                .map(|(i, s)| self.sample_pass(s, i))
                .collect(),
        }
    }

    /// One optimizer step on the mean loss of `batch`. Returns the batch loss
    /// and the number of correctly predicted frames.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<(f64, usize)> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        let mut loss = 0.0;
        let mut hits = 0;
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for r in self.batch_passes(batch) {
            let r = r?;
            loss += r.loss;
            hits += r.hits;
            match &mut sum {
                None => sum = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("non-empty batch");
        let scale = 1.0 / batch.len() as f32;
        if batch.len() > 1 {
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
        }
        adam_step(
            &mut self.params,
            &grads,
            &mut self.optimizer,
            self.train.learning_rate,
        )?;
        self.step += 1;
        Ok((loss / batch.len() as f64, hits))
    }

    /// The sample order of epoch `epoch` (0-based).
    pub fn epoch_order(&self, len: usize, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs the next epoch, stopping early if the step cap is hit.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        check_compatible(&self.model, data)?;
        let order = self.epoch_order(data.len(), self.epoch);
        let (mut loss, mut steps, mut hits, mut frames) = (0.0, 0u64, 0usize, 0usize);
        for chunk in order.chunks(self.train.batch_size) {
            if self.steps_exhausted() {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|i| &data.samples[*i]).collect();
            let (l, h) = self.train_step(&batch)?;
            loss += l;
            steps += 1;
            hits += h;
            frames += batch.iter().map(|s| s.frames()).sum::<usize>();
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            step: self.step,
            loss: if steps == 0 { 0.0 } else { loss / steps as f64 },
            train_acc: if frames == 0 {
                0.0
            } else {
                100.0 * hits as f64 / frames as f64
            },
        })
    }

    /// Trains until the epoch count or step cap is reached, calling `log`
    /// after every epoch. With `out` set, a checkpoint is written every
    /// `checkpoint_every` epochs and once at the end.
    pub fn fit(
        &mut self,
        data: &Dataset,
        out: Option<&Path>,
        mut log: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        check_compatible(&self.model, data)?;
        let mut records = Vec::new();
        while !self.finished() {
            let rec = self.train_epoch(data)?;
            log(&rec);
            records.push(rec);
            let every = self.train.checkpoint_every;
            if let Some(path) = out {
                if every > 0 && self.epoch.is_multiple_of(every) && !self.finished() {
                    save_checkpoint(path, &self.checkpoint())?;
                }
            }
        }
        if let Some(path) = out {
            save_checkpoint(path, &self.checkpoint())?;
        }
        Ok(records)
    }
}

/// Final-stage predictions for every sample, in dataset order.
pub fn predict_dataset(
    data: &Dataset,
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
) -> Result<Vec<Vec<usize>>> {
    check_compatible(cfg, data)?;
    data.samples
        .iter()
        .map(|s| predict(cfg, params, &s.features))
        .collect()
}

pub fn evaluate_params(
    data: &Dataset,
    cfg: &ModelConfig,
    params: &ParameterSet<f32>,
    ignore: Option<usize>,
) -> Result<MetricsReport> {
    let preds = predict_dataset(data, cfg, params)?;
    let mut acc = MetricsAccumulator::new(ignore);
    for (pred, s) in preds.iter().zip(&data.samples) {
        acc.add(pred, &s.labels)?;
    }
    Ok(acc.finish())
}

/// Scores a checkpoint's final-stage predictions on `data`.
pub fn evaluate(data: &Dataset, ckpt: &Checkpoint) -> Result<MetricsReport> {
    evaluate_params(data, &ckpt.config, &ckpt.params, None)
}
