//! Mini-batch training loop: sample noise, backpropagate, take an Adam step;
//! validate each epoch and stop early when validation RMSE stalls.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::experiments::rmse;
use crate::matrix::Matrix;
use crate::model::{LossBreakdown, VibConfig, VibModel};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream, SeededRng, Stream};

pub const TRAIN_STATE_KIND: &str = "vib-train-state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, across epochs.
    pub max_steps: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the training rows held out for validation; 0 disables both
    /// validation and early stopping.
    pub val_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 300,
            max_steps: None,
            patience: 20,
            val_fraction: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.adam.validate()
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train: LossBreakdown,
    /// NaN when validation is disabled.
    pub val_rmse: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,steps,train_total,train_recon,train_kl,train_beta_kl,val_rmse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch,
            self.steps,
            self.train.total,
            self.train.recon,
            self.train.kl,
            self.train.beta_kl,
            self.val_rmse
        )
    }
}

pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(EpochRecord::CSV_HEADER);
    text.push('\n');
    for r in log {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Passed to the observer after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct BatchEvent {
    pub epoch: usize,
    pub step: usize,
    pub batch_rows: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation RMSE (or the last
    /// state when validation is disabled).
    pub model: VibModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: VibModel,
    pub adam: AdamState,
    pub options: TrainOptions,
    fit_idx: Vec<usize>,
    val_idx: Vec<usize>,
    epoch: usize,
    step: usize,
    bad_epochs: usize,
    best: Option<(f64, usize, VibModel)>,
    log: Vec<EpochRecord>,
    shuffle_rng: SeededRng,
    noise_rng: SeededRng,
    stopped_early: bool,
}

impl Trainer {
    /// Fresh model and optimizer for a data set of `rows` training rows.
    pub fn new(config: VibConfig, options: TrainOptions, rows: usize) -> Result<Self> {
        options.validate()?;
        if rows == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        let model = VibModel::new(config, &mut stream(options.seed, Stream::Init))?;
        let adam = AdamState::new(options.adam, model.params());
        let (fit_idx, val_idx) = validation_carve(rows, options.val_fraction, options.seed);
        Ok(Self {
            model,
            adam,
            fit_idx,
            val_idx,
            epoch: 0,
            step: 0,
            bad_epochs: 0,
            best: None,
            log: Vec::new(),
            shuffle_rng: stream(options.seed, Stream::Shuffle),
            noise_rng: stream(options.seed, Stream::Noise),
            stopped_early: false,
            options,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.stopped_early
            || self.epoch >= self.options.max_epochs
            || self.options.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Runs one epoch (possibly cut short by `max_steps`) and its validation.
    pub fn run_epoch(
        &mut self,
        x: &Matrix,
        y: &Matrix,
        observer: &mut dyn FnMut(&BatchEvent) -> Result<()>,
    ) -> Result<EpochRecord> {
        if x.rows() != self.fit_idx.len() + self.val_idx.len() || x.rows() != y.rows() {
            return Err(Error::dim("train data", x.shape(), y.shape()));
        }
        let mut order = self.fit_idx.clone();
        order.shuffle(&mut self.shuffle_rng);
        self.epoch += 1;

        let (mut total, mut recon, mut kl, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.options.batch_size) {
            if self.options.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let bx = x.select_rows(chunk);
            let by = y.select_rows(chunk);
            let (loss, grads) = self.model.backward(&bx, &by, &mut self.noise_rng)?;
            self.step += 1;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: loss.total,
                });
            }
            observer(&BatchEvent {
                epoch: self.epoch,
                step: self.step,
                batch_rows: chunk.len(),
                loss,
            })?;
            self.adam.step(&mut self.model.params_mut(), &grads).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    step: self.step,
                    loss: loss.total,
                },
                e => e,
            })?;
            let w = chunk.len() as f64;
            total += loss.total * w;
            recon += loss.recon * w;
            kl += loss.kl * w;
            seen += chunk.len();
        }
        let seen = seen.max(1) as f64;
        let (recon, kl) = (recon / seen, kl / seen);
        let mut train = LossBreakdown::new(recon, kl, self.model.config.beta);
        train.total = total / seen;

        let val_rmse = if self.val_idx.is_empty() {
            f64::NAN
        } else {
            let vx = x.select_rows(&self.val_idx);
            let vy = y.select_rows(&self.val_idx);
            let pred = self
                .model
                .infer(&vx, &mut stream(self.options.seed, Stream::Inference))?;
            rmse(&pred, &vy)?
        };
        if !self.val_idx.is_empty() {
            if !val_rmse.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: val_rmse,
                });
            }
            let improved = self.best.as_ref().is_none_or(|(b, _, _)| val_rmse < *b);
            if improved {
                self.best = Some((val_rmse, self.epoch, self.model.clone()));
                self.bad_epochs = 0;
            } else {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.options.patience {
                    self.stopped_early = true;
                }
            }
        }
        let record = EpochRecord {
            epoch: self.epoch,
            steps: self.step,
            train,
            val_rmse,
        };
        self.log.push(record);
        Ok(record)
    }

    pub fn run(
        &mut self,
        x: &Matrix,
        y: &Matrix,
        observer: &mut dyn FnMut(&BatchEvent) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(x, y, observer)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let (model, best_epoch, best_val_rmse) = match self.best {
            Some((v, e, m)) => (m, e, v),
            None => (self.model, self.epoch, f64::NAN),
        };
        TrainOutcome {
            model,
            log: self.log,
            best_epoch,
            best_val_rmse,
            steps: self.step,
            stopped_early: self.stopped_early,
        }
    }

    /// Serializes everything needed to continue bit-identically.
    pub fn to_container(&self) -> Container {
        let mut c = self.model.to_container();
        c.kind = TRAIN_STATE_KIND.into();
        let o = &self.options;
        c.push_meta("train.batch_size", o.batch_size);
        c.push_meta("train.max_epochs", o.max_epochs);
        c.push_meta(
            "train.max_steps",
            o.max_steps.map_or("none".to_string(), |s| s.to_string()),
        );
        c.push_meta("train.patience", o.patience);
        c.push_f64("train.val_fraction", o.val_fraction);
        c.push_meta("train.seed", o.seed);
        c.push_meta("train.rows", self.fit_idx.len() + self.val_idx.len());
        c.push_meta("train.epoch", self.epoch);
        c.push_meta("train.step", self.step);
        c.push_meta("train.bad_epochs", self.bad_epochs);
        c.push_meta("train.stopped_early", self.stopped_early);
        push_rng(&mut c, "rng.shuffle", &self.shuffle_rng);
        push_rng(&mut c, "rng.noise", &self.noise_rng);
        self.adam.write_into(&mut c);
        if let Some((val, epoch, best)) = &self.best {
            c.push_f64("best.val_rmse", *val);
            c.push_meta("best.epoch", epoch);
            for (name, p) in best.param_names().into_iter().zip(best.params()) {
                c.push_record(&format!("best/{name}"), p.clone());
            }
        }
        let log = Matrix::from_fn(self.log.len(), 7, |r, k| {
            let e = &self.log[r];
            match k {
                0 => e.epoch as f64,
                1 => e.steps as f64,
                2 => e.train.total,
                3 => e.train.recon,
                4 => e.train.kl,
                5 => e.train.beta_kl,
                // NaN is not storable; -1 marks "no validation"
                _ => if e.val_rmse.is_nan() { -1.0 } else { e.val_rmse },
            }
        });
        c.push_record("log", log);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(TRAIN_STATE_KIND)?;
        let mut as_model = c.clone();
        as_model.kind = crate::model::MODEL_KIND.into();
        let model = VibModel::from_container(&as_model)?;
        let max_steps = match c.meta_str("train.max_steps")? {
            "none" => None,
            s => Some(s.parse().map_err(|_| Error::Mismatch {
                key: "train.max_steps".into(),
                expected: "integer or none".into(),
                found: s.into(),
            })?),
        };
        let adam = AdamState::read_from(c)?;
        let options = TrainOptions {
            batch_size: c.meta("train.batch_size")?,
            max_epochs: c.meta("train.max_epochs")?,
            max_steps,
            patience: c.meta("train.patience")?,
            val_fraction: c.meta("train.val_fraction")?,
            adam: adam.config,
            seed: c.meta("train.seed")?,
        };
        let rows: usize = c.meta("train.rows")?;
        let (fit_idx, val_idx) = validation_carve(rows, options.val_fraction, options.seed);
        let best = if c.has_meta("best.val_rmse") {
            let mut best = model.clone();
            let names = best.param_names();
            for (name, slot) in names.iter().zip(best.params_mut()) {
                *slot = c.record(&format!("best/{name}"))?.clone();
            }
            Some((c.meta("best.val_rmse")?, c.meta("best.epoch")?, best))
        } else {
            None
        };
        let raw_log = c.record("log")?;
        let beta = model.config.beta;
        let log = (0..raw_log.rows())
            .map(|r| {
                let v = |k| raw_log.get(r, k);
                let mut train = LossBreakdown::new(v(3), v(4), beta);
                train.total = v(2);
                train.beta_kl = v(5);
                EpochRecord {
                    epoch: v(0) as usize,
                    steps: v(1) as usize,
                    train,
                    val_rmse: if v(6) < 0.0 { f64::NAN } else { v(6) },
                }
            })
            .collect();
        Ok(Self {
            model,
            adam,
            options,
            fit_idx,
            val_idx,
            epoch: c.meta("train.epoch")?,
            step: c.meta("train.step")?,
            bad_epochs: c.meta("train.bad_epochs")?,
            best,
            log,
            shuffle_rng: read_rng(c, "rng.shuffle")?,
            noise_rng: read_rng(c, "rng.noise")?,
            stopped_early: c.meta("train.stopped_early")?,
        })
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Trains a fresh model to completion.
pub fn train(
    config: &VibConfig,
    options: &TrainOptions,
    x: &Matrix,
    y: &Matrix,
    observer: &mut dyn FnMut(&BatchEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), options.clone(), x.rows())?;
    trainer.run(x, y, observer)?;
    Ok(trainer.finish())
}

fn validation_carve(rows: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..rows).collect();
    let n_val = (val_fraction * rows as f64).round() as usize;
    if n_val == 0 || n_val >= rows {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut stream(seed, Stream::Validation));
    let val = idx.split_off(rows - n_val);
    (idx, val)
}

fn push_rng(c: &mut Container, key: &str, rng: &SeededRng) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    c.push_meta(&format!("{key}.seed"), seed);
    c.push_meta(&format!("{key}.stream"), rng.get_stream());
    c.push_meta(&format!("{key}.word_pos"), rng.get_word_pos());
}

fn read_rng(c: &Container, key: &str) -> Result<SeededRng> {
    let hex = c.meta_str(&format!("{key}.seed"))?;
    let bad = || Error::Mismatch {
        key: format!("{key}.seed"),
        expected: "64 hex digits".into(),
        found: hex.into(),
    };
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = SeededRng::from_seed(seed);
    rng.set_stream(c.meta(&format!("{key}.stream"))?);
    rng.set_word_pos(c.meta(&format!("{key}.word_pos"))?);
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::linear_task;

    fn small_config() -> VibConfig {
        VibConfig {
            input_dim: 20,
            encoder_hidden: 16,
            latent_dim: 3,
            predictor_hidden: 16,
            predictor_layers: 2,
            ..VibConfig::default()
        }
    }

    fn options() -> TrainOptions {
        TrainOptions {
            batch_size: 32,
            max_epochs: 6,
            patience: 3,
            seed: 17,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let task = linear_task(400, 100, 20, 0.01, 3).unwrap();
        let run = || {
            train(&small_config(), &options(), &task.train.x, &task.train.y, &mut |_| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert!(a.log.last().unwrap().train.recon < a.log[0].train.recon);
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.steps, 6 * 12);
    }

    #[test]
    fn max_steps_caps_training() {
        let task = linear_task(200, 50, 20, 0.01, 3).unwrap();
        let opts = TrainOptions {
            max_steps: Some(10),
            ..options()
        };
        let mut count = 0;
        let out = train(&small_config(), &opts, &task.train.x, &task.train.y, &mut |_| {
            count += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.steps, 10);
        assert_eq!(count, 10);
    }

    #[test]
    fn resume_is_bit_identical() {
        let task = linear_task(300, 50, 20, 0.01, 5).unwrap();
        let (x, y) = (&task.train.x, &task.train.y);
        let straight = train(&small_config(), &options(), x, y, &mut |_| Ok(())).unwrap();

        let mut first = Trainer::new(small_config(), options(), x.rows()).unwrap();
        first.run_epoch(x, y, &mut |_| Ok(())).unwrap();
        first.run_epoch(x, y, &mut |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        first.save_state(&path).unwrap();
        let mut resumed = Trainer::load_state(&path).unwrap();
        resumed.run(x, y, &mut |_| Ok(())).unwrap();
        let resumed = resumed.finish();

        assert_eq!(resumed.model, straight.model);
        assert_eq!(resumed.log.len(), straight.log.len());
        for (a, b) in resumed.log.iter().zip(&straight.log) {
            assert_eq!(a.csv_row(), b.csv_row());
        }
    }

    #[test]
    fn early_stopping_triggers_with_zero_patience_budget() {
        let task = linear_task(200, 50, 20, 0.01, 3).unwrap();
        let opts = TrainOptions {
            patience: 1,
            max_epochs: 200,
            adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
            ..options()
        };
        let out = train(&small_config(), &opts, &task.train.x, &task.train.y, &mut |_| Ok(())).unwrap();
        assert!(out.stopped_early);
        assert!(out.log.len() < 200);
        let best = out.log.iter().map(|r| r.val_rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(best, out.best_val_rmse);
    }

    #[test]
    fn observer_errors_abort_training() {
        let task = linear_task(100, 20, 20, 0.01, 3).unwrap();
        let err = train(&small_config(), &options(), &task.train.x, &task.train.y, &mut |_| {
            Err(Error::State("stop".into()))
        });
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn epoch_log_csv_format() {
        let rec = EpochRecord {
            epoch: 1,
            steps: 4,
            train: LossBreakdown::new(0.5, 2.0, 0.25),
            val_rmse: 0.125,
        };
        assert_eq!(rec.csv_row(), "1,4,1.0,0.5,2.0,0.5,0.125");
    }
}
