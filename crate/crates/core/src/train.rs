//! Epoch loop, evaluation and the config-driven training run.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{DataFormat, RunConfig};
use crate::data::{augment, batches, load_feature_file, load_image_dir, AugmentConfig, Dataset, SampleKind};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, build_model, Model};
use crate::objectives::{max_entropy_loss, LossConfig};
use crate::optim::{apply_schedule, sgd_step, OptimState};
use crate::rng::Rng;

/// Source of the `wall_seconds` column.
pub trait Clock {
    /// Seconds since the run started.
    fn elapsed(&self) -> f64;
}

pub struct SystemClock(Instant);

impl SystemClock {
    pub fn start() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn elapsed(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Always reports zero, making metric files reproducible byte for byte.
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn elapsed(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    pub train_nll: f64,
    pub train_entropy: f64,
    /// Percent, from predictions made during the training pass.
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "epoch,train_loss,train_nll,train_entropy,train_acc,test_acc,lr,wall_seconds";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_nll,
            self.train_entropy,
            self.train_acc,
            self.test_acc,
            self.lr,
            self.wall_seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
}

impl Evaluation {
    pub fn correct(&self) -> usize {
        self.per_class.iter().map(|c| c.0).sum()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(|c| c.1).sum()
    }

    /// Overall accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct() as f64 / self.total().max(1) as f64
    }
}

pub fn evaluate(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let k = model.config().num_classes;
    dataset.validate_labels(k)?;
    let mut per_class = vec![(0, 0); k];
    for batch in batches(dataset, batch_size, None)? {
        let preds = model.predict(&batch.inputs)?;
        for (p, &l) in preds.iter().zip(&batch.labels) {
            per_class[l].1 += 1;
            if *p == l {
                per_class[l].0 += 1;
            }
        }
    }
    Ok(Evaluation { per_class })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub nll: f64,
    pub entropy: f64,
    pub accuracy: f64,
}

/// Everything that evolves during training. Its state after any epoch is
/// exactly what a checkpoint stores.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optim: OptimState<f32>,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: u64,
    pub settings: TrainSettings,
}

impl Trainer {
    pub fn from_checkpoint(ckpt: Checkpoint, settings: TrainSettings) -> Self {
        Trainer {
            model: ckpt.model,
            optim: ckpt.optim,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
            settings,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optim: self.optim.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
        }
    }

    /// One pass over `train`: schedule, shuffle, augment, loss, backward, step.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochStats> {
        let epoch_no = self.epoch + 1;
        apply_schedule(&mut self.optim, self.epoch as u32);
        let shuffle_seed = self.rng.next_u64();
        let mut aug_rng = Rng::seed_from_u64(self.rng.next_u64());

        let (mut loss, mut nll, mut ent) = (0.0f64, 0.0f64, 0.0f64);
        let mut correct = 0usize;
        let s = &self.settings;
        for (step, batch) in batches(train, s.batch_size, Some(shuffle_seed))?.enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch: epoch_no, step },
                other => other,
            };
            let batch = if batch.kind == SampleKind::Image && !s.augment.is_identity() {
                augment(&batch, &s.augment, &mut aug_rng)?
            } else {
                batch
            };
            let n = batch.len() as f64;
            let mut tape = Tape::new();
            let x = tape.input(batch.inputs);
            let logits = self.model.forward(&mut tape, x).map_err(diverged)?;
            let terms = max_entropy_loss(&mut tape, logits, &batch.labels, &s.loss).map_err(diverged)?;
            let total = tape.value(terms.total).item()?;
            if !total.is_finite() {
                return Err(Error::Diverged { epoch: epoch_no, step });
            }
            loss += total as f64 * n;
            nll += tape.value(terms.nll).item()? as f64 * n;
            ent += tape.value(terms.entropy).item()? as f64 * n;
            correct += argmax_rows(tape.value(logits))
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            tape.backward(terms.total, &mut self.model.params).map_err(diverged)?;
            sgd_step(&mut self.model.params, &mut self.optim)?;
        }
        self.epoch += 1;
        let n = train.len() as f64;
        Ok(EpochStats {
            loss: loss / n,
            nll: nll / n,
            entropy: ent / n,
            accuracy: 100.0 * correct as f64 / n,
        })
    }

    /// Trains until `epochs` epochs are complete, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        epochs: u64,
        clock: &dyn Clock,
        mut on_epoch: impl FnMut(&Trainer, &MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.epoch < epochs {
            let stats = self.train_epoch(train)?;
            let test_acc = evaluate(&self.model, test, self.settings.batch_size)?.accuracy();
            let row = MetricsRow {
                epoch: self.epoch,
                train_loss: stats.loss,
                train_nll: stats.nll,
                train_entropy: stats.entropy,
                train_acc: stats.accuracy,
                test_acc,
                lr: self.optim.lr as f64,
                wall_seconds: clock.elapsed(),
            };
            on_epoch(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Loads a dataset in the configured format, resized to the model input for images.
pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    match cfg.data_format {
        DataFormat::Ppm => load_image_dir(path, cfg.input_size),
        DataFormat::Lcaf => load_feature_file(path),
    }
}

/// A fresh trainer for `cfg` sized to the given training set.
pub fn new_trainer(cfg: &RunConfig, train: &Dataset) -> Result<Trainer> {
    let model_cfg = cfg.model_config(train.sample_shape, train.num_classes());
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut model: Model<f32> = build_model(&model_cfg, &mut rng)?;
    model.freeze_backbone(cfg.freeze_backbone);
    let optim = OptimState::new(&model.params, cfg.lr, cfg.momentum)?
        .with_weight_decay(cfg.weight_decay)?
        .with_schedule(vec![(cfg.step_epoch(), cfg.lr_step_factor)])?;
    Ok(Trainer {
        model,
        optim,
        rng,
        epoch: 0,
        settings: settings(cfg),
    })
}

fn settings(cfg: &RunConfig) -> TrainSettings {
    TrainSettings {
        batch_size: cfg.batch_size,
        loss: cfg.loss(),
        augment: cfg.augment,
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Full training run from a config: loads data, trains, appends one CSV row
/// and rewrites the checkpoint after every epoch. With `resume`, training
/// continues from the checkpoint's state and the log is appended to.
pub fn run_training(cfg: &RunConfig, resume: Option<&Path>, clock: &dyn Clock) -> Result<Trainer> {
    let train = load_dataset(cfg, &cfg.data_train)?;
    let test = load_dataset(cfg, &cfg.data_test)?;
    if train.sample_shape != test.sample_shape {
        return Err(Error::Data(format!(
            "train samples are {:?} but test samples are {:?}",
            train.sample_shape, test.sample_shape
        )));
    }
    if cfg.data_format == DataFormat::Ppm && train.class_names != test.class_names {
        return Err(Error::Data(format!(
            "train classes {:?} differ from test classes {:?}",
            train.class_names, test.class_names
        )));
    }
    test.validate_labels(train.num_classes())?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let want = cfg.model_config(train.sample_shape, train.num_classes());
            if ckpt.model.config() != &want {
                return Err(Error::Data(format!(
                    "checkpoint model {:?} does not match the configured model {:?}",
                    ckpt.model.config(),
                    want
                )));
            }
            Trainer::from_checkpoint(ckpt, settings(cfg))
        }
        None => new_trainer(cfg, &train)?,
    };

    if resume.is_none() || !cfg.log_csv.exists() {
        fs::write(&cfg.log_csv, format!("{}\n", MetricsRow::HEADER))?;
    }
    trainer.run(&train, &test, cfg.epochs as u64, clock, |t, row| {
        append_line(&cfg.log_csv, &row.to_csv())?;
        save_checkpoint(&t.checkpoint(), &cfg.ckpt_out)
    })?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, HeadKind, ModelConfig};
    use crate::tensor::Tensor;

    fn feature_data(n: usize) -> Dataset {
        let mut rng = Rng::seed_from_u64(9);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = labels
            .iter()
            .flat_map(|&l| {
                let shift = if l == 0 { -1.0 } else { 1.0 };
                (0..2 * 3 * 3).map(move |i| if i < 9 { shift } else { -shift })
            })
            .map(|v: f64| (v + 0.1 * rng.normal()) as f32)
            .collect();
        Dataset {
            kind: SampleKind::Features,
            sample_shape: [2, 3, 3],
            data,
            labels,
            class_names: vec!["0".into(), "1".into()],
        }
    }

    fn trainer(lambda: f64) -> Trainer {
        let cfg = ModelConfig::new(BackboneConfig::external(2, 3, 3), HeadKind::Lca, 2);
        let mut rng = Rng::seed_from_u64(1);
        let model = build_model(&cfg, &mut rng).unwrap();
        let optim = OptimState::new(&model.params, 0.05, 0.9).unwrap();
        Trainer {
            model,
            optim,
            rng,
            epoch: 0,
            settings: TrainSettings {
                batch_size: 4,
                loss: LossConfig { lambda_entropy: lambda },
                augment: AugmentConfig::default(),
            },
        }
    }

    #[test]
    fn learns_separable_features() {
        let ds = feature_data(16);
        let mut t = trainer(0.1);
        let rows = t.run(&ds, &ds, 15, &FrozenClock, |_, _| Ok(())).unwrap();
        assert_eq!(rows.len(), 15);
        assert!(rows[14].train_loss < rows[0].train_loss);
        assert_eq!(rows[14].test_acc, 100.0);
        for r in &rows {
            assert!((r.train_loss - (r.train_nll - 0.1 * r.train_entropy)).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_inputs_report_divergence() {
        let mut ds = feature_data(8);
        ds.data[3] = f32::NAN;
        let err = trainer(0.0).train_epoch(&ds).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn zero_classifier_predicts_class_zero() {
        let ds = feature_data(8);
        let mut t = trainer(0.0);
        let (w, b) = t.model.classifier_ids();
        t.model.params.get_mut(w).value.fill(0.0);
        t.model.params.get_mut(b).value = Tensor::zeros(&[2]);
        let ev = evaluate(&t.model, &ds, 3).unwrap();
        assert_eq!(ev.per_class, vec![(4, 4), (0, 4)]);
        assert_eq!(ev.accuracy(), 50.0);
    }

    #[test]
    fn csv_row_matches_header_width() {
        let row = MetricsRow {
            epoch: 1,
            train_loss: 0.5,
            train_nll: 0.6,
            train_entropy: 1.0,
            train_acc: 50.0,
            test_acc: 25.0,
            lr: 0.01,
            wall_seconds: 0.0,
        };
        assert_eq!(row.to_csv().split(',').count(), MetricsRow::HEADER.split(',').count());
    }
}
