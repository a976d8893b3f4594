//! Mini-batch Adam training with periodic leave-one-out evaluation,
//! early stopping on nDCG@10, and resumable checkpoints.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{build_test_candidates, sample_train_negatives, CandidateList, DataError, SplitDataset};
use crate::eval::{evaluate_all, EvalError, Metrics};
use crate::model::{Model, ModelConfig, ModelError, ModelKind, Noise};
use crate::ndcore::rng::{self, tag};
use crate::ndcore::{AdamConfig, AdamState, NdError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "gerec-checkpoint/1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; try a smaller learning rate (currently {learning_rate})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training split has no interactions")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub negative_ratio: usize,
    pub test_negatives: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 30,
            batch_size: 256,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            negative_ratio: 4,
            test_negatives: 99,
            seed: 0,
            eval_seed: 0,
            eval_every: 1,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("negative_ratio", self.negative_ratio),
            ("test_negatives", self.test_negatives),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be ≥ 1")));
            }
        }
        let rates = [
            ("learning_rate", self.learning_rate, self.learning_rate > 0.0),
            ("beta1", self.beta1, (0.0..1.0).contains(&self.beta1)),
            ("beta2", self.beta2, (0.0..1.0).contains(&self.beta2)),
            ("epsilon", self.epsilon, self.epsilon > 0.0),
        ];
        for (name, v, ok) in rates {
            if !(ok && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} = {v} is out of range")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Hex SHA-256 over the model config, training config and dataset hash.
pub fn config_fingerprint(model: &ModelConfig, train: &TrainConfig, data: Option<&str>) -> String {
    let doc = serde_json::json!({ "model": model, "train": train, "data": data });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

/// Deterministic per-epoch history, carried inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean loss per training instance (per triplet for MF-BPR).
    pub loss: f64,
    pub instances: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub history: Vec<EpochSummary>,
    pub best_epoch: Option<usize>,
    pub best_ndcg10: Option<f64>,
    pub evals_since_best: usize,
    pub stopped_early: bool,
}

/// One report line per epoch, including wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub summary: EpochSummary,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metrics: Option<Metrics>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path} is not valid: {reason}")]
    Parse { path: String, reason: String },
    #[error("checkpoint {path} has format `{found}`, expected `{CHECKPOINT_FORMAT}`")]
    Version { path: String, found: String },
}

/// Everything needed to score with, or resume, a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_fingerprint: Option<String>,
    /// Epochs completed when the parameters were captured.
    pub epoch: usize,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamState,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn to_model(&self) -> Result<Model, ModelError> {
        let named = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        Model::from_parts(self.model.clone(), named)
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.model, &self.train, self.data_fingerprint.as_deref())
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let text = serde_json::to_string(self).map_err(|e| CheckpointError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: shown.clone(),
            source,
        })?;
        let parse = |reason: String| CheckpointError::Parse {
            path: shown.clone(),
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => {
                return Err(CheckpointError::Version {
                    path: shown,
                    found: other.to_string(),
                })
            }
            None => return Err(parse("missing `format` tag".into())),
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
        ck.to_model().map_err(|e| parse(e.to_string()))?;
        let params: Vec<Tensor> = ck.params.iter().map(|p| p.tensor.clone()).collect();
        ck.optimizer
            .check_shapes(&params)
            .map_err(|e| parse(e.to_string()))?;
        Ok(ck)
    }
}

/// Training state: model, optimizer, progress and the best snapshot so far.
pub struct Trainer {
    model: Model,
    optimizer: AdamState,
    config: TrainConfig,
    data_fingerprint: Option<String>,
    epoch: usize,
    progress: Progress,
    best: Option<Model>,
    threads: usize,
}

/// What `Trainer::run` reports after each epoch.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub trainer: &'a Trainer,
    pub improved: bool,
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        data_fingerprint: Option<String>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::init(model_config, config.seed)?;
        let optimizer = AdamState::new(model.params(), config.adam());
        Ok(Self {
            model,
            optimizer,
            config,
            data_fingerprint,
            epoch: 0,
            progress: Progress::default(),
            best: None,
            threads: 1,
        })
    }

    /// Restores from the latest checkpoint and, when one exists, the best.
    /// `epochs` may be raised to extend a finished run.
    pub fn resume(last: &Checkpoint, best: Option<&Checkpoint>) -> Result<Self, TrainError> {
        last.train.validate()?;
        let model = last.to_model()?;
        let best = match (best, last.progress.best_epoch) {
            (Some(b), Some(e)) if b.epoch == e => Some(b.to_model()?),
            (_, Some(e)) if e == last.epoch => Some(model.clone()),
            (_, Some(e)) => {
                return Err(TrainError::Config(format!(
                    "best checkpoint for epoch {e} is required to resume"
                )))
            }
            (_, None) => None,
        };
        Ok(Self {
            model,
            optimizer: last.optimizer.clone(),
            config: last.train.clone(),
            data_fingerprint: last.data_fingerprint.clone(),
            epoch: last.epoch,
            progress: last.progress.clone(),
            best,
            threads: 1,
        })
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
        if self.epoch < epochs {
            self.progress.stopped_early = false;
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn best_model(&self) -> &Model {
        self.best.as_ref().unwrap_or(&self.model)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.progress.stopped_early
    }

    fn snapshot(&self, model: &Model, epoch: usize) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: model.config().clone(),
            train: self.config.clone(),
            data_fingerprint: self.data_fingerprint.clone(),
            epoch,
            params: model
                .names()
                .iter()
                .zip(model.params())
                .map(|(name, tensor)| NamedTensor {
                    name: name.clone(),
                    tensor: tensor.clone(),
                })
                .collect(),
            optimizer: self.optimizer.clone(),
            progress: self.progress.clone(),
        }
    }

    /// Current state, suitable for resuming.
    pub fn checkpoint(&self) -> Checkpoint {
        self.snapshot(&self.model, self.epoch)
    }

    /// Parameters with the best nDCG@10 so far (the latest if never evaluated).
    pub fn best_checkpoint(&self) -> Checkpoint {
        match (&self.best, self.progress.best_epoch) {
            (Some(m), Some(e)) => self.snapshot(m, e),
            _ => self.checkpoint(),
        }
    }

    /// One pass over freshly sampled negatives. Returns the mean loss.
    pub fn train_epoch(&mut self, split: &SplitDataset) -> Result<(f64, usize), TrainError> {
        if split.train.is_empty() {
            return Err(TrainError::EmptySplit);
        }
        let epoch = self.epoch as u64;
        let seed = self.config.seed;
        let samples = sample_train_negatives(split, self.config.negative_ratio, seed, epoch)?;
        let mut noise_rng = rng::stream(seed, &[tag::NOISE, epoch]);
        let mut total = 0.0;
        let mut count = 0;
        let mut step = |n: usize, b: usize, result: Result<(f64, Vec<Tensor>), ModelError>,
                        model: &mut Model,
                        optimizer: &mut AdamState|
         -> Result<(), TrainError> {
            let (loss, grads) = result?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch: self.epoch + 1,
                    batch: b + 1,
                    learning_rate: self.config.learning_rate,
                });
            }
            optimizer.update(model.params_mut(), &grads)?;
            total += loss;
            count += n;
            Ok(())
        };
        if self.model.config().kind == ModelKind::MfBpr {
            for (b, batch) in samples.triplet_batches(self.config.batch_size).iter().enumerate() {
                let result = self.model.bpr_loss(batch);
                step(batch.len(), b, result, &mut self.model, &mut self.optimizer)?;
            }
        } else {
            for (b, batch) in samples.pointwise_batches(self.config.batch_size).iter().enumerate() {
                let noise = self.model.draw_noise(&mut noise_rng, batch.len());
                let result = self.model.pointwise_loss(batch, &noise);
                step(batch.len(), b, result, &mut self.model, &mut self.optimizer)?;
            }
        }
        self.epoch += 1;
        Ok((total / count.max(1) as f64, count))
    }

    /// Trains until `epochs` or early stopping. `on_epoch` sees every epoch
    /// (e.g. to persist checkpoints and report lines).
    pub fn run(
        &mut self,
        split: &SplitDataset,
        candidates: &[CandidateList],
        mut on_epoch: impl FnMut(EpochEvent<'_>) -> Result<(), TrainError>,
    ) -> Result<TrainReport, TrainError> {
        let mut records = Vec::new();
        while !self.is_finished() {
            let start = Instant::now();
            let (loss, instances) = self.train_epoch(split)?;
            let epoch = self.epoch;
            let due = epoch.is_multiple_of(self.config.eval_every) || epoch == self.config.epochs;
            let metrics = if due {
                Some(evaluate_all(&self.model, candidates, self.config.eval_seed, self.threads)?.0)
            } else {
                None
            };
            let mut improved = false;
            if let Some(m) = metrics {
                // strict improvement keeps the earliest epoch on ties
                if self.progress.best_ndcg10.is_none_or(|b| m.ndcg10 > b) {
                    self.progress.best_ndcg10 = Some(m.ndcg10);
                    self.progress.best_epoch = Some(epoch);
                    self.progress.evals_since_best = 0;
                    self.best = Some(self.model.clone());
                    improved = true;
                } else {
                    self.progress.evals_since_best += 1;
                    if self.progress.evals_since_best >= self.config.patience {
                        self.progress.stopped_early = true;
                    }
                }
            }
            let summary = EpochSummary {
                epoch,
                loss,
                instances,
                metrics,
            };
            self.progress.history.push(summary.clone());
            let record = EpochRecord {
                summary,
                seconds: start.elapsed().as_secs_f64(),
            };
            info!(
                "epoch {epoch}: loss {loss:.5}{} ({:.1}s)",
                metrics.map_or(String::new(), |m| format!(
                    ", HR@10 {:.4}, nDCG@10 {:.4}",
                    m.hr10, m.ndcg10
                )),
                record.seconds
            );
            on_epoch(EpochEvent {
                record: &record,
                trainer: self,
                improved,
            })?;
            records.push(record);
        }
        Ok(self.report(records))
    }

    fn report(&self, epochs: Vec<EpochRecord>) -> TrainReport {
        let best_metrics = self.progress.best_epoch.and_then(|e| {
            self.progress
                .history
                .iter()
                .find(|h| h.epoch == e)
                .and_then(|h| h.metrics)
        });
        TrainReport {
            epochs,
            best_epoch: self.progress.best_epoch,
            best_metrics,
            stopped_early: self.progress.stopped_early,
        }
    }
}

/// Trains from scratch and returns the best checkpoint with the report.
pub fn train(
    model_config: ModelConfig,
    split: &SplitDataset,
    config: TrainConfig,
    threads: usize,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    let candidates = build_test_candidates(split, config.test_negatives, config.eval_seed);
    let mut trainer = Trainer::new(model_config, config, None)?;
    trainer.set_threads(threads);
    let report = trainer.run(split, &candidates, |_| Ok(()))?;
    Ok((trainer.best_checkpoint(), report))
}

/// Per-instance BCE of `model` over labeled pairs under fixed noise.
pub fn mean_bce(model: &Model, batch: &crate::data::TrainBatch, noise: &Noise) -> Result<f64, ModelError> {
    Ok(model.pointwise_loss(batch, noise)?.0 / batch.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split, parse_ratings_str, RatingFormat};

    fn toy_split() -> SplitDataset {
        let mut text = String::new();
        for u in 0..12 {
            for j in 0..6 {
                let item = (u * 5 + j * 3) % 25;
                text.push_str(&format!("{u}\t{item}\t1\t{j}\n"));
            }
        }
        leave_one_out_split(&parse_ratings_str(&text, RatingFormat::Ml100k).unwrap())
    }

    fn small(kind: ModelKind, split: &SplitDataset) -> ModelConfig {
        ModelConfig::new(kind, split.num_users, split.num_items).with_sizes(4, 2, 3)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            seed: 4,
            eval_seed: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation_rejects_zero_counts() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let split = toy_split();
        for kind in [ModelKind::Gerec, ModelKind::Mog, ModelKind::MfBpr] {
            let (a, ra) = train(small(kind, &split), &split, cfg(3), 1).unwrap();
            let (b, rb) = train(small(kind, &split), &split, cfg(3), 2).unwrap();
            assert_eq!(a, b, "{kind}");
            let losses = |r: &TrainReport| r.epochs.iter().map(|e| e.summary.loss.to_bits()).collect::<Vec<_>>();
            assert_eq!(losses(&ra), losses(&rb));
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let split = toy_split();
        let cands = build_test_candidates(&split, 99, 2);
        let mut full = Trainer::new(small(ModelKind::Gerec, &split), cfg(4), None).unwrap();
        full.run(&split, &cands, |_| Ok(())).unwrap();

        let mut first = Trainer::new(small(ModelKind::Gerec, &split), cfg(2), None).unwrap();
        first.run(&split, &cands, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (lp, bp) = (dir.path().join("last.json"), dir.path().join("best.json"));
        first.checkpoint().save(&lp).unwrap();
        first.best_checkpoint().save(&bp).unwrap();
        let mut resumed = Trainer::resume(
            &Checkpoint::load(&lp).unwrap(),
            Some(&Checkpoint::load(&bp).unwrap()),
        )
        .unwrap();
        resumed.set_epochs(4);
        resumed.run(&split, &cands, |_| Ok(())).unwrap();
        assert_eq!(resumed.model(), full.model());
        assert_eq!(resumed.progress(), full.progress());
        assert_eq!(resumed.best_checkpoint(), full.best_checkpoint());
    }

    #[test]
    fn flat_metrics_stop_after_patience() {
        let split = toy_split();
        let cands = build_test_candidates(&split, 99, 2);
        let config = TrainConfig {
            learning_rate: 1e-300,
            patience: 3,
            epochs: 10,
            ..cfg(10)
        };
        let mut t = Trainer::new(small(ModelKind::MfBpr, &split), config, None).unwrap();
        let report = t.run(&split, &cands, |_| Ok(())).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 4);
        assert_eq!(report.best_epoch, Some(1));
    }

    #[test]
    fn checkpoint_round_trip_and_failures() {
        let split = toy_split();
        let t = Trainer::new(small(ModelKind::Gerec, &split), cfg(1), Some("abc".into())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = t.checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), *t.model());

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace(CHECKPOINT_FORMAT, "gerec-checkpoint/0")).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Version { .. })));
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Parse { .. })));
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.json")),
            Err(CheckpointError::Io { .. })
        ));
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let split = toy_split();
        let config = TrainConfig {
            learning_rate: 1e300,
            ..cfg(5)
        };
        let mut t = Trainer::new(small(ModelKind::MfBpr, &split), config, None).unwrap();
        let cands = build_test_candidates(&split, 99, 2);
        let err = t.run(&split, &cands, |_| Ok(())).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }
}
