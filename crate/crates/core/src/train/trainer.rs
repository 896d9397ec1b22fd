use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{HistoryMode, TrainConfig};
use crate::data::{clip_sample, CorpusSplits, DialogueSample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{Branch, DropoutGranularity, Fusion, Model};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{Graph, Scalar};

/// How often each fusion branch fired during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub text: u64,
    pub image: u64,
    pub mean: u64,
}

impl BranchCounts {
    pub fn record(&mut self, b: Branch) {
        match b {
            Branch::Text => self.text += 1,
            Branch::Image => self.image += 1,
            Branch::Mean => self.mean += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.text + self.image + self.mean
    }

    fn merge(&mut self, other: BranchCounts) {
        self.text += other.text;
        self.image += other.image;
        self.mean += other.mean;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean per-token negative log-likelihood of the batch.
    pub loss: f64,
    pub tokens: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub nist: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochLog>,
    /// Every optimiser step's loss, in order.
    pub step_losses: Vec<f64>,
    pub best_valid_bleu4: Option<f64>,
    pub reached_target: bool,
    /// Set when training stopped on a non-finite loss or gradient.
    pub halted: Option<String>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Owns a model, its optimiser and the training RNG.
pub struct Trainer<T: Scalar = f64> {
    config: TrainConfig,
    model: Model<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    branches: BranchCounts,
    best_bleu4: Option<f64>,
    best_params: Option<ParamStore<T>>,
    vocab: Option<Vocabulary>,
}

/// Stream of the training RNG; keeps it apart from weight initialisation.
const TRAIN_STREAM: u64 = 1;

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.precision.bits() as usize != T::BYTES * 8 {
            return Err(Error::config(format!(
                "config asks for {}-bit precision but the trainer is {}-bit",
                config.precision.bits(),
                T::BYTES * 8
            )));
        }
        let mut model = Model::new(config.model.clone(), config.seed)?;
        model.set_history_trainable(config.history_mode == HistoryMode::Trained);
        let adam = Adam::new(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
            step: 0,
            epoch: 0,
            branches: BranchCounts::default(),
            best_bleu4: None,
            best_params: None,
            vocab: None,
        })
    }

    /// Attaches a vocabulary so checkpoints are self-describing.
    pub fn with_vocab(mut self, vocab: Vocabulary) -> Self {
        self.vocab = Some(vocab);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn vocab(&self) -> Option<&Vocabulary> {
        self.vocab.as_ref()
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.adam
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn branch_counts(&self) -> BranchCounts {
        self.branches
    }

    pub fn best_valid_bleu4(&self) -> Option<f64> {
        self.best_bleu4
    }

    fn fusions(&mut self, n: usize) -> Vec<Fusion> {
        let c = &self.config.model;
        match c.dropout_granularity {
            DropoutGranularity::Step => {
                let f = Fusion::sample(c.p_net, c.n_layers, &mut self.rng);
                vec![f; n]
            }
            DropoutGranularity::Example => (0..n)
                .map(|_| Fusion::sample(c.p_net, c.n_layers, &mut self.rng))
                .collect(),
        }
    }

    /// Loss and parameter gradients of one batch without updating anything.
    /// The loss is the mean token negative log-likelihood; gradients are of
    /// that mean.
    pub fn batch_gradients(&self, batch: &[&DialogueSample], fusions: &[Fusion]) -> Result<(StepStats, ParamGrads<T>, BranchCounts)> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        if fusions.len() != batch.len() {
            return Err(Error::contract("one fusion plan per sample required"));
        }
        let c = self.model.config();
        let model = &self.model;
        let jobs: Vec<(&DialogueSample, &Fusion)> = batch.iter().copied().zip(fusions).collect();
        let per_sample = self.config.exec.map(&jobs, |&(sample, fusion)| {
            let s = clip_sample(sample, c.max_len, c.max_images)?;
            let views: Vec<_> = s.utterances().map(|u| u.view()).collect();
            let mut g = Graph::with_params(model.params());
            let (loss, enc) = model.response_nll_traced(&mut g, &views, &s.response, fusion)?;
            let mut counts = BranchCounts::default();
            if matches!(fusion, Fusion::Training { .. }) {
                enc.branches().for_each(|b| counts.record(b));
            }
            let value = g.scalar_value(loss).as_f64();
            let grads = g.backward(loss)?.into_param_grads();
            Ok::<_, Error>((value, s.response.len(), grads, counts))
        });

        // Ordered reduction keeps the sum independent of thread scheduling.
        let mut total = ParamGrads::empty(self.model.params().len());
        let (mut loss, mut tokens) = (0.0, 0usize);
        let mut counts = BranchCounts::default();
        for r in per_sample {
            let (l, n, g, b) = r?;
            loss += l;
            tokens += n;
            total.add_assign(&g);
            counts.merge(b);
        }
        total.scale(T::cst(1.0 / tokens as f64));
        Ok((
            StepStats {
                loss: loss / tokens as f64,
                tokens,
            },
            total,
            counts,
        ))
    }

    /// One optimiser step on `batch`. Draws fresh dropout selections. On a
    /// non-finite loss or gradient nothing is updated and the error is
    /// returned.
    pub fn train_step(&mut self, batch: &[&DialogueSample]) -> Result<StepStats> {
        let fusions = self.fusions(batch.len());
        let (stats, grads, counts) = self.batch_gradients(batch, &fusions)?;
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let lr = self.config.lr_at(self.step + 1);
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.step += 1;
        self.branches.merge(counts);
        Ok(stats)
    }

    /// Greedy responses for every sample, in order.
    pub fn generate(&self, samples: &[DialogueSample]) -> Result<Vec<Vec<u32>>> {
        let c = self.model.config();
        self.config
            .exec
            .map(samples, |s| self.model.respond(&clip_sample(s, c.max_len, c.max_images)?))
            .into_iter()
            .collect()
    }

    /// Greedy-decodes every sample and scores against the references.
    pub fn evaluate(&self, samples: &[DialogueSample]) -> Result<EvalReport> {
        let hyps = self.generate(samples)?;
        let refs: Vec<Vec<u32>> = samples.iter().map(|s| s.response.clone()).collect();
        EvalReport::compute(&hyps, &refs)
    }

    /// Runs the remaining epochs. Validation happens after each epoch; the
    /// best parameters by validation BLEU-4 are kept in memory and, with an
    /// output directory, written to `best.ckpt` alongside `last.ckpt` and
    /// the metrics log.
    pub fn fit(&mut self, splits: &CorpusSplits, out_dir: Option<&Path>) -> Result<FitReport> {
        if splits.train.is_empty() {
            return Err(Error::data("training split is empty"));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        let valid = match self.config.eval_samples {
            Some(n) => &splits.valid[..n.min(splits.valid.len())],
            None => &splits.valid[..],
        };
        let mut report = FitReport {
            best_valid_bleu4: self.best_bleu4,
            ..FitReport::default()
        };
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        while self.epoch < self.config.epochs {
            order.sort_unstable();
            order.shuffle(&mut self.rng);
            let (mut loss_sum, mut steps) = (0.0, 0usize);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&DialogueSample> = chunk.iter().map(|&i| &splits.train[i]).collect();
                match self.train_step(&batch) {
                    Ok(stats) => {
                        debug!("step {} loss {:.5}", self.step, stats.loss);
                        report.step_losses.push(stats.loss);
                        loss_sum += stats.loss;
                        steps += 1;
                    }
                    Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient(_))) => {
                        warn!("halting at step {}: {e}", self.step);
                        if let Some(dir) = out_dir {
                            self.save(dir.join(LAST_CHECKPOINT))?;
                        }
                        report.halted = Some(e.to_string());
                        return Ok(report);
                    }
                    Err(e) => return Err(e),
                }
            }
            self.epoch += 1;
            let loss = loss_sum / steps.max(1) as f64;
            let eval = if valid.is_empty() {
                None
            } else {
                Some(self.evaluate(valid)?)
            };
            let (bleu, nist) = eval.as_ref().map_or(([0.0; 4], 0.0), |r| (r.bleu, r.nist));
            let line = EpochLog {
                epoch: self.epoch,
                step: self.step,
                loss,
                bleu1: bleu[0],
                bleu2: bleu[1],
                bleu3: bleu[2],
                bleu4: bleu[3],
                nist,
            };
            info!(
                "epoch {} step {} loss {:.4} valid BLEU-4 {:.2} NIST {:.4}",
                line.epoch, line.step, line.loss, line.bleu4, line.nist
            );
            if let Some(dir) = out_dir {
                let mut f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
                writeln!(f, "{}", serde_json::to_string(&line)?)?;
            }
            report.epochs.push(line);

            if let Some(r) = &eval {
                if self.best_bleu4.is_none_or(|b| r.bleu4() > b) {
                    self.best_bleu4 = Some(r.bleu4());
                    self.best_params = Some(self.model.params().clone());
                    if let Some(dir) = out_dir {
                        self.save(dir.join(BEST_CHECKPOINT))?;
                    }
                }
            }
            report.best_valid_bleu4 = self.best_bleu4;
            if let Some(dir) = out_dir {
                self.save(dir.join(LAST_CHECKPOINT))?;
            }
            if let (Some(target), Some(r)) = (self.config.target_bleu4, &eval) {
                if r.bleu4() >= target {
                    info!("validation BLEU-4 {:.2} reached target {target}", r.bleu4());
                    report.reached_target = true;
                    break;
                }
            }
        }
        Ok(report)
    }

    /// Swaps in the best parameters seen by [`Trainer::fit`], if any.
    pub fn restore_best(&mut self) -> bool {
        match self.best_params.take() {
            Some(p) => {
                *self.model.params_mut() = p;
                true
            }
            None => false,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let params = self.model.params();
        let mut tensors: Vec<(String, crate::Tensor<T>)> =
            params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for id in params.ids() {
            let (m, v) = self.adam.moments(id.index());
            let shape = params.get(id).shape().to_vec();
            let name = params.name(id);
            tensors.push((format!("adam.m/{name}"), crate::Tensor::new(shape.clone(), m.to_vec()).expect("moment shape")));
            tensors.push((format!("adam.v/{name}"), crate::Tensor::new(shape, v.to_vec()).expect("moment shape")));
        }
        Checkpoint {
            meta: CheckpointMeta {
                config: self.config.clone(),
                step: self.step,
                epoch: self.epoch,
                adam_t: self.adam.t(),
                best_valid_bleu4: self.best_bleu4,
                branches: self.branches,
                vocab: self.vocab.clone(),
            },
            rng: self.rng.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let Checkpoint { meta, rng, tensors } = ckpt;
        let mut trainer = Trainer::new(meta.config)?;
        let n = trainer.model.params().len();
        if tensors.len() != 3 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                3 * n,
                tensors.len()
            )));
        }
        let mut tensors = tensors.into_iter();
        let named: Vec<(String, crate::Tensor<T>)> = tensors.by_ref().take(n).collect();
        let mut model = Model::from_named(trainer.model.config().clone(), &named)?;
        model.set_history_trainable(trainer.config.history_mode == HistoryMode::Trained);
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (id, pair) in model.params().ids().zip(tensors.collect::<Vec<_>>().chunks(2)) {
            let name = model.params().name(id);
            let [(mn, mt), (vn, vt)] = pair else { unreachable!("chunks of two") };
            if *mn != format!("adam.m/{name}") || *vn != format!("adam.v/{name}") {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` missing or out of order")));
            }
            m.push(mt.data().to_vec());
            v.push(vt.data().to_vec());
        }
        trainer.adam = Adam::new(model.params());
        trainer.adam.restore(meta.adam_t, m, v)?;
        trainer.model = model;
        trainer.rng = rng;
        trainer.step = meta.step;
        trainer.epoch = meta.epoch;
        trainer.branches = meta.branches;
        trainer.best_bleu4 = meta.best_valid_bleu4;
        trainer.vocab = meta.vocab;
        Ok(trainer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
