//! Training loop, validation protocol and run sweeps.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig, Schedule};
use super::corrupt::corrupt;
use super::model::{AttnMode, ToyModel, ToyModelConfig};
use super::objective::{ar_loss, batch_loss, diffusion_loss, Batch};
use crate::error::{Error, Result};
use crate::frontier::fmt9;
use crate::runstore::{Family, RunRecord};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Prefix of the corpus used for training, rounded down to whole sequences.
    pub unique_tokens: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Corruption draws per validation sequence for the diffusion loss.
    pub eval_mask_samples: usize,
    /// Tokens held out from the end of the corpus for validation.
    pub val_tokens: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unique_tokens: 2048,
            epochs: 1,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            eval_mask_samples: 8,
            val_tokens: 4096,
            seed: 0,
            eval_seed: 0x5eed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unique_tokens == 0 || self.epochs == 0 || self.batch_size == 0 || self.eval_mask_samples == 0 || self.val_tokens == 0 {
            return Err(Error::Domain(format!("training counts must be positive: {self:?}")));
        }
        self.optimizer.validate()
    }
}

/// Validation and training loss after one epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tokens_seen: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub record: RunRecord,
    pub metrics: Vec<EpochMetrics>,
    pub model: ToyModel<T>,
}

fn chunk(tokens: &[u32], seq_len: usize) -> Vec<Vec<u32>> {
    tokens.chunks_exact(seq_len).map(<[u32]>::to_vec).collect()
}

/// Diffusion loss averaged over `k` corruption draws of every sequence,
/// with draws fixed by `seed`.
pub fn eval_diffusion_nll<T: Scalar>(model: &ToyModel<T>, seqs: &[Vec<u32>], k: usize, seed: u64) -> Result<T> {
    if k == 0 {
        return Err(Error::Domain("need at least one mask sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = T::zero();
    for _ in 0..k {
        let c = corrupt(seqs, model.cfg.mask_id(), &mut rng)?;
        total = total + diffusion_loss(model, &c, None)?;
    }
    Ok(total / T::of_usize(k))
}

fn evaluate<T: Scalar>(model: &ToyModel<T>, seqs: &[Vec<u32>], cfg: &TrainConfig) -> Result<f64> {
    let loss = match model.cfg.attn_mode {
        AttnMode::Causal => ar_loss(model, seqs, None)?,
        AttnMode::Bidirectional => eval_diffusion_nll(model, seqs, cfg.eval_mask_samples, cfg.eval_seed)?,
    };
    Ok(loss.to_f64_lossy())
}

/// Trains on the first `unique_tokens` of `corpus` for `epochs` passes and
/// validates on its last `val_tokens` after every epoch. Causal models use
/// the AR objective, bidirectional ones the diffusion objective.
pub fn train<T: Scalar>(model_cfg: &ToyModelConfig, cfg: &TrainConfig, corpus: &[u32]) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let l = model_cfg.seq_len;
    if corpus.len() < cfg.unique_tokens + cfg.val_tokens {
        return Err(Error::Data(format!(
            "corpus has {} tokens; need {} for training plus {} for validation",
            corpus.len(),
            cfg.unique_tokens,
            cfg.val_tokens
        )));
    }
    if let Some(t) = corpus.iter().find(|&&t| t as usize >= model_cfg.vocab) {
        return Err(Error::Data(format!("corpus token {t} outside vocabulary of {}", model_cfg.vocab)));
    }
    let train_seqs = chunk(&corpus[..cfg.unique_tokens], l);
    let val_seqs = chunk(&corpus[corpus.len() - cfg.val_tokens..], l);
    if train_seqs.is_empty() || val_seqs.is_empty() {
        return Err(Error::Data(format!("training and validation splits must each hold at least one {l}-token sequence")));
    }
    let mut model = ToyModel::<T>::new(model_cfg.clone())?;
    let unique = (train_seqs.len() * l) as u64;
    let steps_per_epoch = train_seqs.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::new(&cfg.optimizer, steps_per_epoch * cfg.epochs);
    let mut opt = AdamW::<T>::new(cfg.optimizer.clone(), model.n_params(), &model.layout.matrices);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut grad = vec![T::zero(); model.n_params()];

    let mut metrics = vec![EpochMetrics {
        epoch: 0,
        tokens_seen: 0,
        train_loss: evaluate(&model, &train_seqs, cfg)?,
        val_loss: evaluate(&model, &val_seqs, cfg)?,
    }];
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| train_seqs[i].clone()).collect();
            let batch = match model.cfg.attn_mode {
                AttnMode::Causal => Batch::Clean(seqs),
                AttnMode::Bidirectional => Batch::Corrupted(corrupt(&seqs, model.cfg.mask_id(), &mut rng)?),
            };
            grad.fill(T::zero());
            let loss = batch_loss(&model, &batch, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}, step {step}")));
            }
            epoch_loss += loss.to_f64_lossy() * idx.len() as f64;
            opt.step(&mut model.params, &mut grad, schedule.lr(step));
            step += 1;
        }
        metrics.push(EpochMetrics {
            epoch,
            tokens_seen: unique * epoch as u64,
            train_loss: epoch_loss / train_seqs.len() as f64,
            val_loss: evaluate(&model, &val_seqs, cfg)?,
        });
    }

    let family = match model.cfg.attn_mode {
        AttnMode::Causal => Family::Ar,
        AttnMode::Bidirectional => Family::Diffusion,
    };
    let last = metrics.last().expect("at least one epoch");
    let mut tags = BTreeMap::new();
    tags.insert("source".into(), "toy".into());
    tags.insert("d_model".into(), model_cfg.d_model.to_string());
    tags.insert("n_layers".into(), model_cfg.n_layers.to_string());
    tags.insert("seq_len".into(), l.to_string());
    tags.insert("vocab".into(), model_cfg.vocab.to_string());
    let record = RunRecord {
        family,
        n_params: model.n_params() as u64,
        unique_tokens: unique,
        epochs: cfg.epochs as f64,
        tokens_seen: last.tokens_seen,
        final_val_loss: last.val_loss,
        loss_curve: Some(metrics[1..].iter().map(|m| (m.tokens_seen, m.val_loss)).collect()),
        seed: cfg.seed as i64,
        tags,
    };
    record.validate().map_err(Error::Numeric)?;
    Ok(TrainOutcome { record, metrics, model })
}

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "tokens_seen", "train_loss", "val_loss"])?;
    for m in metrics {
        out.write_record([m.epoch.to_string(), m.tokens_seen.to_string(), fmt9(m.train_loss), fmt9(m.val_loss)])?;
    }
    out.flush()?;
    Ok(())
}

/// Grid of toy runs over both objectives, model widths, unique-token
/// budgets and epoch counts on one Markov corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub n_layers: usize,
    pub d_models: Vec<usize>,
    pub unique_tokens: Vec<usize>,
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub init_std: f64,
    pub eval_mask_samples: usize,
    pub val_tokens: usize,
    pub markov_branching: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            seq_len: 16,
            n_layers: 1,
            d_models: vec![16, 32],
            unique_tokens: vec![2048, 4096, 8192],
            epochs: vec![1, 4, 32],
            batch_size: 8,
            optimizer: AdamWConfig { peak_lr: 1e-2, min_lr: 1e-3, ..AdamWConfig::default() },
            init_std: 0.1,
            eval_mask_samples: 4,
            val_tokens: 2048,
            markov_branching: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub record: RunRecord,
    pub metrics: Vec<EpochMetrics>,
}

impl SweepConfig {
    pub fn model_config(&self, d_model: usize, attn_mode: AttnMode) -> ToyModelConfig {
        ToyModelConfig {
            vocab: self.vocab,
            seq_len: self.seq_len,
            d_model,
            d_ff: 4 * d_model,
            n_layers: self.n_layers,
            attn_mode,
            init_std: self.init_std,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, unique_tokens: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            unique_tokens,
            epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer.clone(),
            eval_mask_samples: self.eval_mask_samples,
            val_tokens: self.val_tokens,
            seed: self.seed,
            eval_seed: self.seed ^ 0x5eed,
        }
    }

    /// Corpus long enough for the largest budget plus the validation split.
    pub fn corpus(&self) -> Result<Vec<u32>> {
        let chain = super::corpus::MarkovChain::new(self.vocab, self.markov_branching, self.seed)?;
        let max_u = self.unique_tokens.iter().copied().max().unwrap_or(0);
        Ok(chain.sample(max_u + self.val_tokens, self.seed.wrapping_add(1)))
    }
}

/// Runs every (objective, width, budget, epochs) combination in a fixed
/// order, AR first.
pub fn sweep<T: Scalar>(cfg: &SweepConfig) -> Result<Vec<SweepRun>> {
    let corpus = cfg.corpus()?;
    let mut runs = Vec::new();
    for mode in [AttnMode::Causal, AttnMode::Bidirectional] {
        for &d in &cfg.d_models {
            for &u in &cfg.unique_tokens {
                for &e in &cfg.epochs {
                    log::info!("toy run: {mode:?} d_model={d} U={u} E={e}");
                    let out = train::<T>(&cfg.model_config(d, mode), &cfg.train_config(u, e), &corpus)?;
                    runs.push(SweepRun { record: out.record, metrics: out.metrics });
                }
            }
        }
    }
    Ok(runs)
}
