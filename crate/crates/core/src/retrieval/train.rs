//! Contrastive training loop for the retrieval model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss_backward, RetrievalConfig, RetrievalModel};
use crate::numerics::{lr_at, opt_step, OptState};
use crate::synthworld::Dataset;
use crate::textcore::{tokenize, Vocab, MAX_LEN};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub model: RetrievalConfig,
}

impl Default for RetrievalTrainConfig {
    fn default() -> Self {
        RetrievalTrainConfig {
            epochs: 15,
            batch: 128,
            lr: 5e-4,
            seed: 0,
            model: RetrievalConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct RetrievalTrainOutcome {
    pub model: RetrievalModel,
    pub epoch_losses: Vec<f64>,
    /// Epoch at which the loss went non-finite, if training diverged; the
    /// returned model is then the snapshot from the last finite epoch.
    pub diverged_at: Option<usize>,
}

/// Trains on (image, one uniformly sampled reference) pairs per epoch.
/// Deterministic given the seed; epochs = 0 returns the initialized model.
pub fn train_retrieval(dataset: &Dataset, config: &RetrievalTrainConfig) -> Result<RetrievalTrainOutcome> {
    let vocab = dataset.vocab();
    train_retrieval_with_vocab(dataset, &vocab, config)
}

pub fn train_retrieval_with_vocab(
    dataset: &Dataset,
    vocab: &Vocab,
    config: &RetrievalTrainConfig,
) -> Result<RetrievalTrainOutcome> {
    let mut cfg = config.model;
    cfg.feature_dim = dataset.config.feature_dim;
    let mut model = RetrievalModel::init(cfg, vocab.len(), config.seed);
    let mut opt = OptState::new(&model.params, config.lr);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x7265_7472); // "retr"
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut snapshot = model.params.clone();

    let train = &dataset.train;
    for epoch in 0..config.epochs {
        opt.lr = lr_at(epoch, config.lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            if chunk.len() < 2 {
                continue; // a single pair has no negatives
            }
            let features: Vec<&[f64]> = chunk.iter().map(|&i| train[i].global.as_slice()).collect();
            let captions = chunk
                .iter()
                .map(|&i| {
                    let r = rng.random_range(0..train[i].refs.len());
                    tokenize(&train[i].refs[r], vocab, MAX_LEN).0
                })
                .collect::<Vec<_>>();
            let loss = batch_loss_backward(&mut model, &features, &captions)?;
            if !loss.is_finite() {
                model.params = snapshot;
                return Ok(RetrievalTrainOutcome {
                    model,
                    epoch_losses,
                    diverged_at: Some(epoch),
                });
            }
            opt_step(&mut model.params, &mut opt)?;
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
        snapshot = model.params.clone();
    }
    Ok(RetrievalTrainOutcome {
        model,
        epoch_losses,
        diverged_at: None,
    })
}
