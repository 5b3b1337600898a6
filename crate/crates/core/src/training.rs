//! Two-phase generator training: maximum-likelihood pretraining with
//! teacher forcing, then self-critical policy-gradient fine-tuning.
//!
//! The self-critical step samples one caption per image, decodes a greedy
//! baseline, and weights the sampled caption's log-prob gradient by the
//! reward advantage. Rewards can mix CIDEr-D with the frozen retrieval
//! model's per-anchor contrastive value; the MLE+disc variant keeps the
//! log-likelihood term as an exact gradient and applies the policy gradient
//! only to the contrastive part.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::generator::{greedy_decode, sample_decode, GeneratorModel, ImageCtx, Variant};
use crate::metrics::{CiderScorer, NGramStats};
use crate::numerics::{lr_at, opt_step, OptState};
use crate::retrieval::{disc_loss, RetrievalModel};
use crate::synthworld::ImageRecord;
use crate::textcore::{detokenize, tokenize, Caption, Vocab};
use crate::{Error, Result};

/// Global gradient-norm cap applied during policy-gradient epochs.
pub const RL_GRAD_CLIP: f64 = 5.0;

/// Samples drawn per image in one self-critical step. Averaging several
/// REINFORCE estimates against the shared greedy baseline divides the
/// gradient noise by this factor; with one sample per image the per-step
/// noise swamps the signal at this data scale.
pub const SCST_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Mle,
    Cider,
    MleDisc,
    CiderDisc,
}

impl RewardKind {
    pub fn uses_disc(&self) -> bool {
        matches!(self, RewardKind::MleDisc | RewardKind::CiderDisc)
    }
}

impl std::str::FromStr for RewardKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<RewardKind> {
        match s {
            "mle" => Ok(RewardKind::Mle),
            "cider" => Ok(RewardKind::Cider),
            "mle_disc" => Ok(RewardKind::MleDisc),
            "cider_disc" => Ok(RewardKind::CiderDisc),
            other => Err(Error::config(format!("unknown reward kind {other}"))),
        }
    }
}

impl std::fmt::Display for RewardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RewardKind::Mle => "mle",
            RewardKind::Cider => "cider",
            RewardKind::MleDisc => "mle_disc",
            RewardKind::CiderDisc => "cider_disc",
        };
        write!(f, "{s}")
    }
}

/// Reward composition. With lambda = 0 the *_disc kinds reduce exactly
/// (bit-for-bit) to their base kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub lambda: f64,
    /// Checkpoint id of the frozen retrieval model; required iff the kind
    /// uses the discriminability term.
    pub retrieval_ckpt: Option<String>,
}

impl RewardConfig {
    pub fn cider() -> RewardConfig {
        RewardConfig {
            kind: RewardKind::Cider,
            lambda: 0.0,
            retrieval_ckpt: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be >= 0"));
        }
        if self.kind.uses_disc() && self.retrieval_ckpt.is_none() {
            return Err(Error::config(format!(
                "reward kind {} requires a retrieval checkpoint",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mle,
    Scst,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Mle => write!(f, "mle"),
            Phase::Scst => write!(f, "scst"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub mean_lcon: f64,
    pub val_cider: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// CSV with the columns epoch, phase, mean_reward, mean_baseline,
    /// mean_lcon, val_cider, lr (wall time stays in memory so reruns are
    /// byte-identical).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,mean_reward,mean_baseline,mean_lcon,val_cider,lr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.phase, r.mean_reward, r.mean_baseline, r.mean_lcon, r.val_cider, r.lr
            ));
        }
        out
    }
}

/// Full schedule configuration; serializes to the flat key=value format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: String,
    pub variant: Variant,
    pub reward: RewardConfig,
    pub epochs_mle: usize,
    pub epochs_scst: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: String::new(),
            variant: Variant::Fc,
            reward: RewardConfig::cider(),
            epochs_mle: 20,
            epochs_scst: 10,
            batch: 64,
            lr: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("dataset={}\n", self.dataset));
        out.push_str(&format!("variant={}\n", self.variant));
        out.push_str(&format!("reward.kind={}\n", self.reward.kind));
        out.push_str(&format!("reward.lambda={}\n", self.reward.lambda));
        out.push_str(&format!("epochs.mle={}\n", self.epochs_mle));
        out.push_str(&format!("epochs.scst={}\n", self.epochs_scst));
        out.push_str(&format!("batch={}\n", self.batch));
        out.push_str(&format!("lr={}\n", self.lr));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!(
            "retrieval_ckpt={}\n",
            self.reward.retrieval_ckpt.as_deref().unwrap_or("")
        ));
        out
    }

    pub fn from_kv(text: &str) -> Result<TrainConfig> {
        let mut map = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad config line: {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k).ok_or_else(|| Error::config(format!("missing config key {k}")))
        };
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::config(format!("bad value for {k}")))
        };
        let parse_u = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::config(format!("bad value for {k}")))
        };
        let retrieval_ckpt = map.get("retrieval_ckpt").filter(|s| !s.is_empty()).cloned();
        Ok(TrainConfig {
            dataset: get("dataset")?.clone(),
            variant: get("variant")?.parse()?,
            reward: RewardConfig {
                kind: get("reward.kind")?.parse()?,
                lambda: parse_f("reward.lambda")?,
                retrieval_ckpt,
            },
            epochs_mle: parse_u("epochs.mle")?,
            epochs_scst: parse_u("epochs.scst")?,
            batch: parse_u("batch")?,
            lr: parse_f("lr")?,
            seed: map
                .get("seed")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::config("missing or bad config key seed"))?,
        })
    }
}

fn image_ctx(rec: &ImageRecord) -> ImageCtx<'_> {
    ImageCtx {
        global: &rec.global,
        regions: &rec.regions,
    }
}

/// CIDEr-D scorer over a record set, addressable by scene id; reference
/// vectors are built once per training run.
pub struct SceneScorer<'a> {
    scorer: CiderScorer<'a>,
    index: HashMap<u64, usize>,
}

impl<'a> SceneScorer<'a> {
    pub fn new(records: &[ImageRecord], stats: &'a NGramStats) -> Result<SceneScorer<'a>> {
        let refs: Vec<Vec<String>> = records.iter().map(|r| r.refs.clone()).collect();
        let scorer = CiderScorer::new(&refs, stats)?;
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.scene_id, i))
            .collect();
        Ok(SceneScorer { scorer, index })
    }

    pub fn score(&self, scene_id: u64, candidate: &str) -> Result<f64> {
        let idx = *self
            .index
            .get(&scene_id)
            .ok_or_else(|| Error::config(format!("scene {scene_id} not in scorer index")))?;
        Ok(self.scorer.score(idx, candidate))
    }
}

/// One teacher-forced optimizer pass over the train split; returns the mean
/// per-token negative log-likelihood.
pub fn mle_epoch<R: Rng>(
    model: &mut GeneratorModel,
    train: &[ImageRecord],
    vocab: &Vocab,
    opt: &mut OptState,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for chunk in order.chunks(batch) {
        let mut caches = Vec::with_capacity(chunk.len());
        let mut batch_tokens = 0usize;
        for &i in chunk {
            let rec = &train[i];
            let r = rng.random_range(0..rec.refs.len());
            let (caption, _) = tokenize(&rec.refs[r], vocab, model.cfg.max_len);
            let fwd = model.forward_cached(&caption, &image_ctx(rec))?;
            batch_tokens += fwd.per_step.len();
            caches.push((i, fwd));
        }
        let w = 1.0 / batch_tokens.max(1) as f64;
        for (i, fwd) in &caches {
            total_nll -= fwd.total_logprob;
            total_tokens += fwd.per_step.len();
            model.backward(fwd, &image_ctx(&train[*i]), w)?;
        }
        let nll_check = total_nll / total_tokens.max(1) as f64;
        if !nll_check.is_finite() {
            return Err(Error::numerical("non-finite MLE loss"));
        }
        opt_step(&mut model.params, opt)?;
    }
    Ok(total_nll / total_tokens.max(1) as f64)
}

/// Per-item reward ingredients for one decoded caption.
#[derive(Debug, Clone, Copy)]
pub struct RewardParts {
    pub cider: f64,
    pub loglik: f64,
    pub lcon: f64,
}

/// Composes the scalar reward from its parts per the configured kind.
pub fn reward_value(parts: &RewardParts, cfg: &RewardConfig) -> f64 {
    match cfg.kind {
        RewardKind::Mle => parts.loglik,
        RewardKind::Cider => parts.cider,
        RewardKind::MleDisc => parts.loglik - cfg.lambda * parts.lcon,
        RewardKind::CiderDisc => parts.cider - cfg.lambda * parts.lcon,
    }
}

/// Rewards for a batch of decoded captions, with the contrastive values
/// taken per anchor inside this batch.
pub fn batch_reward_parts(
    records: &[&ImageRecord],
    captions: &[Caption],
    logliks: &[f64],
    cfg: &RewardConfig,
    retrieval: Option<&RetrievalModel>,
    scorer: &SceneScorer,
    vocab: &Vocab,
) -> Result<Vec<RewardParts>> {
    let texts: Vec<String> = captions
        .iter()
        .map(|c| detokenize(c, vocab))
        .collect::<Result<_>>()?;
    let cider_scores: Vec<f64> = records
        .iter()
        .zip(&texts)
        .map(|(r, t)| scorer.score(r.scene_id, t))
        .collect::<Result<_>>()?;
    let lcon = if cfg.kind.uses_disc() {
        let retr = retrieval.ok_or_else(|| {
            Error::config(format!("reward kind {} requires a retrieval model", cfg.kind))
        })?;
        let feats: Vec<&[f64]> = records.iter().map(|r| r.global.as_slice()).collect();
        disc_loss(&feats, captions, retr)?
    } else {
        vec![0.0; records.len()]
    };
    Ok((0..records.len())
        .map(|i| RewardParts {
            cider: cider_scores[i],
            loglik: logliks[i],
            lcon: lcon[i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScstStats {
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub mean_lcon: f64,
    /// True when every advantage was exactly zero and the step was skipped.
    pub skipped: bool,
}

/// One self-critical policy-gradient step over a batch: sample + greedy
/// decode per image, advantage-weighted log-prob gradient of the samples,
/// clip, optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn scst_step<R: Rng>(
    model: &mut GeneratorModel,
    batch: &[&ImageRecord],
    cfg: &RewardConfig,
    retrieval: Option<&RetrievalModel>,
    scorer: &SceneScorer,
    vocab: &Vocab,
    opt: &mut OptState,
    rng: &mut R,
) -> Result<ScstStats> {
    let stats_out = scst_accumulate(model, batch, cfg, retrieval, scorer, vocab, rng)?;
    if stats_out.skipped {
        return Ok(stats_out);
    }
    model.params.clip_grad_norm(RL_GRAD_CLIP);
    opt_step(&mut model.params, opt)?;
    Ok(stats_out)
}

/// Decodes, rewards and gradient accumulation of one self-critical batch,
/// without the optimizer update.
pub fn scst_accumulate<R: Rng>(
    model: &mut GeneratorModel,
    batch: &[&ImageRecord],
    cfg: &RewardConfig,
    retrieval: Option<&RetrievalModel>,
    scorer: &SceneScorer,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<ScstStats> {
    cfg.validate()?;
    let b = batch.len();
    let n = SCST_SAMPLES;
    let max_len = model.cfg.max_len;
    // One greedy baseline per image, shared by that image's samples; the
    // samples are drawn in rounds so each round forms a full batch for the
    // in-batch contrastive term.
    let mut greedys = Vec::with_capacity(b);
    for rec in batch {
        let img = image_ctx(rec);
        greedys.push(greedy_decode(model, &img, max_len)?);
    }
    let greedy_caps: Vec<Caption> = greedys.iter().map(|d| d.caption.clone()).collect();
    let greedy_ll: Vec<f64> = greedys.iter().map(|d| d.total_logprob).collect();
    let greedy_parts = batch_reward_parts(batch, &greedy_caps, &greedy_ll, cfg, retrieval, scorer, vocab)?;

    let mut rounds = Vec::with_capacity(n);
    for _ in 0..n {
        let mut caps = Vec::with_capacity(b);
        let mut lls = Vec::with_capacity(b);
        for rec in batch {
            let img = image_ctx(rec);
            let d = sample_decode(model, &img, rng, max_len)?;
            lls.push(d.total_logprob);
            caps.push(d.caption);
        }
        let parts = batch_reward_parts(batch, &caps, &lls, cfg, retrieval, scorer, vocab)?;
        rounds.push((caps, parts));
    }

    // REINFORCE advantages; for mle kinds the log-likelihood part is exact
    // (not reinforced), so only the contrastive term enters the advantage.
    let advantage = |parts: &RewardParts, i: usize| -> f64 {
        match cfg.kind {
            RewardKind::Mle => 0.0,
            RewardKind::Cider | RewardKind::CiderDisc => {
                reward_value(parts, cfg) - reward_value(&greedy_parts[i], cfg)
            }
            RewardKind::MleDisc => -cfg.lambda * (parts.lcon - greedy_parts[i].lcon),
        }
    };

    let total = (b * n) as f64;
    let mean_reward = rounds
        .iter()
        .flat_map(|(_, parts)| parts.iter().map(|p| reward_value(p, cfg)))
        .sum::<f64>()
        / total;
    let mean_lcon = rounds
        .iter()
        .flat_map(|(_, parts)| parts.iter().map(|p| p.lcon))
        .sum::<f64>()
        / total;
    let stats_out = ScstStats {
        mean_reward,
        mean_baseline: (0..b)
            .map(|i| reward_value(&greedy_parts[i], cfg))
            .sum::<f64>()
            / b as f64,
        mean_lcon,
        skipped: false,
    };

    let needs_mle_term = matches!(cfg.kind, RewardKind::Mle | RewardKind::MleDisc);
    let all_zero = rounds
        .iter()
        .all(|(_, parts)| (0..b).all(|i| advantage(&parts[i], i) == 0.0));
    if !needs_mle_term && all_zero {
        eprintln!("scst: all-zero advantage batch, skipping step");
        model.params.zero_grads();
        return Ok(ScstStats {
            skipped: true,
            ..stats_out
        });
    }

    for (caps, parts) in &rounds {
        for (i, rec) in batch.iter().enumerate() {
            let img = image_ctx(rec);
            let adv = advantage(&parts[i], i);
            if adv != 0.0 {
                let fwd = model.forward_cached(&caps[i], &img)?;
                let eos_forced = caps[i].ids.len() == max_len;
                model.backward_policy(&fwd, &img, adv / total, eos_forced)?;
            }
        }
    }
    if needs_mle_term {
        // exact gradient of the whole-caption log-likelihood of a sampled
        // reference (per-caption scale, matching the policy term)
        for rec in batch.iter() {
            let img = image_ctx(rec);
            let r = rng.random_range(0..rec.refs.len());
            let (caption, _) = tokenize(&rec.refs[r], vocab, max_len);
            let fwd = model.forward_cached(&caption, &img)?;
            model.backward(&fwd, &img, 1.0 / b as f64)?;
        }
    }
    Ok(stats_out)
}

/// Checkpoint sink invoked at phase boundaries and every five epochs.
pub type CheckpointHook<'a> = dyn FnMut(&GeneratorModel, Phase, usize) -> Result<()> + 'a;

/// MLE pretraining followed by self-critical fine-tuning. `init` resumes
/// from an existing generator (used by the CLI to split the two phases into
/// separate commands); the MLE epochs then count as already completed, so
/// the decayed learning-rate schedule continues where pretraining left off.
/// Returns the trained model and the per-epoch log.
#[allow(clippy::too_many_arguments)]
pub fn run_schedule(
    train: &[ImageRecord],
    val: &[ImageRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    retrieval: Option<&RetrievalModel>,
    init: Option<GeneratorModel>,
    train_stats: &NGramStats,
    val_stats: &NGramStats,
    hook: &mut CheckpointHook,
) -> Result<(GeneratorModel, TrainLog)> {
    cfg.reward.validate()?;
    if cfg.reward.kind.uses_disc() && retrieval.is_none() {
        return Err(Error::config("disc reward requires a retrieval model"));
    }
    let resumed = init.is_some();
    let mut model = init.unwrap_or_else(|| {
        let mut gcfg = crate::generator::GeneratorConfig::new(cfg.variant);
        gcfg.feature_dim = train
            .first()
            .map(|r| r.global.len())
            .unwrap_or(gcfg.feature_dim);
        GeneratorModel::init(gcfg, vocab.len(), cfg.seed)
    });
    let mut opt = OptState::new(&model.params, cfg.lr);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x7472_6169); // "trai"
    let mut log = TrainLog::default();
    let mut snapshot = model.params.clone();
    let train_scorer = SceneScorer::new(train, train_stats)?;
    let val_scorer = if val.is_empty() {
        None
    } else {
        Some(SceneScorer::new(val, val_stats)?)
    };

    let val_cider_of = |model: &GeneratorModel| -> Result<f64> {
        let Some(scorer) = &val_scorer else {
            return Ok(0.0);
        };
        let mut total = 0.0;
        for rec in val {
            let d = greedy_decode(model, &image_ctx(rec), model.cfg.max_len)?;
            total += scorer.score(rec.scene_id, &detokenize(&d.caption, vocab)?)?;
        }
        Ok(total / val.len() as f64)
    };

    let mle_epochs_to_run = if resumed { 0 } else { cfg.epochs_mle };
    for epoch in 0..mle_epochs_to_run {
        let start = std::time::Instant::now();
        opt.lr = lr_at(epoch, cfg.lr);
        let nll = match mle_epoch(&mut model, train, vocab, &mut opt, cfg.batch, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                model.params = snapshot;
                hook(&model, Phase::Mle, epoch)?;
                return Err(e);
            }
        };
        snapshot = model.params.clone();
        log.rows.push(TrainLogRow {
            epoch,
            phase: Phase::Mle,
            mean_reward: -nll,
            mean_baseline: 0.0,
            mean_lcon: 0.0,
            val_cider: val_cider_of(&model)?,
            lr: opt.lr,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if (epoch + 1) % 5 == 0 {
            hook(&model, Phase::Mle, epoch)?;
        }
    }
    if !resumed {
        hook(&model, Phase::Mle, cfg.epochs_mle.saturating_sub(1))?;
    }

    for e in 0..cfg.epochs_scst {
        let epoch = cfg.epochs_mle + e;
        let start = std::time::Instant::now();
        opt.lr = lr_at(epoch, cfg.lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = ScstStats::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&ImageRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let stats = match scst_step(
                &mut model,
                &batch,
                &cfg.reward,
                retrieval,
                &train_scorer,
                vocab,
                &mut opt,
                &mut rng,
            ) {
                Ok(s) => s,
                Err(e) => {
                    model.params = snapshot;
                    hook(&model, Phase::Scst, epoch)?;
                    return Err(e);
                }
            };
            sums.mean_reward += stats.mean_reward;
            sums.mean_baseline += stats.mean_baseline;
            sums.mean_lcon += stats.mean_lcon;
            steps += 1;
        }
        snapshot = model.params.clone();
        let n = steps.max(1) as f64;
        log.rows.push(TrainLogRow {
            epoch,
            phase: Phase::Scst,
            mean_reward: sums.mean_reward / n,
            mean_baseline: sums.mean_baseline / n,
            mean_lcon: sums.mean_lcon / n,
            val_cider: val_cider_of(&model)?,
            lr: opt.lr,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if (e + 1) % 5 == 0 && e + 1 != cfg.epochs_scst {
            hook(&model, Phase::Scst, epoch)?;
        }
    }
    hook(
        &model,
        Phase::Scst,
        cfg.epochs_mle + cfg.epochs_scst.saturating_sub(1),
    )?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{build_dataset, DatasetConfig};

    fn tiny_dataset() -> crate::synthworld::Dataset {
        build_dataset(&DatasetConfig {
            n_train: 24,
            n_val: 8,
            n_test: 8,
            feature_dim: 16,
            noise_sigma: 0.05,
            seed: 11,
        })
        .unwrap()
    }

    fn tiny_generator(ds: &crate::synthworld::Dataset, vocab: &Vocab, variant: Variant) -> GeneratorModel {
        let mut cfg = crate::generator::GeneratorConfig::new(variant);
        cfg.feature_dim = ds.config.feature_dim;
        cfg.word_dim = 12;
        cfg.hidden = 16;
        cfg.attn_dim = 8;
        GeneratorModel::init(cfg, vocab.len(), 5)
    }

    #[test]
    fn mle_epoch_zero_lr_keeps_params() {
        let ds = tiny_dataset();
        let vocab = ds.vocab();
        let mut model = tiny_generator(&ds, &vocab, Variant::Fc);
        let before = model.params.flat_params();
        let mut opt = OptState::new(&model.params, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let nll = mle_epoch(&mut model, &ds.train, &vocab, &mut opt, 8, &mut rng).unwrap();
        assert_eq!(model.params.flat_params(), before);
        assert!(nll > 0.0);
    }

    #[test]
    fn mle_epoch_reduces_nll() {
        for seed in [1u64, 2, 3] {
            let ds = tiny_dataset();
            let vocab = ds.vocab();
            let mut cfg = crate::generator::GeneratorConfig::new(Variant::Fc);
            cfg.feature_dim = ds.config.feature_dim;
            cfg.word_dim = 12;
            cfg.hidden = 16;
            let mut model = GeneratorModel::init(cfg, vocab.len(), seed);
            let mut opt = OptState::new(&model.params, 5e-3);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let first = mle_epoch(&mut model, &ds.train, &vocab, &mut opt, 8, &mut rng).unwrap();
            let mut last = first;
            for _ in 0..4 {
                last = mle_epoch(&mut model, &ds.train, &vocab, &mut opt, 8, &mut rng).unwrap();
            }
            assert!(last < first, "seed {seed}: {last} !< {first}");
        }
    }

    #[test]
    fn reward_lambda_zero_reduces_to_base() {
        let parts = RewardParts {
            cider: 3.2,
            loglik: -4.5,
            lcon: 0.7,
        };
        let disc = RewardConfig {
            kind: RewardKind::CiderDisc,
            lambda: 0.0,
            retrieval_ckpt: Some("x".into()),
        };
        let base = RewardConfig::cider();
        assert_eq!(reward_value(&parts, &disc), reward_value(&parts, &base));
        assert_eq!(reward_value(&parts, &disc).to_bits(), 3.2f64.to_bits());
    }

    #[test]
    fn reward_requires_retrieval_for_disc() {
        let cfg = RewardConfig {
            kind: RewardKind::CiderDisc,
            lambda: 1.0,
            retrieval_ckpt: None,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_config_kv_round_trip() {
        let cfg = TrainConfig {
            dataset: "data/run1".into(),
            variant: Variant::Attn,
            reward: RewardConfig {
                kind: RewardKind::CiderDisc,
                lambda: 5.0,
                retrieval_ckpt: Some("abc123".into()),
            },
            epochs_mle: 20,
            epochs_scst: 10,
            batch: 64,
            lr: 5e-4,
            seed: 7,
        };
        let kv = cfg.to_kv();
        assert!(kv.contains("reward.kind=cider_disc"));
        assert!(kv.contains("epochs.mle=20"));
        let back = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }
}
