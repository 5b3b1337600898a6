//! High-level entry points behind the CLI subcommands (and the Python
//! bindings): dataset generation, the two training stages, pair building,
//! and evaluation. Everything here works through files so stages can run
//! as separate processes and remain byte-reproducible.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::evalharness::{full_report, render_table, EvalInputs, EvalReport};
use crate::generator::{beam_decode, GeneratorConfig, GeneratorModel, ImageCtx, Variant};
use crate::metrics::{load_stats, save_stats, NGramStats};
use crate::numerics::{load_checkpoint, write_checkpoint, Sidecar};
use crate::retrieval::{train_retrieval_with_vocab, RetrievalModel, RetrievalTrainConfig};
use crate::synthworld::{
    build_dataset, build_distractor_pairs, load_pair_file, write_pair_file, Dataset,
    DatasetConfig, ImageRecord, Split,
};
use crate::textcore::{detokenize, Caption, Vocab};
use crate::training::{run_schedule, Phase, RewardConfig, TrainConfig, TrainLog};
use crate::{Error, Result};

/// Beam width used for every reported decode.
pub const EVAL_BEAM: usize = 2;

/// A dataset directory loaded back into memory.
pub struct World {
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub hash: String,
    pub dir: PathBuf,
}

impl World {
    pub fn load(dir: &Path) -> Result<World> {
        let dataset = Dataset::load(dir)?;
        let vocab = Vocab::from_json(&fs::read_to_string(dir.join("vocab.json"))?)?;
        let hash = Dataset::hash_of_dir(dir)?;
        Ok(World {
            dataset,
            vocab,
            hash,
            dir: dir.to_path_buf(),
        })
    }

    /// Reference n-gram statistics for a split, via the binary sidecar
    /// cache keyed by the dataset hash.
    pub fn stats(&self, split: Split) -> Result<NGramStats> {
        let path = self.dir.join(format!("ngrams_{split}.bin"));
        if let Some(stats) = load_stats(&path, &self.hash) {
            return Ok(stats);
        }
        let refs: Vec<Vec<String>> = self
            .dataset
            .split(split)
            .iter()
            .map(|r| r.refs.clone())
            .collect();
        let stats = NGramStats::build(&refs)?;
        save_stats(&path, &stats, &self.hash)?;
        Ok(stats)
    }
}

impl DatasetConfig {
    /// Flat key=value parse (keys: n_train, n_val, n_test, d, noise_sigma,
    /// seed); missing keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<DatasetConfig> {
        let mut cfg = DatasetConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad config line: {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            let parse = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| Error::config(format!("bad value for {k}: {v}")))
            };
            match k {
                "n_train" => cfg.n_train = parse(v)?,
                "n_val" => cfg.n_val = parse(v)?,
                "n_test" => cfg.n_test = parse(v)?,
                "d" | "feature_dim" => cfg.feature_dim = parse(v)?,
                "noise_sigma" => {
                    cfg.noise_sigma = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad value for noise_sigma: {v}")))?
                }
                "seed" => {
                    cfg.seed = v
                        .parse()
                        .map_err(|_| Error::config(format!("bad value for seed: {v}")))?
                }
                other => return Err(Error::config(format!("unknown dataset config key {other}"))),
            }
        }
        Ok(cfg)
    }
}

/// `gen-data`: build the dataset, write it plus vocab and the frozen n-gram
/// sidecars for all three splits.
pub fn gen_data(config: &DatasetConfig, out: &Path) -> Result<()> {
    let dataset = build_dataset(config)?;
    dataset.save(out)?;
    let world = World::load(out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        world.stats(split)?;
    }
    Ok(())
}

/// `train-retrieval`: contrastive training, checkpoint + loss log + a
/// Table-1 style recall report on the validation split.
pub fn train_retrieval_cmd(data: &Path, seed: u64, epochs: usize, out: &Path) -> Result<Sidecar> {
    let world = World::load(data)?;
    let cfg = RetrievalTrainConfig {
        seed,
        epochs,
        ..RetrievalTrainConfig::default()
    };
    let outcome = train_retrieval_with_vocab(&world.dataset, &world.vocab, &cfg)?;
    let config = serde_json::json!({
        "retrieval": outcome.model.cfg,
        "train": {"epochs": epochs, "batch": cfg.batch, "lr": cfg.lr, "seed": seed},
        "dataset_hash": world.hash,
        "epoch_losses": outcome.epoch_losses,
    });
    let sidecar = write_checkpoint(out, &outcome.model.params, "retrieval", seed, config)?;
    if let Some(epoch) = outcome.diverged_at {
        return Err(Error::numerical(format!(
            "retrieval training diverged at epoch {epoch}; checkpoint holds the last finite epoch"
        )));
    }
    let recall = recall_on_split(&outcome.model, &world, Split::Val)?;
    fs::write(
        path_with_suffix(out, ".recall.json"),
        serde_json::to_string_pretty(&recall)?,
    )?;
    Ok(sidecar)
}

/// Recall@{1,5,10} in both directions over a split.
pub fn recall_on_split(
    model: &RetrievalModel,
    world: &World,
    split: Split,
) -> Result<crate::retrieval::RecallReport> {
    let records = world.dataset.split(split);
    let images: Vec<&[f64]> = records.iter().map(|r| r.global.as_slice()).collect();
    let refs: Vec<Vec<Caption>> = records
        .iter()
        .map(|r| {
            r.refs
                .iter()
                .map(|s| crate::textcore::tokenize(s, &world.vocab, crate::textcore::MAX_LEN).0)
                .collect()
        })
        .collect();
    crate::retrieval::recall_report(model, &images, &refs, &[1, 5, 10])
}

pub fn load_retrieval(path: &Path) -> Result<(RetrievalModel, Sidecar)> {
    let (params, sidecar) = load_checkpoint(path)?;
    if sidecar.kind != "retrieval" {
        return Err(Error::config(format!(
            "{} is a {} checkpoint, expected retrieval",
            path.display(),
            sidecar.kind
        )));
    }
    Ok((RetrievalModel::from_checkpoint(params, &sidecar.config)?, sidecar))
}

pub fn load_generator(path: &Path) -> Result<(GeneratorModel, Sidecar)> {
    let (params, sidecar) = load_checkpoint(path)?;
    if sidecar.kind != "generator" {
        return Err(Error::config(format!(
            "{} is a {} checkpoint, expected generator",
            path.display(),
            sidecar.kind
        )));
    }
    Ok((GeneratorModel::from_checkpoint(params, &sidecar.config)?, sidecar))
}

fn write_generator(
    out: &Path,
    model: &GeneratorModel,
    cfg: &TrainConfig,
    label: &str,
    world_hash: &str,
    log: &TrainLog,
) -> Result<Sidecar> {
    let config = serde_json::json!({
        "generator": model.cfg,
        "train": cfg,
        "label": label,
        "dataset_hash": world_hash,
    });
    let sidecar = write_checkpoint(out, &model.params, "generator", cfg.seed, config)?;
    fs::write(path_with_suffix(out, ".log.csv"), log.to_csv())?;
    fs::write(path_with_suffix(out, ".config.txt"), cfg.to_kv())?;
    Ok(sidecar)
}

fn path_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn epoch_hook<'a>(out: &'a Path, cfg: &'a TrainConfig, label: &'a str, hash: &'a str)
-> impl FnMut(&GeneratorModel, Phase, usize) -> Result<()> + 'a {
    move |model: &GeneratorModel, phase: Phase, epoch: usize| {
        let path = path_with_suffix(out, &format!(".{phase}{epoch:03}"));
        let config = serde_json::json!({
            "generator": model.cfg,
            "train": cfg,
            "label": label,
            "dataset_hash": hash,
            "phase": phase,
            "epoch": epoch,
        });
        write_checkpoint(&path, &model.params, "generator", cfg.seed, config)?;
        Ok(())
    }
}

/// `pretrain`: MLE phase only.
pub fn pretrain_cmd(
    data: &Path,
    variant: Variant,
    seed: u64,
    epochs: usize,
    batch: usize,
    lr: f64,
    out: &Path,
) -> Result<Sidecar> {
    let world = World::load(data)?;
    let cfg = TrainConfig {
        dataset: data.display().to_string(),
        variant,
        reward: RewardConfig {
            kind: crate::training::RewardKind::Mle,
            lambda: 0.0,
            retrieval_ckpt: None,
        },
        epochs_mle: epochs,
        epochs_scst: 0,
        batch,
        lr,
        seed,
    };
    let label = format!("{variant}+mle");
    let train_stats = world.stats(Split::Train)?;
    let val_stats = world.stats(Split::Val)?;
    let mut hook = epoch_hook(out, &cfg, &label, &world.hash);
    let (model, log) = run_schedule(
        &world.dataset.train,
        &world.dataset.val,
        &world.vocab,
        &cfg,
        None,
        None,
        &train_stats,
        &val_stats,
        &mut hook,
    )?;
    write_generator(out, &model, &cfg, &label, &world.hash, &log)
}

/// `train-rl`: self-critical fine-tuning from an MLE checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_rl_cmd(
    data: &Path,
    init: &Path,
    reward_kind: crate::training::RewardKind,
    lambda: f64,
    retrieval: Option<&Path>,
    epochs: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<Sidecar> {
    let world = World::load(data)?;
    let (gen, gen_sidecar) = load_generator(init)?;
    check_hash(&gen_sidecar, &world.hash, init)?;
    let retrieval_loaded = match retrieval {
        Some(p) => {
            let (m, s) = load_retrieval(p)?;
            check_hash(&s, &world.hash, p)?;
            Some((m, s))
        }
        None => None,
    };
    let reward = RewardConfig {
        kind: reward_kind,
        lambda,
        retrieval_ckpt: retrieval_loaded.as_ref().map(|(_, s)| s.id.clone()),
    };
    reward.validate()?;
    let seed = seed.unwrap_or(gen_sidecar.seed);
    // Continue the lr schedule where pretraining stopped.
    let init_mle_epochs = gen_sidecar.config["train"]["epochs_mle"]
        .as_u64()
        .unwrap_or(20) as usize;
    let cfg = TrainConfig {
        dataset: data.display().to_string(),
        variant: gen.cfg.variant,
        reward: reward.clone(),
        epochs_mle: init_mle_epochs,
        epochs_scst: epochs,
        batch: 64,
        lr: 5e-4,
        seed,
    };
    let label = if reward_kind.uses_disc() {
        format!("{}+{}({})", gen.cfg.variant, reward_kind, lambda)
    } else {
        format!("{}+{}", gen.cfg.variant, reward_kind)
    };
    let train_stats = world.stats(Split::Train)?;
    let val_stats = world.stats(Split::Val)?;
    let retr_ref = retrieval_loaded.as_ref().map(|(m, _)| m);
    let mut hook = epoch_hook(out, &cfg, &label, &world.hash);
    let (model, log) = run_schedule(
        &world.dataset.train,
        &world.dataset.val,
        &world.vocab,
        &cfg,
        retr_ref,
        Some(gen),
        &train_stats,
        &val_stats,
        &mut hook,
    )?;
    write_generator(out, &model, &cfg, &label, &world.hash, &log)
}

fn check_hash(sidecar: &Sidecar, world_hash: &str, path: &Path) -> Result<()> {
    let h = sidecar.config["dataset_hash"].as_str().unwrap_or("");
    if h != world_hash {
        return Err(Error::config(format!(
            "dataset hash mismatch: {} was trained on a different dataset",
            path.display()
        )));
    }
    Ok(())
}

/// Beam-2 decode of every image in a split, keyed by scene id.
pub fn decode_split(
    model: &GeneratorModel,
    split: &[ImageRecord],
) -> Result<HashMap<u64, Caption>> {
    let mut out = HashMap::with_capacity(split.len());
    for rec in split {
        let img = ImageCtx {
            global: &rec.global,
            regions: &rec.regions,
        };
        let d = beam_decode(model, &img, EVAL_BEAM, model.cfg.max_len)?;
        out.insert(rec.scene_id, d.caption);
    }
    Ok(out)
}

/// `build-pairs`: nearest-neighbor distractor pairs ranked by the overlap
/// of the given generator's captions.
pub fn build_pairs_cmd(
    data: &Path,
    generator: &Path,
    n_pairs: Option<usize>,
    split: Split,
    out: &Path,
) -> Result<usize> {
    let world = World::load(data)?;
    let (gen, gen_sidecar) = load_generator(generator)?;
    check_hash(&gen_sidecar, &world.hash, generator)?;
    let records = world.dataset.split(split);
    let captions = decode_split(&gen, records)?;
    let texts: HashMap<u64, String> = captions
        .iter()
        .map(|(&id, c)| Ok((id, detokenize(c, &world.vocab)?)))
        .collect::<Result<_>>()?;
    let n = n_pairs.unwrap_or(match split {
        Split::Val => 100,
        Split::Test => 300,
        Split::Train => 100,
    });
    let pairs = build_distractor_pairs(records, &texts, n)?;
    write_pair_file(out, &pairs, &gen_sidecar.id, &split.to_string())?;
    Ok(pairs.len())
}

/// `eval`: the full Table-2 style report from one beam-decode pass.
#[allow(clippy::too_many_arguments)]
pub fn eval_cmd(
    data: &Path,
    generator: &Path,
    pairs_path: &Path,
    retrieval: &Path,
    retrieval_new: &Path,
    split: Split,
    out: &Path,
) -> Result<EvalReport> {
    let world = World::load(data)?;
    let (gen, gen_sidecar) = load_generator(generator)?;
    let (retr, retr_sidecar) = load_retrieval(retrieval)?;
    let (retr_new, retr_new_sidecar) = load_retrieval(retrieval_new)?;
    for (s, p) in [
        (&gen_sidecar, generator),
        (&retr_sidecar, retrieval),
        (&retr_new_sidecar, retrieval_new),
    ] {
        check_hash(s, &world.hash, p)?;
    }
    let (_, pairs) = load_pair_file(pairs_path)?;
    let records = world.dataset.split(split);
    let captions = decode_split(&gen, records)?;
    let stats = world.stats(split)?;
    let label = gen_sidecar.config["label"].as_str().unwrap_or("generator").to_string();
    let inputs = EvalInputs {
        split: records,
        pairs: &pairs,
        stats: &stats,
        vocab: &world.vocab,
        model_label: label,
        seed: gen_sidecar.seed,
        dataset_hash: world.hash.clone(),
        retrieval_id: retr_sidecar.id.clone(),
        independent_id: retr_new_sidecar.id.clone(),
    };
    let full = full_report(&captions, &retr, &retr_new, &inputs)?;
    fs::write(out, serde_json::to_string_pretty(&full.report)?)?;
    let mut decisions = String::new();
    decisions.push_str(&serde_json::to_string(&serde_json::json!({
        "model": full.report.model,
        "bleu4_unsmoothed": full.bleu4_unsmoothed,
        "retrieval": retr_sidecar.id,
        "retrieval_new": retr_new_sidecar.id,
        "generator": gen_sidecar.id,
    }))?);
    decisions.push('\n');
    for d in &full.decisions {
        decisions.push_str(&serde_json::to_string(d)?);
        decisions.push('\n');
    }
    fs::write(path_with_suffix(out, ".decisions.jsonl"), decisions)?;
    let mut caps = String::new();
    for (id, text) in &full.captions {
        let logprob = captions[id].total_logprob().unwrap_or(0.0);
        caps.push_str(&serde_json::to_string(&serde_json::json!({
            "scene_id": id, "caption": text, "logprob": logprob, "mode": "beam",
        }))?);
        caps.push('\n');
    }
    fs::write(path_with_suffix(out, ".captions.jsonl"), caps)?;
    Ok(full.report)
}

/// `report`: side-by-side table over saved report files.
pub fn report_cmd(inputs: &[PathBuf]) -> Result<String> {
    let mut reports = Vec::with_capacity(inputs.len());
    for p in inputs {
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(p).map_err(|e| {
            Error::config(format!("cannot read report {}: {e}", p.display()))
        })?)?;
        reports.push(r);
    }
    if reports.is_empty() {
        return Err(Error::config("no report files given"));
    }
    Ok(render_table(&reports))
}

/// Convenience constructor used by tests and the Python bindings.
pub fn default_generator_config(variant: Variant, feature_dim: usize) -> GeneratorConfig {
    let mut cfg = GeneratorConfig::new(variant);
    cfg.feature_dim = feature_dim;
    cfg
}
