//! Machine-discrimination evaluation on distractor pairs plus the full
//! report: one beam-decode pass over a split feeds every column (Acc,
//! Acc-new, BLEU4, CIDEr, distinct, avg_len).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::metrics::{bleu4, cider_d, diversity_stats, NGramStats};
use crate::retrieval::{similarity, RetrievalModel};
use crate::synthworld::{DistractorPair, ImageRecord};
use crate::textcore::{Caption, Vocab};
use crate::{Error, Result};

/// Outcome of one forced-choice pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDecision {
    pub target_id: u64,
    pub distractor_id: u64,
    pub s_target: f64,
    pub s_distractor: f64,
    pub correct: bool,
    pub tie: bool,
}

#[derive(Debug, Clone)]
pub struct DiscriminationResult {
    pub acc: f64,
    pub ties: usize,
    pub decisions: Vec<PairDecision>,
}

/// A pair counts as correct iff the caption generated for the target scores
/// strictly higher against the target than against the distractor; exact
/// ties count as incorrect (and are reported separately).
pub fn machine_discrimination(
    pairs: &[DistractorPair],
    captions: &HashMap<u64, Caption>,
    features: &HashMap<u64, &[f64]>,
    retrieval: &RetrievalModel,
) -> Result<DiscriminationResult> {
    if pairs.is_empty() {
        return Err(Error::config("empty pair set"));
    }
    let mut decisions = Vec::with_capacity(pairs.len());
    let mut correct = 0usize;
    let mut ties = 0usize;
    let mut embed_cache: HashMap<u64, Vec<f64>> = HashMap::new();
    for p in pairs {
        let caption = captions.get(&p.target_id).ok_or_else(|| {
            Error::config(format!("missing generated caption for target {}", p.target_id))
        })?;
        let g = retrieval.encode_caption(caption);
        for id in [p.target_id, p.distractor_id] {
            if !embed_cache.contains_key(&id) {
                let feat = features
                    .get(&id)
                    .ok_or_else(|| Error::config(format!("missing features for scene {id}")))?;
                embed_cache.insert(id, retrieval.encode_image(feat)?);
            }
        }
        let s_target = similarity(&embed_cache[&p.target_id], &g);
        let s_distractor = similarity(&embed_cache[&p.distractor_id], &g);
        let tie = s_target == s_distractor;
        let is_correct = s_target > s_distractor;
        if is_correct {
            correct += 1;
        }
        if tie {
            ties += 1;
        }
        decisions.push(PairDecision {
            target_id: p.target_id,
            distractor_id: p.distractor_id,
            s_target,
            s_distractor,
            correct: is_correct,
            tie,
        });
    }
    Ok(DiscriminationResult {
        acc: correct as f64 / pairs.len() as f64,
        ties,
        decisions,
    })
}

/// Same decision rule scored by an independently trained retrieval model.
/// Passing the model used during training is a configuration error.
pub fn acc_new(
    pairs: &[DistractorPair],
    captions: &HashMap<u64, Caption>,
    features: &HashMap<u64, &[f64]>,
    independent: &RetrievalModel,
    independent_id: &str,
    training_id: &str,
) -> Result<DiscriminationResult> {
    if independent_id == training_id {
        return Err(Error::config(
            "acc_new requires a retrieval model distinct from the training one",
        ));
    }
    machine_discrimination(pairs, captions, features, independent)
}

/// The flat report written to disk; field order is the file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub acc: f64,
    pub acc_new: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub distinct: usize,
    pub avg_len: f64,
    pub n_pairs: usize,
    pub ties: usize,
    pub dataset_hash: String,
}

/// Everything the report needs beyond the models themselves.
pub struct EvalInputs<'a> {
    pub split: &'a [ImageRecord],
    pub pairs: &'a [DistractorPair],
    pub stats: &'a NGramStats,
    pub vocab: &'a Vocab,
    pub model_label: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub retrieval_id: String,
    pub independent_id: String,
}

/// Full result: the flat report plus the per-pair decisions and a config
/// echo, kept out of the flat file.
pub struct FullReport {
    pub report: EvalReport,
    pub decisions: Vec<PairDecision>,
    pub decisions_new: Vec<PairDecision>,
    pub bleu4_unsmoothed: f64,
    pub captions: Vec<(u64, String)>,
}

/// Computes every column from a single set of beam decodes over the split.
/// `captions` maps scene_id to the beam-2 decode of that image.
pub fn full_report(
    captions: &HashMap<u64, Caption>,
    retrieval: &RetrievalModel,
    independent: &RetrievalModel,
    inputs: &EvalInputs,
) -> Result<FullReport> {
    let features: HashMap<u64, &[f64]> = inputs
        .split
        .iter()
        .map(|r| (r.scene_id, r.global.as_slice()))
        .collect();
    let disc = machine_discrimination(inputs.pairs, captions, &features, retrieval)?;
    let disc_new = acc_new(
        inputs.pairs,
        captions,
        &features,
        independent,
        &inputs.independent_id,
        &inputs.retrieval_id,
    )?;

    let mut texts = Vec::with_capacity(inputs.split.len());
    let mut refs = Vec::with_capacity(inputs.split.len());
    let mut dump = Vec::with_capacity(inputs.split.len());
    for rec in inputs.split {
        let caption = captions.get(&rec.scene_id).ok_or_else(|| {
            Error::config(format!("missing generated caption for scene {}", rec.scene_id))
        })?;
        let text = crate::textcore::detokenize(caption, inputs.vocab)?;
        dump.push((rec.scene_id, text.clone()));
        texts.push(text);
        refs.push(rec.refs.clone());
    }
    let (_, cider_mean) = cider_d(&texts, &refs, inputs.stats)?;
    let bleu = bleu4(&texts, &refs)?;
    let div = diversity_stats(&texts);

    Ok(FullReport {
        report: EvalReport {
            model: inputs.model_label.clone(),
            seed: inputs.seed,
            acc: disc.acc,
            acc_new: disc_new.acc,
            bleu4: bleu.smoothed,
            cider: cider_mean,
            distinct: div.distinct,
            avg_len: div.avg_len,
            n_pairs: inputs.pairs.len(),
            ties: disc.ties,
            dataset_hash: inputs.dataset_hash.clone(),
        },
        decisions: disc.decisions,
        decisions_new: disc_new.decisions,
        bleu4_unsmoothed: bleu.unsmoothed,
        captions: dump,
    })
}

/// Side-by-side table over several reports, one row per model.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>5} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}\n",
        "model", "seed", "Acc", "Acc-new", "BLEU4", "CIDEr", "distinct", "avg_len"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<28} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9} {:>8.2}\n",
            r.model, r.seed, r.acc, r.acc_new, r.bleu4, r.cider, r.distinct, r.avg_len
        ));
    }
    out
}
