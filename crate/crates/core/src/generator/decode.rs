//! Greedy, ancestral-sampling and beam decoding against a frozen model.
//!
//! All modes record the full-softmax log-prob of every emitted token
//! (EOS included, even when it is forced at the length cap), so a decode's
//! total always equals `caption_logprob` of its caption.

use rand::Rng;

use super::{emittable, GeneratorModel, ImageCtx, LstmState, StepInput, Variant};
use crate::numerics::linalg::softmax_inplace;
use crate::textcore::{Caption, BOS, EOS};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
    Beam,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub caption: Caption,
    pub total_logprob: f64,
    pub mode: DecodeMode,
}

fn log_probs(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_inplace(&mut p);
    p.iter_mut().for_each(|x| *x = x.ln());
    p
}

fn initial_state(model: &GeneratorModel, img: &ImageCtx) -> Result<LstmState> {
    let state = model.zero_state();
    if model.cfg.variant == Variant::Fc {
        let (_, state) = model.step(&state, StepInput::Image, img)?;
        Ok(state)
    } else {
        Ok(state)
    }
}

fn finish(ids: Vec<usize>, lps: Vec<f64>, mode: DecodeMode) -> DecodeResult {
    let total = lps.iter().sum();
    let mut caption = Caption::new(ids);
    caption.logprobs = Some(lps);
    DecodeResult {
        caption,
        total_logprob: total,
        mode,
    }
}

fn argmax_emittable(lp: &[f64]) -> usize {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (id, &v) in lp.iter().enumerate() {
        if emittable(id) && v > best_v {
            best_v = v;
            best = id;
        }
    }
    best
}

fn decode_serial<F>(
    model: &GeneratorModel,
    img: &ImageCtx,
    max_len: usize,
    mode: DecodeMode,
    mut choose: F,
) -> Result<DecodeResult>
where
    F: FnMut(&[f64]) -> usize,
{
    let max_body = max_len.saturating_sub(2);
    let mut state = initial_state(model, img)?;
    let mut ids = vec![BOS];
    let mut lps = Vec::new();
    let mut prev = BOS;
    loop {
        let (logits, next_state) = model.step(&state, StepInput::Word(prev), img)?;
        state = next_state;
        let lp = log_probs(&logits);
        let body_len = ids.len() - 1;
        let chosen = if body_len >= max_body { EOS } else { choose(&lp) };
        ids.push(chosen);
        lps.push(lp[chosen]);
        if chosen == EOS {
            break;
        }
        prev = chosen;
    }
    Ok(finish(ids, lps, mode))
}

/// Argmax word per step (ties to the lowest id); stops at EOS, with EOS
/// forced once the body is full.
pub fn greedy_decode(model: &GeneratorModel, img: &ImageCtx, max_len: usize) -> Result<DecodeResult> {
    decode_serial(model, img, max_len, DecodeMode::Greedy, argmax_emittable)
}

/// Ancestral sampling from the per-step softmax, renormalized over the
/// emittable tokens; per-step log-probs feed the policy gradient.
pub fn sample_decode<R: Rng>(
    model: &GeneratorModel,
    img: &ImageCtx,
    rng: &mut R,
    max_len: usize,
) -> Result<DecodeResult> {
    decode_serial(model, img, max_len, DecodeMode::Sample, |lp| {
        let mass: f64 = lp
            .iter()
            .enumerate()
            .filter(|&(id, _)| emittable(id))
            .map(|(_, l)| l.exp())
            .sum();
        let u: f64 = rng.random::<f64>() * mass;
        let mut acc = 0.0;
        let mut last = EOS;
        for (id, l) in lp.iter().enumerate() {
            if !emittable(id) {
                continue;
            }
            acc += l.exp();
            last = id;
            if u < acc {
                return id;
            }
        }
        last
    })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    lps: Vec<f64>,
    total: f64,
    state: LstmState,
}

fn by_total_desc(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.total
        .partial_cmp(&a.total)
        .unwrap()
        .then_with(|| a.ids.len().cmp(&b.ids.len()))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Length-synchronous beam over total log-prob. EOS expansions compete for
/// beam slots; the ones that make the cut are held aside as finished.
/// Returns the finished hypothesis with the highest total log-prob — no
/// length normalization. The greedy rollout is kept in the finished pool
/// from the start, so the result never scores below greedy and beam = 1
/// reduces to greedy exactly.
pub fn beam_decode(
    model: &GeneratorModel,
    img: &ImageCtx,
    beam: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    assert!(beam >= 1, "beam width must be at least 1");
    let max_body = max_len.saturating_sub(2);
    let init = initial_state(model, img)?;
    let mut alive = vec![Hypothesis {
        ids: vec![BOS],
        lps: Vec::new(),
        total: 0.0,
        state: init.clone(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    {
        let greedy = greedy_decode(model, img, max_len)?;
        finished.push(Hypothesis {
            total: greedy.total_logprob,
            lps: greedy.caption.logprobs.clone().unwrap_or_default(),
            ids: greedy.caption.ids,
            state: init,
        });
    }
    while !alive.is_empty() {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &alive {
            let prev = *hyp.ids.last().unwrap();
            let (logits, state) = model.step(&hyp.state, StepInput::Word(prev), img)?;
            let lp = log_probs(&logits);
            let body_len = hyp.ids.len() - 1;
            if body_len >= max_body {
                let mut done = hyp.clone();
                done.ids.push(EOS);
                done.lps.push(lp[EOS]);
                done.total += lp[EOS];
                finished.push(done);
                continue;
            }
            for (id, &l) in lp.iter().enumerate() {
                if !emittable(id) {
                    continue;
                }
                let mut next = Hypothesis {
                    ids: hyp.ids.clone(),
                    lps: hyp.lps.clone(),
                    total: hyp.total + l,
                    state: state.clone(),
                };
                next.ids.push(id);
                next.lps.push(l);
                candidates.push(next);
            }
        }
        // EOS expansions compete for beam slots like any other token; the
        // ones that make the cut retire to the finished pool.
        candidates.sort_by(by_total_desc);
        candidates.truncate(beam);
        alive = Vec::with_capacity(beam);
        for c in candidates {
            if *c.ids.last().unwrap() == EOS {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
    }
    finished.sort_by(by_total_desc);
    let best = finished
        .into_iter()
        .next()
        .expect("beam search always finishes at least one hypothesis");
    Ok(finish(best.ids, best.lps, DecodeMode::Beam))
}
