//! Conditional caption models: a feature-seeded LSTM (the image, projected
//! to word-embedding size, is the input at the very first step) and an
//! attention variant that re-reads per-object region features at every step
//! through an additive scorer.
//!
//! Both factorize p(c|I) over words; decoding never emits BOS or PAD (the
//! softmax itself stays over the full vocabulary, so recorded log-probs are
//! true model log-probs).

mod decode;

pub use decode::{beam_decode, greedy_decode, sample_decode, DecodeMode, DecodeResult};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::linalg::{log_softmax_at, matvec_add, matvec_t_add, outer_add, sigmoid, softmax_inplace};
use crate::numerics::{Init, ParamStore};
use crate::textcore::{Caption, BOS, PAD};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fc,
    Attn,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "fc" => Ok(Variant::Fc),
            "attn" => Ok(Variant::Attn),
            other => Err(Error::config(format!("unknown generator variant {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Fc => write!(f, "fc"),
            Variant::Attn => write!(f, "attn"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub max_len: usize,
}

impl GeneratorConfig {
    pub fn new(variant: Variant) -> GeneratorConfig {
        GeneratorConfig {
            variant,
            feature_dim: 64,
            word_dim: 64,
            hidden: 128,
            attn_dim: 64,
            max_len: crate::textcore::MAX_LEN,
        }
    }

    /// LSTM input width: the word embedding alone, or word embedding
    /// concatenated with the projected attention context.
    pub fn input_dim(&self) -> usize {
        match self.variant {
            Variant::Fc => self.word_dim,
            Variant::Attn => 2 * self.word_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub cfg: GeneratorConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    ix: TensorIx,
}

#[derive(Debug, Clone, Copy)]
struct TensorIx {
    wembed: usize,
    img_w: usize,
    img_b: usize,
    lstm_wx: usize,
    lstm_wh: usize,
    lstm_b: usize,
    out_w: usize,
    out_b: usize,
    attn_wr: usize,
    attn_wh: usize,
    attn_v: usize,
}

impl GeneratorModel {
    pub fn init(cfg: GeneratorConfig, vocab_size: usize, seed: u64) -> GeneratorModel {
        let (d, we, h, a) = (cfg.feature_dim, cfg.word_dim, cfg.hidden, cfg.attn_dim);
        let inp = cfg.input_dim();
        let mut spec: Vec<(&str, Vec<usize>, Init)> = vec![
            ("wembed", vec![vocab_size, we], Init::Uniform(0.1)),
            ("img_proj.w", vec![we, d], Init::ScaledNormal { fan_in: d }),
            ("img_proj.b", vec![we], Init::Uniform(0.0)),
            ("lstm.wx", vec![4 * h, inp], Init::ScaledNormal { fan_in: inp }),
            ("lstm.wh", vec![4 * h, h], Init::ScaledNormal { fan_in: h }),
            ("lstm.b", vec![4 * h], Init::Uniform(0.0)),
            ("out.w", vec![vocab_size, h], Init::ScaledNormal { fan_in: h }),
            ("out.b", vec![vocab_size], Init::Uniform(0.0)),
        ];
        if cfg.variant == Variant::Attn {
            spec.push(("attn.wr", vec![a, d], Init::ScaledNormal { fan_in: d }));
            spec.push(("attn.wh", vec![a, h], Init::ScaledNormal { fan_in: h }));
            spec.push(("attn.v", vec![a], Init::ScaledNormal { fan_in: a }));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamStore::init(&spec, &mut rng).expect("unique tensor names");
        // Forget-gate bias starts at 1 so cell memory survives a whole
        // caption at initialization.
        let ib = params.idx("lstm.b");
        params.data_mut(ib)[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        GeneratorModel::wrap(cfg, vocab_size, params)
    }

    pub fn wrap(cfg: GeneratorConfig, vocab_size: usize, params: ParamStore) -> GeneratorModel {
        let attn = cfg.variant == Variant::Attn;
        let ix = TensorIx {
            wembed: params.idx("wembed"),
            img_w: params.idx("img_proj.w"),
            img_b: params.idx("img_proj.b"),
            lstm_wx: params.idx("lstm.wx"),
            lstm_wh: params.idx("lstm.wh"),
            lstm_b: params.idx("lstm.b"),
            out_w: params.idx("out.w"),
            out_b: params.idx("out.b"),
            attn_wr: if attn { params.idx("attn.wr") } else { usize::MAX },
            attn_wh: if attn { params.idx("attn.wh") } else { usize::MAX },
            attn_v: if attn { params.idx("attn.v") } else { usize::MAX },
        };
        GeneratorModel {
            cfg,
            vocab_size,
            params,
            ix,
        }
    }

    pub fn from_checkpoint(params: ParamStore, config: &serde_json::Value) -> Result<GeneratorModel> {
        let cfg: GeneratorConfig = serde_json::from_value(config["generator"].clone())
            .map_err(|_| Error::config("checkpoint sidecar lacks a generator config"))?;
        let vocab_size = params.tensor(params.idx("wembed")).shape[0];
        Ok(GeneratorModel::wrap(cfg, vocab_size, params))
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState {
            h: vec![0.0; self.cfg.hidden],
            c: vec![0.0; self.cfg.hidden],
        }
    }

    /// Additive attention over region vectors, queried by the hidden state:
    /// e_i = vᵀ tanh(W_r r_i + W_h h), weights = softmax(e),
    /// context = Σ w_i r_i.
    pub fn attention(&self, hidden: &[f64], regions: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (weights, _us, ctx) = self.attention_inner(hidden, regions)?;
        Ok((weights, ctx))
    }

    fn attention_inner(
        &self,
        hidden: &[f64],
        regions: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        if regions.is_empty() {
            return Err(Error::config("attention over an empty region list"));
        }
        let (a, d) = (self.cfg.attn_dim, self.cfg.feature_dim);
        let p = &self.params;
        let (wr, wh, v) = (
            p.data(self.ix.attn_wr),
            p.data(self.ix.attn_wh),
            p.data(self.ix.attn_v),
        );
        let mut hq = vec![0.0; a];
        matvec_add(wh, hidden, &mut hq, a, self.cfg.hidden);
        let mut scores = Vec::with_capacity(regions.len());
        let mut us = Vec::with_capacity(regions.len());
        for r in regions {
            if r.len() != d {
                return Err(Error::DimMismatch(format!(
                    "region has dim {}, model expects {d}",
                    r.len()
                )));
            }
            let mut u = hq.clone();
            matvec_add(wr, r, &mut u, a, d);
            u.iter_mut().for_each(|x| *x = x.tanh());
            scores.push(u.iter().zip(v).map(|(ui, vi)| ui * vi).sum::<f64>());
            us.push(u);
        }
        softmax_inplace(&mut scores);
        let mut ctx = vec![0.0; d];
        for (w, r) in scores.iter().zip(regions) {
            for k in 0..d {
                ctx[k] += w * r[k];
            }
        }
        Ok((scores, us, ctx))
    }

    fn project_image(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let (we, d) = (self.cfg.word_dim, self.cfg.feature_dim);
        if feat.len() != d {
            return Err(Error::DimMismatch(format!(
                "image feature has dim {}, model expects {d}",
                feat.len()
            )));
        }
        let mut x = self.params.data(self.ix.img_b).to_vec();
        matvec_add(self.params.data(self.ix.img_w), feat, &mut x, we, d);
        Ok(x)
    }

    fn embed_word(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab_size {
            return Err(Error::IdOutOfRange {
                id,
                size: self.vocab_size,
            });
        }
        let we = self.cfg.word_dim;
        Ok(&self.params.data(self.ix.wembed)[id * we..(id + 1) * we])
    }

    /// One LSTM step. For the FC variant the very first step takes the
    /// projected image feature instead of a word; the ATTN variant attends
    /// over `img.regions` on every step.
    pub fn step(&self, state: &LstmState, input: StepInput, img: &ImageCtx) -> Result<(Vec<f64>, LstmState)> {
        let (x, _attn) = self.assemble_input(state, input, img)?;
        let (cell, logits) = self.lstm_logits(state, &x);
        Ok((
            logits,
            LstmState {
                h: cell.h,
                c: cell.c,
            },
        ))
    }

    fn assemble_input(
        &self,
        state: &LstmState,
        input: StepInput,
        img: &ImageCtx,
    ) -> Result<(Vec<f64>, Option<AttnCache>)> {
        match (self.cfg.variant, input) {
            (Variant::Fc, StepInput::Image) => Ok((self.project_image(img.global)?, None)),
            (Variant::Fc, StepInput::Word(id)) => Ok((self.embed_word(id)?.to_vec(), None)),
            (Variant::Attn, StepInput::Image) => Err(Error::config(
                "the attention variant has no image step; start from BOS",
            )),
            (Variant::Attn, StepInput::Word(id)) => {
                let (weights, us, ctx) = self.attention_inner(&state.h, img.regions)?;
                let ctx_proj = self.project_image(&ctx)?;
                let mut x = self.embed_word(id)?.to_vec();
                x.extend_from_slice(&ctx_proj);
                Ok((
                    x,
                    Some(AttnCache {
                        weights,
                        us,
                        ctx,
                    }),
                ))
            }
        }
    }

    fn lstm_logits(&self, state: &LstmState, x: &[f64]) -> (CellCache, Vec<f64>) {
        let h = self.cfg.hidden;
        let p = &self.params;
        let mut pre = p.data(self.ix.lstm_b).to_vec();
        matvec_add(p.data(self.ix.lstm_wx), x, &mut pre, 4 * h, x.len());
        matvec_add(p.data(self.ix.lstm_wh), &state.h, &mut pre, 4 * h, h);
        let gi: Vec<f64> = pre[..h].iter().map(|&v| sigmoid(v)).collect();
        let gf: Vec<f64> = pre[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let gg: Vec<f64> = pre[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
        let go: Vec<f64> = pre[3 * h..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..h).map(|k| gf[k] * state.c[k] + gi[k] * gg[k]).collect();
        let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|k| go[k] * tc[k]).collect();
        let mut logits = p.data(self.ix.out_b).to_vec();
        matvec_add(p.data(self.ix.out_w), &hn, &mut logits, self.vocab_size, h);
        (
            CellCache {
                gi,
                gf,
                gg,
                go,
                c,
                tc,
                h: hn,
            },
            logits,
        )
    }

    /// Total log p(c|I) with the per-step values, teacher-forced over
    /// w_1..EOS.
    pub fn caption_logprob(&self, caption: &Caption, img: &ImageCtx) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward_cached(caption, img)?;
        Ok((fwd.total_logprob, fwd.per_step))
    }

    /// Teacher-forced forward pass retaining everything BPTT needs.
    pub fn forward_cached(&self, caption: &Caption, img: &ImageCtx) -> Result<ForwardCache> {
        let n = caption.ids.len();
        if n < 2 {
            return Err(Error::config("caption must contain BOS and EOS"));
        }
        let mut steps: Vec<FwdStep> = Vec::with_capacity(n);
        let mut state = self.zero_state();
        if self.cfg.variant == Variant::Fc {
            let (x, attn) = self.assemble_input(&state, StepInput::Image, img)?;
            let (cell, _) = self.lstm_logits(&state, &x);
            state = LstmState {
                h: cell.h.clone(),
                c: cell.c.clone(),
            };
            steps.push(FwdStep {
                input: StepInput::Image,
                x,
                cell,
                attn,
                target: None,
                probs: Vec::new(),
                logprob: 0.0,
            });
        }
        let mut total = 0.0;
        let mut per_step = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let (x, attn) = self.assemble_input(&state, StepInput::Word(caption.ids[k]), img)?;
            let (cell, logits) = self.lstm_logits(&state, &x);
            state = LstmState {
                h: cell.h.clone(),
                c: cell.c.clone(),
            };
            let target = caption.ids[k + 1];
            if target >= self.vocab_size {
                return Err(Error::IdOutOfRange {
                    id: target,
                    size: self.vocab_size,
                });
            }
            let lp = log_softmax_at(&logits, target);
            total += lp;
            per_step.push(lp);
            let mut probs = logits;
            softmax_inplace(&mut probs);
            steps.push(FwdStep {
                input: StepInput::Word(caption.ids[k]),
                x,
                cell,
                attn,
                target: Some(target),
                probs,
                logprob: lp,
            });
        }
        Ok(ForwardCache {
            steps,
            total_logprob: total,
            per_step,
        })
    }

    /// BPTT through a cached forward pass. The loss differentiated is
    /// `weight · Σ_t −log p(w_t)`, i.e. dlogits_t = weight · (p_t − onehot).
    /// Gradients accumulate into the parameter store.
    pub fn backward(&mut self, cache: &ForwardCache, img: &ImageCtx, weight: f64) -> Result<()> {
        self.backward_inner(cache, img, weight, false, usize::MAX)
    }

    /// Policy-gradient BPTT matching the decoder's actual sampling
    /// distribution: per-step probabilities renormalized over emittable
    /// tokens (no gradient reaches BOS/PAD logits), and no gradient at a
    /// final EOS that was forced by the length cap — the sampler takes that
    /// step with probability one.
    pub fn backward_policy(
        &mut self,
        cache: &ForwardCache,
        img: &ImageCtx,
        weight: f64,
        final_eos_forced: bool,
    ) -> Result<()> {
        let last_scored = cache.steps.iter().rposition(|s| s.target.is_some());
        let skip = if final_eos_forced {
            last_scored.unwrap_or(usize::MAX)
        } else {
            usize::MAX
        };
        self.backward_inner(cache, img, weight, true, skip)
    }

    /// Log-probability of the caption under the decoding policy: softmax
    /// renormalized over emittable tokens per step, with a forced final EOS
    /// contributing zero.
    pub fn policy_logprob(
        &self,
        caption: &Caption,
        img: &ImageCtx,
        final_eos_forced: bool,
    ) -> Result<f64> {
        let cache = self.forward_cached(caption, img)?;
        let mut total = 0.0;
        let scored: Vec<&FwdStep> = cache.steps.iter().filter(|s| s.target.is_some()).collect();
        for (k, step) in scored.iter().enumerate() {
            if final_eos_forced && k + 1 == scored.len() {
                continue;
            }
            let target = step.target.expect("scored step");
            let masked: f64 = step.probs[BOS] + step.probs[PAD];
            total += (step.probs[target] / (1.0 - masked)).ln();
        }
        Ok(total)
    }

    fn backward_inner(
        &mut self,
        cache: &ForwardCache,
        img: &ImageCtx,
        weight: f64,
        policy_masked: bool,
        skip_step: usize,
    ) -> Result<()> {
        let cfg = self.cfg;
        let (h, we, d, v) = (cfg.hidden, cfg.word_dim, cfg.feature_dim, self.vocab_size);
        let ix = self.ix;
        let (tensors, grads) = self.params.split_mut();
        let mut dh = vec![0.0; h];
        let mut dc = vec![0.0; h];
        for (t, step) in cache.steps.iter().enumerate().rev() {
            let (h_prev, c_prev, zero);
            if t == 0 {
                zero = vec![0.0; h];
                h_prev = zero.as_slice();
                c_prev = zero.as_slice();
            } else {
                h_prev = cache.steps[t - 1].cell.h.as_slice();
                c_prev = cache.steps[t - 1].cell.c.as_slice();
            }
            // output head
            if let Some(target) = step.target {
                if t != skip_step {
                    let mut dlogits = step.probs.clone();
                    if policy_masked {
                        let masked = dlogits[BOS] + dlogits[PAD];
                        let renorm = 1.0 - masked;
                        for (id, p) in dlogits.iter_mut().enumerate() {
                            *p = if emittable(id) { *p / renorm } else { 0.0 };
                        }
                    }
                    dlogits[target] -= 1.0;
                    dlogits.iter_mut().for_each(|g| *g *= weight);
                    outer_add(1.0, &dlogits, &step.cell.h, &mut grads[ix.out_w]);
                    for (gb, dl) in grads[ix.out_b].iter_mut().zip(&dlogits) {
                        *gb += dl;
                    }
                    matvec_t_add(&tensors[ix.out_w].data, &dlogits, &mut dh, v, h);
                }
            }
            // cell
            let cell = &step.cell;
            let mut dpre = vec![0.0; 4 * h];
            for k in 0..h {
                let do_ = dh[k] * cell.tc[k];
                dc[k] += dh[k] * cell.go[k] * (1.0 - cell.tc[k] * cell.tc[k]);
                let di = dc[k] * cell.gg[k];
                let dg = dc[k] * cell.gi[k];
                let df = dc[k] * c_prev[k];
                dpre[k] = di * cell.gi[k] * (1.0 - cell.gi[k]);
                dpre[h + k] = df * cell.gf[k] * (1.0 - cell.gf[k]);
                dpre[2 * h + k] = dg * (1.0 - cell.gg[k] * cell.gg[k]);
                dpre[3 * h + k] = do_ * cell.go[k] * (1.0 - cell.go[k]);
                dc[k] *= cell.gf[k];
            }
            outer_add(1.0, &dpre, &step.x, &mut grads[ix.lstm_wx]);
            outer_add(1.0, &dpre, h_prev, &mut grads[ix.lstm_wh]);
            for (gb, dp) in grads[ix.lstm_b].iter_mut().zip(&dpre) {
                *gb += dp;
            }
            let mut dx = vec![0.0; step.x.len()];
            matvec_t_add(&tensors[ix.lstm_wx].data, &dpre, &mut dx, 4 * h, step.x.len());
            let mut dh_prev = vec![0.0; h];
            matvec_t_add(&tensors[ix.lstm_wh].data, &dpre, &mut dh_prev, 4 * h, h);

            // input path
            match (step.input, &step.attn) {
                (StepInput::Image, _) => {
                    outer_add(1.0, &dx, img.global, &mut grads[ix.img_w]);
                    for (gb, dxi) in grads[ix.img_b].iter_mut().zip(&dx) {
                        *gb += dxi;
                    }
                }
                (StepInput::Word(id), None) => {
                    let row = &mut grads[ix.wembed][id * we..(id + 1) * we];
                    for (r, dxi) in row.iter_mut().zip(&dx) {
                        *r += dxi;
                    }
                }
                (StepInput::Word(id), Some(attn)) => {
                    let (dx_embed, dx_ctxp) = dx.split_at(we);
                    let row = &mut grads[ix.wembed][id * we..(id + 1) * we];
                    for (r, dxi) in row.iter_mut().zip(dx_embed) {
                        *r += dxi;
                    }
                    // projected context
                    outer_add(1.0, dx_ctxp, &attn.ctx, &mut grads[ix.img_w]);
                    for (gb, dxi) in grads[ix.img_b].iter_mut().zip(dx_ctxp) {
                        *gb += dxi;
                    }
                    let mut dctx = vec![0.0; d];
                    matvec_t_add(&tensors[ix.img_w].data, dx_ctxp, &mut dctx, we, d);
                    // attention: dctx -> weights -> scores -> scorer params
                    let regions = img.regions;
                    let dw: Vec<f64> = regions
                        .iter()
                        .map(|r| r.iter().zip(&dctx).map(|(ri, di)| ri * di).sum())
                        .collect();
                    let wsum: f64 = attn.weights.iter().zip(&dw).map(|(w, g)| w * g).sum();
                    let a = cfg.attn_dim;
                    for (j, u) in attn.us.iter().enumerate() {
                        let de = attn.weights[j] * (dw[j] - wsum);
                        // de -> v and u
                        let vvec = &tensors[ix.attn_v].data;
                        let mut dpre_u = vec![0.0; a];
                        for k in 0..a {
                            grads[ix.attn_v][k] += de * u[k];
                            dpre_u[k] = de * vvec[k] * (1.0 - u[k] * u[k]);
                        }
                        outer_add(1.0, &dpre_u, &regions[j], &mut grads[ix.attn_wr]);
                        outer_add(1.0, &dpre_u, h_prev, &mut grads[ix.attn_wh]);
                        matvec_t_add(&tensors[ix.attn_wh].data, &dpre_u, &mut dh_prev, a, h);
                    }
                }
            }
            dh = dh_prev;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepInput {
    /// Projected image feature fed as the initial "word" (FC variant only).
    Image,
    Word(usize),
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Image-side context for one decode: the global feature and (for the ATTN
/// variant) the per-object region features.
#[derive(Debug, Clone, Copy)]
pub struct ImageCtx<'a> {
    pub global: &'a [f64],
    pub regions: &'a [Vec<f64>],
}

#[derive(Debug, Clone)]
struct CellCache {
    gi: Vec<f64>,
    gf: Vec<f64>,
    gg: Vec<f64>,
    go: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    weights: Vec<f64>,
    us: Vec<Vec<f64>>,
    ctx: Vec<f64>,
}

#[derive(Debug, Clone)]
struct FwdStep {
    input: StepInput,
    x: Vec<f64>,
    cell: CellCache,
    attn: Option<AttnCache>,
    target: Option<usize>,
    probs: Vec<f64>,
    #[allow(dead_code)]
    logprob: f64,
}

/// Cached teacher-forced pass; input to [`GeneratorModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: Vec<FwdStep>,
    pub total_logprob: f64,
    pub per_step: Vec<f64>,
}

/// Tokens a decoder may emit: everything except BOS and PAD.
pub(crate) fn emittable(id: usize) -> bool {
    id != BOS && id != PAD
}
