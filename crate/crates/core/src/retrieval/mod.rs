//! Visual-semantic embedding: images and captions are projected into a
//! joint space and compared by cosine similarity. Trained with a
//! hard-negative contrastive loss over in-batch negatives; once frozen it
//! doubles as the discriminability judge for generator training.

mod gru;
mod train;

pub use train::{train_retrieval, train_retrieval_with_vocab, RetrievalTrainConfig, RetrievalTrainOutcome};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::linalg::{matvec_add, matvec_t_add, norm2, outer_add};
use crate::numerics::{Init, ParamStore};
use crate::textcore::Caption;
use crate::{Error, Result};

use gru::{GruCache, GruDims};

/// Count of similarity calls that hit a degenerate (near-zero norm) vector.
/// Training should never touch it; it exists so the condition is observable.
pub static DEGENERATE_SIMS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub feature_dim: usize,
    pub word_dim: usize,
    pub hidden: usize,
    pub joint_dim: usize,
    pub margin: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            feature_dim: 64,
            word_dim: 64,
            hidden: 128,
            joint_dim: 128,
            margin: 0.2,
        }
    }
}

/// Joint-embedding model: image projection, word embedding + GRU caption
/// encoder, caption projection.
#[derive(Debug, Clone)]
pub struct RetrievalModel {
    pub cfg: RetrievalConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    ix: TensorIx,
}

#[derive(Debug, Clone, Copy)]
struct TensorIx {
    w_img: usize,
    wembed: usize,
    gru_wx: usize,
    gru_wh: usize,
    gru_b: usize,
    w_cap: usize,
}

impl RetrievalModel {
    pub fn init(cfg: RetrievalConfig, vocab_size: usize, seed: u64) -> RetrievalModel {
        let (d, we, h, e) = (cfg.feature_dim, cfg.word_dim, cfg.hidden, cfg.joint_dim);
        let spec: Vec<(&str, Vec<usize>, Init)> = vec![
            ("w_img", vec![d, e], Init::ScaledNormal { fan_in: d }),
            ("wembed", vec![vocab_size, we], Init::Uniform(0.1)),
            ("gru.wx", vec![3 * h, we], Init::ScaledNormal { fan_in: we }),
            ("gru.wh", vec![3 * h, h], Init::ScaledNormal { fan_in: h }),
            ("gru.b", vec![3 * h], Init::Uniform(0.0)),
            ("w_cap", vec![h, e], Init::ScaledNormal { fan_in: h }),
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamStore::init(&spec, &mut rng).expect("unique tensor names");
        // Keep-gate bias starts positive so the fresh encoder retains word
        // content across the whole caption instead of the last few tokens.
        let ib = params.idx("gru.b");
        params.data_mut(ib)[h..2 * h].iter_mut().for_each(|b| *b = 2.0);
        RetrievalModel::wrap(cfg, vocab_size, params)
    }

    pub fn wrap(cfg: RetrievalConfig, vocab_size: usize, params: ParamStore) -> RetrievalModel {
        let ix = TensorIx {
            w_img: params.idx("w_img"),
            wembed: params.idx("wembed"),
            gru_wx: params.idx("gru.wx"),
            gru_wh: params.idx("gru.wh"),
            gru_b: params.idx("gru.b"),
            w_cap: params.idx("w_cap"),
        };
        RetrievalModel {
            cfg,
            vocab_size,
            params,
            ix,
        }
    }

    pub fn from_checkpoint(params: ParamStore, config: &serde_json::Value) -> Result<RetrievalModel> {
        let cfg: RetrievalConfig = serde_json::from_value(config["retrieval"].clone())
            .map_err(|_| Error::config("checkpoint sidecar lacks a retrieval config"))?;
        let vocab_size = params.tensor(params.idx("wembed")).shape[0];
        Ok(RetrievalModel::wrap(cfg, vocab_size, params))
    }

    fn dims(&self) -> GruDims {
        GruDims {
            input: self.cfg.word_dim,
            hidden: self.cfg.hidden,
        }
    }

    /// f(I) = W_Iᵀ φ(I). No normalization here; cosine handles scale.
    pub fn encode_image(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let (d, e) = (self.cfg.feature_dim, self.cfg.joint_dim);
        if feature.len() != d {
            return Err(Error::DimMismatch(format!(
                "image feature has dim {}, model expects {}",
                feature.len(),
                d
            )));
        }
        let mut f = vec![0.0; e];
        matvec_t_add(self.params.data(self.ix.w_img), feature, &mut f, d, e);
        Ok(f)
    }

    /// g(c) = W_cᵀ · (final GRU hidden state over the embedded ids,
    /// BOS..EOS inclusive).
    pub fn encode_caption(&self, caption: &Caption) -> Vec<f64> {
        let cache = self.run_gru(caption);
        self.project_hidden(cache.final_hidden())
    }

    fn run_gru(&self, caption: &Caption) -> GruCache {
        let p = &self.params;
        gru::forward(
            self.dims(),
            p.data(self.ix.wembed),
            p.data(self.ix.gru_wx),
            p.data(self.ix.gru_wh),
            p.data(self.ix.gru_b),
            &caption.ids,
        )
    }

    fn project_hidden(&self, h: &[f64]) -> Vec<f64> {
        let (hd, e) = (self.cfg.hidden, self.cfg.joint_dim);
        let mut g = vec![0.0; e];
        matvec_t_add(self.params.data(self.ix.w_cap), h, &mut g, hd, e);
        g
    }
}

/// Cosine similarity; returns 0 (and counts the event) if either norm is
/// degenerate.
pub fn similarity(f: &[f64], g: &[f64]) -> f64 {
    let nf = norm2(f);
    let ng = norm2(g);
    if nf < 1e-12 || ng < 1e-12 {
        DEGENERATE_SIMS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (nf * ng)
}

/// B×B matrix of s(I_i, c_j); the diagonal holds the matched pairs.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub b: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_embeddings(f: &[Vec<f64>], g: &[Vec<f64>]) -> ScoreMatrix {
        let b = f.len();
        assert_eq!(b, g.len());
        let mut data = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                data[i * b + j] = similarity(&f[i], &g[j]);
            }
        }
        ScoreMatrix { b, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.b + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.b + j] = v;
    }

    pub fn zeros(b: usize) -> ScoreMatrix {
        ScoreMatrix {
            b,
            data: vec![0.0; b * b],
        }
    }
}

/// Hard negatives that carried gradient for one anchor; `None` when the
/// hinge was inactive (or there were no negatives).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveNegatives {
    pub caption: Option<usize>,
    pub image: Option<usize>,
}

/// Sum of two hinge losses per anchor — hardest mismatched caption and
/// hardest mismatched image — averaged over the batch. With B = 1 there are
/// no negatives and the loss is 0. Ties in the argmax break to the lowest
/// index, so the subgradient is deterministic.
pub fn contrastive_loss(scores: &ScoreMatrix, margin: f64) -> Result<(f64, Vec<ActiveNegatives>)> {
    let b = scores.b;
    let mut total = 0.0;
    let mut active = Vec::with_capacity(b);
    for i in 0..b {
        for j in 0..b {
            if !scores.get(i, j).is_finite() {
                return Err(Error::numerical(format!("non-finite score at ({i},{j})")));
            }
        }
        let pos = scores.get(i, i);
        let mut cap_neg: Option<usize> = None;
        let mut img_neg: Option<usize> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            if cap_neg.is_none_or(|best| scores.get(i, j) > scores.get(i, best)) {
                cap_neg = Some(j);
            }
            if img_neg.is_none_or(|best| scores.get(j, i) > scores.get(best, i)) {
                img_neg = Some(j);
            }
        }
        let mut anchor = ActiveNegatives {
            caption: None,
            image: None,
        };
        if let Some(j) = cap_neg {
            let hinge = margin + scores.get(i, j) - pos;
            if hinge > 0.0 {
                total += hinge;
                anchor.caption = Some(j);
            }
        }
        if let Some(j) = img_neg {
            let hinge = margin + scores.get(j, i) - pos;
            if hinge > 0.0 {
                total += hinge;
                anchor.image = Some(j);
            }
        }
        active.push(anchor);
    }
    Ok((total / b as f64, active))
}

/// dLoss/dS for the hard-negative subgradient of [`contrastive_loss`].
pub fn contrastive_loss_grad(b: usize, active: &[ActiveNegatives]) -> ScoreMatrix {
    let mut ds = ScoreMatrix::zeros(b);
    let w = 1.0 / b as f64;
    for (i, a) in active.iter().enumerate() {
        if let Some(j) = a.caption {
            ds.set(i, j, ds.get(i, j) + w);
            ds.set(i, i, ds.get(i, i) - w);
        }
        if let Some(j) = a.image {
            ds.set(j, i, ds.get(j, i) + w);
            ds.set(i, i, ds.get(i, i) - w);
        }
    }
    ds
}

/// Per-anchor contrastive values of generated captions against a frozen
/// model: the reward-side view of the same loss, with no gradients anywhere.
pub fn disc_loss(
    images: &[&[f64]],
    captions: &[Caption],
    model: &RetrievalModel,
) -> Result<Vec<f64>> {
    if images.len() != captions.len() {
        return Err(Error::config("image/caption batch size mismatch"));
    }
    let b = images.len();
    if b == 1 {
        eprintln!("warning: disc_loss over a batch of 1 has no negatives; reward signal vanishes");
        return Ok(vec![0.0]);
    }
    let f: Vec<Vec<f64>> = images
        .iter()
        .map(|img| model.encode_image(img))
        .collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = captions.iter().map(|c| model.encode_caption(c)).collect();
    let scores = ScoreMatrix::from_embeddings(&f, &g);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let pos = scores.get(i, i);
        let mut val = 0.0;
        let mut best_cap = f64::NEG_INFINITY;
        let mut best_img = f64::NEG_INFINITY;
        for j in 0..b {
            if j == i {
                continue;
            }
            best_cap = best_cap.max(scores.get(i, j));
            best_img = best_img.max(scores.get(j, i));
        }
        if !pos.is_finite() || !best_cap.is_finite() || !best_img.is_finite() {
            return Err(Error::numerical("non-finite score in disc_loss"));
        }
        val += (model.cfg.margin + best_cap - pos).max(0.0);
        val += (model.cfg.margin + best_img - pos).max(0.0);
        out.push(val);
    }
    Ok(out)
}

/// Forward-only batch loss; the value [`batch_loss_backward`] differentiates.
pub fn batch_loss(model: &RetrievalModel, features: &[&[f64]], captions: &[Caption]) -> Result<f64> {
    let f: Vec<Vec<f64>> = features
        .iter()
        .map(|x| model.encode_image(x))
        .collect::<Result<_>>()?;
    let g: Vec<Vec<f64>> = captions.iter().map(|c| model.encode_caption(c)).collect();
    let scores = ScoreMatrix::from_embeddings(&f, &g);
    Ok(contrastive_loss(&scores, model.cfg.margin)?.0)
}

/// One training batch: forward to a score matrix, contrastive loss, and the
/// full backward pass (gradients accumulate in the model's ParamStore).
pub fn batch_loss_backward(
    model: &mut RetrievalModel,
    features: &[&[f64]],
    captions: &[Caption],
) -> Result<f64> {
    let b = features.len();
    assert_eq!(b, captions.len());
    let margin = model.cfg.margin;
    let f: Vec<Vec<f64>> = features
        .iter()
        .map(|x| model.encode_image(x))
        .collect::<Result<_>>()?;
    let caches: Vec<GruCache> = captions.iter().map(|c| model.run_gru(c)).collect();
    let g: Vec<Vec<f64>> = caches
        .iter()
        .map(|c| model.project_hidden(c.final_hidden()))
        .collect();
    let scores = ScoreMatrix::from_embeddings(&f, &g);
    let (loss, active) = contrastive_loss(&scores, margin)?;
    let ds = contrastive_loss_grad(b, &active);

    // dS -> dF, dG through the cosine.
    let e = model.cfg.joint_dim;
    let mut df = vec![vec![0.0; e]; b];
    let mut dg = vec![vec![0.0; e]; b];
    for i in 0..b {
        for j in 0..b {
            let w = ds.get(i, j);
            if w == 0.0 {
                continue;
            }
            let (fi, gj) = (&f[i], &g[j]);
            let (nf, ng) = (norm2(fi), norm2(gj));
            if nf < 1e-12 || ng < 1e-12 {
                continue; // degenerate similarity contributed a constant 0
            }
            let s = scores.get(i, j);
            for k in 0..e {
                df[i][k] += w * (gj[k] / (nf * ng) - s * fi[k] / (nf * nf));
                dg[j][k] += w * (fi[k] / (nf * ng) - s * gj[k] / (ng * ng));
            }
        }
    }

    let ix = model.ix;
    let dims = model.dims();
    let h = model.cfg.hidden;
    // Image branch: dW_img += φ ⊗ dF.
    {
        let (_, grads) = model.params.split_mut();
        for i in 0..b {
            outer_add(1.0, features[i], &df[i], &mut grads[ix.w_img]);
        }
    }
    // Caption branch: dW_cap += h_T ⊗ dG; dh_T = W_cap dG; then BPTT.
    for j in 0..b {
        let mut dh = vec![0.0; h];
        let (tensors, grads) = model.params.split_mut();
        outer_add(1.0, caches[j].final_hidden(), &dg[j], &mut grads[ix.w_cap]);
        matvec_add(&tensors[ix.w_cap].data, &dg[j], &mut dh, h, e);
        let [g_wx, g_wh, g_b, g_embed] = grads
            .get_disjoint_mut([ix.gru_wx, ix.gru_wh, ix.gru_b, ix.wembed])
            .expect("distinct tensor indices");
        gru::backward(
            dims,
            &tensors[ix.wembed].data,
            &tensors[ix.gru_wx].data,
            &tensors[ix.gru_wh].data,
            &caches[j],
            &dh,
            g_wx,
            g_wh,
            g_b,
            g_embed,
        );
    }
    Ok(loss)
}

/// Recall@K in both directions plus median and mean rank, Table-1 style.
///
/// Caption retrieval ranks all captions for each image query (a hit when any
/// of the image's references is retrieved); image retrieval ranks all images
/// for each reference caption, so it averages over the five references.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub caption_retrieval: DirectionReport,
    pub image_retrieval: DirectionReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionReport {
    pub r_at: Vec<f64>,
    pub med_r: f64,
    pub mean_r: f64,
}

fn direction_report(ranks: &[usize], ks: &[usize]) -> DirectionReport {
    let n = ranks.len() as f64;
    let r_at = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();
    let mut sorted: Vec<usize> = ranks.to_vec();
    sorted.sort_unstable();
    let med_r = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 / 2.0
    };
    let mean_r = ranks.iter().sum::<usize>() as f64 / n;
    DirectionReport { r_at, med_r, mean_r }
}

/// `images`: global features; `refs`: per-image reference captions
/// (tokenized with the model's vocab by the caller).
pub fn recall_report(
    model: &RetrievalModel,
    images: &[&[f64]],
    refs: &[Vec<Caption>],
    ks: &[usize],
) -> Result<RecallReport> {
    let n = images.len();
    if n == 0 || refs.len() != n {
        return Err(Error::config("empty or mismatched recall inputs"));
    }
    let f: Vec<Vec<f64>> = images
        .iter()
        .map(|x| model.encode_image(x))
        .collect::<Result<_>>()?;
    let g: Vec<Vec<Vec<f64>>> = refs
        .iter()
        .map(|caps| caps.iter().map(|c| model.encode_caption(c)).collect())
        .collect();
    Ok(recall_from_embeddings(&f, &g, ks))
}

/// Rank computation on raw joint-space embeddings; `g[i]` holds the
/// embeddings of image i's references.
pub fn recall_from_embeddings(f: &[Vec<f64>], g: &[Vec<Vec<f64>>], ks: &[usize]) -> RecallReport {
    let n = f.len();
    // image -> all captions
    let mut cap_ranks = Vec::with_capacity(n);
    for i in 0..n {
        let own_best = g[i]
            .iter()
            .map(|gc| similarity(&f[i], gc))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut better = 0usize;
        for (j, caps) in g.iter().enumerate() {
            if j == i {
                continue;
            }
            better += caps
                .iter()
                .filter(|gc| similarity(&f[i], gc) > own_best)
                .count();
        }
        cap_ranks.push(better + 1);
    }

    // caption -> all images
    let mut img_ranks = Vec::new();
    for (j, caps) in g.iter().enumerate() {
        for gc in caps {
            let own = similarity(&f[j], gc);
            let better = (0..n)
                .filter(|&i| i != j && similarity(&f[i], gc) > own)
                .count();
            img_ranks.push(better + 1);
        }
    }

    RecallReport {
        ks: ks.to_vec(),
        caption_retrieval: direction_report(&cap_ranks, ks),
        image_retrieval: direction_report(&img_ranks, ks),
    }
}
