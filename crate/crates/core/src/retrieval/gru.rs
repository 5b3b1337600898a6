//! Single-layer GRU over embedded token ids, with hand-derived BPTT.
//!
//! Gate order in the stacked weights is [reset, update, candidate]:
//!   r = σ(Wr x + Ur h + br)
//!   z = σ(Wz x + Uz h + bz)
//!   n = tanh(Wn x + Un (r ⊙ h) + bn)
//!   h' = z ⊙ h + (1 − z) ⊙ n

use crate::numerics::linalg::{matvec_add, matvec_t_add, outer_add, sigmoid};

#[derive(Debug, Clone, Copy)]
pub struct GruDims {
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruStep {
    pub word: usize,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    pub rh: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    pub steps: Vec<GruStep>,
}

impl GruCache {
    pub fn final_hidden(&self) -> &[f64] {
        self.steps.last().map(|s| s.h.as_slice()).unwrap_or(&[])
    }
}

pub fn forward(
    dims: GruDims,
    embed: &[f64],
    wx: &[f64],
    wh: &[f64],
    b: &[f64],
    ids: &[usize],
) -> GruCache {
    let (inp, h) = (dims.input, dims.hidden);
    let mut prev = vec![0.0; h];
    let mut steps = Vec::with_capacity(ids.len());
    for &word in ids {
        let x = &embed[word * inp..(word + 1) * inp];
        let mut pre = b.to_vec();
        matvec_add(wx, x, &mut pre, 3 * h, inp);
        // reset and update gates see h_prev directly
        matvec_add(&wh[..2 * h * h], &prev, &mut pre[..2 * h], 2 * h, h);
        let r: Vec<f64> = pre[..h].iter().map(|&v| sigmoid(v)).collect();
        let z: Vec<f64> = pre[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let rh: Vec<f64> = r.iter().zip(&prev).map(|(ri, hi)| ri * hi).collect();
        matvec_add(&wh[2 * h * h..], &rh, &mut pre[2 * h..], h, h);
        let n: Vec<f64> = pre[2 * h..].iter().map(|&v| v.tanh()).collect();
        let hnew: Vec<f64> = (0..h)
            .map(|k| z[k] * prev[k] + (1.0 - z[k]) * n[k])
            .collect();
        steps.push(GruStep {
            word,
            r,
            z,
            n,
            rh,
            h: hnew.clone(),
        });
        prev = hnew;
    }
    GruCache { steps }
}

/// Backpropagates `d_final` (gradient at the last hidden state) through the
/// whole sequence, accumulating weight, bias and embedding-row gradients.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    dims: GruDims,
    embed: &[f64],
    wx: &[f64],
    wh: &[f64],
    cache: &GruCache,
    d_final: &[f64],
    g_wx: &mut [f64],
    g_wh: &mut [f64],
    g_b: &mut [f64],
    g_embed: &mut [f64],
) {
    let (inp, h) = (dims.input, dims.hidden);
    let zero = vec![0.0; h];
    let mut dh = d_final.to_vec();
    for (t, step) in cache.steps.iter().enumerate().rev() {
        let h_prev: &[f64] = if t == 0 { &zero } else { &cache.steps[t - 1].h };
        let mut dpre = vec![0.0; 3 * h];
        let mut dh_prev = vec![0.0; h];
        for k in 0..h {
            let dz = dh[k] * (h_prev[k] - step.n[k]);
            dpre[h + k] = dz * step.z[k] * (1.0 - step.z[k]);
            let dn = dh[k] * (1.0 - step.z[k]);
            dpre[2 * h + k] = dn * (1.0 - step.n[k] * step.n[k]);
            dh_prev[k] += dh[k] * step.z[k];
        }
        // through the candidate's reset-gated recurrence
        let mut drh = vec![0.0; h];
        matvec_t_add(&wh[2 * h * h..], &dpre[2 * h..], &mut drh, h, h);
        for k in 0..h {
            let dr = drh[k] * h_prev[k];
            dpre[k] = dr * step.r[k] * (1.0 - step.r[k]);
            dh_prev[k] += drh[k] * step.r[k];
        }
        matvec_t_add(&wh[..2 * h * h], &dpre[..2 * h], &mut dh_prev, 2 * h, h);

        let x = &embed[step.word * inp..(step.word + 1) * inp];
        outer_add(1.0, &dpre[..h], h_prev, &mut g_wh[..h * h]);
        outer_add(1.0, &dpre[h..2 * h], h_prev, &mut g_wh[h * h..2 * h * h]);
        outer_add(1.0, &dpre[2 * h..], &step.rh, &mut g_wh[2 * h * h..]);
        outer_add(1.0, &dpre, x, g_wx);
        for k in 0..3 * h {
            g_b[k] += dpre[k];
        }
        let row = &mut g_embed[step.word * inp..(step.word + 1) * inp];
        matvec_t_add(wx, &dpre, row, 3 * h, inp);

        dh = dh_prev;
    }
}
