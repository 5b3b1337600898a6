//! Brute-force scorers written straight from the metric definitions,
//! shared by the oracle tests and the acceptance suite. Independent of the
//! library implementations they are used to check.

#![allow(dead_code)]

use std::collections::HashMap;

const SIGMA: f64 = 6.0;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_string()).collect()
}

pub fn ngram_list(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

pub fn count_map(items: &[Vec<String>]) -> HashMap<Vec<String>, u64> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it.clone()).or_insert(0) += 1;
    }
    m
}

/// CIDEr-D from the definition: per-n TF-IDF vectors with candidate counts
/// clipped at the reference count, cosine per reference with a Gaussian
/// length penalty, averaged over references and n, times ten.
pub fn brute_force_cider_d(candidates: &[&str], refs: &[Vec<&str>]) -> Vec<f64> {
    let n_images = refs.len() as f64;
    // document frequencies per n
    let mut df: Vec<HashMap<Vec<String>, f64>> = vec![HashMap::new(); 4];
    for image_refs in refs {
        for n in 1..=4 {
            let mut seen: Vec<Vec<String>> = Vec::new();
            for r in image_refs {
                for g in ngram_list(&toks(r), n) {
                    if !seen.contains(&g) {
                        seen.push(g);
                    }
                }
            }
            for g in seen {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, g: &Vec<String>| -> f64 {
        let d = df[n - 1].get(g).copied().unwrap_or(0.0).max(1.0);
        (n_images / d).ln()
    };

    let mut out = Vec::new();
    for (cand, image_refs) in candidates.iter().zip(refs) {
        let ct = toks(cand);
        let mut total = 0.0;
        for n in 1..=4 {
            let c_counts = count_map(&ngram_list(&ct, n));
            let c_norm: f64 = c_counts
                .iter()
                .map(|(g, &c)| {
                    let w = c as f64 * idf(n, g);
                    w * w
                })
                .sum::<f64>()
                .sqrt();
            let mut per_ref_sum = 0.0;
            for r in image_refs {
                let rt = toks(r);
                let r_counts = count_map(&ngram_list(&rt, n));
                let r_norm: f64 = r_counts
                    .iter()
                    .map(|(g, &c)| {
                        let w = c as f64 * idf(n, g);
                        w * w
                    })
                    .sum::<f64>()
                    .sqrt();
                let mut dot = 0.0;
                for (g, &cc) in &c_counts {
                    if let Some(&rc) = r_counts.get(g) {
                        let cw = cc as f64 * idf(n, g);
                        let rw = rc as f64 * idf(n, g);
                        dot += cw.min(rw) * rw;
                    }
                }
                let delta = ct.len() as f64 - rt.len() as f64;
                let penalty = (-delta * delta / (2.0 * SIGMA * SIGMA)).exp();
                if c_norm > 0.0 && r_norm > 0.0 {
                    per_ref_sum += dot / (c_norm * r_norm) * penalty;
                }
            }
            total += per_ref_sum / image_refs.len() as f64;
        }
        out.push(10.0 * total / 4.0);
    }
    out
}

/// Corpus BLEU-4 from the definition, with the same +1 smoothing rule for
/// zero higher-order precisions.
pub fn brute_force_bleu4(candidates: &[&str], refs: &[Vec<&str>]) -> (f64, f64) {
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut c_len = 0u64;
    let mut r_len = 0u64;
    for (cand, image_refs) in candidates.iter().zip(refs) {
        let ct = toks(cand);
        c_len += ct.len() as u64;
        let mut best: Option<u64> = None;
        for r in image_refs {
            let l = toks(r).len() as u64;
            let better = match best {
                None => true,
                Some(b) => {
                    let (db, dl) = (
                        (b as i64 - ct.len() as i64).abs(),
                        (l as i64 - ct.len() as i64).abs(),
                    );
                    dl < db || (dl == db && l < b)
                }
            };
            if better {
                best = Some(l);
            }
        }
        r_len += best.unwrap_or(0);
        for n in 1..=4 {
            let c_counts = count_map(&ngram_list(&ct, n));
            for (g, &c) in &c_counts {
                totals[n - 1] += c;
                let max_ref = image_refs
                    .iter()
                    .map(|r| count_map(&ngram_list(&toks(r), n)).get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matches[n - 1] += c.min(max_ref);
            }
        }
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let score = |smooth: bool| -> f64 {
        let mut prod = 1.0;
        for n in 0..4 {
            let p = if smooth && n >= 1 && matches[n] == 0 {
                1.0 / (totals[n] as f64 + 1.0)
            } else if totals[n] == 0 {
                0.0
            } else {
                matches[n] as f64 / totals[n] as f64
            };
            if p <= 0.0 {
                return 0.0;
            }
            prod *= p;
        }
        bp * prod.powf(0.25)
    };
    (score(true), score(false))
}

