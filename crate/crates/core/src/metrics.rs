//! Consensus and diversity metrics: CIDEr-D (the RL reward and the report
//! metric), corpus BLEU-4, and diversity statistics.
//!
//! CIDEr-D here is the count-clipped, length-penalized variant: per-n TF-IDF
//! vectors, candidate counts clipped at the reference counts, cosine
//! similarity averaged over n=1..4 and over the references, a Gaussian
//! length penalty with sigma 6, and a factor of 10.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const CIDER_NGRAM_MAX: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// Document-frequency table over a reference corpus, frozen at build time.
/// Candidates never update it.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramStats {
    /// Per n (index 0 = unigrams): n-gram -> number of images whose
    /// reference set contains it.
    df: Vec<HashMap<String, u64>>,
    pub n_images: usize,
}

fn ngram_key(tokens: &[&str]) -> String {
    tokens.join("\u{1f}")
}

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<String, u64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(ngram_key(w)).or_insert(0) += 1;
        }
    }
    out
}

impl NGramStats {
    /// `refs`: per image, the list of reference captions.
    pub fn build<S: AsRef<str>>(refs: &[Vec<S>]) -> Result<NGramStats> {
        if refs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut df = vec![HashMap::new(); CIDER_NGRAM_MAX];
        for image_refs in refs {
            let mut seen: Vec<std::collections::HashSet<String>> =
                vec![Default::default(); CIDER_NGRAM_MAX];
            for r in image_refs {
                let toks: Vec<&str> = r.as_ref().split_whitespace().collect();
                for n in 1..=CIDER_NGRAM_MAX {
                    for key in ngram_counts(&toks, n).into_keys() {
                        seen[n - 1].insert(key);
                    }
                }
            }
            for n in 0..CIDER_NGRAM_MAX {
                for key in seen[n].drain() {
                    *df[n].entry(key).or_insert(0) += 1;
                }
            }
        }
        Ok(NGramStats {
            df,
            n_images: refs.len(),
        })
    }

    fn idf(&self, n: usize, key: &str) -> f64 {
        let df = self.df[n].get(key).copied().unwrap_or(0).max(1) as f64;
        (self.n_images as f64 / df).ln()
    }
}

/// TF-IDF vector of one caption for one n, as (key, count * idf) pairs in
/// sorted key order plus the L2 norm. Sorted iteration keeps every floating
/// sum in a deterministic order, so scores are bit-identical across runs.
fn tfidf_vec(tokens: &[&str], n: usize, stats: &NGramStats) -> (Vec<(String, f64)>, f64) {
    let counts = ngram_counts(tokens, n + 1);
    let mut vec: Vec<(String, f64)> = counts
        .into_iter()
        .map(|(key, count)| {
            let w = count as f64 * stats.idf(n, &key);
            (key, w)
        })
        .collect();
    vec.sort_by(|a, b| a.0.cmp(&b.0));
    let norm_sq: f64 = vec.iter().map(|(_, w)| w * w).sum();
    (vec, norm_sq.sqrt())
}

struct RefVectors {
    // sorted-vector form for iteration plus a map for clip lookups
    per_n: Vec<(Vec<(String, f64)>, HashMap<String, f64>, f64)>,
    len: f64,
}

/// Reference-side TF-IDF vectors precomputed once; scoring a candidate
/// against an image is then linear in the candidate's n-grams. This is the
/// hot path of the policy-gradient reward.
pub struct CiderScorer<'a> {
    stats: &'a NGramStats,
    refs: Vec<Vec<RefVectors>>,
}

impl<'a> CiderScorer<'a> {
    pub fn new<R: AsRef<str>>(refs: &[Vec<R>], stats: &'a NGramStats) -> Result<CiderScorer<'a>> {
        let prepared = refs
            .iter()
            .map(|image_refs| {
                if image_refs.is_empty() {
                    return Err(Error::config("image with no references"));
                }
                Ok(image_refs
                    .iter()
                    .map(|r| {
                        let toks: Vec<&str> = r.as_ref().split_whitespace().collect();
                        RefVectors {
                            per_n: (0..CIDER_NGRAM_MAX)
                                .map(|n| {
                                    let (vec, norm) = tfidf_vec(&toks, n, stats);
                                    let map = vec.iter().cloned().collect();
                                    (vec, map, norm)
                                })
                                .collect(),
                            len: toks.len() as f64,
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(CiderScorer {
            stats,
            refs: prepared,
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// CIDEr-D of one candidate against image `idx`'s references.
    pub fn score(&self, idx: usize, candidate: &str) -> f64 {
        let cand_toks: Vec<&str> = candidate.split_whitespace().collect();
        let cand_len = cand_toks.len() as f64;
        let cand_vecs: Vec<(Vec<(String, f64)>, f64)> = (0..CIDER_NGRAM_MAX)
            .map(|n| tfidf_vec(&cand_toks, n, self.stats))
            .collect();
        let image_refs = &self.refs[idx];
        let mut per_n = [0.0; CIDER_NGRAM_MAX];
        for r in image_refs {
            let delta = cand_len - r.len;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..CIDER_NGRAM_MAX {
                let (_, ref_map, ref_norm) = &r.per_n[n];
                let (cand_vec, cand_norm) = &cand_vecs[n];
                let mut num = 0.0;
                for (key, cw) in cand_vec {
                    if let Some(&rw) = ref_map.get(key) {
                        num += cw.min(rw) * rw;
                    }
                }
                if *cand_norm > 0.0 && *ref_norm > 0.0 {
                    per_n[n] += num / (cand_norm * ref_norm) * penalty;
                }
            }
        }
        let m = image_refs.len() as f64;
        10.0 * per_n.iter().map(|v| v / m).sum::<f64>() / CIDER_NGRAM_MAX as f64
    }
}

/// Per-image CIDEr-D scores and their corpus mean, each in [0, 10].
pub fn cider_d<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    refs: &[Vec<R>],
    stats: &NGramStats,
) -> Result<(Vec<f64>, f64)> {
    if candidates.len() != refs.len() {
        return Err(Error::config(format!(
            "candidate/reference count mismatch: {} vs {}",
            candidates.len(),
            refs.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scorer = CiderScorer::new(refs, stats)?;
    let scores: Vec<f64> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| scorer.score(i, c.as_ref()))
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    pub smoothed: f64,
    pub unsmoothed: f64,
}

/// Corpus BLEU-4: geometric mean of clipped n-gram precisions times the
/// brevity penalty. The smoothed variant adds +1 to numerator and
/// denominator of any higher-order precision that would otherwise be zero,
/// which keeps the score finite on small corpora.
pub fn bleu4<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], refs: &[Vec<R>]) -> Result<BleuScore> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != refs.len() {
        return Err(Error::config("candidate/reference count mismatch"));
    }
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, image_refs) in candidates.iter().zip(refs) {
        let cand_toks: Vec<&str> = cand.as_ref().split_whitespace().collect();
        cand_len += cand_toks.len() as u64;
        // closest reference length; ties go to the shorter one
        let closest = image_refs
            .iter()
            .map(|r| r.as_ref().split_whitespace().count() as u64)
            .min_by_key(|&l| {
                let diff = (l as i64 - cand_toks.len() as i64).unsigned_abs();
                (diff, l)
            })
            .unwrap_or(0);
        ref_len += closest;
        for n in 1..=4 {
            let cand_counts = ngram_counts(&cand_toks, n);
            let mut max_ref: HashMap<String, u64> = HashMap::new();
            for r in image_refs {
                let toks: Vec<&str> = r.as_ref().split_whitespace().collect();
                for (key, count) in ngram_counts(&toks, n) {
                    let e = max_ref.entry(key).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (key, count) in cand_counts {
                totals[n - 1] += count;
                matches[n - 1] += count.min(max_ref.get(&key).copied().unwrap_or(0));
            }
        }
    }
    let bp = if cand_len < ref_len && cand_len > 0 {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    let precision = |n: usize, smooth: bool| -> f64 {
        let (m, t) = (matches[n], totals[n]);
        if smooth && n >= 1 && m == 0 {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        } else if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        }
    };
    let geo = |smooth: bool| -> f64 {
        let mut log_sum = 0.0;
        for n in 0..4 {
            let p = precision(n, smooth);
            if p <= 0.0 {
                return 0.0;
            }
            log_sum += p.ln();
        }
        bp * (log_sum / 4.0).exp()
    };
    Ok(BleuScore {
        smoothed: geo(true),
        unsmoothed: geo(false),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiversityStats {
    pub distinct: usize,
    pub avg_len: f64,
}

/// Number of distinct caption strings and mean token count.
pub fn diversity_stats<S: AsRef<str>>(captions: &[S]) -> DiversityStats {
    let distinct: std::collections::HashSet<&str> =
        captions.iter().map(|c| c.as_ref()).collect();
    let total_tokens: usize = captions
        .iter()
        .map(|c| c.as_ref().split_whitespace().count())
        .sum();
    DiversityStats {
        distinct: distinct.len(),
        avg_len: if captions.is_empty() {
            0.0
        } else {
            total_tokens as f64 / captions.len() as f64
        },
    }
}

// --- binary sidecar cache -------------------------------------------------

const STATS_MAGIC: &[u8; 4] = b"DCNG";

/// Writes the stats to a binary sidecar keyed by the dataset hash.
pub fn save_stats(path: &Path, stats: &NGramStats, dataset_hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATS_MAGIC);
    buf.extend_from_slice(&(dataset_hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(dataset_hash.as_bytes());
    buf.extend_from_slice(&(stats.n_images as u64).to_le_bytes());
    for n in 0..CIDER_NGRAM_MAX {
        let mut entries: Vec<(&String, &u64)> = stats.df[n].iter().collect();
        entries.sort();
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (key, &count) in entries {
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            buf.extend_from_slice(&count.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Loads the sidecar if it exists and was built from the same dataset.
pub fn load_stats(path: &Path, dataset_hash: &str) -> Option<NGramStats> {
    let mut bytes = Vec::new();
    fs::File::open(path).ok()?.read_to_end(&mut bytes).ok()?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Option<&[u8]> {
        if *cur + n > bytes.len() {
            return None;
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Some(s)
    };
    if take(&mut cur, 4)? != STATS_MAGIC {
        return None;
    }
    let hash_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().ok()?) as usize;
    let hash = String::from_utf8(take(&mut cur, hash_len)?.to_vec()).ok()?;
    if hash != dataset_hash {
        return None;
    }
    let n_images = u64::from_le_bytes(take(&mut cur, 8)?.try_into().ok()?) as usize;
    let mut df = vec![HashMap::new(); CIDER_NGRAM_MAX];
    for map in df.iter_mut() {
        let entries = u64::from_le_bytes(take(&mut cur, 8)?.try_into().ok()?) as usize;
        for _ in 0..entries {
            let klen = u32::from_le_bytes(take(&mut cur, 4)?.try_into().ok()?) as usize;
            let key = String::from_utf8(take(&mut cur, klen)?.to_vec()).ok()?;
            let count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().ok()?);
            map.insert(key, count);
        }
    }
    Some(NGramStats { df, n_images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_refs() -> Vec<Vec<String>> {
        vec![
            vec![
                "a red cube on the table".into(),
                "a cube on the table".into(),
                "a red cube sits there".into(),
                "one red cube on a table".into(),
                "a red cube on the table".into(),
            ],
            vec![
                "two blue balls near the window".into(),
                "some balls near the window".into(),
                "two balls by the window".into(),
                "blue balls near a window".into(),
                "two blue balls near the window".into(),
            ],
            vec![
                "a green cone in the corner".into(),
                "a cone in the corner".into(),
                "one green cone stands alone".into(),
                "a green cone in a corner".into(),
                "a green cone in the corner".into(),
            ],
            vec![
                "three yellow disks on the floor".into(),
                "some disks on the floor".into(),
                "three disks lying on the floor".into(),
                "yellow disks on a floor".into(),
                "three yellow disks on the floor".into(),
            ],
            vec![
                "a purple star by the wall".into(),
                "a star by the wall".into(),
                "one purple star near a wall".into(),
                "a purple star by a wall".into(),
                "a purple star by the wall".into(),
            ],
        ]
    }

    #[test]
    fn cider_zero_for_disjoint_candidate() {
        let refs = toy_refs();
        let stats = NGramStats::build(&refs).unwrap();
        let candidates = vec![
            "zig zag zug zeg".to_string(),
            "two blue balls near the window".into(),
            "a green cone in the corner".into(),
            "three yellow disks on the floor".into(),
            "a purple star by the wall".into(),
        ];
        let (scores, _) = cider_d(&candidates, &refs, &stats).unwrap();
        assert_eq!(scores[0], 0.0);
        assert!(scores[1] > 5.0);
    }

    #[test]
    fn cider_identical_to_all_identical_refs_is_ten() {
        let refs: Vec<Vec<String>> = vec![
            vec!["a red cube on the table".to_string(); 5],
            vec!["two blue balls near the window".to_string(); 5],
        ];
        let stats = NGramStats::build(&refs).unwrap();
        let candidates = vec![
            "a red cube on the table".to_string(),
            "two blue balls near the window".to_string(),
        ];
        let (scores, mean) = cider_d(&candidates, &refs, &stats).unwrap();
        for s in &scores {
            assert!((s - 10.0).abs() < 1e-9, "score {s}");
        }
        assert!((mean - 10.0).abs() < 1e-9);
    }

    #[test]
    fn cider_empty_refs_is_error() {
        let refs: Vec<Vec<String>> = vec![vec![]];
        let stats = NGramStats::build(&toy_refs()).unwrap();
        assert!(cider_d(&["a".to_string()], &refs, &stats).is_err());
    }

    #[test]
    fn cider_permutation_invariant_mean() {
        let refs = toy_refs();
        let stats = NGramStats::build(&refs).unwrap();
        let candidates: Vec<String> = refs.iter().map(|r| r[1].as_str().to_string()).collect();
        let (_, mean) = cider_d(&candidates, &refs, &stats).unwrap();
        let perm: Vec<usize> = vec![3, 1, 4, 0, 2];
        let cand_p: Vec<String> = perm.iter().map(|&i| candidates[i].clone()).collect();
        let refs_p: Vec<Vec<String>> = perm.iter().map(|&i| refs[i].clone()).collect();
        let (_, mean_p) = cider_d(&cand_p, &refs_p, &stats).unwrap();
        assert!((mean - mean_p).abs() < 1e-12);
    }

    #[test]
    fn cider_local_optimum_at_reference() {
        // Single-token edits of a reference should not beat the reference
        // itself.
        let refs = toy_refs();
        let stats = NGramStats::build(&refs).unwrap();
        let base = "a red cube on the table".to_string();
        let score_one = |cand: &str| -> f64 {
            let mut cands: Vec<String> = refs.iter().map(|r| r[0].as_str().to_string()).collect();
            cands[0] = cand.to_string();
            cider_d(&cands, &refs, &stats).unwrap().0[0]
        };
        let best = score_one(&base);
        let words = ["blue", "ball", "window", "two"];
        let base_toks: Vec<&str> = base.split_whitespace().collect();
        for pos in 0..base_toks.len() {
            for w in words {
                let mut edited = base_toks.clone();
                edited[pos] = w;
                let s = score_one(&edited.join(" "));
                assert!(s <= best + 1e-12, "edit at {pos} with {w}: {s} > {best}");
            }
        }
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let refs = toy_refs();
        let candidates: Vec<String> = refs.iter().map(|r| r[0].as_str().to_string()).collect();
        let b = bleu4(&candidates, &refs).unwrap();
        assert!((b.smoothed - 1.0).abs() < 1e-12);
        assert!((b.unsmoothed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_disjoint_is_zero_unsmoothed() {
        let refs = toy_refs();
        let candidates = vec!["zig zag zug zeg".to_string(); 5];
        let b = bleu4(&candidates, &refs).unwrap();
        assert_eq!(b.unsmoothed, 0.0);
    }

    #[test]
    fn bleu_hand_computed_example() {
        // One image. cand: "a b c d", ref: "a b c e f".
        // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0 -> smoothed 1/(1+1).
        // BP = exp(1 - 5/4).
        let refs = vec![vec!["a b c e f".to_string()]];
        let candidates = vec!["a b c d".to_string()];
        let b = bleu4(&candidates, &refs).unwrap();
        let bp = (1.0_f64 - 5.0 / 4.0).exp();
        let expected_smoothed = bp * (0.75_f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert!((b.smoothed - expected_smoothed).abs() < 1e-9);
        assert_eq!(b.unsmoothed, 0.0);
    }

    #[test]
    fn bleu_empty_corpus_errors() {
        let refs: Vec<Vec<String>> = vec![];
        let candidates: Vec<String> = vec![];
        assert!(bleu4(&candidates, &refs).is_err());
    }

    #[test]
    fn diversity_counts() {
        let caps = vec!["a b c".to_string(); 100];
        let d = diversity_stats(&caps);
        assert_eq!(d.distinct, 1);
        assert!((d.avg_len - 3.0).abs() < 1e-12);

        let unique: Vec<String> = (0..50).map(|i| format!("cap {i}")).collect();
        assert_eq!(diversity_stats(&unique).distinct, 50);
    }

    #[test]
    fn stats_sidecar_round_trip() {
        let refs = toy_refs();
        let stats = NGramStats::build(&refs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ngrams.bin");
        save_stats(&path, &stats, "hash123").unwrap();
        let loaded = load_stats(&path, "hash123").unwrap();
        assert_eq!(loaded, stats);
        assert!(load_stats(&path, "otherhash").is_none());
    }
}
