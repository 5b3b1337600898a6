//! Target/distractor pair construction for the discrimination evaluation:
//! visual nearest neighbors, ranked by word overlap of the captions a fixed
//! generator produced for them.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorPair {
    pub target_id: u64,
    pub distractor_id: u64,
    pub feature_distance: f64,
    pub caption_iou: f64,
}

/// First line of a pair file: which generator produced the ranking captions
/// and how the set was built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairFileHeader {
    pub generator_ckpt: String,
    pub split: String,
    pub n_pairs: usize,
    /// Images that appear in more than one pair (targets and distractors
    /// pooled); duplicates are allowed and only reported.
    pub duplicate_images: usize,
}

/// Token-set intersection over union of two captions.
pub fn caption_iou(a: &str, b: &str) -> f64 {
    let sa: HashSet<&str> = a.split_whitespace().collect();
    let sb: HashSet<&str> = b.split_whitespace().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// For each image in the split, pairs it with its visual nearest neighbor
/// (Euclidean distance on global features), then keeps the `n_pairs`
/// candidates with the highest caption overlap.
///
/// `baseline_captions` maps scene_id to the caption a fixed generator
/// produced for that image.
pub fn build_distractor_pairs(
    split: &[ImageRecord],
    baseline_captions: &HashMap<u64, String>,
    n_pairs: usize,
) -> Result<Vec<DistractorPair>> {
    if n_pairs > split.len() {
        return Err(Error::config(format!(
            "n_pairs {} exceeds split size {}",
            n_pairs,
            split.len()
        )));
    }
    if split.len() < 2 {
        return Err(Error::config("split too small to form pairs"));
    }
    for rec in split {
        if !baseline_captions.contains_key(&rec.scene_id) {
            return Err(Error::config(format!(
                "missing baseline caption for scene {}",
                rec.scene_id
            )));
        }
    }
    let mut candidates = Vec::with_capacity(split.len());
    for (i, rec) in split.iter().enumerate() {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, other) in split.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = euclidean(&rec.global, &other.global);
            if d < best_d || (d == best_d && other.scene_id < split[best].scene_id) {
                best_d = d;
                best = j;
            }
        }
        let target_cap = &baseline_captions[&rec.scene_id];
        let distractor_cap = &baseline_captions[&split[best].scene_id];
        candidates.push(DistractorPair {
            target_id: rec.scene_id,
            distractor_id: split[best].scene_id,
            feature_distance: best_d,
            caption_iou: caption_iou(target_cap, distractor_cap),
        });
    }
    candidates.sort_by(|a, b| {
        b.caption_iou
            .partial_cmp(&a.caption_iou)
            .unwrap()
            .then(a.feature_distance.partial_cmp(&b.feature_distance).unwrap())
            .then(a.target_id.cmp(&b.target_id))
    });
    candidates.truncate(n_pairs);
    Ok(candidates)
}

pub fn count_duplicate_images(pairs: &[DistractorPair]) -> usize {
    let mut seen: HashMap<u64, usize> = HashMap::new();
    for p in pairs {
        *seen.entry(p.target_id).or_insert(0) += 1;
        *seen.entry(p.distractor_id).or_insert(0) += 1;
    }
    seen.values().filter(|&&n| n > 1).count()
}

/// JSON-lines pair file: header line, then one pair per line.
pub fn write_pair_file(
    path: &Path,
    pairs: &[DistractorPair],
    generator_ckpt: &str,
    split: &str,
) -> Result<()> {
    let header = PairFileHeader {
        generator_ckpt: generator_ckpt.to_string(),
        split: split.to_string(),
        n_pairs: pairs.len(),
        duplicate_images: count_duplicate_images(pairs),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string(&header)?)?;
    for p in pairs {
        writeln!(f, "{}", serde_json::to_string(p)?)?;
    }
    Ok(())
}

pub fn load_pair_file(path: &Path) -> Result<(PairFileHeader, Vec<DistractorPair>)> {
    let f = fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open pair file {}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::config("empty pair file"))??;
    let header: PairFileHeader = serde_json::from_str(&header_line)?;
    let mut pairs = Vec::new();
    for line in lines {
        pairs.push(serde_json::from_str(&line?)?);
    }
    Ok((header, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{build_dataset, DatasetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn iou_hand_values() {
        assert_eq!(caption_iou("a red cube", "a red cube"), 1.0);
        // {a} / {a,red,cube,blue,ball}
        assert!((caption_iou("a red cube", "a blue ball") - 0.2).abs() < 1e-12);
        assert_eq!(caption_iou("x y", "z w"), 0.0);
    }

    fn toy_split() -> (Vec<ImageRecord>, HashMap<u64, String>) {
        let ds = build_dataset(&DatasetConfig {
            n_train: 2,
            n_val: 60,
            n_test: 2,
            ..DatasetConfig::default()
        })
        .unwrap();
        let caps: HashMap<u64, String> = ds
            .val
            .iter()
            .map(|r| (r.scene_id, r.refs[0].clone()))
            .collect();
        (ds.val, caps)
    }

    #[test]
    fn pairs_valid_and_ranked_by_iou() {
        let (split, caps) = toy_split();
        let pairs = build_distractor_pairs(&split, &caps, 20).unwrap();
        assert_eq!(pairs.len(), 20);
        let ids: HashSet<u64> = split.iter().map(|r| r.scene_id).collect();
        for w in pairs.windows(2) {
            assert!(w[0].caption_iou >= w[1].caption_iou);
        }
        for p in &pairs {
            assert_ne!(p.target_id, p.distractor_id);
            assert!(ids.contains(&p.target_id) && ids.contains(&p.distractor_id));
        }
    }

    #[test]
    fn identical_captions_rank_first() {
        use crate::synthworld::{Scene, SceneObject, Split};
        let scene = Scene {
            scene_id: 0,
            objects: vec![SceneObject {
                category: 0,
                color: 0,
                count: 1,
            }],
        };
        let mk = |id: u64, global: Vec<f64>| ImageRecord {
            scene_id: id,
            split: Split::Val,
            scene: Scene {
                scene_id: id,
                ..scene.clone()
            },
            global,
            regions: vec![],
            refs: vec![],
        };
        // Two well-separated clusters, so 0<->1 and 2<->3 are mutual NNs.
        let split = vec![
            mk(0, vec![0.0, 0.0]),
            mk(1, vec![0.1, 0.0]),
            mk(2, vec![10.0, 10.0]),
            mk(3, vec![10.2, 10.0]),
        ];
        let caps: HashMap<u64, String> = [
            (0, "a red cube"),
            (1, "a red cube"),
            (2, "a blue ball"),
            (3, "totally different words"),
        ]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect();
        let pairs = build_distractor_pairs(&split, &caps, 4).unwrap();
        assert_eq!(pairs[0].caption_iou, 1.0);
        assert_eq!(pairs[0].target_id, 0);
        assert_eq!(pairs[1].caption_iou, 1.0);
        assert!(pairs[2].caption_iou < 1.0);
    }

    #[test]
    fn n_pairs_too_large_errors() {
        let (split, caps) = toy_split();
        assert!(build_distractor_pairs(&split, &caps, split.len() + 1).is_err());
    }

    #[test]
    fn selected_pairs_closer_than_random() {
        let (split, caps) = toy_split();
        let pairs = build_distractor_pairs(&split, &caps, 30).unwrap();
        let mean_sel: f64 =
            pairs.iter().map(|p| p.feature_distance).sum::<f64>() / pairs.len() as f64;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut mean_rand = 0.0;
        let m = 500;
        for _ in 0..m {
            let i = rng.random_range(0..split.len());
            let mut j = rng.random_range(0..split.len());
            while j == i {
                j = rng.random_range(0..split.len());
            }
            mean_rand += euclidean(&split[i].global, &split[j].global);
        }
        mean_rand /= m as f64;
        assert!(
            mean_sel < mean_rand,
            "selected {mean_sel} vs random {mean_rand}"
        );
    }

    #[test]
    fn pair_file_round_trip() {
        let (split, caps) = toy_split();
        let pairs = build_distractor_pairs(&split, &caps, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_pair_file(&path, &pairs, "ckpt-abc", "val").unwrap();
        let (header, back) = load_pair_file(&path).unwrap();
        assert_eq!(header.generator_ckpt, "ckpt-abc");
        assert_eq!(header.n_pairs, 10);
        assert_eq!(back, pairs);
    }
}
