//! Synthetic stand-in for a captioning dataset: latent scenes, noisy feature
//! vectors, five reference captions per image, and the distractor-pair set
//! used by the machine-discrimination evaluation.
//!
//! All generation is a pure function of `(config, seed)`; each scene draws
//! from its own rng stream (`seed ^ scene_id`) so output is identical no
//! matter how work is scheduled.

mod grammar;
mod pairs;

pub use grammar::{full_mention_caption, grammar_lexicon, reference_captions};
pub use pairs::{build_distractor_pairs, load_pair_file, write_pair_file, DistractorPair, PairFileHeader};

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::checkpoint::hex_digest;
use crate::textcore::Vocab;
use crate::{Error, Result};

pub const NUM_CATEGORIES: usize = 8;
pub const NUM_COLORS: usize = 6;
pub const MAX_COUNT: usize = 4;
pub const MAX_OBJECTS: usize = 3;

/// One-hot width of an object: category ⊕ color ⊕ count.
pub const OBJECT_CODE_DIM: usize = NUM_CATEGORIES + NUM_COLORS + MAX_COUNT;

pub const CATEGORIES: [&str; NUM_CATEGORIES] = [
    "cube", "ball", "cone", "block", "ring", "disk", "star", "bowl",
];
pub const COLORS: [&str; NUM_COLORS] = ["red", "blue", "green", "yellow", "purple", "orange"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub color: usize,
    pub count: usize,
}

/// Latent ground truth for one image: 1–3 objects with distinct categories,
/// kept sorted by category id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn is_valid(&self) -> bool {
        let n = self.objects.len();
        if n == 0 || n > MAX_OBJECTS {
            return false;
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.category >= NUM_CATEGORIES || o.color >= NUM_COLORS {
                return false;
            }
            if o.count < 1 || o.count > MAX_COUNT {
                return false;
            }
            if i > 0 && self.objects[i - 1].category >= o.category {
                return false;
            }
        }
        true
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("{}x {} {}", o.count, COLORS[o.color], CATEGORIES[o.category]))
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Noisy feature vectors standing in for CNN output: one global vector plus
/// one region vector per object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeature {
    pub global: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
}

/// Counts of valid scenes by object count, used to sample uniformly over
/// the whole scene space.
fn scene_counts() -> [u64; MAX_OBJECTS] {
    let per_object = (NUM_COLORS * MAX_COUNT) as u64;
    let mut out = [0u64; MAX_OBJECTS];
    for k in 1..=MAX_OBJECTS {
        let mut subsets = 1u64;
        for i in 0..k {
            subsets = subsets * (NUM_CATEGORIES - i) as u64 / (i + 1) as u64;
        }
        out[k - 1] = subsets * per_object.pow(k as u32);
    }
    out
}

/// Uniform sample over all valid scenes (so three-object scenes dominate,
/// in proportion to their share of the space).
pub fn gen_scene<R: Rng>(rng: &mut R) -> Scene {
    let counts = scene_counts();
    let total: u64 = counts.iter().sum();
    let mut u = rng.random_range(0..total);
    let mut k = MAX_OBJECTS;
    for (i, &c) in counts.iter().enumerate() {
        if u < c {
            k = i + 1;
            break;
        }
        u -= c;
    }
    // Uniform k-subset of categories.
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, NUM_CATEGORIES, k).into_vec();
    chosen.sort_unstable();
    let objects = chosen
        .into_iter()
        .map(|category| SceneObject {
            category,
            color: rng.random_range(0..NUM_COLORS),
            count: rng.random_range(1..=MAX_COUNT),
        })
        .collect();
    Scene {
        scene_id: 0,
        objects,
    }
}

/// Fixed random projection from object one-hots into feature space,
/// drawn once per dataset from the dataset seed.
#[derive(Debug, Clone)]
pub struct Projection {
    pub dim: usize,
    // dim × OBJECT_CODE_DIM, row-major
    pub weights: Vec<f64>,
}

impl Projection {
    pub fn from_seed(seed: u64, dim: usize) -> Projection {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x50524f4a); // "PROJ"
        let weights = (0..dim * OBJECT_CODE_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Projection { dim, weights }
    }

    fn encode_object(&self, o: &SceneObject) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let idxs = [
            o.category,
            NUM_CATEGORIES + o.color,
            NUM_CATEGORIES + NUM_COLORS + (o.count - 1),
        ];
        for &j in &idxs {
            for d in 0..self.dim {
                v[d] += self.weights[d * OBJECT_CODE_DIM + j];
            }
        }
        v
    }

    /// Noiseless global vector for a scene (mean of object encodings).
    pub fn clean_global(&self, scene: &Scene) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for o in &scene.objects {
            let v = self.encode_object(o);
            for d in 0..self.dim {
                g[d] += v[d];
            }
        }
        let n = scene.objects.len() as f64;
        g.iter_mut().for_each(|x| *x /= n);
        g
    }
}

/// Per-object vectors are the projected one-hots plus Gaussian noise; the
/// global vector is their mean plus its own noise draw.
pub fn scene_features<R: Rng>(
    scene: &Scene,
    projection: &Projection,
    noise_sigma: f64,
    rng: &mut R,
) -> ImageFeature {
    let mut regions = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let mut v = projection.encode_object(o);
        for x in v.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *x += noise_sigma * n;
        }
        regions.push(v);
    }
    let mut global = vec![0.0; projection.dim];
    for r in &regions {
        for d in 0..projection.dim {
            global[d] += r[d];
        }
    }
    let n = regions.len() as f64;
    for x in global.iter_mut() {
        *x /= n;
        let noise: f64 = StandardNormal.sample(rng);
        *x += noise_sigma * noise;
    }
    ImageFeature { global, regions }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other}"))),
        }
    }
}

pub const REFS_PER_IMAGE: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub scene_id: u64,
    pub split: Split,
    pub scene: Scene,
    pub global: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
    pub refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 2000,
            n_val: 300,
            n_test: 300,
            feature_dim: 64,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_train < 1 {
            bad.push("n_train");
        }
        if self.n_val < 1 {
            bad.push("n_val");
        }
        if self.n_test < 1 {
            bad.push("n_test");
        }
        if self.feature_dim < 1 {
            bad.push("feature_dim");
        }
        if !(self.noise_sigma >= 0.0) {
            bad.push("noise_sigma");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid dataset config field(s): {}", bad.join(", "))))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[ImageRecord] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Vocabulary over the train references. The grammar lexicon is appended
    /// once so val/test references can never hit UNK.
    pub fn vocab(&self) -> Vocab {
        let mut corpus: Vec<String> = self
            .train
            .iter()
            .flat_map(|r| r.refs.iter().cloned())
            .collect();
        corpus.push(grammar_lexicon().join(" "));
        Vocab::build(&corpus, 1).expect("train split is non-empty")
    }
}

/// Generates the full dataset. Scene ids are assigned sequentially across
/// train/val/test, so splits are disjoint by construction.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let projection = Projection::from_seed(config.seed, config.feature_dim);
    let mut next_id = 0u64;
    let mut gen_split = |n: usize, split: Split| -> Vec<ImageRecord> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let scene_id = next_id;
            next_id += 1;
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ scene_id);
            let mut scene = gen_scene(&mut rng);
            scene.scene_id = scene_id;
            let feature = scene_features(&scene, &projection, config.noise_sigma, &mut rng);
            let refs = reference_captions(&scene, &mut rng, REFS_PER_IMAGE);
            out.push(ImageRecord {
                scene_id,
                split,
                scene,
                global: feature.global,
                regions: feature.regions,
                refs,
            });
        }
        out
    };
    let train = gen_split(config.n_train, Split::Train);
    let val = gen_split(config.n_val, Split::Val);
    let test = gen_split(config.n_test, Split::Test);
    Ok(Dataset {
        config: config.clone(),
        train,
        val,
        test,
    })
}

impl Dataset {
    /// Writes `dataset.jsonl`, `vocab.json` and `meta.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("dataset.jsonl"))?;
        for rec in self.train.iter().chain(&self.val).chain(&self.test) {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}")?;
        }
        fs::write(dir.join("vocab.json"), self.vocab().to_json())?;
        let meta = serde_json::json!({
            "config": self.config,
            "images": self.train.len() + self.val.len() + self.test.len(),
            "refs_per_image": REFS_PER_IMAGE,
        });
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.join("meta.json"))
                .map_err(|e| Error::config(format!("cannot read dataset meta in {}: {e}", dir.display())))?,
        )?;
        let config: DatasetConfig = serde_json::from_value(meta["config"].clone())?;
        let f = fs::File::open(dir.join("dataset.jsonl"))?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for line in BufReader::new(f).lines() {
            let rec: ImageRecord = serde_json::from_str(&line?)?;
            match rec.split {
                Split::Train => train.push(rec),
                Split::Val => val.push(rec),
                Split::Test => test.push(rec),
            }
        }
        let ds = Dataset {
            config,
            train,
            val,
            test,
        };
        if ds.train.len() != ds.config.n_train
            || ds.val.len() != ds.config.n_val
            || ds.test.len() != ds.config.n_test
        {
            return Err(Error::config("dataset file does not match its meta config"));
        }
        Ok(ds)
    }

    /// sha256 of the serialized dataset file; identifies the dataset for
    /// checkpoint sidecars and eval consistency checks.
    pub fn hash_of_dir(dir: &Path) -> Result<String> {
        let bytes = fs::read(dir.join("dataset.jsonl"))
            .map_err(|e| Error::config(format!("cannot read dataset in {}: {e}", dir.display())))?;
        Ok(hex_digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_scene_deterministic_and_valid() {
        let a = gen_scene(&mut ChaCha12Rng::seed_from_u64(0));
        let b = gen_scene(&mut ChaCha12Rng::seed_from_u64(0));
        assert_eq!(a, b);
        for seed in 0..200 {
            let s = gen_scene(&mut ChaCha12Rng::seed_from_u64(seed));
            assert!(s.is_valid(), "invalid scene {s} from seed {seed}");
        }
    }

    #[test]
    fn gen_scene_category_frequencies() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut counts = [0usize; NUM_CATEGORIES];
        let mut slots = 0usize;
        for _ in 0..10_000 {
            let s = gen_scene(&mut rng);
            for o in &s.objects {
                counts[o.category] += 1;
                slots += 1;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            let freq = n as f64 / slots as f64;
            assert!(
                (freq - 1.0 / NUM_CATEGORIES as f64).abs() < 0.02,
                "category {c} frequency {freq}"
            );
        }
    }

    #[test]
    fn features_zero_noise_deterministic_and_injective() {
        let proj = Projection::from_seed(1, 32);
        let mut scene = gen_scene(&mut ChaCha12Rng::seed_from_u64(5));
        scene.scene_id = 7;
        let f1 = scene_features(&scene, &proj, 0.0, &mut ChaCha12Rng::seed_from_u64(9));
        let f2 = scene_features(&scene, &proj, 0.0, &mut ChaCha12Rng::seed_from_u64(10));
        assert_eq!(f1, f2, "zero noise ignores the rng");

        // Flip one object's color: globals must differ.
        let mut other = scene.clone();
        other.objects[0].color = (other.objects[0].color + 1) % NUM_COLORS;
        let g2 = scene_features(&other, &proj, 0.0, &mut ChaCha12Rng::seed_from_u64(9));
        let d: f64 = f1
            .global
            .iter()
            .zip(&g2.global)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(d.sqrt() > 1e-6);
    }

    #[test]
    fn same_scene_draws_closer_than_other_scenes() {
        // Nearest-neighbor oracle at default noise: distance between two
        // draws of the same scene should be smaller than to any
        // different-scene feature. Violation rate under 1%.
        let proj = Projection::from_seed(2, 64);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n = 1000;
        let scenes: Vec<Scene> = (0..n).map(|_| gen_scene(&mut rng)).collect();
        let draw_a: Vec<Vec<f64>> = scenes
            .iter()
            .map(|s| scene_features(s, &proj, 0.05, &mut rng).global)
            .collect();
        let draw_b: Vec<Vec<f64>> = scenes
            .iter()
            .map(|s| scene_features(s, &proj, 0.05, &mut rng).global)
            .collect();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        };
        let mut violations = 0;
        for i in 0..n {
            let own = dist(&draw_a[i], &draw_b[i]);
            for j in 0..n {
                if i != j && scenes[i] != scenes[j] && dist(&draw_a[i], &draw_b[j]) <= own {
                    violations += 1;
                    break;
                }
            }
        }
        assert!(
            (violations as f64) / (n as f64) < 0.01,
            "{violations} violations out of {n}"
        );
    }

    #[test]
    fn nearest_centroid_recovers_attribute_multiset() {
        let config = DatasetConfig {
            n_train: 400,
            n_val: 100,
            n_test: 100,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&config).unwrap();
        let proj = Projection::from_seed(config.seed, config.feature_dim);
        let all: Vec<&ImageRecord> = ds.train.iter().chain(&ds.val).chain(&ds.test).collect();
        let centroids: Vec<Vec<f64>> = all.iter().map(|r| proj.clean_global(&r.scene)).collect();
        let mut correct = 0;
        for (i, rec) in all.iter().enumerate() {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d: f64 = rec
                    .global
                    .iter()
                    .zip(c)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if all[best].scene.objects == rec.scene.objects {
                correct += 1;
            }
        }
        let acc = correct as f64 / all.len() as f64;
        assert!(acc >= 0.99, "separability {acc}");
    }

    #[test]
    fn dataset_default_shapes_and_disjoint_ids() {
        let config = DatasetConfig {
            n_train: 50,
            n_val: 10,
            n_test: 10,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&config).unwrap();
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 70);
        let total_refs: usize = ds.train.iter().map(|r| r.refs.len()).sum();
        assert_eq!(total_refs, 50 * REFS_PER_IMAGE);
        let train_ids: std::collections::HashSet<u64> =
            ds.train.iter().map(|r| r.scene_id).collect();
        assert!(ds.val.iter().all(|r| !train_ids.contains(&r.scene_id)));
    }

    #[test]
    fn dataset_bytes_identical_across_runs() {
        let config = DatasetConfig {
            n_train: 20,
            n_val: 5,
            n_test: 5,
            ..DatasetConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_dataset(&config).unwrap().save(d1.path()).unwrap();
        build_dataset(&config).unwrap().save(d2.path()).unwrap();
        let a = fs::read(d1.path().join("dataset.jsonl")).unwrap();
        let b = fs::read(d2.path().join("dataset.jsonl")).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            Dataset::hash_of_dir(d1.path()).unwrap(),
            Dataset::hash_of_dir(d2.path()).unwrap()
        );
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let config = DatasetConfig {
            n_train: 12,
            n_val: 4,
            n_test: 4,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.train.len(), 12);
        assert_eq!(back.val[0].refs, ds.val[0].refs);
        assert_eq!(back.test[3].global, ds.test[3].global);
    }

    #[test]
    fn invalid_config_lists_field() {
        let config = DatasetConfig {
            n_val: 0,
            ..DatasetConfig::default()
        };
        let err = build_dataset(&config).unwrap_err();
        assert!(err.to_string().contains("n_val"));
    }
}
