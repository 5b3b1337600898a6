// does E[R(sample)] rise under scst training on a fixed batch?
use disccap_core::generator::{sample_decode, ImageCtx};
use disccap_core::metrics::NGramStats;
use disccap_core::numerics::OptState;
use disccap_core::pipeline::{load_generator, World};
use disccap_core::textcore::detokenize;
use disccap_core::training::{scst_step, RewardConfig, SceneScorer};
use rand::SeedableRng;

fn main() {
    let world = World::load(std::path::Path::new("/tmp/world0")).unwrap();
    let (mut gen, _) = load_generator(std::path::Path::new("/tmp/gen_mle40_s0.dcap")).unwrap();
    let vocab = &world.vocab;
    let refs: Vec<Vec<String>> = world.dataset.train.iter().map(|r| r.refs.clone()).collect();
    let stats = NGramStats::build(&refs).unwrap();
    let batch: Vec<_> = world.dataset.train.iter().take(64).collect();
    let scorer = SceneScorer::new(&world.dataset.train, &stats).unwrap();
    let cfg = RewardConfig::cider();
    let lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(2.7e-5);
    let steps: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let mut opt = OptState::new(&gen.params, lr);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);

    let expected_reward = |gen: &disccap_core::generator::GeneratorModel, n: usize| -> f64 {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(777);
        let mut total = 0.0;
        let mut texts = Vec::new();
        let mut rf = Vec::new();
        for _ in 0..n {
            for r in &batch {
                let img = ImageCtx { global: &r.global, regions: &r.regions };
                let d = sample_decode(gen, &img, &mut rng, 16).unwrap();
                texts.push(detokenize(&d.caption, vocab).unwrap());
                rf.push(r.refs.clone());
            }
        }
        let (scores, mean) = disccap_core::metrics::cider_d(&texts, &rf, &stats).unwrap();
        total += mean * scores.len() as f64;
        total / (n * batch.len()) as f64
    };
    println!("E[R] before: {:.4}", expected_reward(&gen, 40));
    for _ in 0..steps {
        scst_step(&mut gen, &batch, &cfg, None, &scorer, vocab, &mut opt, &mut rng).unwrap();
    }
    println!("E[R] after {steps} steps at lr {lr}: {:.4}", expected_reward(&gen, 40));
}
