// scratch probe: does repeated scst_step on a fixed batch raise its own greedy reward?
use disccap_core::generator::{greedy_decode, ImageCtx};
use disccap_core::metrics::NGramStats;
use disccap_core::numerics::OptState;
use disccap_core::pipeline::{load_generator, World};
use disccap_core::synthworld::Split;
use disccap_core::textcore::detokenize;
use disccap_core::training::{scst_step, RewardConfig, SceneScorer};
use rand::SeedableRng;

fn main() {
    let world = World::load(std::path::Path::new("/tmp/world0")).unwrap();
    let (mut gen, _) = load_generator(std::path::Path::new("/tmp/gen_mle_s0.dcap")).unwrap();
    let vocab = &world.vocab;
    let refs: Vec<Vec<String>> = world.dataset.train.iter().take(2000).map(|r| r.refs.clone()).collect();
    let stats = NGramStats::build(&refs).unwrap();
    let batch: Vec<_> = world.dataset.train.iter().take(64).collect();
    let scorer = SceneScorer::new(&world.dataset.train, &stats).unwrap();
    let lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1.3e-4);
    let steps: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(120);
    let cfg = RewardConfig::cider();
    let mut opt = OptState::new(&gen.params, lr);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
    let greedy_cider = |gen: &disccap_core::generator::GeneratorModel| -> f64 {
        let texts: Vec<String> = batch.iter().map(|r| {
            let img = ImageCtx { global: &r.global, regions: &r.regions };
            detokenize(&greedy_decode(gen, &img, 16).unwrap().caption, vocab).unwrap()
        }).collect();
        let rf: Vec<Vec<String>> = batch.iter().map(|r| r.refs.clone()).collect();
        disccap_core::metrics::cider_d(&texts, &rf, &stats).unwrap().1
    };
    let masked_mass = |gen: &disccap_core::generator::GeneratorModel| -> f64 {
        use disccap_core::generator::{LstmState, StepInput};
        let r = &batch[0];
        let img = ImageCtx { global: &r.global, regions: &r.regions };
        let st = gen.zero_state();
        let (_, st) = gen.step(&st, StepInput::Image, &img).unwrap();
        let (logits, _) = gen.step(&st, StepInput::Word(0), &img).unwrap();
        let mut pr = logits.clone();
        let m = pr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = pr.iter().map(|v| (v - m).exp()).sum();
        pr.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        let _ = LstmState { h: vec![], c: vec![] };
        pr[0] + pr[3]
    };
    println!("lr {lr}: step 0: greedy cider {:.4} masked mass {:.3e}", greedy_cider(&gen), masked_mass(&gen));
    let sgd: bool = std::env::args().nth(3).map(|s| s == "sgd").unwrap_or(false);
    let mut mean_r = 0.0;
    for step in 1..=steps {
        let st = if sgd {
            // plain SGD step: sample/greedy/backward as usual, then manual update
            use disccap_core::training::scst_accumulate;
            let st = scst_accumulate(&mut gen, &batch, &cfg, None, &scorer, vocab, &mut rng).unwrap();
            gen.params.clip_grad_norm(5.0);
            for i in 0..gen.params.len() {
                let g: Vec<f64> = gen.params.grad(i).to_vec();
                for (pv, gv) in gen.params.data_mut(i).iter_mut().zip(&g) { *pv -= lr * gv; }
            }
            gen.params.zero_grads();
            st
        } else {
            scst_step(&mut gen, &batch, &cfg, None, &scorer, vocab, &mut opt, &mut rng).unwrap()
        };
        mean_r += st.mean_reward;
        if step % (steps / 6).max(1) == 0 {
            println!("step {step}: greedy cider {:.4}  run-mean sampled {:.4}  masked mass {:.3e}", greedy_cider(&gen), mean_r / step as f64, masked_mass(&gen));
        }
    }
}
