// minimal policy-gradient sanity check: reward 1 iff the caption is exactly
// "w4", else 0. p(w4) must rise toward 1.
use disccap_core::generator::{sample_decode, greedy_decode, GeneratorConfig, GeneratorModel, ImageCtx, Variant, StepInput};
use disccap_core::numerics::{opt_step, OptState};
use rand::SeedableRng;

fn main() {
    let v = 7;
    let cfg = GeneratorConfig { variant: Variant::Fc, feature_dim: 4, word_dim: 5, hidden: 6, attn_dim: 4, max_len: 4 };
    let mut gen = GeneratorModel::init(cfg, v, 3);
    let global = vec![0.3, -0.2, 0.6, 0.1];
    let regions: Vec<Vec<f64>> = vec![global.clone()];
    let img = ImageCtx { global: &global, regions: &regions };
    let mut opt = OptState::new(&gen.params, 1e-3);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
    let reward = |ids: &[usize]| -> f64 { if ids == [0usize, 4, 1] { 1.0 } else { 0.0 } };
    let p_w4 = |gen: &GeneratorModel| -> f64 {
        let st = gen.zero_state();
        let (_, st) = gen.step(&st, StepInput::Image, &img).unwrap();
        let (logits, _) = gen.step(&st, StepInput::Word(0), &img).unwrap();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
        ((logits[4] - m).exp()) / z
    };
    println!("step 0: p(w4 first) = {:.4}", p_w4(&gen));
    for step in 1..=400 {
        let b = 16;
        let mut caches = Vec::new();
        for _ in 0..b {
            let s = sample_decode(&gen, &img, &mut rng, 4).unwrap();
            let g = greedy_decode(&gen, &img, 4).unwrap();
            let adv = reward(&s.caption.ids) - reward(&g.caption.ids);
            if adv != 0.0 {
                let fwd = gen.forward_cached(&s.caption, &img).unwrap();
                caches.push((fwd, adv));
            }
        }
        if caches.is_empty() { continue; }
        for (fwd, adv) in &caches {
            gen.backward(fwd, &img, *adv / b as f64).unwrap();
        }
        gen.params.clip_grad_norm(5.0);
        opt_step(&mut gen.params, &mut opt).unwrap();
        if step % 100 == 0 {
            println!("step {step}: p(w4 first) = {:.4}", p_w4(&gen));
        }
    }
}
