// directional-derivative check: is the accumulated scst gradient an ascent
// direction on E[R]?
use disccap_core::generator::{greedy_decode, sample_decode, ImageCtx};
use disccap_core::metrics::NGramStats;
use disccap_core::pipeline::{load_generator, World};
use disccap_core::textcore::detokenize;
use rand::SeedableRng;

fn main() {
    let world = World::load(std::path::Path::new("/tmp/world0")).unwrap();
    let (mut gen, _) = load_generator(std::path::Path::new("/tmp/gen_mle40_s0.dcap")).unwrap();
    let vocab = world.vocab.clone();
    let refs_all: Vec<Vec<String>> = world.dataset.train.iter().map(|r| r.refs.clone()).collect();
    let stats = NGramStats::build(&refs_all).unwrap();
    let batch: Vec<_> = world.dataset.train.iter().take(8).collect();
    let k_grad = 1500;

    // many-sample gradient estimate (per-image greedy baseline)
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
    gen.params.zero_grads();
    let mut baselines = Vec::new();
    for r in &batch {
        let img = ImageCtx { global: &r.global, regions: &r.regions };
        let g = greedy_decode(&gen, &img, 16).unwrap();
        let text = detokenize(&g.caption, &vocab).unwrap();
        let score = disccap_core::metrics::cider_d(&[text], &[r.refs.clone()], &stats).unwrap().0[0];
        baselines.push(score);
    }
    for _ in 0..k_grad {
        for (i, r) in batch.iter().enumerate() {
            let img = ImageCtx { global: &r.global, regions: &r.regions };
            let s = sample_decode(&gen, &img, &mut rng, 16).unwrap();
            let text = detokenize(&s.caption, &vocab).unwrap();
            let score = disccap_core::metrics::cider_d(&[text.clone()], &[r.refs.clone()], &stats).unwrap().0[0];
            let adv = score - baselines[i];
            if adv != 0.0 {
                let fwd = gen.forward_cached(&s.caption, &img).unwrap();
                let forced = s.caption.ids.len() == 16;
                gen.backward_policy(&fwd, &img, adv / (k_grad * batch.len()) as f64, forced).unwrap();
            }
        }
    }
    let grad = gen.params.flat_grads();
    let norm: f64 = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("grad norm over {} samples: {:.6}", k_grad * batch.len(), norm);
    gen.params.zero_grads();

    // E[R] along theta - s * grad/|grad| with common random numbers
    let base = gen.params.flat_params();
    let eval = |gen: &mut disccap_core::generator::GeneratorModel, shift: f64| -> f64 {
        let mut off = 0;
        for i in 0..gen.params.len() {
            let n = gen.params.data(i).len();
            let dst = gen.params.data_mut(i);
            for j in 0..n {
                dst[j] = base[off + j] - shift * grad[off + j] / norm;
            }
            off += n;
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4242);
        let mut texts = Vec::new();
        let mut rf = Vec::new();
        for _ in 0..600 {
            for r in &batch {
                let img = ImageCtx { global: &r.global, regions: &r.regions };
                let d = sample_decode(gen, &img, &mut rng, 16).unwrap();
                texts.push(detokenize(&d.caption, &vocab).unwrap());
                rf.push(r.refs.clone());
            }
        }
        disccap_core::metrics::cider_d(&texts, &rf, &stats).unwrap().1
    };
    for s in [-0.06, -0.02, 0.0, 0.02, 0.06] {
        let e = eval(&mut gen, s);
        println!("shift {s:>6}: E[R] = {e:.4}");
    }
}
