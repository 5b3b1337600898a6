// how sensitive is greedy cider to pure parameter noise of a given scale?
use disccap_core::generator::{greedy_decode, ImageCtx};
use disccap_core::metrics::NGramStats;
use disccap_core::pipeline::{load_generator, World};
use disccap_core::textcore::detokenize;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let world = World::load(std::path::Path::new("/tmp/world0")).unwrap();
    let refs: Vec<Vec<String>> = world.dataset.train.iter().map(|r| r.refs.clone()).collect();
    let stats = NGramStats::build(&refs).unwrap();
    let batch: Vec<_> = world.dataset.train.iter().take(64).collect();
    let greedy_cider = |gen: &disccap_core::generator::GeneratorModel| -> f64 {
        let texts: Vec<String> = batch.iter().map(|r| {
            let img = ImageCtx { global: &r.global, regions: &r.regions };
            detokenize(&greedy_decode(gen, &img, 16).unwrap().caption, &world.vocab).unwrap()
        }).collect();
        let rf: Vec<Vec<String>> = batch.iter().map(|r| r.refs.clone()).collect();
        disccap_core::metrics::cider_d(&texts, &rf, &stats).unwrap().1
    };
    for sigma in [1e-3, 3e-3, 1e-2, 3e-2] {
        let (mut gen, _) = load_generator(std::path::Path::new("/tmp/gen_mle_s0.dcap")).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for i in 0..gen.params.len() {
            for v in gen.params.data_mut(i).iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * n;
            }
        }
        println!("sigma {sigma:>7}: greedy cider {:.4}", greedy_cider(&gen));
    }
}
