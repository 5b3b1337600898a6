// print a few val greedy decodes vs references, with per-image cider
use disccap_core::generator::{greedy_decode, ImageCtx};
use disccap_core::metrics::NGramStats;
use disccap_core::pipeline::{load_generator, World};
use disccap_core::synthworld::full_mention_caption;
use disccap_core::textcore::detokenize;

fn main() {
    let ckpt = std::env::args().nth(1).unwrap_or("/tmp/gen_mle40_s0.dcap".into());
    let world = World::load(std::path::Path::new("/tmp/world0")).unwrap();
    let (gen, _) = load_generator(std::path::Path::new(&ckpt)).unwrap();
    let refs: Vec<Vec<String>> = world.dataset.val.iter().map(|r| r.refs.clone()).collect();
    let stats = NGramStats::build(&refs).unwrap();
    let recs = &world.dataset.val;
    let mut cand = Vec::new();
    let mut oracle = Vec::new();
    for r in recs {
        let img = ImageCtx { global: &r.global, regions: &r.regions };
        cand.push(detokenize(&greedy_decode(&gen, &img, 16).unwrap().caption, &world.vocab).unwrap());
        oracle.push(full_mention_caption(&r.scene));
    }
    let (scores, mean) = disccap_core::metrics::cider_d(&cand, &refs, &stats).unwrap();
    let (_, mean_oracle) = disccap_core::metrics::cider_d(&oracle, &refs, &stats).unwrap();
    println!("greedy mean cider {mean:.3} | full-mention oracle {mean_oracle:.3}");
    for i in 0..8 {
        println!("scene {} {}", recs[i].scene_id, recs[i].scene);
        println!("  greedy [{:.2}]: {}", scores[i], cand[i]);
        println!("  oracle      : {}", oracle[i]);
        println!("  ref         : {}", recs[i].refs[0]);
    }
}
