use refsplat::bench::*;
use refsplat::toy::*;
use std::time::Instant;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let seeds: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    for seed in 0..seeds {
        let toy = make_toy_scene(seed, &ToyConfig::default()).unwrap();
        let cfg = toy_train_config(iters, seed);
        let prep = prepare(&toy, &cfg).unwrap();
        let n_masked = prep.labeled.masked_indices().len();
        println!("seed {seed}: input {} masked {} object {} init {}", toy.input.len(), n_masked, toy.object_indices.len(), prep.initialized.len());
        let s0 = score_holdout(&toy, &prep.initialized).unwrap();
        println!("  init-only            L1 {:.4} psnr {:.2}", s0.l1, s0.psnr);
        for v in [Variant::Baseline, Variant::Full].into_iter().chain(Variant::ABLATIONS) {
            let t = Instant::now();
            let out = run_variant(&prep, &cfg, v).unwrap();
            let s = score_holdout(&toy, &out.scene).unwrap();
            println!("  {:20} L1 {:.4} psnr {:.2} n {} rb {} ({:.1}s)", v.name(), s.l1, s.psnr, out.scene.len(), out.rollbacks, t.elapsed().as_secs_f64());
        }
    }
}
