//! Hybrid mixture of experts with token rearrangement: edge tokens are
//! stably sorted by their top-1 expert into contiguous blocks so each
//! expert runs one blocked matmul; non-edge tokens take the shared expert
//! only. The parallel path matches the per-token sequential oracle bitwise
//! and is benchmarked against it across expert counts.

use interseg::bench::{bench_moe, moe_profile, MoeImpl};
use interseg::moe::{affinity, build_dispatch, hmoe_parallel, hmoe_sequential, route_top1};
use interseg::bench::random_expert_bank;
use interseg::routing::EdgeMap;
use interseg::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    // Dispatch mechanics on a small batch.
    let bank = random_expert_bank(&mut rng, 256, 4);
    let x = Tensor::from_fn(vec![10, 256], |_| rng.gen_range(-1.0..1.0f32));
    let scores = affinity(&x, &bank.centroids).expect("affinity");
    let routes = route_top1(&scores).expect("routing");
    let dispatch = build_dispatch(&routes, 4).expect("dispatch");
    println!("top-1 routes for 10 tokens: {routes:?}");
    println!("stable-sort permutation:    {:?}", dispatch.perm);
    println!("per-expert group sizes:     {:?}", dispatch.group_sizes());

    // Parallel vs sequential equivalence.
    let em = EdgeMap::all_edge(2, 5);
    let par = hmoe_parallel(&x, &em, &bank).expect("parallel");
    let seq = hmoe_sequential(&x, &em, &bank).expect("sequential");
    println!("\nparallel output equals the per-token oracle bitwise: {}", par == seq);

    // Speedup across expert counts (4096 edge tokens, d = 256).
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    println!("\nwall time over 4096 edge tokens (median of 3, 4 threads):");
    println!("  {:>7}  {:>12}  {:>12}  {:>9}", "experts", "sequential", "parallel", "reduction");
    pool.install(|| {
        for m in [1usize, 4, 16, 64] {
            let seq = bench_moe(&[m], 4096, MoeImpl::Seq, 3, 5).expect("bench")[0].seconds;
            let par = bench_moe(&[m], 4096, MoeImpl::Par, 3, 5).expect("bench")[0].seconds;
            println!(
                "  {m:>7}  {seq:>11.3}s  {par:>11.3}s  {:>8.1}%",
                100.0 * (1.0 - par / seq)
            );
        }
    });

    let profile = pool.install(|| moe_profile(64, 4096, 5)).expect("profile");
    println!("\nphase profile at 64 experts:\n{}", profile.to_json());
}
