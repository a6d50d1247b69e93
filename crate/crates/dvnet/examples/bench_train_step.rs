//! Times one train-mode forward and forward+backward pass of the compact 3D
//! variant on a 32^3 volume, the building block of the overfit check.
//!
//!     cargo run --release -p dvnet --example bench_train_step [threads]

use std::time::Instant;

use dvnet::arch::{Network, NetworkConfig};
use dvnet::tensor::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let threads: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    if threads > 0 {
        dvnet::exec::set_threads(threads);
    }
    dvnet::exec::set_deterministic(false);

    let cfg = NetworkConfig::dvnet_3d_v1();
    let mut net = Network::<f32>::build(&cfg, 1).unwrap();
    println!("parameters: {}", net.count_parameters());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = Shape::act(1, 1, &[32, 32, 32]);
    let x = Tensor::new(shape.clone(), (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect())
        .unwrap();
    let mut truth = vec![0.0f32; 3 * 32 * 32 * 32];
    for i in 0..32 * 32 * 32 {
        truth[(i % 3) * 32 * 32 * 32 + i] = 1.0;
    }
    let truth = Tensor::new(Shape::act(1, 3, &[32, 32, 32]), truth).unwrap();

    // warm-up + forward only
    let t0 = Instant::now();
    let mut g = Graph::new();
    let out = net.forward_train(&mut g, &x, &mut rng).unwrap();
    println!("forward (cold): {:.2?}", t0.elapsed());
    drop((g, out));

    for round in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let fwd = net.forward_train(&mut g, &x, &mut rng).unwrap();
        let fwd_time = t0.elapsed();
        let loss = g.dice_loss(&fwd.output, &truth, 1.0).unwrap();
        let t1 = Instant::now();
        g.backward(&loss).unwrap();
        let bwd_time = t1.elapsed();
        println!(
            "round {round}: forward {:.2?}, backward {:.2?}, total {:.2?}",
            fwd_time,
            bwd_time,
            t0.elapsed()
        );
    }
}
