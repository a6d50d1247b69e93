//! Micro-benchmarks of the convolution kernels at network-typical shapes.

use std::time::Instant;

use dvnet::tensor::kernels::{conv_fwd, conv_grad_input, conv_grad_kernel};
use dvnet::tensor::Shape;

fn bench(name: &str, c_in: usize, c_out: usize, k: usize, sp: usize, reps: usize) {
    let xs = Shape::act(1, c_in, &[sp, sp, sp]);
    let ws = Shape::act(c_out, c_in, &[k, k, k]);
    let x: Vec<f32> = (0..xs.numel()).map(|i| (i % 97) as f32 * 0.01).collect();
    let w: Vec<f32> = (0..ws.numel()).map(|i| (i % 89) as f32 * 0.001).collect();
    let pad = if k == 3 { 1 } else { 0 };
    let (y, os) = conv_fwd(&x, &xs, &w, &ws, 1, pad).unwrap();
    let flops = 2.0 * (os.numel() * c_in * k * k * k) as f64;

    let t = Instant::now();
    for _ in 0..reps {
        let _ = conv_fwd(&x, &xs, &w, &ws, 1, pad).unwrap();
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for _ in 0..reps {
        let _ = conv_grad_input(&y, &os, &w, &ws, &xs, 1, pad).unwrap();
    }
    let gin = t.elapsed().as_secs_f64() / reps as f64;

    let t = Instant::now();
    for _ in 0..reps {
        let _ = conv_grad_kernel(&y, &os, &x, &xs, &ws, 1, pad);
    }
    let gk = t.elapsed().as_secs_f64() / reps as f64;

    println!(
        "{name:<24} fwd {:>7.1} ms ({:>6.1} GF/s)   dx {:>7.1} ms   dw {:>7.1} ms",
        fwd * 1e3,
        flops / fwd / 1e9,
        gin * 1e3,
        gk * 1e3,
    );
}

fn main() {
    let threads: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    if threads > 0 {
        dvnet::exec::set_threads(threads);
    }
    dvnet::exec::set_deterministic(false);
    bench("head 185->185 k3 32^3", 185, 185, 3, 32, 3);
    bench("bb 32->8 k3 32^3", 32, 8, 3, 32, 10);
    bench("bb1x1 660->32 k1 32^3", 660, 32, 1, 32, 10);
    bench("bb 32->8 k3 16^3", 32, 8, 3, 16, 10);
    bench("dec1x1 163->32 k1 32^3", 163, 32, 1, 32, 10);
    raw_gemm();
    raw_im2col();
}

// quick sanity: raw GEMM throughput at the head shape, one call per thread
#[allow(dead_code)]
fn raw_gemm() {
    use dvnet::tensor::gemm::sgemm_ld;
    use rayon::prelude::*;
    let (m, k, n) = (185usize, 4995usize, 2048usize);
    let a = vec![0.5f32; m * k];
    let mut bufs: Vec<(Vec<f32>, Vec<f32>)> =
        (0..2).map(|_| (vec![0.25f32; k * n], vec![0.0f32; m * n])).collect();
    let t = std::time::Instant::now();
    let reps = 10;
    for _ in 0..reps {
        bufs.par_iter_mut().for_each(|(b, c)| {
            sgemm_ld(m, k, n, &a, k, false, b, n, false, c, n, false);
        });
    }
    let dt = t.elapsed().as_secs_f64();
    println!("raw par sgemm: {:.1} GF/s", 2.0 * (m * k * n * reps * 2) as f64 / dt / 1e9);
}

#[allow(dead_code)]
fn raw_im2col() {
    use dvnet::tensor::kernels::im2col;
    let c_in = 185usize;
    let sp = [32usize, 32, 32];
    let x = vec![0.5f32; c_in * 32 * 32 * 32];
    let mut cols = vec![0.0f32; c_in * 27 * 2048];
    let t = std::time::Instant::now();
    let reps = 5;
    for _ in 0..reps {
        for c0 in (0..32768).step_by(2048) {
            im2col(&x, &sp, c_in, &[3, 3, 3], 1, 1, &sp, c0, 2048, &mut cols);
        }
    }
    let dt = t.elapsed().as_secs_f64();
    let elems = (c_in * 27 * 32768 * reps) as f64;
    println!("im2col: {:.0} M elem/s ({:.1} ms per full conv)", elems / dt / 1e6, dt / reps as f64 * 1e3);
}
