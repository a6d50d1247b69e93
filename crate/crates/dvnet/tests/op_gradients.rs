//! Finite-difference checks for every differentiable operation, run in f64.
//!
//! Each case evaluates the forward path as a scalar loss (dot with fixed
//! weights) and compares analytic gradients against central differences at
//! 1e-4 step, 1e-3 relative tolerance.

use dvnet::tensor::gradcheck::{check_grad, relative_error};
use dvnet::tensor::{Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Analytic gradient of a scalar-valued closure w.r.t. the tensor built from
/// `(shape, values)`.
fn analytic_grad<F>(shape: &Shape, values: &[f64], build: F) -> Vec<f64>
where
    F: Fn(&mut Graph<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    let t = Tensor::new(shape.clone(), values.to_vec()).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(&t, true);
    let loss = build(&mut g, &x);
    g.backward(&loss).unwrap();
    g.take_grad(&x).unwrap()
}

fn numeric_check<F>(shape: &Shape, values: &[f64], analytic: &[f64], build: F)
where
    F: Fn(&mut Graph<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    let worst = check_grad(values, analytic, &all_indices(values.len()), STEP, |vals| {
        let t = Tensor::new(shape.clone(), vals.to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&t, false);
        build(&mut g, &x).item()
    });
    assert!(worst < TOL, "worst relative error {worst}");
}

fn check_both<F>(shape: &Shape, values: &[f64], build: F)
where
    F: Fn(&mut Graph<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    let analytic = analytic_grad(shape, values, &build);
    numeric_check(shape, values, &analytic, &build);
}


#[test]
fn conv_kernel_gradient_matches_fd_on_4x4x4() {
    // sum(output) w.r.t. each kernel entry, random 4^3 input
    let mut r = rng(11);
    let xs = Shape::act(1, 2, &[4, 4, 4]);
    let ws = Shape::act(3, 2, &[3, 3, 3]);
    let x = Tensor::new(xs.clone(), rand_vec(&mut r, xs.numel())).unwrap();
    let wvals = rand_vec(&mut r, ws.numel());
    check_both(&ws, &wvals, |g, w| {
        let y = g.conv_nd(&x, w, 1, 1).unwrap();
        g.sum(&y)
    });
}

#[test]
fn conv_input_gradient_stride_and_padding_variants() {
    let mut r = rng(12);
    for (stride, pad, sp) in [(1usize, 1usize, vec![5, 5]), (1, 0, vec![6]), (2, 1, vec![5, 5])] {
        let xs = Shape::act(2, 2, &sp);
        let ws = Shape::act(2, 2, &vec![3; sp.len()]);
        let w = Tensor::new(ws.clone(), rand_vec(&mut r, ws.numel())).unwrap();
        let xvals = rand_vec(&mut r, xs.numel());
        let os = dvnet::tensor::kernels::conv_out_shape(&xs, &ws, stride, pad).unwrap();
        let weights =
            Tensor::new(Shape::new(vec![os.numel()]), rand_vec(&mut r, os.numel())).unwrap();
        check_both(&xs, &xvals, |g, x| {
            let y = g.conv_nd(x, &w, stride, pad).unwrap();
            g.weighted_sum(&y, &weights).unwrap()
        });
    }
}

#[test]
fn conv_transpose_gradients_match_fd() {
    let mut r = rng(13);
    for (stride, pad, out_pad) in [(1usize, 0usize, 0usize), (2, 1, 1), (2, 0, 0)] {
        let xs = Shape::act(1, 3, &[4, 4]);
        let ws = Shape::act(3, 2, &[3, 3]); // [c_in, c_out, k, k]
        let xvals = rand_vec(&mut r, xs.numel());
        let wvals = rand_vec(&mut r, ws.numel());
        let x_const = Tensor::new(xs.clone(), xvals.clone()).unwrap();
        let w_const = Tensor::new(ws.clone(), wvals.clone()).unwrap();
        let os = dvnet::tensor::kernels::conv_transpose_out_shape(&xs, &ws, stride, pad, out_pad)
            .unwrap();
        let weights =
            Tensor::new(Shape::new(vec![os.numel()]), rand_vec(&mut r, os.numel())).unwrap();

        check_both(&xs, &xvals, |g, x| {
            let y = g.conv_transpose_nd(x, &w_const, stride, pad, out_pad).unwrap();
            g.weighted_sum(&y, &weights).unwrap()
        });
        check_both(&ws, &wvals, |g, w| {
            let y = g.conv_transpose_nd(&x_const, w, stride, pad, out_pad).unwrap();
            g.weighted_sum(&y, &weights).unwrap()
        });
    }
}

#[test]
fn batch_norm_gradients_match_fd() {
    let mut r = rng(14);
    let xs = Shape::act(2, 3, &[4, 4]);
    let xvals = rand_vec(&mut r, xs.numel());
    let scale = Tensor::new(Shape::new(vec![3]), vec![1.2, 0.7, -0.4]).unwrap();
    let shift = Tensor::new(Shape::new(vec![3]), vec![0.1, -0.2, 0.3]).unwrap();
    let weights = Tensor::new(Shape::new(vec![xs.numel()]), rand_vec(&mut r, xs.numel())).unwrap();

    check_both(&xs, &xvals, |g, x| {
        let y = g.batch_norm(x, &scale, &shift, 1e-5).unwrap().out;
        g.weighted_sum(&y, &weights).unwrap()
    });

    let x_const = Tensor::new(xs.clone(), xvals).unwrap();
    let pshape = Shape::new(vec![3]);
    check_both(&pshape, scale.data(), |g, sc| {
        let y = g.batch_norm(&x_const, sc, &shift, 1e-5).unwrap().out;
        g.weighted_sum(&y, &weights).unwrap()
    });
    check_both(&pshape, shift.data(), |g, sh| {
        let y = g.batch_norm(&x_const, &scale, sh, 1e-5).unwrap().out;
        g.weighted_sum(&y, &weights).unwrap()
    });
}

#[test]
fn avg_pool_gradient_is_inverse_window_volume() {
    // gradient of sum(output) w.r.t. input is 1/window^rank everywhere
    let mut r = rng(15);
    let xs = Shape::act(1, 2, &[4, 4, 4]);
    let xvals = rand_vec(&mut r, xs.numel());
    let build = |g: &mut Graph<f64>, x: &Tensor<f64>| {
        let y = g.avg_pool_nd(x, 2, 2).unwrap();
        g.sum(&y)
    };
    let analytic = analytic_grad(&xs, &xvals, build);
    for &gv in &analytic {
        assert!((gv - 1.0 / 8.0).abs() < 1e-12);
    }
    numeric_check(&xs, &xvals, &analytic, build);
}

#[test]
fn softmax_gradient_matches_fd() {
    let mut r = rng(16);
    let xs = Shape::act(1, 4, &[3]);
    let xvals = rand_vec(&mut r, xs.numel());
    let weights = Tensor::new(Shape::new(vec![xs.numel()]), rand_vec(&mut r, xs.numel())).unwrap();
    check_both(&xs, &xvals, |g, x| {
        let y = g.softmax_channels(x);
        g.weighted_sum(&y, &weights).unwrap()
    });
}

#[test]
fn dropout_gradient_matches_mask() {
    let mut r = rng(17);
    let xs = Shape::act(1, 1, &[64]);
    let xvals = rand_vec(&mut r, xs.numel());
    // Same dropout pattern on every evaluation: fixed rng seed inside.
    let build = |g: &mut Graph<f64>, x: &Tensor<f64>| {
        let mut drng = rng(99);
        let y = g.dropout(x, 0.3, &mut drng);
        g.sum(&y)
    };
    let analytic = analytic_grad(&xs, &xvals, build);
    numeric_check(&xs, &xvals, &analytic, build);
    for &gv in &analytic {
        assert!(gv == 0.0 || (gv - 1.0 / 0.7).abs() < 1e-12);
    }
}

#[test]
fn concat_gradient_matches_fd() {
    let mut r = rng(18);
    let ash = Shape::act(1, 2, &[5]);
    let bsh = Shape::act(1, 3, &[5]);
    let avals = rand_vec(&mut r, ash.numel());
    let b = Tensor::new(bsh, rand_vec(&mut r, 15)).unwrap();
    let weights = Tensor::new(Shape::new(vec![25]), rand_vec(&mut r, 25)).unwrap();
    check_both(&ash, &avals, |g, a| {
        let y = g.concat_channels(a, &b).unwrap();
        g.weighted_sum(&y, &weights).unwrap()
    });
}

#[test]
fn dice_loss_gradient_matches_fd() {
    let mut r = rng(19);
    let xs = Shape::act(1, 2, &[10]);
    let pvals: Vec<f64> = (0..20).map(|_| r.gen_range(0.1..0.9)).collect();
    let mut gvals = vec![0.0; 20];
    for i in 0..10 {
        let c = r.gen_range(0..2usize);
        gvals[c * 10 + i] = 1.0;
    }
    let truth = Tensor::new(xs.clone(), gvals).unwrap();
    check_both(&xs, &pvals, |g, p| g.dice_loss(p, &truth, 1.0).unwrap());
}

#[test]
fn cross_entropy_gradient_matches_fd() {
    let mut r = rng(20);
    let xs = Shape::act(1, 3, &[8]);
    let pvals: Vec<f64> = (0..24).map(|_| r.gen_range(0.05..0.95)).collect();
    let mut gvals = vec![0.0; 24];
    for i in 0..8 {
        let c = r.gen_range(0..3usize);
        gvals[c * 8 + i] = 1.0;
    }
    let truth = Tensor::new(xs.clone(), gvals).unwrap();
    let w = [1.0, 2.0, 0.5];
    check_both(&xs, &pvals, |g, p| g.cross_entropy_loss(p, &truth, Some(&w)).unwrap());
}

#[test]
fn composite_chain_gradient() {
    // conv -> bn -> relu -> pool -> softmax -> dice against finite differences
    let mut r = rng(21);
    let xs = Shape::act(1, 2, &[6, 6]);
    let ws = Shape::act(3, 2, &[3, 3]);
    let wvals = rand_vec(&mut r, ws.numel());
    let x = Tensor::new(xs.clone(), rand_vec(&mut r, xs.numel())).unwrap();
    let scale = Tensor::new(Shape::new(vec![3]), vec![1.0, 0.9, 1.1]).unwrap();
    let shift = Tensor::new(Shape::new(vec![3]), vec![0.0, 0.1, -0.1]).unwrap();
    let mut gvals = vec![0.0; 3 * 9];
    for i in 0..9 {
        gvals[(i % 3) * 9 + i] = 1.0;
    }
    let truth = Tensor::new(Shape::act(1, 3, &[3, 3]), gvals).unwrap();

    check_both(&ws, &wvals, |g, w| {
        let y = g.conv_nd(&x, w, 1, 1).unwrap();
        let y = g.batch_norm(&y, &scale, &shift, 1e-5).unwrap().out;
        let y = g.relu(&y);
        let y = g.avg_pool_nd(&y, 2, 2).unwrap();
        let y = g.softmax_channels(&y);
        g.dice_loss(&y, &truth, 1.0).unwrap()
    });
}

#[test]
fn relative_error_floor_behaves() {
    assert!(relative_error(0.0, 0.0) == 0.0);
    assert!(relative_error(1.0, 1.0005) < 1e-3);
}
