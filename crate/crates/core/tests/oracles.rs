//! Optimized kernels against brute-force reference implementations.

use getnet_core::siamese::{choose_threshold, pairing_accuracy, PairLabel};
use getnet_core::stn::{bilinear_sample, generate_grid, sample_backward, AffineParams, SampleGrid};
use getnet_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tri(v: f64) -> f64 {
    (1.0 - v.abs()).max(0.0)
}

/// Full double sum over every source pixel.
fn double_sum_sample(u: &Tensor<f64>, grid: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = u.dims3().unwrap();
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let mut out = vec![0.0; c * gh * gw];
    for ch in 0..c {
        for i in 0..gh * gw {
            let (x, y) = (grid.data()[2 * i], grid.data()[2 * i + 1]);
            let mut acc = 0.0;
            for n in 0..h {
                for m in 0..w {
                    acc += u.data()[(ch * h + n) * w + m] * tri(x - m as f64) * tri(y - n as f64);
                }
            }
            out[ch * gh * gw + i] = acc;
        }
    }
    Tensor::new(&[c, gh, gw], out).unwrap()
}

/// Piecewise slope of the kernel term for source index `m` at `x`.
fn slope(m: f64, x: f64) -> f64 {
    if (m - x).abs() >= 1.0 {
        0.0
    } else if m >= x {
        1.0
    } else {
        -1.0
    }
}

/// Gradients of `sum(r * V)` via the full double sums for dU and dGrid.
fn double_sum_backward(u: &Tensor<f64>, grid: &Tensor<f64>, r: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (c, h, w) = u.dims3().unwrap();
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let mut du = vec![0.0; u.len()];
    let mut dg = vec![0.0; grid.len()];
    for ch in 0..c {
        for i in 0..gh * gw {
            let (x, y) = (grid.data()[2 * i], grid.data()[2 * i + 1]);
            let up = r.data()[ch * gh * gw + i];
            for n in 0..h {
                for m in 0..w {
                    let (mf, nf) = (m as f64, n as f64);
                    let v = u.data()[(ch * h + n) * w + m];
                    du[(ch * h + n) * w + m] += up * tri(x - mf) * tri(y - nf);
                    dg[2 * i] += up * v * tri(y - nf) * slope(mf, x);
                    dg[2 * i + 1] += up * v * tri(x - mf) * slope(nf, y);
                }
            }
        }
    }
    (
        Tensor::new(u.shape(), du).unwrap(),
        Tensor::new(grid.shape(), dg).unwrap(),
    )
}

fn random_instance(rng: &mut ChaCha8Rng, integer_fraction: f64, avoid_integers: bool) -> (Tensor<f64>, Tensor<f64>) {
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=9);
    let w = rng.gen_range(2..=9);
    let gh = rng.gen_range(1..=5);
    let gw = rng.gen_range(1..=5);
    let u = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
    let grid = Tensor::from_fn(&[gh, gw, 2], |k| {
        let extent = if k % 2 == 0 { w } else { h } as f64;
        if rng.gen_bool(integer_fraction) {
            rng.gen_range(-2i32..=extent as i32 + 1) as f64
        } else if avoid_integers {
            rng.gen_range(-2i32..=extent as i32) as f64 + rng.gen_range(1e-3..1.0 - 1e-3)
        } else {
            rng.gen_range(-2.0..extent + 1.0)
        }
    });
    (u, grid)
}

#[test]
fn four_neighbour_sampler_equals_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let (u, grid) = random_instance(&mut rng, 0.2, false);
        let fast = bilinear_sample(&u, &SampleGrid::new(grid.clone()).unwrap()).unwrap();
        worst = worst.max(fast.max_abs_diff(&double_sum_sample(&u, &grid)));
    }
    assert!(worst < 1e-12, "max abs difference {worst:e}");
}

#[test]
fn sampler_backward_equals_piecewise_double_sum_off_integers() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (u, grid) = random_instance(&mut rng, 0.0, true);
        let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
        let r = Tensor::from_fn(&[u.shape()[0], gh, gw], |_| rng.gen_range(-1.0..1.0));
        let (du, dg) = sample_backward(&u, &SampleGrid::new(grid.clone()).unwrap(), &r).unwrap();
        let (du_ref, dg_ref) = double_sum_backward(&u, &grid, &r);
        assert!(du.max_abs_diff(&du_ref) < 1e-12);
        assert!(dg.max_abs_diff(&dg_ref) < 1e-12, "{dg:?} vs {dg_ref:?}");
    }
}

#[test]
fn input_gradient_equals_double_sum_everywhere() {
    // dU has no kinks: it matches the scatter even at integer coordinates
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let (u, grid) = random_instance(&mut rng, 0.5, false);
        let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
        let r = Tensor::from_fn(&[u.shape()[0], gh, gw], |_| rng.gen_range(-1.0..1.0));
        let (du, _) = sample_backward(&u, &SampleGrid::new(grid.clone()).unwrap(), &r).unwrap();
        let (du_ref, _) = double_sum_backward(&u, &grid, &r);
        assert!(du.max_abs_diff(&du_ref) < 1e-12);
    }
}

#[test]
fn grid_matches_normalized_coordinate_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (s, tx, ty) = (rng.gen_range(0.1..1.5), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let out = (rng.gen_range(2..12), rng.gen_range(2..12));
        let inp = (rng.gen_range(2..20), rng.gen_range(2..20));
        let g = generate_grid(AffineParams::new(s, tx, ty), out, inp).unwrap();
        for i in 0..out.0 {
            for j in 0..out.1 {
                let xt = 2.0 * j as f64 / (out.1 - 1) as f64 - 1.0;
                let yt = 2.0 * i as f64 / (out.0 - 1) as f64 - 1.0;
                let col = (s * xt + tx + 1.0) / 2.0 * (inp.1 - 1) as f64;
                let row = (s * yt + ty + 1.0) / 2.0 * (inp.0 - 1) as f64;
                let k = 2 * (i * out.1 + j);
                assert!((g.coords.data()[k] - col).abs() < 1e-12);
                assert!((g.coords.data()[k + 1] - row).abs() < 1e-12);
            }
        }
    }
}

/// Best accuracy over every distinct partition a threshold can induce.
fn brute_force_best(d: &[f64], y: &[PairLabel]) -> f64 {
    let mut cuts: Vec<f64> = d.to_vec();
    cuts.push(f64::INFINITY);
    cuts.push(f64::NEG_INFINITY);
    cuts.iter().map(|&t| pairing_accuracy(d, y, t)).fold(0.0, f64::max)
}

#[test]
fn fitted_threshold_reaches_brute_force_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..500 {
        let n = if trial == 0 { 50 } else { rng.gen_range(1..60) };
        // coarse values force ties between distances
        let d: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) * 0.1).collect();
        let y: Vec<PairLabel> = (0..n).map(|_| PairLabel::from_bool(rng.gen_bool(0.5))).collect();
        let t = choose_threshold(&d, &y).unwrap();
        assert_eq!(pairing_accuracy(&d, &y, t), brute_force_best(&d, &y));
    }
}

#[test]
fn fitted_threshold_ties_go_to_smallest_candidate() {
    // 0.15 and 0.35 both score 3/4
    let d = [0.1, 0.2, 0.3, 0.4];
    let y = [1, 0, 1, 0].map(|v| PairLabel::new(v).unwrap());
    let t = choose_threshold(&d, &y).unwrap();
    assert_eq!(pairing_accuracy(&d, &y, t), 0.75);
    assert!((t - 0.15).abs() < 1e-15, "{t}");
}
