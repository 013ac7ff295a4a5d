//! Cross-cutting checks of the differentiable primitives: every explicit
//! backward must match a central finite-difference Jacobian-transpose
//! product in f64, and structural bijections must round-trip bit-exactly.

use cgm_core::{
    concat_channels, conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward,
    pixel_shuffle, pixel_unshuffle, split_channels, CounterRng, Grid, Pad, Tensor,
};
use proptest::prelude::*;

fn random_grid(rng: &mut CounterRng, h: usize, w: usize, c: usize) -> Grid<f64> {
    Grid::from_fn(h, w, c, |_, _, _| rng.normal())
}

fn random_kernel(rng: &mut CounterRng, kh: usize, kw: usize, ci: usize, co: usize) -> Tensor<f64> {
    Tensor::from_vec(
        &[kh, kw, ci, co],
        (0..kh * kw * ci * co).map(|_| rng.normal()).collect(),
    )
    .unwrap()
}

/// Directional finite-difference check of a VJP: for scalar loss
/// L(x) = <f(x), ybar>, the analytic gradient must satisfy
/// <grad, d> ~= (L(x + h d) - L(x - h d)) / 2h for random directions d.
fn check_vjp_direction(
    f: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    ybar: &[f64],
    analytic_grad: &[f64],
    rng: &mut CounterRng,
    tol: f64,
) {
    let h = 1e-6;
    for _ in 0..4 {
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.normal()).collect();
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        for i in 0..x.len() {
            xp[i] += h * dir[i];
            xm[i] -= h * dir[i];
        }
        let lp: f64 = f(&xp).iter().zip(ybar).map(|(a, b)| a * b).sum();
        let lm: f64 = f(&xm).iter().zip(ybar).map(|(a, b)| a * b).sum();
        let fd = (lp - lm) / (2.0 * h);
        let an: f64 = analytic_grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let scale = an.abs().max(fd.abs()).max(1.0);
        assert!(
            ((an - fd) / scale).abs() <= tol,
            "VJP mismatch: analytic {an} vs fd {fd}"
        );
    }
}

#[test]
fn conv2d_backward_matches_finite_differences() {
    let mut rng = CounterRng::new(101);
    for (stride, pad) in [(1, Pad::Valid), (1, Pad::Same), (2, Pad::Same), (2, Pad::Valid)] {
        let (h, w, ci, co) = (6, 5, 2, 3);
        let x = random_grid(&mut rng, h, w, ci);
        let k = random_kernel(&mut rng, 3, 3, ci, co);
        let out = conv2d(&x, &k, stride, pad).unwrap();
        let ybar = random_grid(&mut rng, out.h(), out.w(), out.c());
        let (gx, gk) = conv2d_backward(&x, &k, stride, pad, &ybar).unwrap();

        let kc = k.clone();
        let f_input = |xs: &[f64]| {
            let xg = Grid::from_vec(h, w, ci, xs.to_vec()).unwrap();
            conv2d(&xg, &kc, stride, pad).unwrap().into_vec()
        };
        check_vjp_direction(f_input, x.data(), ybar.data(), gx.data(), &mut rng, 1e-6);

        let xc = x.clone();
        let kdims = k.dims().to_vec();
        let f_kernel = |ks: &[f64]| {
            let kg = Tensor::from_vec(&kdims, ks.to_vec()).unwrap();
            conv2d(&xc, &kg, stride, pad).unwrap().into_vec()
        };
        check_vjp_direction(f_kernel, k.data(), ybar.data(), gk.data(), &mut rng, 1e-6);
    }
}

#[test]
fn conv2d_transpose_backward_matches_finite_differences() {
    let mut rng = CounterRng::new(202);
    for (stride, pad) in [(1, Pad::Valid), (2, Pad::Same)] {
        let (h, w, ci, co) = (3, 4, 2, 3);
        let y = random_grid(&mut rng, h, w, co);
        let k = random_kernel(&mut rng, 3, 3, ci, co);
        let out = conv2d_transpose(&y, &k, stride, pad).unwrap();
        let ybar = random_grid(&mut rng, out.h(), out.w(), out.c());
        let (gy, gk) = conv2d_transpose_backward(&y, &k, stride, pad, &ybar).unwrap();

        let kc = k.clone();
        let f_input = |ys: &[f64]| {
            let yg = Grid::from_vec(h, w, co, ys.to_vec()).unwrap();
            conv2d_transpose(&yg, &kc, stride, pad).unwrap().into_vec()
        };
        check_vjp_direction(f_input, y.data(), ybar.data(), gy.data(), &mut rng, 1e-6);

        let yc = y.clone();
        let kdims = k.dims().to_vec();
        let f_kernel = |ks: &[f64]| {
            let kg = Tensor::from_vec(&kdims, ks.to_vec()).unwrap();
            conv2d_transpose(&yc, &kg, stride, pad).unwrap().into_vec()
        };
        check_vjp_direction(f_kernel, k.data(), ybar.data(), gk.data(), &mut rng, 1e-6);
    }
}

#[test]
fn shuffle_and_concat_adjoints_are_inverse_maps() {
    // For permutations and concat/split, the adjoint equals the inverse
    // rearrangement; verify <f(x), y> == <x, f_adj(y)> exactly.
    let mut rng = CounterRng::new(303);
    let x = random_grid(&mut rng, 4, 4, 8);
    let fx = pixel_shuffle(&x, 2).unwrap();
    let y = random_grid(&mut rng, fx.h(), fx.w(), fx.c());
    let aty = pixel_unshuffle(&y, 2).unwrap();
    // Same multiset of products, different summation order: allow rounding.
    let (lhs, rhs) = (fx.dot_f64(&y).unwrap(), x.dot_f64(&aty).unwrap());
    assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));

    let a = random_grid(&mut rng, 3, 3, 2);
    let b = random_grid(&mut rng, 3, 3, 3);
    let cat = concat_channels(&[&a, &b]).unwrap();
    let ybar = random_grid(&mut rng, 3, 3, 5);
    let parts = split_channels(&ybar, &[2, 3]).unwrap();
    let lhs = cat.dot_f64(&ybar).unwrap();
    let rhs = a.dot_f64(&parts[0]).unwrap() + b.dot_f64(&parts[1]).unwrap();
    assert!((lhs - rhs).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pixel_shuffle_roundtrip_prop(seed in 0u64..1000, r in 1usize..4, h in 1usize..5, w in 1usize..5, cmul in 1usize..4) {
        let mut rng = CounterRng::new(seed);
        let c = cmul * r * r;
        let x = random_grid(&mut rng, h, w, c);
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), (h * r, w * r, c / (r * r)));
        let z = pixel_unshuffle(&y, r).unwrap();
        prop_assert_eq!(z.data(), x.data());
    }

    #[test]
    fn grid_file_roundtrip_prop(seed in 0u64..1000, h in 1usize..8, w in 1usize..8, c in 1usize..4) {
        let mut rng = CounterRng::new(seed);
        let g = random_grid(&mut rng, h, w, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.cgmg");
        cgm_core::write_grid(&path, &g).unwrap();
        let back: Grid<f64> = cgm_core::read_grid_as(&path).unwrap();
        prop_assert_eq!(back.data(), g.data());
    }
}
