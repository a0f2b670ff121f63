//! Reference computations shared by the integration tests. Nothing here calls
//! into the library's own quadrature, recursions or finite differences.
#![allow(dead_code)]

use mvhuber::spd::SpdMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn huber_ref(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

fn simpson_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Adaptive Simpson over consecutive pieces split at `breaks` (sorted).
pub fn simpson_pieces(f: &dyn Fn(f64) -> f64, breaks: &[f64], tol: f64) -> f64 {
    breaks.windows(2).map(|w| simpson(f, w[0], w[1], tol / breaks.len() as f64)).sum()
}

/// `∫_ℝ exp(−h_δ(|x|)) dx` in one dimension.
pub fn c1_reference(delta: f64) -> f64 {
    let l = delta + 60.0 / delta;
    let f = |x: f64| (-huber_ref(x, delta)).exp();
    simpson_pieces(&f, &[-l, -delta, 0.0, delta, l], 1e-13)
}

/// `∫_{ℝ²} exp(−h_δ(‖x‖)) dx` as an iterated Cartesian integral, with the
/// inner integral split where the circle `‖x‖ = δ` crosses it.
pub fn c2_reference(delta: f64) -> f64 {
    let l = delta + 60.0 / delta;
    let inner = |x: f64| {
        let f = |y: f64| (-huber_ref((x * x + y * y).sqrt(), delta)).exp();
        if x.abs() < delta {
            let c = (delta * delta - x * x).sqrt();
            simpson_pieces(&f, &[-l, -c, 0.0, c, l], 1e-11)
        } else {
            simpson_pieces(&f, &[-l, 0.0, l], 1e-11)
        }
    };
    simpson_pieces(&inner, &[-l, -delta, 0.0, delta, l], 1e-11)
}

/// Midpoint-rule sum of `f` over the square `[lo, hi]²` with `n × n` cells.
pub fn grid_sum_2d(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * h;
        for j in 0..n {
            let y = lo + (j as f64 + 0.5) * h;
            s += f(x, y);
        }
    }
    s * h * h
}

/// Central finite differences.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let at = |di: f64, dj: f64| {
                let mut p = x.to_vec();
                p[i] += di;
                p[j] += dj;
                f(&p)
            };
            let v = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let gap = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        gap
    } else {
        gap / scale
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| gaussian(rng));
    g.qr().q()
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> SpdMatrix {
    let q = random_orthogonal(rng, d);
    let l = DVector::from_fn(d, |_, _| rng.random_range(lo..hi));
    let m = &q * DMatrix::from_diagonal(&l) * q.transpose();
    SpdMatrix::new((&m + m.transpose()) * 0.5).unwrap()
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * gaussian(rng))
}

/// Minimizes `f` over a box by grid search followed by a shrinking compass search.
pub fn grid_then_polish(f: impl Fn(f64, f64) -> f64, lo: [f64; 2], hi: [f64; 2], cells: usize, tol: f64) -> [f64; 2] {
    let mut best = [lo[0], lo[1]];
    let mut best_v = f64::INFINITY;
    for i in 0..=cells {
        for j in 0..=cells {
            let x = lo[0] + (hi[0] - lo[0]) * i as f64 / cells as f64;
            let y = lo[1] + (hi[1] - lo[1]) * j as f64 / cells as f64;
            let v = f(x, y);
            if v < best_v {
                best_v = v;
                best = [x, y];
            }
        }
    }
    let mut step = ((hi[0] - lo[0]) / cells as f64).max((hi[1] - lo[1]) / cells as f64);
    let dirs = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    while step > tol {
        let mut moved = false;
        for d in dirs {
            let c = [best[0] + step * d[0], best[1] + step * d[1]];
            let v = f(c[0], c[1]);
            if v < best_v {
                best_v = v;
                best = c;
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best
}
