//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use diffcom::autograd::{Graph, Var};
use diffcom::nn::{ParamId, ParamStore};
use diffcom::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_points(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(n, 3, (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Quadratic-time FPS: every pick rescans all selected points.
pub fn fps(points: &Tensor, m: usize, first: usize) -> Vec<usize> {
    let mut sel = vec![first];
    while sel.len() < m {
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..points.rows() {
            let d = sel.iter().map(|&s| d2(points.row(i), points.row(s))).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

/// Full sort of all distances per query; ties by lower index.
pub fn knn(q: &Tensor, r: &Tensor, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..q.rows() {
        let mut all: Vec<(f64, usize)> = (0..r.rows()).map(|j| (d2(q.row(i), r.row(j)), j)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(all[..k].iter().map(|p| p.1));
    }
    out
}

fn mean_nn(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows())
        .map(|i| (0..b.rows()).map(|j| d2(a.row(i), b.row(j))).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.rows() as f64
}

pub fn chamfer(a: &Tensor, b: &Tensor) -> f64 {
    mean_nn(a, b) + mean_nn(b, a)
}

pub fn d1_psnr(a: &Tensor, b: &Tensor, peak: f64) -> f64 {
    let mse = mean_nn(a, b).max(mean_nn(b, a));
    10.0 * (peak * peak / mse).log10()
}

/// Cubic least squares in `x - mean(x)` through normal equations and
/// Gaussian elimination. Returns the shift and the coefficients.
fn cubic_fit(x: &[f64], y: &[f64]) -> (f64, [f64; 4]) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let mut a = [[0.0f64; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let xi = xi - m;
        let p = [1.0, xi, xi * xi, xi * xi * xi];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += p[r] * p[c];
            }
            a[r][4] += p[r] * yi;
        }
    }
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (m, [a[0][4] / a[0][0], a[1][4] / a[1][1], a[2][4] / a[2][2], a[3][4] / a[3][3]])
}

/// Composite Simpson rule with `samples` intervals.
fn integrate(fit: &(f64, [f64; 4]), lo: f64, hi: f64, samples: usize) -> f64 {
    let (m, c) = fit;
    let f = |x: f64| {
        let x = x - m;
        c[0] + x * (c[1] + x * (c[2] + x * c[3]))
    };
    let h = (hi - lo) / samples as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..samples {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `(bd_psnr, bd_rate%)` of curve `b` against `a`, curves as `(bpp, psnr)`.
pub fn bd(a: &[(f64, f64)], b: &[(f64, f64)], samples: usize) -> (f64, f64) {
    let split = |c: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { c.iter().map(|&(r, p)| (r.log10(), p)).unzip() };
    let (ra, pa) = split(a);
    let (rb, pb) = split(b);
    let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (l, h) = (lo(&ra).max(lo(&rb)), hi(&ra).min(hi(&rb)));
    let psnr = (integrate(&cubic_fit(&rb, &pb), l, h, samples) - integrate(&cubic_fit(&ra, &pa), l, h, samples)) / (h - l);
    let (l, h) = (lo(&pa).max(lo(&pb)), hi(&pa).min(hi(&pb)));
    let avg = (integrate(&cubic_fit(&pb, &rb), l, h, samples) - integrate(&cubic_fit(&pa, &ra), l, h, samples)) / (h - l);
    (psnr, (10f64.powf(avg) - 1.0) * 100.0)
}

/// Random strictly increasing RD curve with `n` points.
pub fn random_curve(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    let mut bpp = rng.gen_range(0.05..0.2);
    let mut psnr = rng.gen_range(25.0..35.0);
    (0..n)
        .map(|_| {
            bpp *= rng.gen_range(1.4..2.2);
            psnr += rng.gen_range(1.0..3.0);
            (bpp, psnr)
        })
        .collect()
}

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

/// `‖fd − analytic‖ / ‖fd‖` over sampled entries of the parameters named `prefix*`.
pub fn param_rel_err(
    store: &ParamStore,
    prefix: &str,
    per_param: usize,
    loss: impl Fn(&ParamStore) -> (f64, Vec<(ParamId, Tensor)>),
) -> f64 {
    let (_, grads) = loss(store);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut work = store.clone();
    let (mut num, mut den, mut checked) = (0.0, 0.0, 0);
    for id in store.ids().filter(|&id| store.name(id).starts_with(prefix)) {
        let len = store.get(id).len();
        let analytic = grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t.clone());
        for _ in 0..per_param.min(len) {
            let i = rng.gen_range(0..len);
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + H;
            let up = loss(&work).0;
            work.get_mut(id).data_mut()[i] = orig - H;
            let down = loss(&work).0;
            work.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * H);
            let an = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            num += (fd - an).powi(2);
            den += fd * fd;
            checked += 1;
        }
    }
    assert!(checked > 0, "no parameters under {prefix}");
    assert!(den > 0.0, "all sampled gradients under {prefix} are zero");
    (num / den).sqrt()
}

/// Central differences on an input tensor of a scalar tape function.
pub fn input_rel_err(x0: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let y = f(&mut g, x);
    let grads = g.backward(y);
    let an = grads.get(x).unwrap().clone();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..x0.len() {
        let eval = |d: f64| {
            let mut t = x0.clone();
            t.data_mut()[i] += d;
            let mut g = Graph::new();
            let x = g.input(t);
            let y = f(&mut g, x);
            g.value(y).item()
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        num += (fd - an.data()[i]).powi(2);
        den += fd * fd;
    }
    (num / den).sqrt()
}
