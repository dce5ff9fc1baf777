//! Reference computations written independently of the library.
#![allow(dead_code)]

use drkrnet_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum();
        if off <= 1e-28 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Smallest `k` whose leading eigenvalues carry `fraction` of the total,
/// counting tiny negatives as zero.
pub fn truncation_count(eigenvalues: &[f64], fraction: f64) -> usize {
    let clipped: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let mut acc = 0.0;
    for (k, v) in clipped.iter().enumerate() {
        acc += v;
        if acc >= fraction * total {
            return k + 1;
        }
    }
    clipped.len()
}

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂x_j`.
pub fn numerical_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; n];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..n {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn lu_log_abs_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap())
            .unwrap();
        m.swap(k, p);
        let piv = m[k][k];
        acc += piv.abs().ln();
        for i in k + 1..n {
            let f = m[i][k] / piv;
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    acc
}

/// Compares analytic gradients with central differences of `loss` on up to
/// `per_tensor` randomly chosen entries of every parameter tensor. Returns
/// the worst per-tensor relative error `‖g - g_fd‖ / ‖g_fd‖`.
pub fn gradient_check(
    params: &ParamStore,
    grads: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        let idx: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let g = grads.get(&name).expect("gradient for every parameter");
        let (mut num, mut den) = (0.0, 0.0);
        for i in idx {
            let fd = central_difference(params, &name, i, h, &loss);
            num += (g.data()[i] - fd).powi(2);
            den += fd * fd;
        }
        if den > 0.0 {
            worst = worst.max((num / den).sqrt());
        } else {
            assert!(
                num.sqrt() < 1e-9,
                "{name}: analytic gradient {num} where differences vanish"
            );
        }
    }
    worst
}

pub fn central_difference(
    params: &ParamStore,
    name: &str,
    i: usize,
    h: f64,
    loss: &impl Fn(&ParamStore) -> f64,
) -> f64 {
    let shift = |delta: f64| {
        let mut p = params.clone();
        let t = p.get_mut(name).unwrap();
        let mut data = t.data().to_vec();
        data[i] += delta;
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
        loss(&p)
    };
    (shift(h) - shift(-h)) / (2.0 * h)
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))` in closed form.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum()
}

/// One-sample Kolmogorov-Smirnov statistic against `N(0, 1)`.
pub fn ks_standard_normal(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let phi = Normal::new(0.0, 1.0).unwrap();
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = phi.cdf(x);
            (c - i as f64 / n).abs().max((i as f64 + 1.0) / n - c)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Standard error of the mean of a correlated series by non-overlapping
/// batch means.
pub fn batch_means_se(series: &[f64], n_batches: usize) -> f64 {
    let b = series.len() / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|k| series[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (var / n_batches as f64).sqrt()
}

pub fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
