//! Brute-force and closed-form references for the loss and statistics code.

use persona_policy::eval::{spearman, symmetric_kl, wilson_interval, Z_95};
use persona_policy::linalg::{log_softmax, Matrix};
use persona_policy::train::losses::{compute_gae, infonce_loss, kl_diversity_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Advantages as explicit truncated discounted sums of TD errors.
pub fn gae_brute(r: &[f64], v: &[f64], dones: &[bool], gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|j| {
            let next = if dones[j] { 0.0 } else { v[j + 1] };
            r[j] + gamma * next - v[j]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in t..n {
                total += (gamma * lam).powi((k - t) as i32) * delta[k];
                if dones[k] {
                    break;
                }
            }
            total
        })
        .collect()
}

/// Max absolute deviation between `compute_gae` and the brute-force sums
/// over 100 seeded sequences of length 1..=16.
pub fn gae_max_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=16);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
        let (gamma, lam) = if case % 4 == 0 {
            (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0))
        } else {
            (0.99, 0.95)
        };
        let (adv, ret) = compute_gae(&r, &v, &dones, gamma, lam).unwrap();
        let want = gae_brute(&r, &v, &dones, gamma, lam);
        for t in 0..n {
            worst = worst.max((adv[t] - want[t]).abs());
            worst = worst.max((ret[t] - (want[t] + v[t])).abs());
        }
    }
    worst
}

/// 1-based ranks by counting strictly smaller and equal entries.
pub fn ranks_by_counting(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Spearman via counted ranks and the pairwise-difference covariance form.
pub fn spearman_brute(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks_by_counting(x), ranks_by_counting(y));
    let pair = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                s += (a[i] - a[j]) * (b[i] - b[j]);
            }
        }
        s
    };
    pair(&rx, &ry) / (pair(&rx, &rx) * pair(&ry, &ry)).sqrt()
}

/// Twenty seeded tables of 10..=40 points; odd tables are rounded to
/// one decimal so they carry ties.
pub fn spearman_tables() -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..20)
        .map(|k| {
            let n = rng.random_range(10..=40);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&a| a * (k as f64 / 10.0 - 1.0) + rng.random_range(-1.0..1.0))
                .collect();
            if k % 2 == 1 {
                let round = |v: &f64| (v * 10.0).round() / 10.0;
                (x.iter().map(round).collect(), y.iter().map(round).collect())
            } else {
                (x, y)
            }
        })
        .collect()
}

pub fn spearman_max_error() -> f64 {
    spearman_tables()
        .iter()
        .map(|(x, y)| (spearman(x, y).unwrap() - spearman_brute(x, y)).abs())
        .fold(0.0, f64::max)
}

/// Rounds an interval to two decimals.
pub fn wilson_rounded(successes: usize, n: usize) -> (f64, f64) {
    let (lo, hi) = wilson_interval(successes, n, Z_95).unwrap();
    ((lo * 100.0).round() / 100.0, (hi * 100.0).round() / 100.0)
}

fn one_hot_rows(n: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(n, dim);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Checks the InfoNCE and KL closed forms; returns a description of the
/// first failure.
pub fn loss_closed_forms() -> Result<(), String> {
    let t = 0.07;
    let z = one_hot_rows(1, 4);
    let (single, _, _) = infonce_loss(&z, &z, t).unwrap();
    if single != 0.0 {
        return Err(format!("batch of one gave {single}"));
    }

    let e = one_hot_rows(4, 4);
    let (perfect, _, _) = infonce_loss(&e, &e, t).unwrap();
    let want = (1.0 + 3.0 * (-1.0f64 / t).exp()).ln();
    if rel(perfect, want) > 1e-6 || rel(perfect, 1.87e-6) > 1e-2 {
        return Err(format!("perfect batch {perfect:e}, closed form {want:e}"));
    }

    // dot products 0 on the diagonal and 1 elsewhere
    let e = one_hot_rows(4, 4);
    let mut z = Matrix::filled(4, 4, 1.0);
    for i in 0..4 {
        z.set(i, i, 0.0);
    }
    let (adv, _, _) = infonce_loss(&z, &e, t).unwrap();
    let want = (1.0 + 3.0 * (1.0 / t).exp()).ln();
    if rel(adv, want) > 1e-6 || (want - 15.38).abs() > 5e-3 {
        return Err(format!("adversarial batch {adv}, closed form {want}"));
    }

    let p = [0.5f64.ln(), 0.5f64.ln()];
    let q = [0.9f64.ln(), 0.1f64.ln()];
    let logits = Matrix::from_rows(&[p, q]).unwrap();
    let (kl, _) = kl_diversity_loss(&logits, 2, 1).unwrap();
    let want = -(0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln()
        + 0.9 * (0.9f64 / 0.5).ln()
        + 0.1 * (0.1f64 / 0.5).ln())
        / 2.0;
    if (kl - want).abs() > 1e-10 {
        return Err(format!("diversity loss {kl}, hand value {want}"));
    }
    let sym = symmetric_kl(&log_softmax(&p), &log_softmax(&q));
    if (sym + want).abs() > 1e-10 {
        return Err(format!("symmetric KL {sym}, hand value {}", -want));
    }
    let same = Matrix::from_rows(&[p, p]).unwrap();
    let (zero, _) = kl_diversity_loss(&same, 2, 1).unwrap();
    if zero.abs() > 1e-10 {
        return Err(format!("identical distributions gave {zero}"));
    }
    Ok(())
}
