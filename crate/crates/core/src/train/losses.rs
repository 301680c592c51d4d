//! Loss functions with analytic gradients: GAE targets, the clipped PPO
//! objective, InfoNCE trajectory consistency and KL behavioral diversity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_softmax, Matrix};

/// Log-probability floor used inside KL terms (`ln 1e-12`).
pub const LOG_PROB_FLOOR: f64 = -27.631021115928547;

/// Generalized advantage estimation.
///
/// `values` carries one extra bootstrap entry. `dones[t]` marks that the
/// episode ended after step `t`, cutting both the bootstrap and the trace.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    gae_lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::Shape(format!(
            "gae: {n} rewards, {} values (want n+1), {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        carry = delta + gamma * gae_lambda * live * carry;
        adv[t] = carry;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts to zero mean and scales to unit (population) variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoCoefficients {
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    /// `surrogate + value_coef * value_loss - entropy_coef * entropy`.
    pub loss: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Inputs for one PPO minibatch, row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct PpoBatch<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct PpoGrads {
    pub d_logits: Matrix,
    pub d_values: Matrix,
}

/// Clipped surrogate plus value MSE minus entropy bonus, averaged over rows.
pub fn ppo_loss(
    logits: &Matrix,
    values: &Matrix,
    batch: PpoBatch<'_>,
    coef: PpoCoefficients,
) -> Result<(PpoStats, PpoGrads)> {
    let n = logits.rows;
    if n == 0
        || values.rows != n
        || values.cols != 1
        || [
            batch.actions.len(),
            batch.old_log_probs.len(),
            batch.advantages.len(),
            batch.returns.len(),
        ]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::Shape("ppo: misaligned minibatch".into()));
    }
    let inv = 1.0 / n as f64;
    let eps = coef.clip_epsilon;
    let mut stats = PpoStats::default();
    let mut d_logits = Matrix::zeros(n, logits.cols);
    let mut d_values = Matrix::zeros(n, 1);
    for i in 0..n {
        let lp = log_softmax(logits.row(i));
        let a = batch.actions[i];
        let log_ratio = lp[a] - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        if !ratio.is_finite() {
            return Err(Error::Numerical(format!(
                "ppo: non-finite ratio at row {i} (log ratio {log_ratio})"
            )));
        }
        let adv = batch.advantages[i];
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
        let (unclipped_obj, clipped_obj) = (ratio * adv, clipped * adv);
        stats.surrogate -= unclipped_obj.min(clipped_obj) * inv;
        if (ratio - 1.0).abs() > eps {
            stats.clip_fraction += inv;
        }
        stats.approx_kl += ((ratio - 1.0) - log_ratio) * inv;
        // d(-min)/d(log pi_a): only the unclipped branch carries gradient
        let d_logp = if unclipped_obj <= clipped_obj {
            -adv * ratio * inv
        } else {
            0.0
        };
        let entropy: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
        stats.entropy += entropy * inv;
        let row = d_logits.row_mut(i);
        for (j, (d, &l)) in row.iter_mut().zip(&lp).enumerate() {
            let p = l.exp();
            let onehot = if j == a { 1.0 } else { 0.0 };
            *d = d_logp * (onehot - p) + coef.entropy_coef * inv * p * (l + entropy);
        }
        let err = values.get(i, 0) - batch.returns[i];
        stats.value_loss += err * err * inv;
        d_values.set(i, 0, 2.0 * coef.value_coef * err * inv);
    }
    stats.loss =
        stats.surrogate + coef.value_coef * stats.value_loss - coef.entropy_coef * stats.entropy;
    Ok((stats, PpoGrads { d_logits, d_values }))
}

/// InfoNCE over matched rows of unit trajectory embeddings `z` and unit
/// persona embeddings `e`. Row `i` of `e` is the positive for row `i` of
/// `z`; every other row is a negative. Returns `(loss, dL/dz, dL/de)`.
pub fn infonce_loss(z: &Matrix, e: &Matrix, temperature: f64) -> Result<(f64, Matrix, Matrix)> {
    let b = z.rows;
    if b == 0 || e.rows != b || e.cols != z.cols {
        return Err(Error::Shape(format!(
            "infonce: {}x{} trajectories vs {}x{} personas",
            z.rows, z.cols, e.rows, e.cols
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter("infonce temperature must be positive".into()));
    }
    let inv_t = 1.0 / temperature;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut d_s = Matrix::zeros(b, b);
    for i in 0..b {
        let s: Vec<f64> = (0..b)
            .map(|j| crate::linalg::dot(z.row(i), e.row(j)) * inv_t)
            .collect();
        let lp = log_softmax(&s);
        loss -= lp[i] * inv_b;
        for (j, d) in d_s.row_mut(i).iter_mut().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            *d = (lp[j].exp() - target) * inv_b * inv_t;
        }
    }
    let mut dz = Matrix::zeros(b, z.cols);
    let mut de = Matrix::zeros(b, z.cols);
    for i in 0..b {
        for j in 0..b {
            let g = d_s.get(i, j);
            for ((dzk, dek), (&zk, &ek)) in dz
                .row_mut(i)
                .iter_mut()
                .zip(de.row_mut(j).iter_mut())
                .zip(z.row(i).iter().zip(e.row(j)))
            {
                *dzk += g * ek;
                *dek += g * zk;
            }
        }
    }
    Ok((loss, dz, de))
}

fn floored_log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let lp = log_softmax(logits);
    let p = lp.iter().map(|l| l.exp()).collect();
    let live = lp.iter().map(|&l| l > LOG_PROB_FLOOR).collect();
    let c = lp.iter().map(|&l| l.max(LOG_PROB_FLOOR)).collect();
    (c, p, live)
}

/// `KL(P || Q)` of two categorical distributions given by logits, with
/// log-probabilities floored at [`LOG_PROB_FLOOR`].
pub fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let (lp, p, _) = floored_log_softmax(p_logits);
    let (lq, _, _) = floored_log_softmax(q_logits);
    p.iter()
        .zip(lp.iter().zip(&lq))
        .map(|(pa, (a, b))| pa * (a - b))
        .sum()
}

/// Negative mean KL over all ordered persona pairs `p != q` and all states.
///
/// `logits` rows are laid out persona-major: row `p * n_states + s`.
/// Returns the loss and its gradient with respect to `logits`.
pub fn kl_diversity_loss(
    logits: &Matrix,
    n_personas: usize,
    n_states: usize,
) -> Result<(f64, Matrix)> {
    if logits.rows != n_personas * n_states || n_states == 0 {
        return Err(Error::Shape(format!(
            "diversity: {} rows for {n_personas} personas x {n_states} states",
            logits.rows
        )));
    }
    if n_personas < 2 {
        return Err(Error::Parameter("diversity loss needs at least 2 personas".into()));
    }
    let a_dim = logits.cols;
    let rows: Vec<_> = (0..logits.rows)
        .map(|r| floored_log_softmax(logits.row(r)))
        .collect();
    let scale = 1.0 / (n_personas * (n_personas - 1) * n_states) as f64;
    let mut total = 0.0;
    // gradient with respect to each row's (unfloored) log-probabilities
    let mut g_lp = Matrix::zeros(logits.rows, a_dim);
    for s in 0..n_states {
        for p in 0..n_personas {
            let rp = p * n_states + s;
            let (lp, pp, live_p) = &rows[rp];
            for q in 0..n_personas {
                if p == q {
                    continue;
                }
                let rq = q * n_states + s;
                let (lq, _, live_q) = &rows[rq];
                for a in 0..a_dim {
                    let diff = lp[a] - lq[a];
                    total += pp[a] * diff;
                    let dp = pp[a] * diff + if live_p[a] { pp[a] } else { 0.0 };
                    let dq = if live_q[a] { -pp[a] } else { 0.0 };
                    // loss = -scale * KL
                    let v = g_lp.get(rp, a) - scale * dp;
                    g_lp.set(rp, a, v);
                    let v = g_lp.get(rq, a) - scale * dq;
                    g_lp.set(rq, a, v);
                }
            }
        }
    }
    let mut d_logits = Matrix::zeros(logits.rows, a_dim);
    for (r, (_, p, _)) in rows.iter().enumerate() {
        let g = g_lp.row(r);
        let sum: f64 = g.iter().sum();
        for (d, (&gi, &pi)) in d_logits.row_mut(r).iter_mut().zip(g.iter().zip(p)) {
            *d = gi - pi * sum;
        }
    }
    Ok((-total * scale, d_logits))
}
