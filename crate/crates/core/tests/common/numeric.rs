//! Analytic gradients against central finite differences, plus dense
//! reference forwards. Every check panics on the first mismatch.

use persona_policy::embedding::ProjectionParams;
use persona_policy::linalg::{log_softmax, Matrix};
use persona_policy::nn::{Conditioning, EncoderInput, Model, ModelConfig};
use persona_policy::train::losses::{
    infonce_loss, kl_diversity_loss, ppo_loss, PpoBatch, PpoCoefficients,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-7)
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.data.iter_mut().for_each(|v| *v = rng.random::<f64>() * 2.0 - 1.0);
    m
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = random(rows, cols, rng);
    for i in 0..rows {
        let n = persona_policy::linalg::norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn weighted_sum(y: &Matrix, w: &Matrix) -> f64 {
    y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
}

fn small_config(conditioning: Conditioning, obs_concat: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(5, 4, conditioning);
    cfg.raw_dim = 7;
    cfg.rank = 3;
    cfg.embed_dim = 6;
    cfg.hidden = [5, 4, 3];
    cfg.encoder_obs_concat = obs_concat;
    cfg
}

/// Compares every entry (or `sample` random entries per tensor) of every
/// tensor whose name starts with `prefix`.
fn check_model(
    model: &Model,
    grads: &Model,
    prefix: &str,
    sample: Option<usize>,
    loss: impl Fn(&Model) -> f64,
) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let names: Vec<(String, usize)> = model
        .tensors()
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, m)| (n.clone(), m.len()))
        .collect();
    assert!(!names.is_empty(), "no tensors under {prefix}");
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.data.clone()))
        .collect();
    let mut checked = 0;
    let mut probe = model.clone();
    for (name, len) in names {
        let idx: Vec<usize> = match sample {
            Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        let g = &analytic.iter().find(|(n, _)| *n == name).unwrap().1;
        for i in idx {
            let orig = value(&probe, &name, i);
            set(&mut probe, &name, i, orig + H);
            let lp = loss(&probe);
            set(&mut probe, &name, i, orig - H);
            let lm = loss(&probe);
            set(&mut probe, &name, i, orig);
            let num = (lp - lm) / (2.0 * H);
            let e = rel_err(g[i], num);
            assert!(e < TOL, "{name}[{i}]: analytic {} numeric {num} rel {e:e}", g[i]);
            checked += 1;
        }
    }
    checked
}

fn value(m: &Model, name: &str, i: usize) -> f64 {
    m.tensors().into_iter().find(|(n, _)| n == name).unwrap().1.data[i]
}

fn set(m: &mut Model, name: &str, i: usize, v: f64) {
    m.tensors_mut().into_iter().find(|(n, _)| n == name).unwrap().1.data[i] = v;
}

fn check_mlp(conditioning: Conditioning) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = small_config(conditioning, false);
    let mut model = Model::init(cfg, 3);
    // move FiLM and head weights away from their init so every path is live
    for (_, t) in model.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += 0.3 * (rng.random::<f64>() - 0.5));
    }
    let raw = unit_rows(3, cfg.raw_dim, &mut rng);
    let obs = random(8, cfg.obs_dim, &mut rng);
    let idx = [0, 1, 2, 0, 1, 2, 2, 0];
    let wp = random(8, cfg.n_actions, &mut rng);
    let wv = random(8, 1, &mut rng);
    let loss = |m: &Model| {
        let (e, _) = m.projection.project_batch(&raw).unwrap();
        let p = m.policy.forward(&obs, &e, &idx).unwrap();
        let v = m.value.forward(&obs, &e, &idx).unwrap();
        weighted_sum(&p, &wp) + weighted_sum(&v, &wv)
    };
    let mut grads = model.zeros_like();
    let (e, prec) = model.projection.project_batch(&raw).unwrap();
    let (_, rp) = model.policy.forward_recorded(&obs, &e, &idx).unwrap();
    let (_, rv) = model.value.forward_recorded(&obs, &e, &idx).unwrap();
    let mut d_e = model.policy.backward(&rp, &wp, &mut grads.policy);
    d_e.add_assign(&model.value.backward(&rv, &wv, &mut grads.value));
    model.projection.backward(&prec, &d_e, &mut grads.projection);
    let n = check_model(&model, &grads, "policy", None, loss)
        + check_model(&model, &grads, "value", None, loss)
        + check_model(&model, &grads, "projection", None, loss);
    assert!(n > 100);
}

pub fn film_policy_value_projection_gradients() {
    check_mlp(Conditioning::Film);
}

pub fn concat_policy_value_projection_gradients() {
    check_mlp(Conditioning::Concat);
}

fn check_encoder(obs_concat: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = small_config(Conditioning::Film, obs_concat);
    let mut model = Model::init(cfg, 4);
    for (name, t) in model.tensors_mut() {
        if name.contains(".b") {
            t.data.iter_mut().for_each(|v| *v = 0.2 * (rng.random::<f64>() - 0.5));
        }
    }
    let lens = [7usize, 7, 4, 1, 9];
    let seqs: Vec<Vec<usize>> = lens
        .iter()
        .map(|&l| (0..l).map(|_| rng.random_range(0..cfg.n_actions)).collect())
        .collect();
    let obs: Vec<Vec<Vec<f64>>> = lens
        .iter()
        .map(|&l| {
            (0..l)
                .map(|_| (0..cfg.obs_dim).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect()
        })
        .collect();
    let inputs: Vec<EncoderInput<'_>> = seqs
        .iter()
        .zip(&obs)
        .map(|(a, o)| EncoderInput {
            actions: a,
            observations: obs_concat.then_some(o.as_slice()),
        })
        .collect();
    let w = random(lens.len(), cfg.embed_dim, &mut rng);
    let loss = |m: &Model| weighted_sum(&m.encoder.encode_batch(&inputs).unwrap(), &w);
    let mut grads = model.zeros_like();
    let (_, rec) = model.encoder.encode_batch_recorded(&inputs).unwrap();
    model.encoder.backward(&rec, &w, &mut grads.encoder);
    assert!(check_model(&model, &grads, "encoder", None, loss) > 100);
}

pub fn gru_encoder_gradients() {
    check_encoder(false);
}

pub fn gru_encoder_obs_concat_gradients() {
    check_encoder(true);
}

pub fn full_size_networks_sampled_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ModelConfig::new(20, 12, Conditioning::Film);
    let model = Model::init(cfg, 0);
    let raw = unit_rows(4, cfg.raw_dim, &mut rng);
    let obs = random(6, cfg.obs_dim, &mut rng);
    let idx = [0, 1, 2, 3, 0, 1];
    let wp = random(6, cfg.n_actions, &mut rng);
    let seqs: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..128).map(|_| rng.random_range(0..12)).collect())
        .collect();
    let inputs: Vec<EncoderInput<'_>> = seqs.iter().map(|s| EncoderInput::actions(s)).collect();
    let wz = random(3, cfg.embed_dim, &mut rng);
    let loss = |m: &Model| {
        let (e, _) = m.projection.project_batch(&raw).unwrap();
        weighted_sum(&m.policy.forward(&obs, &e, &idx).unwrap(), &wp)
            + weighted_sum(&m.encoder.encode_batch(&inputs).unwrap(), &wz)
    };
    let mut grads = model.zeros_like();
    let (e, prec) = model.projection.project_batch(&raw).unwrap();
    let (_, rp) = model.policy.forward_recorded(&obs, &e, &idx).unwrap();
    let d_e = model.policy.backward(&rp, &wp, &mut grads.policy);
    model.projection.backward(&prec, &d_e, &mut grads.projection);
    let (_, rec) = model.encoder.encode_batch_recorded(&inputs).unwrap();
    model.encoder.backward(&rec, &wz, &mut grads.encoder);
    for prefix in ["policy", "projection", "encoder"] {
        check_model(&model, &grads, prefix, Some(6), loss);
    }
}

fn check_matrix_grad(x: &Matrix, g: &Matrix, loss: impl Fn(&Matrix) -> f64) {
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + H;
        let lp = loss(&probe);
        probe.data[i] = orig - H;
        let lm = loss(&probe);
        probe.data[i] = orig;
        let num = (lp - lm) / (2.0 * H);
        let e = rel_err(g.data[i], num);
        assert!(e < TOL, "entry {i}: analytic {} numeric {num} rel {e:e}", g.data[i]);
    }
}

pub fn ppo_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 12;
    let logits = random(n, 5, &mut rng);
    let values = random(n, 1, &mut rng);
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    // old policy near the current one so both clipped and unclipped rows occur
    let old: Vec<f64> = (0..n)
        .map(|i| log_softmax(logits.row(i))[actions[i]] + (rng.random::<f64>() - 0.5) * 0.8)
        .collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let ret: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let coef = PpoCoefficients {
        clip_epsilon: 0.2,
        value_coef: 0.5,
        entropy_coef: 0.01,
    };
    let batch = PpoBatch {
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        returns: &ret,
    };
    let (stats, g) = ppo_loss(&logits, &values, batch, coef).unwrap();
    assert!(stats.clip_fraction > 0.0 && stats.clip_fraction < 1.0);
    check_matrix_grad(&logits, &g.d_logits, |l| ppo_loss(l, &values, batch, coef).unwrap().0.loss);
    check_matrix_grad(&values, &g.d_values, |v| ppo_loss(&logits, v, batch, coef).unwrap().0.loss);
}

pub fn infonce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = unit_rows(6, 8, &mut rng);
    let e = unit_rows(6, 8, &mut rng);
    let (_, dz, de) = infonce_loss(&z, &e, 0.07).unwrap();
    check_matrix_grad(&z, &dz, |z| infonce_loss(z, &e, 0.07).unwrap().0);
    check_matrix_grad(&e, &de, |e| infonce_loss(&z, e, 0.07).unwrap().0);
}

pub fn kl_diversity_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = random(4 * 3, 5, &mut rng);
    let (_, d) = kl_diversity_loss(&logits, 4, 3).unwrap();
    check_matrix_grad(&logits, &d, |l| kl_diversity_loss(l, 4, 3).unwrap().0);
}

pub fn projection_normalization_gradient_is_tangent() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = ProjectionParams::init_with(9, 3, 5, 2);
    let raw = unit_rows(2, 9, &mut rng);
    let (e, rec) = p.project_batch(&raw).unwrap();
    // upstream gradient parallel to the output: normalization absorbs it
    let mut grads = p.zeros_like();
    p.backward(&rec, &e, &mut grads);
    assert!(grads.a.sum_sq().sqrt() < 1e-12 && grads.b.sum_sq().sqrt() < 1e-12);
}

/// Direct loop implementation of the conditioned MLP.
fn dense_mlp(model: &Model, obs: &[f64], cond: &[f64]) -> Vec<f64> {
    let net = &model.policy;
    let affine = |w: &Matrix, b: &Matrix, x: &[f64]| -> Vec<f64> {
        (0..w.rows)
            .map(|i| b.data[i] + (0..w.cols).map(|j| w.get(i, j) * x[j]).sum::<f64>())
            .collect()
    };
    let mut x: Vec<f64> = match model.config.conditioning {
        Conditioning::Film => obs.to_vec(),
        Conditioning::Concat => obs.iter().chain(cond).copied().collect(),
    };
    for l in 0..3 {
        let h: Vec<f64> = affine(&net.layers[l].w, &net.layers[l].b, &x)
            .into_iter()
            .map(f64::tanh)
            .collect();
        x = if model.config.conditioning == Conditioning::Film {
            let g = affine(&net.film_gamma[l].w, &net.film_gamma[l].b, cond);
            let b = affine(&net.film_beta[l].w, &net.film_beta[l].b, cond);
            h.iter().zip(g).zip(b).map(|((h, g), b)| (1.0 + g) * h + b).collect()
        } else {
            h
        };
    }
    affine(&net.layers[3].w, &net.layers[3].b, &x)
}

pub fn mlp_forward_matches_dense_oracle() {
    for conditioning in [Conditioning::Film, Conditioning::Concat] {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = ModelConfig::new(33, 20, conditioning);
        let mut model = Model::init(cfg, 6);
        for (_, t) in model.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += 0.05 * (rng.random::<f64>() - 0.5));
        }
        let cond = unit_rows(3, cfg.embed_dim, &mut rng);
        let obs = random(5, cfg.obs_dim, &mut rng);
        let idx = [2, 0, 1, 1, 2];
        let y = model.policy.forward(&obs, &cond, &idx).unwrap();
        for i in 0..5 {
            let want = dense_mlp(&model, obs.row(i), cond.row(idx[i]));
            for (a, b) in y.row(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{conditioning:?}: {a} vs {b}");
            }
        }
    }
}

/// Hand-unrolled two-layer GRU on one sequence.
fn dense_gru(model: &Model, actions: &[usize]) -> Vec<f64> {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut inputs: Vec<Vec<f64>> = actions
        .iter()
        .map(|&a| {
            let mut v = vec![0.0; model.config.n_actions];
            v[a] = 1.0;
            v
        })
        .collect();
    for layer in &model.encoder.layers {
        let hd = layer.w_h.cols;
        let mut h = vec![0.0; hd];
        let mut outs = Vec::new();
        for x in &inputs {
            let wx = |r: usize| (0..x.len()).map(|j| layer.w_x.get(r, j) * x[j]).sum::<f64>();
            let uh = |r: usize| (0..hd).map(|j| layer.w_h.get(r, j) * h[j]).sum::<f64>();
            let mut next = vec![0.0; hd];
            for k in 0..hd {
                let z = sig(wx(k) + uh(k) + layer.b.data[k]);
                let r = sig(wx(hd + k) + uh(hd + k) + layer.b.data[hd + k]);
                let n = (wx(2 * hd + k) + layer.b.data[2 * hd + k] + r * uh(2 * hd + k)).tanh();
                next[k] = (1.0 - z) * n + z * h[k];
            }
            h = next;
            outs.push(h.clone());
        }
        inputs = outs;
    }
    let last = inputs.last().unwrap();
    let n = persona_policy::linalg::norm(last);
    last.iter().map(|v| v / n).collect()
}

pub fn gru_forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = ModelConfig::new(20, 12, Conditioning::Film);
    let mut model = Model::init(cfg, 7);
    for layer in &mut model.encoder.layers {
        layer.b.data.iter_mut().for_each(|v| *v = 0.3 * (rng.random::<f64>() - 0.5));
    }
    let seqs: Vec<Vec<usize>> = [3usize, 40, 40, 17]
        .iter()
        .map(|&l| (0..l).map(|_| rng.random_range(0..12)).collect())
        .collect();
    let inputs: Vec<EncoderInput<'_>> = seqs.iter().map(|s| EncoderInput::actions(s)).collect();
    let z = model.encoder.encode_batch(&inputs).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        for (a, b) in z.row(i).iter().zip(dense_gru(&model, s)) {
            assert!((a - b).abs() < 1e-10, "seq {i}: {a} vs {b}");
        }
    }
}

/// Every gradient and forward-oracle check, by name.
pub const ALL: [(&str, fn()); 11] = [
    ("film_policy_value_projection_gradients", film_policy_value_projection_gradients),
    ("concat_policy_value_projection_gradients", concat_policy_value_projection_gradients),
    ("gru_encoder_gradients", gru_encoder_gradients),
    ("gru_encoder_obs_concat_gradients", gru_encoder_obs_concat_gradients),
    ("full_size_networks_sampled_gradients", full_size_networks_sampled_gradients),
    ("ppo_loss_gradients", ppo_loss_gradients),
    ("infonce_gradients", infonce_gradients),
    ("kl_diversity_gradients", kl_diversity_gradients),
    ("projection_normalization_gradient_is_tangent", projection_normalization_gradient_is_tangent),
    ("mlp_forward_matches_dense_oracle", mlp_forward_matches_dense_oracle),
    ("gru_forward_matches_dense_oracle", gru_forward_matches_dense_oracle),
];
