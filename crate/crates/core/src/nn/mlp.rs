//! Persona-conditioned MLP used for both the policy and the value network.
//!
//! Hidden layers are `h = tanh(x W^T + b)`. In FiLM mode every hidden
//! activation is modulated as `h' = (1 + G_l e + g_l) * h + (H_l e + k_l)`;
//! in concat mode the input is `obs ++ e` and there are no generators.
//!
//! Conditioning vectors are passed as a `P x cond_dim` matrix plus a per-row
//! index, so generator outputs are computed once per distinct persona.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_col_sums, add_matmul_tn, add_row_bias, matmul_nn, matmul_nt, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Film,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    pub w: Matrix,
    /// `1 x out`.
    pub b: Matrix,
}

impl Dense {
    pub fn init(input: usize, output: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, gain / (input as f64).sqrt()).unwrap();
        let mut w = Matrix::zeros(output, input);
        w.data.iter_mut().for_each(|v| *v = normal.sample(rng));
        Self {
            w,
            b: Matrix::zeros(1, output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = matmul_nt(x, &self.w);
        add_row_bias(&mut y, &self.b);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grads: &mut Dense) -> Matrix {
        add_matmul_tn(&mut grads.w, dy, x);
        add_col_sums(&mut grads.b, dy);
        matmul_nn(dy, &self.w)
    }

    /// Parameter-only backward (no input gradient).
    pub fn backward_params(&self, x: &Matrix, dy: &Matrix, grads: &mut Dense) {
        add_matmul_tn(&mut grads.w, dy, x);
        add_col_sums(&mut grads.b, dy);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub obs_dim: usize,
    pub cond_dim: usize,
    pub hidden: [usize; 3],
    pub out_dim: usize,
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedMlp {
    pub shape: MlpShape,
    /// Hidden layers followed by the output head.
    pub layers: Vec<Dense>,
    /// Raw gamma generators (gamma = 1 + output); empty in concat mode.
    pub film_gamma: Vec<Dense>,
    pub film_beta: Vec<Dense>,
}

pub const HIDDEN: [usize; 3] = [256, 256, 128];
/// Init scale of FiLM generator weights relative to `1/sqrt(cond_dim)`.
pub const FILM_INIT_GAIN: f64 = 0.1;

impl ConditionedMlp {
    pub fn init(shape: MlpShape, head_gain: f64, rng: &mut impl Rng) -> Self {
        let input = match shape.conditioning {
            Conditioning::Film => shape.obs_dim,
            Conditioning::Concat => shape.obs_dim + shape.cond_dim,
        };
        let mut layers = Vec::with_capacity(4);
        let mut fan_in = input;
        for &d in &shape.hidden {
            layers.push(Dense::init(fan_in, d, 1.0, rng));
            fan_in = d;
        }
        layers.push(Dense::init(fan_in, shape.out_dim, head_gain, rng));
        let (mut film_gamma, mut film_beta) = (Vec::new(), Vec::new());
        if shape.conditioning == Conditioning::Film {
            for &d in &shape.hidden {
                film_gamma.push(Dense::init(shape.cond_dim, d, FILM_INIT_GAIN, rng));
                film_beta.push(Dense::init(shape.cond_dim, d, FILM_INIT_GAIN, rng));
            }
        }
        Self {
            shape,
            layers,
            film_gamma,
            film_beta,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            film_gamma: self.film_gamma.iter().map(Dense::zeros_like).collect(),
            film_beta: self.film_beta.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.layer{i}.w"), &l.w));
            out.push((format!("{prefix}.layer{i}.b"), &l.b));
        }
        for (i, (g, b)) in self.film_gamma.iter().zip(&self.film_beta).enumerate() {
            out.push((format!("{prefix}.film{i}.gamma.w"), &g.w));
            out.push((format!("{prefix}.film{i}.gamma.b"), &g.b));
            out.push((format!("{prefix}.film{i}.beta.w"), &b.w));
            out.push((format!("{prefix}.film{i}.beta.b"), &b.b));
        }
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.layer{i}.w"), &mut l.w));
            out.push((format!("{prefix}.layer{i}.b"), &mut l.b));
        }
        for (i, (g, b)) in self
            .film_gamma
            .iter_mut()
            .zip(self.film_beta.iter_mut())
            .enumerate()
        {
            out.push((format!("{prefix}.film{i}.gamma.w"), &mut g.w));
            out.push((format!("{prefix}.film{i}.gamma.b"), &mut g.b));
            out.push((format!("{prefix}.film{i}.beta.w"), &mut b.w));
            out.push((format!("{prefix}.film{i}.beta.b"), &mut b.b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors("").iter().map(|(_, m)| m.len()).sum()
    }

    fn check_inputs(&self, obs: &Matrix, cond: &Matrix, cond_index: &[usize]) -> Result<()> {
        if obs.cols != self.shape.obs_dim {
            return Err(Error::Shape(format!(
                "observation width {} != {}",
                obs.cols, self.shape.obs_dim
            )));
        }
        if cond.cols != self.shape.cond_dim {
            return Err(Error::Shape(format!(
                "conditioning width {} != {}",
                cond.cols, self.shape.cond_dim
            )));
        }
        if cond_index.len() != obs.rows {
            return Err(Error::Shape(format!(
                "{} conditioning indices for {} rows",
                cond_index.len(),
                obs.rows
            )));
        }
        if let Some(&bad) = cond_index.iter().find(|&&i| i >= cond.rows) {
            return Err(Error::Shape(format!(
                "conditioning index {bad} out of {} rows",
                cond.rows
            )));
        }
        Ok(())
    }

    /// Outputs without recording.
    pub fn forward(&self, obs: &Matrix, cond: &Matrix, cond_index: &[usize]) -> Result<Matrix> {
        Ok(self.forward_impl(obs, cond, cond_index, false)?.0)
    }

    /// Outputs plus the record consumed by [`ConditionedMlp::backward`].
    pub fn forward_recorded(
        &self,
        obs: &Matrix,
        cond: &Matrix,
        cond_index: &[usize],
    ) -> Result<(Matrix, MlpRecord)> {
        let (y, rec) = self.forward_impl(obs, cond, cond_index, true)?;
        Ok((y, rec.expect("recording requested")))
    }

    fn forward_impl(
        &self,
        obs: &Matrix,
        cond: &Matrix,
        cond_index: &[usize],
        record: bool,
    ) -> Result<(Matrix, Option<MlpRecord>)> {
        self.check_inputs(obs, cond, cond_index)?;
        let input = match self.shape.conditioning {
            Conditioning::Film => obs.clone(),
            Conditioning::Concat => {
                let width = obs.cols + cond.cols;
                let mut x = Matrix::zeros(obs.rows, width);
                for (i, &p) in cond_index.iter().enumerate() {
                    let row = x.row_mut(i);
                    row[..obs.cols].copy_from_slice(obs.row(i));
                    row[obs.cols..].copy_from_slice(cond.row(p));
                }
                x
            }
        };
        let n_hidden = self.shape.hidden.len();
        let mut hs = Vec::with_capacity(n_hidden);
        let mut xs = Vec::with_capacity(n_hidden + 1);
        let mut gammas = Vec::new();
        let mut x = input;
        for l in 0..n_hidden {
            let mut h = self.layers[l].forward(&x);
            h.data.iter_mut().for_each(|v| *v = v.tanh());
            let next = if self.shape.conditioning == Conditioning::Film {
                let mut gamma = self.film_gamma[l].forward(cond);
                gamma.data.iter_mut().for_each(|v| *v += 1.0);
                let beta = self.film_beta[l].forward(cond);
                let mut m = h.clone();
                for (i, &p) in cond_index.iter().enumerate() {
                    let (g, b) = (gamma.row(p), beta.row(p));
                    for ((v, gi), bi) in m.row_mut(i).iter_mut().zip(g).zip(b) {
                        *v = *v * gi + bi;
                    }
                }
                if record {
                    gammas.push(gamma);
                }
                m
            } else {
                h.clone()
            };
            if record {
                hs.push(h);
                xs.push(x);
            }
            x = next;
        }
        let out = self.layers[n_hidden].forward(&x);
        let rec = record.then(|| {
            xs.push(x);
            MlpRecord {
                xs,
                hs,
                gammas,
                cond: cond.clone(),
                cond_index: cond_index.to_vec(),
            }
        });
        Ok((out, rec))
    }

    /// Accumulates parameter gradients for `dL/d(out)` and returns
    /// `dL/d(cond)` (`P x cond_dim`).
    pub fn backward(&self, rec: &MlpRecord, d_out: &Matrix, grads: &mut ConditionedMlp) -> Matrix {
        let n_hidden = self.shape.hidden.len();
        let mut d_cond = Matrix::zeros(rec.cond.rows, rec.cond.cols);
        let mut dx = self.layers[n_hidden].backward(&rec.xs[n_hidden], d_out, &mut grads.layers[n_hidden]);
        for l in (0..n_hidden).rev() {
            let h = &rec.hs[l];
            let mut dh = if self.shape.conditioning == Conditioning::Film {
                let gamma = &rec.gammas[l];
                let mut d_gamma = Matrix::zeros(gamma.rows, gamma.cols);
                let mut d_beta = Matrix::zeros(gamma.rows, gamma.cols);
                let mut dh = dx.clone();
                for (i, &p) in rec.cond_index.iter().enumerate() {
                    let dxi = dx.row(i);
                    let hi = h.row(i);
                    for (k, ((dg, db), &d)) in d_gamma
                        .row_mut(p)
                        .iter_mut()
                        .zip(d_beta.row_mut(p).iter_mut())
                        .zip(dxi)
                        .enumerate()
                    {
                        *dg += d * hi[k];
                        *db += d;
                    }
                    for (v, g) in dh.row_mut(i).iter_mut().zip(gamma.row(p)) {
                        *v *= g;
                    }
                }
                d_cond.add_assign(&self.film_gamma[l].backward(&rec.cond, &d_gamma, &mut grads.film_gamma[l]));
                d_cond.add_assign(&self.film_beta[l].backward(&rec.cond, &d_beta, &mut grads.film_beta[l]));
                dh
            } else {
                dx
            };
            for (d, hv) in dh.data.iter_mut().zip(&h.data) {
                *d *= 1.0 - hv * hv;
            }
            if l == 0 && self.shape.conditioning == Conditioning::Film {
                self.layers[0].backward_params(&rec.xs[0], &dh, &mut grads.layers[0]);
                return d_cond;
            }
            dx = self.layers[l].backward(&rec.xs[l], &dh, &mut grads.layers[l]);
        }
        // concat mode: route the conditioning slice of the input gradient
        let obs_dim = self.shape.obs_dim;
        for (i, &p) in rec.cond_index.iter().enumerate() {
            for (dc, v) in d_cond.row_mut(p).iter_mut().zip(&dx.row(i)[obs_dim..]) {
                *dc += v;
            }
        }
        d_cond
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpRecord {
    /// Input to each layer (hidden layers then head).
    xs: Vec<Matrix>,
    /// Post-tanh, pre-modulation hidden activations.
    hs: Vec<Matrix>,
    gammas: Vec<Matrix>,
    cond: Matrix,
    cond_index: Vec<usize>,
}

/// One-shot recorder: `backward` needs a prior `forward` and consumes it.
#[derive(Debug, Default)]
pub struct MlpTape {
    record: Option<MlpRecord>,
}

impl MlpTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(
        &mut self,
        net: &ConditionedMlp,
        obs: &Matrix,
        cond: &Matrix,
        cond_index: &[usize],
    ) -> Result<Matrix> {
        let (y, rec) = net.forward_recorded(obs, cond, cond_index)?;
        self.record = Some(rec);
        Ok(y)
    }

    pub fn backward(
        &mut self,
        net: &ConditionedMlp,
        d_out: &Matrix,
        grads: &mut ConditionedMlp,
    ) -> Result<Matrix> {
        let rec = self
            .record
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        if d_out.rows != rec.cond_index.len() || d_out.cols != net.shape.out_dim {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} does not match output {}x{}",
                d_out.rows,
                d_out.cols,
                rec.cond_index.len(),
                net.shape.out_dim
            )));
        }
        Ok(net.backward(&rec, d_out, grads))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::linalg::softmax;

    fn shape(conditioning: Conditioning) -> MlpShape {
        MlpShape {
            obs_dim: 6,
            cond_dim: 4,
            hidden: [8, 7, 5],
            out_dim: 3,
            conditioning,
        }
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        m.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        m
    }

    fn trunk(net: &ConditionedMlp, obs: &Matrix) -> Matrix {
        let mut x = obs.clone();
        for (l, layer) in net.layers.iter().enumerate() {
            x = layer.forward(&x);
            if l + 1 < net.layers.len() {
                x.data.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        x
    }

    #[test]
    fn identity_film_is_the_plain_trunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = ConditionedMlp::init(shape(Conditioning::Film), 1.0, &mut rng);
        for g in net.film_gamma.iter_mut().chain(net.film_beta.iter_mut()) {
            g.w.fill(0.0);
            g.b.fill(0.0);
        }
        let obs = random(5, 6, &mut rng);
        let cond = random(2, 4, &mut rng);
        let y = net.forward(&obs, &cond, &[0, 1, 0, 1, 1]).unwrap();
        assert_eq!(y, trunk(&net, &obs));

        let zero = Matrix::zeros(1, 6);
        let y0 = net.forward(&zero, &cond, &[0]).unwrap();
        assert_eq!(y0, trunk(&net, &zero));
    }

    #[test]
    fn zero_value_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = shape(Conditioning::Film);
        s.out_dim = 1;
        let net = ConditionedMlp::init(s, 1.0, &mut rng).zeros_like();
        let y = net
            .forward(&random(3, 6, &mut rng), &random(1, 4, &mut rng), &[0, 0, 0])
            .unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for c in [Conditioning::Film, Conditioning::Concat] {
            let net = ConditionedMlp::init(shape(c), 5.0, &mut rng);
            let obs = random(20, 6, &mut rng);
            let cond = random(4, 4, &mut rng);
            let idx: Vec<usize> = (0..20).map(|i| i % 4).collect();
            let y = net.forward(&obs, &cond, &idx).unwrap();
            for i in 0..20 {
                let p = softmax(y.row(i));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn concat_ignores_generators_and_reads_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = ConditionedMlp::init(shape(Conditioning::Concat), 1.0, &mut rng);
        assert!(net.film_gamma.is_empty() && net.film_beta.is_empty());
        assert_eq!(net.layers[0].w.cols, 10);
        let obs = random(1, 6, &mut rng);
        let a = net.forward(&obs, &random(1, 4, &mut rng), &[0]).unwrap();
        let b = net.forward(&obs, &random(1, 4, &mut rng), &[0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = ConditionedMlp::init(shape(Conditioning::Film), 1.0, &mut rng);
        let cond = random(1, 4, &mut rng);
        assert!(matches!(
            net.forward(&random(1, 5, &mut rng), &cond, &[0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            net.forward(&random(1, 6, &mut rng), &random(1, 3, &mut rng), &[0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            net.forward(&random(1, 6, &mut rng), &cond, &[1]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn tape_requires_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = ConditionedMlp::init(shape(Conditioning::Film), 1.0, &mut rng);
        let mut grads = net.zeros_like();
        let mut tape = MlpTape::new();
        let d = Matrix::zeros(1, 3);
        assert!(matches!(tape.backward(&net, &d, &mut grads), Err(Error::State(_))));
        tape.forward(&net, &random(1, 6, &mut rng), &random(1, 4, &mut rng), &[0])
            .unwrap();
        tape.backward(&net, &d, &mut grads).unwrap();
        assert!(matches!(tape.backward(&net, &d, &mut grads), Err(Error::State(_))));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ConditionedMlp::init(shape(Conditioning::Film), 1.0, &mut rng);
        let (_, rec) = net
            .forward_recorded(&random(4, 6, &mut rng), &random(1, 4, &mut rng), &[0; 4])
            .unwrap();
        let mut grads = net.zeros_like();
        let mut d = Matrix::zeros(4, 3);
        for i in 0..4 {
            d.set(i, 0, 1.0);
        }
        net.backward(&rec, &d, &mut grads);
        let head = &grads.layers[3];
        assert!((0..head.w.cols).all(|j| head.w.get(1, j) == 0.0 && head.w.get(2, j) == 0.0));
        assert_eq!(head.b.data[1..], [0.0, 0.0]);
        assert!(head.b.data[0] == 4.0);
    }
}
