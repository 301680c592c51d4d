//! Two-layer GRU trajectory encoder with backpropagation through time.
//!
//! Gate order in the packed matrices is (update z, reset r, candidate n):
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + b_n + r * (U_n h))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! The input at each step is the one-hot of the action taken, optionally
//! concatenated with the observation. The embedding is the final top-layer
//! hidden state, L2-normalized.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    add_col_sums, add_matmul_tn, add_row_bias, matmul_nn, matmul_nt, norm, normalize_backward,
    Matrix,
};

pub const ENCODER_HIDDEN: usize = 64;
pub const ENCODER_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    /// `3H x in`.
    pub w_x: Matrix,
    /// `3H x H`.
    pub w_h: Matrix,
    /// `1 x 3H`.
    pub b: Matrix,
}

/// Orthonormal rows via modified Gram-Schmidt on a Gaussian matrix.
fn orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    m.data
        .iter_mut()
        .for_each(|v| *v = StandardNormal.sample(rng));
    for i in 0..n {
        for j in 0..i {
            let d: f64 = (0..n).map(|k| m.get(i, k) * m.get(j, k)).sum();
            for k in 0..n {
                let v = m.get(i, k) - d * m.get(j, k);
                m.set(i, k, v);
            }
        }
        let nrm = norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|v| *v /= nrm);
    }
    m
}

impl GruLayer {
    /// Input weights `N(0, 1/in)`, recurrent blocks orthogonal, biases zero.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let mut w_x = Matrix::zeros(3 * hidden, input);
        w_x.data.iter_mut().for_each(|v| {
            let g: f64 = StandardNormal.sample(rng);
            *v = g * scale
        });
        let mut w_h = Matrix::zeros(3 * hidden, hidden);
        for gate in 0..3 {
            let q = orthogonal(hidden, rng);
            for i in 0..hidden {
                w_h.row_mut(gate * hidden + i).copy_from_slice(q.row(i));
            }
        }
        Self {
            w_x,
            w_h,
            b: Matrix::zeros(1, 3 * hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.w_h.cols
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_x: self.w_x.zeros_like(),
            w_h: self.w_h.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    /// Runs the layer over a time-major stack of inputs (`T*B x in`, row
    /// `t*B + b`). Returns the stacked hidden states `T*B x H`.
    fn forward(&self, xs: &Matrix, t_len: usize, batch: usize) -> (Matrix, GruLayerRecord) {
        let h_dim = self.hidden();
        let mut gx = matmul_nt(xs, &self.w_x);
        add_row_bias(&mut gx, &self.b);
        let mut hs = Matrix::zeros(t_len * batch, h_dim);
        let mut h_prev_all = Matrix::zeros(t_len * batch, h_dim);
        let mut gates = Matrix::zeros(t_len * batch, 3 * h_dim);
        let mut uhn_all = Matrix::zeros(t_len * batch, h_dim);
        let mut h = Matrix::zeros(batch, h_dim);
        for t in 0..t_len {
            let gh = matmul_nt(&h, &self.w_h);
            for bi in 0..batch {
                let row = t * batch + bi;
                let gxr = gx.row(row);
                let ghr = gh.row(bi);
                let hp = h.row(bi);
                let g = gates.row_mut(row);
                let out = hs.row_mut(row);
                for k in 0..h_dim {
                    let z = sigmoid(gxr[k] + ghr[k]);
                    let r = sigmoid(gxr[h_dim + k] + ghr[h_dim + k]);
                    let n = (gxr[2 * h_dim + k] + r * ghr[2 * h_dim + k]).tanh();
                    out[k] = (1.0 - z) * n + z * hp[k];
                    g[k] = z;
                    g[h_dim + k] = r;
                    g[2 * h_dim + k] = n;
                }
                uhn_all
                    .row_mut(row)
                    .copy_from_slice(&ghr[2 * h_dim..3 * h_dim]);
                h_prev_all.row_mut(row).copy_from_slice(hp);
            }
            h.data
                .copy_from_slice(&hs.data[t * batch * h_dim..(t + 1) * batch * h_dim]);
        }
        (
            hs,
            GruLayerRecord {
                xs: xs.clone(),
                h_prev: h_prev_all,
                gates,
                uhn: uhn_all,
            },
        )
    }

    /// BPTT given upstream gradients on every stacked hidden state. Returns
    /// the gradient on the stacked inputs.
    fn backward(
        &self,
        rec: &GruLayerRecord,
        d_hs: &Matrix,
        t_len: usize,
        batch: usize,
        grads: &mut GruLayer,
    ) -> Matrix {
        let h_dim = self.hidden();
        let mut d_gx = Matrix::zeros(t_len * batch, 3 * h_dim);
        let mut d_gh = Matrix::zeros(t_len * batch, 3 * h_dim);
        let mut dh_next = Matrix::zeros(batch, h_dim);
        let mut dgh_t = Matrix::zeros(batch, 3 * h_dim);
        for t in (0..t_len).rev() {
            let mut dh_prev = Matrix::zeros(batch, h_dim);
            for bi in 0..batch {
                let row = t * batch + bi;
                let g = rec.gates.row(row);
                let hp = rec.h_prev.row(row);
                let uhn = rec.uhn.row(row);
                let up = d_hs.row(row);
                let carry = dh_next.row(bi);
                let dgx_r = d_gx.row_mut(row);
                let dgh_r = dgh_t.row_mut(bi);
                let dhp = dh_prev.row_mut(bi);
                for k in 0..h_dim {
                    let (z, r, n) = (g[k], g[h_dim + k], g[2 * h_dim + k]);
                    let dh = up[k] + carry[k];
                    let dn_pre = dh * (1.0 - z) * (1.0 - n * n);
                    let dz_pre = dh * (hp[k] - n) * z * (1.0 - z);
                    let dr_pre = dn_pre * uhn[k] * r * (1.0 - r);
                    dhp[k] = dh * z;
                    dgx_r[k] = dz_pre;
                    dgx_r[h_dim + k] = dr_pre;
                    dgx_r[2 * h_dim + k] = dn_pre;
                    dgh_r[k] = dz_pre;
                    dgh_r[h_dim + k] = dr_pre;
                    dgh_r[2 * h_dim + k] = dn_pre * r;
                }
            }
            d_gh.data[t * batch * 3 * h_dim..(t + 1) * batch * 3 * h_dim]
                .copy_from_slice(&dgh_t.data);
            dh_prev.add_assign(&matmul_nn(&dgh_t, &self.w_h));
            dh_next = dh_prev;
        }
        add_matmul_tn(&mut grads.w_x, &d_gx, &rec.xs);
        add_col_sums(&mut grads.b, &d_gx);
        add_matmul_tn(&mut grads.w_h, &d_gh, &rec.h_prev);
        matmul_nn(&d_gx, &self.w_x)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
struct GruLayerRecord {
    xs: Matrix,
    h_prev: Matrix,
    gates: Matrix,
    uhn: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruEncoder {
    pub n_actions: usize,
    /// Observation width appended to each one-hot; 0 when disabled.
    pub obs_concat: usize,
    pub layers: Vec<GruLayer>,
}

/// One sequence to encode: action ids plus, in obs-concat mode, the
/// observation preceding each action.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    pub actions: &'a [usize],
    pub observations: Option<&'a [Vec<f64>]>,
}

impl<'a> EncoderInput<'a> {
    pub fn actions(actions: &'a [usize]) -> Self {
        Self {
            actions,
            observations: None,
        }
    }
}

impl GruEncoder {
    pub fn init(n_actions: usize, obs_concat: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(ENCODER_LAYERS);
        let mut input = n_actions + obs_concat;
        for _ in 0..ENCODER_LAYERS {
            layers.push(GruLayer::init(input, hidden, rng));
            input = hidden;
        }
        Self {
            n_actions,
            obs_concat,
            layers,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            n_actions: self.n_actions,
            obs_concat: self.obs_concat,
            layers: self.layers.iter().map(GruLayer::zeros_like).collect(),
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.gru{i}.w_x"), &l.w_x));
            out.push((format!("{prefix}.gru{i}.w_h"), &l.w_h));
            out.push((format!("{prefix}.gru{i}.b"), &l.b));
        }
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.gru{i}.w_x"), &mut l.w_x));
            out.push((format!("{prefix}.gru{i}.w_h"), &mut l.w_h));
            out.push((format!("{prefix}.gru{i}.b"), &mut l.b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors("").iter().map(|(_, m)| m.len()).sum()
    }

    fn stack_inputs(&self, seqs: &[EncoderInput<'_>], t_len: usize) -> Result<Matrix> {
        let batch = seqs.len();
        let width = self.n_actions + self.obs_concat;
        let mut xs = Matrix::zeros(t_len * batch, width);
        for (bi, s) in seqs.iter().enumerate() {
            if self.obs_concat > 0 && s.observations.map_or(true, |o| o.len() != t_len) {
                return Err(Error::Shape(
                    "obs-concat encoder needs one observation per action".into(),
                ));
            }
            for (t, &a) in s.actions.iter().enumerate() {
                if a >= self.n_actions {
                    return Err(Error::Parameter(format!(
                        "action id {a} outside encoder vocabulary {}",
                        self.n_actions
                    )));
                }
                let row = xs.row_mut(t * batch + bi);
                row[a] = 1.0;
                if let Some(obs) = s.observations.filter(|_| self.obs_concat > 0) {
                    if obs[t].len() != self.obs_concat {
                        return Err(Error::Shape("observation width mismatch".into()));
                    }
                    row[self.n_actions..].copy_from_slice(&obs[t]);
                }
            }
        }
        Ok(xs)
    }

    fn forward_equal(&self, seqs: &[EncoderInput<'_>]) -> Result<(Matrix, EncoderRecord)> {
        let batch = seqs.len();
        let t_len = seqs[0].actions.len();
        let mut x = self.stack_inputs(seqs, t_len)?;
        let mut layer_recs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (hs, rec) = layer.forward(&x, t_len, batch);
            layer_recs.push(rec);
            x = hs;
        }
        let h_dim = self.hidden();
        let mut out = Matrix::zeros(batch, h_dim);
        let mut norms = Vec::with_capacity(batch);
        for bi in 0..batch {
            let last = x.row((t_len - 1) * batch + bi);
            let n = norm(last);
            if !(n > 0.0) {
                return Err(Error::Numerical("encoder produced a zero state".into()));
            }
            for (o, v) in out.row_mut(bi).iter_mut().zip(last) {
                *o = v / n;
            }
            norms.push(n);
        }
        Ok((
            out.clone(),
            EncoderRecord {
                t_len,
                batch,
                layers: layer_recs,
                out,
                norms,
            },
        ))
    }

    /// Encodes a batch of sequences, grouping by length. Output rows follow
    /// input order.
    pub fn encode_batch(&self, seqs: &[EncoderInput<'_>]) -> Result<Matrix> {
        Ok(self.encode_batch_recorded(seqs)?.0)
    }

    pub fn encode_batch_recorded(
        &self,
        seqs: &[EncoderInput<'_>],
    ) -> Result<(Matrix, EncoderBatchRecord)> {
        if seqs.is_empty() {
            return Err(Error::Parameter("no sequences to encode".into()));
        }
        if seqs.iter().any(|s| s.actions.is_empty()) {
            return Err(Error::Parameter("cannot encode an empty trajectory".into()));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            groups.entry(s.actions.len()).or_default().push(i);
        }
        let mut out = Matrix::zeros(seqs.len(), self.hidden());
        let mut recs = Vec::with_capacity(groups.len());
        for idx in groups.into_values() {
            let group: Vec<EncoderInput<'_>> = idx.iter().map(|&i| seqs[i]).collect();
            let (emb, rec) = self.forward_equal(&group)?;
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(emb.row(k));
            }
            recs.push((idx, rec));
        }
        Ok((out, EncoderBatchRecord { groups: recs }))
    }

    pub fn encode(&self, actions: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .encode_batch(&[EncoderInput::actions(actions)])?
            .data)
    }

    /// Accumulates gradients given `dL/d(embedding)` rows aligned with the
    /// encoded batch.
    pub fn backward(&self, rec: &EncoderBatchRecord, d_out: &Matrix, grads: &mut GruEncoder) {
        let h_dim = self.hidden();
        for (idx, r) in &rec.groups {
            let mut d_top = Matrix::zeros(r.t_len * r.batch, h_dim);
            for (k, &i) in idx.iter().enumerate() {
                let g = normalize_backward(r.out.row(k), r.norms[k], d_out.row(i));
                d_top
                    .row_mut((r.t_len - 1) * r.batch + k)
                    .copy_from_slice(&g);
            }
            let mut d = d_top;
            for (l, layer) in self.layers.iter().enumerate().rev() {
                d = layer.backward(&r.layers[l], &d, r.t_len, r.batch, &mut grads.layers[l]);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderRecord {
    t_len: usize,
    batch: usize,
    layers: Vec<GruLayerRecord>,
    out: Matrix,
    norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderBatchRecord {
    groups: Vec<(Vec<usize>, EncoderRecord)>,
}

impl EncoderBatchRecord {
    pub fn batch(&self) -> usize {
        self.groups.iter().map(|(i, _)| i.len()).sum()
    }
}

/// One-shot recorder for the encoder.
#[derive(Debug, Default)]
pub struct EncoderTape {
    record: Option<EncoderBatchRecord>,
}

impl EncoderTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, enc: &GruEncoder, seqs: &[EncoderInput<'_>]) -> Result<Matrix> {
        let (out, rec) = enc.encode_batch_recorded(seqs)?;
        self.record = Some(rec);
        Ok(out)
    }

    pub fn backward(&mut self, enc: &GruEncoder, d_out: &Matrix, grads: &mut GruEncoder) -> Result<()> {
        let rec = self
            .record
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        if d_out.rows != rec.batch() || d_out.cols != enc.hidden() {
            return Err(Error::Shape("upstream gradient shape mismatch".into()));
        }
        enc.backward(&rec, d_out, grads);
        Ok(())
    }
}
