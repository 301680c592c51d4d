//! Persona embeddings: a synthetic stand-in for a frozen text encoder, file
//! import for real vectors, and the trainable rank-16 projection
//! `e = norm(alpha * B * A * raw)` with `alpha = 1/sqrt(64)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_matmul_tn, matmul_nn, matmul_nt, norm, normalize_backward, Matrix};
use crate::persona::{PersonaRecord, OCCUPATIONS};
use crate::seeding::{rng_for, tag};

pub const RAW_DIM: usize = 1024;
pub const PROJ_RANK: usize = 16;
pub const PROJ_DIM: usize = 64;
/// `64^{-1/2}`.
pub const PROJ_ALPHA: f64 = 0.125;
const DEGENERATE_NORM: f64 = 1e-12;

/// Unit-norm raw persona embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbedding(Vec<f64>);

impl RawEmbedding {
    /// Normalizes `values`; fails on a (near-)zero vector.
    pub fn normalized(persona_id: u32, mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "persona {persona_id}: non-finite embedding value"
            )));
        }
        let n = norm(&values);
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding { persona_id, norm: n });
        }
        values.iter_mut().for_each(|v| *v /= n);
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEmbedderConfig {
    pub dim: usize,
    pub occupation_bias: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticEmbedderConfig {
    fn default() -> Self {
        Self {
            dim: RAW_DIM,
            occupation_bias: 0.7,
            noise_scale: 0.1,
            seed: 0,
        }
    }
}

/// Deterministic text-encoder surrogate:
/// `normalize((1-b) W_bf bf + b W_occ onehot(occ) + s g(seed, id))`.
#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    config: SyntheticEmbedderConfig,
    /// `dim x 5`, unit columns.
    w_bf: Matrix,
    /// `dim x |occupations|`, unit columns.
    w_occ: Matrix,
}

fn unit_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for j in 0..cols {
        let n = (0..rows).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
        for i in 0..rows {
            let v = m.get(i, j) / n;
            m.set(i, j, v);
        }
    }
    m
}

impl SyntheticEmbedder {
    pub fn new(config: SyntheticEmbedderConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.occupation_bias) {
            return Err(Error::Parameter(format!(
                "occupation_bias must lie in [0,1], got {}",
                config.occupation_bias
            )));
        }
        if !(config.noise_scale >= 0.0) || config.dim == 0 {
            return Err(Error::Parameter(
                "noise_scale must be >= 0 and dim > 0".into(),
            ));
        }
        let w_bf = unit_columns(config.dim, 5, &mut rng_for(config.seed, &[tag::EMBED_BF]));
        let w_occ = unit_columns(
            config.dim,
            OCCUPATIONS.len(),
            &mut rng_for(config.seed, &[tag::EMBED_OCC]),
        );
        Ok(Self {
            config,
            w_bf,
            w_occ,
        })
    }

    pub fn config(&self) -> &SyntheticEmbedderConfig {
        &self.config
    }

    pub fn embed(&self, persona: &PersonaRecord) -> Result<RawEmbedding> {
        let SyntheticEmbedderConfig {
            dim,
            occupation_bias: b,
            noise_scale,
            seed,
        } = self.config;
        let occ = persona.occupation_id as usize;
        if occ >= self.w_occ.cols {
            return Err(Error::Parameter(format!("occupation id {occ} out of range")));
        }
        let bf = persona.big_five.to_array();
        let mut v = vec![0.0; dim];
        for (i, vi) in v.iter_mut().enumerate() {
            let trait_part: f64 = (0..5).map(|k| self.w_bf.get(i, k) * bf[k]).sum();
            *vi = (1.0 - b) * trait_part + b * self.w_occ.get(i, occ);
        }
        if noise_scale > 0.0 {
            let mut rng = rng_for(seed, &[tag::EMBED_NOISE, persona.persona_id as u64]);
            let scale = noise_scale / (dim as f64).sqrt();
            for vi in v.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *vi += scale * g;
            }
        }
        RawEmbedding::normalized(persona.persona_id, v)
    }
}

/// One-shot convenience over [`SyntheticEmbedder`].
pub fn synthetic_embed(
    persona: &PersonaRecord,
    occupation_bias: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<RawEmbedding> {
    SyntheticEmbedder::new(SyntheticEmbedderConfig {
        dim: RAW_DIM,
        occupation_bias,
        noise_scale,
        seed,
    })?
    .embed(persona)
}

/// Raw embeddings for a whole corpus; row `i` belongs to persona id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub raw: Matrix,
}

impl EmbeddingTable {
    pub fn synthetic(corpus: &[PersonaRecord], config: SyntheticEmbedderConfig) -> Result<Self> {
        let embedder = SyntheticEmbedder::new(config)?;
        let mut map = BTreeMap::new();
        for p in corpus {
            map.insert(p.persona_id, embedder.embed(p)?);
        }
        Self::from_map(corpus, &map)
    }

    pub fn from_map(corpus: &[PersonaRecord], map: &BTreeMap<u32, RawEmbedding>) -> Result<Self> {
        let dim = map
            .values()
            .next()
            .map(RawEmbedding::dim)
            .ok_or_else(|| Error::Format("empty embedding map".into()))?;
        let mut raw = Matrix::zeros(corpus.len(), dim);
        for p in corpus {
            let id = p.persona_id as usize;
            if id >= corpus.len() {
                return Err(Error::Format(format!(
                    "persona ids must be contiguous from 0; found {id}"
                )));
            }
            let e = map
                .get(&p.persona_id)
                .ok_or_else(|| Error::Format(format!("missing embedding for persona {id}")))?;
            if e.dim() != dim {
                return Err(Error::Format(format!("persona {id}: mixed dimensions")));
            }
            raw.row_mut(id).copy_from_slice(e.values());
        }
        Ok(Self { raw })
    }

    pub fn dim(&self) -> usize {
        self.raw.cols
    }

    pub fn len(&self) -> usize {
        self.raw.rows
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows == 0
    }

    pub fn rows(&self, ids: &[u32]) -> Matrix {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.raw.select_rows(&idx)
    }
}

/// Writes the binary embedding format:
///
/// ```text
/// u32 LE count | u32 LE dim | count x ( u32 LE persona_id | dim x f32 LE )
/// ```
pub fn write_embeddings_binary(path: &Path, map: &BTreeMap<u32, RawEmbedding>) -> Result<()> {
    let dim = map.values().next().map_or(0, RawEmbedding::dim);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&(map.len() as u32).to_le_bytes())?;
    put(&(dim as u32).to_le_bytes())?;
    for (id, e) in map {
        put(&id.to_le_bytes())?;
        for v in e.values() {
            put(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    persona_id: u32,
    values: Vec<f64>,
}

/// Text variant: one `{"persona_id": u32, "values": [f64; dim]}` object per line.
pub fn write_embeddings_text(path: &Path, map: &BTreeMap<u32, RawEmbedding>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, e) in map {
        let line = serde_json::to_string(&EmbeddingLine {
            persona_id: *id,
            values: e.values().to_vec(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_raw_rows(path: &Path) -> Result<Vec<(u32, Vec<f64>)>> {
    let is_text = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json") | Some("txt")
    );
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if is_text {
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: EmbeddingLine = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            rows.push((l.persona_id, l.values));
        }
        return Ok(rows);
    }
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let word = |off: usize| -> Result<[u8; 4]> {
        bytes
            .get(off..off + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| Error::Format(format!("{}: truncated at byte {off}", path.display())))
    };
    let count = u32::from_le_bytes(word(0)?) as usize;
    let dim = u32::from_le_bytes(word(4)?) as usize;
    let expected = 8 + count * (4 + 4 * dim);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(count);
    let mut off = 8;
    for _ in 0..count {
        let id = u32::from_le_bytes(word(off)?);
        off += 4;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(f32::from_le_bytes(word(off)?) as f64);
            off += 4;
        }
        rows.push((id, values));
    }
    Ok(rows)
}

/// Loads and re-normalizes embeddings, requiring every id in `required` and
/// exactly `expected_dim` values per row.
pub fn load_embeddings(
    path: &Path,
    expected_dim: usize,
    required: &[u32],
) -> Result<BTreeMap<u32, RawEmbedding>> {
    let mut out = BTreeMap::new();
    for (id, values) in read_raw_rows(path)? {
        if values.len() != expected_dim {
            return Err(Error::Format(format!(
                "persona {id}: dimension {} (expected {expected_dim})",
                values.len()
            )));
        }
        out.insert(id, RawEmbedding::normalized(id, values)?);
    }
    if let Some(missing) = required.iter().find(|id| !out.contains_key(id)) {
        return Err(Error::Format(format!(
            "{}: missing embedding for persona {missing}",
            path.display()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// `rank x raw_dim`.
    pub a: Matrix,
    /// `out_dim x rank`.
    pub b: Matrix,
}

impl ProjectionParams {
    /// Rank-16, 64-d output.
    pub fn init(raw_dim: usize, seed: u64) -> Self {
        Self::init_with(raw_dim, PROJ_RANK, PROJ_DIM, seed)
    }

    /// `A ~ N(0, 1/raw_dim)`, `B ~ N(0, 1/rank)`.
    pub fn init_with(raw_dim: usize, rank: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::PROJECTION]);
        let mut a = Matrix::zeros(rank, raw_dim);
        let na = Normal::new(0.0, (1.0 / raw_dim as f64).sqrt()).unwrap();
        a.data.iter_mut().for_each(|v| *v = na.sample(&mut rng));
        let mut b = Matrix::zeros(out_dim, rank);
        let nb = Normal::new(0.0, (1.0 / rank as f64).sqrt()).unwrap();
        b.data.iter_mut().for_each(|v| *v = nb.sample(&mut rng));
        Self { a, b }
    }

    pub fn raw_dim(&self) -> usize {
        self.a.cols
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: self.a.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("projection.a", &self.a), ("projection.b", &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![("projection.a", &mut self.a), ("projection.b", &mut self.b)]
    }

    /// Projects one raw embedding.
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, raw.len(), raw.to_vec())?;
        Ok(self.project_batch(&m)?.0.data)
    }

    /// Projects every row of `raw` (`P x raw_dim`), returning unit rows and
    /// the record needed for the backward pass.
    pub fn project_batch(&self, raw: &Matrix) -> Result<(Matrix, ProjectionRecord)> {
        if raw.cols != self.a.cols {
            return Err(Error::Shape(format!(
                "raw embedding dim {} != projection input {}",
                raw.cols, self.a.cols
            )));
        }
        let low = matmul_nt(raw, &self.a);
        let mut out = matmul_nt(&low, &self.b);
        out.scale(PROJ_ALPHA);
        let mut norms = Vec::with_capacity(out.rows);
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let n = norm(row);
            if !(n >= DEGENERATE_NORM) {
                return Err(Error::DegenerateProjection(n));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok((
            out.clone(),
            ProjectionRecord {
                raw: raw.clone(),
                low,
                out,
                norms,
            },
        ))
    }

    /// Accumulates `dL/dA`, `dL/dB` given `dL/d(out)`.
    pub fn backward(&self, rec: &ProjectionRecord, d_out: &Matrix, grads: &mut ProjectionParams) {
        let mut d_pre = Matrix::zeros(d_out.rows, d_out.cols);
        for i in 0..d_out.rows {
            let g = normalize_backward(rec.out.row(i), rec.norms[i], d_out.row(i));
            d_pre.row_mut(i).copy_from_slice(&g);
        }
        d_pre.scale(PROJ_ALPHA);
        add_matmul_tn(&mut grads.b, &d_pre, &rec.low);
        let d_low = matmul_nn(&d_pre, &self.b);
        add_matmul_tn(&mut grads.a, &d_low, &rec.raw);
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionRecord {
    raw: Matrix,
    low: Matrix,
    out: Matrix,
    norms: Vec<f64>,
}

pub fn init_projection(seed: u64) -> ProjectionParams {
    ProjectionParams::init(RAW_DIM, seed)
}

pub fn project(raw: &RawEmbedding, params: &ProjectionParams) -> Result<Vec<f64>> {
    params.project(raw.values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ontology::{ActionOntology, OntologyVersion};
    use crate::linalg::{cosine, dot, euclidean};
    use crate::persona::generate_corpus;

    fn corpus() -> Vec<PersonaRecord> {
        generate_corpus(15, 20, 0, &ActionOntology::new(OntologyVersion::V1)).unwrap()
    }

    #[test]
    fn occupation_bias_orders_similarities() {
        let c = corpus();
        let e = |p: &PersonaRecord| synthetic_embed(p, 0.9, 0.05, 1).unwrap();
        // same occupation (5), different archetypes (0, 1)
        let same_occ = cosine(e(&c[5]).values(), e(&c[20 + 5]).values());
        // same archetype (0), different occupations
        let same_arch = cosine(e(&c[5]).values(), e(&c[6]).values());
        assert!(same_occ > same_arch, "{same_occ} vs {same_arch}");
    }

    #[test]
    fn noiseless_synthetic_is_deterministic_and_pure_archetype_at_zero_bias() {
        let c = corpus();
        let a = synthetic_embed(&c[3], 0.4, 0.0, 9).unwrap();
        assert_eq!(a, synthetic_embed(&c[3], 0.4, 0.0, 9).unwrap());
        let x = synthetic_embed(&c[40], 0.0, 0.0, 9).unwrap();
        let y = synthetic_embed(&c[47], 0.0, 0.0, 9).unwrap();
        assert!((cosine(x.values(), y.values()) - 1.0).abs() < 1e-12);
        assert!((norm(x.values()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_dense_oracle() {
        let p = ProjectionParams::init(RAW_DIM, 4);
        let raw = synthetic_embed(&corpus()[17], 0.7, 0.1, 2).unwrap();
        let got = p.project(raw.values()).unwrap();
        let mut low = [0.0; PROJ_RANK];
        for (r, l) in low.iter_mut().enumerate() {
            *l = (0..RAW_DIM).map(|k| p.a.get(r, k) * raw.values()[k]).sum();
        }
        let mut out = [0.0; PROJ_DIM];
        for (o, v) in out.iter_mut().enumerate() {
            *v = PROJ_ALPHA * (0..PROJ_RANK).map(|r| p.b.get(o, r) * low[r]).sum::<f64>();
        }
        let n = norm(&out);
        for (g, o) in got.iter().zip(out) {
            assert!((g - o / n).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_of_truncating_map_is_normalized_truncation() {
        // B A = [I_16 | 0] routed through rank 16, padded: out = first 16 coords.
        let mut p = ProjectionParams {
            a: Matrix::zeros(PROJ_RANK, 32),
            b: Matrix::zeros(PROJ_DIM, PROJ_RANK),
        };
        for i in 0..PROJ_RANK {
            p.a.set(i, i, 1.0);
            p.b.set(i, i, 1.0);
        }
        let raw: Vec<f64> = (0..32).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let got = p.project(&raw).unwrap();
        let n = norm(&raw[..16]);
        for i in 0..PROJ_DIM {
            let expect = if i < 16 { raw[i] / n } else { 0.0 };
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_b_is_degenerate() {
        let mut p = init_projection(0);
        p.b.fill(0.0);
        let raw = synthetic_embed(&corpus()[0], 0.5, 0.0, 0).unwrap();
        assert!(matches!(project(&raw, &p), Err(Error::DegenerateProjection(_))));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_projection(3), init_projection(3));
        assert_ne!(init_projection(3), init_projection(4));
        let raw = synthetic_embed(&corpus()[9], 0.5, 0.1, 0).unwrap();
        let e = project(&raw, &init_projection(3)).unwrap();
        assert!((norm(&e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_is_monotone_in_cosine_on_outputs() {
        let p = init_projection(1);
        let c = corpus();
        let emb: Vec<Vec<f64>> = c
            .iter()
            .take(12)
            .map(|x| project(&synthetic_embed(x, 0.7, 0.1, 0).unwrap(), &p).unwrap())
            .collect();
        for u in &emb {
            for v in &emb {
                let d = euclidean(u, v);
                assert!((d * d - (2.0 - 2.0 * dot(u, v))).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn embedding_files_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        let table: BTreeMap<u32, RawEmbedding> = c
            .iter()
            .map(|p| (p.persona_id, synthetic_embed(p, 0.7, 0.1, 0).unwrap()))
            .collect();
        let ids: Vec<u32> = c.iter().map(|p| p.persona_id).collect();

        let bin = dir.path().join("emb.bin");
        write_embeddings_binary(&bin, &table).unwrap();
        let bytes = std::fs::read(&bin).unwrap();
        assert_eq!(bytes.len(), 8 + 300 * (4 + 4 * RAW_DIM));
        assert_eq!(&bytes[0..8], &[44, 1, 0, 0, 0, 4, 0, 0]);
        let loaded = load_embeddings(&bin, RAW_DIM, &ids).unwrap();
        assert_eq!(loaded.len(), 300);
        for (id, e) in &loaded {
            assert!((norm(e.values()) - 1.0).abs() < 1e-6);
            assert!(cosine(e.values(), table[id].values()) > 1.0 - 1e-9);
        }

        let txt = dir.path().join("emb.jsonl");
        write_embeddings_text(&txt, &table).unwrap();
        let loaded = load_embeddings(&txt, RAW_DIM, &ids).unwrap();
        for (a, b) in loaded[&7].values().iter().zip(table[&7].values()) {
            assert!((a - b).abs() < 1e-15);
        }

        assert!(matches!(
            load_embeddings(&txt, 384, &ids),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            load_embeddings(&txt, RAW_DIM, &[1000]),
            Err(Error::Format(_))
        ));

        let zero = dir.path().join("zero.jsonl");
        std::fs::write(
            &zero,
            serde_json::to_string(&EmbeddingLine {
                persona_id: 0,
                values: vec![0.0; RAW_DIM],
            })
            .unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_embeddings(&zero, RAW_DIM, &[0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }
}
