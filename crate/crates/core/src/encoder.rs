//! Contextual token embeddings.
//!
//! Every head consumes an [`EmbeddingMatrix`] of `n + 2` rows: row 0 is the
//! begin special, rows `1..=n` the tokens, row `n + 1` the end special. The
//! matrix comes either from the built-in [`ToyEncoderParams`] (trainable,
//! feature-hashed) or from an [`EmbeddingStore`] loaded from disk.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 6] = b"NFEMB1";

/// Token embeddings with the two boundary specials always present.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

impl EmbeddingMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() < 2 {
            return Err(Error::argument(format!(
                "embedding matrix needs the two special rows, got {} rows",
                rows.nrows()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("embedding matrix has non-finite entries"));
        }
        Ok(EmbeddingMatrix(rows))
    }

    pub fn token_count(&self) -> usize {
        self.0.nrows() - 2
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Rows `1..=n`, one per token.
    pub fn token_rows(&self) -> ArrayView2<'_, f64> {
        self.0.slice(s![1..self.0.nrows() - 1, ..])
    }

    /// Embedding of token `i` (0-based), i.e. matrix row `i + 1`.
    pub fn token(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i + 1)
    }

    pub fn begin_special(&self) -> ArrayView1<'_, f64> {
        self.0.row(0)
    }

    pub fn end_special(&self) -> ArrayView1<'_, f64> {
        self.0.row(self.0.nrows() - 1)
    }
}

/// Stable 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub hash_size: usize,
    pub dim: usize,
    /// Tokens mixed in on each side.
    pub width: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        ToyEncoderConfig {
            hash_size: 1 << 16,
            dim: 64,
            width: 2,
        }
    }
}

/// Feature-hashed token table plus the two special vectors.
///
/// Token row `i` is `tanh` of the distance-weighted mean of the raw vectors
/// in `[i - width, i + width]`, where the raw sequence is
/// `[begin, x(t_1), ..., x(t_n), end]` and position `j` has weight
/// `1 / (1 + |i - j|)`. The special rows see the whole sample:
/// `tanh(special + mean of token rows)`, which makes row 0 usable as a
/// pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams {
    pub config: ToyEncoderConfig,
    pub table: Array2<f64>,
    pub begin: Array1<f64>,
    pub end: Array1<f64>,
}

/// Gradient of a loss with respect to [`ToyEncoderParams`]. Table rows are
/// sparse: only hashed rows the sample touched appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyEncoderGrad {
    pub table_rows: BTreeMap<usize, Array1<f64>>,
    pub begin: Option<Array1<f64>>,
    pub end: Option<Array1<f64>>,
}

impl ToyEncoderGrad {
    pub fn add_assign(&mut self, other: &ToyEncoderGrad) {
        for (&row, g) in &other.table_rows {
            match self.table_rows.get_mut(&row) {
                Some(acc) => *acc += g,
                None => {
                    self.table_rows.insert(row, g.clone());
                }
            }
        }
        add_opt(&mut self.begin, &other.begin);
        add_opt(&mut self.end, &other.end);
    }

    pub fn scale(&mut self, factor: f64) {
        self.table_rows.values_mut().for_each(|g| *g *= factor);
        if let Some(g) = &mut self.begin {
            *g *= factor;
        }
        if let Some(g) = &mut self.end {
            *g *= factor;
        }
    }
}

fn add_opt(acc: &mut Option<Array1<f64>>, other: &Option<Array1<f64>>) {
    if let Some(o) = other {
        match acc {
            Some(a) => *a += o,
            None => *acc = Some(o.clone()),
        }
    }
}

impl ToyEncoderParams {
    pub fn new(config: ToyEncoderConfig, seed: u64) -> Result<Self> {
        if config.dim < 2 {
            return Err(Error::argument("toy encoder dimension must be at least 2"));
        }
        if config.hash_size == 0 {
            return Err(Error::argument("toy encoder hash size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let table = Array2::from_shape_vec(
            (config.hash_size, config.dim),
            draw(config.hash_size * config.dim),
        )
        .expect("shape matches");
        let begin = Array1::from(draw(config.dim));
        let end = Array1::from(draw(config.dim));
        Ok(ToyEncoderParams {
            config,
            table,
            begin,
            end,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn hash(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.config.hash_size as u64) as usize
    }

    fn raw_rows(&self, hashes: &[usize]) -> Vec<ArrayView1<'_, f64>> {
        let mut raw = Vec::with_capacity(hashes.len() + 2);
        raw.push(self.begin.view());
        raw.extend(hashes.iter().map(|&h| self.table.row(h)));
        raw.push(self.end.view());
        raw
    }

    fn window(&self, i: usize, len: usize) -> (usize, usize, f64) {
        let lo = i.saturating_sub(self.config.width);
        let hi = (i + self.config.width).min(len - 1);
        let norm: f64 = (lo..=hi).map(|j| 1.0 / (1.0 + i.abs_diff(j) as f64)).sum();
        (lo, hi, norm)
    }

    /// Encodes pre-split token strings.
    pub fn encode_tokens(&self, tokens: &[&str]) -> EmbeddingMatrix {
        let hashes: Vec<usize> = tokens.iter().map(|t| self.hash(t)).collect();
        self.encode_hashes(&hashes)
    }

    pub fn encode_hashes(&self, hashes: &[usize]) -> EmbeddingMatrix {
        let n = hashes.len();
        let len = n + 2;
        let d = self.config.dim;
        let raw = self.raw_rows(hashes);
        let mut out = Array2::<f64>::zeros((len, d));
        for i in 1..=n {
            let (lo, hi, norm) = self.window(i, len);
            let mut row = out.row_mut(i);
            for (j, x) in raw.iter().enumerate().take(hi + 1).skip(lo) {
                let c = 1.0 / ((1.0 + i.abs_diff(j) as f64) * norm);
                row.scaled_add(c, x);
            }
            row.mapv_inplace(f64::tanh);
        }
        let pooled = if n > 0 {
            out.slice(s![1..=n, ..])
                .mean_axis(Axis(0))
                .expect("non-empty")
        } else {
            Array1::zeros(d)
        };
        out.row_mut(0)
            .assign(&(&self.begin + &pooled).mapv(f64::tanh));
        out.row_mut(len - 1)
            .assign(&(&self.end + &pooled).mapv(f64::tanh));
        EmbeddingMatrix(out)
    }

    /// Back-propagates `d_emb` (same shape as the encoder output) given the
    /// output the forward pass produced for `hashes`.
    pub fn backward(
        &self,
        hashes: &[usize],
        output: &EmbeddingMatrix,
        d_emb: ArrayView2<'_, f64>,
    ) -> ToyEncoderGrad {
        let n = hashes.len();
        let len = n + 2;
        let u = output.rows();
        let dtanh = |row: usize, g: ArrayView1<'_, f64>| -> Array1<f64> {
            let mut out = g.to_owned();
            out.zip_mut_with(&u.row(row), |g, &y| *g *= 1.0 - y * y);
            out
        };

        let g_begin = dtanh(0, d_emb.row(0));
        let g_end = dtanh(len - 1, d_emb.row(len - 1));

        // Raw-row gradients, indexed like the raw sequence.
        let mut d_raw = Array2::<f64>::zeros((len, self.config.dim));
        d_raw.row_mut(0).assign(&g_begin);
        d_raw.row_mut(len - 1).assign(&g_end);
        if n > 0 {
            let pooled_grad = (&g_begin + &g_end) / n as f64;
            for i in 1..=n {
                let total = &d_emb.row(i) + &pooled_grad;
                let gh = dtanh(i, total.view());
                let (lo, hi, norm) = self.window(i, len);
                for j in lo..=hi {
                    let c = 1.0 / ((1.0 + i.abs_diff(j) as f64) * norm);
                    d_raw.row_mut(j).scaled_add(c, &gh);
                }
            }
        }

        let mut grad = ToyEncoderGrad {
            table_rows: BTreeMap::new(),
            begin: Some(d_raw.row(0).to_owned()),
            end: Some(d_raw.row(len - 1).to_owned()),
        };
        for (k, &h) in hashes.iter().enumerate() {
            let g = d_raw.row(k + 1);
            match grad.table_rows.get_mut(&h) {
                Some(acc) => *acc += &g,
                None => {
                    grad.table_rows.insert(h, g.to_owned());
                }
            }
        }
        grad
    }
}

/// Encodes a sample's tokens with the toy encoder.
pub fn encode_toy(sample: &Sample, params: &ToyEncoderParams) -> EmbeddingMatrix {
    params.encode_tokens(&sample.token_texts())
}

/// Pre-computed embeddings keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub matrices: HashMap<String, EmbeddingMatrix>,
}

impl EmbeddingStore {
    pub fn get(&self, id: &str) -> Result<&EmbeddingMatrix> {
        self.matrices
            .get(id)
            .ok_or_else(|| Error::format(format!("embeddings for {id}"), "sample id not present"))
    }

    /// Checks every sample has a matrix with `tokens + 2` rows.
    pub fn validate(&self, samples: &[Sample]) -> Result<()> {
        for s in samples {
            let m = self.get(&s.id)?;
            if m.token_count() != s.token_count() {
                return Err(Error::format(
                    format!("embeddings for {}", s.id),
                    format!(
                        "{} rows, expected {} tokens + 2 specials",
                        m.token_count() + 2,
                        s.token_count()
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn truncated(e: std::io::Error, what: &str) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::format("embedding file", format!("truncated while reading {what}"))
    } else {
        Error::Io(e)
    }
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|e| truncated(e, "magic"))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::format("embedding file", "bad magic"));
    }
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|e| truncated(e, "dimension"))? as usize;
    if dim == 0 {
        return Err(Error::format("embedding file", "dimension is zero"));
    }
    let mut matrices = HashMap::new();
    loop {
        let id_len = match r.read_u32::<LittleEndian>() {
            Ok(v) => v as usize,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)
            .map_err(|e| truncated(e, "sample id"))?;
        let id = String::from_utf8(id)
            .map_err(|_| Error::format("embedding file", "sample id is not UTF-8"))?;
        let rows = r
            .read_u32::<LittleEndian>()
            .map_err(|e| truncated(e, &format!("row count of {id}")))? as usize;
        if rows < 2 {
            return Err(Error::format(
                format!("embeddings for {id}"),
                format!("{rows} rows; the two specials are mandatory"),
            ));
        }
        let mut values = vec![0f32; rows * dim];
        r.read_f32_into::<LittleEndian>(&mut values)
            .map_err(|e| truncated(e, &format!("payload of {id}")))?;
        let m = Array2::from_shape_vec((rows, dim), values.into_iter().map(f64::from).collect())
            .expect("shape matches");
        let m = EmbeddingMatrix::new(m)
            .map_err(|e| Error::format(format!("embeddings for {id}"), e.to_string()))?;
        if matrices.insert(id.clone(), m).is_some() {
            return Err(Error::format(
                format!("embeddings for {id}"),
                "duplicate sample id",
            ));
        }
    }
    Ok(EmbeddingStore { dim, matrices })
}

/// Writes entries in the given order. Values are narrowed to `f32`.
pub fn write_embedding_file<'a>(
    path: impl AsRef<Path>,
    dim: usize,
    entries: impl IntoIterator<Item = (&'a str, &'a EmbeddingMatrix)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    for (id, m) in entries {
        if m.dim() != dim {
            return Err(Error::format(
                format!("embeddings for {id}"),
                format!("width {} differs from declared {dim}", m.dim()),
            ));
        }
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
        w.write_u32::<LittleEndian>(m.rows().nrows() as u32)?;
        for &v in m.rows().iter() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Source of embeddings for a model.
#[derive(Debug, Clone)]
pub enum TokenEncoder {
    Toy(ToyEncoderParams),
    /// Frozen embeddings looked up by key.
    External(Arc<EmbeddingStore>),
}

impl TokenEncoder {
    pub fn dim(&self) -> usize {
        match self {
            TokenEncoder::Toy(p) => p.dim(),
            TokenEncoder::External(s) => s.dim,
        }
    }

    /// Embeds `tokens`; external stores are looked up by `key`.
    pub fn encode(&self, key: &str, tokens: &[&str]) -> Result<EmbeddingMatrix> {
        match self {
            TokenEncoder::Toy(p) => Ok(p.encode_tokens(tokens)),
            TokenEncoder::External(store) => {
                let m = store.get(key)?;
                if m.token_count() != tokens.len() {
                    return Err(Error::format(
                        format!("embeddings for {key}"),
                        format!(
                            "{} token rows, sample has {}",
                            m.token_count(),
                            tokens.len()
                        ),
                    ));
                }
                Ok(m.clone())
            }
        }
    }

    pub fn toy(&self) -> Option<&ToyEncoderParams> {
        match self {
            TokenEncoder::Toy(p) => Some(p),
            TokenEncoder::External(_) => None,
        }
    }

    pub fn toy_mut(&mut self) -> Option<&mut ToyEncoderParams> {
        match self {
            TokenEncoder::Toy(p) => Some(p),
            TokenEncoder::External(_) => None,
        }
    }
}
