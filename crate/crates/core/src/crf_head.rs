//! Linear-chain CRF over BIO tags: forward algorithm for the partition
//! function, forward-backward for gradients, Viterbi for decoding.
//!
//! A path `y` over `n` tokens scores
//! `start[y₁] + Σᵢ emis[i][yᵢ] + Σᵢ trans[yᵢ][yᵢ₊₁] + end[yₙ]`.
//! All recursions run in log space with `f64` accumulation.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::bio::{decode, TagSequence, Tagset};
use crate::corpus::{restrict_to_core, PredictionSet, Sample};
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::seq_head::{pad_specials, seq_logits, LinearGrad, SeqHeadParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub emission: SeqHeadParams,
    /// `transitions[[a, b]]` scores tag `a` followed by tag `b`.
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

impl CrfParams {
    pub fn zeros(num_tags: usize, dim: usize) -> Self {
        CrfParams {
            emission: SeqHeadParams::zeros(num_tags, dim),
            transitions: Array2::zeros((num_tags, num_tags)),
            start: Array1::zeros(num_tags),
            end: Array1::zeros(num_tags),
        }
    }

    pub fn random(num_tags: usize, dim: usize, rng: &mut impl Rng) -> Self {
        CrfParams {
            emission: SeqHeadParams::random(num_tags, dim, rng),
            ..CrfParams::zeros(num_tags, dim)
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    fn check(&self, emissions: ArrayView2<'_, f64>) -> Result<()> {
        if emissions.nrows() == 0 {
            return Err(Error::argument("CRF inference needs at least one token"));
        }
        if emissions.ncols() != self.num_tags() {
            return Err(Error::argument(format!(
                "emissions have {} columns, CRF has {} tags",
                emissions.ncols(),
                self.num_tags()
            )));
        }
        Ok(())
    }
}

/// Score of one tag path.
pub fn path_score(emissions: ArrayView2<'_, f64>, tags: &[usize], params: &CrfParams) -> f64 {
    let n = tags.len();
    let mut score = params.start[tags[0]] + params.end[tags[n - 1]];
    for (i, &y) in tags.iter().enumerate() {
        score += emissions[[i, y]];
        if i + 1 < n {
            score += params.transitions[[y, tags[i + 1]]];
        }
    }
    score
}

/// `alpha[i][y]`: log-sum of all prefixes ending in tag `y` at token `i`.
fn forward(emissions: ArrayView2<'_, f64>, params: &CrfParams) -> Array2<f64> {
    let (n, k) = emissions.dim();
    let mut alpha = Array2::<f64>::zeros((n, k));
    for y in 0..k {
        alpha[[0, y]] = params.start[y] + emissions[[0, y]];
    }
    for i in 1..n {
        for y in 0..k {
            let lse = log_sum_exp((0..k).map(|a| alpha[[i - 1, a]] + params.transitions[[a, y]]));
            alpha[[i, y]] = lse + emissions[[i, y]];
        }
    }
    alpha
}

/// `beta[i][y]`: log-sum of all suffixes after token `i` given tag `y` there.
fn backward(emissions: ArrayView2<'_, f64>, params: &CrfParams) -> Array2<f64> {
    let (n, k) = emissions.dim();
    let mut beta = Array2::<f64>::zeros((n, k));
    for y in 0..k {
        beta[[n - 1, y]] = params.end[y];
    }
    for i in (0..n - 1).rev() {
        for y in 0..k {
            beta[[i, y]] =
                log_sum_exp((0..k).map(|b| {
                    params.transitions[[y, b]] + emissions[[i + 1, b]] + beta[[i + 1, b]]
                }));
        }
    }
    beta
}

fn log_partition_from(alpha: &Array2<f64>, params: &CrfParams) -> f64 {
    let n = alpha.nrows();
    log_sum_exp((0..params.num_tags()).map(|y| alpha[[n - 1, y]] + params.end[y]))
}

/// Log of the sum of `exp(path score)` over every tag path.
pub fn crf_log_partition(emissions: ArrayView2<'_, f64>, params: &CrfParams) -> Result<f64> {
    params.check(emissions)?;
    Ok(log_partition_from(&forward(emissions, params), params))
}

/// Negative log-likelihood of the gold path and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfNllGrad {
    pub loss: f64,
    pub emissions: Array2<f64>,
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

/// `log Z - score(gold)`; each gradient is expected minus observed counts.
pub fn crf_nll_grad(
    emissions: ArrayView2<'_, f64>,
    gold: &TagSequence,
    params: &CrfParams,
) -> Result<CrfNllGrad> {
    params.check(emissions)?;
    let (n, k) = emissions.dim();
    let tags = gold.as_slice();
    if tags.len() != n {
        return Err(Error::argument(format!(
            "{} gold tags for {n} tokens",
            tags.len()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&t| t >= k) {
        return Err(Error::argument(format!("gold tag {bad} out of range")));
    }
    let alpha = forward(emissions, params);
    let beta = backward(emissions, params);
    let log_z = log_partition_from(&alpha, params);
    let loss = (log_z - path_score(emissions, tags, params)).max(0.0);

    let mut d_emis = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for y in 0..k {
            d_emis[[i, y]] = (alpha[[i, y]] + beta[[i, y]] - log_z).exp();
        }
    }
    let mut d_start = d_emis.row(0).to_owned();
    let mut d_end = d_emis.row(n - 1).to_owned();
    let mut d_trans = Array2::<f64>::zeros((k, k));
    for i in 0..n - 1 {
        for a in 0..k {
            for b in 0..k {
                d_trans[[a, b]] += (alpha[[i, a]]
                    + params.transitions[[a, b]]
                    + emissions[[i + 1, b]]
                    + beta[[i + 1, b]]
                    - log_z)
                    .exp();
            }
        }
    }
    for (i, &y) in tags.iter().enumerate() {
        d_emis[[i, y]] -= 1.0;
        if i + 1 < n {
            d_trans[[y, tags[i + 1]]] -= 1.0;
        }
    }
    d_start[tags[0]] -= 1.0;
    d_end[tags[n - 1]] -= 1.0;
    Ok(CrfNllGrad {
        loss,
        emissions: d_emis,
        transitions: d_trans,
        start: d_start,
        end: d_end,
    })
}

/// Highest-scoring tag path. At every max the lowest tag index wins ties.
pub fn crf_viterbi_path(emissions: ArrayView2<'_, f64>, params: &CrfParams) -> Result<Vec<usize>> {
    params.check(emissions)?;
    let (n, k) = emissions.dim();
    let mut score = Array2::<f64>::zeros((n, k));
    let mut back = Array2::<usize>::zeros((n, k));
    for y in 0..k {
        score[[0, y]] = params.start[y] + emissions[[0, y]];
    }
    for i in 1..n {
        for y in 0..k {
            let mut best = 0;
            let mut best_score = score[[i - 1, 0]] + params.transitions[[0, y]];
            for a in 1..k {
                let s = score[[i - 1, a]] + params.transitions[[a, y]];
                if s > best_score {
                    best = a;
                    best_score = s;
                }
            }
            score[[i, y]] = best_score + emissions[[i, y]];
            back[[i, y]] = best;
        }
    }
    let mut last = 0;
    let mut last_score = score[[n - 1, 0]] + params.end[0];
    for y in 1..k {
        let s = score[[n - 1, y]] + params.end[y];
        if s > last_score {
            last = y;
            last_score = s;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[[i, path[i]]];
    }
    Ok(path)
}

pub fn crf_viterbi(
    emissions: ArrayView2<'_, f64>,
    params: &CrfParams,
    tagset: &Tagset,
) -> Result<TagSequence> {
    TagSequence::new(crf_viterbi_path(emissions, params)?, tagset)
}

/// Gradients of the CRF loss for one sample, including the emission layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGrad {
    pub emission: LinearGrad,
    pub transitions: Array2<f64>,
    pub start: Array1<f64>,
    pub end: Array1<f64>,
}

/// Loss, parameter gradients and embedding-row gradients for one sample.
pub fn crf_sample_grad(
    emb: &EmbeddingMatrix,
    params: &CrfParams,
    gold: &TagSequence,
) -> Result<(f64, CrfGrad, Array2<f64>)> {
    let emissions = seq_logits(emb, &params.emission)?;
    let g = crf_nll_grad(emissions.view(), gold, params)?;
    let (emission, d_tokens) = params
        .emission
        .backward(emb.token_rows(), g.emissions.view());
    Ok((
        g.loss,
        CrfGrad {
            emission,
            transitions: g.transitions,
            start: g.start,
            end: g.end,
        },
        pad_specials(d_tokens),
    ))
}

pub fn crf_predict(
    emb: &EmbeddingMatrix,
    params: &CrfParams,
    sample: &Sample,
    tagset: &Tagset,
) -> Result<PredictionSet> {
    if emb.token_count() != sample.token_count() {
        return Err(Error::argument(format!(
            "embedding has {} tokens, sample {} has {}",
            emb.token_count(),
            sample.id,
            sample.token_count()
        )));
    }
    if sample.token_count() == 0 {
        return Ok(PredictionSet::new());
    }
    let emissions = seq_logits(emb, &params.emission)?;
    let tags = crf_viterbi(emissions.view(), params, tagset)?;
    Ok(restrict_to_core(&decode(&tags, sample, tagset), sample))
}
