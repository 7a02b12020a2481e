//! Linear token classifier over the BIO tags.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bio::{decode, TagSequence, Tagset};
use crate::corpus::{restrict_to_core, PredictionSet, Sample};
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::math::{argmax, mean_cross_entropy};

/// Maps each token embedding to one score per tag: `W u + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqHeadParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl SeqHeadParams {
    pub fn zeros(num_tags: usize, dim: usize) -> Self {
        SeqHeadParams {
            weight: Array2::zeros((num_tags, dim)),
            bias: Array1::zeros(num_tags),
        }
    }

    pub fn random(num_tags: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
        SeqHeadParams {
            weight: Array2::from_shape_simple_fn((num_tags, dim), || normal.sample(rng)),
            bias: Array1::zeros(num_tags),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.weight.nrows()
    }

    /// `rows · Wᵀ + b` for arbitrary input rows.
    pub fn forward(&self, rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::argument(format!(
                "input width {} does not match layer width {}",
                rows.ncols(),
                self.dim()
            )));
        }
        Ok(rows.dot(&self.weight.t()) + &self.bias)
    }

    /// Parameter gradient and input gradient for `d_out` (same shape as the
    /// forward output).
    pub fn backward(
        &self,
        rows: ArrayView2<'_, f64>,
        d_out: ArrayView2<'_, f64>,
    ) -> (LinearGrad, Array2<f64>) {
        let grad = LinearGrad {
            weight: d_out.t().dot(&rows),
            bias: d_out.sum_axis(Axis(0)),
        };
        (grad, d_out.dot(&self.weight))
    }
}

/// Tag scores for the token rows only; the special rows are not classified.
pub fn seq_logits(emb: &EmbeddingMatrix, params: &SeqHeadParams) -> Result<Array2<f64>> {
    params.forward(emb.token_rows())
}

/// Mean per-token cross-entropy and its gradient with respect to the logits.
pub fn seq_loss_grad(
    logits: ArrayView2<'_, f64>,
    gold: &TagSequence,
) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() == 0 {
        return Err(Error::argument(
            "sequence loss is undefined for zero tokens",
        ));
    }
    if gold.len() != logits.nrows() {
        return Err(Error::argument(format!(
            "{} gold tags for {} logit rows",
            gold.len(),
            logits.nrows()
        )));
    }
    if let Some(&bad) = gold.as_slice().iter().find(|&&t| t >= logits.ncols()) {
        return Err(Error::argument(format!("gold tag {bad} out of range")));
    }
    Ok(mean_cross_entropy(logits, gold.as_slice()))
}

/// Full gradient of the sequence loss for one sample: returns the loss, the
/// head gradient and the gradient with respect to every embedding row
/// (special rows receive zeros).
pub fn seq_sample_grad(
    emb: &EmbeddingMatrix,
    params: &SeqHeadParams,
    gold: &TagSequence,
) -> Result<(f64, LinearGrad, Array2<f64>)> {
    let logits = seq_logits(emb, params)?;
    let (loss, d_logits) = seq_loss_grad(logits.view(), gold)?;
    let (grad, d_tokens) = params.backward(emb.token_rows(), d_logits.view());
    Ok((loss, grad, pad_specials(d_tokens)))
}

/// Surrounds token-row gradients with zero rows for the two specials.
pub(crate) fn pad_specials(d_tokens: Array2<f64>) -> Array2<f64> {
    let (n, d) = d_tokens.dim();
    let mut full = Array2::zeros((n + 2, d));
    full.slice_mut(ndarray::s![1..=n, ..]).assign(&d_tokens);
    full
}

/// Per-token argmax tags.
pub fn greedy_tags(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits.rows().into_iter().map(argmax).collect()
}

pub fn seq_predict(
    emb: &EmbeddingMatrix,
    params: &SeqHeadParams,
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
    let logits = seq_logits(emb, params)?;
    let tags = TagSequence::new(greedy_tags(logits.view()), tagset)?;
    Ok(restrict_to_core(&decode(&tags, sample, tagset), sample))
}
