//! Span classifier: every candidate `(b, e)` token span is represented by the
//! concatenation of its two boundary token embeddings and labelled with an
//! entity type or [`NEG_SPAN`].

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bio::Tagset;
use crate::corpus::{restrict_to_core, PredictionSet, Sample};
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::math::{argmax, mean_cross_entropy};
use crate::seq_head::LinearGrad;

/// Label for "no entity here".
pub const NEG_SPAN: &str = "Neg_Span";

pub const DEFAULT_MAX_SPAN_LEN: usize = 32;

/// Inclusive token range `b..=e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpanCandidate {
    pub b: usize,
    pub e: usize,
}

impl SpanCandidate {
    pub fn len(&self) -> usize {
        self.e - self.b + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// All spans with `b ≤ e < n` and at most `max_span_len` tokens, in
/// lexicographic order.
pub fn enumerate_spans(n: usize, max_span_len: usize) -> Vec<SpanCandidate> {
    let mut spans = Vec::new();
    for b in 0..n {
        for e in b..n.min(b + max_span_len) {
            spans.push(SpanCandidate { b, e });
        }
    }
    spans
}

/// Number of spans [`enumerate_spans`] returns.
pub fn span_count(n: usize, max_span_len: usize) -> usize {
    (0..n).map(|b| max_span_len.min(n - b)).sum()
}

/// Row `i` is `[u_b ; u_e]` for span `i`, using token rows only.
pub fn span_represent(emb: &EmbeddingMatrix, spans: &[SpanCandidate]) -> Result<Array2<f64>> {
    let n = emb.token_count();
    let d = emb.dim();
    let mut reps = Array2::zeros((spans.len(), 2 * d));
    for (i, sp) in spans.iter().enumerate() {
        if sp.b > sp.e || sp.e >= n {
            return Err(Error::argument(format!(
                "span ({}, {}) invalid for {n} tokens",
                sp.b, sp.e
            )));
        }
        reps.slice_mut(s![i, ..d]).assign(&emb.token(sp.b));
        reps.slice_mut(s![i, d..]).assign(&emb.token(sp.e));
    }
    Ok(reps)
}

/// Linear map from span representations to label scores. Labels are
/// `[Neg_Span, type_0, type_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanHeadParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub neg_index: usize,
}

impl SpanHeadParams {
    pub fn zeros(num_types: usize, dim: usize) -> Self {
        SpanHeadParams {
            weight: Array2::zeros((num_types + 1, 2 * dim)),
            bias: Array1::zeros(num_types + 1),
            neg_index: 0,
        }
    }

    pub fn random(num_types: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (2.0 * dim as f64).sqrt()).expect("valid normal");
        SpanHeadParams {
            weight: Array2::from_shape_simple_fn((num_types + 1, 2 * dim), || normal.sample(rng)),
            ..SpanHeadParams::zeros(num_types, dim)
        }
    }

    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    /// Label index for entity type index `t`.
    pub fn label_of_type(&self, t: usize) -> usize {
        if t < self.neg_index {
            t
        } else {
            t + 1
        }
    }

    /// Entity type index for a label, `None` for `Neg_Span`.
    pub fn type_of_label(&self, label: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match label.cmp(&self.neg_index) {
            Less => Some(label),
            Equal => None,
            Greater => Some(label - 1),
        }
    }

    pub fn logits(&self, reps: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if reps.ncols() != self.weight.ncols() {
            return Err(Error::argument(format!(
                "span representation width {} does not match head width {}",
                reps.ncols(),
                self.weight.ncols()
            )));
        }
        Ok(reps.dot(&self.weight.t()) + &self.bias)
    }
}

/// Gold label per enumerated span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanLabels {
    pub labels: Vec<usize>,
    /// Gold mentions with no matching candidate: longer than the cap or not
    /// aligned with token boundaries.
    pub unreachable: usize,
}

/// Labels each candidate with the type of the gold mention covering exactly
/// those tokens, or `Neg_Span`.
pub fn span_gold_labels(
    sample: &Sample,
    spans: &[SpanCandidate],
    params: &SpanHeadParams,
    tagset: &Tagset,
) -> Result<SpanLabels> {
    let mut labels = vec![params.neg_index; spans.len()];
    let mut unreachable = 0;
    for m in &sample.gold {
        let ty = tagset
            .type_index(&m.entity_type)
            .ok_or_else(|| Error::Encode {
                mention: m.clone(),
                reason: "unknown entity type".into(),
            })?;
        let found = sample
            .token_range(m.begin, m.end)
            .and_then(|(b, e)| spans.binary_search(&SpanCandidate { b, e }).ok());
        match found {
            // First type in tuple order wins if two gold mentions share a span.
            Some(i) if labels[i] == params.neg_index => labels[i] = params.label_of_type(ty),
            Some(_) => {}
            None => unreachable += 1,
        }
    }
    if unreachable > 0 {
        log::debug!(
            "sample {}: {unreachable} gold mentions unreachable by span enumeration",
            sample.id
        );
    }
    Ok(SpanLabels {
        labels,
        unreachable,
    })
}

/// Mean cross-entropy over all enumerated spans and its logit gradient.
pub fn span_loss_grad(
    logits: ArrayView2<'_, f64>,
    gold_labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() == 0 {
        return Err(Error::argument("span loss is undefined with zero spans"));
    }
    if gold_labels.len() != logits.nrows() {
        return Err(Error::argument(format!(
            "{} gold labels for {} spans",
            gold_labels.len(),
            logits.nrows()
        )));
    }
    if let Some(&bad) = gold_labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::argument(format!("gold label {bad} out of range")));
    }
    Ok(mean_cross_entropy(logits, gold_labels))
}

/// Loss, head gradient and embedding-row gradient for one sample.
pub fn span_sample_grad(
    emb: &EmbeddingMatrix,
    params: &SpanHeadParams,
    spans: &[SpanCandidate],
    labels: &[usize],
) -> Result<(f64, LinearGrad, Array2<f64>)> {
    let reps = span_represent(emb, spans)?;
    let logits = params.logits(reps.view())?;
    let (loss, d_logits) = span_loss_grad(logits.view(), labels)?;
    let grad = LinearGrad {
        weight: d_logits.t().dot(&reps),
        bias: d_logits.sum_axis(Axis(0)),
    };
    let d_reps = d_logits.dot(&params.weight);
    let d = emb.dim();
    let mut d_emb = Array2::zeros(emb.rows().raw_dim());
    for (i, sp) in spans.iter().enumerate() {
        let mut row = d_emb.row_mut(sp.b + 1);
        row += &d_reps.slice(s![i, ..d]);
        let mut row = d_emb.row_mut(sp.e + 1);
        row += &d_reps.slice(s![i, d..]);
    }
    Ok((loss, grad, d_emb))
}

/// Inference knobs for the span head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpanConfig {
    pub max_span_len: usize,
    /// Spans scored per matrix product; bounds peak memory on long samples.
    pub chunk_size: usize,
}

impl Default for SpanConfig {
    fn default() -> Self {
        SpanConfig {
            max_span_len: DEFAULT_MAX_SPAN_LEN,
            chunk_size: 4096,
        }
    }
}

/// Argmax label per span; every non-`Neg_Span` winner becomes a mention.
/// Overlapping and nested outputs are kept as they are.
pub fn span_predict(
    emb: &EmbeddingMatrix,
    params: &SpanHeadParams,
    sample: &Sample,
    tagset: &Tagset,
    config: SpanConfig,
) -> Result<PredictionSet> {
    if emb.token_count() != sample.token_count() {
        return Err(Error::argument(format!(
            "embedding has {} tokens, sample {} has {}",
            emb.token_count(),
            sample.id,
            sample.token_count()
        )));
    }
    let spans = enumerate_spans(sample.token_count(), config.max_span_len);
    let mut out = PredictionSet::new();
    for chunk in spans.chunks(config.chunk_size.max(1)) {
        let reps = span_represent(emb, chunk)?;
        let logits = params.logits(reps.view())?;
        for (sp, row) in chunk.iter().zip(logits.rows()) {
            if let Some(t) = params.type_of_label(argmax(row)) {
                out.insert(sample.mention_for_tokens(&tagset.entity_types()[t], sp.b, sp.e));
            }
        }
    }
    Ok(restrict_to_core(&out, sample))
}
