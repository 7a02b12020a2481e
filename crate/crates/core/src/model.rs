//! An encoder plus one of the three NER heads, with flat parameter access for
//! the optimizer.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bio::{encode_lenient, Tagset};
use crate::corpus::{gold_set, PredictionSet, Sample};
use crate::crf_head::{crf_predict, crf_sample_grad, CrfParams};
use crate::encoder::{EmbeddingMatrix, TokenEncoder};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::scorer::score;
use crate::seq_head::{seq_predict, seq_sample_grad, SeqHeadParams};
use crate::span_head::{
    enumerate_spans, span_gold_labels, span_predict, span_sample_grad, SpanConfig, SpanHeadParams,
};
use crate::trainer::{Evaluation, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Seq,
    Crf,
    Span,
    Meta,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(ModelKind::Seq),
            "crf" | "seqcrf" => Ok(ModelKind::Crf),
            "span" | "spanpred" => Ok(ModelKind::Span),
            "meta" => Ok(ModelKind::Meta),
            other => Err(Error::argument(format!("unknown model kind {other:?}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Seq => "seq",
            ModelKind::Crf => "crf",
            ModelKind::Span => "span",
            ModelKind::Meta => "meta",
        })
    }
}

/// Gradient laid out like [`ParamsMut`]: dense tensors in parameter order
/// plus sparse rows of the hashed embedding table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub dense: Vec<Vec<f64>>,
    pub table_rows: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        if self.dense.is_empty() {
            self.dense = other.dense.clone();
        } else {
            for (acc, g) in self.dense.iter_mut().zip(&other.dense) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        for (&row, g) in &other.table_rows {
            match self.table_rows.get_mut(&row) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.table_rows.insert(row, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.dense.iter_mut().flatten().for_each(|g| *g *= factor);
        self.table_rows
            .values_mut()
            .flatten()
            .for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.dense.iter().flatten().all(|g| g.is_finite())
            && self.table_rows.values().flatten().all(|g| g.is_finite())
    }
}

/// Mutable views of every trainable parameter.
pub struct ParamsMut<'a> {
    pub dense: Vec<&'a mut [f64]>,
    /// Hashed table and its row width, updated row-sparsely.
    pub table: Option<(&'a mut [f64], usize)>,
}

pub(crate) fn flat<D: Dimension>(a: Array<f64, D>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}

pub(crate) fn slice_mut<D: Dimension>(a: &mut Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters use standard layout")
}

/// Appends the toy encoder's gradient for `d_emb` to `grads`.
pub(crate) fn encoder_backward(
    encoder: &TokenEncoder,
    hashes: Option<&[usize]>,
    emb: &EmbeddingMatrix,
    d_emb: ndarray::ArrayView2<'_, f64>,
    grads: &mut Gradients,
) {
    if let (Some(toy), Some(hashes)) = (encoder.toy(), hashes) {
        let g = toy.backward(hashes, emb, d_emb);
        grads
            .dense
            .push(g.begin.map(flat).unwrap_or_else(|| vec![0.0; toy.dim()]));
        grads
            .dense
            .push(g.end.map(flat).unwrap_or_else(|| vec![0.0; toy.dim()]));
        grads.table_rows = g
            .table_rows
            .into_iter()
            .map(|(r, v)| (r, flat(v)))
            .collect();
    }
}

/// Embeds tokens, also returning hash ids when the encoder is trainable.
pub(crate) fn embed_tokens(
    encoder: &TokenEncoder,
    key: &str,
    tokens: &[&str],
) -> Result<(EmbeddingMatrix, Option<Vec<usize>>)> {
    match encoder.toy() {
        Some(toy) => {
            let hashes: Vec<usize> = tokens.iter().map(|t| toy.hash(t)).collect();
            Ok((toy.encode_hashes(&hashes), Some(hashes)))
        }
        None => Ok((encoder.encode(key, tokens)?, None)),
    }
}

pub(crate) fn encoder_params_mut<'a>(
    encoder: &'a mut TokenEncoder,
    dense: &mut Vec<&'a mut [f64]>,
) -> Option<(&'a mut [f64], usize)> {
    encoder.toy_mut().map(|toy| {
        dense.push(slice_mut(&mut toy.begin));
        dense.push(slice_mut(&mut toy.end));
        let dim = toy.config.dim;
        (slice_mut(&mut toy.table), dim)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Seq(SeqHeadParams),
    Crf(CrfParams),
    Span(SpanHeadParams),
}

#[derive(Debug, Clone)]
pub struct NerModel {
    pub tagset: Tagset,
    pub encoder: TokenEncoder,
    pub head: Head,
    pub span_config: SpanConfig,
}

impl NerModel {
    /// Fresh model with randomly initialised head weights.
    pub fn new(
        kind: ModelKind,
        tagset: Tagset,
        encoder: TokenEncoder,
        span_config: SpanConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_4ead);
        let d = encoder.dim();
        let head = match kind {
            ModelKind::Seq => Head::Seq(SeqHeadParams::random(tagset.num_tags(), d, &mut rng)),
            ModelKind::Crf => Head::Crf(CrfParams::random(tagset.num_tags(), d, &mut rng)),
            ModelKind::Span => Head::Span(SpanHeadParams::random(tagset.num_types(), d, &mut rng)),
            ModelKind::Meta => {
                return Err(Error::argument(
                    "the meta classifier is built with MetaModel",
                ))
            }
        };
        if span_config.max_span_len == 0 {
            return Err(Error::argument("max span length must be at least 1"));
        }
        Ok(NerModel {
            tagset,
            encoder,
            head,
            span_config,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.head {
            Head::Seq(_) => ModelKind::Seq,
            Head::Crf(_) => ModelKind::Crf,
            Head::Span(_) => ModelKind::Span,
        }
    }

    pub fn embed(&self, sample: &Sample) -> Result<EmbeddingMatrix> {
        self.encoder.encode(&sample.id, &sample.token_texts())
    }

    /// Predictions for one sample in its original (core) coordinates.
    pub fn predict(&self, sample: &Sample) -> Result<PredictionSet> {
        let emb = self.embed(sample)?;
        match &self.head {
            Head::Seq(p) => seq_predict(&emb, p, sample, &self.tagset),
            Head::Crf(p) => crf_predict(&emb, p, sample, &self.tagset),
            Head::Span(p) => span_predict(&emb, p, sample, &self.tagset, self.span_config),
        }
    }

    pub fn predict_all(&self, samples: &[Sample], exec: Execution) -> Result<PredictionSet> {
        let per_sample = exec.try_map(samples, |s| self.predict(s))?;
        let mut all = PredictionSet::new();
        for p in per_sample {
            all.extend(p);
        }
        Ok(all)
    }

    /// Loss and gradient for one sample; `None` when the sample yields no
    /// loss terms (no tokens).
    pub fn sample_grad(&self, sample: &Sample) -> Result<Option<(f64, Gradients)>> {
        if sample.token_count() == 0 {
            return Ok(None);
        }
        let tokens = sample.token_texts();
        let (emb, hashes) = embed_tokens(&self.encoder, &sample.id, &tokens)?;
        let (loss, mut grads, d_emb) = match &self.head {
            Head::Seq(p) => {
                let gold = encode_lenient(sample, &self.tagset)?;
                let (loss, g, d_emb) = seq_sample_grad(&emb, p, &gold.tags)?;
                (loss, vec![flat(g.weight), flat(g.bias)], d_emb)
            }
            Head::Crf(p) => {
                let gold = encode_lenient(sample, &self.tagset)?;
                let (loss, g, d_emb) = crf_sample_grad(&emb, p, &gold.tags)?;
                (
                    loss,
                    vec![
                        flat(g.emission.weight),
                        flat(g.emission.bias),
                        flat(g.transitions),
                        flat(g.start),
                        flat(g.end),
                    ],
                    d_emb,
                )
            }
            Head::Span(p) => {
                let spans = enumerate_spans(sample.token_count(), self.span_config.max_span_len);
                let labels = span_gold_labels(sample, &spans, p, &self.tagset)?;
                let (loss, g, d_emb) = span_sample_grad(&emb, p, &spans, &labels.labels)?;
                (loss, vec![flat(g.weight), flat(g.bias)], d_emb)
            }
        };
        let mut out = Gradients {
            dense: std::mem::take(&mut grads),
            table_rows: BTreeMap::new(),
        };
        encoder_backward(
            &self.encoder,
            hashes.as_deref(),
            &emb,
            d_emb.view(),
            &mut out,
        );
        Ok(Some((loss, out)))
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut dense: Vec<&mut [f64]> = match &mut self.head {
            Head::Seq(p) => vec![slice_mut(&mut p.weight), slice_mut(&mut p.bias)],
            Head::Crf(p) => vec![
                slice_mut(&mut p.emission.weight),
                slice_mut(&mut p.emission.bias),
                slice_mut(&mut p.transitions),
                slice_mut(&mut p.start),
                slice_mut(&mut p.end),
            ],
            Head::Span(p) => vec![slice_mut(&mut p.weight), slice_mut(&mut p.bias)],
        };
        let table = encoder_params_mut(&mut self.encoder, &mut dense);
        ParamsMut { dense, table }
    }

    /// Counts of gold mentions the head cannot learn from: overlaps dropped
    /// for the sequence heads, over-long or misaligned spans for the span head.
    pub fn unusable_gold(&self, samples: &[Sample]) -> Result<usize> {
        let mut total = 0;
        for s in samples {
            total += match &self.head {
                Head::Seq(_) | Head::Crf(_) => {
                    let e = encode_lenient(s, &self.tagset)?;
                    e.dropped_overlaps + e.dropped_misaligned
                }
                Head::Span(p) => {
                    let spans = enumerate_spans(s.token_count(), self.span_config.max_span_len);
                    span_gold_labels(s, &spans, p, &self.tagset)?.unreachable
                }
            };
        }
        Ok(total)
    }
}

impl Trainable for NerModel {
    type Example = Sample;

    fn example_grad(&self, example: &Sample) -> Result<Option<(f64, Gradients)>> {
        self.sample_grad(example)
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        NerModel::params_mut(self)
    }

    fn evaluate(&self, validation: &[Sample], exec: Execution) -> Result<Evaluation> {
        let predictions = self.predict_all(validation, exec)?;
        let metrics = score(&gold_set(validation), &predictions);
        Ok(Evaluation {
            score: metrics.f1,
            metrics: Some(metrics),
            accuracy: None,
            predictions,
        })
    }
}
