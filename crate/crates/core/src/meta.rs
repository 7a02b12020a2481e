//! Learned filter over the union of two systems' predictions. Each prediction
//! is rendered as `type prefix [e] span [/e] suffix` and judged correct or
//! incorrect by a binary classifier on the pooled encoder row.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{char_slice, gold_set, tokenize, Mention, PredictionSet, Sample};
use crate::encoder::TokenEncoder;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::math::mean_cross_entropy;
use crate::model::{
    embed_tokens, encoder_backward, encoder_params_mut, flat, slice_mut, Gradients, ParamsMut,
};
use crate::seq_head::SeqHeadParams;
use crate::trainer::{Evaluation, Trainable};

pub const OPEN_MARKER: &str = "[e]";
pub const CLOSE_MARKER: &str = "[/e]";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const INCORRECT: usize = 0;
const CORRECT: usize = 1;

/// Renders a mention with its type as prompt and markers around the span.
/// The sample text is kept verbatim; a single space is inserted next to a
/// marker only where the text has no whitespace already.
pub fn render(mention: &Mention, sample: &Sample) -> Result<String> {
    if mention.begin >= mention.end || mention.end > sample.char_len() {
        return Err(Error::argument(format!(
            "mention {mention} is outside sample {} of length {}",
            sample.id,
            sample.char_len()
        )));
    }
    let prefix = char_slice(&sample.text, 0, mention.begin);
    let span = char_slice(&sample.text, mention.begin, mention.end);
    let suffix = char_slice(&sample.text, mention.end, sample.char_len());
    let mut out = String::with_capacity(sample.text.len() + mention.entity_type.len() + 12);
    out.push_str(&mention.entity_type);
    out.push(' ');
    out.push_str(prefix);
    if !prefix.is_empty() && !prefix.ends_with(char::is_whitespace) {
        out.push(' ');
    }
    out.push_str(OPEN_MARKER);
    out.push(' ');
    out.push_str(span);
    out.push(' ');
    out.push_str(CLOSE_MARKER);
    if !suffix.is_empty() && !suffix.starts_with(char::is_whitespace) {
        out.push(' ');
    }
    out.push_str(suffix);
    Ok(out)
}

/// Tokens of a rendered text: the prompt and markers are atomic, everything
/// else goes through the corpus tokenizer.
pub fn tokenize_rendered(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for (i, piece) in text.split_whitespace().enumerate() {
        if i == 0 || piece == OPEN_MARKER || piece == CLOSE_MARKER {
            tokens.push(piece.to_string());
        } else {
            let chars: Vec<char> = piece.chars().collect();
            for t in tokenize(piece) {
                tokens.push(chars[t.begin..t.end].iter().collect());
            }
        }
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaLabel {
    Correct,
    Incorrect,
}

impl MetaLabel {
    fn index(self) -> usize {
        match self {
            MetaLabel::Correct => CORRECT,
            MetaLabel::Incorrect => INCORRECT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Gold,
    #[serde(untagged)]
    Prediction {
        source: String,
        epoch: usize,
    },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Gold => f.write_str("gold"),
            Provenance::Prediction { source, epoch } => write!(f, "{source}@{epoch}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaExample {
    #[serde(rename = "text")]
    pub rendered_text: String,
    pub label: MetaLabel,
    pub provenance: Provenance,
}

/// Validation predictions captured from one epoch of one system.
#[derive(Debug, Clone, Copy)]
pub struct CapturedEpoch<'a> {
    pub source: &'a str,
    pub epoch: usize,
    pub predictions: &'a PredictionSet,
}

fn sample_index(samples: &[Sample]) -> HashMap<&str, &Sample> {
    samples.iter().map(|s| (s.id.as_str(), s)).collect()
}

fn lookup<'a>(index: &HashMap<&str, &'a Sample>, m: &Mention) -> Result<&'a Sample> {
    index
        .get(m.sample_id.as_str())
        .copied()
        .ok_or_else(|| Error::argument(format!("no sample with id {:?} for {m}", m.sample_id)))
}

/// Labels every captured validation prediction against validation gold, adds
/// all training gold as correct, removes repeated (text, label) pairs and
/// splits off a seeded holdout.
pub fn build_training_set(
    captured: &[CapturedEpoch<'_>],
    validation: &[Sample],
    training: &[Sample],
    holdout_frac: f64,
    seed: u64,
) -> Result<(Vec<MetaExample>, Vec<MetaExample>)> {
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::argument(format!(
            "holdout fraction {holdout_frac} is not in [0, 1)"
        )));
    }
    if captured.is_empty() {
        return Err(Error::argument(
            "no captured epochs to build meta examples from",
        ));
    }
    let gold = gold_set(validation);
    let val_index = sample_index(validation);
    let mut seen = HashSet::new();
    let mut examples = Vec::new();
    let mut push = |example: MetaExample| {
        if seen.insert((example.rendered_text.clone(), example.label)) {
            examples.push(example);
        }
    };
    for record in captured {
        for m in record.predictions {
            let label = if gold.contains(m) {
                MetaLabel::Correct
            } else {
                MetaLabel::Incorrect
            };
            push(MetaExample {
                rendered_text: render(m, lookup(&val_index, m)?)?,
                label,
                provenance: Provenance::Prediction {
                    source: record.source.to_string(),
                    epoch: record.epoch,
                },
            });
        }
    }
    for sample in training {
        for m in &sample.gold {
            push(MetaExample {
                rendered_text: render(m, sample)?,
                label: MetaLabel::Correct,
                provenance: Provenance::Gold,
            });
        }
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_holdout = (examples.len() as f64 * holdout_frac).round() as usize;
    let holdout: HashSet<usize> = order[..n_holdout].iter().copied().collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, ex) in examples.into_iter().enumerate() {
        if holdout.contains(&i) {
            held.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((train, held))
}

pub fn write_examples(examples: &[MetaExample], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<MetaExample>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: MetaExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// A meta example ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaInstance {
    pub text: String,
    pub tokens: Vec<String>,
    pub label: usize,
}

impl From<&MetaExample> for MetaInstance {
    fn from(ex: &MetaExample) -> Self {
        MetaInstance {
            tokens: tokenize_rendered(&ex.rendered_text),
            text: ex.rendered_text.clone(),
            label: ex.label.index(),
        }
    }
}

/// Encoder plus a two-way linear layer over the pooled row, with a decision
/// threshold on the probability of "correct".
#[derive(Debug, Clone)]
pub struct MetaModel {
    pub encoder: TokenEncoder,
    pub head: SeqHeadParams,
    pub threshold: f64,
}

impl MetaModel {
    pub fn new(encoder: TokenEncoder, threshold: f64, seed: u64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::argument(format!(
                "threshold {threshold} is not in (0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e7a);
        let head = SeqHeadParams::random(2, encoder.dim(), &mut rng);
        Ok(MetaModel {
            encoder,
            head,
            threshold,
        })
    }

    fn logits(
        &self,
        text: &str,
        tokens: &[String],
    ) -> Result<(
        Array2<f64>,
        crate::encoder::EmbeddingMatrix,
        Option<Vec<usize>>,
    )> {
        let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let (emb, hashes) = embed_tokens(&self.encoder, text, &refs)?;
        let pooled = emb.begin_special().insert_axis(Axis(0));
        Ok((self.head.forward(pooled)?, emb, hashes))
    }

    /// Probability that the rendered prediction is correct.
    pub fn prob_correct(&self, text: &str) -> Result<f64> {
        let (logits, _, _) = self.logits(text, &tokenize_rendered(text))?;
        let (a, b) = (logits[[0, INCORRECT]], logits[[0, CORRECT]]);
        Ok(1.0 / (1.0 + (a - b).exp()))
    }

    pub fn accept(&self, text: &str) -> Result<bool> {
        Ok(self.prob_correct(text)? >= self.threshold)
    }

    pub fn accuracy(&self, examples: &[MetaInstance], exec: Execution) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let hits = exec.try_map(examples, |ex| {
            Ok::<_, Error>((self.accept(&ex.text)? as usize == ex.label) as usize)
        })?;
        Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut dense = vec![
            slice_mut(&mut self.head.weight),
            slice_mut(&mut self.head.bias),
        ];
        let table = encoder_params_mut(&mut self.encoder, &mut dense);
        ParamsMut { dense, table }
    }
}

impl Trainable for MetaModel {
    type Example = MetaInstance;

    fn example_grad(&self, ex: &MetaInstance) -> Result<Option<(f64, Gradients)>> {
        let (logits, emb, hashes) = self.logits(&ex.text, &ex.tokens)?;
        let (loss, d_logits) = mean_cross_entropy(logits.view(), &[ex.label]);
        let pooled = emb.begin_special().insert_axis(Axis(0));
        let (g, d_pooled) = self.head.backward(pooled, d_logits.view());
        let mut d_emb = Array2::zeros(emb.rows().dim());
        d_emb.row_mut(0).assign(&d_pooled.row(0));
        let mut grads = Gradients {
            dense: vec![flat(g.weight), flat(g.bias)],
            ..Default::default()
        };
        encoder_backward(
            &self.encoder,
            hashes.as_deref(),
            &emb,
            d_emb.view(),
            &mut grads,
        );
        Ok(Some((loss, grads)))
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        MetaModel::params_mut(self)
    }

    fn evaluate(&self, validation: &[MetaInstance], exec: Execution) -> Result<Evaluation> {
        let accuracy = self.accuracy(validation, exec)?;
        Ok(Evaluation {
            score: accuracy,
            accuracy: Some(accuracy),
            ..Default::default()
        })
    }
}

/// Keeps the predictions `keep` accepts after rendering. The result is always
/// a subset of `preds`.
pub fn filter_with<F>(
    preds: &PredictionSet,
    samples: &[Sample],
    exec: Execution,
    keep: F,
) -> Result<PredictionSet>
where
    F: Fn(&str) -> Result<bool> + Sync,
{
    let index = sample_index(samples);
    let items: Vec<&Mention> = preds.iter().collect();
    let decisions = exec.try_map(&items, |m| keep(&render(m, lookup(&index, m)?)?))?;
    Ok(items
        .into_iter()
        .zip(decisions)
        .filter(|(_, keep)| *keep)
        .map(|(m, _)| m.clone())
        .collect())
}

pub fn meta_filter(
    union_preds: &PredictionSet,
    model: &MetaModel,
    samples: &[Sample],
    exec: Execution,
) -> Result<PredictionSet> {
    filter_with(union_preds, samples, exec, |text| model.accept(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ToyEncoderConfig, ToyEncoderParams};
    use proptest::prelude::*;

    fn bob() -> Sample {
        Sample::with_gold_triples(
            "s1",
            "Bob has HIV and flu.",
            &[("disease", 8, 11), ("disease", 16, 19)],
        )
        .unwrap()
    }

    #[test]
    fn renders_marked_prompt() {
        let m = Mention::new("s1", "disease", 8, 11);
        assert_eq!(
            render(&m, &bob()).unwrap(),
            "disease Bob has [e] HIV [/e] and flu."
        );
    }

    #[test]
    fn renders_edges() {
        let s = Sample::from_text("s", "HIV", vec![]).unwrap();
        assert_eq!(
            render(&Mention::new("s", "d", 0, 3), &s).unwrap(),
            "d [e] HIV [/e]"
        );
        let s = Sample::from_text("s", "HIV here", vec![]).unwrap();
        assert_eq!(
            render(&Mention::new("s", "d", 0, 3), &s).unwrap(),
            "d [e] HIV [/e] here"
        );
        let s = Sample::from_text("s", "(HIV)", vec![]).unwrap();
        assert_eq!(
            render(&Mention::new("s", "d", 1, 4), &s).unwrap(),
            "d ( [e] HIV [/e] )"
        );
    }

    #[test]
    fn render_rejects_out_of_range() {
        assert!(render(&Mention::new("s1", "disease", 8, 40), &bob()).is_err());
    }

    #[test]
    fn rendered_tokens_keep_markers_atomic() {
        let toks = tokenize_rendered("disease Bob has [e] HIV [/e] and flu.");
        assert_eq!(
            toks,
            ["disease", "Bob", "has", "[e]", "HIV", "[/e]", "and", "flu", "."]
        );
    }

    #[test]
    fn labels_follow_strict_match() {
        let val = vec![bob()];
        let preds: PredictionSet = [
            Mention::new("s1", "disease", 8, 11),
            Mention::new("s1", "disease", 8, 10),
        ]
        .into_iter()
        .collect();
        let cap = [CapturedEpoch {
            source: "seq",
            epoch: 1,
            predictions: &preds,
        }];
        let (train, held) = build_training_set(&cap, &val, &[], 0.0, 0).unwrap();
        assert!(held.is_empty());
        let label_of = |t: &str| train.iter().find(|e| e.rendered_text == t).unwrap().label;
        assert_eq!(
            label_of("disease Bob has [e] HIV [/e] and flu."),
            MetaLabel::Correct
        );
        assert_eq!(
            label_of("disease Bob has [e] HI [/e] V and flu."),
            MetaLabel::Incorrect
        );
    }

    #[test]
    fn bookkeeping_without_duplicates() {
        let val: Vec<Sample> = (0..6)
            .map(|i| {
                Sample::with_gold_triples(
                    format!("v{i}"),
                    format!("word{i} alpha beta gamma"),
                    &[("x", 0, 5)],
                )
                .unwrap()
            })
            .collect();
        let train =
            vec![
                Sample::with_gold_triples("t0", "one two three", &[("x", 0, 3), ("y", 4, 7)])
                    .unwrap(),
            ];
        // Distinct predictions per (model, epoch) so nothing collapses.
        let mut sets = Vec::new();
        for model in 0..2 {
            for epoch in 0..3 {
                let begin = 6 + (model * 3 + epoch) % 6;
                let set: PredictionSet = val
                    .iter()
                    .map(|s| Mention::new(&s.id, "x", begin, 17))
                    .collect();
                sets.push((model, epoch, set));
            }
        }
        let cap: Vec<CapturedEpoch<'_>> = sets
            .iter()
            .map(|(m, e, set)| CapturedEpoch {
                source: if *m == 0 { "seq" } else { "span" },
                epoch: e + 1,
                predictions: set,
            })
            .collect();
        let (a, b) = build_training_set(&cap, &val, &train, 0.15, 9).unwrap();
        let captured: usize = sets.iter().map(|(_, _, s)| s.len()).sum();
        assert_eq!(a.len() + b.len(), captured + 2);
        assert_eq!(b.len(), ((captured + 2) as f64 * 0.15).round() as usize);
    }

    #[test]
    fn duplicates_collapse_and_holdout_is_seeded() {
        let val = vec![bob()];
        let preds: PredictionSet = [Mention::new("s1", "disease", 8, 11)].into_iter().collect();
        let cap = [
            CapturedEpoch {
                source: "seq",
                epoch: 1,
                predictions: &preds,
            },
            CapturedEpoch {
                source: "span",
                epoch: 1,
                predictions: &preds,
            },
        ];
        let (train, held) = build_training_set(&cap, &val, &[], 0.0, 0).unwrap();
        assert_eq!(train.len() + held.len(), 1);
        assert!(build_training_set(&cap, &val, &[], 1.0, 0).is_err());
        assert!(build_training_set(&cap, &val, &[], -0.1, 0).is_err());
        let many: Vec<Sample> = (0..40)
            .map(|i| Sample::with_gold_triples(format!("g{i}"), "aa bb", &[("x", 0, 2)]).unwrap())
            .collect();
        let x = build_training_set(&cap, &val, &many, 0.3, 5).unwrap();
        let y = build_training_set(&cap, &val, &many, 0.3, 5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn examples_round_trip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.jsonl");
        let exs = vec![
            MetaExample {
                rendered_text: "x [e] a [/e]".into(),
                label: MetaLabel::Correct,
                provenance: Provenance::Gold,
            },
            MetaExample {
                rendered_text: "y [e] b [/e] c".into(),
                label: MetaLabel::Incorrect,
                provenance: Provenance::Prediction {
                    source: "span".into(),
                    epoch: 4,
                },
            },
        ];
        write_examples(&exs, &path).unwrap();
        assert_eq!(read_examples(&path).unwrap(), exs);
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.contains("\"provenance\":\"gold\""), "{raw}");
        assert!(raw.contains("\"label\":\"incorrect\""), "{raw}");
    }

    #[test]
    fn constant_filters() {
        let s = bob();
        let preds = s.gold.clone();
        let all = filter_with(
            &preds,
            std::slice::from_ref(&s),
            Execution::Sequential,
            |_| Ok(true),
        )
        .unwrap();
        assert_eq!(all, preds);
        let none = filter_with(&preds, &[s], Execution::Sequential, |_| Ok(false)).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn missing_sample_is_an_error() {
        let preds: PredictionSet = [Mention::new("nope", "x", 0, 1)].into_iter().collect();
        assert!(filter_with(&preds, &[bob()], Execution::Sequential, |_| Ok(true)).is_err());
    }

    fn tiny_meta() -> MetaModel {
        let enc = ToyEncoderParams::new(
            ToyEncoderConfig {
                hash_size: 512,
                dim: 8,
                width: 1,
            },
            2,
        )
        .unwrap();
        MetaModel::new(TokenEncoder::Toy(enc), 0.5, 2).unwrap()
    }

    #[test]
    fn threshold_bounds() {
        let enc = TokenEncoder::Toy(
            ToyEncoderParams::new(
                ToyEncoderConfig {
                    hash_size: 8,
                    dim: 2,
                    width: 1,
                },
                0,
            )
            .unwrap(),
        );
        assert!(MetaModel::new(enc.clone(), 0.0, 0).is_err());
        assert!(MetaModel::new(enc, 1.0, 0).is_err());
    }

    #[test]
    fn probability_matches_softmax() {
        let m = tiny_meta();
        let text = "disease Bob has [e] HIV [/e] and flu.";
        let p = m.prob_correct(text).unwrap();
        let (logits, _, _) = m.logits(text, &tokenize_rendered(text)).unwrap();
        let z: f64 = logits.row(0).iter().map(|v| v.exp()).sum();
        assert!((p - logits[[0, CORRECT]].exp() / z).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn filter_output_is_subset(mask in proptest::collection::vec(any::<bool>(), 8)) {
            let s = Sample::from_text("s", "a b c d e f g h", vec![]).unwrap();
            let preds: PredictionSet = (0..8).map(|i| Mention::new("s", "t", 2 * i, 2 * i + 1)).collect();
            let gold: PredictionSet = (0..8).step_by(2).map(|i| Mention::new("s", "t", 2 * i, 2 * i + 1)).collect();
            let out = filter_with(&preds, &[s], Execution::Sequential, |text| {
                let idx = (text.find("[e]").unwrap() - 2) / 2;
                Ok(mask[idx])
            }).unwrap();
            prop_assert!(out.is_subset(&preds));
            let before = crate::scorer::score(&gold, &preds);
            let after = crate::scorer::score(&gold, &out);
            prop_assert!(after.recall <= before.recall);
            prop_assert!(after.fn_ >= before.fn_);
        }

        #[test]
        fn render_is_injective_on_token_spans(text in "[a-c]{1,3}( [a-c]{1,3}){0,4}") {
            let s = Sample::from_text("s", text, vec![]).unwrap();
            let mut seen = HashMap::new();
            for i in 0..s.token_count() {
                for j in i..s.token_count() {
                    for ty in ["x", "y"] {
                        let m = s.mention_for_tokens(ty, i, j);
                        let r = render(&m, &s).unwrap();
                        prop_assert_eq!(r.matches(OPEN_MARKER).count(), 1);
                        prop_assert!(r.find(OPEN_MARKER) < r.find(CLOSE_MARKER));
                        prop_assert_eq!(r.split_whitespace().next(), Some(ty));
                        if let Some(prev) = seen.insert(r.clone(), m.clone()) {
                            prop_assert_eq!(prev, m);
                        }
                    }
                }
            }
        }
    }
}
