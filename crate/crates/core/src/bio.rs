//! BIO tag inventory and conversion between mention sets and tag sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Mention, PredictionSet, Sample};
use crate::error::{Error, Result};

/// Entity types plus the derived tag list `[O, B-t1, I-t1, B-t2, I-t2, ...]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tagset {
    entity_types: Vec<String>,
    index: HashMap<String, usize>,
}

/// What a tag index means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl Tagset {
    pub fn new<S: Into<String>>(entity_types: impl IntoIterator<Item = S>) -> Result<Self> {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(entity_types.len());
        for (i, t) in entity_types.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::argument(format!(
                    "entity type {t:?} must be non-empty and free of whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::argument(format!("duplicate entity type {t:?}")));
            }
        }
        Ok(Tagset {
            entity_types,
            index,
        })
    }

    /// Sorted distinct gold types found in the samples.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let mut types: Vec<String> = samples
            .iter()
            .flat_map(|s| s.gold.iter().map(|m| m.entity_type.clone()))
            .collect();
        types.sort();
        types.dedup();
        Tagset::new(types)
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn type_index(&self, entity_type: &str) -> Option<usize> {
        self.index.get(entity_type).copied()
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    /// `2·|types| + 1`.
    pub fn num_tags(&self) -> usize {
        2 * self.entity_types.len() + 1
    }

    pub fn begin_tag(&self, type_index: usize) -> usize {
        1 + 2 * type_index
    }

    pub fn inside_tag(&self, type_index: usize) -> usize {
        2 + 2 * type_index
    }

    pub fn tag(&self, index: usize) -> Tag {
        match index {
            0 => Tag::Outside,
            i if i % 2 == 1 => Tag::Begin((i - 1) / 2),
            i => Tag::Inside((i - 2) / 2),
        }
    }

    pub fn tag_name(&self, index: usize) -> String {
        match self.tag(index) {
            Tag::Outside => "O".to_string(),
            Tag::Begin(t) => format!("B-{}", self.entity_types[t]),
            Tag::Inside(t) => format!("I-{}", self.entity_types[t]),
        }
    }

    pub fn tag_names(&self) -> Vec<String> {
        (0..self.num_tags()).map(|i| self.tag_name(i)).collect()
    }
}

impl TryFrom<Vec<String>> for Tagset {
    type Error = Error;

    fn try_from(types: Vec<String>) -> Result<Self> {
        Tagset::new(types)
    }
}

impl From<Tagset> for Vec<String> {
    fn from(t: Tagset) -> Self {
        t.entity_types
    }
}

/// One tag index per token of a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence(Vec<usize>);

impl TagSequence {
    pub fn new(tags: Vec<usize>, tagset: &Tagset) -> Result<Self> {
        if let Some(&bad) = tags.iter().find(|&&t| t >= tagset.num_tags()) {
            return Err(Error::argument(format!(
                "tag index {bad} out of range for {} tags",
                tagset.num_tags()
            )));
        }
        Ok(TagSequence(tags))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Tags the sample's gold mentions. Every mention must fall on token
/// boundaries, carry a known type, and not overlap another mention.
pub fn encode(sample: &Sample, tagset: &Tagset) -> Result<TagSequence> {
    encode_mentions(sample, sample.gold.iter(), tagset)
}

fn encode_mentions<'a>(
    sample: &Sample,
    mentions: impl Iterator<Item = &'a Mention>,
    tagset: &Tagset,
) -> Result<TagSequence> {
    let mut tags = vec![0usize; sample.token_count()];
    let mut owner: Vec<Option<&Mention>> = vec![None; sample.token_count()];
    for m in mentions {
        let fail = |reason: String| Error::Encode {
            mention: m.clone(),
            reason,
        };
        let ty = tagset
            .type_index(&m.entity_type)
            .ok_or_else(|| fail("unknown entity type".into()))?;
        let (first, last) = sample
            .token_range(m.begin, m.end)
            .ok_or_else(|| fail("not aligned to token boundaries".into()))?;
        for i in first..=last {
            if let Some(other) = owner[i] {
                return Err(fail(format!("overlaps {other}")));
            }
            owner[i] = Some(m);
            tags[i] = if i == first {
                tagset.begin_tag(ty)
            } else {
                tagset.inside_tag(ty)
            };
        }
    }
    Ok(TagSequence(tags))
}

/// Outcome of [`encode_lenient`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LenientEncoding {
    pub tags: TagSequence,
    /// Gold mentions left out because they overlapped a longer one.
    pub dropped_overlaps: usize,
    /// Gold mentions left out because they did not align with tokens.
    pub dropped_misaligned: usize,
}

/// Greedy longest-first selection of non-overlapping mentions. Ties on length
/// go to the earlier mention in tuple order.
pub fn resolve_overlaps<'a>(
    mentions: impl IntoIterator<Item = &'a Mention>,
) -> (Vec<&'a Mention>, usize) {
    let mut sorted: Vec<&Mention> = mentions.into_iter().collect();
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut kept: Vec<&Mention> = Vec::new();
    let mut dropped = 0;
    for m in sorted {
        if kept.iter().any(|k| k.overlaps(m)) {
            dropped += 1;
        } else {
            kept.push(m);
        }
    }
    kept.sort();
    (kept, dropped)
}

/// Encoding for training the sequence heads: overlapping gold is resolved
/// longest-wins and token-misaligned gold is skipped, with both counted.
pub fn encode_lenient(sample: &Sample, tagset: &Tagset) -> Result<LenientEncoding> {
    let aligned: Vec<&Mention> = sample
        .gold
        .iter()
        .filter(|m| sample.token_range(m.begin, m.end).is_some())
        .collect();
    let dropped_misaligned = sample.gold.len() - aligned.len();
    let (kept, dropped_overlaps) = resolve_overlaps(aligned);
    let tags = encode_mentions(sample, kept.into_iter(), tagset)?;
    Ok(LenientEncoding {
        tags,
        dropped_overlaps,
        dropped_misaligned,
    })
}

/// Converts tags back into mentions over the sample's (possibly windowed)
/// text. A run is `B-t (I-t)*`; an `I-t` that cannot continue the current run
/// opens a new mention of type `t`.
pub fn decode(tags: &TagSequence, sample: &Sample, tagset: &Tagset) -> PredictionSet {
    let mut out = PredictionSet::new();
    let mut open: Option<(usize, usize, usize)> = None; // (type, first, last)
    let mut close = |open: &mut Option<(usize, usize, usize)>| {
        if let Some((ty, first, last)) = open.take() {
            out.insert(sample.mention_for_tokens(&tagset.entity_types()[ty], first, last));
        }
    };
    for (i, &t) in tags.as_slice().iter().enumerate() {
        match tagset.tag(t) {
            Tag::Outside => close(&mut open),
            Tag::Begin(ty) => {
                close(&mut open);
                open = Some((ty, i, i));
            }
            Tag::Inside(ty) => match &mut open {
                Some((cur, _, last)) if *cur == ty => *last = i,
                _ => {
                    close(&mut open);
                    open = Some((ty, i, i));
                }
            },
        }
    }
    close(&mut open);
    out
}
