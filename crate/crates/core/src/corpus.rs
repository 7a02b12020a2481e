//! Samples, mentions and prediction sets, plus the file formats they travel in.
//!
//! All offsets exposed here are character (Unicode scalar) offsets, with
//! `begin` inclusive and `end` exclusive. Token-index pairs used by the heads
//! are converted in [`Sample::token_range`] and [`Sample::char_span`].

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entity occurrence: the `(sample id, type, begin, end)` prediction tuple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub sample_id: String,
    pub entity_type: String,
    pub begin: usize,
    pub end: usize,
}

impl Mention {
    pub fn new(
        sample_id: impl Into<String>,
        entity_type: impl Into<String>,
        begin: usize,
        end: usize,
    ) -> Self {
        Mention {
            sample_id: sample_id.into(),
            entity_type: entity_type.into(),
            begin,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.begin)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shares at least one character with `other` (sample ids ignored).
    pub fn overlaps(&self, other: &Mention) -> bool {
        self.begin < other.end && other.begin < self.end
    }

    /// `other` lies within `self` and the two spans differ.
    pub fn strictly_contains(&self, other: &Mention) -> bool {
        self.begin <= other.begin
            && other.end <= self.end
            && (self.begin, self.end) != (other.begin, other.end)
    }

    pub fn with_type(&self, entity_type: impl Into<String>) -> Mention {
        Mention {
            entity_type: entity_type.into(),
            ..self.clone()
        }
    }
}

impl fmt::Display for Mention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.sample_id, self.entity_type, self.begin, self.end
        )
    }
}

/// A set of mentions. Duplicates collapse; iteration order is the tuple order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    entries: BTreeSet<Mention>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mention: Mention) -> bool {
        self.entries.insert(mention)
    }

    pub fn contains(&self, mention: &Mention) -> bool {
        self.entries.contains(mention)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mention> + '_ {
        self.entries.iter()
    }

    pub fn entries(&self) -> &BTreeSet<Mention> {
        &self.entries
    }

    pub fn extend_from(&mut self, other: &PredictionSet) {
        self.entries.extend(other.entries.iter().cloned());
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.entries.is_subset(&other.entries)
    }

    pub fn intersection(&self, other: &PredictionSet) -> PredictionSet {
        self.entries.intersection(&other.entries).cloned().collect()
    }

    pub fn difference(&self, other: &PredictionSet) -> PredictionSet {
        self.entries.difference(&other.entries).cloned().collect()
    }

    /// Mentions belonging to one sample.
    pub fn for_sample<'a>(&'a self, sample_id: &'a str) -> impl Iterator<Item = &'a Mention> + 'a {
        self.entries
            .iter()
            .filter(move |m| m.sample_id == sample_id)
    }
}

impl FromIterator<Mention> for PredictionSet {
    fn from_iter<I: IntoIterator<Item = Mention>>(iter: I) -> Self {
        PredictionSet {
            entries: iter.into_iter().collect(),
        }
    }
}

impl Extend<Mention> for PredictionSet {
    fn extend<I: IntoIterator<Item = Mention>>(&mut self, iter: I) {
        self.entries.extend(iter)
    }
}

impl IntoIterator for PredictionSet {
    type Item = Mention;
    type IntoIter = std::collections::btree_set::IntoIter<Mention>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.into_iter()
    }
}

impl<'a> IntoIterator for &'a PredictionSet {
    type Item = &'a Mention;
    type IntoIter = std::collections::btree_set::Iter<'a, Mention>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Character extent of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub begin: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(begin: usize, end: usize) -> Self {
        TokenSpan { begin, end }
    }

    fn shifted(self, by: usize) -> Self {
        TokenSpan::new(self.begin + by, self.end + by)
    }
}

/// Document context placed around a sample's core text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub left_text: String,
    pub right_text: String,
    pub core_begin: usize,
    pub core_end: usize,
}

/// Where a sample's text sits inside its source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceContext {
    pub document: String,
    /// Character offset of the sample text within `document`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub tokens: Vec<TokenSpan>,
    pub gold: PredictionSet,
    pub window: Option<ContextWindow>,
    pub source: Option<SourceContext>,
    char_len: usize,
}

impl Sample {
    /// Builds a sample over explicit token spans, checking every invariant.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        tokens: Vec<TokenSpan>,
        gold: impl IntoIterator<Item = Mention>,
    ) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        let char_len = text.chars().count();
        validate_tokens(&tokens, char_len)?;
        let gold: PredictionSet = gold.into_iter().collect();
        for m in &gold {
            if m.sample_id != id {
                return Err(Error::argument(format!(
                    "gold mention {m} does not belong to sample {id}"
                )));
            }
            check_span(m, char_len)?;
        }
        Ok(Sample {
            id,
            text,
            tokens,
            gold,
            window: None,
            source: None,
            char_len,
        })
    }

    /// Builds a sample tokenized with [`tokenize`].
    pub fn from_text(
        id: impl Into<String>,
        text: impl Into<String>,
        gold: impl IntoIterator<Item = Mention>,
    ) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        Sample::new(id, text, tokens, gold)
    }

    /// Convenience for building gold from `(type, begin, end)` triples.
    pub fn with_gold_triples(
        id: impl Into<String>,
        text: impl Into<String>,
        gold: &[(&str, usize, usize)],
    ) -> Result<Self> {
        let id = id.into();
        let mentions: Vec<Mention> = gold
            .iter()
            .map(|&(t, b, e)| Mention::new(id.clone(), t, b, e))
            .collect();
        Sample::from_text(id, text, mentions)
    }

    pub fn char_len(&self) -> usize {
        self.char_len
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Surface strings of every token.
    pub fn token_texts(&self) -> Vec<&str> {
        let offsets = byte_offsets(&self.text);
        self.tokens
            .iter()
            .map(|t| &self.text[offsets[t.begin]..offsets[t.end]])
            .collect()
    }

    /// Substring by character offsets.
    pub fn slice(&self, begin: usize, end: usize) -> &str {
        char_slice(&self.text, begin, end)
    }

    /// Character span covered by the inclusive token range `first..=last`.
    pub fn char_span(&self, first: usize, last: usize) -> (usize, usize) {
        (self.tokens[first].begin, self.tokens[last].end)
    }

    /// Inclusive token range whose boundaries coincide exactly with the
    /// character span, if any.
    pub fn token_range(&self, begin: usize, end: usize) -> Option<(usize, usize)> {
        let first = self.tokens.binary_search_by_key(&begin, |t| t.begin).ok()?;
        let last = self.tokens.binary_search_by_key(&end, |t| t.end).ok()?;
        (first <= last).then_some((first, last))
    }

    /// Builds a mention on this sample from an inclusive token range.
    pub fn mention_for_tokens(&self, entity_type: &str, first: usize, last: usize) -> Mention {
        let (begin, end) = self.char_span(first, last);
        Mention::new(self.id.clone(), entity_type, begin, end)
    }
}

fn check_span(m: &Mention, char_len: usize) -> Result<()> {
    if m.begin >= m.end || m.end > char_len {
        return Err(Error::argument(format!(
            "mention {m} is outside the text bounds 0..{char_len}"
        )));
    }
    Ok(())
}

fn validate_tokens(tokens: &[TokenSpan], char_len: usize) -> Result<()> {
    let mut prev_end = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.begin >= t.end || t.end > char_len {
            return Err(Error::argument(format!(
                "token {i} ({}, {}) is empty or outside 0..{char_len}",
                t.begin, t.end
            )));
        }
        if i > 0 && t.begin < prev_end {
            return Err(Error::argument(format!(
                "token {i} ({}, {}) overlaps or precedes its predecessor",
                t.begin, t.end
            )));
        }
        prev_end = t.end;
    }
    Ok(())
}

/// Byte offset of every char boundary, including the end of the string.
pub(crate) fn byte_offsets(text: &str) -> Vec<usize> {
    let mut offsets: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
    offsets.push(text.len());
    offsets
}

/// Substring by character offsets. Panics if the offsets are out of range.
pub fn char_slice(text: &str, begin: usize, end: usize) -> &str {
    let mut it = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()));
    let b = it.nth(begin).expect("begin offset out of range");
    let e = if end == begin {
        b
    } else {
        it.nth(end - begin - 1).expect("end offset out of range")
    };
    &text[b..e]
}

/// Whitespace and punctuation splitting: runs of alphanumeric characters form
/// tokens, every other non-whitespace character is a token of its own.
pub fn tokenize(text: &str) -> Vec<TokenSpan> {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            run_start.get_or_insert(pos);
        } else {
            if let Some(start) = run_start.take() {
                tokens.push(TokenSpan::new(start, pos));
            }
            if !c.is_whitespace() {
                tokens.push(TokenSpan::new(pos, pos + 1));
            }
        }
        pos += 1;
    }
    if let Some(start) = run_start {
        tokens.push(TokenSpan::new(start, pos));
    }
    tokens
}

/// Surrounds a sample with up to `size` characters of document context on
/// each side. Gold mentions are re-based onto the windowed text; the core's
/// tokens are kept and the context regions are tokenized with [`tokenize`].
pub fn apply_window(sample: &Sample, source: &SourceContext, size: i64) -> Result<Sample> {
    if size < 0 {
        return Err(Error::argument(format!(
            "window size must be >= 0, got {size}"
        )));
    }
    let size = size as usize;
    let doc_len = source.document.chars().count();
    let core_len = sample.char_len;
    if source.offset + core_len > doc_len
        || char_slice(&source.document, source.offset, source.offset + core_len) != sample.text
    {
        return Err(Error::argument(format!(
            "document context does not contain sample {} at offset {}",
            sample.id, source.offset
        )));
    }
    let left_begin = source.offset.saturating_sub(size);
    let right_end = (source.offset + core_len + size).min(doc_len);
    let left_text = char_slice(&source.document, left_begin, source.offset).to_string();
    let right_text = char_slice(&source.document, source.offset + core_len, right_end).to_string();
    let shift = source.offset - left_begin;

    let mut tokens = tokenize(&left_text);
    tokens.extend(sample.tokens.iter().map(|t| t.shifted(shift)));
    tokens.extend(
        tokenize(&right_text)
            .into_iter()
            .map(|t| t.shifted(shift + core_len)),
    );

    let text = format!("{left_text}{}{right_text}", sample.text);
    let gold: Vec<Mention> = sample
        .gold
        .iter()
        .map(|m| Mention {
            begin: m.begin + shift,
            end: m.end + shift,
            ..m.clone()
        })
        .collect();
    let mut windowed = Sample::new(sample.id.clone(), text, tokens, gold)?;
    windowed.window = Some(ContextWindow {
        left_text,
        right_text,
        core_begin: shift,
        core_end: shift + core_len,
    });
    windowed.source = sample.source.clone();
    Ok(windowed)
}

/// Windows every sample that carries a [`SourceContext`]; others pass through.
pub fn window_samples(samples: &[Sample], size: i64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| match &s.source {
            Some(src) => apply_window(s, src, size),
            None => Ok(s.clone()),
        })
        .collect()
}

/// Keeps this sample's mentions lying fully inside the core text and maps
/// them back to core coordinates. Samples without a window pass their
/// mentions through unchanged.
pub fn restrict_to_core(preds: &PredictionSet, sample: &Sample) -> PredictionSet {
    let own = preds.for_sample(&sample.id);
    match &sample.window {
        None => own.cloned().collect(),
        Some(w) => own
            .filter(|m| m.begin >= w.core_begin && m.end <= w.core_end)
            .map(|m| Mention {
                begin: m.begin - w.core_begin,
                end: m.end - w.core_begin,
                ..m.clone()
            })
            .collect(),
    }
}

/// Gold mentions of all samples, in original (core) coordinates.
pub fn gold_set(samples: &[Sample]) -> PredictionSet {
    let mut all = PredictionSet::new();
    for s in samples {
        all.extend_from(&restrict_to_core(&s.gold, s));
    }
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One `token<TAB>BIO-tag` pair per line, blank line between samples,
    /// optional `# id = ...` line heading each sample.
    TsvTokens,
    /// One JSON object per line.
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv-tokens" | "tsv" => Ok(CorpusFormat::TsvTokens),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::argument(format!("unknown corpus format {other:?}"))),
        }
    }
}

impl CorpusFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("conll") | Some("iob") => CorpusFormat::TsvTokens,
            _ => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    gold: Vec<(String, usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    document: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<usize>,
}

impl SampleRecord {
    fn into_sample(self) -> Result<Sample> {
        let gold: Vec<Mention> = self
            .gold
            .into_iter()
            .map(|(t, b, e)| Mention::new(self.id.clone(), t, b, e))
            .collect();
        let mut sample = match self.tokens {
            Some(tokens) => Sample::new(
                self.id,
                self.text,
                tokens
                    .into_iter()
                    .map(|(b, e)| TokenSpan::new(b, e))
                    .collect(),
                gold,
            )?,
            None => Sample::from_text(self.id, self.text, gold)?,
        };
        sample.source = match (self.document, self.offset) {
            (Some(document), Some(offset)) => Some(SourceContext { document, offset }),
            (None, None) => None,
            _ => {
                return Err(Error::argument(
                    "`document` and `offset` must appear together",
                ))
            }
        };
        Ok(sample)
    }
}

pub fn load_samples(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    match format {
        CorpusFormat::Jsonl => read_jsonl(reader, path),
        CorpusFormat::TsvTokens => read_tsv_tokens(reader, path),
    }
}

fn parse_error(path: &Path, line: usize, message: impl fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e))?;
        samples.push(
            record
                .into_sample()
                .map_err(|e| parse_error(path, i + 1, e))?,
        );
    }
    Ok(samples)
}

fn read_tsv_tokens(reader: impl BufRead, path: &Path) -> Result<Vec<Sample>> {
    struct Pending {
        id: Option<String>,
        start_line: usize,
        words: Vec<String>,
        tags: Vec<(Option<bool>, String)>,
    }

    fn finish(p: Pending, index: usize, path: &Path) -> Result<Sample> {
        let id = p.id.unwrap_or_else(|| format!("sample-{index}"));
        let mut text = String::new();
        let mut tokens = Vec::with_capacity(p.words.len());
        let mut pos = 0;
        for (i, w) in p.words.iter().enumerate() {
            if i > 0 {
                text.push(' ');
                pos += 1;
            }
            let len = w.chars().count();
            tokens.push(TokenSpan::new(pos, pos + len));
            text.push_str(w);
            pos += len;
        }
        // BIO runs to mentions; a stray I- opens a new mention.
        let mut gold = Vec::new();
        let mut open: Option<(String, usize, usize)> = None;
        for (i, (kind, ty)) in p.tags.iter().enumerate() {
            match kind {
                None => {
                    gold.extend(open.take());
                }
                Some(true) => {
                    gold.extend(open.take());
                    open = Some((ty.clone(), i, i));
                }
                Some(false) => match &mut open {
                    Some((t, _, last)) if t == ty => *last = i,
                    _ => {
                        gold.extend(open.take());
                        open = Some((ty.clone(), i, i));
                    }
                },
            }
        }
        gold.extend(open);
        let mentions: Vec<Mention> = gold
            .into_iter()
            .map(|(t, f, l)| Mention::new(id.clone(), t, tokens[f].begin, tokens[l].end))
            .collect();
        Sample::new(id, text, tokens, mentions).map_err(|e| parse_error(path, p.start_line, e))
    }

    let mut samples = Vec::new();
    let mut pending: Option<Pending> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            if let Some(p) = pending.take() {
                let n = samples.len();
                samples.push(finish(p, n, path)?);
            }
            continue;
        }
        let p = pending.get_or_insert_with(|| Pending {
            id: None,
            start_line: lineno,
            words: Vec::new(),
            tags: Vec::new(),
        });
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some(id) = rest.trim().strip_prefix("id =") {
                p.id = Some(id.trim().to_string());
            }
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (word, tag) = match (fields.next(), fields.next(), fields.next()) {
            (Some(w), Some(t), None) if !w.is_empty() => (w, t),
            _ => return Err(parse_error(path, lineno, "expected `token<TAB>tag`")),
        };
        if word.chars().any(char::is_whitespace) {
            return Err(parse_error(path, lineno, "token contains whitespace"));
        }
        let parsed = match tag {
            "O" => (None, String::new()),
            t => match t.split_once('-') {
                Some(("B", ty)) if !ty.is_empty() => (Some(true), ty.to_string()),
                Some(("I", ty)) if !ty.is_empty() => (Some(false), ty.to_string()),
                _ => return Err(parse_error(path, lineno, format!("bad BIO tag {t:?}"))),
            },
        };
        p.words.push(word.to_string());
        p.tags.push(parsed);
    }
    if let Some(p) = pending.take() {
        let n = samples.len();
        samples.push(finish(p, n, path)?);
    }
    Ok(samples)
}

/// Writes samples as JSONL with explicit token spans.
pub fn write_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        let record = SampleRecord {
            id: s.id.clone(),
            text: s.text.clone(),
            tokens: Some(s.tokens.iter().map(|t| (t.begin, t.end)).collect()),
            gold: s
                .gold
                .iter()
                .map(|m| (m.entity_type.clone(), m.begin, m.end))
                .collect(),
            document: s.source.as_ref().map(|c| c.document.clone()),
            offset: s.source.as_ref().map(|c| c.offset),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a prediction TSV: `sample_id<TAB>entity_type<TAB>begin<TAB>end`.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut preds = PredictionSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let offset = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| {
                parse_error(
                    path,
                    i + 1,
                    format!("{what} offset {s:?} is not an integer"),
                )
            })
        };
        let begin = offset(fields[2], "begin")?;
        let end = offset(fields[3], "end")?;
        if begin >= end {
            return Err(parse_error(
                path,
                i + 1,
                format!("empty span {begin}..{end}"),
            ));
        }
        preds.insert(Mention::new(fields[0], fields[1], begin, end));
    }
    Ok(preds)
}

pub fn write_predictions(preds: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_predictions_to(preds, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_predictions_to(preds: &PredictionSet, out: &mut impl Write) -> Result<()> {
    for m in preds {
        let bad = |s: &str| s.is_empty() || s.contains(['\t', '\n', '\r']);
        if bad(&m.sample_id) || bad(&m.entity_type) {
            return Err(Error::argument(format!(
                "mention {m} has an id or type that cannot be written as TSV"
            )));
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            m.sample_id, m.entity_type, m.begin, m.end
        )?;
    }
    Ok(())
}
