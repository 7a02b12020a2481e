//! Binary model checkpoints.
//!
//! Layout: the magic `NFCKPT1`, a little-endian u32 header length, a JSON
//! header naming the model kind, tagset, width and encoder, then every
//! parameter tensor as little-endian f64 in a fixed order (head tensors,
//! then the toy encoder's specials and table).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::bio::Tagset;
use crate::crf_head::CrfParams;
use crate::encoder::{EmbeddingStore, TokenEncoder, ToyEncoderConfig, ToyEncoderParams};
use crate::error::{Error, Result};
use crate::meta::MetaModel;
use crate::model::{Head, ModelKind, NerModel, ParamsMut};
use crate::seq_head::SeqHeadParams;
use crate::span_head::{SpanConfig, SpanHeadParams};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"NFCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSpec {
    Toy(ToyEncoderConfig),
    External { dim: usize },
}

impl EncoderSpec {
    pub fn of(encoder: &TokenEncoder) -> Self {
        match encoder {
            TokenEncoder::Toy(p) => EncoderSpec::Toy(p.config),
            TokenEncoder::External(s) => EncoderSpec::External { dim: s.dim },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EncoderSpec::Toy(c) => c.dim,
            EncoderSpec::External { dim } => *dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    /// Empty for the meta classifier.
    pub entity_types: Vec<String>,
    pub dim: usize,
    pub encoder: EncoderSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<SpanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Element count of each tensor, in storage order.
    pub tensor_lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Checkpoint {
    Ner(NerModel),
    Meta(MetaModel),
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        match self {
            Checkpoint::Ner(m) => m.kind(),
            Checkpoint::Meta(_) => ModelKind::Meta,
        }
    }
}

fn write_tensors(path: &Path, header: &CheckpointHeader, tensors: &[&[f64]]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    let json = serde_json::to_vec(header)?;
    out.write_u32::<LittleEndian>(json.len() as u32)?;
    out.write_all(&json)?;
    for t in tensors {
        for &v in *t {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn toy_tensors<'a>(encoder: &'a TokenEncoder, tensors: &mut Vec<&'a [f64]>) {
    if let Some(toy) = encoder.toy() {
        tensors.push(toy.begin.as_slice().expect("standard layout"));
        tensors.push(toy.end.as_slice().expect("standard layout"));
        tensors.push(toy.table.as_slice().expect("standard layout"));
    }
}

pub fn save_ner(model: &NerModel, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors: Vec<&[f64]> = match &model.head {
        Head::Seq(p) => vec![p.weight.as_slice().unwrap(), p.bias.as_slice().unwrap()],
        Head::Crf(p) => vec![
            p.emission.weight.as_slice().unwrap(),
            p.emission.bias.as_slice().unwrap(),
            p.transitions.as_slice().unwrap(),
            p.start.as_slice().unwrap(),
            p.end.as_slice().unwrap(),
        ],
        Head::Span(p) => vec![p.weight.as_slice().unwrap(), p.bias.as_slice().unwrap()],
    };
    toy_tensors(&model.encoder, &mut tensors);
    let header = CheckpointHeader {
        kind: model.kind(),
        entity_types: model.tagset.entity_types().to_vec(),
        dim: model.encoder.dim(),
        encoder: EncoderSpec::of(&model.encoder),
        span: Some(model.span_config),
        threshold: None,
        tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
    };
    write_tensors(path.as_ref(), &header, &tensors)
}

pub fn save_meta(model: &MetaModel, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors: Vec<&[f64]> = vec![
        model.head.weight.as_slice().unwrap(),
        model.head.bias.as_slice().unwrap(),
    ];
    toy_tensors(&model.encoder, &mut tensors);
    let header = CheckpointHeader {
        kind: ModelKind::Meta,
        entity_types: Vec::new(),
        dim: model.encoder.dim(),
        encoder: EncoderSpec::of(&model.encoder),
        span: None,
        threshold: Some(model.threshold),
        tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
    };
    write_tensors(path.as_ref(), &header, &tensors)
}

pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let mut input = BufReader::new(File::open(path)?);
    read_header_from(&mut input, path)
}

fn read_header_from(input: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let ctx = || path.display().to_string();
    let mut magic = [0u8; 7];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::format(ctx(), "file too short for a checkpoint"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(ctx(), "not a checkpoint (bad magic)"));
    }
    let len = input.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    serde_json::from_slice(&json).map_err(|e| Error::format(ctx(), format!("bad header: {e}")))
}

fn build_encoder(
    spec: &EncoderSpec,
    store: Option<Arc<EmbeddingStore>>,
    ctx: &str,
) -> Result<TokenEncoder> {
    match spec {
        EncoderSpec::Toy(config) => Ok(TokenEncoder::Toy(ToyEncoderParams::new(*config, 0)?)),
        EncoderSpec::External { dim } => {
            let store = store.ok_or_else(|| {
                Error::argument(format!(
                    "{ctx} was trained on external embeddings; an embedding file is required"
                ))
            })?;
            if store.dim != *dim {
                return Err(Error::argument(format!(
                    "{ctx} expects embedding width {dim}, embedding file has {}",
                    store.dim
                )));
            }
            Ok(TokenEncoder::External(store))
        }
    }
}

fn fill(
    params: ParamsMut<'_>,
    header: &CheckpointHeader,
    input: &mut impl Read,
    ctx: &str,
) -> Result<()> {
    let mut slots = params.dense;
    if let Some((table, _)) = params.table {
        slots.push(table);
    }
    let lengths: Vec<usize> = slots.iter().map(|s| s.len()).collect();
    if lengths != header.tensor_lengths {
        return Err(Error::format(
            ctx,
            format!(
                "tensor sizes {:?} do not match header {:?}",
                lengths, header.tensor_lengths
            ),
        ));
    }
    for slot in slots {
        input
            .read_f64_into::<LittleEndian>(slot)
            .map_err(|_| Error::format(ctx, "truncated parameter data"))?;
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::format(ctx, "trailing bytes after parameters"));
    }
    Ok(())
}

/// Loads a checkpoint. Models trained on external embeddings need the store.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    store: Option<Arc<EmbeddingStore>>,
) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut input = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut input, path)?;
    if header.dim != header.encoder.dim() {
        return Err(Error::format(&ctx, "header width disagrees with encoder"));
    }
    let encoder = build_encoder(&header.encoder, store, &ctx)?;
    let d = header.dim;
    if header.kind == ModelKind::Meta {
        let threshold = header.threshold.unwrap_or(crate::meta::DEFAULT_THRESHOLD);
        let mut model = MetaModel {
            encoder,
            head: SeqHeadParams::zeros(2, d),
            threshold,
        };
        fill(model.params_mut(), &header, &mut input, &ctx)?;
        return Ok(Checkpoint::Meta(model));
    }
    let tagset = Tagset::new(header.entity_types.iter().map(String::as_str))?;
    let head = match header.kind {
        ModelKind::Seq => Head::Seq(SeqHeadParams::zeros(tagset.num_tags(), d)),
        ModelKind::Crf => Head::Crf(CrfParams::zeros(tagset.num_tags(), d)),
        ModelKind::Span => Head::Span(SpanHeadParams::zeros(tagset.num_types(), d)),
        ModelKind::Meta => unreachable!(),
    };
    let mut model = NerModel {
        tagset,
        encoder,
        head,
        span_config: header.span.unwrap_or_default(),
    };
    fill(model.params_mut(), &header, &mut input, &ctx)?;
    Ok(Checkpoint::Ner(model))
}
