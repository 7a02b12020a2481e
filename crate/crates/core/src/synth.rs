//! Gazetteer-driven synthetic corpora with two entity types, optional nesting
//! and filler noise.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Mention, PredictionSet, Sample};
use crate::error::{Error, Result};

pub const DISEASE: &str = "disease";
pub const GENE: &str = "gene";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Share of samples whose disease mention contains a gene mention.
    pub nested_frac: f64,
    /// Per-gap probability of inserting a filler word between template tokens.
    pub noise: f64,
    /// Entries per entity type.
    pub gazetteer_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 2000,
            validation: 500,
            test: 500,
            nested_frac: 0.1,
            noise: 0.05,
            gazetteer_size: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gazetteer {
    pub diseases: Vec<String>,
    pub genes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub gazetteer: Gazetteer,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const DISEASE_ENDINGS: &[&str] = &["itis", "osis", "emia", "pathy", "algia", "oma"];
const MODIFIERS: &[&str] = &["acute", "chronic", "familial", "juvenile", "hereditary"];
const NESTED_LINKS: &[&str] = &[
    "deficiency",
    "-associated neuropathy",
    "-related myopathy",
    "syndrome",
];
const FILLERS: &[&str] = &[
    "notably", "however", "recently", "overall", "again", "indeed",
];

const TEMPLATES_BOTH: &[&str] = &[
    "Patients with {D} were screened for {G} variants .",
    "The {G} locus was linked to {D} in this cohort .",
    "No association between {G} and {D} was found .",
    "Carriers of {G} mutations rarely develop {D} .",
    "In {D} , loss of {G} is common .",
];
const TEMPLATES_DISEASE: &[&str] = &[
    "We observed {D} in two siblings .",
    "{D} was diagnosed after a routine visit .",
    "The clinic reported three cases of {D} this year .",
];
const TEMPLATES_GENE: &[&str] = &[
    "Expression of {G} was elevated .",
    "Samples were sequenced to examine {G} .",
    "{G} knockout mice showed no phenotype .",
];
const TEMPLATES_NESTED: &[&str] = &[
    "Children with {N} were referred to the clinic .",
    "{N} remains poorly understood .",
    "The family history included {N} .",
];

fn syllables(rng: &mut impl Rng, count: usize) -> String {
    (0..count)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS.choose(rng).unwrap(),
                VOWELS.choose(rng).unwrap()
            )
        })
        .collect()
}

fn unique(
    rng: &mut ChaCha8Rng,
    size: usize,
    taken: &mut BTreeSet<String>,
    mut make: impl FnMut(&mut ChaCha8Rng) -> String,
) -> Vec<String> {
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let name = make(rng);
        if taken.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

impl Gazetteer {
    pub fn generate(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut taken = BTreeSet::new();
        let diseases = unique(rng, size, &mut taken, |rng| {
            let n = rng.random_range(1..=2);
            let root = format!(
                "{}{}",
                syllables(rng, n),
                DISEASE_ENDINGS.choose(rng).unwrap()
            );
            if rng.random_bool(0.4) {
                format!("{} {root}", MODIFIERS.choose(rng).unwrap())
            } else {
                root
            }
        });
        let genes = unique(rng, size, &mut taken, |rng| {
            let letters: String = (0..rng.random_range(2..=4))
                .map(|_| rng.random_range(b'A'..=b'Z') as char)
                .collect();
            format!("{letters}{}", rng.random_range(1..20))
        });
        Gazetteer { diseases, genes }
    }
}

struct Builder {
    text: String,
    chars: usize,
    gold: Vec<(String, usize, usize)>,
}

impl Builder {
    fn push_word(&mut self, word: &str) -> usize {
        if !self.text.is_empty() {
            self.text.push(' ');
            self.chars += 1;
        }
        let start = self.chars;
        self.text.push_str(word);
        self.chars += word.chars().count();
        start
    }
}

fn render_sample(
    id: String,
    template: &str,
    gaz: &Gazetteer,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let mut b = Builder {
        text: String::new(),
        chars: 0,
        gold: Vec::new(),
    };
    for (i, word) in template.split(' ').enumerate() {
        if i > 0 && rng.random_bool(noise) {
            b.push_word(FILLERS.choose(rng).unwrap());
        }
        match word {
            "{D}" => {
                let name = gaz.diseases.choose(rng).unwrap();
                let start = b.push_word(name);
                b.gold.push((DISEASE.into(), start, b.chars));
            }
            "{G}" => {
                let name = gaz.genes.choose(rng).unwrap();
                let start = b.push_word(name);
                b.gold.push((GENE.into(), start, b.chars));
            }
            "{N}" => {
                let gene = gaz.genes.choose(rng).unwrap();
                let link = NESTED_LINKS.choose(rng).unwrap();
                let outer = if link.starts_with('-') {
                    format!("{gene}{link}")
                } else {
                    format!("{gene} {link}")
                };
                let start = b.push_word(&outer);
                b.gold.push((DISEASE.into(), start, b.chars));
                let gene_len = gene.chars().count();
                b.gold.push((GENE.into(), start, start + gene_len));
            }
            other => {
                b.push_word(other);
            }
        }
    }
    let gold: Vec<Mention> = b
        .gold
        .into_iter()
        .map(|(t, s, e)| Mention::new(id.clone(), t, s, e))
        .collect();
    Sample::from_text(id, b.text, gold)
}

fn split(
    prefix: &str,
    count: usize,
    config: &SynthConfig,
    gaz: &Gazetteer,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    // Fixed nested count per split, shuffled into place.
    let nested = (count as f64 * config.nested_frac).round() as usize;
    let mut kinds: Vec<bool> = (0..count).map(|i| i < nested).collect();
    kinds.shuffle(rng);
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, is_nested)| {
            let template = if is_nested {
                TEMPLATES_NESTED.choose(rng).unwrap()
            } else {
                let r: f64 = rng.random();
                let pool = if r < 0.6 {
                    TEMPLATES_BOTH
                } else if r < 0.8 {
                    TEMPLATES_DISEASE
                } else {
                    TEMPLATES_GENE
                };
                pool.choose(rng).unwrap()
            };
            render_sample(format!("{prefix}-{i:05}"), template, gaz, config.noise, rng)
        })
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if !(0.0..=1.0).contains(&config.nested_frac) {
        return Err(Error::argument("nested fraction must be in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&config.noise) {
        return Err(Error::argument("noise must be in [0, 1]"));
    }
    if config.gazetteer_size == 0 {
        return Err(Error::argument("gazetteer size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gazetteer = Gazetteer::generate(config.gazetteer_size, &mut rng);
    let train = split("train", config.train, config, &gazetteer, &mut rng)?;
    let validation = split("val", config.validation, config, &gazetteer, &mut rng)?;
    let test = split("test", config.test, config, &gazetteer, &mut rng)?;
    Ok(SynthCorpus {
        gazetteer,
        train,
        validation,
        test,
    })
}

/// Gold mentions strictly contained in another gold mention of the same sample.
pub fn inner_mentions(gold: &PredictionSet) -> PredictionSet {
    gold.iter()
        .filter(|m| {
            gold.for_sample(&m.sample_id)
                .any(|o| o.strictly_contains(m))
        })
        .cloned()
        .collect()
}

/// Gold mentions taking part in any nesting, as container or contained.
pub fn nested_mentions(gold: &PredictionSet) -> PredictionSet {
    gold.iter()
        .filter(|m| {
            gold.for_sample(&m.sample_id)
                .any(|o| o.strictly_contains(m) || m.strictly_contains(o))
        })
        .cloned()
        .collect()
}

/// Adds, for a seeded `frac` of `preds`, a copy relabeled with a different
/// type from `types`. Returns the augmented set and the added mentions that
/// were not already present.
pub fn inject_type_confusion(
    preds: &PredictionSet,
    types: &[&str],
    frac: f64,
    seed: u64,
) -> Result<(PredictionSet, PredictionSet)> {
    if types.len() < 2 {
        return Err(Error::argument("type confusion needs at least two types"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<&Mention> = preds.iter().collect();
    let count = (items.len() as f64 * frac).round() as usize;
    let chosen: Vec<&&Mention> = items.choose_multiple(&mut rng, count).collect();
    let mut out = preds.clone();
    let mut injected = PredictionSet::new();
    for m in chosen {
        let others: Vec<&&str> = types.iter().filter(|t| **t != m.entity_type).collect();
        let fake = m.with_type(**others.choose(&mut rng).unwrap());
        if out.insert(fake.clone()) {
            injected.insert(fake);
        }
    }
    Ok((out, injected))
}
