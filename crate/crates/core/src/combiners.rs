//! Weight-free combiners over prediction sets. Votes count exact tuple
//! equality only.

use std::collections::BTreeMap;

use crate::corpus::{Mention, PredictionSet};
use crate::error::{Error, Result};

pub fn union(systems: &[PredictionSet]) -> Result<PredictionSet> {
    if systems.is_empty() {
        return Err(Error::argument("union needs at least one system"));
    }
    let mut out = PredictionSet::new();
    for s in systems {
        out.extend_from(s);
    }
    Ok(out)
}

/// Keeps mentions emitted by more than `⌊n/2⌋` of the `n` systems. For even
/// `n` this is a strict majority; with two systems it is the intersection.
pub fn majority_vote(systems: &[PredictionSet]) -> Result<PredictionSet> {
    if systems.is_empty() {
        return Err(Error::argument("majority vote needs at least one system"));
    }
    let threshold = systems.len() / 2;
    let mut votes: BTreeMap<&Mention, usize> = BTreeMap::new();
    for s in systems {
        for m in s {
            *votes.entry(m).or_default() += 1;
        }
    }
    Ok(votes
        .into_iter()
        .filter(|&(_, v)| v > threshold)
        .map(|(m, _)| m.clone())
        .collect())
}
