//! Strict micro precision, recall and F1: a prediction counts only when all
//! four tuple fields equal a gold mention.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::PredictionSet;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Derives the rates from counts; every zero denominator yields 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={:.4} R={:.4} F1={:.4} TP={} FP={} FN={}",
            self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }
}

pub fn score(gold: &PredictionSet, pred: &PredictionSet) -> Metrics {
    let tp = pred.iter().filter(|m| gold.contains(m)).count();
    Metrics::from_counts(tp, pred.len() - tp, gold.len() - tp)
}

/// Metrics restricted to each entity type seen in gold or predictions.
pub fn score_by_type(gold: &PredictionSet, pred: &PredictionSet) -> BTreeMap<String, Metrics> {
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for m in pred {
        let c = counts.entry(m.entity_type.clone()).or_default();
        if gold.contains(m) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for m in gold {
        if !pred.contains(m) {
            counts.entry(m.entity_type.clone()).or_default().2 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(t, (tp, fp, fn_))| (t, Metrics::from_counts(tp, fp, fn_)))
        .collect()
}

/// Report line followed, when requested, by a per-type table.
pub fn render_report(gold: &PredictionSet, pred: &PredictionSet, per_type: bool) -> String {
    let mut out = format!("{}\n", score(gold, pred));
    if per_type {
        out.push_str("type\tP\tR\tF1\tTP\tFP\tFN\n");
        for (t, m) in score_by_type(gold, pred) {
            out.push_str(&format!(
                "{t}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\n",
                m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;
    use proptest::prelude::*;

    fn set(ms: &[(&str, usize)]) -> PredictionSet {
        ms.iter()
            .map(|&(t, b)| Mention::new("s", t, b, b + 1))
            .collect()
    }

    #[test]
    fn two_of_three() {
        let m = score(
            &set(&[("a", 0), ("a", 1), ("a", 2)]),
            &set(&[("a", 0), ("a", 1), ("b", 2)]),
        );
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_and_empty() {
        let g = set(&[("a", 0), ("b", 3)]);
        let m = score(&g, &g);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = score(&g, &PredictionSet::new());
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let m = score(&PredictionSet::new(), &PredictionSet::new());
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn off_by_one_is_wrong() {
        let g: PredictionSet = [Mention::new("s", "a", 8, 11)].into_iter().collect();
        let p: PredictionSet = [Mention::new("s", "a", 8, 12)].into_iter().collect();
        assert_eq!(score(&g, &p).tp, 0);
    }

    #[test]
    fn report_format() {
        let g = set(&[("a", 0), ("a", 1), ("a", 2)]);
        let p = set(&[("a", 0), ("a", 1), ("b", 2)]);
        let report = render_report(&g, &p, true);
        let mut lines = report.lines();
        assert_eq!(
            lines.next().unwrap(),
            "P=0.6667 R=0.6667 F1=0.6667 TP=2 FP=1 FN=1"
        );
        assert_eq!(lines.next().unwrap(), "type\tP\tR\tF1\tTP\tFP\tFN");
        assert_eq!(lines.next().unwrap(), "a\t1.0000\t0.6667\t0.8000\t2\t0\t1");
        assert_eq!(lines.next().unwrap(), "b\t0.0000\t0.0000\t0.0000\t0\t1\t0");
    }

    fn arb_set() -> impl Strategy<Value = PredictionSet> {
        proptest::collection::vec((0usize..3, 0usize..30), 0..25).prop_map(|v| {
            v.into_iter()
                .map(|(t, b)| Mention::new("s", format!("t{t}"), b, b + 2))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn counts_and_symmetry(g in arb_set(), p in arb_set()) {
            let m = score(&g, &p);
            prop_assert_eq!(m.tp + m.fp, p.len());
            prop_assert_eq!(m.tp + m.fn_, g.len());
            let swapped = score(&p, &g);
            prop_assert_eq!(m.precision, swapped.recall);
            prop_assert_eq!(m.recall, swapped.precision);
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }
}
