//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nerkit::bio::{decode, encode};
use nerkit::checkpoint::{load_checkpoint, save_ner, Checkpoint};
use nerkit::corpus::gold_set;
use nerkit::crf_head::{crf_log_partition, crf_sample_grad, crf_viterbi_path, CrfParams};
use nerkit::meta::{build_training_set, meta_filter, CapturedEpoch, MetaInstance};
use nerkit::model::{Gradients, ParamsMut};
use nerkit::seq_head::{seq_sample_grad, SeqHeadParams};
use nerkit::span_head::{
    enumerate_spans, span_count, span_sample_grad, SpanCandidate, SpanHeadParams,
};
use nerkit::synth::{
    self, inject_type_confusion, inner_mentions, nested_mentions, SynthConfig, DISEASE, GENE,
};
use nerkit::trainer::{Evaluation, TrainOutcome, Trainable};
use nerkit::{
    majority_vote, score, train, union, EmbeddingMatrix, Execution, Mention, MetaModel, ModelKind,
    NerModel, PredictionSet, Sample, SpanConfig, TagSequence, Tagset, TokenEncoder,
    ToyEncoderConfig, ToyEncoderParams, TrainConfig,
};

const TOL_EXACT: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- CRF

fn random_crf(rng: &mut ChaCha8Rng, k: usize) -> CrfParams {
    let mut p = CrfParams::zeros(k, 1);
    p.transitions = Array2::from_shape_simple_fn((k, k), || rng.random_range(-3.0..3.0));
    p.start = Array1::from_shape_simple_fn(k, || rng.random_range(-3.0..3.0));
    p.end = Array1::from_shape_simple_fn(k, || rng.random_range(-3.0..3.0));
    p
}

/// Every tag path of length n over k tags, with its score.
fn all_path_scores(em: &Array2<f64>, p: &CrfParams) -> Vec<f64> {
    let (n, k) = em.dim();
    let mut out = Vec::with_capacity(k.pow(n as u32));
    let mut path = vec![0usize; n];
    loop {
        let mut s = p.start[path[0]] + p.end[path[n - 1]];
        for i in 0..n {
            s += em[[i, path[i]]];
            if i > 0 {
                s += p.transitions[[path[i - 1], path[i]]];
            }
        }
        out.push(s);
        let mut i = 0;
        loop {
            if i == n {
                return out;
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn crf_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=5);
        let p = random_crf(&mut rng, k);
        let em = Array2::from_shape_simple_fn((n, k), || rng.random_range(-3.0..3.0));
        let scores = all_path_scores(&em, &p);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let oracle_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let z = crf_log_partition(em.view(), &p).unwrap();
        let path = crf_viterbi_path(em.view(), &p).unwrap();
        let mut vs = p.start[path[0]] + p.end[path[n - 1]];
        for i in 0..n {
            vs += em[[i, path[i]]];
            if i > 0 {
                vs += p.transitions[[path[i - 1], path[i]]];
            }
        }
        worst_z = worst_z.max((z - oracle_z).abs());
        worst_v = worst_v.max((vs - max).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst_z <= TOL_EXACT && worst_v <= TOL_EXACT && elapsed < Duration::from_secs(10),
        format!("200 instances, max |logZ err| {worst_z:.2e}, max |viterbi err| {worst_v:.2e} (tol {TOL_EXACT:.0e}), {elapsed:.2?} (limit 10s)"),
    )
}

// ---------------------------------------------------------------- gradients

/// Relative error between analytic and numeric gradient vectors:
/// `||a - n|| / max(||a||, ||n||)`, or the absolute norm when both are tiny.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `loss` with respect to every element of `x`.
fn numeric_grad(x: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = loss(x);
            x[i] = orig - FD_STEP;
            let down = loss(x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_emb(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n + 2, d), || rng.random_range(-1.0..1.0))
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

fn emb(a: &[f64], n: usize, d: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::new(Array2::from_shape_vec((n + 2, d), a.to_vec()).unwrap()).unwrap()
}

fn seq_instance(rng: &mut ChaCha8Rng) -> f64 {
    let types = rng.random_range(1..=2);
    let tagset = Tagset::new((0..types).map(|i| format!("t{i}"))).unwrap();
    let k = tagset.num_tags();
    let (n, d) = (rng.random_range(1..=5), rng.random_range(1..=4));
    let tags = TagSequence::new((0..n).map(|_| rng.random_range(0..k)).collect(), &tagset).unwrap();
    let params = SeqHeadParams {
        weight: random_matrix(rng, k, d),
        bias: Array1::from_shape_simple_fn(k, || rng.random_range(-1.0..1.0)),
    };
    let mut e = random_emb(rng, n, d).into_raw_vec_and_offset().0;
    let (_, g, d_emb) = seq_sample_grad(&emb(&e, n, d), &params, &tags).unwrap();
    let mut w = params.weight.clone().into_raw_vec_and_offset().0;
    let num_w = numeric_grad(&mut w, |w| {
        let p = SeqHeadParams {
            weight: Array2::from_shape_vec((k, d), w.to_vec()).unwrap(),
            bias: params.bias.clone(),
        };
        seq_sample_grad(&emb(&e, n, d), &p, &tags).unwrap().0
    });
    let mut b = params.bias.to_vec();
    let num_b = numeric_grad(&mut b, |b| {
        let p = SeqHeadParams {
            weight: params.weight.clone(),
            bias: Array1::from(b.to_vec()),
        };
        seq_sample_grad(&emb(&e, n, d), &p, &tags).unwrap().0
    });
    let num_e = numeric_grad(&mut e, |e| {
        seq_sample_grad(&emb(e, n, d), &params, &tags).unwrap().0
    });
    rel_error(g.weight.as_slice().unwrap(), &num_w)
        .max(rel_error(g.bias.as_slice().unwrap(), &num_b))
        .max(rel_error(d_emb.as_slice().unwrap(), &num_e))
}

fn crf_instance(rng: &mut ChaCha8Rng) -> f64 {
    let types = rng.random_range(1..=2);
    let tagset = Tagset::new((0..types).map(|i| format!("t{i}"))).unwrap();
    let k = tagset.num_tags();
    let (n, d) = (rng.random_range(1..=4), rng.random_range(1..=3));
    let tags = TagSequence::new((0..n).map(|_| rng.random_range(0..k)).collect(), &tagset).unwrap();
    let mut params = random_crf(rng, k);
    params.emission = SeqHeadParams {
        weight: random_matrix(rng, k, d),
        bias: Array1::from_shape_simple_fn(k, || rng.random_range(-1.0..1.0)),
    };
    let mut e = random_emb(rng, n, d).into_raw_vec_and_offset().0;
    let (_, g, d_emb) = crf_sample_grad(&emb(&e, n, d), &params, &tags).unwrap();
    let loss_with = |p: &CrfParams, e: &[f64]| crf_sample_grad(&emb(e, n, d), p, &tags).unwrap().0;
    let mut worst = 0.0f64;
    let mut t = params.transitions.clone().into_raw_vec_and_offset().0;
    let num = numeric_grad(&mut t, |t| {
        let mut p = params.clone();
        p.transitions = Array2::from_shape_vec((k, k), t.to_vec()).unwrap();
        loss_with(&p, &e)
    });
    worst = worst.max(rel_error(g.transitions.as_slice().unwrap(), &num));
    let mut s = params.start.to_vec();
    let num = numeric_grad(&mut s, |s| {
        let mut p = params.clone();
        p.start = Array1::from(s.to_vec());
        loss_with(&p, &e)
    });
    worst = worst.max(rel_error(g.start.as_slice().unwrap(), &num));
    let mut en = params.end.to_vec();
    let num = numeric_grad(&mut en, |en| {
        let mut p = params.clone();
        p.end = Array1::from(en.to_vec());
        loss_with(&p, &e)
    });
    worst = worst.max(rel_error(g.end.as_slice().unwrap(), &num));
    let mut w = params.emission.weight.clone().into_raw_vec_and_offset().0;
    let num = numeric_grad(&mut w, |w| {
        let mut p = params.clone();
        p.emission.weight = Array2::from_shape_vec((k, d), w.to_vec()).unwrap();
        loss_with(&p, &e)
    });
    worst = worst.max(rel_error(g.emission.weight.as_slice().unwrap(), &num));
    let mut b = params.emission.bias.to_vec();
    let num = numeric_grad(&mut b, |b| {
        let mut p = params.clone();
        p.emission.bias = Array1::from(b.to_vec());
        loss_with(&p, &e)
    });
    worst = worst.max(rel_error(g.emission.bias.as_slice().unwrap(), &num));
    let num = numeric_grad(&mut e, |e| loss_with(&params, e));
    worst.max(rel_error(d_emb.as_slice().unwrap(), &num))
}

fn span_instance(rng: &mut ChaCha8Rng) -> f64 {
    let types = rng.random_range(1..=3);
    let labels_n = types + 1;
    let (n, d) = (rng.random_range(1..=5), rng.random_range(1..=3));
    let cap = rng.random_range(1..=n);
    let spans: Vec<SpanCandidate> = enumerate_spans(n, cap);
    let labels: Vec<usize> = spans
        .iter()
        .map(|_| rng.random_range(0..labels_n))
        .collect();
    let mut params = SpanHeadParams::zeros(types, d);
    params.weight = random_matrix(rng, labels_n, 2 * d);
    params.bias = Array1::from_shape_simple_fn(labels_n, || rng.random_range(-1.0..1.0));
    let mut e = random_emb(rng, n, d).into_raw_vec_and_offset().0;
    let (_, g, d_emb) = span_sample_grad(&emb(&e, n, d), &params, &spans, &labels).unwrap();
    let mut w = params.weight.clone().into_raw_vec_and_offset().0;
    let num_w = numeric_grad(&mut w, |w| {
        let mut p = params.clone();
        p.weight = Array2::from_shape_vec((labels_n, 2 * d), w.to_vec()).unwrap();
        span_sample_grad(&emb(&e, n, d), &p, &spans, &labels)
            .unwrap()
            .0
    });
    let mut b = params.bias.to_vec();
    let num_b = numeric_grad(&mut b, |b| {
        let mut p = params.clone();
        p.bias = Array1::from(b.to_vec());
        span_sample_grad(&emb(&e, n, d), &p, &spans, &labels)
            .unwrap()
            .0
    });
    let num_e = numeric_grad(&mut e, |e| {
        span_sample_grad(&emb(e, n, d), &params, &spans, &labels)
            .unwrap()
            .0
    });
    rel_error(g.weight.as_slice().unwrap(), &num_w)
        .max(rel_error(g.bias.as_slice().unwrap(), &num_b))
        .max(rel_error(d_emb.as_slice().unwrap(), &num_e))
}

fn encoder_instance(rng: &mut ChaCha8Rng) -> f64 {
    let config = ToyEncoderConfig {
        hash_size: 16,
        dim: rng.random_range(2..=4),
        width: rng.random_range(0..=2),
    };
    let params = ToyEncoderParams::new(config, rng.random()).unwrap();
    let n = rng.random_range(0..=5);
    let hashes: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..config.hash_size))
        .collect();
    // Loss is a fixed random linear functional of the output rows.
    let r = random_matrix(rng, n + 2, config.dim);
    let loss =
        |p: &ToyEncoderParams| -> f64 { (p.encode_hashes(&hashes).rows().to_owned() * &r).sum() };
    let out = params.encode_hashes(&hashes);
    let g = params.backward(&hashes, &out, r.view());
    let mut worst = 0.0f64;
    let rows: BTreeSet<usize> = hashes.iter().copied().collect();
    for &row in &rows {
        let mut v = params.table.row(row).to_vec();
        let num = numeric_grad(&mut v, |v| {
            let mut p = params.clone();
            p.table.row_mut(row).assign(&Array1::from(v.to_vec()));
            loss(&p)
        });
        let analytic = g
            .table_rows
            .get(&row)
            .map(|a| a.to_vec())
            .unwrap_or_else(|| vec![0.0; config.dim]);
        worst = worst.max(rel_error(&analytic, &num));
    }
    if g.table_rows.keys().any(|k| !rows.contains(k)) {
        return f64::INFINITY;
    }
    let mut b = params.begin.to_vec();
    let num = numeric_grad(&mut b, |b| {
        let mut p = params.clone();
        p.begin = Array1::from(b.to_vec());
        loss(&p)
    });
    let analytic = g
        .begin
        .as_ref()
        .map(|a| a.to_vec())
        .unwrap_or_else(|| vec![0.0; config.dim]);
    worst = worst.max(rel_error(&analytic, &num));
    let mut e = params.end.to_vec();
    let num = numeric_grad(&mut e, |e| {
        let mut p = params.clone();
        p.end = Array1::from(e.to_vec());
        loss(&p)
    });
    let analytic = g
        .end
        .as_ref()
        .map(|a| a.to_vec())
        .unwrap_or_else(|| vec![0.0; config.dim]);
    worst.max(rel_error(&analytic, &num))
}

type Instance = fn(&mut ChaCha8Rng) -> f64;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut parts = Vec::new();
    let mut pass = true;
    let checks: [(&str, Instance); 4] = [
        ("seq", seq_instance),
        ("span", span_instance),
        ("crf", crf_instance),
        ("encoder", encoder_instance),
    ];
    for (name, check) in checks {
        let worst = (0..100).map(|_| check(&mut rng)).fold(0.0f64, f64::max);
        pass &= worst <= FD_REL_TOL;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "100 instances each, worst relative error: {} (tol {FD_REL_TOL:.0e}, step {FD_STEP:.0e}), {elapsed:.2?} (limit 60s)",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- BIO

const WORDS: &[&str] = &["alpha", "b", "cc", "(", ")", "-", "Delta", "e9", ",", "fox"];

fn random_sample(rng: &mut ChaCha8Rng, id: &str) -> (Sample, Vec<(usize, usize, usize)>) {
    let n = rng.random_range(0..=12);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let text = words.join(" ");
    let probe = Sample::from_text(id, text.clone(), vec![]).unwrap();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < probe.token_count() {
        if rng.random_bool(0.35) {
            let len = rng.random_range(1..=3).min(probe.token_count() - i);
            spans.push((rng.random_range(0..3), i, i + len - 1));
            i += len;
        } else {
            i += 1;
        }
    }
    let types = ["A", "B", "C"];
    let gold: Vec<Mention> = spans
        .iter()
        .map(|&(t, a, b)| probe.mention_for_tokens(types[t], a, b))
        .collect();
    (Sample::from_text(id, text, gold).unwrap(), spans)
}

fn bio_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let tagset = Tagset::new(["A", "B", "C"]).unwrap();
    let mut mismatches = 0;
    let mut overlaps = 0;
    for i in 0..1000 {
        let (sample, _) = random_sample(&mut rng, &format!("s{i}"));
        let tags = encode(&sample, &tagset).unwrap();
        if decode(&tags, &sample, &tagset) != sample.gold {
            mismatches += 1;
        }
        // Arbitrary tag sequences, including stray I tags.
        let random_tags: Vec<usize> = (0..sample.token_count())
            .map(|_| rng.random_range(0..tagset.num_tags()))
            .collect();
        let decoded = decode(
            &TagSequence::new(random_tags, &tagset).unwrap(),
            &sample,
            &tagset,
        );
        let list: Vec<&Mention> = decoded.iter().collect();
        for (a, x) in list.iter().enumerate() {
            for y in &list[a + 1..] {
                if x.begin < y.end && y.begin < x.end {
                    overlaps += 1;
                }
            }
        }
    }
    outcome(
        mismatches == 0 && overlaps == 0,
        format!("1000 configurations, {mismatches} round-trip mismatches, {overlaps} overlapping decoded pairs"),
    )
}

// ---------------------------------------------------------------- combiners

fn random_set(rng: &mut ChaCha8Rng) -> PredictionSet {
    (0..rng.random_range(0..12))
        .map(|_| {
            let b = rng.random_range(0..6);
            Mention::new(
                format!("s{}", rng.random_range(0..3)),
                ["x", "y"][rng.random_range(0..2)],
                b,
                b + rng.random_range(1..3),
            )
        })
        .collect()
}

fn recall(gold: &PredictionSet, pred: &PredictionSet) -> f64 {
    if gold.is_empty() {
        0.0
    } else {
        gold.iter().filter(|g| pred.contains(g)).count() as f64 / gold.len() as f64
    }
}

fn combiner_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let sets = [
            random_set(&mut rng),
            random_set(&mut rng),
            random_set(&mut rng),
        ];
        let gold = random_set(&mut rng);
        let u = union(&sets).unwrap();
        let mv = majority_vote(&sets).unwrap();
        if !mv.is_subset(&u) {
            failures.push(format!("#{i} majority not within union"));
        }
        let ur = recall(&gold, &u);
        if sets.iter().any(|s| recall(&gold, s) > ur) {
            failures.push(format!("#{i} union recall below a component"));
        }
        if union(&sets[..1]).unwrap() != sets[0] || majority_vote(&sets[..1]).unwrap() != sets[0] {
            failures.push(format!("#{i} single-system identity"));
        }
        let inter: PredictionSet = sets[0]
            .iter()
            .filter(|m| sets[1].contains(m))
            .cloned()
            .collect();
        if majority_vote(&sets[..2]).unwrap() != inter {
            failures.push(format!("#{i} two-system majority is not the intersection"));
        }
        let oracle_mv: PredictionSet = u
            .iter()
            .filter(|m| sets.iter().filter(|s| s.contains(m)).count() >= 2)
            .cloned()
            .collect();
        if mv != oracle_mv {
            failures.push(format!("#{i} majority differs from vote count"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "1000 triples, {} violations{}",
            failures.len(),
            failures
                .first()
                .map(|f| format!(" (first: {f})"))
                .unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- spans

fn span_enumeration() -> Outcome {
    let mut bad = 0;
    let mut cases = 0;
    for n in 0..=64 {
        for cap in 1..=64 {
            let mut brute = 0;
            for b in 0..n {
                for e in b..n {
                    if e - b < cap {
                        brute += 1;
                    }
                }
            }
            let spans = enumerate_spans(n, cap);
            let distinct: BTreeSet<(usize, usize)> = spans.iter().map(|s| (s.b, s.e)).collect();
            let valid = spans
                .iter()
                .all(|s| s.b <= s.e && s.e < n && s.e - s.b < cap);
            if span_count(n, cap) != brute
                || spans.len() != brute
                || distinct.len() != brute
                || !valid
            {
                bad += 1;
            }
            cases += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{cases} (n, cap) pairs with n <= 64, cap <= 64, {bad} mismatches"),
    )
}

// ---------------------------------------------------------------- synthetic end to end

struct Trained {
    kind: ModelKind,
    outcome: TrainOutcome<NerModel>,
    test_preds: PredictionSet,
}

fn toy_encoder(seed: u64) -> TokenEncoder {
    TokenEncoder::Toy(ToyEncoderParams::new(ToyEncoderConfig::default(), seed).unwrap())
}

fn ner_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        ..Default::default()
    }
}

fn synthetic_end_to_end(
    corpus: &synth::SynthCorpus,
    trained: &mut Vec<Trained>,
    started: Instant,
) -> Outcome {
    let tagset = Tagset::new([DISEASE, GENE]).unwrap();
    let gold = gold_set(&corpus.test);
    let inner = inner_mentions(&gold);
    let nested = nested_mentions(&gold);
    let mut pass = true;
    let mut parts = vec![format!(
        "{}/{}/{} samples, {} nested mentions ({} inner)",
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len(),
        nested.len(),
        inner.len()
    )];
    for kind in [ModelKind::Seq, ModelKind::Crf, ModelKind::Span] {
        let model = NerModel::new(
            kind,
            tagset.clone(),
            toy_encoder(1),
            SpanConfig::default(),
            1,
        )
        .unwrap();
        let out = train(
            model,
            &corpus.train,
            &corpus.validation,
            &ner_config(),
            Execution::default(),
        )
        .unwrap();
        let preds = out
            .best
            .predict_all(&corpus.test, Execution::default())
            .unwrap();
        let m = score(&gold, &preds);
        pass &= m.f1 >= 0.95;
        let mut part = format!("{kind} F1={:.4}", m.f1);
        if kind == ModelKind::Span {
            let rate = nested.intersection(&preds).len() as f64 / nested.len().max(1) as f64;
            pass &= rate >= 0.90;
            part.push_str(&format!(" nested recovered {:.1}%", 100.0 * rate));
        } else {
            let got = inner.intersection(&preds).len();
            pass &= got == 0;
            part.push_str(&format!(" inner recovered {got}/{}", inner.len()));
        }
        parts.push(part);
        trained.push(Trained {
            kind,
            outcome: out,
            test_preds: preds,
        });
    }
    let elapsed = started.elapsed();
    pass &= elapsed <= Duration::from_secs(600);
    parts.push(format!("{elapsed:.2?} (limit 600s)"));
    outcome(
        pass,
        format!(
            "{} (F1 >= 0.95, span nested >= 90%, seq/crf inner = 0)",
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- meta

fn meta_efficacy(corpus: &synth::SynthCorpus, trained: &[Trained]) -> Outcome {
    let types = [DISEASE, GENE];
    let systems: Vec<&Trained> = trained
        .iter()
        .filter(|t| matches!(t.kind, ModelKind::Seq | ModelKind::Span))
        .collect();
    if systems.len() != 2 {
        return outcome(false, "sequence and span systems are not available");
    }
    let mut captured_sets = Vec::new();
    for (k, t) in systems.iter().enumerate() {
        for r in &t.outcome.records {
            let seed = 1000 * (k as u64 + 1) + r.epoch as u64;
            let (noisy, _) =
                inject_type_confusion(&r.validation.predictions, &types, 0.2, seed).unwrap();
            captured_sets.push((t.kind.to_string(), r.epoch, noisy));
        }
    }
    let captured: Vec<CapturedEpoch<'_>> = captured_sets
        .iter()
        .map(|(s, e, p)| CapturedEpoch {
            source: s,
            epoch: *e,
            predictions: p,
        })
        .collect();
    let (train_ex, held_ex) =
        build_training_set(&captured, &corpus.validation, &corpus.train, 0.15, 7).unwrap();
    let train_in: Vec<MetaInstance> = train_ex.iter().map(MetaInstance::from).collect();
    let held_in: Vec<MetaInstance> = held_ex.iter().map(MetaInstance::from).collect();
    let config = TrainConfig {
        learning_rate: 0.05,
        max_epochs: 40,
        patience: 10,
        ..Default::default()
    };
    let meta = MetaModel::new(toy_encoder(2), 0.5, 2).unwrap();
    let meta = train(meta, &train_in, &held_in, &config, Execution::default())
        .unwrap()
        .best;

    let gold = gold_set(&corpus.test);
    let mut noisy_outputs = Vec::new();
    let mut injected = PredictionSet::new();
    for (k, t) in systems.iter().enumerate() {
        let (noisy, added) =
            inject_type_confusion(&t.test_preds, &types, 0.2, 9000 + k as u64).unwrap();
        injected.extend_from(&added.difference(&gold));
        noisy_outputs.push(noisy);
    }
    let u = union(&noisy_outputs).unwrap();
    let filtered = meta_filter(&u, &meta, &corpus.test, Execution::default()).unwrap();
    let union_tp = u.intersection(&gold);
    let removed = injected.difference(&filtered).len() as f64 / injected.len().max(1) as f64;
    let kept = union_tp.intersection(&filtered).len() as f64 / union_tp.len().max(1) as f64;
    let mu = score(&gold, &u);
    let mm = score(&gold, &filtered);
    let pass = removed >= 0.80
        && kept >= 0.95
        && mm.precision > mu.precision
        && mm.f1 >= mu.f1
        && mm.recall <= mu.recall
        && filtered.is_subset(&u);
    outcome(
        pass,
        format!(
            "{} meta examples; removed {:.1}% of {} injected FPs (>= 80%), kept {:.1}% of {} TPs (>= 95%); union P={:.4} F1={:.4} R={:.4}, meta P={:.4} F1={:.4} R={:.4}",
            train_ex.len() + held_ex.len(),
            100.0 * removed,
            injected.len(),
            100.0 * kept,
            union_tp.len(),
            mu.precision,
            mu.f1,
            mu.recall,
            mm.precision,
            mm.f1,
            mm.recall
        ),
    )
}

// ---------------------------------------------------------------- early stopping

/// A real model whose validation score is scripted to peak and then decline.
#[derive(Clone)]
struct Deteriorating<'a> {
    inner: NerModel,
    scores: &'a [f64],
    calls: &'a AtomicUsize,
}

impl Trainable for Deteriorating<'_> {
    type Example = Sample;

    fn example_grad(&self, ex: &Sample) -> nerkit::Result<Option<(f64, Gradients)>> {
        self.inner.sample_grad(ex)
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        self.inner.params_mut()
    }

    fn evaluate(&self, _: &[Sample], _: Execution) -> nerkit::Result<Evaluation> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Evaluation {
            score: self.scores[i],
            ..Default::default()
        })
    }
}

fn early_stopping() -> Outcome {
    let corpus = synth::generate(&SynthConfig {
        train: 60,
        validation: 10,
        test: 0,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let tagset = Tagset::new([DISEASE, GENE]).unwrap();
    let small = ToyEncoderConfig {
        hash_size: 1024,
        dim: 8,
        width: 1,
    };
    let fresh = || {
        let enc = TokenEncoder::Toy(ToyEncoderParams::new(small, 3).unwrap());
        NerModel::new(
            ModelKind::Seq,
            tagset.clone(),
            enc,
            SpanConfig::default(),
            3,
        )
        .unwrap()
    };
    let scores = [0.2, 0.5, 0.7, 0.6, 0.6, 0.4, 0.3, 0.2, 0.1, 0.9, 0.9, 0.9];
    let patience = 3;
    let config = TrainConfig {
        patience,
        max_epochs: scores.len(),
        learning_rate: 0.01,
        seed: 9,
        ..Default::default()
    };
    let calls = AtomicUsize::new(0);
    let run = Deteriorating {
        inner: fresh(),
        scores: &scores,
        calls: &calls,
    };
    let out = train(
        run,
        &corpus.train,
        &corpus.validation,
        &config,
        Execution::default(),
    )
    .unwrap();

    // Reference: the same run cut off at the best epoch.
    let ref_calls = AtomicUsize::new(0);
    let reference = Deteriorating {
        inner: fresh(),
        scores: &scores,
        calls: &ref_calls,
    };
    let cut = TrainConfig {
        max_epochs: 3,
        ..config
    };
    let reference = train(
        reference,
        &corpus.train,
        &corpus.validation,
        &cut,
        Execution::default(),
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    save_ner(&out.best.inner, &path).unwrap();
    let reloaded = match load_checkpoint(&path, None).unwrap() {
        Checkpoint::Ner(m) => m,
        Checkpoint::Meta(_) => return outcome(false, "checkpoint reloaded as meta"),
    };
    let same_params = out.best.inner.head == reference.best.inner.head
        && out.best.inner.encoder.toy() == reference.best.inner.encoder.toy();
    let reload_ok = reloaded.head == out.best.inner.head;
    let pass = out.records.len() == 3 + patience
        && out.best_epoch == 3
        && out.stopped_early
        && same_params
        && reload_ok;
    outcome(
        pass,
        format!(
            "patience {patience}: ran {} epochs (expected {}), best epoch {} (expected 3), parameters match a run cut at epoch 3: {same_params}, checkpoint round trip: {reload_ok}",
            out.records.len(),
            3 + patience,
            out.best_epoch
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name, o));
    };
    report("crf-exactness", crf_exactness());
    report("gradient-suite", gradient_suite());
    report("bio-codec", bio_codec());
    report("combiner-algebra", combiner_algebra());
    report("span-enumeration", span_enumeration());

    let started = Instant::now();
    let corpus = synth::generate(&SynthConfig::default()).unwrap();
    let mut trained = Vec::new();
    report(
        "synthetic-end-to-end",
        synthetic_end_to_end(&corpus, &mut trained, started),
    );
    report("meta-efficacy", meta_efficacy(&corpus, &trained));
    report("early-stopping", early_stopping());

    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {}/{} passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
