//! Evaluation aggregation: per-dimension error/hallucination rates,
//! corpus-level F1 from atom-match records, percentile bootstrap confidence
//! intervals with clip-level resampling, and mean-of-three rater scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::SeededRng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("label integrity error: {0}")]
    Integrity(String),
    #[error("F1 undefined: {0}")]
    UndefinedF1(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Correct,
    Erroneous,
    Hallucinated,
}

/// One adjudicated verdict for a (clip, dimension).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RaterLabel {
    pub clip_id: String,
    pub dimension: String,
    pub verdict: Verdict,
}

/// Error and hallucination rates in percent over an evaluation set of n
/// clips: counts of Erroneous and Hallucinated verdicts divided by n.
pub fn failure_rates(labels: &[RaterLabel], n: usize) -> Result<(f64, f64), EvalError> {
    if n == 0 {
        return Err(EvalError::Invalid("evaluation set size must be positive".into()));
    }
    if labels.len() > n {
        return Err(EvalError::Invalid(format!(
            "{} labels exceed the evaluation set size {n}",
            labels.len()
        )));
    }
    let mut seen: Vec<(&str, &str)> = Vec::with_capacity(labels.len());
    let mut erroneous = 0usize;
    let mut hallucinated = 0usize;
    for label in labels {
        let key = (label.clip_id.as_str(), label.dimension.as_str());
        if seen.contains(&key) {
            return Err(EvalError::Integrity(format!(
                "duplicate label for clip {} dimension {}",
                label.clip_id, label.dimension
            )));
        }
        seen.push(key);
        match label.verdict {
            Verdict::Correct => {}
            Verdict::Erroneous => erroneous += 1,
            Verdict::Hallucinated => hallucinated += 1,
        }
    }
    Ok((
        100.0 * erroneous as f64 / n as f64,
        100.0 * hallucinated as f64 / n as f64,
    ))
}

/// Per-clip atom matching outcome for one dimension: which predicted atoms
/// found a reference match and which reference atoms were covered.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomMatchRecord {
    pub clip_id: String,
    pub dimension: String,
    pub predicted_matched: Vec<bool>,
    pub reference_matched: Vec<bool>,
}

/// Corpus-level F1: atoms are pooled over clips before the precision and
/// recall ratios, which is not the mean of per-clip F1 scores.
pub fn corpus_f1(records: &[AtomMatchRecord]) -> Result<f64, EvalError> {
    let mut matched_pred = 0usize;
    let mut total_pred = 0usize;
    let mut matched_ref = 0usize;
    let mut total_ref = 0usize;
    for r in records {
        matched_pred += r.predicted_matched.iter().filter(|&&m| m).count();
        total_pred += r.predicted_matched.len();
        matched_ref += r.reference_matched.iter().filter(|&&m| m).count();
        total_ref += r.reference_matched.len();
    }
    if total_pred == 0 && total_ref == 0 {
        return Err(EvalError::UndefinedF1(
            "no atoms on either side over the whole corpus".into(),
        ));
    }
    let precision = if total_pred == 0 {
        0.0
    } else {
        matched_pred as f64 / total_pred as f64
    };
    let recall = if total_ref == 0 {
        0.0
    } else {
        matched_ref as f64 / total_ref as f64
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Percentile-CI outcome; `degenerate` marks the single-clip warning case.
#[derive(Clone, Debug, Serialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub point: f64,
    pub degenerate: bool,
}

/// Percentile bootstrap over clip-level resampling with replacement.
/// Deterministic under the seeded stream; resamples whose F1 is undefined
/// (possible when every drawn clip is atomless) contribute zero.
pub fn bootstrap_ci(
    records: &[AtomMatchRecord],
    resamples: usize,
    level: f64,
    rng: &mut SeededRng,
) -> Result<BootstrapCi, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Invalid("no records".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(EvalError::Invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let point = corpus_f1(records)?;
    if records.len() < 2 {
        return Ok(BootstrapCi {
            low: point,
            high: point,
            point,
            degenerate: true,
        });
    }
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let draw: Vec<AtomMatchRecord> = (0..records.len())
            .map(|_| records[rng.usize_below(records.len())].clone())
            .collect();
        stats.push(corpus_f1(&draw).unwrap_or(0.0));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let quantile = |p: f64| -> f64 {
        let pos = p * (stats.len() as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        stats[lo] + (stats[hi] - stats[lo]) * (pos - lo as f64)
    };
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        low: quantile(tail),
        high: quantile(1.0 - tail),
        point,
        degenerate: false,
    })
}

/// Three independent rater scores for one (prompt, dimension).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatingTriple {
    pub prompt_id: String,
    pub dimension: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MeanReport {
    /// Mean of the three raters per (prompt, dimension).
    pub per_prompt: BTreeMap<(String, String), f64>,
    /// Mean over prompts of the per-prompt means, per dimension.
    pub per_dimension: BTreeMap<String, f64>,
}

/// Rater aggregation: average the three raters per prompt first, then
/// average prompts within each dimension.
pub fn mean_of_three(triples: &[RatingTriple]) -> Result<MeanReport, EvalError> {
    let mut report = MeanReport::default();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for t in triples {
        if t.scores.len() != 3 {
            return Err(EvalError::Integrity(format!(
                "prompt {} dimension {} has {} scores, expected exactly 3",
                t.prompt_id,
                t.dimension,
                t.scores.len()
            )));
        }
        if t.scores.iter().any(|s| !(1.0..=5.0).contains(s)) {
            return Err(EvalError::Integrity(format!(
                "prompt {} dimension {} has a score outside [1, 5]",
                t.prompt_id, t.dimension
            )));
        }
        let key = (t.prompt_id.clone(), t.dimension.clone());
        if report.per_prompt.contains_key(&key) {
            return Err(EvalError::Integrity(format!(
                "duplicate triple for prompt {} dimension {}",
                t.prompt_id, t.dimension
            )));
        }
        let mean = t.scores.iter().sum::<f64>() / 3.0;
        report.per_prompt.insert(key, mean);
        let entry = sums.entry(t.dimension.clone()).or_insert((0.0, 0));
        entry.0 += mean;
        entry.1 += 1;
    }
    for (dim, (sum, count)) in sums {
        report.per_dimension.insert(dim, sum / count as f64);
    }
    Ok(report)
}

/// Build a label set with the given Erroneous/Hallucinated counts, the rest
/// Correct, for reconstructing published rate tables.
pub fn labels_from_counts(
    dimension: &str,
    erroneous: usize,
    hallucinated: usize,
    n: usize,
) -> Vec<RaterLabel> {
    (0..n)
        .map(|i| RaterLabel {
            clip_id: format!("clip{i:04}"),
            dimension: dimension.to_string(),
            verdict: if i < erroneous {
                Verdict::Erroneous
            } else if i < erroneous + hallucinated {
                Verdict::Hallucinated
            } else {
                Verdict::Correct
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_rates_reconstructed_counts() {
        // 3 erroneous, 0 hallucinated of 500.
        let labels = labels_from_counts("vfx", 3, 0, 500);
        let (err, hall) = failure_rates(&labels, 500).unwrap();
        assert!((err - 0.6).abs() < 1e-12);
        assert_eq!(hall, 0.0);

        // 46 + 31 of 500.
        let labels = labels_from_counts("motion", 46, 31, 500);
        let (err, hall) = failure_rates(&labels, 500).unwrap();
        assert!((err - 9.2).abs() < 1e-12);
        assert!((hall - 6.2).abs() < 1e-12);

        // No labels at all.
        let (err, hall) = failure_rates(&[], 500).unwrap();
        assert_eq!((err, hall), (0.0, 0.0));
    }

    #[test]
    fn combined_rates_reproduce_published_sums() {
        // Err + Hall per cell matches the combined failure-rate table.
        let cells: [(usize, usize, f64); 4] = [
            (64, 12, 15.2),
            (170, 61, 46.2),
            (43, 5, 9.6),
            (34, 0, 6.8),
        ];
        for (err_count, hall_count, combined) in cells {
            let labels = labels_from_counts("dim", err_count, hall_count, 500);
            let (e, h) = failure_rates(&labels, 500).unwrap();
            assert!((e + h - combined).abs() < 1e-12, "{e} + {h} != {combined}");
        }
    }

    #[test]
    fn duplicate_labels_are_an_integrity_error() {
        let mut labels = labels_from_counts("subject", 1, 0, 3);
        labels.push(labels[0].clone());
        assert!(matches!(
            failure_rates(&labels, 10),
            Err(EvalError::Integrity(_))
        ));
    }

    fn record(clip: &str, pred: &[bool], reference: &[bool]) -> AtomMatchRecord {
        AtomMatchRecord {
            clip_id: clip.into(),
            dimension: "events".into(),
            predicted_matched: pred.to_vec(),
            reference_matched: reference.to_vec(),
        }
    }

    #[test]
    fn corpus_f1_fixtures() {
        // All atoms matched on both sides.
        let records = [record("a", &[true, true], &[true]), record("b", &[true], &[true, true])];
        assert_eq!(corpus_f1(&records).unwrap(), 1.0);

        // Precision 1, recall 0: harmonic mean degenerates to 0.
        let records = [record("a", &[], &[false, false])];
        assert_eq!(corpus_f1(&records).unwrap(), 0.0);

        // 6 of 10 predicted matched, 6 of 8 reference matched.
        let pred: Vec<bool> = (0..10).map(|i| i < 6).collect();
        let reference: Vec<bool> = (0..8).map(|i| i < 6).collect();
        let f1 = corpus_f1(&[record("a", &pred, &reference)]).unwrap();
        assert!((f1 - 2.0 * 0.6 * 0.75 / 1.35).abs() < 1e-12);
        assert!((f1 - 0.6666666666666667).abs() < 1e-10);

        assert!(matches!(
            corpus_f1(&[record("a", &[], &[])]),
            Err(EvalError::UndefinedF1(_))
        ));
    }

    #[test]
    fn corpus_f1_is_order_invariant_but_not_mean_of_clip_f1() {
        let a = record("a", &[true, true, false, false], &[true, true]);
        let b = record("b", &[true], &[true, false, false, false]);
        let forward = corpus_f1(&[a.clone(), b.clone()]).unwrap();
        let backward = corpus_f1(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(forward, backward);

        // Pooled-then-ratio pins a different value than averaging per-clip F1.
        let f1_a = corpus_f1(&[a]).unwrap();
        let f1_b = corpus_f1(&[b]).unwrap();
        let mean_of_clip_f1 = (f1_a + f1_b) / 2.0;
        assert!(
            (forward - mean_of_clip_f1).abs() > 1e-3,
            "pooled {forward} vs per-clip mean {mean_of_clip_f1}"
        );
    }

    #[test]
    fn bootstrap_is_seed_deterministic_and_brackets_the_point() {
        let mut rng = SeededRng::new(1);
        let records: Vec<AtomMatchRecord> = (0..40)
            .map(|i| {
                let pred: Vec<bool> = (0..5).map(|j| (i + j) % 3 != 0).collect();
                let reference: Vec<bool> = (0..4).map(|j| (i + j) % 4 != 0).collect();
                record(&format!("c{i}"), &pred, &reference)
            })
            .collect();
        let a = bootstrap_ci(&records, 1000, 0.95, &mut rng.fork(0)).unwrap();
        let b = bootstrap_ci(&records, 1000, 0.95, &mut rng.fork(0)).unwrap();
        assert_eq!(a.low.to_bits(), b.low.to_bits());
        assert_eq!(a.high.to_bits(), b.high.to_bits());
        assert!(a.low <= a.point && a.point <= a.high);
        assert!(!a.degenerate);
    }

    #[test]
    fn identical_clips_give_zero_width_ci() {
        let records: Vec<AtomMatchRecord> = (0..20)
            .map(|i| record(&format!("c{i}"), &[true, false], &[true, true, false]))
            .collect();
        let mut rng = SeededRng::new(2);
        let ci = bootstrap_ci(&records, 200, 0.95, &mut rng).unwrap();
        assert_eq!(ci.low, ci.high);
    }

    #[test]
    fn single_clip_is_degenerate() {
        let mut rng = SeededRng::new(3);
        let ci = bootstrap_ci(&[record("only", &[true], &[true])], 100, 0.95, &mut rng).unwrap();
        assert!(ci.degenerate);
        assert_eq!(ci.low, ci.high);
    }

    #[test]
    fn ci_width_shrinks_with_corpus_size() {
        let gen_records = |n: usize| -> Vec<AtomMatchRecord> {
            let mut rng = SeededRng::new(77);
            (0..n)
                .map(|i| {
                    let pred: Vec<bool> = (0..6).map(|_| rng.bernoulli(0.7)).collect();
                    let reference: Vec<bool> = (0..6).map(|_| rng.bernoulli(0.8)).collect();
                    record(&format!("c{i}"), &pred, &reference)
                })
                .collect()
        };
        let mut rng = SeededRng::new(4);
        let small = bootstrap_ci(&gen_records(50), 500, 0.95, &mut rng.fork(1)).unwrap();
        let large = bootstrap_ci(&gen_records(500), 500, 0.95, &mut rng.fork(2)).unwrap();
        assert!(
            large.high - large.low < small.high - small.low,
            "width {} vs {}",
            large.high - large.low,
            small.high - small.low
        );
    }

    #[test]
    fn mean_of_three_fixtures() {
        let triples = vec![
            RatingTriple {
                prompt_id: "p0".into(),
                dimension: "style_fidelity".into(),
                scores: vec![4.0, 4.0, 4.0],
            },
            RatingTriple {
                prompt_id: "p1".into(),
                dimension: "style_fidelity".into(),
                scores: vec![3.0, 4.0, 5.0],
            },
        ];
        let report = mean_of_three(&triples).unwrap();
        assert_eq!(
            report.per_prompt[&("p0".to_string(), "style_fidelity".to_string())],
            4.0
        );
        assert_eq!(
            report.per_prompt[&("p1".to_string(), "style_fidelity".to_string())],
            4.0
        );
        assert_eq!(report.per_dimension["style_fidelity"], 4.0);
    }

    #[test]
    fn mean_of_three_rejects_incomplete_triples() {
        let bad = RatingTriple {
            prompt_id: "p0".into(),
            dimension: "motion".into(),
            scores: vec![4.0, 4.0],
        };
        assert!(matches!(mean_of_three(&[bad]), Err(EvalError::Integrity(_))));
    }

    #[test]
    fn five_dimension_aggregation_shape() {
        // Synthetic ratings over the five human-evaluation dimensions.
        let dims = [
            "style_fidelity",
            "prompt_understanding",
            "artistic_motion",
            "structural_stability",
            "anime_aesthetic",
        ];
        let mut triples = Vec::new();
        let mut rng = SeededRng::new(9);
        for p in 0..20 {
            for d in dims {
                let mut s = || (1.0 + 4.0 * rng.uniform() * 0.99).round().clamp(1.0, 5.0);
                let scores = vec![s(), s(), s()];
                triples.push(RatingTriple {
                    prompt_id: format!("p{p}"),
                    dimension: d.into(),
                    scores,
                });
            }
        }
        let report = mean_of_three(&triples).unwrap();
        assert_eq!(report.per_dimension.len(), 5);
        // Oracle: recompute one dimension mean by hand.
        let want: f64 = triples
            .iter()
            .filter(|t| t.dimension == "artistic_motion")
            .map(|t| t.scores.iter().sum::<f64>() / 3.0)
            .sum::<f64>()
            / 20.0;
        assert!((report.per_dimension["artistic_motion"] - want).abs() < 1e-12);
    }
}
