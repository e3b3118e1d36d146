//! Text-QA metrics: ANLS with a similarity cutoff, exact match and
//! bag-of-tokens F1, each taking the best score over the gold answers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::QAInstance;
use crate::evidence::text::{normalize_answer, normalized_levenshtein, tokenize};

pub const DEFAULT_TAU: f64 = 0.5;

/// Written into every report so readers know how strings were compared.
pub const NORMALIZATION: &str =
    "lowercase, trim, collapse whitespace; F1 tokens also drop punctuation";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("no gold answers for `{0}`")]
    EmptyGolds(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("duplicate question id `{0}`")]
    DuplicateId(String),
    #[error("prediction for unknown question `{0}`")]
    UnknownId(String),
}

fn check_golds<S: AsRef<str>>(golds: &[S]) -> Result<(), MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGolds(String::new()));
    }
    Ok(())
}

/// Best `1 - NL` over golds, where similarities with `NL >= tau` count as 0.
pub fn anls_score<S: AsRef<str>>(pred: &str, golds: &[S], tau: f64) -> Result<f64, MetricError> {
    check_golds(golds)?;
    let pred = normalize_answer(pred);
    Ok(golds
        .iter()
        .map(|g| {
            let nl = normalized_levenshtein(&normalize_answer(g.as_ref()), &pred);
            if nl < tau {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max))
}

pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64, MetricError> {
    check_golds(golds)?;
    let pred = normalize_answer(pred);
    Ok(
        if golds.iter().any(|g| normalize_answer(g.as_ref()) == pred) {
            1.0
        } else {
            0.0
        },
    )
}

fn bag(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

fn bag_f1(pred: &HashMap<String, usize>, gold: &HashMap<String, usize>) -> f64 {
    let (np, ng): (usize, usize) = (pred.values().sum(), gold.values().sum());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let common: usize = pred
        .iter()
        .map(|(t, &c)| c.min(gold.get(t).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / np as f64;
    let r = common as f64 / ng as f64;
    2.0 * p * r / (p + r)
}

/// Token-multiset F1, best over golds.
pub fn macro_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64, MetricError> {
    check_golds(golds)?;
    let p = bag(pred);
    Ok(golds
        .iter()
        .map(|g| bag_f1(&p, &bag(g.as_ref())))
        .fold(0.0, f64::max))
}

/// A line of `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub id: String,
    pub prediction: String,
    pub golds: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub entries: Vec<PredictionEntry>,
}

impl PredictionSet {
    /// Attaches gold answers from `instances` to each prediction.
    pub fn join(preds: &[Prediction], instances: &[QAInstance]) -> Result<Self, MetricError> {
        let by_id: HashMap<&str, &QAInstance> =
            instances.iter().map(|q| (q.id.as_str(), q)).collect();
        let entries = preds
            .iter()
            .map(|p| {
                let q = by_id
                    .get(p.id.as_str())
                    .ok_or_else(|| MetricError::UnknownId(p.id.clone()))?;
                Ok(PredictionEntry {
                    id: p.id.clone(),
                    prediction: p.prediction.clone(),
                    golds: q.answers.clone(),
                })
            })
            .collect::<Result<_, MetricError>>()?;
        Ok(Self { entries })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub prediction: String,
    pub anls: f64,
    pub em: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub normalization: String,
    pub tau: f64,
    pub count: usize,
    pub anls: f64,
    pub em: f64,
    pub macro_f1: f64,
    /// Sorted by question id.
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Aligned plain-text rendering: header, aggregates, one row per question.
    pub fn to_table(&self) -> String {
        let id_w = self
            .rows
            .iter()
            .map(|r| r.id.chars().count())
            .chain(["question".len(), "mean".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(out, "# normalization: {}", self.normalization);
        let _ = writeln!(out, "# anls tau: {}", self.tau);
        let _ = writeln!(
            out,
            "{:<id_w$}  {:>6}  {:>6}  {:>6}",
            "question", "anls", "em", "f1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<id_w$}  {:>6.4}  {:>6.4}  {:>6.4}",
                r.id, r.anls, r.em, r.f1
            );
        }
        let _ = writeln!(
            out,
            "{:<id_w$}  {:>6.4}  {:>6.4}  {:>6.4}",
            "mean", self.anls, self.em, self.macro_f1
        );
        out
    }
}

pub fn evaluate(preds: &PredictionSet, tau: f64) -> Result<MetricReport, MetricError> {
    if preds.entries.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut seen = HashSet::new();
    let mut rows = BTreeMap::new();
    for e in &preds.entries {
        if !seen.insert(e.id.as_str()) {
            return Err(MetricError::DuplicateId(e.id.clone()));
        }
        let named = |err| match err {
            MetricError::EmptyGolds(_) => MetricError::EmptyGolds(e.id.clone()),
            other => other,
        };
        rows.insert(
            e.id.clone(),
            MetricRow {
                id: e.id.clone(),
                prediction: e.prediction.clone(),
                anls: anls_score(&e.prediction, &e.golds, tau).map_err(named)?,
                em: exact_match(&e.prediction, &e.golds).map_err(named)?,
                f1: macro_f1(&e.prediction, &e.golds).map_err(named)?,
            },
        );
    }
    let rows: Vec<MetricRow> = rows.into_values().collect();
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        normalization: NORMALIZATION.to_string(),
        tau,
        count: rows.len(),
        anls: mean(|r| r.anls),
        em: mean(|r| r.em),
        macro_f1: mean(|r| r.f1),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anls_examples() {
        assert_eq!(anls_score("Exit", &["exit"], DEFAULT_TAU).unwrap(), 1.0);
        assert!((anls_score("help", &["hello"], DEFAULT_TAU).unwrap() - 0.6).abs() < 1e-12);
        // NL = 2/4 = 0.5 exactly is cut off
        assert_eq!(anls_score("abcd", &["abxy"], DEFAULT_TAU).unwrap(), 0.0);
        assert_eq!(
            anls_score("x", &["far away", "help"], DEFAULT_TAU).unwrap(),
            0.0
        );
        assert!((anls_score("help", &["zzz", "hello"], DEFAULT_TAU).unwrap() - 0.6).abs() < 1e-12);
        let none: [&str; 0] = [];
        assert!(anls_score("x", &none, DEFAULT_TAU).is_err());
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("red car", &["red car"]).unwrap(), 1.0);
        assert_eq!(exact_match("  RED   Car ", &["red car"]).unwrap(), 1.0);
        assert_eq!(exact_match("red cat", &["red car"]).unwrap(), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1("red car", &["red car"]).unwrap(), 1.0);
        assert!((macro_f1("red", &["red car"]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1("blue bike", &["red car"]).unwrap(), 0.0);
        assert_eq!(macro_f1("!!", &["..."]).unwrap(), 1.0);
        assert_eq!(macro_f1("", &["a"]).unwrap(), 0.0);
        // multiplicity: pred "a a", gold "a" -> P = 1/2, R = 1
        assert!((macro_f1("a a", &["a"]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    fn set(rows: &[(&str, &str, &[&str])]) -> PredictionSet {
        PredictionSet {
            entries: rows
                .iter()
                .map(|(id, p, g)| PredictionEntry {
                    id: id.to_string(),
                    prediction: p.to_string(),
                    golds: g.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn evaluate_aggregates() {
        let r = evaluate(&set(&[("a", "yes", &["yes"])]), DEFAULT_TAU).unwrap();
        assert_eq!((r.anls, r.em, r.macro_f1), (1.0, 1.0, 1.0));
        let r = evaluate(
            &set(&[("b", "zzzz", &["yes"]), ("a", "yes", &["yes"])]),
            DEFAULT_TAU,
        )
        .unwrap();
        assert_eq!(r.anls, 0.5);
        assert_eq!(r.rows[0].id, "a");
        assert!(r.to_table().contains("mean"));
        assert_eq!(
            evaluate(&PredictionSet::default(), DEFAULT_TAU),
            Err(MetricError::Empty)
        );
        assert_eq!(
            evaluate(&set(&[("a", "x", &["x"]), ("a", "y", &["y"])]), DEFAULT_TAU),
            Err(MetricError::DuplicateId("a".into()))
        );
        assert_eq!(
            evaluate(&set(&[("a", "x", &[])]), DEFAULT_TAU),
            Err(MetricError::EmptyGolds("a".into()))
        );
    }

    proptest! {
        #[test]
        fn report_means_equal_row_means(rows in prop::collection::vec(("[a-c ]{0,6}", prop::collection::vec("[a-c ]{0,6}", 1..3)), 1..12)) {
            let entries = rows.iter().enumerate().map(|(i, (p, g))| PredictionEntry {
                id: format!("q{i:02}"),
                prediction: p.clone(),
                golds: g.clone(),
            }).collect();
            let r = evaluate(&PredictionSet { entries }, DEFAULT_TAU).unwrap();
            let n = r.rows.len() as f64;
            prop_assert!((r.anls - r.rows.iter().map(|x| x.anls).sum::<f64>() / n).abs() < 1e-12);
            prop_assert!((r.em - r.rows.iter().map(|x| x.em).sum::<f64>() / n).abs() < 1e-12);
            prop_assert!((r.macro_f1 - r.rows.iter().map(|x| x.f1).sum::<f64>() / n).abs() < 1e-12);
        }

        #[test]
        fn metrics_ignore_gold_order(p in "[ab ]{0,5}", mut g in prop::collection::vec("[ab ]{0,5}", 1..4)) {
            let a = (anls_score(&p, &g, DEFAULT_TAU).unwrap(), exact_match(&p, &g).unwrap(), macro_f1(&p, &g).unwrap());
            g.reverse();
            let b = (anls_score(&p, &g, DEFAULT_TAU).unwrap(), exact_match(&p, &g).unwrap(), macro_f1(&p, &g).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
