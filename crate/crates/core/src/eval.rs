//! Grounding accuracy and subset breakdowns.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError};
use crate::scene::Scene;
use crate::trainer::PreparedSample;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("cannot evaluate an empty dataset")]
    Empty,
    #[error("{predictions} predictions for {truths} ground-truth ids")]
    Length { predictions: usize, truths: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakdownKey {
    OrderLength,
    Distractors,
}

impl BreakdownKey {
    pub fn name(self) -> &'static str {
        match self {
            BreakdownKey::OrderLength => "order_length",
            BreakdownKey::Distractors => "distractors",
        }
    }
}

impl fmt::Display for BreakdownKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BreakdownKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "order_length" => Ok(BreakdownKey::OrderLength),
            "distractors" => Ok(BreakdownKey::Distractors),
            other => Err(format!(
                "unknown breakdown {other:?} (expected order_length or distractors)"
            )),
        }
    }
}

/// Order-length bucket: `1`, `2&3`, `4&5`, or `6+`.
pub fn order_length_bucket(len: usize) -> &'static str {
    match len {
        0 | 1 => "1",
        2 | 3 => "2&3",
        4 | 5 => "4&5",
        _ => "6+",
    }
}

/// `hard` when more than two proposals share the target's class.
pub fn distractor_bucket(scene: &Scene, target_id: usize) -> &'static str {
    let class = scene.proposals()[target_id].class_id;
    if scene.count_class(class) > 2 {
        "hard"
    } else {
        "easy"
    }
}

/// Subset label of every sample under `key`.
pub fn subset_breakdown(samples: &[PreparedSample], key: BreakdownKey) -> Vec<&'static str> {
    samples
        .iter()
        .map(|s| match key {
            BreakdownKey::OrderLength => order_length_bucket(s.raw_order.len()),
            BreakdownKey::Distractors => distractor_bucket(&s.scene, s.target_id),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub count: usize,
    /// Keyed `"<breakdown>=<bucket>"`.
    pub subsets: BTreeMap<String, SubsetResult>,
    /// Free-form description of what was evaluated.
    pub config: serde_json::Value,
}

/// Report from predicted and true ids, with subset labels per breakdown.
pub fn report_from_predictions(
    predictions: &[usize],
    truths: &[usize],
    breakdowns: &[(BreakdownKey, Vec<&str>)],
) -> Result<EvalReport, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::Length {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits: Vec<bool> = predictions.iter().zip(truths).map(|(p, t)| p == t).collect();
    let correct = hits.iter().filter(|&&h| h).count();
    let mut subsets: BTreeMap<String, SubsetResult> = BTreeMap::new();
    for (key, labels) in breakdowns {
        for (label, &hit) in labels.iter().zip(&hits) {
            let e = subsets.entry(format!("{key}={label}")).or_insert(SubsetResult {
                accuracy: 0.0,
                correct: 0,
                count: 0,
            });
            e.count += 1;
            e.correct += hit as usize;
        }
    }
    for s in subsets.values_mut() {
        s.accuracy = s.correct as f64 / s.count as f64;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / truths.len() as f64,
        correct,
        count: truths.len(),
        subsets,
        config: serde_json::Value::Null,
    })
}

/// Argmax prediction of `model` for every sample.
pub fn predict(model: &Model, samples: &[PreparedSample]) -> Result<Vec<usize>, EvalError> {
    samples
        .iter()
        .map(|s| Ok(argmax(&model.predict(&s.input())?.scores)))
        .collect()
}

/// Grounding accuracy of `model` on `samples`, with the requested subset
/// breakdowns.
pub fn accuracy(model: &Model, samples: &[PreparedSample], keys: &[BreakdownKey]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let predictions = predict(model, samples)?;
    let truths: Vec<usize> = samples.iter().map(|s| s.target_id).collect();
    let breakdowns: Vec<_> = keys.iter().map(|&k| (k, subset_breakdown(samples, k))).collect();
    report_from_predictions(&predictions, &truths, &breakdowns)
}

/// Row norm of every proposal feature after each block, `F_1..F_{B+1}`.
pub fn dump_block_responses(model: &Model, sample: &PreparedSample) -> Result<Vec<Vec<f64>>, EvalError> {
    Ok(model.block_responses(&sample.input())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ClassVocab, Proposal};
    use std::sync::Arc;

    fn scene(classes: &[usize]) -> Scene {
        let vocab = Arc::new(ClassVocab::new(["chair", "table", "bed", "pillow"]).unwrap());
        let props = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Proposal::new(i, c, vec![[i as f64, 0.0, 0.0, 0.5, 0.5, 0.5]]).unwrap())
            .collect();
        Scene::new("s", vocab, props).unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }

    #[test]
    fn buckets() {
        assert_eq!(order_length_bucket(1), "1");
        assert_eq!(order_length_bucket(2), "2&3");
        assert_eq!(order_length_bucket(3), "2&3");
        assert_eq!(order_length_bucket(5), "4&5");
        assert_eq!(distractor_bucket(&scene(&[0, 0, 0, 0, 1]), 2), "hard");
        assert_eq!(distractor_bucket(&scene(&[0, 0, 0, 1]), 0), "hard");
        assert_eq!(distractor_bucket(&scene(&[0, 0, 1, 1]), 0), "easy");
        assert_eq!(distractor_bucket(&scene(&[2]), 0), "easy");
        assert_eq!(
            "distractors".parse::<BreakdownKey>().unwrap(),
            BreakdownKey::Distractors
        );
        assert!("colour".parse::<BreakdownKey>().is_err());
    }

    #[test]
    fn oracle_and_anti_oracle() {
        let truths = vec![0, 2, 1, 3];
        let scores: Vec<Vec<f64>> = truths
            .iter()
            .map(|&t| (0..4).map(|i| if i == t { 1.0 } else { 0.1 * i as f64 }).collect())
            .collect();
        let oracle: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let r = report_from_predictions(&oracle, &truths, &[]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let anti: Vec<usize> = scores
            .iter()
            .map(|s| argmax(&s.iter().map(|x| -x).collect::<Vec<_>>()))
            .collect();
        let r = report_from_predictions(&anti, &truths, &[]).unwrap();
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn subsets_partition_the_samples() {
        let labels = vec!["1", "2&3", "2&3", "4&5", "2&3"];
        let r = report_from_predictions(
            &[0, 1, 2, 3, 4],
            &[0, 1, 0, 3, 0],
            &[(BreakdownKey::OrderLength, labels)],
        )
        .unwrap();
        assert_eq!(r.correct, 3);
        let total: usize = r.subsets.values().map(|s| s.count).sum();
        assert_eq!(total, r.count);
        assert_eq!(r.subsets["order_length=2&3"].correct, 1);
        assert_eq!(r.subsets["order_length=2&3"].count, 3);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert_eq!(report_from_predictions(&[], &[], &[]), Err(EvalError::Empty));
        assert!(matches!(
            report_from_predictions(&[1], &[], &[]),
            Err(EvalError::Length { .. })
        ));
    }
}
