//! Accuracy, balanced accuracy and bootstrap dispersion.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::Execution;

pub const DEFAULT_BOOTSTRAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    BalancedAccuracy,
}

/// One scored question: canonical gold, normalized prediction and the class
/// used for balanced accuracy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub gold: String,
    pub prediction: String,
    pub group: String,
}

impl Scored {
    pub fn correct(&self) -> bool {
        self.prediction == self.gold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    pub bootstrap_std: f64,
    pub n_questions: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class_recall: BTreeMap<String, f64>,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

pub fn accuracy(preds: &[String], golds: &[String]) -> f64 {
    assert_eq!(preds.len(), golds.len(), "predictions and golds must align");
    if golds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / golds.len() as f64
}

/// Unweighted mean of per-class recall over the classes present in `classes`.
pub fn balanced_accuracy(preds: &[String], golds: &[String], classes: &[String]) -> (f64, BTreeMap<String, f64>) {
    assert!(preds.len() == golds.len() && golds.len() == classes.len(), "inputs must align");
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for ((p, g), c) in preds.iter().zip(golds).zip(classes) {
        let e = counts.entry(c.as_str()).or_default();
        e.1 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    let recalls: BTreeMap<String, f64> = counts
        .into_iter()
        .map(|(c, (hit, n))| (c.to_string(), hit as f64 / n as f64))
        .collect();
    let value = if recalls.is_empty() {
        0.0
    } else {
        recalls.values().sum::<f64>() / recalls.len() as f64
    };
    (value, recalls)
}

fn point(records: &[&Scored], metric: Metric) -> (f64, BTreeMap<String, f64>) {
    let preds: Vec<String> = records.iter().map(|r| r.prediction.clone()).collect();
    let golds: Vec<String> = records.iter().map(|r| r.gold.clone()).collect();
    match metric {
        Metric::Accuracy => (accuracy(&preds, &golds), BTreeMap::new()),
        Metric::BalancedAccuracy => {
            let classes: Vec<String> = records.iter().map(|r| r.group.clone()).collect();
            balanced_accuracy(&preds, &golds, &classes)
        }
    }
}

pub fn metric_value(records: &[Scored], metric: Metric) -> f64 {
    point(&records.iter().collect::<Vec<_>>(), metric).0
}

fn replicate_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ (i.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample standard deviation (ddof = 1) of the metric over `n` resamples of
/// the questions with replacement. Each replicate has its own seeded stream,
/// so the result does not depend on the execution strategy.
pub fn bootstrap_std(records: &[Scored], metric: Metric, n: usize, seed: u64, exec: Execution) -> f64 {
    if records.is_empty() || n < 2 {
        return 0.0;
    }
    let values = exec.map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(seed, i as u64));
        let sample: Vec<&Scored> = (0..records.len())
            .map(|_| &records[rng.random_range(0..records.len())])
            .collect();
        point(&sample, metric).0
    });
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

pub fn evaluate(records: &[Scored], metric: Metric, replicates: usize, seed: u64, exec: Execution) -> MetricReport {
    let (value, per_class_recall) = point(&records.iter().collect::<Vec<_>>(), metric);
    MetricReport {
        metric,
        value,
        bootstrap_std: bootstrap_std(records, metric, replicates, seed, exec),
        n_questions: records.len(),
        per_class_recall,
        bootstrap_replicates: replicates,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&s(&["A", "B"]), &s(&["A", "B"])), 1.0);
        assert_eq!(accuracy(&s(&["A", "INVALID"]), &s(&["A", "B"])), 0.5);
    }

    #[test]
    fn two_class_balanced() {
        let g = s(&["x", "x", "y"]);
        let p = s(&["x", "x", "x"]);
        let (v, r) = balanced_accuracy(&p, &g, &g);
        assert_eq!(v, 0.5);
        assert_eq!(r["x"], 1.0);
        assert_eq!(r["y"], 0.0);
    }

    fn scored(n: usize, correct: usize) -> Vec<Scored> {
        (0..n)
            .map(|i| Scored {
                id: i.to_string(),
                gold: "A".into(),
                prediction: if i < correct { "A".into() } else { "B".into() },
                group: "A".into(),
            })
            .collect()
    }

    #[test]
    fn bootstrap_of_perfect_set_is_zero() {
        assert_eq!(bootstrap_std(&scored(50, 50), Metric::Accuracy, 200, 1, Execution::Sequential), 0.0);
    }

    #[test]
    fn bootstrap_strategies_agree() {
        let r = scored(100, 50);
        let a = bootstrap_std(&r, Metric::Accuracy, 300, 7, Execution::Sequential);
        let b = bootstrap_std(&r, Metric::Accuracy, 300, 7, Execution::default());
        assert_eq!(a, b);
        assert_ne!(a, bootstrap_std(&r, Metric::Accuracy, 300, 8, Execution::Sequential));
    }
}
