//! Classification metrics and stratified bootstrap intervals.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::seed;

/// Area under the ROC curve as the Mann–Whitney statistic; ties count 1/2.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = n - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((rank_sum - (np * (np + 1)) as f64 / 2.0) / (np as f64 * nn as f64))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&l, &p) in labels.iter().zip(predicted) {
        m[l][p] += 1;
    }
    m
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "macro_f1", "sensitivity", "specificity", "auc"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
}

impl Metrics {
    pub fn get(&self, name: &str) -> f64 {
        match name {
            "accuracy" => self.accuracy,
            "macro_f1" => self.macro_f1,
            "sensitivity" => self.sensitivity,
            "specificity" => self.specificity,
            "auc" => self.auc,
            _ => panic!("unknown metric {name}"),
        }
    }
}

/// Point metrics from per-case class probabilities.
///
/// Binary: sensitivity and specificity treat class 1 as positive, AUC uses
/// the class-1 probability. More classes: every metric is the macro average
/// of its one-vs-rest version. Predictions are the argmax class.
pub fn compute_metrics(labels: &[usize], probs: &[Vec<f64>], classes: usize) -> Result<Metrics> {
    if labels.len() != probs.len() || labels.is_empty() {
        return Err(Error::Evaluation("labels and probabilities must be non-empty and aligned".into()));
    }
    let mut present = vec![false; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::Evaluation(format!("label {l} outside {classes} classes")));
        }
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Evaluation("evaluation needs at least two classes present".into()));
    }
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = confusion_matrix(labels, &pred, classes);
    let n = labels.len() as f64;
    let correct: usize = (0..classes).map(|c| cm[c][c]).sum();
    let mut f1 = Vec::new();
    let mut recall = Vec::new();
    let mut spec = Vec::new();
    let mut aucs = Vec::new();
    for c in 0..classes {
        let tp = cm[c][c] as f64;
        let fn_: f64 = (0..classes).filter(|&p| p != c).map(|p| cm[c][p] as f64).sum();
        let fp: f64 = (0..classes).filter(|&t| t != c).map(|t| cm[t][c] as f64).sum();
        let tn = n - tp - fn_ - fp;
        f1.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) });
        recall.push(if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 });
        spec.push(if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 });
        if present[c] {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            if let Some(a) = auc(&scores, &pos) {
                aucs.push(a);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (sensitivity, specificity, auc_v) = if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        (recall[1], recall[0], auc(&scores, &pos).expect("both classes present"))
    } else {
        (mean(&recall), mean(&spec), mean(&aucs))
    };
    Ok(Metrics {
        accuracy: correct as f64 / n,
        macro_f1: mean(&f1),
        sensitivity,
        specificity,
        auc: auc_v,
    })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resample indices class by class with replacement, keeping each class count.
pub fn stratified_resample(labels: &[usize], classes: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = Vec::with_capacity(labels.len());
    for members in &by_class {
        for _ in 0..members.len() {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Metric values of each bootstrap resample, plus 95% percentile intervals.
pub fn bootstrap(
    labels: &[usize],
    probs: &[Vec<f64>],
    classes: usize,
    resamples: usize,
    seed_value: u64,
) -> Result<(Vec<(String, Interval)>, Vec<Metrics>)> {
    let point = compute_metrics(labels, probs, classes)?;
    let samples: Vec<Result<Metrics>> = par::map_range(resamples, |b| {
        let mut rng = seed::rng(seed::derive_indexed(seed_value, "bootstrap", b as u64));
        let idx = stratified_resample(labels, classes, &mut rng);
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
        compute_metrics(&l, &p, classes)
    });
    let samples: Vec<Metrics> = samples.into_iter().collect::<Result<_>>()?;
    let intervals = METRIC_NAMES
        .iter()
        .map(|&name| {
            let mut v: Vec<f64> = samples.iter().map(|m| m.get(name)).collect();
            v.sort_by(f64::total_cmp);
            let (lower, upper) = if v.is_empty() {
                (point.get(name), point.get(name))
            } else {
                (percentile(&v, 0.025), percentile(&v, 0.975))
            };
            (
                name.to_string(),
                Interval {
                    point: point.get(name),
                    lower,
                    upper,
                },
            )
        })
        .collect();
    Ok((intervals, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub case_id: String,
    pub label: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub num_classes: usize,
    pub num_cases: usize,
    pub bootstrap_resamples: usize,
    pub metrics: Vec<(String, Interval)>,
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<CasePrediction>,
}

impl EvaluationReport {
    pub fn new(predictions: Vec<CasePrediction>, classes: usize, resamples: usize, seed_value: u64) -> Result<Self> {
        let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
        let probs: Vec<Vec<f64>> = predictions.iter().map(|p| p.probabilities.clone()).collect();
        let (metrics, _) = bootstrap(&labels, &probs, classes, resamples, seed_value)?;
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        Ok(Self {
            num_classes: classes,
            num_cases: labels.len(),
            bootstrap_resamples: resamples,
            metrics,
            confusion: confusion_matrix(&labels, &pred, classes),
            predictions,
        })
    }

    pub fn metric(&self, name: &str) -> Option<&Interval> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, i)| i)
    }

    /// Write `metrics.json`, `metrics.csv` and `predictions.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let p = dir.join("metrics.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let mut csv = String::from("metric,point,ci_lower,ci_upper\n");
        for (name, i) in &self.metrics {
            csv.push_str(&format!("{name},{},{},{}\n", i.point, i.lower, i.upper));
        }
        let p = dir.join("metrics.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("predictions.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
        let header: Vec<String> = (0..self.num_classes).map(|c| format!("prob_{c}")).collect();
        writeln!(f, "case_id,label,predicted,{}", header.join(",")).map_err(|e| Error::io(&p, e))?;
        for c in &self.predictions {
            let probs: Vec<String> = c.probabilities.iter().map(|x| x.to_string()).collect();
            writeln!(f, "{},{},{},{}", c.case_id, c.label, argmax(&c.probabilities), probs.join(","))
                .map_err(|e| Error::io(&p, e))?;
        }
        f.flush().map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.9, 0.2, 0.8];
        let p = [false, true, false, true];
        assert_eq!(auc(&s, &p), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            s in proptest::collection::vec(-3.0f64..3.0, 4..40),
            flips in proptest::collection::vec(any::<bool>(), 40),
        ) {
            let mut pos: Vec<bool> = flips[..s.len()].to_vec();
            pos[0] = true;
            pos[1] = false;
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert!((auc(&s, &pos).unwrap() - auc(&t, &pos).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictor() {
        let labels = vec![0, 1, 0, 1, 1];
        let probs: Vec<Vec<f64>> = labels.iter().map(|&l| if l == 1 { vec![0.1, 0.9] } else { vec![0.8, 0.2] }).collect();
        let (iv, _) = bootstrap(&labels, &probs, 2, 200, 1).unwrap();
        for (_, i) in iv {
            assert_eq!((i.point, i.lower, i.upper), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(compute_metrics(&[1, 1], &[vec![0.2, 0.8], vec![0.3, 0.7]], 2), Err(Error::Evaluation(_))));
    }

    #[test]
    fn resamples_keep_class_counts() {
        let labels = vec![0, 0, 1, 2, 2, 2, 1];
        let mut rng = seed::rng(3);
        for _ in 0..20 {
            let idx = stratified_resample(&labels, 3, &mut rng);
            let mut counts = [0; 3];
            for i in idx {
                counts[labels[i]] += 1;
            }
            assert_eq!(counts, [2, 2, 3]);
        }
    }

    #[test]
    fn multiclass_macro_metrics() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let probs = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.2, 0.6, 0.2],
            vec![0.1, 0.5, 0.4],
            vec![0.6, 0.3, 0.1],
            vec![0.3, 0.4, 0.3],
            vec![0.1, 0.2, 0.7],
        ];
        let m = compute_metrics(&labels, &probs, 3).unwrap();
        assert!((m.accuracy - 5.0 / 6.0).abs() < 1e-12);
        // recalls (1, 1, 0.5); specificities (1, 0.75, 1)
        assert!((m.sensitivity - 2.5 / 3.0).abs() < 1e-12);
        assert!((m.specificity - 2.75 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!((percentile(&v, 0.5) - 2.5).abs() < 1e-12);
    }
}
