//! Task metrics: accuracy, point-adjusted F1, SMAPE/MASE/OWA, masked MSE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input for {0}")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no series had a usable seasonal scale")]
    NoUsableSeries,
}

/// Fraction of predictions matching labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty("accuracy"));
    }
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when truth has no anomalies and nothing was predicted; the
    /// scores are defined as zero in that case.
    pub degenerate: bool,
}

/// Point-adjusted precision/recall/F1: if any point inside a contiguous
/// true-anomaly segment is predicted positive, every prediction in that
/// segment is set positive before counting.
pub fn f1_point_adjusted(pred: &[bool], truth: &[bool]) -> Result<F1Report, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let n = truth.len();
    let mut adjusted = pred.to_vec();
    let mut i = 0;
    while i < n {
        if truth[i] {
            let mut j = i;
            while j < n && truth[j] {
                j += 1;
            }
            if adjusted[i..j].iter().any(|&p| p) {
                for a in &mut adjusted[i..j] {
                    *a = true;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for k in 0..n {
        match (adjusted[k], truth[k]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let degenerate = truth.iter().all(|&t| !t) && pred.iter().all(|&p| !p);
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fnn == 0 {
        0.0
    } else {
        tp as f64 / (tp + fnn) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Report {
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// 200/H · Σ |y−ŷ| / (|y|+|ŷ|) with 0/0 terms counted as zero error.
pub fn smape(forecast: &[f64], actual: &[f64]) -> Result<f64, EvalError> {
    if forecast.is_empty() {
        return Err(EvalError::Empty("smape"));
    }
    if forecast.len() != actual.len() {
        return Err(EvalError::LengthMismatch {
            left: forecast.len(),
            right: actual.len(),
        });
    }
    let mut acc = 0.0;
    for (f, a) in forecast.iter().zip(actual) {
        let denom = f.abs() + a.abs();
        if denom > 0.0 {
            acc += (a - f).abs() / denom;
        }
    }
    Ok(200.0 * acc / forecast.len() as f64)
}

/// In-sample seasonal-naive mean absolute error, the MASE denominator.
fn seasonal_scale(insample: &[f64], m: usize) -> Option<f64> {
    if insample.len() <= m {
        return None;
    }
    let mut acc = 0.0;
    for t in m..insample.len() {
        acc += (insample[t] - insample[t - m]).abs();
    }
    let scale = acc / (insample.len() - m) as f64;
    if scale > 0.0 {
        Some(scale)
    } else {
        None
    }
}

/// Seasonal-naive forecast: repeat the last observed seasonal cycle.
pub fn naive2_forecast(insample: &[f64], m: usize, horizon: usize) -> Vec<f64> {
    let n = insample.len();
    (0..horizon)
        .map(|h| {
            if n >= m {
                insample[n - m + h % m]
            } else {
                insample[n - 1]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct M4Metrics {
    pub smape: f64,
    pub mase: f64,
    pub owa: f64,
    /// Series dropped because the in-sample seasonal denominator was zero.
    pub excluded: usize,
}

/// SMAPE/MASE/OWA over a collection, each series weighted equally. OWA is
/// measured against an internally computed seasonal-naive baseline.
pub fn m4_metrics(
    forecasts: &[Vec<f64>],
    actuals: &[Vec<f64>],
    insamples: &[Vec<f64>],
    m: usize,
) -> Result<M4Metrics, EvalError> {
    if forecasts.is_empty() {
        return Err(EvalError::Empty("m4_metrics"));
    }
    if forecasts.len() != actuals.len() || forecasts.len() != insamples.len() {
        return Err(EvalError::LengthMismatch {
            left: forecasts.len(),
            right: actuals.len().min(insamples.len()),
        });
    }
    let mut smape_sum = 0.0;
    let mut mase_sum = 0.0;
    let mut smape_naive_sum = 0.0;
    let mut mase_naive_sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for ((f, a), x) in forecasts.iter().zip(actuals).zip(insamples) {
        let Some(scale) = seasonal_scale(x, m) else {
            excluded += 1;
            continue;
        };
        let naive = naive2_forecast(x, m, a.len());
        let mae: f64 =
            f.iter().zip(a).map(|(p, y)| (y - p).abs()).sum::<f64>() / a.len() as f64;
        let mae_naive: f64 =
            naive.iter().zip(a).map(|(p, y)| (y - p).abs()).sum::<f64>() / a.len() as f64;
        smape_sum += smape(f, a)?;
        smape_naive_sum += smape(&naive, a)?;
        mase_sum += mae / scale;
        mase_naive_sum += mae_naive / scale;
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::NoUsableSeries);
    }
    let n = used as f64;
    let smape_avg = smape_sum / n;
    let mase_avg = mase_sum / n;
    let smape_naive = smape_naive_sum / n;
    let mase_naive = mase_naive_sum / n;
    let smape_ratio = if smape_naive > 0.0 {
        smape_avg / smape_naive
    } else if smape_avg == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let mase_ratio = if mase_naive > 0.0 {
        mase_avg / mase_naive
    } else if mase_avg == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(M4Metrics {
        smape: smape_avg,
        mase: mase_avg,
        owa: 0.5 * (smape_ratio + mase_ratio),
        excluded,
    })
}

/// MSE over the masked scalar positions, in the original scale.
/// `coords` are (variate, time) pairs.
pub fn masked_mse(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    coords: &[(usize, usize)],
) -> Result<f64, EvalError> {
    if coords.is_empty() {
        return Err(EvalError::Empty("masked_mse"));
    }
    let mut acc = 0.0;
    for &(c, t) in coords {
        let e = pred[c][t] - truth[c][t];
        acc += e * e;
    }
    Ok(acc / coords.len() as f64)
}

/// A named bundle of scalar metrics with its evaluation configuration,
/// serialized as one JSON object per line in report files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_evaluated: usize,
    pub config: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(task: &str, n_evaluated: usize) -> Self {
        MetricReport {
            task: task.to_string(),
            metrics: BTreeMap::new(),
            n_evaluated,
            config: BTreeMap::new(),
        }
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn config_entry(mut self, name: &str, value: impl ToString) -> Self {
        self.config.insert(name.to_string(), value.to_string());
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basic() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn point_adjustment_expands_segment_hit() {
        // truth segment {3,4,5}, single predicted point inside it
        let mut truth = vec![false; 8];
        for i in 3..=5 {
            truth[i] = true;
        }
        let mut pred = vec![false; 8];
        pred[4] = true;
        let r = f1_point_adjusted(&pred, &truth).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn all_negative_prediction_scores_zero() {
        let mut truth = vec![false; 8];
        truth[2] = true;
        let r = f1_point_adjusted(&[false; 8], &truth).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn false_positive_outside_segment() {
        // truth segment of length 3 fully hit, one stray positive elsewhere
        let mut truth = vec![false; 10];
        for i in 3..=5 {
            truth[i] = true;
        }
        let mut pred = vec![false; 10];
        pred[4] = true;
        pred[8] = true;
        let r = f1_point_adjusted(&pred, &truth).unwrap();
        assert!((r.precision - 0.75).abs() < 1e-15);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 6.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_case_flagged() {
        let r = f1_point_adjusted(&[false; 5], &[false; 5]).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn adjustment_never_decreases_recall() {
        // property over a small seeded sweep
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = 30;
            let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
            let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let adjusted = f1_point_adjusted(&pred, &truth).unwrap();
            // raw recall without adjustment
            let tp = pred.iter().zip(&truth).filter(|(p, t)| **p && **t).count();
            let pos = truth.iter().filter(|&&t| t).count();
            let raw = if pos == 0 { 0.0 } else { tp as f64 / pos as f64 };
            assert!(adjusted.recall >= raw - 1e-15);
        }
    }

    #[test]
    fn smape_single_point() {
        let v = smape(&[110.0], &[100.0]).unwrap();
        assert!((v - 200.0 * 10.0 / 210.0).abs() < 1e-9);
        assert!((v - 9.5238).abs() < 1e-3);
    }

    #[test]
    fn smape_zero_over_zero_counts_as_zero() {
        assert_eq!(smape(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn perfect_forecast_zeroes_everything() {
        let insample: Vec<f64> = (0..20).map(|t| (t % 4) as f64 + 0.1 * t as f64).collect();
        let actual = vec![1.0, 2.0, 3.0, 4.0];
        let m = m4_metrics(&[actual.clone()], &[actual.clone()], &[insample], 4).unwrap();
        assert_eq!(m.smape, 0.0);
        assert_eq!(m.mase, 0.0);
        assert_eq!(m.owa, 0.0);
        assert_eq!(m.excluded, 0);
    }

    #[test]
    fn forecast_equal_to_naive2_gives_owa_one() {
        let insample: Vec<f64> = (0..20)
            .map(|t| ((t * 7) % 5) as f64 + (t as f64 * 0.9).sin())
            .collect();
        let actual = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
        let naive = naive2_forecast(&insample, 5, actual.len());
        let m = m4_metrics(&[naive], &[actual], &[insample], 5).unwrap();
        assert!((m.owa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_insample_excluded() {
        let flat = vec![2.0; 12];
        let varied: Vec<f64> = (0..12).map(|t| t as f64).collect();
        let m = m4_metrics(
            &[vec![2.0, 2.0], vec![12.0, 13.0]],
            &[vec![2.5, 2.0], vec![12.0, 13.0]],
            &[flat, varied],
            1,
        )
        .unwrap();
        assert_eq!(m.excluded, 1);
        // remaining series is a perfect forecast
        assert_eq!(m.smape, 0.0);
    }

    #[test]
    fn m4_invariant_to_series_order() {
        let ins1: Vec<f64> = (0..16).map(|t| (t as f64 * 0.7).sin()).collect();
        let ins2: Vec<f64> = (0..16).map(|t| (t as f64 * 1.3).cos() * 2.0).collect();
        let a = m4_metrics(
            &[vec![0.1, 0.2], vec![1.0, -1.0]],
            &[vec![0.2, 0.1], vec![0.5, -0.5]],
            &[ins1.clone(), ins2.clone()],
            4,
        )
        .unwrap();
        let b = m4_metrics(
            &[vec![1.0, -1.0], vec![0.1, 0.2]],
            &[vec![0.5, -0.5], vec![0.2, 0.1]],
            &[ins2, ins1],
            4,
        )
        .unwrap();
        assert_eq!(a.smape, b.smape);
        assert_eq!(a.mase, b.mase);
        assert_eq!(a.owa, b.owa);
    }

    #[test]
    fn masked_mse_examples() {
        let truth = vec![vec![0.0, 0.0, 5.0, 5.0]];
        let pred = vec![vec![1.0, -1.0, 5.0, 5.0]];
        let v = masked_mse(&pred, &truth, &[(0, 0), (0, 1)]).unwrap();
        assert_eq!(v, 1.0);
        let zero = masked_mse(&truth, &truth, &[(0, 2)]).unwrap();
        assert_eq!(zero, 0.0);
        assert!(masked_mse(&pred, &truth, &[]).is_err());
    }

    #[test]
    fn metric_report_round_trips() {
        let r = MetricReport::new("classify", 16)
            .metric("accuracy", 0.9375)
            .config_entry("seed", 11u64);
        let line = r.to_json_line();
        let back: MetricReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back.task, "classify");
        assert_eq!(back.metrics["accuracy"], 0.9375);
        assert_eq!(back.n_evaluated, 16);
        assert_eq!(back.config["seed"], "11");
    }
}
