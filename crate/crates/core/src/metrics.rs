//! Correlation and accuracy statistics over predicted vs ground-truth scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::fusion::{Model, OutputMode};
use crate::losses::emd_loss;

pub const DEFAULT_THRESHOLD: f64 = 5.0;

fn check_pair(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(op, format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid(op, "need at least two samples"));
    }
    Ok(())
}

/// Pearson correlation with population moments.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("plcc", x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("plcc"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: Pearson on average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("srcc", x, y)?;
    plcc(&average_ranks(x), &average_ranks(y)).map_err(|e| match e {
        Error::UndefinedCorrelation(_) => Error::UndefinedCorrelation("srcc"),
        other => other,
    })
}

/// Fraction of samples on the same side of `threshold`. A value equal to the
/// threshold counts as low.
pub fn binary_accuracy(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "binary_accuracy",
            format!("{} vs {} values", pred.len(), gt.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Empty("binary_accuracy"));
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (**p > threshold) == (**g > threshold))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub prediction: f64,
    pub ground_truth: f64,
}

/// Evaluation summary. Correlations are `None` when undefined (a constant
/// prediction or label vector); `emd` is only reported in distribution mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
    pub accuracy: f64,
    pub mse: f64,
    pub emd: Option<f64>,
    pub n: usize,
    pub per_sample: Vec<SampleResult>,
}

impl EvalReport {
    /// Assemble a report from per-sample scalar scores.
    pub fn from_scores(ids: &[String], pred: &[f64], gt: &[f64], emd: Option<f64>) -> Result<Self> {
        if ids.len() != pred.len() || pred.len() != gt.len() {
            return Err(Error::shape("eval_report", "ids, predictions and labels differ in length"));
        }
        if pred.is_empty() {
            return Err(Error::Empty("eval_report"));
        }
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedCorrelation(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let (pc, sc) = if pred.len() < 2 {
            (None, None)
        } else {
            (defined(plcc(pred, gt))?, defined(srcc(pred, gt))?)
        };
        let n = pred.len() as f64;
        Ok(Self {
            plcc: pc,
            srcc: sc,
            accuracy: binary_accuracy(pred, gt, DEFAULT_THRESHOLD)?,
            mse: pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n,
            emd,
            n: pred.len(),
            per_sample: ids
                .iter()
                .zip(pred.iter().zip(gt))
                .map(|(id, (&p, &g))| SampleResult {
                    id: id.clone(),
                    prediction: p,
                    ground_truth: g,
                })
                .collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "eval report",
            detail: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "eval report",
            detail: e.to_string(),
        })
    }
}

/// Run the model over every sample (sharded across threads, results kept in
/// input order) and summarize.
pub fn evaluate_split(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluate_split"));
    }
    let mode = model.cfg.fusion.mode;
    let outputs: Vec<(f64, Option<f64>)> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.image)?;
            let emd = match (mode, &pred.distribution, &s.label.distribution) {
                (OutputMode::Distribution, Some(p), Some(g)) => Some(emd_loss(p, g, 2.0)?.0),
                _ => None,
            };
            Ok((pred.score, emd))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let gt: Vec<f64> = samples.iter().map(|s| s.label.score).collect();
    let pred: Vec<f64> = outputs.iter().map(|o| o.0).collect();
    let emd = match mode {
        OutputMode::Distribution => {
            let v: Vec<f64> = outputs.iter().filter_map(|o| o.1).collect();
            (v.len() == samples.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        }
        OutputMode::Score => None,
    };
    EvalReport::from_scores(&ids, &pred, &gt, emd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        assert!((plcc(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        assert!((srcc(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        let lin: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((plcc(&x, &lin).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((srcc(&x, &[9.0, 5.0, 2.0, 0.5]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert!(matches!(
            plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation("plcc"))
        ));
        assert!(matches!(
            srcc(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]),
            Err(Error::UndefinedCorrelation("srcc"))
        ));
        assert!(plcc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(binary_accuracy(&[6.0, 4.0], &[6.0, 4.0], 5.0).unwrap(), 1.0);
        assert_eq!(binary_accuracy(&[6.0, 4.0], &[4.0, 6.0], 5.0).unwrap(), 0.0);
        let a = binary_accuracy(&[6.0, 4.0, 5.1], &[5.5, 4.5, 4.9], 5.0).unwrap();
        assert!((a - 2.0 / 3.0).abs() < 1e-15);
        // equal to threshold is low on both sides
        assert_eq!(binary_accuracy(&[5.0], &[4.0], 5.0).unwrap(), 1.0);
        assert!(binary_accuracy(&[1.0], &[1.0, 2.0], 5.0).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn report_flags_constant_predictions() {
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let r = EvalReport::from_scores(&ids, &[5.0; 3], &[1.0, 2.0, 3.0], None).unwrap();
        assert_eq!(r.plcc, None);
        assert_eq!(r.srcc, None);
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn plcc_affine_invariance(
            x in proptest::collection::vec(-10.0f64..10.0, 3..30),
            a in 0.1f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
            prop_assume!(plcc(&x, &y).is_ok());
            let base = plcc(&x, &y).unwrap();
            let xa: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let xn: Vec<f64> = x.iter().map(|v| -a * v).collect();
            prop_assert!((plcc(&xa, &y).unwrap() - base).abs() < 1e-12);
            prop_assert!((plcc(&xn, &y).unwrap() + base).abs() < 1e-12);
        }

        #[test]
        fn srcc_rank_only(x in proptest::collection::vec(-3.0f64..3.0, 3..30)) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + (i % 3) as f64).collect();
            prop_assume!(srcc(&x, &y).is_ok());
            let base = srcc(&x, &y).unwrap();
            let tx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 - 1.0).collect();
            prop_assert!((srcc(&tx, &y).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn accuracy_shift_invariance(
            p in proptest::collection::vec(0.0f64..10.0, 1..30),
            c in -3.0f64..3.0,
        ) {
            let g: Vec<f64> = p.iter().rev().copied().collect();
            let base = binary_accuracy(&p, &g, 5.0).unwrap();
            let ps: Vec<f64> = p.iter().map(|v| v + c).collect();
            let gs: Vec<f64> = g.iter().map(|v| v + c).collect();
            // the shifted comparison is exact unless rounding moves a value across the threshold
            let crosses = p.iter().chain(&g).any(|v| ((v + c) - (5.0 + c)).signum() != (v - 5.0).signum());
            prop_assume!(!crosses);
            prop_assert_eq!(binary_accuracy(&ps, &gs, 5.0 + c).unwrap(), base);
        }
    }
}
