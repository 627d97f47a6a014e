//! Training objectives with exact gradients: MSE, EMD over score histograms, the
//! margin triplet term, the batch relative-relation loss and their weighted total.

use serde::{Deserialize, Serialize};

use crate::diffmath::exact::{grow_expansion, round_expansion, two_sum};
use crate::error::{Error, Result};
use crate::fusion::net::{OutputMode, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode: OutputMode,
    pub lambda: f64,
    pub emd_exponent: f64,
    pub buckets: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: OutputMode::Score,
            lambda: 0.05,
            emd_exponent: 2.0,
            buckets: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid("loss", "lambda must be finite and >= 0"));
        }
        if self.buckets < 2 {
            return Err(Error::invalid("loss", "buckets must be >= 2"));
        }
        if !(self.emd_exponent >= 1.0) {
            return Err(Error::invalid("loss", "EMD exponent must be >= 1"));
        }
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to `p`.
pub fn mse_loss(p: &[f64], g: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.len() != g.len() {
        return Err(Error::shape(
            "mse_loss",
            format!("{} predictions vs {} targets", p.len(), g.len()),
        ));
    }
    if p.is_empty() {
        return Err(Error::Empty("mse_loss"));
    }
    let n = p.len() as f64;
    let loss = p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let grad = p.iter().zip(g).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok((loss, grad))
}

const NORMALIZATION_TOL: f64 = 1e-6;

fn check_distribution(name: &str, d: &[f64]) -> Result<()> {
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(
            "emd_loss",
            format!("{name} has negative or non-finite mass"),
        ));
    }
    let sum: f64 = d.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(
            "emd_loss",
            format!("{name} sums to {sum}, not 1"),
        ));
    }
    Ok(())
}

/// Earth mover's distance between two normalized histograms over ordered buckets:
/// `((1/B) Σ_k |CDF_p(k) − CDF_g(k)|^r)^(1/r)`, with the gradient wrt `p`.
pub fn emd_loss(p: &[f64], g: &[f64], r: f64) -> Result<(f64, Vec<f64>)> {
    if p.len() != g.len() || p.is_empty() {
        return Err(Error::shape(
            "emd_loss",
            format!("{} vs {} buckets", p.len(), g.len()),
        ));
    }
    if !(r >= 1.0) {
        return Err(Error::invalid("emd_loss", "exponent r must be >= 1"));
    }
    check_distribution("prediction", p)?;
    check_distribution("target", g)?;
    Ok(emd_unchecked(p, g, r))
}

/// The EMD formula without the normalization checks (the gradient checker
/// perturbs single buckets).
pub(crate) fn emd_unchecked(p: &[f64], g: &[f64], r: f64) -> (f64, Vec<f64>) {
    let b = p.len();
    let mut diffs = Vec::with_capacity(b);
    let (mut cp, mut cg) = (0.0, 0.0);
    for k in 0..b {
        cp += p[k];
        cg += g[k];
        diffs.push(cp - cg);
    }
    let s = diffs.iter().map(|d| d.abs().powf(r)).sum::<f64>() / b as f64;
    let loss = s.powf(1.0 / r);
    let mut grad = vec![0.0; b];
    if s > 0.0 {
        let scale = s.powf(1.0 / r - 1.0) / b as f64;
        let d_cdf: Vec<f64> = diffs
            .iter()
            .map(|&d| scale * d.abs().powf(r - 1.0) * sign(d))
            .collect();
        // dL/dp_m = Σ_{k >= m} dL/dCDF_k
        let mut acc = 0.0;
        for m in (0..b).rev() {
            acc += d_cdf[m];
            grad[m] = acc;
        }
    }
    (loss, grad)
}

/// Sign with `sign(0) = 0`, the subgradient convention for `|x|`.
#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|a − b|` as an exact pair `(hi, lo)` plus the sign of `a − b`.
#[inline]
fn abs_diff_exact(a: f64, b: f64) -> (f64, f64, f64) {
    let (s, e) = two_sum(a, -b);
    let sg = sign(s);
    (s.abs(), e * sg, sg)
}

/// Gradients of one triplet term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TripletGrad {
    pub p_i: f64,
    pub p_j: f64,
    pub p_k: f64,
    pub g_j: f64,
    pub g_k: f64,
}

/// `max(0, |p_i − p_j| − |p_i − p_k| + |g_j − g_k|)` and its subgradients.
///
/// The argument is summed exactly, so a perfect prediction (`p = g` on an
/// ordered triple) yields exactly 0. The hinge is inactive at exactly 0 and
/// `d|x|/dx = 0` at `x = 0`.
pub fn triplet_relative(p_i: f64, p_j: f64, p_k: f64, g_j: f64, g_k: f64) -> (f64, TripletGrad) {
    let mut e = Vec::with_capacity(6);
    let d = triplet_into(&mut e, p_i, p_j, p_k, g_j, g_k);
    (round_expansion(&e), d.unwrap_or_default())
}

/// Add an active triplet's hinge argument to the expansion `acc` and return its
/// subgradients; inactive triplets leave `acc` untouched and return `None`.
fn triplet_into(acc: &mut Vec<f64>, p_i: f64, p_j: f64, p_k: f64, g_j: f64, g_k: f64) -> Option<TripletGrad> {
    let (a_hi, a_lo, s_ij) = abs_diff_exact(p_i, p_j);
    let (b_hi, b_lo, s_ik) = abs_diff_exact(p_i, p_k);
    let (m_hi, m_lo, s_jk) = abs_diff_exact(g_j, g_k);
    let terms = [a_lo, -b_lo, m_lo, a_hi, -b_hi, m_hi];
    let mut e = Vec::with_capacity(6);
    for t in terms {
        grow_expansion(&mut e, t);
    }
    // the largest component of a nonoverlapping expansion carries its sign
    if e.last().is_none_or(|&top| top <= 0.0) {
        return None;
    }
    for t in e {
        grow_expansion(acc, t);
    }
    Some(TripletGrad {
        p_i: s_ij - s_ik,
        p_j: -s_ij,
        p_k: s_ik,
        g_j: s_jk,
        g_k: -s_jk,
    })
}

/// Samples of one batch ordered by ground truth, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedBatch {
    pub g: Vec<f64>,
    pub p: Vec<f64>,
    /// Position of each sample in the unsorted input.
    pub order: Vec<usize>,
}

impl SortedBatch {
    /// Sort by `g` descending; ties keep ascending original index.
    pub fn from_unsorted(g: &[f64], p: &[f64]) -> Result<Self> {
        if g.len() != p.len() {
            return Err(Error::shape(
                "sorted_batch",
                format!("{} labels vs {} predictions", g.len(), p.len()),
            ));
        }
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
        Ok(Self {
            g: order.iter().map(|&i| g[i]).collect(),
            p: order.iter().map(|&i| p[i]).collect(),
            order,
        })
    }

    /// Wrap already-sorted vectors, checking that `g` is non-increasing.
    pub fn new(g: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if g.len() != p.len() {
            return Err(Error::shape(
                "sorted_batch",
                format!("{} labels vs {} predictions", g.len(), p.len()),
            ));
        }
        if g.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid("sorted_batch", "ground truth must be non-increasing"));
        }
        let order = (0..g.len()).collect();
        Ok(Self { g, p, order })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }
}

/// Relative-relation loss over a sorted batch and its gradient wrt `p` (sorted order).
///
/// With 1-based positions, each anchor `i in 3..=b-2` is paired with its
/// upper neighbours as `(i, j, j-1)` for `j in 2..i` and its lower neighbours
/// as `(i, j, j+1)` for `j in i+1..b`; anchor sums are scaled by `1/(b-3)` and
/// the anchor average by `1/(b-4)`.
pub fn relative_relation_loss(batch: &SortedBatch) -> Result<(f64, Vec<f64>)> {
    let b = batch.len();
    if b < 5 {
        return Err(Error::BatchTooSmall(b));
    }
    let (p, g) = (&batch.p, &batch.g);
    let inner = 1.0 / (b - 3) as f64;
    let outer = 1.0 / (b - 4) as f64;
    let w = inner * outer;
    let mut grad = vec![0.0; b];
    // every active hinge lands in one exact sum that is rounded once, so the
    // value is a function of the exact loss alone
    let mut sum = Vec::new();
    // 0-based: anchor a in 2..=b-3
    for a in 2..=b - 3 {
        let pairs = (1..a).map(|j| (j, j - 1)).chain((a + 1..b - 1).map(|j| (j, j + 1)));
        for (j, k) in pairs {
            if let Some(d) = triplet_into(&mut sum, p[a], p[j], p[k], g[j], g[k]) {
                grad[a] += w * d.p_i;
                grad[j] += w * d.p_j;
                grad[k] += w * d.p_k;
            }
        }
    }
    Ok(((round_expansion(&sum) * inner) * outer, grad))
}

/// Supervision target for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub score: f64,
    pub distribution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub supervision: f64,
    /// `None` when the relative term was skipped.
    pub relative: Option<f64>,
    /// Gradient wrt each sample's scalar score.
    pub d_score: Vec<f64>,
    /// Gradient wrt each sample's distribution (distribution mode only).
    pub d_dist: Option<Vec<Vec<f64>>>,
}

/// `supervision + λ·relative` over one batch, which must already be sorted by
/// label score descending.
///
/// Supervision is MSE on scores in score mode and mean per-sample EMD in
/// distribution mode; the relative term always uses scalar scores. Set
/// `relative_active = false` to drop the relative term (λ treated as 0).
pub fn total_loss(
    preds: &[Prediction],
    labels: &[Label],
    cfg: &LossConfig,
    relative_active: bool,
) -> Result<BatchLoss> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Empty("total_loss"));
    }
    let n = preds.len();
    let p: Vec<f64> = preds.iter().map(|x| x.score).collect();
    let g: Vec<f64> = labels.iter().map(|x| x.score).collect();
    let (supervision, mut d_score, d_dist) = match cfg.mode {
        OutputMode::Score => {
            let (l, d) = mse_loss(&p, &g)?;
            (l, d, None)
        }
        OutputMode::Distribution => {
            let mut sum = 0.0;
            let mut dd = Vec::with_capacity(n);
            for (pred, label) in preds.iter().zip(labels) {
                let pd = pred.distribution.as_deref().ok_or_else(|| {
                    Error::invalid("total_loss", "distribution mode needs predicted distributions")
                })?;
                let gd = label.distribution.as_deref().ok_or_else(|| {
                    Error::invalid("total_loss", "distribution mode needs label distributions")
                })?;
                let (l, d) = emd_loss(pd, gd, cfg.emd_exponent)?;
                sum += l;
                dd.push(d.into_iter().map(|v| v / n as f64).collect());
            }
            (sum / n as f64, vec![0.0; n], Some(dd))
        }
    };
    let mut total = supervision;
    let mut relative = None;
    if relative_active && cfg.lambda > 0.0 {
        let batch = SortedBatch::new(g, p)?;
        let (l, d) = relative_relation_loss(&batch)?;
        total += cfg.lambda * l;
        d_score.iter_mut().zip(&d).for_each(|(a, b)| *a += cfg.lambda * b);
        relative = Some(l);
    }
    Ok(BatchLoss {
        total,
        supervision,
        relative,
        d_score,
        d_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Index-by-index transcription of the double sum with 1-based indices.
    fn literal(p: &[f64], g: &[f64]) -> f64 {
        let b = p.len();
        let trp = |i: usize, j: usize, k: usize| {
            let (pi, pj, pk) = (p[i - 1], p[j - 1], p[k - 1]);
            let (gj, gk) = (g[j - 1], g[k - 1]);
            f64::max(0.0, (pi - pj).abs() - (pi - pk).abs() + (gj - gk).abs())
        };
        let mut outer = 0.0;
        for i in 3..=b - 2 {
            let mut s = 0.0;
            for j in 2..=i - 1 {
                s += trp(i, j, j - 1);
            }
            for j in i + 1..=b - 1 {
                s += trp(i, j, j + 1);
            }
            outer += s / (b - 3) as f64;
        }
        outer / (b - 4) as f64
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(mse_loss(&[2.0], &[0.0]).unwrap().0, 4.0);
        assert_eq!(mse_loss(&[1.0, 3.0], &[2.0, 2.0]).unwrap().0, 1.0);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn one_hot(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; 10];
        v[k] = 1.0;
        v
    }

    #[test]
    fn emd_examples() {
        let d = [0.05, 0.1, 0.2, 0.3, 0.2, 0.1, 0.05, 0.0, 0.0, 0.0];
        assert_eq!(emd_loss(&d, &d, 2.0).unwrap().0, 0.0);
        let l = emd_loss(&one_hot(0), &one_hot(1), 2.0).unwrap().0;
        assert!((l - 0.1f64.sqrt()).abs() < 1e-12);
        let l = emd_loss(&one_hot(0), &one_hot(2), 2.0).unwrap().0;
        assert!((l - 0.2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn emd_rejects_unnormalized() {
        let mut bad = one_hot(3);
        bad[4] = 0.01;
        assert!(emd_loss(&bad, &one_hot(0), 2.0).is_err());
        let mut neg = one_hot(3);
        neg[0] = -0.5;
        neg[1] = 0.5;
        assert!(emd_loss(&neg, &one_hot(0), 2.0).is_err());
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_relative(5.0, 7.0, 9.0, 7.0, 9.0).0, 0.0);
        assert_eq!(triplet_relative(3.0, 3.0, 3.0, 5.0, 3.0).0, 2.0);
        let (v, _) = triplet_relative(5.0, 4.8, 4.6, 3.0, 1.0);
        assert!((v - 1.8).abs() < 1e-15, "{v}");
    }

    #[test]
    fn relative_examples() {
        let g = vec![9.0, 7.0, 5.0, 3.0, 1.0];
        let b = SortedBatch::new(g.clone(), g.clone()).unwrap();
        assert_eq!(relative_relation_loss(&b).unwrap().0, 0.0);
        let b = SortedBatch::new(g.clone(), vec![4.0; 5]).unwrap();
        assert_eq!(relative_relation_loss(&b).unwrap().0, 2.0);
        let b = SortedBatch::new(g, vec![8.0, 6.0, 5.0, 4.8, 4.6]).unwrap();
        let l = relative_relation_loss(&b).unwrap().0;
        // 4.8 and 4.6 are not representable, so 0.9 itself is out of reach
        assert!((l - 0.9).abs() < 1e-15, "{l}");
    }

    #[test]
    fn relative_rejects_small_batches() {
        let b = SortedBatch::new(vec![3.0, 2.0, 1.0, 0.0], vec![0.0; 4]).unwrap();
        assert!(matches!(relative_relation_loss(&b), Err(Error::BatchTooSmall(4))));
    }

    #[test]
    fn sorted_batch_is_stable_descending() {
        let b = SortedBatch::from_unsorted(&[2.0, 5.0, 2.0, 7.0], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(b.g, vec![7.0, 5.0, 2.0, 2.0]);
        assert_eq!(b.order, vec![3, 1, 0, 2]);
        assert_eq!(b.p, vec![0.4, 0.2, 0.1, 0.3]);
        assert!(SortedBatch::new(vec![1.0, 2.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let preds: Vec<Prediction> = [6.0, 4.0, 4.0, 4.0, 4.0]
            .iter()
            .map(|&s| Prediction {
                mode: OutputMode::Score,
                score: s,
                distribution: None,
            })
            .collect();
        let labels: Vec<Label> = [9.0, 7.0, 5.0, 3.0, 1.0]
            .iter()
            .map(|&s| Label {
                score: s,
                distribution: None,
            })
            .collect();
        let off = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let l0 = total_loss(&preds, &labels, &off, true).unwrap();
        assert_eq!(l0.relative, None);
        assert_eq!(l0.total, l0.supervision);
        let on = LossConfig::default();
        let l1 = total_loss(&preds, &labels, &on, true).unwrap();
        let rel = l1.relative.unwrap();
        assert!((l1.total - (l1.supervision + 0.05 * rel)).abs() < 1e-15);
        let skipped = total_loss(&preds, &labels, &on, false).unwrap();
        assert_eq!(skipped.total, l0.total);

        let perfect: Vec<Prediction> = labels
            .iter()
            .map(|l| Prediction {
                mode: OutputMode::Score,
                score: l.score,
                distribution: None,
            })
            .collect();
        assert_eq!(total_loss(&perfect, &labels, &on, true).unwrap().total, 0.0);
    }

    fn sorted_batch_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (5usize..=12).prop_flat_map(|b| {
            (
                proptest::collection::vec(1.0f64..10.0, b),
                proptest::collection::vec(1.0f64..10.0, b),
            )
                .prop_map(|(mut g, p)| {
                    g.sort_by(|a, b| b.total_cmp(a));
                    (g, p)
                })
        })
    }

    proptest! {
        #[test]
        fn matches_literal_transcription((g, p) in sorted_batch_strategy()) {
            let batch = SortedBatch::new(g.clone(), p.clone()).unwrap();
            let (l, _) = relative_relation_loss(&batch).unwrap();
            prop_assert!((l - literal(&p, &g)).abs() <= 1e-12);
        }

        #[test]
        fn shift_and_negation_invariant((g, p) in sorted_batch_strategy(), c in -5.0f64..5.0) {
            let base = relative_relation_loss(&SortedBatch::new(g.clone(), p.clone()).unwrap()).unwrap().0;
            let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
            let neg: Vec<f64> = p.iter().map(|v| -v).collect();
            let ls = relative_relation_loss(&SortedBatch::new(g.clone(), shifted).unwrap()).unwrap().0;
            let ln = relative_relation_loss(&SortedBatch::new(g, neg).unwrap()).unwrap().0;
            prop_assert!((ls - base).abs() <= 1e-12);
            prop_assert!((ln - base).abs() <= 1e-12);
        }

        #[test]
        fn perfect_prediction_is_exactly_zero(mut g in proptest::collection::vec(0.0f64..10.0, 5..20)) {
            g.sort_by(|a, b| b.total_cmp(a));
            let batch = SortedBatch::new(g.clone(), g).unwrap();
            prop_assert_eq!(relative_relation_loss(&batch).unwrap().0, 0.0);
        }

        #[test]
        fn emd_symmetric(a in proptest::collection::vec(0.0f64..1.0, 10), b in proptest::collection::vec(0.0f64..1.0, 10)) {
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().map(|x| x + 1e-4).sum();
                v.iter().map(|x| (x + 1e-4) / s).collect::<Vec<_>>()
            };
            let (a, b) = (norm(a), norm(b));
            let ab = emd_loss(&a, &b, 2.0).unwrap().0;
            let ba = emd_loss(&b, &a, 2.0).unwrap().0;
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn mse_nonnegative(p in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let g: Vec<f64> = p.iter().map(|v| v * 0.5 + 1.0).collect();
            let (l, _) = mse_loss(&p, &g).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(mse_loss(&p, &p).unwrap().0, 0.0);
        }
    }
}
