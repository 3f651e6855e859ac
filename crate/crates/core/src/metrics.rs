//! Scoring of estimates against truth.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::special::{norm_cdf, norm_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMetrics {
    pub mse: f64,
    pub mae: f64,
    pub msre: f64,
    pub mare: f64,
}

pub fn error_metrics(estimates: &[f64], truth: &[f64]) -> Result<ErrorMetrics> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidInput(format!(
            "need equal nonempty lengths, got {} and {}",
            estimates.len(),
            truth.len()
        )));
    }
    if truth.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Domain("relative errors need positive truth".into()));
    }
    let n = truth.len() as f64;
    let mut m = ErrorMetrics {
        mse: 0.0,
        mae: 0.0,
        msre: 0.0,
        mare: 0.0,
    };
    for (e, t) in estimates.iter().zip(truth) {
        let d = e - t;
        m.mse += d * d / n;
        m.mae += d.abs() / n;
        m.msre += d * d / t / n;
        m.mare += d.abs() / t / n;
    }
    Ok(m)
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

pub type Interval = (f64, f64);

/// Equal-tailed credible interval of one quantity.
pub fn pointwise_ci(draws: &[f64], level: f64) -> Result<Interval> {
    if draws.len() < 100 {
        return Err(Error::InvalidInput(format!("{} draws, need at least 100", draws.len())));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidInput(format!("level {level} outside [0, 1]")));
    }
    let s = sorted(draws);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail)))
}

/// Simultaneous band over quantities from `draws[iteration][quantity]`.
///
/// Each band is `mean +- k * sd`, with `k` the `level` quantile over draws of
/// the largest standardised deviation, widened where needed to contain the
/// pointwise interval at the same level. Quantities with zero posterior spread
/// are excluded and returned as `None`.
pub fn joint_band(draws: &[Vec<f64>], level: f64) -> Result<Vec<Option<Interval>>> {
    if draws.len() < 500 {
        return Err(Error::InvalidInput(format!("{} draws, need at least 500", draws.len())));
    }
    let nq = draws[0].len();
    if draws.iter().any(|d| d.len() != nq) {
        return Err(Error::InvalidInput("ragged draw matrix".into()));
    }
    let columns: Vec<Vec<f64>> = (0..nq).map(|q| draws.iter().map(|d| d[q]).collect()).collect();
    let moments: Vec<(f64, f64)> = columns.iter().map(|c| mean_sd(c)).collect();
    let kept: Vec<usize> = (0..nq).filter(|&q| moments[q].1 > 0.0).collect();
    if kept.len() < nq {
        log::warn!("{} quantities with zero posterior spread excluded from the joint band", nq - kept.len());
    }
    let devs: Vec<f64> = draws
        .iter()
        .map(|d| {
            kept.iter()
                .map(|&q| ((d[q] - moments[q].0) / moments[q].1).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let k = quantile_sorted(&sorted(&devs), level);
    let mut out = vec![None; nq];
    for &q in &kept {
        let (m, s) = moments[q];
        let (lo, hi) = pointwise_ci(&columns[q], level)?;
        out[q] = Some(((m - k * s).min(lo), (m + k * s).max(hi)));
    }
    Ok(out)
}

pub fn covers(interval: Interval, truth: f64) -> bool {
    interval.0 <= truth && truth <= interval.1
}

/// Fraction of truths inside their intervals.
pub fn coverage(intervals: &[Interval], truth: &[f64]) -> Result<f64> {
    if intervals.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidInput("intervals and truth differ in length".into()));
    }
    Ok(intervals.iter().zip(truth).filter(|(i, t)| covers(**i, **t)).count() as f64 / truth.len() as f64)
}

/// Out-of-sample validation scores of predicted supports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictiveReport {
    pub n: usize,
    pub bias: f64,
    pub mspe: f64,
    pub mape: f64,
    pub pi_coverage_50: f64,
    pub pi_coverage_95: f64,
}

/// Score predictive draws per support against named truth values. Every
/// truth record must have a prediction and vice versa.
pub fn predictive_report(predictions: &[(String, Vec<f64>)], truth: &[(String, f64)]) -> Result<PredictiveReport> {
    if predictions.len() != truth.len() || truth.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} truth records",
            predictions.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let (mut bias, mut mspe, mut mape, mut c50, mut c95) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (name, value) in truth {
        let draws = predictions
            .iter()
            .find(|(p, _)| p == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::InvalidInput(format!("no prediction for support {name}")))?;
        let d = mean_sd(draws).0 - value;
        bias += d / n;
        mspe += d * d / n;
        mape += d.abs() / n;
        c50 += f64::from(u8::from(covers(pointwise_ci(draws, 0.5)?, *value))) / n;
        c95 += f64::from(u8::from(covers(pointwise_ci(draws, 0.95)?, *value))) / n;
    }
    Ok(PredictiveReport {
        n: truth.len(),
        bias,
        mspe,
        mape,
        pi_coverage_50: c50,
        pi_coverage_95: c95,
    })
}

/// Histogram densities on `bins` equal bins of `[lo, hi]`; values outside are dropped.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Vec<(f64, f64, f64)>> {
    if !(hi > lo) || bins == 0 {
        return Err(Error::Domain(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v <= hi {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let n = values.len().max(1) as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c as f64 / (n * width)))
        .collect())
}

/// Gaussian kernel density estimate with Silverman's bandwidth.
pub fn kde(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::InvalidInput("density estimate needs at least 2 draws".into()));
    }
    let (_, sd) = mean_sd(values);
    let s = sorted(values);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bw = 0.9 * spread.max(1e-12) * (values.len() as f64).powf(-0.2);
    let n = values.len() as f64;
    Ok(grid
        .iter()
        .map(|&x| values.iter().map(|&v| norm_pdf((x - v) / bw)).sum::<f64>() / (n * bw))
        .collect())
}

/// Density of `N(mean, sd^2)` truncated to `[lo, hi]`.
pub fn truncated_normal_pdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if x < lo || x > hi || !(sd > 0.0) {
        return 0.0;
    }
    let mass = norm_cdf((hi - mean) / sd) - norm_cdf((lo - mean) / sd);
    norm_pdf((x - mean) / sd) / (sd * mass)
}
