//! Standard binomial disaggregation: the same hierarchy and sampler fed with
//! raw sample sizes and raw case counts instead of effective counts.

use crate::config::Config;
use crate::design_effect::SurveyEstimate;
use crate::error::{Error, Result};
use crate::model::{run_chain, ModelData, PosteriorDraws};

/// Raw sample size `m` and case count `[m z]` capped into `[0, m]`.
pub fn raw_counts(est: &SurveyEstimate) -> Result<(u64, u64)> {
    est.validate()?;
    let m = est
        .raw_sample_size
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::MissingSampleSize(est.area_id.clone()))?;
    let q = (m as f64 * est.estimate).round().max(0.0) as u64;
    Ok((m, q.min(m)))
}

/// Fit with data assembled under raw counts. Only the count construction
/// differs from the proposed model.
pub fn fit_standard_binomial(data: &ModelData, cfg: &Config, seed: u64) -> Result<PosteriorDraws> {
    if !data.raw_counts {
        return Err(Error::InvalidInput("observations were assembled with effective counts".into()));
    }
    run_chain(cfg, data, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(z: f64, m: Option<u64>) -> SurveyEstimate {
        SurveyEstimate {
            raw_sample_size: m,
            ..SurveyEstimate::new("a", 5, 2010, z, 0.1)
        }
    }

    #[test]
    fn raw_count_examples() {
        assert_eq!(raw_counts(&est(0.5, Some(100))).unwrap(), (100, 50));
        assert_eq!(raw_counts(&est(0.0, Some(100))).unwrap(), (100, 0));
        assert_eq!(raw_counts(&est(0.64, Some(73))).unwrap(), (73, 47));
        assert_eq!(raw_counts(&est(1.0, Some(9))).unwrap(), (9, 9));
        assert!(matches!(raw_counts(&est(0.5, None)), Err(Error::MissingSampleSize(_))));
    }
}
