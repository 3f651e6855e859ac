//! Working binomial observations from survey estimates.
//!
//! A survey estimate `z` with design-based variance `tau^2` is replaced by the
//! simple-random-sample size whose binomial variance matches `tau^2` (the
//! effective sample size) and the corresponding number of cases. Degenerate
//! estimates at 0 or 1 are clamped into `[eps, 1 - eps]` before either count is
//! formed, and the record carries a flag saying so.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::logit;

/// Default clamp bound applied to estimates of exactly 0 or 1.
pub const DEFAULT_EPS: f64 = 0.005;

/// One areal survey estimate of a proportion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyEstimate {
    pub area_id: String,
    /// Length of the estimation period in years (1 or 5 for model input).
    pub period_len: u32,
    /// Last year of the period.
    pub end_year: i32,
    pub estimate: f64,
    pub std_error: f64,
    #[serde(default)]
    pub raw_sample_size: Option<u64>,
}

impl SurveyEstimate {
    pub fn new(area_id: impl Into<String>, period_len: u32, end_year: i32, estimate: f64, std_error: f64) -> Self {
        Self {
            area_id: area_id.into(),
            period_len,
            end_year,
            estimate,
            std_error,
            raw_sample_size: None,
        }
    }

    pub fn with_sample_size(mut self, m: u64) -> Self {
        self.raw_sample_size = Some(m);
        self
    }

    pub fn design_variance(&self) -> f64 {
        self.std_error * self.std_error
    }

    /// First year covered by the estimate.
    pub fn start_year(&self) -> i32 {
        self.end_year - self.period_len as i32 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.estimate.is_finite() || !self.std_error.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite estimate or SE for {}", self.area_id)));
        }
        if !(0.0..=1.0).contains(&self.estimate) {
            return Err(Error::InvalidInput(format!(
                "estimate {} for {} outside [0, 1]",
                self.estimate, self.area_id
            )));
        }
        if self.std_error < 0.0 {
            return Err(Error::InvalidInput(format!("negative SE for {}", self.area_id)));
        }
        if self.period_len == 0 {
            return Err(Error::InvalidInput(format!("zero period length for {}", self.area_id)));
        }
        Ok(())
    }
}

/// Effective sample size and effective number of cases for one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveCounts {
    pub ess: u64,
    pub enc: u64,
    /// Set when the estimate was clamped or the sample size floored at 1.
    pub clamped: bool,
}

/// Design effect and SRS sample size used to size simulated survey noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignEffectSpec {
    pub d: f64,
    pub srs_sample_size: u64,
}

impl DesignEffectSpec {
    pub fn new(d: f64, srs_sample_size: u64) -> Result<Self> {
        if !(d >= 1.0) || srs_sample_size == 0 {
            return Err(Error::InvalidInput(format!(
                "design effect must be >= 1 and sample size >= 1 (got d={d}, m={srs_sample_size})"
            )));
        }
        Ok(Self { d, srs_sample_size })
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::InvalidInput(format!("clamp bound {eps} outside (0, 0.5)")));
    }
    Ok(())
}

fn clamp_estimate(z: f64, eps: f64) -> (f64, bool) {
    let c = z.clamp(eps, 1.0 - eps);
    (c, c != z)
}

/// `[z'(1-z') / tau^2]` with `z'` the clamped estimate, rounded half away from
/// zero and floored at 1. The flag reports clamping or flooring.
pub fn effective_sample_size(est: &SurveyEstimate, eps: f64) -> Result<(u64, bool)> {
    est.validate()?;
    check_eps(eps)?;
    let tau2 = est.design_variance();
    if tau2 == 0.0 {
        return Err(Error::ZeroDesignVariance(est.area_id.clone()));
    }
    let (z, clamped) = clamp_estimate(est.estimate, eps);
    let raw = (z * (1.0 - z) / tau2).round();
    if raw < 1.0 {
        Ok((1, true))
    } else {
        Ok((raw as u64, clamped))
    }
}

/// `[ess * z']`, capped into `[0, ess]`.
pub fn effective_number_of_cases(ess: u64, est: &SurveyEstimate, eps: f64) -> Result<u64> {
    est.validate()?;
    check_eps(eps)?;
    if ess == 0 {
        return Err(Error::InvalidInput("effective sample size must be >= 1".into()));
    }
    let (z, _) = clamp_estimate(est.estimate, eps);
    let q = (ess as f64 * z).round();
    Ok((q.max(0.0) as u64).min(ess))
}

/// Both working counts for one estimate.
pub fn effective_counts(est: &SurveyEstimate, eps: f64) -> Result<EffectiveCounts> {
    let (ess, clamped) = effective_sample_size(est, eps)?;
    let enc = effective_number_of_cases(ess, est, eps)?;
    Ok(EffectiveCounts { ess, enc, clamped })
}

/// Logit-scale noise variance whose delta-method image on the probability
/// scale is `d * pi(1 - pi) / m`.
pub fn logit_noise_variance(pi_true: f64, spec: &DesignEffectSpec) -> Result<f64> {
    if !(pi_true > 0.0 && pi_true < 1.0) {
        return Err(Error::Domain(format!("true proportion {pi_true} must lie in (0, 1)")));
    }
    let l = logit(pi_true);
    let m = spec.srs_sample_size as f64;
    Ok(spec.d * (l.exp() + 1.0).powi(4) * pi_true * (1.0 - pi_true) / (m * (2.0 * l).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn est(z: f64, se: f64) -> SurveyEstimate {
        SurveyEstimate::new("a", 5, 2010, z, se)
    }

    #[test]
    fn ess_examples() {
        assert_eq!(effective_sample_size(&est(0.5, 0.05), DEFAULT_EPS).unwrap(), (100, false));
        assert_eq!(effective_sample_size(&est(0.3, 0.0042f64.sqrt()), DEFAULT_EPS).unwrap(), (50, false));
        // Zero-valued tract estimate with a large SE.
        let (ess, clamped) = effective_sample_size(&est(0.0, 0.19), DEFAULT_EPS).unwrap();
        assert_eq!(ess, 1);
        assert!(clamped);
    }

    #[test]
    fn ess_errors() {
        assert!(matches!(
            effective_sample_size(&est(0.4, 0.0), DEFAULT_EPS),
            Err(Error::ZeroDesignVariance(_))
        ));
        assert!(effective_sample_size(&est(f64::NAN, 0.1), DEFAULT_EPS).is_err());
        assert!(effective_sample_size(&est(0.4, f64::NAN), DEFAULT_EPS).is_err());
        assert!(effective_sample_size(&est(0.4, 0.1), 0.0).is_err());
    }

    #[test]
    fn enc_examples() {
        assert_eq!(effective_number_of_cases(100, &est(0.5, 0.1), DEFAULT_EPS).unwrap(), 50);
        assert_eq!(effective_number_of_cases(50, &est(0.0, 0.1), DEFAULT_EPS).unwrap(), 0);
        assert_eq!(effective_number_of_cases(73, &est(0.64, 0.1), DEFAULT_EPS).unwrap(), 47);
        assert_eq!(effective_number_of_cases(10, &est(1.0, 0.1), DEFAULT_EPS).unwrap(), 10);
    }

    #[test]
    fn noise_variance_examples() {
        let v = logit_noise_variance(0.5, &DesignEffectSpec::new(1.0, 100).unwrap()).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        let v = logit_noise_variance(0.5, &DesignEffectSpec::new(4.0, 100).unwrap()).unwrap();
        assert!((v - 0.16).abs() < 1e-15);
        assert!(logit_noise_variance(0.0, &DesignEffectSpec::new(1.0, 100).unwrap()).is_err());
        assert!(logit_noise_variance(1.0, &DesignEffectSpec::new(1.0, 100).unwrap()).is_err());
        assert!(DesignEffectSpec::new(0.5, 100).is_err());
    }

    /// Monte-Carlo image of logit-scale noise on the probability scale.
    fn mc_expit_variance(pi: f64, v: f64, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, v.sqrt()).unwrap();
        let l = logit(pi);
        let draws: Vec<f64> = (0..n).map(|_| crate::special::expit(l + normal.sample(&mut rng))).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    }

    #[test]
    fn noise_variance_matches_monte_carlo_at_pi_02() {
        let spec = DesignEffectSpec::new(2.0, 100).unwrap();
        let v = logit_noise_variance(0.2, &spec).unwrap();
        // closed form of the delta-method identity: d / (m pi (1 - pi))
        assert!((v - 2.0 / (100.0 * 0.2 * 0.8)).abs() < 1e-14);
        let emp = mc_expit_variance(0.2, v, 1_000_000, 11);
        let target = 2.0 * 0.2 * 0.8 / 100.0;
        assert!((emp - target).abs() / target < 0.05, "{emp} vs {target}");
    }

    #[test]
    fn noise_variance_grid_within_ten_percent() {
        let mut seed = 100;
        for &pi in &[0.2, 0.5, 0.8] {
            for &m in &[100u64, 400] {
                for &d in &[2.0, 4.0, 6.0, 8.0] {
                    let spec = DesignEffectSpec::new(d, m).unwrap();
                    let v = logit_noise_variance(pi, &spec).unwrap();
                    seed += 1;
                    let emp = mc_expit_variance(pi, v, 200_000, seed);
                    let target = d * pi * (1.0 - pi) / m as f64;
                    let rel = (emp - target) / target;
                    // The linearisation undershoots at pi = 0.5, m = 100 for large d
                    // (exact quadrature gives -10.3% at d = 6 and -13.2% at d = 8).
                    if pi == 0.5 && m == 100 && d >= 6.0 {
                        assert!(rel < -0.08 && rel > -0.16, "pi={pi} m={m} d={d}: {rel}");
                    } else {
                        assert!(rel.abs() < 0.10, "pi={pi} m={m} d={d}: {emp} vs {target}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn enc_over_ess_recovers_estimate(z in 0.01f64..0.99, se in 0.005f64..0.2) {
            let e = est(z, se);
            let c = effective_counts(&e, DEFAULT_EPS).unwrap();
            prop_assert!(c.enc <= c.ess);
            if !c.clamped {
                let zc = z.clamp(DEFAULT_EPS, 1.0 - DEFAULT_EPS);
                prop_assert!((c.enc as f64 / c.ess as f64 - zc).abs() <= 0.5 / c.ess as f64 + 1e-12);
            }
        }

        #[test]
        fn ess_reproduces_design_variance(z in 0.02f64..0.98, se in 0.005f64..0.1) {
            let e = est(z, se);
            let (ess, clamped) = effective_sample_size(&e, DEFAULT_EPS).unwrap();
            prop_assume!(ess >= 2 && !clamped);
            let tau2 = se * se;
            let implied = z * (1.0 - z) / ess as f64;
            prop_assert!((implied - tau2).abs() <= tau2 * (1.0 / ess as f64 + 0.5 / ess as f64));
        }

        #[test]
        fn noise_variance_increasing_in_d(pi in 0.01f64..0.99, d in 1.0f64..10.0, dd in 0.01f64..5.0) {
            let a = logit_noise_variance(pi, &DesignEffectSpec::new(d, 100).unwrap()).unwrap();
            let b = logit_noise_variance(pi, &DesignEffectSpec::new(d + dd, 100).unwrap()).unwrap();
            prop_assert!(b > a);
        }
    }
}
