//! Convergence diagnostics for scalar chains.

use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Biased autocovariance at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / n as f64
}

/// Integrated autocorrelation time by Geyer's initial monotone sequence.
/// `None` for a chain with zero variance.
pub fn autocorr_time(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 4 {
        return None;
    }
    let m = mean(x);
    let g0 = autocov(x, m, 0);
    if !(g0 > 0.0) || !g0.is_finite() {
        return None;
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = (autocov(x, m, 2 * k) + autocov(x, m, 2 * k + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 1;
    }
    Some((2.0 * sum - 1.0).max(1.0 / n as f64))
}

/// Effective number of independent draws; 0 for a constant chain.
pub fn chain_ess(x: &[f64]) -> f64 {
    match autocorr_time(x) {
        Some(tau) => x.len() as f64 / tau,
        None => 0.0,
    }
}

/// Spectral density at frequency zero, `var * tau`.
fn spectrum0(x: &[f64]) -> f64 {
    match autocorr_time(x) {
        Some(tau) => autocov(x, mean(x), 0) * tau,
        None => 0.0,
    }
}

/// Geweke z-score comparing the first `frac_a` of the chain with the last `frac_b`.
pub fn geweke(x: &[f64], frac_a: f64, frac_b: f64) -> Result<f64> {
    if x.len() < 100 {
        return Err(Error::InvalidInput(format!("chain of length {} is shorter than 100", x.len())));
    }
    if !(frac_a > 0.0 && frac_b > 0.0 && frac_a + frac_b <= 1.0) {
        return Err(Error::InvalidInput("window fractions must be positive and sum to at most 1".into()));
    }
    let n = x.len();
    let na = ((frac_a * n as f64) as usize).max(2);
    let nb = ((frac_b * n as f64) as usize).max(2);
    let (a, b) = (&x[..na], &x[n - nb..]);
    let var = spectrum0(a) / na as f64 + spectrum0(b) / nb as f64;
    if !(var > 0.0) {
        return Err(Error::DegenerateChain("zero variance in a Geweke window".into()));
    }
    Ok((mean(a) - mean(b)) / var.sqrt())
}

pub fn geweke_default(x: &[f64]) -> Result<f64> {
    geweke(x, 0.1, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 - rho * rho).sqrt();
        let mut x = Vec::with_capacity(n);
        let mut cur: f64 = StandardNormal.sample(&mut rng);
        for _ in 0..n {
            x.push(cur);
            let z: f64 = StandardNormal.sample(&mut rng);
            cur = rho * cur + sd * z;
        }
        x
    }

    #[test]
    fn iid_ess_close_to_length() {
        for seed in 0..5 {
            let ess = chain_ess(&ar1(5000, 0.0, seed));
            assert!((ess / 5000.0 - 1.0).abs() < 0.15, "{ess}");
        }
    }

    #[test]
    fn ar1_ess_matches_formula() {
        let n = 50_000;
        let expect = n as f64 * 0.1 / 1.9;
        let ess = chain_ess(&ar1(n, 0.9, 3));
        assert!((ess / expect - 1.0).abs() < 0.2, "{ess} vs {expect}");
    }

    #[test]
    fn constant_chain() {
        assert_eq!(chain_ess(&[2.0; 500]), 0.0);
        assert!(matches!(geweke_default(&[2.0; 500]), Err(Error::DegenerateChain(_))));
        assert!(geweke_default(&[1.0; 50]).is_err());
    }

    #[test]
    fn geweke_calibrated_on_iid_chains() {
        let inside = (0..1000u64)
            .filter(|&s| geweke_default(&ar1(10_000, 0.0, 1000 + s)).unwrap().abs() < 3.0)
            .count();
        assert!(inside >= 990, "{inside}");
    }

    #[test]
    fn geweke_flags_mean_shift() {
        let mut x = ar1(2000, 0.0, 9);
        for v in &mut x[1000..] {
            *v += 5.0;
        }
        assert!(geweke_default(&x).unwrap().abs() > 3.0);
    }
}
