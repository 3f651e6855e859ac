//! Special functions: modified Bessel function of the second kind for real
//! order, standard normal helpers and one-sided truncated normal sampling.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

// Chebyshev data for 1/Gamma(1+nu) and 1/Gamma(1-nu) combinations on
// |nu| <= 1/2 (Temme's g1, g2 functions).
const G1_DAT: [f64; 14] = [
    -1.145_164_083_662_683_1,
    0.006_360_853_113_470_842,
    0.001_862_451_930_072_068_4,
    0.000_152_833_085_873_453_5,
    0.000_017_017_464_011_802_04,
    -6.459_750_292_334_725e-7,
    -5.181_984_843_251_938e-8,
    4.518_909_289_485_818e-10,
    3.243_322_737_102_087_3e-11,
    6.830_943_402_494_752e-13,
    2.835_350_275_517_210_2e-14,
    -7.988_390_576_932_359e-16,
    -3.372_667_730_077_195e-17,
    -3.658_633_480_921_052e-20,
];

const G2_DAT: [f64; 15] = [
    1.882_645_524_949_671_8,
    -0.077_490_658_396_167_52,
    -0.018_256_714_847_324_93,
    0.000_633_803_020_907_489_6,
    0.000_076_229_054_350_872_9,
    -9.550_164_756_172_044e-7,
    -8.892_726_810_788_635e-8,
    -1.952_133_477_231_961_4e-9,
    -9.400_305_273_588_516e-11,
    4.687_513_384_953_239e-12,
    2.265_853_574_692_576e-13,
    -1.172_550_969_848_801_5e-15,
    -7.044_133_820_024_522e-17,
    -2.437_787_831_010_769_4e-18,
    -7.522_524_321_825_39e-20,
];

fn cheb_eval(coeffs: &[f64], x: f64) -> f64 {
    let y2 = 2.0 * x;
    let (mut d, mut dd) = (0.0, 0.0);
    for &c in coeffs.iter().skip(1).rev() {
        let tmp = d;
        d = y2 * d - dd + c;
        dd = tmp;
    }
    x * d - dd + 0.5 * coeffs[0]
}

/// Returns (1/Gamma(1+mu), 1/Gamma(1-mu), g1, g2) for |mu| <= 1/2.
fn temme_gamma(mu: f64) -> (f64, f64, f64, f64) {
    let x = 4.0 * mu.abs() - 1.0;
    let g1 = cheb_eval(&G1_DAT, x);
    let g2 = cheb_eval(&G2_DAT, x);
    let inv_g1p = 1.0 / (g2 - mu * g1);
    let inv_g1m = 1.0 / (g2 + mu * g1);
    (inv_g1p, inv_g1m, g1, g2)
}

/// Temme's series for K_mu(x), K_{mu+1}(x), both scaled by e^x. Valid for x < 2.
fn k_scaled_temme(mu: f64, x: f64) -> (f64, f64) {
    let half_x = 0.5 * x;
    let ln_half_x = half_x.ln();
    let half_x_mu = (mu * ln_half_x).exp();
    let pi_mu = PI * mu;
    let sigma = -mu * ln_half_x;
    let sinrat = if pi_mu.abs() < f64::EPSILON {
        1.0
    } else {
        pi_mu / pi_mu.sin()
    };
    let sinhrat = if sigma.abs() < f64::EPSILON {
        1.0
    } else {
        sigma.sinh() / sigma
    };
    let (inv_g1p, inv_g1m, g1, g2) = temme_gamma(mu);

    let mut fk = sinrat * (sigma.cosh() * g1 - sinhrat * ln_half_x * g2);
    let mut pk = 0.5 / half_x_mu * inv_g1p;
    let mut qk = 0.5 * half_x_mu * inv_g1m;
    let mut ck = 1.0;
    let mut sum0 = fk;
    let mut sum1 = pk;
    for k in 1..500 {
        let k = k as f64;
        fk = (k * fk + pk + qk) / (k * k - mu * mu);
        ck *= half_x * half_x / k;
        pk /= k - mu;
        qk /= k + mu;
        let hk = -k * fk + pk;
        let del0 = ck * fk;
        sum0 += del0;
        sum1 += ck * hk;
        if del0.abs() < 0.5 * sum0.abs() * f64::EPSILON {
            break;
        }
    }
    let ex = x.exp();
    (sum0 * ex, sum1 * 2.0 / x * ex)
}

/// Steed's continued fraction (CF2) for K_mu(x), K_{mu+1}(x) scaled by e^x. Valid for x >= 2.
fn k_scaled_cf2(mu: f64, x: f64) -> (f64, f64) {
    let mut bi = 2.0 * (1.0 + x);
    let mut di = 1.0 / bi;
    let mut delhi = di;
    let mut hi = di;
    let mut qi = 0.0;
    let mut qip1 = 1.0;
    let mut ai = -(0.25 - mu * mu);
    let a1 = ai;
    let mut ci = -ai;
    let mut bqi = -ai;
    let mut s = 1.0 + bqi * delhi;
    for i in 2..20_000 {
        ai -= 2.0 * (i - 1) as f64;
        ci = -ai * ci / i as f64;
        let tmp = (qi - bi * qip1) / ai;
        qi = qip1;
        qip1 = tmp;
        bqi += ci * qip1;
        bi += 2.0;
        di = 1.0 / (bi + ai * di);
        delhi = (bi * di - 1.0) * delhi;
        hi += delhi;
        let dels = bqi * delhi;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            break;
        }
    }
    hi *= -a1;
    let k_mu = (PI / (2.0 * x)).sqrt() / s;
    let k_mup1 = k_mu * (mu + x + 0.5 - hi) / x;
    (k_mu, k_mup1)
}

/// `K_nu(x) * exp(x)` for real `nu >= 0` and `x > 0`.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x > 0.0);
    let n = (nu + 0.5).floor() as usize;
    let mu = nu - n as f64;
    let (mut k_nu, mut k_nup1) = if x < 2.0 {
        k_scaled_temme(mu, x)
    } else {
        k_scaled_cf2(mu, x)
    };
    for i in 0..n {
        let k_num1 = k_nu;
        k_nu = k_nup1;
        k_nup1 = 2.0 * (mu + i as f64 + 1.0) / x * k_nu + k_num1;
    }
    k_nu
}

/// Modified Bessel function of the second kind `K_nu(x)`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu, x) * (-x).exp()
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// `ln Phi(x)`, accurate far into the lower tail.
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > -5.0 {
        norm_cdf(x).ln()
    } else {
        // Phi(x) = phi(x) / lambda(-x)
        -0.5 * x * x - LN_SQRT_2PI - inv_mills(-x).ln()
    }
}

/// Inverse Mills ratio `phi(a) / (1 - Phi(a))`.
pub fn inv_mills(a: f64) -> f64 {
    if a < 5.0 {
        norm_pdf(a) / norm_cdf(-a)
    } else {
        // Laplace continued fraction, evaluated bottom-up.
        let mut cf = a;
        for k in (1..=60).rev() {
            cf = a + k as f64 / cf;
        }
        // 1 - Phi(a) = phi(a) / cf
        cf
    }
}

/// Mean and variance of `Z | Z >= a` for standard normal `Z`.
pub fn trunc_below_moments(a: f64) -> (f64, f64) {
    let lam = inv_mills(a);
    let var = (1.0 + a * lam - lam * lam).max(0.0);
    (lam, var)
}

/// Draw `Z ~ N(0,1)` conditioned on `Z >= a`.
pub fn sample_trunc_below<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= 0.45 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z >= a {
                return z;
            }
        }
    }
    // Robert (1995) translated-exponential proposal.
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        let u: f64 = rng.gen();
        if u <= (-0.5 * (z - rate) * (z - rate)).exp() {
            return z;
        }
    }
}

/// Draw `Y ~ N(mean, 1)` truncated to `(0, inf)` when `positive`, else `(-inf, 0]`.
pub fn sample_probit_latent<R: Rng + ?Sized>(mean: f64, positive: bool, rng: &mut R) -> f64 {
    if positive {
        mean + sample_trunc_below(-mean, rng)
    } else {
        -(-mean + sample_trunc_below(mean, rng))
    }
}

/// Mean and variance of a single probit latent truncated as in [`sample_probit_latent`].
pub fn probit_latent_moments(mean: f64, positive: bool) -> (f64, f64) {
    if positive {
        let (m, v) = trunc_below_moments(-mean);
        (mean + m, v)
    } else {
        let (m, v) = trunc_below_moments(mean);
        (mean - m, v)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
