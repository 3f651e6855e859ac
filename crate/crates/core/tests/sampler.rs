use std::collections::{BTreeMap, HashMap};

use disagg_core::config::Config;
use disagg_core::design_effect::SurveyEstimate;
use disagg_core::diagnostics::chain_ess;
use disagg_core::geometry::{ArealHierarchy, ArealUnit, Level, Rect};
use disagg_core::metrics::{mean_sd, quantile_sorted, sorted};
use disagg_core::model::{assemble_observations, run_chain, CountMode, ModelData, StudyLayout};
use disagg_core::special::{norm_cdf, norm_quantile};
use disagg_core::stmra::{BasisSystem, MaternParams};
use nalgebra::{DMatrix, DVector};

const YEARS: (i32, i32) = (2001, 2002);

/// Two unit squares with populations 1 and 3 in one PUMA and one county.
fn two_tracts() -> ArealHierarchy {
    let mut tracts = Vec::new();
    let mut t2p = BTreeMap::new();
    let mut t2c = BTreeMap::new();
    let mut pops = HashMap::new();
    for (i, pop) in [1.0, 3.0].into_iter().enumerate() {
        let id = format!("t{i}");
        let x = i as f64;
        tracts.push(ArealUnit::rectangle(&id, Level::Tract, Rect::new(x, 0.0, x + 1.0, 1.0)));
        t2p.insert(id.clone(), "p0".to_string());
        t2c.insert(id.clone(), "c0".to_string());
        for y in YEARS.0..=YEARS.1 {
            pops.insert((id.clone(), y), pop);
        }
    }
    for y in YEARS.0..=YEARS.1 {
        pops.insert(("p0".to_string(), y), 4.0);
    }
    let puma = ArealUnit::rectangle("p0", Level::Puma, Rect::new(0.0, 0.0, 2.0, 1.0));
    ArealHierarchy::new(tracts, vec![puma], t2p, t2c, pops)
}

fn toy_config(iters: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.max_level = 1;
    cfg.model.r = 4;
    cfg.mcmc.iters = iters;
    cfg.mcmc.burnin = 1000;
    cfg.mcmc.thin = 1;
    cfg.mcmc.fixed = ["phi", "nu", "alpha", "sigma2", "tau2", "tauC2"].map(String::from).to_vec();
    let init = &mut cfg.mcmc.init;
    init.tau2 = 0.1;
    init.tau_c2 = 0.2;
    init.sigma2 = 0.5;
    init.phi = 0.5;
    init.nu = 0.5;
    init.alpha = 0.6;
    cfg
}

/// PUMA estimates with 30 effective trials per year.
fn toy_data(cfg: &Config, estimates: &[SurveyEstimate]) -> ModelData {
    let h = two_tracts();
    let layout = StudyLayout::new(&h, YEARS.0, YEARS.1).unwrap();
    let obs = assemble_observations(estimates, &h, &layout, CountMode::Effective { eps: cfg.model.eps }).unwrap();
    ModelData::new(&h, layout, obs, &cfg.model, false).unwrap()
}

fn puma_estimates() -> Vec<SurveyEstimate> {
    [(2001, 0.3), (2002, 0.5)]
        .into_iter()
        .map(|(y, z)| SurveyEstimate::new("p0", 1, y, z, (z * (1.0 - z) / 30.0).sqrt()))
        .collect()
}

/// Precision of the four cell predictors once the flat yearly trend is integrated out.
fn collapsed_precision(cfg: &Config, data: &ModelData) -> DMatrix<f64> {
    let init = &cfg.mcmc.init;
    let sys = BasisSystem::build(&data.tree, MaternParams::new(1.0, init.phi, init.nu).unwrap(), cfg.model.jitter).unwrap();
    let b = data.design.evaluate(&sys).to_dense();
    let nb = sys.n_basis();
    let mut k = DMatrix::zeros(nb, nb);
    for (m, j) in sys.block_ids() {
        let o = data.tree.col_offset(m, j);
        k.view_mut((o, o), (data.tree.r, data.tree.r)).copy_from(sys.k_unit(m, j));
    }
    let s = &b * k * b.transpose();
    let cov = DMatrix::from_fn(4, 4, |a, c| {
        let (ta, ga, tc, gc) = (a / 2, a % 2, c / 2, c % 2);
        let lag = (ta as i32 - tc as i32).abs();
        init.sigma2 * init.alpha.powi(lag) * s[(ga, gc)] + init.tau_c2 + if a == c { init.tau2 } else { 0.0 }
    });
    let q = cov.try_inverse().unwrap();
    let a = DMatrix::from_fn(4, 2, |c, t| f64::from(u8::from(c / 2 == t)));
    let qa = &q * &a;
    let inner = (a.transpose() * &qa).try_inverse().unwrap();
    &q - &qa * inner * qa.transpose()
}

const GL4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

#[test]
fn stationary_distribution_matches_grid_posterior() {
    let cfg = toy_config(121_000);
    let data = toy_data(&cfg, &puma_estimates());
    let draws = run_chain(&cfg, &data, 11).unwrap();
    let lp: Vec<Vec<f64>> = (0..4).map(|c| draws.cell_draws(c).iter().map(|p| norm_quantile(*p)).collect()).collect();
    let ess = chain_ess(&lp[0]);
    assert!(ess > 8000.0, "ess {ess}");

    let prec = collapsed_precision(&cfg, &data);
    let counts: Vec<(f64, f64)> = data.observations.iter().map(|o| (o.counts.enc as f64, o.counts.ess as f64)).collect();
    let weights: Vec<Vec<(usize, f64)>> = data.observations.iter().map(|o| o.cells.iter().map(|c| (c.index, c.weight)).collect()).collect();
    let log_post = |v: &[f64; 4]| {
        let x = DVector::from_column_slice(v);
        let mut lp = -0.5 * x.dot(&(&prec * &x));
        for (o, (y, n)) in counts.iter().enumerate() {
            let p: f64 = weights[o].iter().map(|&(c, w)| w * norm_cdf(v[c])).sum();
            lp += y * p.ln() + (n - y) * (1.0 - p).ln();
        }
        lp
    };

    // histogram bins on the first cell's proportion
    let s0 = sorted(&draws.cell_draws(0));
    let (lo, hi) = (quantile_sorted(&s0, 0.0005), quantile_sorted(&s0, 0.9995));
    let bins = 50;
    let edge = |k: usize| norm_quantile(lo + (hi - lo) * k as f64 / bins as f64);

    // trapezoid axes for the other three cells
    let n_ax = 36;
    let axes: Vec<Vec<f64>> = (1..4)
        .map(|c| {
            let (m, s) = mean_sd(&lp[c]);
            (0..n_ax).map(|i| m - 6.0 * s + 12.0 * s * i as f64 / (n_ax - 1) as f64).collect()
        })
        .collect();
    let reference = log_post(&[0, 1, 2, 3].map(|c| mean_sd(&lp[c]).0));
    let mut grid_mass = vec![0.0; bins];
    for (k, mass) in grid_mass.iter_mut().enumerate() {
        let (a, b) = (edge(k), edge(k + 1));
        for (x, w) in GL4 {
            let v0 = 0.5 * (a + b) + 0.5 * (b - a) * x;
            let mut inner = 0.0;
            for &v1 in &axes[0] {
                for &v2 in &axes[1] {
                    for &v3 in &axes[2] {
                        inner += (log_post(&[v0, v1, v2, v3]) - reference).exp();
                    }
                }
            }
            *mass += 0.5 * (b - a) * w * inner;
        }
    }
    let total: f64 = grid_mass.iter().sum();
    let mut chain_mass = vec![0.0; bins];
    let mut inside = 0.0;
    for p in draws.cell_draws(0) {
        if p >= lo && p < hi {
            let k = (((p - lo) / (hi - lo)) * bins as f64) as usize;
            chain_mass[k.min(bins - 1)] += 1.0;
            inside += 1.0;
        }
    }
    let tv: f64 = 0.5 * grid_mass.iter().zip(&chain_mass).map(|(g, c)| (g / total - c / inside).abs()).sum::<f64>();
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn same_seed_same_draws() {
    let mut cfg = toy_config(1500);
    cfg.mcmc.fixed.clear();
    let data = toy_data(&cfg, &puma_estimates());
    let a = run_chain(&cfg, &data, 5).unwrap();
    let b = run_chain(&cfg, &data, 5).unwrap();
    assert_eq!(a, b);
    let c = run_chain(&cfg, &data, 6).unwrap();
    assert_ne!(a.pi, c.pi);
    assert!(a.pi.iter().flatten().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn without_data_the_chain_samples_the_prior() {
    let mut cfg = toy_config(41_000);
    cfg.mcmc.fixed = ["phi", "nu"].map(String::from).to_vec();
    let data = toy_data(&cfg, &[]);
    let draws = run_chain(&cfg, &data, 3).unwrap();

    // inverse-gamma(2, 1) quantiles of tau2
    let tau2 = sorted(draws.param("tau2").unwrap());
    for (p, q) in [(0.25, 0.371_7), (0.5, 0.595_8), (0.75, 1.041_2)] {
        let got = quantile_sorted(&tau2, p);
        assert!((got / q - 1.0).abs() < 0.12, "tau2 q{p}: {got} vs {q}");
    }
    // uniform autocorrelation
    let alpha = sorted(draws.param("alpha").unwrap());
    for p in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let got = quantile_sorted(&alpha, p);
        assert!((got - p).abs() < 0.08, "alpha q{p}: {got}");
    }
}

#[test]
fn variance_rescaling_matches_rebuild() {
    let cfg = toy_config(10);
    let data = toy_data(&cfg, &puma_estimates());
    let unit = BasisSystem::build(&data.tree, MaternParams::new(1.0, 0.7, 1.3).unwrap(), cfg.model.jitter).unwrap();
    let scaled = BasisSystem::build(&data.tree, MaternParams::new(2.37, 0.7, 1.3).unwrap(), cfg.model.jitter).unwrap();
    for (m, j) in unit.block_ids() {
        let diff = (scaled.k_block(m, j) - unit.k_unit(m, j) * 2.37).abs().max();
        assert!(diff < 1e-10, "block ({m},{j}) differs by {diff}");
    }
}
