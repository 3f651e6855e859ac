//! Synthetic truths and pseudo-survey estimates on a 10 x 10 grid, and the
//! replicate loop that fits and scores them.
//!
//! Units are unit squares on `[0, 10]^2` grouped into four 5 x 5 regions that
//! play the role of PUMAs. Each region row of five units forms a county.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::SupportSpec;
use crate::config::Config;
use crate::dataset::{write_rows, TruthRow};
use crate::design_effect::{logit_noise_variance, DesignEffectSpec, SurveyEstimate};
use crate::error::{Error, Result};
use crate::geometry::{unit_seed, ArealHierarchy, ArealUnit, Level, Rect};
use crate::metrics::{covers, error_metrics, joint_band, pointwise_ci};
use crate::model::{prepare_data, run_chain, ModelChoice, ModelData, PosteriorDraws};
use crate::special::{expit, logit};
use crate::stmra::{MaternKernel, MaternParams};

pub const GRID_SIDE: usize = 10;
pub const REGION_SIDE: usize = 5;
pub const UNIT_POPULATION: f64 = 1000.0;

/// Survey noise regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Fixed logit-scale noise variance.
    Fixed { v: f64 },
    /// Fixed noise variance added on the proportion scale, truncated to [0, 1].
    Additive { v: f64 },
    /// Noise matching a design effect `d` at annual sample size `m`.
    DesignEffect { d: f64, m: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Generating mechanism, 1 to 4.
    pub setting: u8,
    pub noise: NoiseModel,
    pub replicates: usize,
    pub periods: usize,
    pub first_year: i32,
    /// Variance, range and smoothness of the spatial field.
    pub field: (f64, f64, f64),
    /// Intercept and slope of the linear trend.
    pub trend: (f64, f64),
    pub noise_sd: f64,
    /// Annual raw sample size per unit, used by raw-count fits.
    pub annual_sample_size: u64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            setting: 1,
            noise: NoiseModel::Fixed { v: 0.15 * 0.15 },
            replicates: 30,
            periods: 10,
            first_year: 2001,
            field: (1.0, 0.5, 1.0),
            trend: (-1.0, 0.2),
            noise_sd: 0.2,
            annual_sample_size: 100,
            seed: 2021,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.setting) {
            return Err(Error::Config(format!("setting must be 1 to 4, got {}", self.setting)));
        }
        if self.periods < 5 {
            return Err(Error::Config("need at least 5 periods".into()));
        }
        if self.replicates == 0 || self.annual_sample_size == 0 {
            return Err(Error::Config("replicates and annual_sample_size must be positive".into()));
        }
        match self.noise {
            NoiseModel::Fixed { v } | NoiseModel::Additive { v } if !(v >= 0.0) => return Err(Error::Config("noise variance must be >= 0".into())),
            NoiseModel::DesignEffect { d, m } if !(d >= 1.0) || m == 0 => {
                return Err(Error::Config("design effect needs d >= 1 and m > 0".into()))
            }
            _ => {}
        }
        let (s2, phi, nu) = self.field;
        MaternParams::new(s2, phi, nu)?;
        Ok(())
    }

    fn has_field(&self) -> bool {
        matches!(self.setting, 2 | 4)
    }

    fn has_trend(&self) -> bool {
        matches!(self.setting, 3 | 4)
    }

    pub fn years(&self) -> Vec<i32> {
        (0..self.periods as i32).map(|k| self.first_year + k).collect()
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.periods as i32 - 1
    }
}

pub fn unit_id(row: usize, col: usize) -> String {
    format!("T{row}{col}")
}

fn region_of(row: usize, col: usize) -> usize {
    (row / REGION_SIDE) * 2 + col / REGION_SIDE
}

/// The simulation grid with equal populations in every year.
pub fn grid_hierarchy(years: &[i32]) -> ArealHierarchy {
    let mut tracts = Vec::new();
    let mut t2p = BTreeMap::new();
    let mut t2c = BTreeMap::new();
    let mut pops = HashMap::new();
    for row in 0..GRID_SIDE {
        for col in 0..GRID_SIDE {
            let id = unit_id(row, col);
            let r = Rect::new(col as f64, row as f64, col as f64 + 1.0, row as f64 + 1.0);
            tracts.push(ArealUnit::rectangle(&id, Level::Tract, r));
            let region = region_of(row, col);
            t2p.insert(id.clone(), format!("R{}", region + 1));
            t2c.insert(id.clone(), format!("C{}{}", region + 1, row % REGION_SIDE));
            for &y in years {
                pops.insert((id.clone(), y), UNIT_POPULATION);
            }
        }
    }
    let per_region = (REGION_SIDE * REGION_SIDE) as f64 * UNIT_POPULATION;
    let pumas = (0..4)
        .map(|k| {
            let (x0, y0) = ((k % 2 * REGION_SIDE) as f64, (k / 2 * REGION_SIDE) as f64);
            ArealUnit::rectangle(
                format!("R{}", k + 1),
                Level::Puma,
                Rect::new(x0, y0, x0 + REGION_SIDE as f64, y0 + REGION_SIDE as f64),
            )
        })
        .collect::<Vec<_>>();
    for p in &pumas {
        for &y in years {
            pops.insert((p.area_id.clone(), y), per_region);
        }
    }
    ArealHierarchy::new(tracts, pumas, t2p, t2c, pops)
}

/// True annual proportions, `[period][unit]` with units in hierarchy order.
pub fn gen_true_proportions<R: Rng + ?Sized>(cfg: &SimulationConfig, h: &ArealHierarchy, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n = h.tracts.len();
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let field = if cfg.has_field() {
        let (s2, phi, nu) = cfg.field;
        let k = MaternKernel::new(phi, nu);
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (h.tracts[i].centroid, h.tracts[j].centroid);
            s2 * k.corr(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        });
        let chol = Cholesky::new(cov).ok_or_else(|| Error::NotPositiveDefinite {
            block: "simulation field".into(),
        })?;
        let z = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        (chol.l() * z).iter().copied().collect()
    } else {
        vec![0.0; n]
    };
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    Ok((1..=cfg.periods)
        .map(|t| {
            let trend = if cfg.has_trend() { cfg.trend.0 + cfg.trend.1 * t as f64 } else { 0.0 };
            (0..n).map(|g| expit(x[g] + field[g] + trend + noise.sample(rng))).collect()
        })
        .collect())
}

/// Observed annual tract values and the estimates handed to the model.
#[derive(Debug, Clone)]
pub struct SimulatedObservations {
    /// `[period][unit]`.
    pub annual: Vec<Vec<f64>>,
    pub estimates: Vec<SurveyEstimate>,
}

/// Pseudo-survey estimates: annual values on the logit scale with added
/// noise, 5-year unit averages and annual region averages. Attached standard
/// errors are delta-method variances of those averages at the true values.
pub fn gen_observed<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    h: &ArealHierarchy,
    truth: &[Vec<f64>],
    rng: &mut R,
) -> Result<SimulatedObservations> {
    cfg.validate()?;
    let n = h.tracts.len();
    let years = cfg.years();
    let mut annual = vec![vec![0.0; n]; cfg.periods];
    // delta-method variance of each annual value
    let mut dvar = vec![vec![0.0; n]; cfg.periods];
    for t in 0..cfg.periods {
        for g in 0..n {
            let p = truth[t][g];
            let z: f64 = rng.sample(StandardNormal);
            let (value, var) = match cfg.noise {
                NoiseModel::Additive { v } => ((p + z * v.sqrt()).clamp(0.0, 1.0), v),
                NoiseModel::Fixed { v } => (expit(logit(p) + z * v.sqrt()), (p * (1.0 - p)).powi(2) * v),
                NoiseModel::DesignEffect { d, m } => {
                    let v = logit_noise_variance(p, &DesignEffectSpec::new(d, m)?)?;
                    (expit(logit(p) + z * v.sqrt()), (p * (1.0 - p)).powi(2) * v)
                }
            };
            annual[t][g] = value;
            dvar[t][g] = var;
        }
    }
    let m = cfg.annual_sample_size;
    let mut estimates = Vec::new();
    for (g, tract) in h.tracts.iter().enumerate() {
        for t in 4..cfg.periods {
            let z = (t - 4..=t).map(|k| annual[k][g]).sum::<f64>() / 5.0;
            let var = (t - 4..=t).map(|k| dvar[k][g]).sum::<f64>() / 25.0;
            estimates.push(SurveyEstimate::new(&tract.area_id, 5, years[t], z, var.sqrt()).with_sample_size(5 * m));
        }
    }
    for puma in h.puma_ids() {
        let members: Vec<usize> = h.tracts_of_puma(&puma).iter().map(|t| h.tract_index(t).unwrap()).collect();
        let k = members.len() as f64;
        for t in 0..cfg.periods {
            let z = members.iter().map(|&g| annual[t][g]).sum::<f64>() / k;
            let var = members.iter().map(|&g| dvar[t][g]).sum::<f64>() / (k * k);
            estimates.push(SurveyEstimate::new(&puma, 1, years[t], z, var.sqrt()).with_sample_size(members.len() as u64 * m));
        }
    }
    Ok(SimulatedObservations { annual, estimates })
}

/// One generated replicate.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub hierarchy: ArealHierarchy,
    pub truth: Vec<Vec<f64>>,
    pub observed: SimulatedObservations,
}

impl Replicate {
    pub fn generate(cfg: &SimulationConfig, seed: u64) -> Result<Self> {
        let hierarchy = grid_hierarchy(&cfg.years());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = gen_true_proportions(cfg, &hierarchy, &mut rng)?;
        let observed = gen_observed(cfg, &hierarchy, &truth, &mut rng)?;
        Ok(Self {
            hierarchy,
            truth,
            observed,
        })
    }

    pub fn truth_rows(&self, cfg: &SimulationConfig) -> Vec<TruthRow> {
        let years = cfg.years();
        let mut rows = Vec::new();
        for (t, year) in years.iter().enumerate() {
            for (g, tract) in self.hierarchy.tracts.iter().enumerate() {
                rows.push(TruthRow {
                    tract_id: tract.area_id.clone(),
                    year: *year,
                    pi: self.truth[t][g],
                });
            }
        }
        rows
    }

    /// 3-year county supports over every window in the study period.
    pub fn county_supports(&self, cfg: &SimulationConfig) -> Result<Vec<SupportSpec>> {
        let mut out = Vec::new();
        for county in self.hierarchy.county_ids() {
            for end in cfg.first_year + 2..=cfg.last_year() {
                out.push(SupportSpec::county_window(&self.hierarchy, &county, end - 2, end)?);
            }
        }
        Ok(out)
    }

    /// True value of a support.
    pub fn support_truth(&self, cfg: &SimulationConfig, spec: &SupportSpec) -> Result<f64> {
        spec.cells
            .iter()
            .map(|(tract, year, w)| {
                let g = self.hierarchy.tract_index(tract).ok_or_else(|| Error::UnknownArea(tract.clone()))?;
                let t = (year - cfg.first_year) as usize;
                Ok(w * self.truth.get(t).ok_or(Error::YearOutOfWindow {
                    year: *year,
                    first: cfg.first_year,
                    last: cfg.last_year(),
                })?[g])
            })
            .sum()
    }

    pub fn model_data(&self, cfg: &SimulationConfig, fit: &Config, choice: ModelChoice) -> Result<ModelData> {
        prepare_data(&self.hierarchy, &self.observed.estimates, (cfg.first_year, cfg.last_year()), fit, choice)
    }
}

/// Scores of one replicate at one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodScore {
    pub t: usize,
    pub cov95_pointwise: f64,
    pub cov50_pointwise: f64,
    pub cov95_joint: f64,
    pub cov50_joint: f64,
    pub mse: f64,
    pub mae: f64,
    pub msre: f64,
    pub mare: f64,
}

/// Score posterior draws against the truth, one row per period.
pub fn score_replicate(draws: &PosteriorDraws, truth: &[Vec<f64>]) -> Result<Vec<PeriodScore>> {
    let n = truth[0].len();
    let mean = draws.posterior_mean();
    (0..truth.len())
        .map(|t| {
            let idx: Vec<usize> = (0..n).map(|g| t * n + g).collect();
            let est: Vec<f64> = idx.iter().map(|&c| mean[c]).collect();
            let e = error_metrics(&est, &truth[t])?;
            let sub: Vec<Vec<f64>> = draws.pi.iter().map(|d| idx.iter().map(|&c| d[c]).collect()).collect();
            let mut pt = [0.0; 2];
            for (k, level) in [0.95, 0.5].into_iter().enumerate() {
                for (g, &c) in idx.iter().enumerate() {
                    let draws_c: Vec<f64> = draws.pi.iter().map(|d| d[c]).collect();
                    pt[k] += f64::from(u8::from(covers(pointwise_ci(&draws_c, level)?, truth[t][g]))) / n as f64;
                }
            }
            let mut joint = [0.0; 2];
            for (k, level) in [0.95, 0.5].into_iter().enumerate() {
                let band = joint_band(&sub, level)?;
                let all = band.iter().zip(&truth[t]).all(|(b, v)| b.map_or(true, |b| covers(b, *v)));
                joint[k] = f64::from(u8::from(all));
            }
            Ok(PeriodScore {
                t: t + 1,
                cov95_pointwise: pt[0],
                cov50_pointwise: pt[1],
                cov95_joint: joint[0],
                cov50_joint: joint[1],
                mse: e.mse,
                mae: e.mae,
                msre: e.msre,
                mare: e.mare,
            })
        })
        .collect()
}

/// Per-period scores averaged over successful replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub rows: Vec<PeriodScore>,
    pub replicates: Vec<Vec<PeriodScore>>,
    pub failed: Vec<(usize, String)>,
}

impl StudyReport {
    fn from_replicates(replicates: Vec<Vec<PeriodScore>>, failed: Vec<(usize, String)>) -> Self {
        let n = replicates.len() as f64;
        let periods = replicates.first().map_or(0, Vec::len);
        let rows = (0..periods)
            .map(|t| {
                let mut s = PeriodScore {
                    t: t + 1,
                    cov95_pointwise: 0.0,
                    cov50_pointwise: 0.0,
                    cov95_joint: 0.0,
                    cov50_joint: 0.0,
                    mse: 0.0,
                    mae: 0.0,
                    msre: 0.0,
                    mare: 0.0,
                };
                for r in &replicates {
                    let x = r[t];
                    s.cov95_pointwise += x.cov95_pointwise / n;
                    s.cov50_pointwise += x.cov50_pointwise / n;
                    s.cov95_joint += x.cov95_joint / n;
                    s.cov50_joint += x.cov50_joint / n;
                    s.mse += x.mse / n;
                    s.mae += x.mae / n;
                    s.msre += x.msre / n;
                    s.mare += x.mare / n;
                }
                s
            })
            .collect();
        Self {
            rows,
            replicates,
            failed,
        }
    }

    /// Average of a column over periods.
    pub fn overall(&self, f: impl Fn(&PeriodScore) -> f64) -> f64 {
        self.rows.iter().map(&f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn write_csv(&self, path: &Path, fingerprint: &str) -> Result<()> {
        write_rows(path, fingerprint, &self.rows)
    }
}

/// Generate, fit and score `cfg.replicates` datasets. Replicates run in
/// parallel with seeds derived from the simulation seed. Failed chains are
/// excluded from the averages and listed in the report.
pub fn run_study(cfg: &SimulationConfig, fit: &Config, choice: ModelChoice) -> Result<StudyReport> {
    cfg.validate()?;
    fit.validate()?;
    let results: Vec<(usize, Result<Vec<PeriodScore>>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = unit_seed(cfg.seed, r);
            let out = Replicate::generate(cfg, seed).and_then(|rep| {
                let data = rep.model_data(cfg, fit, choice)?;
                let draws = run_chain(fit, &data, unit_seed(fit.mcmc.seed, r))?;
                score_replicate(&draws, &rep.truth)
            });
            (r, out)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in results {
        match res {
            Ok(s) => ok.push(s),
            Err(e @ (Error::NonFiniteState { .. } | Error::NotPositiveDefinite { .. } | Error::Domain(_))) => {
                log::warn!("replicate {r} failed: {e}");
                failed.push((r, e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    if ok.is_empty() {
        return Err(Error::InvalidInput("every replicate failed".into()));
    }
    Ok(StudyReport::from_replicates(ok, failed))
}
