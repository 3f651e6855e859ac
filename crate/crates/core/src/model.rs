//! Hierarchical probit disaggregation model and its MCMC sampler.
//!
//! Annual tract proportions are `Phi(mu_t + B_g eta_t + xi_county + e_{g,t})`.
//! Observations are binomial in an average of those proportions: five annual
//! cells for a 5-year tract estimate, population-weighted tracts for a 1-year
//! PUMA estimate. Each trial is augmented with the cell it came from and a
//! truncated-normal probit latent, so all location parameters have Gaussian
//! full conditionals given per-cell latent counts and sums.
//!
//! The cell-level error `e` is integrated out when drawing the weights, the
//! county effects and the covariance parameters, and redrawn afterwards.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::raw_counts;
use crate::config::{Config, InverseGamma, ModelConfig};
use crate::design_effect::{effective_counts, EffectiveCounts, SurveyEstimate};
use crate::error::{Error, Result};
use crate::geometry::{population_weights, quadrature_points, unit_seed, ArealHierarchy, Rect};
use crate::special::{expit, ln_norm_cdf, logit, norm_cdf, norm_quantile, probit_latent_moments, sample_probit_latent};
use crate::stmra::{build_knot_tree, ArealBasis, ArealDesign, BasisSystem, KnotPlacement, KnotTree, MaternParams, NU_RANGE};

/// Tracts, years and counties of one fit. Cells are `(tract, year)` pairs
/// indexed `period * n_tracts + tract`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyLayout {
    pub tracts: Vec<String>,
    pub years: Vec<i32>,
    pub counties: Vec<String>,
    pub tract_county: Vec<usize>,
}

impl StudyLayout {
    pub fn new(h: &ArealHierarchy, first_year: i32, last_year: i32) -> Result<Self> {
        if last_year < first_year {
            return Err(Error::InvalidInput(format!("empty study window {first_year}..={last_year}")));
        }
        let tracts: Vec<String> = h.tracts.iter().map(|t| t.area_id.clone()).collect();
        if tracts.is_empty() {
            return Err(Error::InvalidInput("hierarchy has no tracts".into()));
        }
        let counties = h.county_ids();
        let tract_county = tracts
            .iter()
            .map(|t| {
                let c = h
                    .tract_to_county
                    .get(t)
                    .ok_or_else(|| Error::InvalidInput(format!("tract {t} has no county")))?;
                Ok(counties.iter().position(|x| x == c).expect("county listed"))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tracts,
            years: (first_year..=last_year).collect(),
            counties,
            tract_county,
        })
    }

    pub fn n_tracts(&self) -> usize {
        self.tracts.len()
    }

    pub fn n_periods(&self) -> usize {
        self.years.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_tracts() * self.n_periods()
    }

    pub fn cell(&self, tract: usize, period: usize) -> usize {
        period * self.n_tracts() + tract
    }

    pub fn period_of(&self, year: i32) -> Result<usize> {
        let first = self.years[0];
        let last = *self.years.last().unwrap();
        if year < first || year > last {
            return Err(Error::YearOutOfWindow { year, first, last });
        }
        Ok((year - first) as usize)
    }

    /// `(tract_id, year)` of every cell in index order.
    pub fn cell_ids(&self) -> Vec<(String, i32)> {
        self.years
            .iter()
            .flat_map(|&y| self.tracts.iter().map(move |t| (t.clone(), y)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationKind {
    Tract,
    Puma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelObservation {
    pub kind: ObservationKind,
    pub area_id: String,
    pub period_len: u32,
    pub end_year: i32,
    pub counts: EffectiveCounts,
    pub cells: Vec<Cell>,
}

/// How survey estimates become binomial counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountMode {
    Effective { eps: f64 },
    Raw,
}

pub fn assemble_observations(
    estimates: &[SurveyEstimate],
    h: &ArealHierarchy,
    layout: &StudyLayout,
    mode: CountMode,
) -> Result<Vec<ModelObservation>> {
    estimates
        .iter()
        .map(|est| {
            est.validate()?;
            let counts = match mode {
                CountMode::Effective { eps } => effective_counts(est, eps)?,
                CountMode::Raw => {
                    let (m, q) = raw_counts(est)?;
                    EffectiveCounts {
                        ess: m,
                        enc: q,
                        clamped: false,
                    }
                }
            };
            let kind = if h.tract_index(&est.area_id).is_some() {
                ObservationKind::Tract
            } else if h.is_puma(&est.area_id) {
                ObservationKind::Puma
            } else {
                return Err(Error::UnknownArea(est.area_id.clone()));
            };
            let share = 1.0 / est.period_len as f64;
            let mut cells = Vec::new();
            for year in est.start_year()..=est.end_year {
                let period = layout.period_of(year)?;
                match kind {
                    ObservationKind::Tract => {
                        let g = layout.tracts.iter().position(|t| *t == est.area_id).expect("tract in layout");
                        cells.push(Cell {
                            index: layout.cell(g, period),
                            weight: share,
                        });
                    }
                    ObservationKind::Puma => {
                        for (tract, w) in population_weights(h, &est.area_id, year)? {
                            let g = layout.tracts.iter().position(|t| *t == tract).expect("tract in layout");
                            cells.push(Cell {
                                index: layout.cell(g, period),
                                weight: share * w,
                            });
                        }
                    }
                }
            }
            Ok(ModelObservation {
                kind,
                area_id: est.area_id.clone(),
                period_len: est.period_len,
                end_year: est.end_year,
                counts,
                cells,
            })
        })
        .collect()
}

/// Everything a chain needs that does not change while sampling.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub layout: StudyLayout,
    pub observations: Vec<ModelObservation>,
    pub tree: KnotTree,
    pub design: ArealDesign,
    pub raw_counts: bool,
}

impl ModelData {
    pub fn new(h: &ArealHierarchy, layout: StudyLayout, observations: Vec<ModelObservation>, cfg: &ModelConfig, raw_counts: bool) -> Result<Self> {
        let mut domain = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for t in &h.tracts {
            let b = t.bbox();
            domain = Rect::new(domain.x0.min(b.x0), domain.y0.min(b.y0), domain.x1.max(b.x1), domain.y1.max(b.y1));
        }
        let tree = build_knot_tree(domain, cfg.max_level, cfg.branching, cfg.r, KnotPlacement::Grid)?;
        let quads = h
            .tracts
            .iter()
            .enumerate()
            .map(|(i, t)| quadrature_points(t, cfg.q, unit_seed(cfg.quadrature_seed, i)))
            .collect::<Result<Vec<_>>>()?;
        let design = ArealDesign::new(&tree, &quads)?;
        for obs in &observations {
            if obs.cells.iter().any(|c| c.index >= layout.n_cells()) {
                return Err(Error::MissingCells(format!("observation for {} references unknown cells", obs.area_id)));
            }
        }
        Ok(Self {
            layout,
            observations,
            tree,
            design,
            raw_counts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Proposed,
    StandardBinomial,
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Self::Proposed),
            "standard-binomial" => Ok(Self::StandardBinomial),
            other => Err(Error::Config(format!("unknown model {other}"))),
        }
    }
}

/// Study window spanned by a set of estimates.
pub fn study_window(estimates: &[SurveyEstimate]) -> Result<(i32, i32)> {
    let first = estimates.iter().map(|e| e.end_year - e.period_len as i32 + 1).min();
    let last = estimates.iter().map(|e| e.end_year).max();
    first.zip(last).ok_or_else(|| Error::InvalidInput("no estimates".into()))
}

/// Assemble observations and the basis design for one model variant.
pub fn prepare_data(h: &ArealHierarchy, estimates: &[SurveyEstimate], window: (i32, i32), cfg: &Config, choice: ModelChoice) -> Result<ModelData> {
    let layout = StudyLayout::new(h, window.0, window.1)?;
    let mode = match choice {
        ModelChoice::Proposed => CountMode::Effective { eps: cfg.model.eps },
        ModelChoice::StandardBinomial => CountMode::Raw,
    };
    let obs = assemble_observations(estimates, h, &layout, mode)?;
    ModelData::new(h, layout, obs, &cfg.model, choice == ModelChoice::StandardBinomial)
}

/// Per-cell latent trial counts and latent sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n: Vec<f64>,
    pub s: Vec<f64>,
}

impl SuffStats {
    pub fn new(n_cells: usize) -> Self {
        Self {
            n: vec![0.0; n_cells],
            s: vec![0.0; n_cells],
        }
    }

    pub fn clear(&mut self) {
        self.n.iter_mut().for_each(|x| *x = 0.0);
        self.s.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Split `total` trials over cells with probabilities proportional to
/// `exp(log_w)` by sequential binomials.
fn allocate<R: Rng + ?Sized>(total: u64, log_w: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Domain("all allocation weights vanish".into()));
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let mut rest: f64 = w.iter().sum();
    let mut left = total;
    let mut out = vec![0; w.len()];
    for (i, &wi) in w.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == w.len() || wi >= rest {
            out[i] = left;
            break;
        }
        let p = (wi / rest).clamp(0.0, 1.0);
        let k = if p > 0.0 {
            Binomial::new(left, p).expect("valid binomial").sample(rng)
        } else {
            0
        };
        out[i] = k;
        left -= k;
        rest -= wi;
    }
    Ok(out)
}

fn add_latents<R: Rng + ?Sized>(lp: f64, count: u64, positive: bool, clt_threshold: u64, rng: &mut R) -> f64 {
    if count > clt_threshold {
        let (m, v) = probit_latent_moments(lp, positive);
        let k = count as f64;
        let z: f64 = rng.sample(StandardNormal);
        k * m + (k * v).sqrt() * z
    } else {
        (0..count).map(|_| sample_probit_latent(lp, positive, rng)).sum()
    }
}

/// Two-stage augmentation of one observation: allocate its trials to cells,
/// then add truncated-normal probit latents to the cell statistics. Cells
/// receiving more than `clt_threshold` trials of one sign get their latent
/// sum from its normal approximation.
pub fn augment_observation<R: Rng + ?Sized>(
    obs: &ModelObservation,
    lp: &[f64],
    clt_threshold: u64,
    stats: &mut SuffStats,
    rng: &mut R,
) -> Result<()> {
    let trials = obs.counts.ess;
    let successes = obs.counts.enc.min(trials);
    if trials == 0 {
        return Ok(());
    }
    if obs.cells.iter().all(|c| !lp[c.index].is_finite()) {
        return Err(Error::Domain(format!("non-finite linear predictors for {}", obs.area_id)));
    }
    let lw: Vec<f64> = obs.cells.iter().map(|c| c.weight.ln()).collect();
    for (positive, count) in [(true, successes), (false, trials - successes)] {
        if count == 0 {
            continue;
        }
        let log_p: Vec<f64> = obs
            .cells
            .iter()
            .zip(&lw)
            .map(|(c, w)| w + if positive { ln_norm_cdf(lp[c.index]) } else { ln_norm_cdf(-lp[c.index]) })
            .collect();
        let alloc = allocate(count, &log_p, rng)?;
        for (c, k) in obs.cells.iter().zip(alloc) {
            if k > 0 {
                stats.n[c.index] += k as f64;
                stats.s[c.index] += add_latents(lp[c.index], k, positive, clt_threshold, rng);
            }
        }
    }
    Ok(())
}

/// Full sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub eta: Vec<DVector<f64>>,
    pub alpha: f64,
    pub mu: Vec<f64>,
    pub xi: Vec<f64>,
    pub eps: Vec<f64>,
    pub tau2: f64,
    pub tau_c2: f64,
    pub sigma2: f64,
    pub phi: f64,
    pub nu: f64,
}

/// `mu_t + B_g eta_t + xi + e` for one cell.
pub fn linear_predictor(state: &ModelState, b: &ArealBasis, layout: &StudyLayout, tract: usize, period: usize) -> f64 {
    state.mu[period]
        + b.row_dot(tract, &state.eta[period])
        + state.xi[layout.tract_county[tract]]
        + state.eps[layout.cell(tract, period)]
}

/// Retained draws of one or more chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub cells: Vec<(String, i32)>,
    /// `[draw][cell]` annual tract proportions.
    pub pi: Vec<Vec<f64>>,
    pub params: Vec<(String, Vec<f64>)>,
    /// Post burn-in acceptance rates of the Metropolis steps.
    pub acceptance: Vec<(String, f64)>,
    pub seed: u64,
    pub fingerprint: String,
    /// Number of pooled chains, stored back to back with equal lengths.
    pub chains: usize,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.pi.len()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn cell_index(&self, tract: &str, year: i32) -> Option<usize> {
        self.cells.iter().position(|(t, y)| t == tract && *y == year)
    }

    /// Draws of one cell's proportion.
    pub fn cell_draws(&self, cell: usize) -> Vec<f64> {
        self.pi.iter().map(|d| d[cell]).collect()
    }

    pub fn posterior_mean(&self) -> Vec<f64> {
        let n = self.pi.len() as f64;
        let mut m = vec![0.0; self.cells.len()];
        for d in &self.pi {
            for (a, b) in m.iter_mut().zip(d) {
                *a += b / n;
            }
        }
        m
    }

    /// Concatenate chains drawn on the same cells.
    pub fn concat(mut chains: Vec<PosteriorDraws>) -> Result<PosteriorDraws> {
        let mut first = chains.remove(0);
        let n_chains = chains.len() as f64 + 1.0;
        first.chains = chains.len() + 1;
        for c in chains {
            if c.cells != first.cells {
                return Err(Error::InvalidInput("chains disagree on cells".into()));
            }
            first.pi.extend(c.pi);
            for ((_, a), (_, b)) in first.params.iter_mut().zip(c.params) {
                a.extend(b);
            }
            for ((_, a), (_, b)) in first.acceptance.iter_mut().zip(c.acceptance) {
                *a += b;
            }
        }
        for (_, a) in &mut first.acceptance {
            *a /= n_chains;
        }
        Ok(first)
    }
}

/// Adaptive log-scale for a random-walk proposal.
#[derive(Debug, Clone)]
struct Proposal {
    log_scale: f64,
    accepted: usize,
    tried: usize,
    adapt_steps: usize,
}

impl Proposal {
    fn new(scale: f64) -> Self {
        Self {
            log_scale: scale.ln(),
            accepted: 0,
            tried: 0,
            adapt_steps: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool, adapt: bool, target: f64) {
        if adapt {
            self.adapt_steps += 1;
            let gain = (self.adapt_steps as f64).powf(-0.6);
            self.log_scale += gain * (f64::from(u8::from(accepted)) - target);
            self.log_scale = self.log_scale.clamp(-12.0, 3.0);
        } else {
            self.tried += 1;
            self.accepted += usize::from(accepted);
        }
    }

    fn rate(&self) -> f64 {
        if self.tried == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.tried as f64
        }
    }
}

fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng);
    1.0 / g
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Quadratic-form pieces of the AR(1) prior under unit-variance blocks:
/// `first = sum eta_1' Q eta_1`, `inner = sum_{t>1} eta_t' Q eta_t`,
/// `prev = sum_{t>1} eta_{t-1}' Q eta_{t-1}`, `cross = sum_{t>1} eta_t' Q eta_{t-1}`.
#[derive(Debug, Clone, Copy)]
struct ArForms {
    first: f64,
    inner: f64,
    prev: f64,
    cross: f64,
}

impl ArForms {
    fn compute(sys: &BasisSystem, eta: &[DVector<f64>]) -> Self {
        let r = sys.tree.r;
        let mut f = ArForms {
            first: 0.0,
            inner: 0.0,
            prev: 0.0,
            cross: 0.0,
        };
        let mut qx = vec![DVector::zeros(r); eta.len()];
        for (m, j) in sys.block_ids() {
            let off = sys.tree.col_offset(m, j);
            let q = sys.prec_unit(m, j);
            for (t, e) in eta.iter().enumerate() {
                qx[t] = q * e.rows(off, r);
            }
            for t in 0..eta.len() {
                let here = eta[t].rows(off, r);
                let quad = here.dot(&qx[t]);
                if t == 0 {
                    f.first += quad;
                } else {
                    f.inner += quad;
                    f.prev += eta[t - 1].rows(off, r).dot(&qx[t - 1]);
                    f.cross += here.dot(&qx[t - 1]);
                }
            }
        }
        f
    }

    fn quadratic(&self, alpha: f64) -> f64 {
        self.first + (self.inner - 2.0 * alpha * self.cross + alpha * alpha * self.prev) / (1.0 - alpha * alpha)
    }
}

/// Log density of the weights under the AR(1) prior, dropping constants.
fn eta_log_prior(sys: &BasisSystem, forms: &ArForms, periods: usize, alpha: f64, sigma2: f64) -> f64 {
    let nb = sys.n_basis() as f64;
    let t = periods as f64;
    let log_det: f64 = sys
        .block_ids()
        .iter()
        .map(|&(m, j)| 2.0 * sys.prec_unit_chol(m, j).diagonal().iter().map(|d| d.ln()).sum::<f64>())
        .sum();
    0.5 * t * log_det - 0.5 * t * nb * sigma2.ln() - 0.5 * (t - 1.0) * nb * (1.0 - alpha * alpha).ln()
        - forms.quadratic(alpha) / (2.0 * sigma2)
}

struct Sampler<'a> {
    cfg: &'a Config,
    data: &'a ModelData,
    sys: BasisSystem,
    basis: ArealBasis,
    state: ModelState,
    stats: SuffStats,
    /// Linear predictor without the cell error.
    lp0: Vec<f64>,
    cov_prop: Proposal,
    white_prop: Proposal,
    scale_prop: Proposal,
    innov_prop: Proposal,
    tau_prop: Proposal,
    alpha_prop: Proposal,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    fn new(cfg: &'a Config, data: &'a ModelData, seed: u64) -> Result<Self> {
        let init = &cfg.mcmc.init;
        let layout = &data.layout;
        let unit = MaternParams::new(1.0, init.phi, init.nu)?;
        let sys = BasisSystem::build(&data.tree, unit, cfg.model.jitter)?;
        let basis = data.design.evaluate(&sys);

        // start the trend at the pooled observed rate
        let (succ, trials) = data
            .observations
            .iter()
            .fold((0.0, 0.0), |(s, n), o| (s + o.counts.enc as f64, n + o.counts.ess as f64));
        let p0 = if trials > 0.0 { ((succ + 0.5) / (trials + 1.0)).clamp(0.01, 0.99) } else { 0.5 };
        let state = ModelState {
            eta: vec![DVector::zeros(sys.n_basis()); layout.n_periods()],
            alpha: init.alpha,
            mu: vec![norm_quantile(p0); layout.n_periods()],
            xi: vec![0.0; layout.counties.len()],
            eps: vec![0.0; layout.n_cells()],
            tau2: init.tau2,
            tau_c2: init.tau_c2,
            sigma2: init.sigma2,
            phi: init.phi,
            nu: init.nu,
        };
        let mut s = Self {
            cfg,
            data,
            sys,
            basis,
            state,
            stats: SuffStats::new(layout.n_cells()),
            lp0: vec![0.0; layout.n_cells()],
            cov_prop: Proposal::new(0.1),
            white_prop: Proposal::new(0.1),
            scale_prop: Proposal::new(0.1),
            innov_prop: Proposal::new(0.1),
            tau_prop: Proposal::new(0.1),
            alpha_prop: Proposal::new(0.3),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.refresh_lp0();
        Ok(s)
    }

    fn layout(&self) -> &StudyLayout {
        &self.data.layout
    }

    fn lp0_cell(&self, basis: &ArealBasis, tract: usize, period: usize) -> f64 {
        let st = &self.state;
        st.mu[period] + basis.row_dot(tract, &st.eta[period]) + st.xi[self.layout().tract_county[tract]]
    }

    fn refresh_lp0(&mut self) {
        let (nt, np) = (self.layout().n_tracts(), self.layout().n_periods());
        for p in 0..np {
            for g in 0..nt {
                let c = p * nt + g;
                self.lp0[c] = self.lp0_cell(&self.basis, g, p);
            }
        }
    }

    /// Precision and mean of each cell after integrating out the cell error.
    fn marginal_cell(&self, c: usize) -> Option<(f64, f64)> {
        let n = self.stats.n[c];
        (n > 0.0).then(|| (n / (1.0 + n * self.state.tau2), self.stats.s[c] / n))
    }

    fn augment(&mut self) -> Result<()> {
        self.stats.clear();
        let lp: Vec<f64> = self.lp0.iter().zip(&self.state.eps).map(|(a, b)| a + b).collect();
        for obs in &self.data.observations {
            augment_observation(obs, &lp, self.cfg.mcmc.clt_threshold, &mut self.stats, &mut self.rng)?;
        }
        Ok(())
    }

    /// Joint draw of `(mu_t, eta_t)` for every period.
    fn update_trend_and_weights(&mut self) -> Result<()> {
        let nt = self.layout().n_tracts();
        let np = self.layout().n_periods();
        let nb = self.sys.n_basis();
        let r = self.sys.tree.r;
        let alpha = self.state.alpha;
        let innov = 1.0 - alpha * alpha;
        let blocks = self.sys.block_ids();
        for t in 0..np {
            let cells: Vec<(usize, f64, f64)> = (0..nt)
                .filter_map(|g| {
                    let c = t * nt + g;
                    self.marginal_cell(c).map(|(p, y)| (g, p, y - self.state.xi[self.layout().tract_county[g]]))
                })
                .collect();
            let with_mu = !cells.is_empty();
            let off = usize::from(with_mu);
            let dim = nb + off;
            let mut prec = DMatrix::<f64>::zeros(dim, dim);
            let mut lin = DVector::<f64>::zeros(dim);

            // AR(1) prior given neighbouring periods
            let (scale, neighbours) = if np == 1 {
                (1.0, None)
            } else if t == 0 {
                (1.0 / innov, Some(&self.state.eta[1] * alpha))
            } else if t == np - 1 {
                (1.0 / innov, Some(&self.state.eta[np - 2] * alpha))
            } else {
                ((1.0 + alpha * alpha) / innov, Some((&self.state.eta[t - 1] + &self.state.eta[t + 1]) * alpha))
            };
            for &(m, j) in &blocks {
                let o = self.sys.tree.col_offset(m, j);
                let q = self.sys.prec_unit(m, j);
                prec.view_mut((o + off, o + off), (r, r)).copy_from(&(q * (scale / self.state.sigma2)));
                if let Some(nbr) = &neighbours {
                    let l = q * nbr.rows(o, r) / (innov * self.state.sigma2);
                    lin.rows_mut(o + off, r).copy_from(&l);
                }
            }

            // pseudo-data of each cell
            for &(g, p, y) in &cells {
                let row = &self.basis.rows[g];
                let target = if with_mu { y } else { y - self.state.mu[t] };
                if with_mu {
                    prec[(0, 0)] += p;
                    lin[0] += p * target;
                    for &(c, v) in row {
                        prec[(0, c + 1)] += p * v;
                        prec[(c + 1, 0)] += p * v;
                    }
                }
                for &(c1, v1) in row {
                    lin[c1 + off] += p * v1 * target;
                    for &(c2, v2) in row {
                        prec[(c1 + off, c2 + off)] += p * v1 * v2;
                    }
                }
            }

            let chol = Cholesky::new(prec.clone())
                .or_else(|| {
                    let mut a = prec;
                    let bump = 1e-8 * (0..dim).map(|i| a[(i, i)]).fold(0.0, f64::max).max(1.0);
                    for i in 0..dim {
                        a[(i, i)] += bump;
                    }
                    Cholesky::new(a)
                })
                .ok_or_else(|| Error::NotPositiveDefinite {
                    block: format!("weights at period {t}"),
                })?;
            let mean = chol.solve(&lin);
            let z = DVector::from_fn(dim, |_, _| std_normal(&mut self.rng));
            let noise = chol.l().tr_solve_lower_triangular(&z).expect("nonsingular factor");
            let draw = mean + noise;
            if with_mu {
                self.state.mu[t] = draw[0];
            }
            self.state.eta[t] = draw.rows(off, nb).into_owned();
            for g in 0..nt {
                self.lp0[t * nt + g] = self.lp0_cell(&self.basis, g, t);
            }
        }
        Ok(())
    }

    fn update_county_effects(&mut self) {
        let nt = self.layout().n_tracts();
        let nc = self.layout().counties.len();
        let mut prec = vec![1.0 / self.state.tau_c2; nc];
        let mut lin = vec![0.0; nc];
        for c in 0..self.layout().n_cells() {
            if let Some((p, y)) = self.marginal_cell(c) {
                let k = self.layout().tract_county[c % nt];
                prec[k] += p;
                lin[k] += p * (y - (self.lp0[c] - self.state.xi[k]));
            }
        }
        for k in 0..nc {
            let old = self.state.xi[k];
            let new = lin[k] / prec[k] + std_normal(&mut self.rng) / prec[k].sqrt();
            self.state.xi[k] = new;
            if new != old {
                let layout = &self.data.layout;
                for c in (0..layout.n_cells()).filter(|c| layout.tract_county[c % nt] == k) {
                    self.lp0[c] += new - old;
                }
            }
        }
    }

    /// Move the trend up and every county effect down by a common shift, which
    /// leaves the linear predictor unchanged; the shift is drawn exactly.
    fn shift_county_level(&mut self) {
        let k = self.state.xi.len();
        let has_data = (0..self.layout().n_periods()).all(|t| (0..self.layout().n_tracts()).any(|g| self.stats.n[t * self.layout().n_tracts() + g] > 0.0));
        if k == 0 || !has_data {
            return;
        }
        let mean = self.state.xi.iter().sum::<f64>() / k as f64;
        let delta = mean + (self.state.tau_c2 / k as f64).sqrt() * std_normal(&mut self.rng);
        for x in &mut self.state.xi {
            *x -= delta;
        }
        for m in &mut self.state.mu {
            *m += delta;
        }
    }

    /// Random-walk step on the cell-error variance with the errors integrated out.
    fn update_tau2_collapsed(&mut self, adapt: bool) {
        if self.cfg.mcmc.is_fixed("tau2") {
            return;
        }
        let pri = self.cfg.priors.ig_tau2;
        let target = |tau2: f64| {
            let mut lp = -(pri.shape + 1.0) * tau2.ln() - pri.rate / tau2 + tau2.ln();
            for (c, l) in self.lp0.iter().enumerate() {
                let n = self.stats.n[c];
                if n > 0.0 {
                    let v = 1.0 / n + tau2;
                    let d = self.stats.s[c] / n - l;
                    lp -= 0.5 * (v.ln() + d * d / v);
                }
            }
            lp
        };
        let cur = self.state.tau2;
        let proposed = cur * (self.tau_prop.scale() * std_normal(&mut self.rng)).exp();
        let accept = proposed.is_finite() && proposed > 0.0 && self.rng.gen::<f64>().ln() < target(proposed) - target(cur);
        if accept {
            self.state.tau2 = proposed;
        }
        self.tau_prop.record(accept, adapt, self.cfg.mcmc.target_accept);
    }

    fn update_cell_errors(&mut self) {
        for c in 0..self.layout().n_cells() {
            let n = self.stats.n[c];
            let prec = 1.0 / self.state.tau2 + n;
            let mean = (self.stats.s[c] - n * self.lp0[c]) / prec;
            self.state.eps[c] = mean + std_normal(&mut self.rng) / prec.sqrt();
        }
    }

    fn update_variances(&mut self, forms: &ArForms) {
        let pri = &self.cfg.priors;
        let mc = &self.cfg.mcmc;
        let ig = |p: InverseGamma, n: f64, ss: f64, rng: &mut ChaCha8Rng| sample_inv_gamma(p.shape + 0.5 * n, p.rate + 0.5 * ss, rng);
        if !mc.is_fixed("tau2") {
            let ss: f64 = self.state.eps.iter().map(|e| e * e).sum();
            self.state.tau2 = ig(pri.ig_tau2, self.state.eps.len() as f64, ss, &mut self.rng);
        }
        if !mc.is_fixed("tauC2") {
            let ss: f64 = self.state.xi.iter().map(|e| e * e).sum();
            self.state.tau_c2 = ig(pri.ig_tau_c2, self.state.xi.len() as f64, ss, &mut self.rng);
        }
        if !mc.is_fixed("sigma2") {
            let n = (self.sys.n_basis() * self.layout().n_periods()) as f64;
            self.state.sigma2 = ig(pri.ig_sigma2, n, forms.quadratic(self.state.alpha), &mut self.rng);
        }
    }

    fn update_alpha(&mut self, forms: &ArForms, adapt: bool) {
        if self.cfg.mcmc.is_fixed("alpha") {
            return;
        }
        let a = self.state.alpha;
        let proposed = expit(logit(a) + self.alpha_prop.scale() * std_normal(&mut self.rng));
        if !(proposed > 0.0 && proposed < 1.0) {
            self.alpha_prop.record(false, adapt, self.cfg.mcmc.target_accept);
            return;
        }
        let np = self.layout().n_periods();
        let lp = |x: f64| eta_log_prior(&self.sys, forms, np, x, self.state.sigma2) + (x * (1.0 - x)).ln();
        let log_ratio = lp(proposed) - lp(a);
        let accept = self.rng.gen::<f64>().ln() < log_ratio;
        if accept {
            self.state.alpha = proposed;
        }
        self.alpha_prop.record(accept, adapt, self.cfg.mcmc.target_accept);
    }

    fn lp0_with(&self, basis: &ArealBasis, eta: &[DVector<f64>]) -> Vec<f64> {
        let layout = self.layout();
        let nt = layout.n_tracts();
        let st = &self.state;
        (0..layout.n_cells())
            .map(|c| {
                let (g, t) = (c % nt, c / nt);
                st.mu[t] + basis.row_dot(g, &eta[t]) + st.xi[layout.tract_county[g]]
            })
            .collect()
    }

    /// Pseudo-likelihood of the cell means with the cell error integrated out.
    fn marginal_loglik(&self, lp0: &[f64]) -> f64 {
        let mut ll = 0.0;
        for (c, l) in lp0.iter().enumerate() {
            if let Some((p, y)) = self.marginal_cell(c) {
                let d = y - l;
                ll -= 0.5 * p * d * d;
            }
        }
        ll
    }

    fn log_cov_prior(&self, phi: f64, nu: f64) -> f64 {
        let (shape, rate) = self.cfg.priors.phi_gamma;
        let (lo, hi) = self.cfg.priors.nu_uniform;
        if nu <= lo || nu >= hi {
            return f64::NEG_INFINITY;
        }
        (shape - 1.0) * phi.ln() - rate * phi
    }

    /// Joint random-walk step on range (log scale) and smoothness (logit scale).
    /// The whitened variant keeps the standardized weights fixed and maps the
    /// weights through the new blocks.
    fn update_covariance(&mut self, forms: &ArForms, whitened: bool, adapt: bool) {
        let fix_phi = self.cfg.mcmc.is_fixed("phi");
        let fix_nu = self.cfg.mcmc.is_fixed("nu");
        if fix_phi && fix_nu {
            return;
        }
        let (lo, hi) = (NU_RANGE.0.max(self.cfg.priors.nu_uniform.0), NU_RANGE.1.min(self.cfg.priors.nu_uniform.1));
        let s = if whitened { self.white_prop.scale() } else { self.cov_prop.scale() };
        let (phi, nu) = (self.state.phi, self.state.nu);
        let phi_new = if fix_phi { phi } else { phi * (s * std_normal(&mut self.rng)).exp() };
        let nu_new = if fix_nu {
            nu
        } else {
            let u = logit((nu - lo) / (hi - lo)) + s * std_normal(&mut self.rng);
            lo + (hi - lo) * expit(u)
        };
        if !(phi_new.is_finite() && phi_new > 0.0 && nu_new > lo && nu_new < hi) {
            self.cov_record(whitened, false, adapt);
            return;
        }
        let candidate = MaternParams::new(1.0, phi_new, nu_new).and_then(|p| BasisSystem::build(&self.data.tree, p, self.cfg.model.jitter));
        let sys_new = match candidate {
            Ok(s) => s,
            Err(e) => {
                log::debug!("covariance proposal rejected: {e}");
                self.cov_record(whitened, false, adapt);
                return;
            }
        };
        let basis_new = self.data.design.evaluate(&sys_new);
        let eta_new = if whitened { self.rewhiten(&sys_new) } else { self.state.eta.clone() };
        let lp0_new = self.lp0_with(&basis_new, &eta_new);
        let mut cur = self.marginal_loglik(&self.lp0) + self.log_cov_prior(phi, nu);
        let mut new = self.marginal_loglik(&lp0_new) + self.log_cov_prior(phi_new, nu_new);
        if !whitened {
            let np = self.layout().n_periods();
            let (a, s2) = (self.state.alpha, self.state.sigma2);
            cur += eta_log_prior(&self.sys, forms, np, a, s2);
            new += eta_log_prior(&sys_new, &ArForms::compute(&sys_new, &eta_new), np, a, s2);
        }
        // proposal Jacobians of the log and logit transforms
        let jac = (phi_new / phi).ln() + ((nu_new - lo) * (hi - nu_new) / ((nu - lo) * (hi - nu))).ln();
        let accept = self.rng.gen::<f64>().ln() < new - cur + jac;
        if accept {
            self.sys = sys_new;
            self.basis = basis_new;
            self.state.phi = phi_new;
            self.state.nu = nu_new;
            self.state.eta = eta_new;
            self.lp0 = lp0_new;
        }
        self.cov_record(whitened, accept, adapt);
    }

    fn cov_record(&mut self, whitened: bool, accepted: bool, adapt: bool) {
        let target = self.cfg.mcmc.target_accept;
        if whitened {
            self.white_prop.record(accepted, adapt, target);
        } else {
            self.cov_prop.record(accepted, adapt, target);
        }
    }

    /// Weights with the same standardized values under the blocks of `sys_new`.
    fn rewhiten(&self, sys_new: &BasisSystem) -> Vec<DVector<f64>> {
        let r = self.sys.tree.r;
        let mut out = self.state.eta.clone();
        for (m, j) in self.sys.block_ids() {
            let off = self.sys.tree.col_offset(m, j);
            let l_old = self.sys.prec_unit_chol(m, j);
            let l_new = sys_new.prec_unit_chol(m, j);
            for (t, e) in self.state.eta.iter().enumerate() {
                let u = l_old.tr_mul(&e.rows(off, r).into_owned());
                let x = l_new.tr_solve_lower_triangular(&u).expect("nonsingular factor");
                out[t].rows_mut(off, r).copy_from(&x);
            }
        }
        out
    }

    /// Rescale the variance and the weights together, leaving the standardized
    /// weights unchanged.
    fn update_sigma2_scale(&mut self, adapt: bool) {
        if self.cfg.mcmc.is_fixed("sigma2") {
            return;
        }
        let log_c = self.scale_prop.scale() * std_normal(&mut self.rng);
        let c = log_c.exp();
        let root = c.sqrt();
        let eta_new: Vec<DVector<f64>> = self.state.eta.iter().map(|e| e * root).collect();
        let lp0_new = self.lp0_with(&self.basis, &eta_new);
        let pri = self.cfg.priors.ig_sigma2;
        let log_ig = |x: f64| -(pri.shape + 1.0) * x.ln() - pri.rate / x;
        let s2 = self.state.sigma2;
        let log_ratio = self.marginal_loglik(&lp0_new) - self.marginal_loglik(&self.lp0) + log_ig(c * s2) - log_ig(s2) + log_c;
        let accept = self.rng.gen::<f64>().ln() < log_ratio;
        if accept {
            self.state.sigma2 = c * s2;
            self.state.eta = eta_new;
            self.lp0 = lp0_new;
        }
        self.scale_prop.record(accept, adapt, self.cfg.mcmc.target_accept);
    }

    /// Move the autocorrelation with the standardized innovations held fixed.
    fn update_alpha_innovations(&mut self, adapt: bool) {
        if self.cfg.mcmc.is_fixed("alpha") || self.layout().n_periods() < 2 {
            return;
        }
        let a = self.state.alpha;
        let proposed = expit(logit(a) + self.innov_prop.scale() * std_normal(&mut self.rng));
        let target = self.cfg.mcmc.target_accept;
        if !(proposed > 0.0 && proposed < 1.0) {
            self.innov_prop.record(false, adapt, target);
            return;
        }
        let eta = &self.state.eta;
        let (sa, sp) = ((1.0 - a * a).sqrt(), (1.0 - proposed * proposed).sqrt());
        let mut eta_new = vec![eta[0].clone()];
        for t in 1..eta.len() {
            let innov = (&eta[t] - &eta[t - 1] * a) / sa;
            let next = &eta_new[t - 1] * proposed + innov * sp;
            eta_new.push(next);
        }
        let lp0_new = self.lp0_with(&self.basis, &eta_new);
        let log_ratio = self.marginal_loglik(&lp0_new) - self.marginal_loglik(&self.lp0)
            + (proposed * (1.0 - proposed)).ln()
            - (a * (1.0 - a)).ln();
        let accept = self.rng.gen::<f64>().ln() < log_ratio;
        if accept {
            self.state.alpha = proposed;
            self.state.eta = eta_new;
            self.lp0 = lp0_new;
        }
        self.innov_prop.record(accept, adapt, target);
    }

    fn check_finite(&self, iteration: usize) -> Result<()> {
        let st = &self.state;
        let scalars = [st.alpha, st.tau2, st.tau_c2, st.sigma2, st.phi, st.nu];
        if scalars.iter().any(|x| !x.is_finite()) || self.lp0.iter().chain(&st.eps).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState {
                iteration,
                detail: format!(
                    "alpha={} tau2={} tauC2={} sigma2={} phi={} nu={} mu={:?}",
                    st.alpha, st.tau2, st.tau_c2, st.sigma2, st.phi, st.nu, st.mu
                ),
            });
        }
        Ok(())
    }

    fn step(&mut self, iteration: usize, adapt: bool) -> Result<()> {
        self.augment()?;
        self.update_trend_and_weights()?;
        self.update_county_effects();
        self.shift_county_level();
        let forms = ArForms::compute(&self.sys, &self.state.eta);
        self.update_covariance(&forms, iteration % 2 == 1, adapt);
        self.update_sigma2_scale(adapt);
        self.update_alpha_innovations(adapt);
        self.update_tau2_collapsed(adapt);
        self.update_cell_errors();
        let forms = ArForms::compute(&self.sys, &self.state.eta);
        self.update_variances(&forms);
        self.update_alpha(&forms, adapt);
        self.check_finite(iteration)
    }

    fn proportions(&self) -> Vec<f64> {
        self.lp0.iter().zip(&self.state.eps).map(|(a, b)| norm_cdf(a + b)).collect()
    }
}

/// Run one chain: adaptive burn-in, then thinned sampling.
pub fn run_chain(cfg: &Config, data: &ModelData, seed: u64) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let mc = &cfg.mcmc;
    let mut sampler = Sampler::new(cfg, data, seed)?;
    let np = data.layout.n_periods();
    let mut names: Vec<String> = data.layout.years.iter().map(|y| format!("mu[{y}]")).collect();
    names.extend(["tau2", "tauC2", "sigma2", "phi", "nu", "alpha"].map(String::from));
    let mut params: Vec<Vec<f64>> = vec![Vec::with_capacity(mc.retained()); names.len()];
    let mut pi = Vec::with_capacity(mc.retained());
    for it in 0..mc.iters {
        let burn = it < mc.burnin;
        sampler.step(it, burn)?;
        if !burn && (it - mc.burnin + 1) % mc.thin == 0 {
            let st = &sampler.state;
            for (k, v) in st.mu.iter().enumerate() {
                params[k].push(*v);
            }
            for (k, v) in [st.tau2, st.tau_c2, st.sigma2, st.phi, st.nu, st.alpha].into_iter().enumerate() {
                params[np + k].push(v);
            }
            pi.push(sampler.proportions());
        }
    }
    Ok(PosteriorDraws {
        cells: data.layout.cell_ids(),
        pi,
        params: names.into_iter().zip(params).collect(),
        acceptance: vec![
            ("phi_nu".into(), sampler.cov_prop.rate()),
            ("phi_nu_whitened".into(), sampler.white_prop.rate()),
            ("sigma2_scale".into(), sampler.scale_prop.rate()),
            ("alpha".into(), sampler.alpha_prop.rate()),
            ("alpha_innovations".into(), sampler.innov_prop.rate()),
            ("tau2_collapsed".into(), sampler.tau_prop.rate()),
        ],
        seed,
        fingerprint: cfg.fingerprint(),
        chains: 1,
    })
}

/// Run `cfg.mcmc.chains` chains in parallel with consecutive seeds and pool them.
pub fn run_chains(cfg: &Config, data: &ModelData) -> Result<PosteriorDraws> {
    use rayon::prelude::*;
    let chains: Vec<PosteriorDraws> = (0..cfg.mcmc.chains as u64)
        .into_par_iter()
        .map(|k| run_chain(cfg, data, cfg.mcmc.seed.wrapping_add(k)))
        .collect::<Result<_>>()?;
    PosteriorDraws::concat(chains)
}
