//! Storage and summaries of posterior draws.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_rows;
use crate::diagnostics::{chain_ess, geweke_default};
use crate::error::{Error, Result};
use crate::io::{read_columns, write_columns, ColumnHeader};
use crate::metrics::{mean_sd, quantile_sorted, sorted};
use crate::model::PosteriorDraws;

#[derive(Debug, Serialize, Deserialize)]
struct DrawsMeta {
    cells: Vec<(String, i32)>,
    params: Vec<String>,
    acceptance: Vec<(String, f64)>,
    seed: u64,
    chains: usize,
}

fn cell_column(tract: &str, year: i32) -> String {
    format!("pi[{tract},{year}]")
}

/// Write draws as a binary columnar file: parameters first, then one column per cell.
pub fn save_draws(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let meta = DrawsMeta {
        cells: draws.cells.clone(),
        params: draws.params.iter().map(|(n, _)| n.clone()).collect(),
        acceptance: draws.acceptance.clone(),
        seed: draws.seed,
        chains: draws.chains,
    };
    let mut names = meta.params.clone();
    names.extend(draws.cells.iter().map(|(t, y)| cell_column(t, *y)));
    let mut columns: Vec<Vec<f64>> = draws.params.iter().map(|(_, v)| v.clone()).collect();
    columns.extend((0..draws.cells.len()).map(|c| draws.cell_draws(c)));
    let header = ColumnHeader {
        columns: names,
        rows: draws.n_draws(),
        fingerprint: draws.fingerprint.clone(),
        meta: serde_json::to_value(&meta)?,
    };
    write_columns(path, &header, &columns)
}

pub fn load_draws(path: &Path) -> Result<PosteriorDraws> {
    let (header, columns) = read_columns(path)?;
    let meta: DrawsMeta = serde_json::from_value(header.meta).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: format!("draws metadata: {e}"),
    })?;
    let np = meta.params.len();
    if columns.len() != np + meta.cells.len() {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "column count does not match metadata".into(),
        });
    }
    let pi = (0..header.rows).map(|i| columns[np..].iter().map(|c| c[i]).collect()).collect();
    Ok(PosteriorDraws {
        cells: meta.cells,
        pi,
        params: meta.params.into_iter().zip(columns.into_iter().take(np)).collect(),
        acceptance: meta.acceptance,
        seed: meta.seed,
        fingerprint: header.fingerprint,
        chains: meta.chains,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub param: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q975: f64,
    pub ess: f64,
    pub geweke_z: f64,
}

/// ESS summed over chains; Geweke z of the first chain (NaN if it is constant or short).
pub fn summarize_param(name: &str, values: &[f64], chains: usize) -> ParamSummary {
    let chains = chains.max(1);
    let len = values.len() / chains;
    let (ess, z) = if len == 0 {
        (0.0, f64::NAN)
    } else {
        let ess = values.chunks(len).take(chains).map(chain_ess).sum();
        (ess, geweke_default(&values[..len]).unwrap_or(f64::NAN))
    };
    let s = sorted(values);
    let (mean, sd) = mean_sd(values);
    ParamSummary {
        param: name.to_string(),
        mean,
        sd,
        q025: quantile_sorted(&s, 0.025),
        q25: quantile_sorted(&s, 0.25),
        q50: quantile_sorted(&s, 0.5),
        q75: quantile_sorted(&s, 0.75),
        q975: quantile_sorted(&s, 0.975),
        ess,
        geweke_z: z,
    }
}

/// One row per monitored parameter.
pub fn summarize_params(draws: &PosteriorDraws) -> Vec<ParamSummary> {
    draws.params.iter().map(|(n, v)| summarize_param(n, v, draws.chains)).collect()
}

pub fn write_param_summary(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    write_rows(path, &draws.fingerprint, &summarize_params(draws))
}

/// Monitored parameters whose ESS falls below `floor`. Parameters held fixed
/// (zero variance) are not monitored.
pub fn ess_shortfalls(summary: &[ParamSummary], floor: f64) -> Vec<(String, f64)> {
    summary
        .iter()
        .filter(|s| s.sd > 0.0 && s.ess < floor)
        .map(|s| (s.param.clone(), s.ess))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy() -> PosteriorDraws {
        PosteriorDraws {
            cells: vec![("a".into(), 2001), ("b".into(), 2001)],
            pi: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
            params: vec![("tau2".into(), vec![1.0, 2.0, 3.0]), ("alpha".into(), vec![0.5; 3])],
            acceptance: vec![("alpha".into(), 0.3)],
            seed: 7,
            fingerprint: "fp".into(),
            chains: 1,
        }
    }

    #[test]
    fn draws_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let d = toy();
        save_draws(&path, &d).unwrap();
        assert_eq!(load_draws(&path).unwrap(), d);
    }

    #[test]
    fn summary_quantiles_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = summarize_param("x", &x, 2);
        assert!(s.mean.abs() < 0.06 && (s.sd - 1.0).abs() < 0.05);
        assert!((s.q975 - 1.96).abs() < 0.12 && (s.q50).abs() < 0.06);
        assert!(s.ess > 3000.0 && s.ess < 5000.0);
        assert!(s.geweke_z.abs() < 4.0);

        let d = toy();
        let rows = summarize_params(&d);
        assert_eq!(rows.len(), 2);
        assert!(rows[1].geweke_z.is_nan());
        let short = ess_shortfalls(&rows, 1000.0);
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].0, "tau2");
    }
}
