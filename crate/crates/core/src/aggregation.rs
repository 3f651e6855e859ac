//! Per-draw aggregation of annual tract proportions to other supports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_rows;
use crate::error::{Error, Result};
use crate::geometry::{population_weights, ArealHierarchy};
use crate::metrics::{mean_sd, pointwise_ci};
use crate::model::PosteriorDraws;

const WEIGHT_TOLERANCE: f64 = 1e-9;

/// A named weighted combination of `(tract, year)` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSpec {
    pub name: String,
    pub cells: Vec<(String, i32, f64)>,
}

impl SupportSpec {
    pub fn new(name: impl Into<String>, cells: Vec<(String, i32, f64)>) -> Result<Self> {
        let name = name.into();
        if cells.is_empty() {
            return Err(Error::InvalidInput(format!("support {name} has no cells")));
        }
        if cells.iter().any(|c| !(c.2 >= 0.0)) {
            return Err(Error::InvalidInput(format!("support {name} has a negative weight")));
        }
        let total: f64 = cells.iter().map(|c| c.2).sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidInput(format!("weights of support {name} sum to {total}")));
        }
        Ok(Self { name, cells })
    }

    /// Equal-weight average over `period_len` years ending at `end_year`.
    pub fn multi_year(tract: &str, end_year: i32, period_len: u32) -> Self {
        let w = 1.0 / period_len as f64;
        let cells = (0..period_len as i32)
            .map(|k| (tract.to_string(), end_year - period_len as i32 + 1 + k, w))
            .collect();
        Self {
            name: format!("{tract}:{end_year}:{period_len}"),
            cells,
        }
    }

    /// Population-weighted average over the tracts of a county, averaged over
    /// the years `first..=last`. Missing population years fall back to the
    /// nearest available year.
    pub fn county_window(h: &ArealHierarchy, county: &str, first: i32, last: i32) -> Result<Self> {
        let tracts = h.tracts_of_county(county);
        if tracts.is_empty() {
            return Err(Error::UnknownArea(county.to_string()));
        }
        if last < first {
            return Err(Error::InvalidInput(format!("empty window {first}..={last}")));
        }
        let share = 1.0 / (last - first + 1) as f64;
        let mut cells = Vec::new();
        for year in first..=last {
            let pops = tracts
                .iter()
                .map(|t| {
                    let (p, used) = h
                        .population_nearest(t, year)
                        .ok_or_else(|| Error::InvalidInput(format!("no population for tract {t}")))?;
                    if used != year {
                        log::warn!("population of {t} for {year} taken from {used}");
                    }
                    Ok(p)
                })
                .collect::<Result<Vec<f64>>>()?;
            let total: f64 = pops.iter().sum();
            if !(total > 0.0) {
                return Err(Error::ZeroPopulation {
                    area: county.to_string(),
                    year,
                });
            }
            cells.extend(tracts.iter().zip(pops).map(|(t, p)| (t.to_string(), year, share * p / total)));
        }
        Self::new(format!("{county}:{first}-{last}"), cells)
    }
}

/// Per-draw value of a support.
pub fn custom_support(draws: &PosteriorDraws, spec: &SupportSpec) -> Result<Vec<f64>> {
    let mut idx = Vec::with_capacity(spec.cells.len());
    let mut missing = Vec::new();
    for (t, y, w) in &spec.cells {
        match draws.cell_index(t, *y) {
            Some(i) => idx.push((i, *w)),
            None => missing.push(format!("{t}@{y}")),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCells(format!("support {}: {}", spec.name, missing.join(", "))));
    }
    Ok(draws.pi.iter().map(|d| idx.iter().map(|&(i, w)| w * d[i]).sum()).collect())
}

pub fn five_year_average(draws: &PosteriorDraws, tract: &str, end_year: i32) -> Result<Vec<f64>> {
    custom_support(draws, &SupportSpec::multi_year(tract, end_year, 5))
}

pub fn puma_aggregate(draws: &PosteriorDraws, h: &ArealHierarchy, puma: &str, year: i32) -> Result<Vec<f64>> {
    let cells = population_weights(h, puma, year)?
        .into_iter()
        .map(|(t, w)| (t, year, w))
        .collect();
    custom_support(draws, &SupportSpec::new(format!("{puma}:{year}"), cells)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SupportRow {
    support_name: String,
    tract_id: String,
    year: i32,
    weight: f64,
}

/// Read supports from CSV `support_name,tract_id,year,weight`, in order of
/// first appearance.
pub fn read_supports(path: &Path) -> Result<Vec<SupportSpec>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut order = Vec::new();
    let mut groups: BTreeMap<String, Vec<(String, i32, f64)>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: SupportRow = row?;
        if !groups.contains_key(&row.support_name) {
            order.push(row.support_name.clone());
        }
        groups.entry(row.support_name).or_default().push((row.tract_id, row.year, row.weight));
    }
    order
        .into_iter()
        .map(|name| {
            let cells = groups.remove(&name).unwrap();
            SupportSpec::new(name, cells)
        })
        .collect()
}

pub fn write_supports(path: &Path, fingerprint: &str, specs: &[SupportSpec]) -> Result<()> {
    let rows: Vec<SupportRow> = specs
        .iter()
        .flat_map(|s| {
            s.cells.iter().map(|(t, y, wt)| SupportRow {
                support_name: s.name.clone(),
                tract_id: t.clone(),
                year: *y,
                weight: *wt,
            })
        })
        .collect();
    write_rows(path, fingerprint, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub support_name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

pub fn summarize_support(name: &str, values: &[f64]) -> Result<SupportSummary> {
    let (mean, sd) = mean_sd(values);
    let (q025, q975) = pointwise_ci(values, 0.95)?;
    Ok(SupportSummary {
        support_name: name.to_string(),
        mean,
        sd,
        q025,
        q975,
    })
}
