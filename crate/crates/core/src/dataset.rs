//! CSV inputs and outputs of a disaggregation run.
//!
//! Files may begin with `#` comment lines, which carry run fingerprints.
//!
//! - geometry: `area_id,level,ring,x,y`, one row per polygon vertex in order
//! - hierarchy: `tract_id,puma_id,county_id`
//! - population: `area_id,year,population`
//! - estimates: `area_id,period_len,end_year,estimate,std_error,raw_sample_size`
//! - truth: `tract_id,year,pi`

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::design_effect::SurveyEstimate;
use crate::error::{Error, Result};
use crate::geometry::{ArealHierarchy, ArealUnit, Level, Point};

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    reader(path)?
        .deserialize()
        .map(|r| {
            r.map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Write rows under a `# fingerprint=` comment line.
pub fn write_rows<T: Serialize>(path: &Path, fingerprint: &str, rows: &[T]) -> Result<()> {
    let mut file = File::create(path)?;
    writeln!(file, "# fingerprint={fingerprint}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fingerprint recorded in the first line of a file, if any.
pub fn read_fingerprint(path: &Path) -> Option<String> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines().next()?.strip_prefix("# fingerprint=").map(str::to_string)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRow {
    pub area_id: String,
    pub level: Level,
    pub ring: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyRow {
    pub tract_id: String,
    pub puma_id: String,
    pub county_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationRow {
    pub area_id: String,
    pub year: i32,
    pub population: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub tract_id: String,
    pub year: i32,
    pub pi: f64,
}

/// Known value of a prediction support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportValue {
    pub support_name: String,
    pub value: f64,
}

pub fn geometry_rows(units: &[ArealUnit]) -> Vec<GeometryRow> {
    units
        .iter()
        .flat_map(|u| {
            u.rings.iter().enumerate().flat_map(move |(k, ring)| {
                ring.iter().map(move |p| GeometryRow {
                    area_id: u.area_id.clone(),
                    level: u.level,
                    ring: k,
                    x: p[0],
                    y: p[1],
                })
            })
        })
        .collect()
}

/// Polygons from vertex rows, in order of first appearance. Centroids are
/// area-weighted over the outer ring.
pub fn units_from_rows(rows: &[GeometryRow]) -> Vec<ArealUnit> {
    let mut order: Vec<String> = Vec::new();
    let mut parts: HashMap<String, (Level, BTreeMap<usize, Vec<Point>>)> = HashMap::new();
    for r in rows {
        let entry = parts.entry(r.area_id.clone()).or_insert_with(|| {
            order.push(r.area_id.clone());
            (r.level, BTreeMap::new())
        });
        entry.1.entry(r.ring).or_default().push([r.x, r.y]);
    }
    order
        .into_iter()
        .map(|id| {
            let (level, rings) = parts.remove(&id).unwrap();
            let rings: Vec<Vec<Point>> = rings.into_values().collect();
            let centroid = ring_centroid(&rings[0]);
            ArealUnit {
                area_id: id,
                level,
                rings,
                centroid,
            }
        })
        .collect()
}

fn ring_centroid(ring: &[Point]) -> Point {
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for w in ring.windows(2) {
        let cross = w[0][0] * w[1][1] - w[1][0] * w[0][1];
        a += cross;
        cx += (w[0][0] + w[1][0]) * cross;
        cy += (w[0][1] + w[1][1]) * cross;
    }
    if a.abs() < 1e-300 {
        let n = ring.len() as f64;
        return [ring.iter().map(|p| p[0]).sum::<f64>() / n, ring.iter().map(|p| p[1]).sum::<f64>() / n];
    }
    [cx / (3.0 * a), cy / (3.0 * a)]
}

/// Assemble and validate a hierarchy from its three files.
pub fn load_hierarchy(geometry: &Path, hierarchy: &Path, population: &Path) -> Result<ArealHierarchy> {
    let units = units_from_rows(&read_rows::<GeometryRow>(geometry)?);
    let links: Vec<HierarchyRow> = read_rows(hierarchy)?;
    let pops: Vec<PopulationRow> = read_rows(population)?;
    let (tracts, pumas): (Vec<_>, Vec<_>) = units.into_iter().partition(|u| u.level == Level::Tract);
    let pumas = pumas.into_iter().filter(|u| u.level == Level::Puma).collect();
    let h = ArealHierarchy::new(
        tracts,
        pumas,
        links.iter().map(|l| (l.tract_id.clone(), l.puma_id.clone())).collect(),
        links.iter().map(|l| (l.tract_id.clone(), l.county_id.clone())).collect(),
        pops.into_iter().map(|p| ((p.area_id, p.year), p.population)).collect(),
    );
    let problems = h.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidInput(problems.join("; ")));
    }
    Ok(h)
}

pub fn save_hierarchy(h: &ArealHierarchy, dir: &Path, fingerprint: &str) -> Result<()> {
    let mut units = h.tracts.clone();
    units.extend(h.pumas.iter().cloned());
    write_rows(&dir.join("geometry.csv"), fingerprint, &geometry_rows(&units))?;
    let links: Vec<HierarchyRow> = h
        .tracts
        .iter()
        .map(|t| HierarchyRow {
            tract_id: t.area_id.clone(),
            puma_id: h.tract_to_puma.get(&t.area_id).cloned().unwrap_or_default(),
            county_id: h.tract_to_county.get(&t.area_id).cloned().unwrap_or_default(),
        })
        .collect();
    write_rows(&dir.join("hierarchy.csv"), fingerprint, &links)?;
    let mut pops: Vec<PopulationRow> = h
        .populations
        .iter()
        .map(|((a, y), p)| PopulationRow {
            area_id: a.clone(),
            year: *y,
            population: *p,
        })
        .collect();
    pops.sort_by(|a, b| (&a.area_id, a.year).cmp(&(&b.area_id, b.year)));
    write_rows(&dir.join("population.csv"), fingerprint, &pops)
}

pub fn load_estimates(path: &Path) -> Result<Vec<SurveyEstimate>> {
    let est: Vec<SurveyEstimate> = read_rows(path)?;
    for e in &est {
        e.validate()?;
    }
    Ok(est)
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRow>> {
    read_rows(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    #[test]
    fn hierarchy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tracts: Vec<ArealUnit> = (0..3)
            .map(|i| ArealUnit::rectangle(format!("t{i}"), Level::Tract, Rect::new(i as f64, 0.0, i as f64 + 1.0, 2.0)))
            .collect();
        let pumas = vec![ArealUnit::rectangle("p", Level::Puma, Rect::new(0.0, 0.0, 3.0, 2.0))];
        let mut pops = HashMap::new();
        for i in 0..3 {
            pops.insert((format!("t{i}"), 2001), 10.0 + i as f64);
        }
        pops.insert(("p".to_string(), 2001), 33.0);
        let h = ArealHierarchy::new(
            tracts,
            pumas,
            (0..3).map(|i| (format!("t{i}"), "p".to_string())).collect(),
            (0..3).map(|i| (format!("t{i}"), "c".to_string())).collect(),
            pops,
        );
        save_hierarchy(&h, dir.path(), "abc").unwrap();
        assert_eq!(read_fingerprint(&dir.path().join("hierarchy.csv")).as_deref(), Some("abc"));
        let back = load_hierarchy(&dir.path().join("geometry.csv"), &dir.path().join("hierarchy.csv"), &dir.path().join("population.csv")).unwrap();
        assert_eq!(back.tracts, h.tracts);
        assert_eq!(back.pumas, h.pumas);
        assert_eq!(back.tract_to_county, h.tract_to_county);
        assert_eq!(back.populations, h.populations);
    }

    #[test]
    fn estimates_read_with_optional_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(
            &path,
            "# fingerprint=x\narea_id,period_len,end_year,estimate,std_error,raw_sample_size\na,5,2010,0.2,0.03,500\nb,1,2009,0.4,0.02,\n",
        )
        .unwrap();
        let est = load_estimates(&path).unwrap();
        assert_eq!(est[0].raw_sample_size, Some(500));
        assert_eq!(est[1].raw_sample_size, None);
        std::fs::write(&path, "area_id,period_len\na,zz\n").unwrap();
        assert!(matches!(load_estimates(&path), Err(Error::Format { .. })));
    }
}
