//! CSV and JSON readers and writers for the file formats the tools exchange.
//!
//! Parse errors name the file and the 1-based line of the offending record.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::donor::CovariateTable;
use crate::error::{Error, Result};
use crate::exposure::HeatwaveEpisode;
use crate::geo::{AdjacencyGraph, Centroid, SpatialIndex};
use crate::panel::{Panel, PanelRecord, UnitId};

fn parse_error(source: &str, line: Option<u64>, message: impl std::fmt::Display) -> Error {
    let path = source.to_string();
    match line {
        Some(l) => Error::Parse { path, message: format!("line {l}: {message}") },
        None => Error::Parse { path, message: message.to_string() },
    }
}

fn csv_error(source: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Csv(e),
        csv::ErrorKind::Deserialize { err, .. } => parse_error(source, line, err),
        _ => parse_error(source, line, &e),
    }
}

/// Deserialises every record of a headed CSV stream.
pub fn read_records<T: DeserializeOwned, R: Read>(reader: R, source: &str, required: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    for col in required {
        if !headers.iter().any(|h| h == *col) {
            return Err(parse_error(source, Some(1), format!("missing column `{col}`")));
        }
    }
    rdr.deserialize().map(|r| r.map_err(|e| csv_error(source, e))).collect()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| parse_error(&path.display().to_string(), None, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, required: &[&str]) -> Result<Vec<T>> {
    read_records(open(path)?, &path.display().to_string(), required)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(std::io::BufReader::new(open(path)?))
        .map_err(|e| parse_error(&path.display().to_string(), Some(e.line() as u64), e))
}

/// `unit_id,date,outcome[,heat,population]`.
pub fn read_panel_records(path: &Path) -> Result<Vec<PanelRecord>> {
    read_csv(path, &["unit_id", "date", "outcome"])
}

pub fn write_panel(path: &Path, panel: &Panel) -> Result<()> {
    write_csv(path, &panel.records())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CentroidRow {
    unit_id: String,
    lat: f64,
    lon: f64,
}

/// `unit_id,lat,lon`.
pub fn read_centroids(path: &Path) -> Result<SpatialIndex> {
    let rows: Vec<CentroidRow> = read_csv(path, &["unit_id", "lat", "lon"])?;
    let mut units = Vec::with_capacity(rows.len());
    let mut centroids = Vec::with_capacity(rows.len());
    for r in rows {
        units.push(UnitId::new(r.unit_id)?);
        centroids.push(Centroid::new(r.lat, r.lon)?);
    }
    SpatialIndex::new(units, centroids)
}

pub fn write_centroids(path: &Path, index: &SpatialIndex) -> Result<()> {
    let rows: Vec<CentroidRow> = index
        .units()
        .iter()
        .zip(index.centroids())
        .map(|(u, c)| CentroidRow { unit_id: u.to_string(), lat: c.lat, lon: c.lon })
        .collect();
    write_csv(path, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EdgeRow {
    unit_a: String,
    unit_b: String,
}

/// Undirected edge list `unit_a,unit_b` over the given unit order.
pub fn read_adjacency(path: &Path, units: &[UnitId]) -> Result<AdjacencyGraph> {
    let rows: Vec<EdgeRow> = read_csv(path, &["unit_a", "unit_b"])?;
    let edges = rows
        .into_iter()
        .map(|r| Ok((UnitId::new(r.unit_a)?, UnitId::new(r.unit_b)?)))
        .collect::<Result<Vec<_>>>()?;
    AdjacencyGraph::from_unit_edges(units, &edges)
}

pub fn write_adjacency(path: &Path, graph: &AdjacencyGraph, units: &[UnitId]) -> Result<()> {
    let rows: Vec<EdgeRow> = graph
        .edges()
        .into_iter()
        .map(|(a, b)| EdgeRow { unit_a: units[a].to_string(), unit_b: units[b].to_string() })
        .collect();
    write_csv(path, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub unit_id: String,
    pub start_date: NaiveDate,
    pub length_days: usize,
}

pub fn write_episodes(path: &Path, panel: &Panel, episodes: &[HeatwaveEpisode]) -> Result<()> {
    let rows: Vec<EpisodeRow> = episodes
        .iter()
        .map(|e| EpisodeRow { unit_id: e.unit.to_string(), start_date: panel.date(e.start), length_days: e.length })
        .collect();
    write_csv(path, &rows)
}

/// `unit_id,start_date,length_days`, resolved against the panel calendar.
pub fn read_episodes(path: &Path, panel: &Panel) -> Result<Vec<HeatwaveEpisode>> {
    let source = path.display().to_string();
    let rows: Vec<EpisodeRow> = read_csv(path, &["unit_id", "start_date", "length_days"])?;
    rows.into_iter()
        .enumerate()
        .map(|(k, r)| {
            let unit = UnitId::new(r.unit_id)?;
            panel.unit_index(&unit)?;
            let start = panel
                .time_index(r.start_date)
                .ok_or_else(|| parse_error(&source, Some(k as u64 + 2), format!("date {} is outside the panel", r.start_date)))?;
            if r.length_days == 0 {
                return Err(parse_error(&source, Some(k as u64 + 2), "episode length must be positive"));
            }
            Ok(HeatwaveEpisode { unit, start, length: r.length_days })
        })
        .collect()
}

/// `unit_id` followed by one numeric column per covariate.
pub fn read_covariates(path: &Path) -> Result<CovariateTable> {
    let source = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let headers = rdr.headers().map_err(|e| csv_error(&source, e))?.clone();
    if headers.get(0) != Some("unit_id") || headers.len() < 2 {
        return Err(parse_error(&source, Some(1), "expected `unit_id` followed by covariate columns"));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut units = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&source, e))?;
        let line = rec.position().map(|p| p.line());
        units.push(UnitId::new(&rec[0])?);
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| parse_error(&source, line, format!("`{field}` is not a number")))?;
            values.push(v);
        }
    }
    let m = DMatrix::from_row_slice(units.len(), names.len(), &values);
    CovariateTable::new(names, units, m)
}

/// Counterfactual ground truth of a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub unit_id: String,
    pub date: NaiveDate,
    pub y00: f64,
    pub tau: f64,
    pub psi: f64,
    pub class: String,
}

/// Truth rows keyed by unit, each a date-ordered `(date, y00)` series.
pub fn truth_by_unit(rows: &[TruthRow]) -> HashMap<String, Vec<(NaiveDate, f64)>> {
    let mut map: HashMap<String, Vec<(NaiveDate, f64)>> = HashMap::new();
    for r in rows {
        map.entry(r.unit_id.clone()).or_default().push((r.date, r.y00));
    }
    for v in map.values_mut() {
        v.sort_by_key(|(d, _)| *d);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{build_panel, Scale};

    #[test]
    fn panel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "unit_id,date,outcome,heat\nA,2010-06-01,1.5,80\nA,2010-06-02,2.0,81\nB,2010-06-01,0.5,79\nB,2010-06-02,0.25,90\n").unwrap();
        let records = read_panel_records(&path).unwrap();
        let panel = build_panel(&records, Scale::RawRate).unwrap();
        let out = dir.path().join("q.csv");
        write_panel(&out, &panel).unwrap();
        assert_eq!(read_panel_records(&out).unwrap(), records);
    }

    #[test]
    fn malformed_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "unit_id,date,outcome\nA,2010-06-01,1.5\nA,2010-06-02,abc\n").unwrap();
        let err = read_panel_records(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        std::fs::write(&path, "unit,date,outcome\nA,2010-06-01,1.5\n").unwrap();
        let err = read_panel_records(&path).unwrap_err().to_string();
        assert!(err.contains("unit_id"), "{err}");
    }

    #[test]
    fn geography_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (index, adj) = crate::simgen::synthetic_geography(3, 3, Default::default(), 1).unwrap();
        let c = dir.path().join("c.csv");
        let a = dir.path().join("a.csv");
        write_centroids(&c, &index).unwrap();
        write_adjacency(&a, &adj, index.units()).unwrap();
        let index2 = read_centroids(&c).unwrap();
        assert_eq!(index2.units(), index.units());
        assert_eq!(read_adjacency(&a, index2.units()).unwrap().edges(), adj.edges());
    }

    #[test]
    fn covariates_and_episodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "unit_id,age,income\nA,40,1.5\nB,35,2.5\n").unwrap();
        let table = read_covariates(&path).unwrap();
        assert_eq!(table.names, vec!["age", "income"]);
        assert_eq!(table.values[(1, 0)], 35.0);
        std::fs::write(&path, "unit_id,age\nA,x\n").unwrap();
        assert!(read_covariates(&path).unwrap_err().to_string().contains("line 2"));

        let records: Vec<PanelRecord> = (0..4)
            .map(|d| PanelRecord {
                unit_id: "A".into(),
                date: NaiveDate::from_ymd_opt(2010, 6, 1).unwrap() + chrono::Days::new(d),
                outcome: 1.0,
                heat: None,
                population: None,
            })
            .collect();
        let panel = build_panel(&records, Scale::RawRate).unwrap();
        let eps = vec![HeatwaveEpisode { unit: UnitId::new("A").unwrap(), start: 1, length: 2 }];
        let e = dir.path().join("e.csv");
        write_episodes(&e, &panel, &eps).unwrap();
        assert_eq!(std::fs::read_to_string(&e).unwrap(), "unit_id,start_date,length_days\nA,2010-06-02,2\n");
        assert_eq!(read_episodes(&e, &panel).unwrap(), eps);
    }
}
