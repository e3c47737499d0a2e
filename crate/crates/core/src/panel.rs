//! Balanced unit-by-day panels.
//!
//! A [`Panel`] is an `N x T` grid of outcomes with optional heat and
//! population companions. Construction rejects ragged input: every unit must
//! have exactly one record per day over a contiguous day range.

use std::collections::HashMap;
use std::fmt;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque unit identifier such as a county FIPS code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UnitId(String);

impl UnitId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::InvalidPanel("empty unit id".into()));
        }
        Ok(UnitId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UnitId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        UnitId::new(s)
    }
}

impl From<UnitId> for String {
    fn from(u: UnitId) -> String {
        u.0
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Declared scale of the outcome matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    RawRate,
    LogRate,
    SimulatedLogRate,
}

impl Scale {
    pub fn is_log(self) -> bool {
        !matches!(self, Scale::RawRate)
    }
}

/// One input row: a unit, a calendar day and the observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub unit_id: String,
    pub date: NaiveDate,
    pub outcome: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    units: Vec<UnitId>,
    start: NaiveDate,
    outcome: DMatrix<f64>,
    heat: Option<DMatrix<f64>>,
    population: Option<DMatrix<f64>>,
    scale: Scale,
}

impl Panel {
    /// Assembles a panel from already-shaped matrices (`N x T`).
    pub fn from_matrices(
        units: Vec<UnitId>,
        start: NaiveDate,
        outcome: DMatrix<f64>,
        heat: Option<DMatrix<f64>>,
        population: Option<DMatrix<f64>>,
        scale: Scale,
    ) -> Result<Self> {
        let (n, t) = outcome.shape();
        if n != units.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} units but outcome has {} rows",
                units.len(),
                n
            )));
        }
        if n == 0 || t == 0 {
            return Err(Error::InvalidPanel("panel must have at least one unit and one day".into()));
        }
        let mut seen = HashMap::with_capacity(n);
        for (i, u) in units.iter().enumerate() {
            if seen.insert(u.clone(), i).is_some() {
                return Err(Error::InvalidPanel(format!("unit `{u}` appears twice")));
            }
        }
        let panel = Panel { units, start, outcome, heat, population, scale };
        panel.check_matrix("outcome", &panel.outcome)?;
        if let Some(h) = &panel.heat {
            panel.check_matrix("heat", h)?;
        }
        if let Some(p) = &panel.population {
            panel.check_matrix("population", p)?;
            if let Some(((i, j), _)) = panel.iter_cells(p).find(|(_, v)| *v <= 0.0) {
                return Err(Error::InvalidPanel(format!(
                    "population must be positive (unit `{}`, {})",
                    panel.units[i],
                    panel.date(j)
                )));
            }
        }
        Ok(panel)
    }

    fn iter_cells<'a>(&'a self, m: &'a DMatrix<f64>) -> impl Iterator<Item = ((usize, usize), f64)> + 'a {
        (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| ((i, j), m[(i, j)])))
    }

    fn check_matrix(&self, field: &'static str, m: &DMatrix<f64>) -> Result<()> {
        if m.shape() != self.outcome.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{field} is {:?}, outcome is {:?}",
                m.shape(),
                self.outcome.shape()
            )));
        }
        if let Some(((i, j), _)) = self.iter_cells(m).find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                field,
                unit: self.units[i].to_string(),
                time: self.date(j).to_string(),
            });
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_times(&self) -> usize {
        self.outcome.ncols()
    }

    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start
    }

    /// Calendar date of day index `t`.
    pub fn date(&self, t: usize) -> NaiveDate {
        self.start + chrono::Days::new(t as u64)
    }

    /// Day index of `date`, if it falls inside the panel.
    pub fn time_index(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start).num_days();
        (d >= 0 && (d as usize) < self.n_times()).then_some(d as usize)
    }

    pub fn unit_index(&self, unit: &UnitId) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u == unit)
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))
    }

    pub fn outcome(&self) -> &DMatrix<f64> {
        &self.outcome
    }

    pub fn heat(&self) -> Option<&DMatrix<f64>> {
        self.heat.as_ref()
    }

    pub fn population(&self) -> Option<&DMatrix<f64>> {
        self.population.as_ref()
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    /// Exports the panel back to records in unit-major, day-minor order.
    pub fn records(&self) -> Vec<PanelRecord> {
        let mut out = Vec::with_capacity(self.n_units() * self.n_times());
        for (i, u) in self.units.iter().enumerate() {
            for t in 0..self.n_times() {
                out.push(PanelRecord {
                    unit_id: u.to_string(),
                    date: self.date(t),
                    outcome: self.outcome[(i, t)],
                    heat: self.heat.as_ref().map(|h| h[(i, t)]),
                    population: self.population.as_ref().map(|p| p[(i, t)]),
                });
            }
        }
        out
    }

    /// Same panel with a replaced outcome matrix and scale tag.
    pub fn with_outcome(&self, outcome: DMatrix<f64>, scale: Scale) -> Result<Panel> {
        Panel::from_matrices(
            self.units.clone(),
            self.start,
            outcome,
            self.heat.clone(),
            self.population.clone(),
            scale,
        )
    }
}

/// Builds a validated panel from long-format records.
///
/// Units keep their order of first appearance. The day range runs from the
/// earliest to the latest date present; every unit must cover every day in
/// it exactly once. Heat and population columns must be either present on
/// every record or absent on every record.
pub fn build_panel(records: &[PanelRecord], scale: Scale) -> Result<Panel> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidPanel("no records".into()))?;
    let start = records.iter().map(|r| r.date).min().unwrap_or(first.date);
    let end = records.iter().map(|r| r.date).max().unwrap_or(first.date);
    let n_times = (end - start).num_days() as usize + 1;

    let mut units: Vec<UnitId> = Vec::new();
    let mut unit_pos: HashMap<&str, usize> = HashMap::new();
    for r in records {
        if !unit_pos.contains_key(r.unit_id.as_str()) {
            unit_pos.insert(r.unit_id.as_str(), units.len());
            units.push(UnitId::new(r.unit_id.clone())?);
        }
    }
    let n = units.len();
    let has_heat = first.heat.is_some();
    let has_pop = first.population.is_some();

    let mut outcome = DMatrix::from_element(n, n_times, f64::NAN);
    let mut heat = has_heat.then(|| DMatrix::from_element(n, n_times, f64::NAN));
    let mut population = has_pop.then(|| DMatrix::from_element(n, n_times, f64::NAN));
    let mut filled = vec![false; n * n_times];

    for r in records {
        let i = unit_pos[r.unit_id.as_str()];
        let t = (r.date - start).num_days() as usize;
        let cell = i * n_times + t;
        if filled[cell] {
            return Err(Error::DuplicateCell { unit: r.unit_id.clone(), time: r.date.to_string() });
        }
        filled[cell] = true;
        let check = |field: &'static str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteValue { field, unit: r.unit_id.clone(), time: r.date.to_string() })
            }
        };
        outcome[(i, t)] = check("outcome", r.outcome)?;
        match (&mut heat, r.heat) {
            (Some(h), Some(v)) => h[(i, t)] = check("heat", v)?,
            (None, None) => {}
            _ => {
                return Err(Error::InvalidPanel(format!(
                    "heat column is present on some records but not on unit `{}` at {}",
                    r.unit_id, r.date
                )))
            }
        }
        match (&mut population, r.population) {
            (Some(p), Some(v)) => p[(i, t)] = check("population", v)?,
            (None, None) => {}
            _ => {
                return Err(Error::InvalidPanel(format!(
                    "population column is present on some records but not on unit `{}` at {}",
                    r.unit_id, r.date
                )))
            }
        }
    }
    if let Some(cell) = filled.iter().position(|f| !f) {
        let (i, t) = (cell / n_times, cell % n_times);
        return Err(Error::MissingCell {
            unit: units[i].to_string(),
            time: (start + chrono::Days::new(t as u64)).to_string(),
        });
    }
    Panel::from_matrices(units, start, outcome, heat, population, scale)
}

/// How zero rates are handled before taking logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    /// Only zero cells are replaced by their centered rolling mean.
    ZerosOnly,
    /// Every cell is replaced by its centered rolling mean.
    All,
}

/// Centered rolling mean of width `window`; edge windows are truncated to the
/// days available.
pub fn centered_rolling_mean(series: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = series.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Imputes zero rates and converts a raw-rate panel to log rates.
pub fn log_transform_rates(panel: &Panel, window: usize, smoothing: Smoothing) -> Result<Panel> {
    if panel.scale() != Scale::RawRate {
        return Err(Error::InvalidPanel(format!(
            "log transform expects raw rates, panel is {:?}",
            panel.scale()
        )));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("rolling window must be odd and positive, got {window}")));
    }
    let (n, t_len) = panel.outcome().shape();
    let mut out = DMatrix::zeros(n, t_len);
    for i in 0..n {
        let row: Vec<f64> = panel.outcome().row(i).iter().copied().collect();
        if let Some(t) = row.iter().position(|v| *v < 0.0) {
            return Err(Error::InvalidPanel(format!(
                "negative rate for unit `{}` at {}",
                panel.units()[i],
                panel.date(t)
            )));
        }
        let smooth = centered_rolling_mean(&row, window);
        for t in 0..t_len {
            let v = match smoothing {
                Smoothing::All => smooth[t],
                Smoothing::ZerosOnly if row[t] == 0.0 => smooth[t],
                Smoothing::ZerosOnly => row[t],
            };
            if v <= 0.0 {
                return Err(Error::AllZeroWindow { unit: panel.units()[i].to_string(), day: t });
            }
            out[(i, t)] = v.ln();
        }
    }
    panel.with_outcome(out, Scale::LogRate)
}

/// Treated unit, onset and pre/post lengths of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeWindow {
    pub treated_unit: UnitId,
    /// Onset day index `T0` (first post day).
    pub t0: usize,
    pub pre_len: usize,
    pub post_len: usize,
}

impl EpisodeWindow {
    pub fn new(treated_unit: UnitId, t0: usize, pre_len: usize, post_len: usize) -> Result<Self> {
        if pre_len == 0 || post_len == 0 {
            return Err(Error::InvalidConfig("pre and post windows need at least one day".into()));
        }
        Ok(EpisodeWindow { treated_unit, t0, pre_len, post_len })
    }

    /// Day range `[t0 - pre_len, t0 + post_len)` covered by the window.
    pub fn span(&self) -> std::ops::Range<i64> {
        (self.t0 as i64 - self.pre_len as i64)..(self.t0 + self.post_len) as i64
    }

    pub fn check_fits(&self, n_times: usize) -> Result<()> {
        let span = self.span();
        if span.start < 0 || span.end > n_times as i64 {
            return Err(Error::WindowOutOfRange { start: span.start, end: span.end, len: n_times });
        }
        Ok(())
    }

    pub fn pre_range(&self) -> std::ops::Range<usize> {
        (self.t0 - self.pre_len)..self.t0
    }

    pub fn post_range(&self) -> std::ops::Range<usize> {
        self.t0..self.t0 + self.post_len
    }
}

/// Pre/post blocks for one treated unit and its donors.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSlice {
    pub treated_pre: DVector<f64>,
    pub treated_post: DVector<f64>,
    /// `pre_len x J`, one column per donor.
    pub donors_pre: DMatrix<f64>,
    /// `post_len x J`, one column per donor.
    pub donors_post: DMatrix<f64>,
}

pub fn slice_window(panel: &Panel, window: &EpisodeWindow, donors: &[UnitId]) -> Result<WindowSlice> {
    window.check_fits(panel.n_times())?;
    if donors.is_empty() {
        return Err(Error::EmptyPool(window.treated_unit.to_string()));
    }
    let y = panel.outcome();
    let ti = panel.unit_index(&window.treated_unit)?;
    let idx = donors.iter().map(|d| panel.unit_index(d)).collect::<Result<Vec<_>>>()?;
    let pre = window.pre_range();
    let post = window.post_range();
    let block = |range: std::ops::Range<usize>| {
        DMatrix::from_fn(range.len(), idx.len(), |r, c| y[(idx[c], range.start + r)])
    };
    Ok(WindowSlice {
        treated_pre: DVector::from_iterator(pre.len(), pre.clone().map(|t| y[(ti, t)])),
        treated_post: DVector::from_iterator(post.len(), post.clone().map(|t| y[(ti, t)])),
        donors_pre: block(pre),
        donors_post: block(post),
    })
}
