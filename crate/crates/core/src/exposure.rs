//! Heatwave detection and treatment masks.
//!
//! A heatwave is a maximal run of at least `min_duration` consecutive days
//! on which a unit's heat index is at or above its `r`-th percentile
//! threshold. Thresholds are nearest-rank order statistics computed per unit
//! over the chosen reference period.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Panel, UnitId};

/// Reference distribution for the percentile threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// One threshold per unit and calendar year.
    PerYear,
    /// One threshold per unit over the whole panel.
    WholePeriod,
    /// One threshold per unit over in-season days only.
    WarmSeason,
}

/// Calendar bounds of the warm season, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Season {
    pub start: (u32, u32),
    pub end: (u32, u32),
}

impl Default for Season {
    /// May 1 through September 30.
    fn default() -> Self {
        Season { start: (5, 1), end: (9, 30) }
    }
}

impl Season {
    pub fn contains(&self, d: NaiveDate) -> bool {
        let md = (d.month(), d.day());
        md >= self.start && md <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatwaveDefinition {
    pub percentile: f64,
    pub min_duration: usize,
    pub reference: Reference,
    #[serde(default)]
    pub season: Season,
}

impl HeatwaveDefinition {
    pub fn new(percentile: f64, min_duration: usize, reference: Reference) -> Result<Self> {
        if !(percentile > 0.0 && percentile < 100.0) {
            return Err(Error::InvalidConfig(format!("percentile must be in (0, 100), got {percentile}")));
        }
        if min_duration == 0 {
            return Err(Error::InvalidConfig("minimum duration must be at least one day".into()));
        }
        Ok(HeatwaveDefinition { percentile, min_duration, reference, season: Season::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatwaveEpisode {
    pub unit: UnitId,
    /// Onset day index.
    pub start: usize,
    pub length: usize,
}

impl HeatwaveEpisode {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Binary treatment indicator over the panel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentMask {
    n: usize,
    t: usize,
    z: Vec<bool>,
}

impl TreatmentMask {
    pub fn empty(n: usize, t: usize) -> Self {
        TreatmentMask { n, t, z: vec![false; n * t] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.t)
    }

    pub fn get(&self, i: usize, t: usize) -> bool {
        self.z[i * self.t + t]
    }

    pub fn set(&mut self, i: usize, t: usize, value: bool) {
        self.z[i * self.t + t] = value;
    }

    /// Marks `[start, start + len)` for unit `i`, clipped to the grid.
    pub fn mark(&mut self, i: usize, start: usize, len: usize) {
        for t in start..(start + len).min(self.t) {
            self.set(i, t, true);
        }
    }

    pub fn count(&self) -> usize {
        self.z.iter().filter(|z| **z).count()
    }

    /// True if unit `i` is treated on any day of `range`.
    pub fn any_in(&self, i: usize, range: std::ops::Range<usize>) -> bool {
        range.into_iter().any(|t| t < self.t && self.get(i, t))
    }

    /// Units treated on at least one day of `range`.
    pub fn treated_units(&self, range: std::ops::Range<usize>) -> Vec<usize> {
        (0..self.n).filter(|&i| self.any_in(i, range.clone())).collect()
    }
}

/// Nearest-rank percentile: the `ceil(r/100 * n)`-th smallest value.
pub fn percentile_threshold(series: &[f64], r: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("series contains non-finite values".into()));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((r / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Per-day thresholds for one unit's series under `reference`.
///
/// `dates[t]` is the calendar date of day `t`. Days outside the warm season
/// get a threshold of `+inf` under [`Reference::WarmSeason`].
pub fn daily_thresholds(series: &[f64], dates: &[NaiveDate], def: &HeatwaveDefinition) -> Result<Vec<f64>> {
    match def.reference {
        Reference::WholePeriod => Ok(vec![percentile_threshold(series, def.percentile)?; series.len()]),
        Reference::WarmSeason => {
            let in_season: Vec<f64> = series
                .iter()
                .zip(dates)
                .filter(|(_, d)| def.season.contains(**d))
                .map(|(v, _)| *v)
                .collect();
            if in_season.is_empty() {
                return Ok(vec![f64::INFINITY; series.len()]);
            }
            let q = percentile_threshold(&in_season, def.percentile)?;
            Ok(dates.iter().map(|d| if def.season.contains(*d) { q } else { f64::INFINITY }).collect())
        }
        Reference::PerYear => {
            let mut out = vec![0.0; series.len()];
            let mut start = 0;
            while start < series.len() {
                let year = dates[start].year();
                let end = (start..series.len()).find(|&t| dates[t].year() != year).unwrap_or(series.len());
                let q = percentile_threshold(&series[start..end], def.percentile)?;
                out[start..end].fill(q);
                start = end;
            }
            Ok(out)
        }
    }
}

/// Maximal runs with `series[t] >= thresholds[t]` lasting at least
/// `min_duration` days, as `(start, length)` pairs.
pub fn exceedance_runs(series: &[f64], thresholds: &[f64], min_duration: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut t = 0;
    while t < series.len() {
        if series[t] >= thresholds[t] {
            let start = t;
            while t < series.len() && series[t] >= thresholds[t] {
                t += 1;
            }
            if t - start >= min_duration {
                runs.push((start, t - start));
            }
        } else {
            t += 1;
        }
    }
    runs
}

/// Detects heatwave episodes on every unit and builds the treatment mask.
pub fn detect_heatwaves(panel: &Panel, def: &HeatwaveDefinition) -> Result<(Vec<HeatwaveEpisode>, TreatmentMask)> {
    let heat = panel
        .heat()
        .ok_or_else(|| Error::InvalidPanel("heatwave detection needs a heat series".into()))?;
    let dates: Vec<NaiveDate> = (0..panel.n_times()).map(|t| panel.date(t)).collect();
    let mut episodes = Vec::new();
    let mut mask = TreatmentMask::empty(panel.n_units(), panel.n_times());
    for (i, unit) in panel.units().iter().enumerate() {
        let series: Vec<f64> = heat.row(i).iter().copied().collect();
        let q = daily_thresholds(&series, &dates, def)?;
        for (start, length) in exceedance_runs(&series, &q, def.min_duration) {
            mask.mark(i, start, length);
            episodes.push(HeatwaveEpisode { unit: unit.clone(), start, length });
        }
    }
    Ok((episodes, mask))
}

/// Keeps, for every unit and season, only the earliest episode starting
/// inside that season. Episodes starting outside the season are dropped.
pub fn first_of_season(episodes: &[HeatwaveEpisode], dates: &[NaiveDate], season: &Season) -> Vec<HeatwaveEpisode> {
    let mut seen: Vec<(UnitId, i32)> = Vec::new();
    let mut sorted: Vec<&HeatwaveEpisode> = episodes.iter().collect();
    sorted.sort_by(|a, b| a.start.cmp(&b.start).then(a.unit.cmp(&b.unit)));
    let mut out = Vec::new();
    for ep in sorted {
        let d = dates[ep.start];
        if !season.contains(d) {
            continue;
        }
        let key = (ep.unit.clone(), d.year());
        if !seen.contains(&key) {
            seen.push(key);
            out.push(ep.clone());
        }
    }
    out
}

/// Mask containing exactly the listed episodes.
pub fn mask_from_episodes(panel: &Panel, episodes: &[HeatwaveEpisode]) -> Result<TreatmentMask> {
    let mut mask = TreatmentMask::empty(panel.n_units(), panel.n_times());
    for ep in episodes {
        mask.mark(panel.unit_index(&ep.unit)?, ep.start, ep.length);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{build_panel, PanelRecord, Scale};
    use proptest::prelude::*;

    fn heat_panel(series: &[Vec<f64>], start: NaiveDate) -> Panel {
        let mut recs = Vec::new();
        for (i, s) in series.iter().enumerate() {
            for (t, h) in s.iter().enumerate() {
                recs.push(PanelRecord {
                    unit_id: format!("u{i}"),
                    date: start + chrono::Days::new(t as u64),
                    outcome: 1.0,
                    heat: Some(*h),
                    population: None,
                });
            }
        }
        build_panel(&recs, Scale::RawRate).unwrap()
    }

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn nearest_rank() {
        let s: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(percentile_threshold(&s, 95.0).unwrap(), 95.0);
        assert_eq!(percentile_threshold(&[3.5; 7], 99.0).unwrap(), 3.5);
        assert!(matches!(percentile_threshold(&[], 95.0), Err(Error::EmptySeries)));
    }

    #[test]
    fn per_year_thresholds() {
        let dates: Vec<NaiveDate> = (0..730).map(|t| ymd(2001, 1, 1) + chrono::Days::new(t)).collect();
        let series: Vec<f64> = dates.iter().map(|d| if d.year() == 2001 { 1.0 } else { 2.0 } * d.ordinal() as f64).collect();
        let def = HeatwaveDefinition::new(95.0, 2, Reference::PerYear).unwrap();
        let q = daily_thresholds(&series, &dates, &def).unwrap();
        assert_eq!(q[0], 347.0);
        assert_eq!(q[400], 694.0);
        let distinct: std::collections::BTreeSet<u64> = q.iter().map(|v| v.to_bits()).collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn spike_is_not_a_heatwave() {
        let mut s: Vec<f64> = (0..40).map(|t| 70.0 + (t % 7) as f64).collect();
        s[10] = 100.0;
        let p = heat_panel(&[s], ymd(2005, 6, 1));
        let def = HeatwaveDefinition::new(95.0, 2, Reference::WholePeriod).unwrap();
        let (eps, mask) = detect_heatwaves(&p, &def).unwrap();
        assert!(eps.is_empty());
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn three_hot_days_form_one_episode() {
        let mut s: Vec<f64> = (0..60).map(|t| 70.0 + (t % 7) as f64).collect();
        for v in &mut s[30..33] {
            *v = 95.0;
        }
        let p = heat_panel(&[s], ymd(2005, 6, 1));
        let def = HeatwaveDefinition::new(95.0, 2, Reference::WholePeriod).unwrap();
        let (eps, mask) = detect_heatwaves(&p, &def).unwrap();
        assert_eq!(eps, vec![HeatwaveEpisode { unit: UnitId::new("u0").unwrap(), start: 30, length: 3 }]);
        assert!(mask.get(0, 30) && mask.get(0, 32) && !mask.get(0, 33));
    }

    /// Tests every interval for the heatwave predicate and keeps the maximal ones.
    fn brute_force(series: &[f64], q: f64, d: usize) -> Vec<(usize, usize)> {
        let n = series.len();
        let hot = |a: usize, b: usize| (a..b).all(|t| series[t] >= q);
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + d..=n {
                let maximal = (a == 0 || series[a - 1] < q) && (b == n || series[b] < q);
                if hot(a, b) && maximal {
                    out.push((a, b - a));
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn detector_matches_interval_scan(series in prop::collection::vec(60.0f64..100.0, 1..120), r in 80.0f64..99.0, d in 1usize..4) {
            let q = percentile_threshold(&series, r).unwrap();
            let got = exceedance_runs(&series, &vec![q; series.len()], d);
            prop_assert_eq!(got, brute_force(&series, q, d));
        }

        #[test]
        fn higher_percentile_marks_fewer_days(series in prop::collection::vec(60.0f64..100.0, 10..150), r in 50.0f64..98.0, dr in 0.0f64..1.9) {
            let p = heat_panel(&[series], ymd(2003, 5, 1));
            let lo = detect_heatwaves(&p, &HeatwaveDefinition::new(r, 2, Reference::WholePeriod).unwrap()).unwrap().1;
            let hi = detect_heatwaves(&p, &HeatwaveDefinition::new(r + dr, 2, Reference::WholePeriod).unwrap()).unwrap().1;
            for t in 0..p.n_times() {
                prop_assert!(!hi.get(0, t) || lo.get(0, t));
            }
        }

        #[test]
        fn longer_duration_never_adds_episodes(series in prop::collection::vec(60.0f64..100.0, 10..150), d in 1usize..5) {
            let q = percentile_threshold(&series, 80.0).unwrap();
            let th = vec![q; series.len()];
            let short = exceedance_runs(&series, &th, d);
            let long = exceedance_runs(&series, &th, d + 1);
            prop_assert!(long.iter().all(|e| short.contains(e)));
        }
    }

    #[test]
    fn first_of_season_restriction() {
        let dates: Vec<NaiveDate> = (0..800).map(|t| ymd(2001, 1, 1) + chrono::Days::new(t)).collect();
        let u = UnitId::new("a").unwrap();
        let ep = |start| HeatwaveEpisode { unit: u.clone(), start, length: 2 };
        let june = (ymd(2001, 6, 10) - dates[0]).num_days() as usize;
        let july = (ymd(2001, 7, 10) - dates[0]).num_days() as usize;
        let next_june = (ymd(2002, 6, 10) - dates[0]).num_days() as usize;
        let season = Season::default();
        let kept = first_of_season(&[ep(july), ep(june)], &dates, &season);
        assert_eq!(kept, vec![ep(june)]);
        let kept = first_of_season(&[ep(june), ep(next_june)], &dates, &season);
        assert_eq!(kept.len(), 2);
        assert!(first_of_season(&[], &dates, &season).is_empty());
    }
}
