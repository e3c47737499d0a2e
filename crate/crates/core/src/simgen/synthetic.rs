//! Self-contained stand-ins for the real inputs of the simulation study:
//! a county-like geography, daily heat index series and calibration targets.

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{AdjacencyGraph, Centroid, GeoWeightMatrix, SpatialIndex};
use crate::panel::UnitId;

/// Bounding box of the study region in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for BoundingBox {
    /// Roughly the Northeastern United States.
    fn default() -> Self {
        BoundingBox { lat_min: 39.8, lat_max: 47.3, lon_min: -80.4, lon_max: -67.2 }
    }
}

/// A `rows x cols` grid of cells with jittered centroids and queen
/// contiguity (cells sharing an edge or a corner are neighbours).
pub fn synthetic_geography(rows: usize, cols: usize, bbox: BoundingBox, seed: u64) -> Result<(SpatialIndex, AdjacencyGraph)> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidConfig("grid needs at least one row and column".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dlat = (bbox.lat_max - bbox.lat_min) / rows as f64;
    let dlon = (bbox.lon_max - bbox.lon_min) / cols as f64;
    let mut units = Vec::with_capacity(rows * cols);
    let mut centroids = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            units.push(UnitId::new(format!("G{r:02}{c:02}"))?);
            let lat = bbox.lat_min + (r as f64 + 0.5 + rng.random_range(-0.3..0.3)) * dlat;
            let lon = bbox.lon_min + (c as f64 + 0.5 + rng.random_range(-0.3..0.3)) * dlon;
            centroids.push(Centroid::new(lat, lon)?);
        }
    }
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && rr < rows as i64 && cc >= 0 && cc < cols as i64 {
                    edges.push((i, rr as usize * cols + cc as usize));
                }
            }
        }
    }
    Ok((SpatialIndex::new(units, centroids)?, AdjacencyGraph::from_edges(rows * cols, &edges)?))
}

/// Parameters of the synthetic daily heat index generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatConfig {
    /// Annual mean at the southern edge of the region.
    pub base: f64,
    /// Change per degree of latitude north of the southern edge.
    pub lat_gradient: f64,
    pub seasonal_amplitude: f64,
    /// Day of year of the seasonal peak.
    pub peak_day: f64,
    pub anomaly_sd: f64,
    pub anomaly_phi: f64,
    /// SAR smoothing of the daily anomaly field.
    pub anomaly_varpi: f64,
    /// Peak anomaly of the heat event planted at the onset day.
    pub event_amplitude: f64,
    pub event_radius_km: f64,
    pub event_days: (usize, usize),
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig {
            base: 68.0,
            lat_gradient: -1.2,
            seasonal_amplitude: 16.0,
            peak_day: 198.0,
            anomaly_sd: 4.0,
            anomaly_phi: 0.7,
            anomaly_varpi: 0.8,
            event_amplitude: 14.0,
            event_radius_km: 120.0,
            event_days: (3, 5),
        }
    }
}

/// Daily heat index for every unit over calendar year `year`, with a heat
/// event centred on unit `focal` starting on day index `onset`.
pub fn synthetic_heat_year(
    index: &SpatialIndex,
    w: &GeoWeightMatrix,
    year: i32,
    focal: usize,
    onset: usize,
    cfg: &HeatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let start = NaiveDate::from_ymd_opt(year, 1, 1).ok_or_else(|| Error::InvalidConfig(format!("bad year {year}")))?;
    let days = if NaiveDate::from_ymd_opt(year, 12, 31).map(|d| d.ordinal()) == Some(366) { 366 } else { 365 };
    let n = index.len();
    let smoother = (DMatrix::identity(n, n) - w.matrix() * cfg.anomaly_varpi)
        .try_inverse()
        .ok_or(Error::SingularSystem)?;
    let innov_sd = cfg.anomaly_sd * (1.0 - cfg.anomaly_phi * cfg.anomaly_phi).sqrt();
    let raw = DMatrix::from_fn(n, days, |_, _| rng.sample::<f64, _>(StandardNormal));
    let spatial = &smoother * raw;
    // Rescale so each unit's smoothed innovation has unit variance.
    let row_sd: Vec<f64> = (0..n).map(|i| smoother.row(i).norm()).collect();
    let lat0 = index.centroids().iter().map(|c| c.lat).fold(f64::INFINITY, f64::min);
    let event_len = rng.random_range(cfg.event_days.0..=cfg.event_days.1);
    let mut heat = DMatrix::zeros(n, days);
    for i in 0..n {
        let mean = cfg.base + cfg.lat_gradient * (index.centroids()[i].lat - lat0);
        let d = index.distances()[(focal, i)];
        let bump = cfg.event_amplitude * (-0.5 * (d / cfg.event_radius_km).powi(2)).exp();
        let mut a = innov_sd / (1.0 - cfg.anomaly_phi * cfg.anomaly_phi).sqrt() * spatial[(i, 0)] / row_sd[i];
        for t in 0..days {
            if t > 0 {
                a = cfg.anomaly_phi * a + innov_sd * spatial[(i, t)] / row_sd[i];
            }
            let doy = (start + chrono::Days::new(t as u64)).ordinal() as f64;
            let season = cfg.seasonal_amplitude * (2.0 * std::f64::consts::PI * (doy - cfg.peak_day) / 365.25).cos();
            let event = if t >= onset && t < onset + event_len { bump } else { 0.0 };
            heat[(i, t)] = mean + season + a + event;
        }
    }
    Ok(heat)
}

/// Parameters of the synthetic calibration targets: per-unit daily rates
/// whose log levels form a smooth spatial field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub mean_log_rate: f64,
    /// Cross-unit standard deviation of the log level.
    pub sd_log_rate: f64,
    /// Length scale of the Gaussian kernel that smooths the level field.
    pub range_km: f64,
    /// Day-to-day standard deviation of the log rate around its level.
    pub daily_sd: f64,
    pub seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig { mean_log_rate: 0.8, sd_log_rate: 1.0, range_km: 150.0, daily_sd: 0.1, seed: 2000 }
    }
}

/// `N x days` matrix of positive daily target rates.
pub fn synthetic_targets(index: &SpatialIndex, cfg: &TargetConfig, days: usize) -> DMatrix<f64> {
    let n = index.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let field: Vec<f64> = (0..n)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (j, zj) in z.iter().enumerate() {
                let k = (-0.5 * (index.distances()[(i, j)] / cfg.range_km).powi(2)).exp();
                num += k * zj;
                den += k;
            }
            num / den
        })
        .collect();
    let mean = crate::stats::mean(&field);
    let sd = crate::stats::variance(&field).sqrt().max(1e-12);
    DMatrix::from_fn(n, days, |i, _| {
        let level = cfg.mean_log_rate + cfg.sd_log_rate * (field[i] - mean) / sd;
        (level + cfg.daily_sd * rng.sample::<f64, _>(StandardNormal)).exp()
    })
}
