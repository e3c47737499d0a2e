//! Monte Carlo generator for spatial interactive-fixed-effects panels with
//! heat-driven treatment effects and multi-degree spillovers.
//!
//! Untreated log-rates follow
//! `Y(0,0)_it = alpha_i + delta_t + f_t' B_i + u_it + eps_it`, with unit
//! effects and loadings SAR-smoothed over a k-NN kernel matrix and
//! idiosyncratic errors propagating through `u_t = rho W u_{t-1} + zeta_t`.

mod synthetic;

use std::ops::Range;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use synthetic::{synthetic_geography, synthetic_heat_year, synthetic_targets, BoundingBox, HeatConfig, TargetConfig};

use crate::error::{Error, Result};
use crate::exposure::{detect_heatwaves, HeatwaveDefinition, Reference, TreatmentMask};
use crate::geo::{degrees_of_separation, knn_kernel_weights, sar_smooth, AdjacencyGraph, GeoWeightMatrix, SeparationMatrix, SpatialIndex};
use crate::panel::{Panel, Scale, UnitId};

/// Base of the per-replication seed, `SEED_BASE + jj`.
pub const SEED_BASE: u64 = 61116;

/// Serialised as its short code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scenario {
    pub spatial_dep: bool,
    pub spillover: bool,
}

impl Scenario {
    /// The four scenarios in reporting order.
    pub fn all() -> [Scenario; 4] {
        [
            Scenario { spatial_dep: false, spillover: false },
            Scenario { spatial_dep: false, spillover: true },
            Scenario { spatial_dep: true, spillover: false },
            Scenario { spatial_dep: true, spillover: true },
        ]
    }

    pub fn label(&self) -> &'static str {
        match (self.spatial_dep, self.spillover) {
            (false, false) => "No Spatial depend. - No spillover",
            (false, true) => "No Spatial depend. - Spillover",
            (true, false) => "Spatial depend. - No Spillover",
            (true, true) => "Spatial depend. - Spillover",
        }
    }

    /// Short code: `sd+sp`, `sd`, `sp` or `none`.
    pub fn code(&self) -> &'static str {
        match (self.spatial_dep, self.spillover) {
            (false, false) => "none",
            (false, true) => "sp",
            (true, false) => "sd",
            (true, true) => "sd+sp",
        }
    }

    pub fn parse(code: &str) -> Result<Scenario> {
        Scenario::all()
            .into_iter()
            .find(|s| s.code() == code)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{code}` (expected sd+sp, sd, sp or none)")))
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;

    fn try_from(code: String) -> Result<Scenario> {
        Scenario::parse(&code)
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.code().to_string()
    }
}

/// How effects enter the observed log-rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectMode {
    /// `Y = Y(0,0) * tau` and `Y = Y(0,0) * psi`, exactly as the case system reads.
    Multiplicative,
    /// Not part of the reference design: `Y = Y(0,0) + ln(tau)` where `tau > 0`,
    /// unchanged otherwise; spillovers likewise with `psi`.
    AdditiveLog,
    /// Not part of the reference design: a constant rate ratio on treated
    /// cells, `Y = Y(0,0) + ln(rr)`, and `chi_s * ln(rr)` on spillover cells.
    RateRatio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub factors: usize,
    pub varpi_alpha: f64,
    pub varpi_b: f64,
    pub sigma_alpha: f64,
    pub sigma_b: f64,
    pub phi_f: Vec<f64>,
    pub sigma_f: Vec<f64>,
    pub phi_gamma: f64,
    pub sigma_gamma: f64,
    pub rho_u: f64,
    pub sigma_u: f64,
    pub sigma_eps: f64,
    pub tau0: f64,
    pub kappa: f64,
    pub chi: Vec<f64>,
    pub scenario: Scenario,
    pub effect_mode: EffectMode,
    pub knn_k: usize,
    pub bandwidth_factor: f64,
    pub pre_len: usize,
    pub post_len: usize,
    /// Month and day of the onset `T0`.
    pub onset: (u32, u32),
    pub years: (i32, i32),
    pub seed_base: u64,
    pub calibrate: bool,
    pub heatwave: HeatwaveDefinition,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            factors: 2,
            varpi_alpha: 0.5,
            varpi_b: 0.5,
            sigma_alpha: 0.5,
            sigma_b: 1.0,
            phi_f: vec![0.85, 0.85],
            sigma_f: vec![0.08, 0.08],
            phi_gamma: 0.68,
            sigma_gamma: 0.11,
            rho_u: 0.2,
            sigma_u: 0.15,
            sigma_eps: 0.05,
            tau0: 5.7,
            kappa: 0.65,
            chi: vec![0.7, 0.4],
            scenario: Scenario { spatial_dep: true, spillover: true },
            effect_mode: EffectMode::Multiplicative,
            knn_k: 4,
            bandwidth_factor: 0.5,
            pre_len: 20,
            post_len: 10,
            onset: (6, 1),
            years: (2000, 2016),
            seed_base: SEED_BASE,
            calibrate: true,
            heatwave: HeatwaveDefinition {
                percentile: 95.0,
                min_duration: 2,
                reference: Reference::PerYear,
                season: Default::default(),
            },
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.phi_f.len() != self.factors || self.sigma_f.len() != self.factors {
            return bad(format!("factor parameters must have {} entries", self.factors));
        }
        let ar = self.phi_f.iter().chain([&self.phi_gamma]).all(|p| p.abs() < 1.0);
        if !ar || self.varpi_alpha.abs() >= 1.0 || self.varpi_b.abs() >= 1.0 || self.rho_u.abs() >= 1.0 {
            return bad("autoregressive and smoothing coefficients must lie in (-1, 1)".into());
        }
        let sds = [self.sigma_alpha, self.sigma_b, self.sigma_gamma, self.sigma_u, self.sigma_eps];
        if sds.iter().chain(&self.sigma_f).any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("standard deviations must be finite and nonnegative".into());
        }
        if self.chi.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("spillover decay entries must lie in [0, 1]".into());
        }
        if self.pre_len < 2 || self.post_len < 1 {
            return bad("need at least two pre days and one post day".into());
        }
        if self.years.0 > self.years.1 {
            return bad("year range is empty".into());
        }
        if let EffectMode::RateRatio(rr) = self.effect_mode {
            if !(rr > 0.0) {
                return bad("rate ratio must be positive".into());
            }
        }
        Ok(())
    }

    pub fn n_times(&self) -> usize {
        self.pre_len + self.post_len
    }

    /// Smoothing and propagation coefficients in effect for the scenario.
    fn effective_spatial(&self) -> (f64, f64, f64) {
        if self.scenario.spatial_dep {
            (self.varpi_alpha, self.varpi_b, self.rho_u)
        } else {
            (0.0, 0.0, 0.0)
        }
    }
}

/// Spatial structure shared by all replications.
#[derive(Debug, Clone)]
pub struct GeoInputs {
    pub index: SpatialIndex,
    pub adjacency: AdjacencyGraph,
    pub separation: SeparationMatrix,
    pub w_geo: GeoWeightMatrix,
}

impl GeoInputs {
    pub fn new(index: SpatialIndex, adjacency: AdjacencyGraph, knn_k: usize, bandwidth_factor: f64) -> Result<Self> {
        if adjacency.len() != index.len() {
            return Err(Error::DimensionMismatch("adjacency and centroids cover different unit counts".into()));
        }
        let w_geo = knn_kernel_weights(&index, knn_k, bandwidth_factor)?;
        let separation = degrees_of_separation(&adjacency);
        Ok(GeoInputs { index, adjacency, separation, w_geo })
    }

    pub fn units(&self) -> &[UnitId] {
        self.index.units()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub y00: DMatrix<f64>,
    pub alpha: DVector<f64>,
    /// `N x G`.
    pub loadings: DMatrix<f64>,
    /// `T x G`.
    pub factors: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub u: DMatrix<f64>,
    pub eps: DMatrix<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// AR(1) path of length `t` started from its stationary distribution.
fn ar1_path(phi: f64, sigma: f64, t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = sigma / (1.0 - phi * phi).sqrt() * normal(rng);
    (0..t)
        .map(|k| {
            if k > 0 {
                x = phi * x + sigma * normal(rng);
            }
            x
        })
        .collect()
}

/// Untreated potential outcomes over `t_len` days.
pub fn gen_baseline(config: &DgpConfig, w_geo: &GeoWeightMatrix, t_len: usize, rng: &mut ChaCha8Rng) -> Result<Baseline> {
    config.validate()?;
    let n = w_geo.len();
    let (varpi_a, varpi_b, rho_u) = config.effective_spatial();
    let nu_a = DVector::from_fn(n, |_, _| config.sigma_alpha * normal(rng));
    let alpha = sar_smooth(w_geo, varpi_a, &nu_a)?;
    let mut loadings = DMatrix::zeros(n, config.factors);
    for g in 0..config.factors {
        let nu = DVector::from_fn(n, |_, _| config.sigma_b * normal(rng));
        loadings.set_column(g, &sar_smooth(w_geo, varpi_b, &nu)?);
    }
    let mut factors = DMatrix::zeros(t_len, config.factors);
    for g in 0..config.factors {
        let path = ar1_path(config.phi_f[g], config.sigma_f[g], t_len, rng);
        factors.set_column(g, &DVector::from_vec(path));
    }
    let delta = DVector::from_vec(ar1_path(config.phi_gamma, config.sigma_gamma, t_len, rng));
    let mut u = DMatrix::zeros(n, t_len);
    let mut prev = DVector::from_fn(n, |_, _| config.sigma_u * normal(rng));
    for t in 0..t_len {
        if t > 0 {
            let zeta = DVector::from_fn(n, |_, _| config.sigma_u * normal(rng));
            prev = w_geo.matrix() * &prev * rho_u + zeta;
        }
        u.set_column(t, &prev);
    }
    let eps = DMatrix::from_fn(n, t_len, |_, _| config.sigma_eps * normal(rng));
    let common = &loadings * factors.transpose();
    let y00 = DMatrix::from_fn(n, t_len, |i, t| alpha[i] + delta[t] + common[(i, t)] + u[(i, t)] + eps[(i, t)]);
    Ok(Baseline { y00, alpha, loadings, factors, delta, u, eps })
}

/// `tau0 * (exp(kappa * h) - 1)` on masked cells, where `h` is the heat index
/// standardised by each unit's mean and standard deviation over `pre`;
/// masked-off cells carry the neutral value 1.
pub fn gen_treatment_effects(
    heat: &DMatrix<f64>,
    mask: &TreatmentMask,
    pre: Range<usize>,
    config: &DgpConfig,
    units: &[UnitId],
) -> Result<DMatrix<f64>> {
    let (n, t_len) = mask.shape();
    if heat.shape() != (n, t_len) || units.len() != n {
        return Err(Error::DimensionMismatch("heat, mask and units disagree in shape".into()));
    }
    if pre.end > t_len || pre.len() < 2 {
        return Err(Error::InvalidConfig("pre window must cover at least two days inside the panel".into()));
    }
    let mut tau = DMatrix::from_element(n, t_len, 1.0);
    for i in 0..n {
        if !mask.any_in(i, 0..t_len) {
            continue;
        }
        let window: Vec<f64> = pre.clone().map(|t| heat[(i, t)]).collect();
        let mean = crate::stats::mean(&window);
        let sd = crate::stats::variance(&window).sqrt();
        if !(sd > 0.0) {
            return Err(Error::ZeroPreSd(units[i].to_string()));
        }
        for t in 0..t_len {
            if mask.get(i, t) {
                let h = (heat[(i, t)] - mean) / sd;
                tau[(i, t)] = config.tau0 * ((config.kappa * h).exp() - 1.0);
            }
        }
    }
    Ok(tau)
}

/// Spillovers received by untreated units.
///
/// A unit whose nearest treated unit lies at separation `s <= chi.len()`
/// receives `chi[s-1]` times the mean `tau` of the treated units at exactly
/// that separation which are treated on the same day. All other cells are 1.
pub fn gen_spillovers(tau: &DMatrix<f64>, sep: &SeparationMatrix, chi: &[f64], mask: &TreatmentMask) -> Result<DMatrix<f64>> {
    let (n, t_len) = mask.shape();
    if tau.shape() != (n, t_len) || sep.len() != n {
        return Err(Error::DimensionMismatch("tau, separation and mask disagree in shape".into()));
    }
    let treated = mask.treated_units(0..t_len);
    let mut psi = DMatrix::from_element(n, t_len, 1.0);
    for j in 0..n {
        if treated.contains(&j) {
            continue;
        }
        let Some(s) = sep.min_to(j, &treated) else { continue };
        if s == 0 || s as usize > chi.len() {
            continue;
        }
        let sources: Vec<usize> = treated.iter().copied().filter(|&i| sep.get(i, j) == Some(s)).collect();
        for t in 0..t_len {
            let active: Vec<f64> = sources.iter().filter(|&&i| mask.get(i, t)).map(|&i| tau[(i, t)]).collect();
            if !active.is_empty() {
                psi[(j, t)] = chi[s as usize - 1] * crate::stats::mean(&active);
            }
        }
    }
    Ok(psi)
}

/// Adds per-unit shifts so that each unit's mean over `pre` equals the mean
/// log target rate there. Returns the shifted matrix and the shifts.
pub fn calibrate_levels(
    y00: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    pre: Range<usize>,
    units: &[UnitId],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if targets.shape() != y00.shape() || units.len() != y00.nrows() {
        return Err(Error::DimensionMismatch("targets must match the baseline shape".into()));
    }
    if pre.is_empty() || pre.end > y00.ncols() {
        return Err(Error::InvalidConfig("calibration window outside the panel".into()));
    }
    let n = y00.nrows();
    let mut shifts = DVector::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for t in pre.clone() {
            let r = targets[(i, t)];
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::NonPositiveTarget(units[i].to_string()));
            }
            acc += r.ln() - y00[(i, t)];
        }
        shifts[i] = acc / pre.len() as f64;
    }
    let shifted = DMatrix::from_fn(n, y00.ncols(), |i, t| y00[(i, t)] + shifts[i]);
    Ok((shifted, shifts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellClass {
    Clean,
    Treated,
    Spillover,
}

/// Observed value of one cell under the case system.
pub fn observe(y00: f64, tau: f64, psi: f64, class: CellClass, mode: EffectMode, chi_s: f64) -> f64 {
    match (class, mode) {
        (CellClass::Clean, _) => y00,
        (CellClass::Treated, EffectMode::Multiplicative) => y00 * tau,
        (CellClass::Spillover, EffectMode::Multiplicative) => y00 * psi,
        (CellClass::Treated, EffectMode::AdditiveLog) => if tau > 0.0 { y00 + tau.ln() } else { y00 },
        (CellClass::Spillover, EffectMode::AdditiveLog) => if psi > 0.0 { y00 + psi.ln() } else { y00 },
        (CellClass::Treated, EffectMode::RateRatio(rr)) => y00 + rr.ln(),
        (CellClass::Spillover, EffectMode::RateRatio(rr)) => y00 + chi_s * rr.ln(),
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub jj: u64,
    pub seed: u64,
    pub scenario: Scenario,
    pub year: i32,
    /// Unit drawn as the focal county.
    pub focal: usize,
    /// All treated units, focal first.
    pub treated: Vec<usize>,
    /// Index of the onset day within the panel.
    pub t0: usize,
    /// Observed log-rates, with the heat index of the same days.
    pub panel: Panel,
    pub y00: DMatrix<f64>,
    pub tau: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub classes: DMatrix<CellClass>,
    pub spill_degree: DMatrix<u8>,
    pub mask: TreatmentMask,
    pub shifts: DVector<f64>,
}

impl SimulatedPanel {
    /// Rebuilds the observed outcome from the ground truth.
    pub fn reconstruct(&self, mode: EffectMode, chi: &[f64]) -> DMatrix<f64> {
        let (n, t) = self.y00.shape();
        DMatrix::from_fn(n, t, |i, k| {
            let d = self.spill_degree[(i, k)] as usize;
            let chi_s = if d > 0 { chi[d - 1] } else { 0.0 };
            observe(self.y00[(i, k)], self.tau[(i, k)], self.psi[(i, k)], self.classes[(i, k)], mode, chi_s)
        })
    }

    pub fn pre_range(&self) -> Range<usize> {
        0..self.t0
    }

    pub fn post_range(&self) -> Range<usize> {
        self.t0..self.y00.ncols()
    }
}

/// Where heat index values for a replication come from.
#[derive(Debug, Clone)]
pub enum HeatSource<'a> {
    Synthetic(HeatConfig),
    /// A panel whose heat matrix covers whole calendar years for all units.
    Observed(&'a Panel),
}

/// One replication of the design: a focal county and year are drawn, the
/// treated set is the focal county plus every unit with a detected heatwave
/// covering the onset, and outcomes follow the case system.
pub fn run_replication(
    config: &DgpConfig,
    geo: &GeoInputs,
    heat_source: &HeatSource<'_>,
    targets: Option<&DMatrix<f64>>,
    jj: u64,
) -> Result<SimulatedPanel> {
    config.validate()?;
    let n = geo.index.len();
    let t_len = config.n_times();
    let seed = config.seed_base + jj;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let mut design = stream(0);
    let year = design.random_range(config.years.0..=config.years.1);
    let focal = design.random_range(0..n);
    let onset_date = NaiveDate::from_ymd_opt(year, config.onset.0, config.onset.1)
        .ok_or_else(|| Error::InvalidConfig(format!("invalid onset {:?}", config.onset)))?;
    let onset_doy = onset_date.ordinal0() as usize;
    if onset_doy < config.pre_len {
        return Err(Error::InvalidConfig("onset leaves no room for the pre window".into()));
    }

    let (year_heat, year_start) = match heat_source {
        HeatSource::Synthetic(cfg) => {
            let mut rng = stream(2);
            let h = synthetic_heat_year(&geo.index, &geo.w_geo, year, focal, onset_doy, cfg, &mut rng)?;
            (h, NaiveDate::from_ymd_opt(year, 1, 1).unwrap_or(onset_date))
        }
        HeatSource::Observed(panel) => {
            let aligned = align_heat(panel, geo.units())?;
            let first = NaiveDate::from_ymd_opt(year, 1, 1).unwrap_or(onset_date);
            let last = NaiveDate::from_ymd_opt(year, 12, 31).unwrap_or(onset_date);
            let (a, b) = match (panel.time_index(first), panel.time_index(last)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::InvalidConfig(format!("heat panel does not cover year {year}"))),
            };
            (aligned.columns(a, b - a + 1).clone_owned(), first)
        }
    };
    let year_panel = Panel::from_matrices(
        geo.units().to_vec(),
        year_start,
        DMatrix::zeros(n, year_heat.ncols()),
        Some(year_heat.clone()),
        None,
        Scale::SimulatedLogRate,
    )?;
    let (episodes, _) = detect_heatwaves(&year_panel, &config.heatwave)?;
    let mut treated = vec![focal];
    for ep in &episodes {
        let i = geo.units().iter().position(|u| *u == ep.unit).unwrap_or(focal);
        if ep.start <= onset_doy && onset_doy < ep.end() && !treated.contains(&i) {
            treated.push(i);
        }
    }

    let first_day = onset_doy - config.pre_len;
    let heat = year_heat.columns(first_day, t_len).clone_owned();
    let t0 = config.pre_len;
    let mut mask = TreatmentMask::empty(n, t_len);
    for &i in &treated {
        mask.mark(i, t0, config.post_len);
    }

    let mut rng = stream(1);
    let baseline = gen_baseline(config, &geo.w_geo, t_len, &mut rng)?;
    let (y00, shifts) = match (config.calibrate, targets) {
        (true, Some(tg)) => {
            if tg.shape() != (n, t_len) {
                return Err(Error::DimensionMismatch(format!("targets must be {n}x{t_len}")));
            }
            calibrate_levels(&baseline.y00, tg, 0..t0, geo.units())?
        }
        _ => (baseline.y00.clone(), DVector::zeros(n)),
    };

    let tau = gen_treatment_effects(&heat, &mask, 0..t0, config, geo.units())?;
    let psi = if config.scenario.spillover {
        gen_spillovers(&tau, &geo.separation, &config.chi, &mask)?
    } else {
        DMatrix::from_element(n, t_len, 1.0)
    };
    let mut classes = DMatrix::from_element(n, t_len, CellClass::Clean);
    let mut spill_degree = DMatrix::from_element(n, t_len, 0u8);
    let treated_all = mask.treated_units(0..t_len);
    for i in 0..n {
        let s = geo.separation.min_to(i, &treated_all).unwrap_or(u32::MAX);
        for t in 0..t_len {
            if mask.get(i, t) {
                classes[(i, t)] = CellClass::Treated;
            } else if config.scenario.spillover && s >= 1 && (s as usize) <= config.chi.len() && t >= t0 {
                let active = treated_all.iter().any(|&k| geo.separation.get(k, i) == Some(s) && mask.get(k, t));
                if active {
                    classes[(i, t)] = CellClass::Spillover;
                    spill_degree[(i, t)] = s as u8;
                }
            }
        }
    }
    let mut sim = SimulatedPanel {
        jj,
        seed,
        scenario: config.scenario,
        year,
        focal,
        treated,
        t0,
        panel: year_panel,
        y00,
        tau,
        psi,
        classes,
        spill_degree,
        mask,
        shifts,
    };
    let observed = sim.reconstruct(config.effect_mode, &config.chi);
    sim.panel = Panel::from_matrices(
        geo.units().to_vec(),
        onset_date - chrono::Days::new(config.pre_len as u64),
        observed,
        Some(heat),
        None,
        Scale::SimulatedLogRate,
    )?;
    Ok(sim)
}

fn align_heat(panel: &Panel, units: &[UnitId]) -> Result<DMatrix<f64>> {
    let heat = panel.heat().ok_or_else(|| Error::InvalidPanel("heat panel has no heat column".into()))?;
    let rows = units.iter().map(|u| panel.unit_index(u)).collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(units.len(), heat.ncols(), |i, t| heat[(rows[i], t)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::geo::{row_standardize, AdjacencyGraph};
    use proptest::prelude::*;

    fn small_geo(rows: usize, cols: usize) -> GeoInputs {
        let (index, adj) = synthetic_geography(rows, cols, BoundingBox::default(), 9).unwrap();
        GeoInputs::new(index, adj, 4, 0.5).unwrap()
    }

    fn quiet_config() -> DgpConfig {
        DgpConfig {
            sigma_b: 0.0,
            sigma_f: vec![0.0, 0.0],
            sigma_gamma: 0.0,
            sigma_u: 0.0,
            sigma_eps: 0.0,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn only_unit_effects_survive() {
        let geo = small_geo(4, 4);
        let cfg = DgpConfig { varpi_alpha: 0.0, scenario: Scenario { spatial_dep: true, spillover: false }, ..quiet_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = gen_baseline(&cfg, &geo.w_geo, 12, &mut rng).unwrap();
        for i in 0..16 {
            for t in 0..12 {
                assert_eq!(b.y00[(i, t)], b.alpha[i]);
            }
        }
    }

    #[test]
    fn alpha_matches_linear_solve() {
        let geo = small_geo(3, 3);
        let cfg = DgpConfig { scenario: Scenario { spatial_dep: true, spillover: false }, ..quiet_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = gen_baseline(&cfg, &geo.w_geo, 3, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nu = DVector::from_fn(9, |_, _| cfg.sigma_alpha * normal(&mut rng));
        let a = DMatrix::identity(9, 9) - geo.w_geo.matrix() * 0.5;
        let direct = a.try_inverse().unwrap() * nu;
        assert!((b.alpha - direct).amax() < 1e-12);
    }

    #[test]
    fn treatment_effect_values() {
        let units: Vec<UnitId> = ["a", "b"].iter().map(|s| UnitId::new(*s).unwrap()).collect();
        // Pre days 0..4 have mean 1 and sd 1 for unit a.
        let heat = DMatrix::from_row_slice(2, 6, &[0.0, 2.0, 0.0, 2.0, 1.0, 2.0, 5.0, 5.0, 6.0, 5.0, 9.0, 9.0]);
        let mut mask = TreatmentMask::empty(2, 6);
        mask.mark(0, 4, 2);
        let cfg = DgpConfig::default();
        let sd = crate::stats::variance(&[0.0, 2.0, 0.0, 2.0]).sqrt();
        let tau = gen_treatment_effects(&heat, &mask, 0..4, &cfg, &units).unwrap();
        assert_eq!(tau[(0, 4)], 0.0);
        let h = 1.0 / sd;
        assert!((tau[(0, 5)] - 5.7 * ((0.65 * h).exp() - 1.0)).abs() < 1e-12);
        assert_eq!(tau[(1, 5)], 1.0);
        assert_eq!(tau[(0, 0)], 1.0);
        assert!((5.7 * (0.65f64.exp() - 1.0) - 5.21858).abs() < 1e-5);

        let flat = DMatrix::from_element(2, 6, 3.0);
        assert!(matches!(gen_treatment_effects(&flat, &mask, 0..4, &cfg, &units), Err(Error::ZeroPreSd(u)) if u == "a"));
    }

    #[test]
    fn single_neighbour_spillover() {
        // Path 0 - 1 - 2 - 3: unit 0 treated.
        let adj = AdjacencyGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let sep = degrees_of_separation(&adj);
        let mut mask = TreatmentMask::empty(4, 3);
        mask.mark(0, 1, 2);
        let mut tau = DMatrix::from_element(4, 3, 1.0);
        tau[(0, 1)] = 4.0;
        tau[(0, 2)] = 2.0;
        let psi = gen_spillovers(&tau, &sep, &[0.7, 0.4], &mask).unwrap();
        assert!((psi[(1, 1)] - 2.8).abs() < 1e-12);
        assert!((psi[(2, 2)] - 0.8).abs() < 1e-12);
        assert_eq!(psi[(3, 1)], 1.0);
        assert_eq!(psi[(1, 0)], 1.0);
        assert_eq!(psi[(0, 1)], 1.0);
    }

    fn brute_spillover(tau: &DMatrix<f64>, sep: &SeparationMatrix, chi: &[f64], mask: &TreatmentMask) -> DMatrix<f64> {
        let (n, t_len) = mask.shape();
        let treated: Vec<usize> = (0..n).filter(|&i| (0..t_len).any(|t| mask.get(i, t))).collect();
        let mut psi = DMatrix::from_element(n, t_len, 1.0);
        for j in 0..n {
            if treated.contains(&j) {
                continue;
            }
            let mut best = u32::MAX;
            for &i in &treated {
                if let Some(s) = sep.get(i, j) {
                    best = best.min(s);
                }
            }
            for (deg, c) in chi.iter().enumerate() {
                if best != deg as u32 + 1 {
                    continue;
                }
                for t in 0..t_len {
                    let mut sum = 0.0;
                    let mut cnt = 0;
                    for &i in &treated {
                        if sep.get(i, j) == Some(best) && mask.get(i, t) {
                            sum += tau[(i, t)];
                            cnt += 1;
                        }
                    }
                    if cnt > 0 {
                        psi[(j, t)] = c * sum / cnt as f64;
                    }
                }
            }
        }
        psi
    }

    #[test]
    fn spillovers_match_exhaustive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..30 {
            let n = 15;
            let edges: Vec<(usize, usize)> =
                (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).filter(|_| rng.random::<f64>() < 0.15).collect();
            let adj = AdjacencyGraph::from_edges(n, &edges).unwrap();
            let sep = degrees_of_separation(&adj);
            let mut mask = TreatmentMask::empty(n, 6);
            for i in 0..n {
                if rng.random::<f64>() < 0.2 {
                    mask.mark(i, rng.random_range(0..6), rng.random_range(1..4));
                }
            }
            let tau = DMatrix::from_fn(n, 6, |i, t| if mask.get(i, t) { rng.random_range(-2.0..8.0) } else { 1.0 });
            let got = gen_spillovers(&tau, &sep, &[0.7, 0.4], &mask).unwrap();
            let want = brute_spillover(&tau, &sep, &[0.7, 0.4], &mask);
            assert!((got - want).amax() < 1e-12);
        }
    }

    #[test]
    fn calibration_examples() {
        let units: Vec<UnitId> = ["a", "b"].iter().map(|s| UnitId::new(*s).unwrap()).collect();
        let y = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 1.0, 1.0, 1.0]);
        let targets = y.map(f64::exp);
        let (_, r) = calibrate_levels(&y, &targets, 0..3, &units).unwrap();
        assert!(r.amax() < 1e-12);
        let c = DMatrix::from_element(2, 3, 4.0);
        let (_, r) = calibrate_levels(&y, &c, 0..3, &units).unwrap();
        assert!((r[1] - (4.0f64.ln() - 1.0)).abs() < 1e-12);
        let mut bad = c.clone();
        bad[(1, 1)] = 0.0;
        assert!(matches!(calibrate_levels(&y, &bad, 0..3, &units), Err(Error::NonPositiveTarget(u)) if u == "b"));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random = DMatrix::from_fn(2, 3, |_, _| rng.random_range(0.5..3.0));
        let (shifted, _) = calibrate_levels(&y, &random, 0..2, &units).unwrap();
        for i in 0..2 {
            let a = (shifted[(i, 0)] + shifted[(i, 1)]) / 2.0;
            let b = (random[(i, 0)].ln() + random[(i, 1)].ln()) / 2.0;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_autocorrelation_matches_phi() {
        let cfg = DgpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = 20_000;
        let x = ar1_path(cfg.phi_gamma, cfg.sigma_gamma, t, &mut rng);
        let m = crate::stats::mean(&x);
        let num: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        let den: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let r1 = num / den;
        // Bartlett's standard error for an AR(1) lag-1 coefficient.
        let se = ((1.0 - cfg.phi_gamma.powi(2)) / t as f64).sqrt();
        assert!((r1 - cfg.phi_gamma).abs() < 3.0 * se, "{r1}");
    }

    #[test]
    fn component_variances_match_stationary_values() {
        let geo = small_geo(10, 10);
        let cfg = DgpConfig { scenario: Scenario { spatial_dep: false, spillover: false }, ..DgpConfig::default() };
        let mut eps = Vec::new();
        let mut u = Vec::new();
        let mut delta = Vec::new();
        for jj in 0..25 {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED_BASE + jj);
            let b = gen_baseline(&cfg, &geo.w_geo, 30, &mut rng).unwrap();
            eps.extend(b.eps.iter().copied());
            u.extend(b.u.iter().copied());
            delta.push(b.delta[0]);
        }
        let sd = |v: &[f64]| crate::stats::variance(v).sqrt();
        assert!((sd(&eps) / cfg.sigma_eps - 1.0).abs() < 0.03);
        assert!((sd(&u) / cfg.sigma_u - 1.0).abs() < 0.03);
        let stationary = cfg.sigma_gamma / (1.0 - cfg.phi_gamma.powi(2)).sqrt();
        // 25 draws: the sample sd is within roughly 3 standard errors.
        assert!((sd(&delta) / stationary - 1.0).abs() < 3.0 / (2.0f64 * 24.0).sqrt());
    }

    #[test]
    fn scenario_semantics_and_determinism() {
        let geo = small_geo(8, 8);
        let targets = synthetic_targets(&geo.index, &TargetConfig::default(), 30);
        for scenario in Scenario::all() {
            let cfg = DgpConfig { scenario, ..DgpConfig::default() };
            let heat = HeatSource::Synthetic(HeatConfig::default());
            let a = run_replication(&cfg, &geo, &heat, Some(&targets), 0).unwrap();
            let b = run_replication(&cfg, &geo, &heat, Some(&targets), 0).unwrap();
            assert_eq!(a.panel, b.panel);
            assert_eq!(a.y00, b.y00);
            assert_eq!(a.panel.outcome(), &a.reconstruct(cfg.effect_mode, &cfg.chi));
            assert!(a.treated.contains(&a.focal));
            if !scenario.spillover {
                assert!(a.psi.iter().all(|v| *v == 1.0));
                assert!(a.classes.iter().all(|c| *c != CellClass::Spillover));
            }
            for i in 0..64 {
                for t in 0..30 {
                    let obs = a.panel.outcome()[(i, t)];
                    match a.classes[(i, t)] {
                        CellClass::Clean => assert_eq!(obs, a.y00[(i, t)]),
                        CellClass::Treated => assert_eq!(obs, a.y00[(i, t)] * a.tau[(i, t)]),
                        CellClass::Spillover => assert_eq!(obs, a.y00[(i, t)] * a.psi[(i, t)]),
                    }
                }
            }
            // Pre-period calibrated means equal the log targets.
            for i in 0..64 {
                let m: f64 = (0..20).map(|t| a.y00[(i, t)]).sum::<f64>() / 20.0;
                let l: f64 = (0..20).map(|t| targets[(i, t)].ln()).sum::<f64>() / 20.0;
                assert!((m - l).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_spatial_scenario_disables_propagation() {
        let n = 5;
        let w = row_standardize(&DMatrix::from_element(n, n, 1.0)).unwrap();
        let cfg = DgpConfig { scenario: Scenario { spatial_dep: false, spillover: false }, ..DgpConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = gen_baseline(&cfg, &w, 4, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nu = DVector::from_fn(n, |_, _| cfg.sigma_alpha * normal(&mut rng));
        assert_eq!(b.alpha, nu);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn cells_partition_and_reconstruct(jj in 0u64..1000, code in 0usize..4) {
            let geo = small_geo(6, 6);
            let targets = synthetic_targets(&geo.index, &TargetConfig::default(), 30);
            let cfg = DgpConfig { scenario: Scenario::all()[code], ..DgpConfig::default() };
            let sim = run_replication(&cfg, &geo, &HeatSource::Synthetic(HeatConfig::default()), Some(&targets), jj).unwrap();
            prop_assert_eq!(sim.panel.outcome(), &sim.reconstruct(cfg.effect_mode, &cfg.chi));
            for i in 0..36 {
                for t in 0..30 {
                    let class = sim.classes[(i, t)];
                    prop_assert_eq!(class == CellClass::Treated, sim.mask.get(i, t));
                    if !cfg.scenario.spillover && class != CellClass::Treated {
                        prop_assert_eq!(sim.panel.outcome()[(i, t)], sim.y00[(i, t)]);
                    }
                }
            }
        }
    }
}
