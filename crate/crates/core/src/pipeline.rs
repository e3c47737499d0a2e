//! Seeded Monte Carlo study: simulate panels, fit the non-spatial and the
//! spatially informed Bayesian synthetic controls for the focal unit of each
//! replication, and score the imputed counterfactuals.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::donor::{eligible_donors, Buffer, PoolKind, Proximity};
use crate::error::{Error, Result};
use crate::evalx::{dl_meta, imputation_metrics, scenario_report, ImputedPath, MetaInput, MetaResult, MetricsRow, ScenarioReport, METHODS};
use crate::panel::{slice_window, EpisodeWindow, Scale};
use crate::sasc::{fit_sasc, rr_summary, DistanceScale, HmcConfig, Prior, SascData, SascFit};
use crate::simgen::{
    run_replication, synthetic_geography, synthetic_targets, BoundingBox, DgpConfig, EffectMode, GeoInputs, HeatConfig,
    HeatSource, Scenario, SimulatedPanel, TargetConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DonorPolicy {
    /// Excludes every unit within the separation buffer of a treated unit.
    Buffered,
    /// Every untreated unit, including those receiving spillovers.
    Contaminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub reps: u64,
    pub scenarios: Vec<Scenario>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub bbox: BoundingBox,
    pub geo_seed: u64,
    pub dgp: DgpConfig,
    pub heat: HeatConfig,
    pub targets: TargetConfig,
    pub hmc: HmcConfig,
    /// Pool for the spatially informed fit.
    pub donor_policy: DonorPolicy,
    /// Pool for the non-spatial fit.
    pub sc_donor_policy: DonorPolicy,
    pub buffer_degrees: u32,
    pub distance_scale: DistanceScale,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            reps: 25,
            scenarios: Scenario::all().to_vec(),
            grid_rows: 10,
            grid_cols: 10,
            bbox: BoundingBox::default(),
            geo_seed: 7,
            // Loading spread and level field chosen so the imputation errors
            // match the scale of county hospitalization panels.
            dgp: DgpConfig { sigma_b: 14.0, ..DgpConfig::default() },
            heat: HeatConfig::default(),
            targets: TargetConfig { sd_log_rate: 3.5, range_km: 1500.0, ..TargetConfig::default() },
            hmc: HmcConfig { chains: 4, warmup: 500, iters: 1500, ..HmcConfig::default() },
            donor_policy: DonorPolicy::Buffered,
            sc_donor_policy: DonorPolicy::Buffered,
            buffer_degrees: 2,
            distance_scale: DistanceScale::Unit,
        }
    }
}

impl PipelineConfig {
    /// Homogeneous panels with a small cross-unit spread, for studies that
    /// pool relative risks across many episodes.
    pub fn low_heterogeneity() -> Self {
        let base = PipelineConfig::default();
        PipelineConfig {
            dgp: DgpConfig { sigma_b: 0.5, ..base.dgp.clone() },
            targets: TargetConfig { sd_log_rate: 0.3, ..base.targets.clone() },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.scenarios.is_empty() {
            return Err(Error::InvalidConfig("need at least one replication and one scenario".into()));
        }
        if self.grid_rows * self.grid_cols < 4 {
            return Err(Error::InvalidConfig("geography needs at least four units".into()));
        }
        self.dgp.validate()?;
        self.hmc.validate()
    }

    pub fn geography(&self) -> Result<GeoInputs> {
        let (index, adjacency) = synthetic_geography(self.grid_rows, self.grid_cols, self.bbox, self.geo_seed)?;
        GeoInputs::new(index, adjacency, self.dgp.knn_k, self.dgp.bandwidth_factor)
    }

    pub fn target_rates(&self, geo: &GeoInputs) -> DMatrix<f64> {
        synthetic_targets(&geo.index, &self.targets, self.dgp.n_times())
    }
}

/// Bookkeeping for one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationLog {
    pub scenario: String,
    pub jj: u64,
    pub seed: u64,
    pub year: i32,
    pub focal: String,
    pub n_treated: usize,
    pub n_sc_donors: usize,
    pub n_donors: usize,
    pub sc_degraded: bool,
    pub sasc_degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub log: ReplicationLog,
    /// Keyed like [`METHODS`].
    pub paths: [ImputedPath; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub report: ScenarioReport,
    pub replications: Vec<ReplicationResult>,
}

/// Fit inputs for the focal unit under a donor policy.
pub fn focal_fit_data(
    sim: &SimulatedPanel,
    geo: &GeoInputs,
    policy: DonorPolicy,
    buffer_degrees: u32,
    scale: DistanceScale,
) -> Result<SascData> {
    let units = geo.units();
    let pre = sim.pre_range().len();
    let post = sim.post_range().len();
    let window = EpisodeWindow::new(units[sim.focal].clone(), sim.t0, pre, post)?;
    let pool = match policy {
        DonorPolicy::Buffered => eligible_donors(
            units,
            &sim.mask,
            Some(Proximity::Separation(&geo.separation)),
            &window,
            Some(Buffer::Degrees(buffer_degrees)),
            PoolKind::SpatialBuffered,
        )?,
        DonorPolicy::Contaminated => eligible_donors(units, &sim.mask, None, &window, None, PoolKind::Standard)?,
    };
    let slice = slice_window(&sim.panel, &window, &pool.donors)?;
    let dist: Vec<f64> = pool
        .donors
        .iter()
        .map(|d| geo.index.units().iter().position(|u| u == d).map(|j| geo.index.distances()[(sim.focal, j)]).unwrap_or(0.0))
        .collect();
    SascData::new(slice.treated_pre, slice.donors_pre, slice.donors_post, &dist, scale)
}

fn hmc_seed(base: u64, scenario: usize, jj: u64, method: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(jj * 16 + scenario as u64 * 2 + method as u64)
}

fn truth_path(sim: &SimulatedPanel) -> Vec<f64> {
    sim.y00.row(sim.focal).iter().copied().collect()
}

/// One replication of one scenario: both methods on the focal unit.
pub fn run_one(cfg: &PipelineConfig, geo: &GeoInputs, targets: &DMatrix<f64>, scenario_idx: usize, jj: u64) -> Result<ReplicationResult> {
    let scenario = cfg.scenarios[scenario_idx];
    let dgp = DgpConfig { scenario, ..cfg.dgp.clone() };
    let sim = run_replication(&dgp, geo, &HeatSource::Synthetic(cfg.heat.clone()), Some(targets), jj)?;
    let sc_data = focal_fit_data(&sim, geo, cfg.sc_donor_policy, cfg.buffer_degrees, cfg.distance_scale)?;
    let data = focal_fit_data(&sim, geo, cfg.donor_policy, cfg.buffer_degrees, cfg.distance_scale)?;
    let truth = truth_path(&sim);
    let fit = |method: usize, data: &SascData, prior: Prior| -> Result<SascFit> {
        let hmc = HmcConfig { seed: hmc_seed(cfg.hmc.seed, scenario_idx, jj, method), ..cfg.hmc.clone() };
        fit_sasc(data, prior, &hmc)
    };
    let sc = fit(0, &sc_data, Prior::NonSpatial)?;
    let sasc = fit(1, &data, Prior::Spatial)?;
    Ok(ReplicationResult {
        log: ReplicationLog {
            scenario: scenario.label().to_string(),
            jj,
            seed: sim.seed,
            year: sim.year,
            focal: geo.units()[sim.focal].to_string(),
            n_treated: sim.treated.len(),
            n_sc_donors: sc_data.n_donors(),
            n_donors: data.n_donors(),
            sc_degraded: sc.diagnostics.degraded,
            sasc_degraded: sasc.diagnostics.degraded,
        },
        paths: [ImputedPath::from_sasc(&sc, &truth), ImputedPath::from_sasc(&sasc, &truth)],
    })
}

/// Runs every scenario and replication and builds the report. Results are
/// independent of the number of worker threads.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let geo = cfg.geography()?;
    let targets = cfg.target_rates(&geo);
    let jobs: Vec<(usize, u64)> = (0..cfg.scenarios.len()).flat_map(|s| (0..cfg.reps).map(move |jj| (s, jj))).collect();
    let replications = jobs
        .par_iter()
        .map(|&(s, jj)| run_one(cfg, &geo, &targets, s, jj))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    for scenario in &cfg.scenarios {
        let reps: Vec<&ReplicationResult> = replications.iter().filter(|r| r.log.scenario == scenario.label()).collect();
        for (m, method) in METHODS.iter().enumerate() {
            let paths: Vec<ImputedPath> = reps.iter().map(|r| r.paths[m].clone()).collect();
            rows.push(imputation_metrics(scenario.label(), method, &paths)?);
        }
    }
    Ok(PipelineOutput { report: scenario_report(&rows), replications })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRr {
    pub jj: u64,
    pub focal: String,
    pub rr_point: f64,
    pub log_sd: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRatioStudy {
    pub true_rr: f64,
    pub episodes: Vec<EpisodeRr>,
    pub meta: MetaResult,
}

/// Simulates episodes with a constant rate ratio on treated cells, estimates
/// each episode's relative risk with the spatial model and pools the log
/// relative risks.
pub fn rate_ratio_study(cfg: &PipelineConfig, rr: f64, episodes: u64, knapp_hartung: bool) -> Result<RateRatioStudy> {
    cfg.validate()?;
    let geo = cfg.geography()?;
    let targets = cfg.target_rates(&geo);
    let dgp = DgpConfig {
        scenario: Scenario { spatial_dep: true, spillover: false },
        effect_mode: EffectMode::RateRatio(rr),
        ..cfg.dgp.clone()
    };
    let results = (0..episodes)
        .into_par_iter()
        .map(|jj| -> Result<EpisodeRr> {
            let sim = run_replication(&dgp, &geo, &HeatSource::Synthetic(cfg.heat.clone()), Some(&targets), jj)?;
            let data = focal_fit_data(&sim, &geo, DonorPolicy::Buffered, cfg.buffer_degrees, cfg.distance_scale)?;
            let hmc = HmcConfig { seed: hmc_seed(cfg.hmc.seed, 7, jj, 1), ..cfg.hmc.clone() };
            let fit = fit_sasc(&data, Prior::Spatial, &hmc)?;
            let observed: Vec<f64> = sim.post_range().map(|t| sim.panel.outcome()[(sim.focal, t)]).collect();
            let summary = rr_summary(&fit, &observed, Scale::SimulatedLogRate)?;
            Ok(EpisodeRr {
                jj,
                focal: geo.units()[sim.focal].to_string(),
                rr_point: summary.point,
                log_sd: summary.log_sd,
                degraded: fit.diagnostics.degraded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<MetaInput> = results.iter().map(|e| MetaInput { log_rr: e.rr_point.ln(), variance: e.log_sd.powi(2) }).collect();
    let meta = dl_meta(&inputs, knapp_hartung)?;
    Ok(RateRatioStudy { true_rr: rr, episodes: results, meta })
}
