//! Subcommand flags and their resolved settings.
//!
//! Each settings struct is what a `--config` TOML file holds at its top level
//! and what the manifest echoes. Output locations are flags only, so two runs
//! writing to different places still share a manifest.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use heatsc::exposure::{Reference, Season};
use heatsc::panel::Scale;
use heatsc::pipeline::{DonorPolicy, PipelineConfig};
use heatsc::sasc::{DistanceScale, HmcConfig};
use heatsc::simgen::{BoundingBox, DgpConfig, HeatConfig, Scenario, TargetConfig};

use crate::CliError;

/// Parses a flag value with the serde name of `T`.
fn named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).map_err(|e| e.to_string())
}

fn scenario_list(s: &str) -> Result<Vec<Scenario>, String> {
    if s == "all" {
        return Ok(Scenario::all().to_vec());
    }
    s.split(',').map(|c| scenario(c.trim())).collect()
}

/// Settings from the config file, or defaults when there is none.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn set<T: Clone>(dst: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *dst = v.clone();
    }
}

fn set_some<T: Clone>(dst: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        dst.clone_from(flag);
    }
}

pub fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::input(format!("--{name} is required (flag or config file)")))
}

// ---------------------------------------------------------------- detect

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Panel CSV with a heat column.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Percentile of each unit's heat series that a day must reach (default 95).
    #[arg(long)]
    pub percentile: Option<f64>,
    /// Minimum run length in days (default 2).
    #[arg(long)]
    pub min_duration: Option<usize>,
    /// per-year, whole-period or warm-season.
    #[arg(long, value_parser = named::<Reference>)]
    pub reference: Option<Reference>,
    /// Keep only the first episode of each unit and season.
    #[arg(long)]
    pub first_of_season: bool,
    #[arg(long, default_value = "heatsc-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectSettings {
    pub panel: Option<PathBuf>,
    pub percentile: f64,
    pub min_duration: usize,
    pub reference: Reference,
    pub first_of_season: bool,
    pub season: Season,
}

impl Default for DetectSettings {
    fn default() -> Self {
        DetectSettings {
            panel: None,
            percentile: 95.0,
            min_duration: 2,
            reference: Reference::PerYear,
            first_of_season: false,
            season: Season::default(),
        }
    }
}

impl DetectArgs {
    pub fn resolve(&self, config: Option<&Path>) -> Result<DetectSettings, CliError> {
        let mut s: DetectSettings = load(config)?;
        set_some(&mut s.panel, &self.panel);
        set(&mut s.percentile, &self.percentile);
        set(&mut s.min_duration, &self.min_duration);
        set(&mut s.reference, &self.reference);
        s.first_of_season |= self.first_of_season;
        Ok(s)
    }
}

// ---------------------------------------------------------------- donors

#[derive(Debug, Args)]
pub struct PoolFlags {
    /// Panel CSV: unit_id,date,outcome[,heat,population].
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Episodes CSV: unit_id,start_date,length_days. All of them mark treated days.
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    /// Centroids CSV: unit_id,lat,lon.
    #[arg(long)]
    pub centroids: Option<PathBuf>,
    /// Adjacency CSV: unit_a,unit_b. Needed with --s0.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// Exclude donors within this many contiguity steps of a treated unit.
    #[arg(long, conflicts_with = "buffer_km")]
    pub s0: Option<u32>,
    /// Exclude donors within this many km of a treated unit.
    #[arg(long)]
    pub buffer_km: Option<f64>,
    /// Keep the K donors closest in covariates.
    #[arg(long)]
    pub screen_k: Option<usize>,
    /// Covariates CSV: unit_id followed by numeric columns.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Pre-period length in days.
    #[arg(long)]
    pub pre: Option<usize>,
    /// Post-period length in days; defaults to each episode's length.
    #[arg(long)]
    pub post: Option<usize>,
    /// Only build pools for episodes of these units (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub units: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSettings {
    pub panel: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub centroids: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub s0: Option<u32>,
    pub buffer_km: Option<f64>,
    pub screen_k: Option<usize>,
    pub covariates: Option<PathBuf>,
    pub pre: usize,
    pub post: Option<usize>,
    pub units: Vec<String>,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            panel: None,
            episodes: None,
            centroids: None,
            adjacency: None,
            s0: None,
            buffer_km: None,
            screen_k: None,
            covariates: None,
            pre: 60,
            post: None,
            units: Vec::new(),
        }
    }
}

impl PoolFlags {
    fn apply(&self, s: &mut PoolSettings) {
        set_some(&mut s.panel, &self.panel);
        set_some(&mut s.episodes, &self.episodes);
        set_some(&mut s.centroids, &self.centroids);
        set_some(&mut s.adjacency, &self.adjacency);
        // The two buffers exclude each other; a flag replaces either.
        if self.s0.is_some() || self.buffer_km.is_some() {
            s.s0 = self.s0;
            s.buffer_km = self.buffer_km;
        }
        set_some(&mut s.screen_k, &self.screen_k);
        set_some(&mut s.covariates, &self.covariates);
        set(&mut s.pre, &self.pre);
        set_some(&mut s.post, &self.post);
        set(&mut s.units, &self.units);
    }
}

#[derive(Debug, Args)]
pub struct DonorsArgs {
    #[command(flatten)]
    pub pool: PoolFlags,
    #[arg(long, default_value = "heatsc-out")]
    pub out: PathBuf,
}

impl DonorsArgs {
    pub fn resolve(&self, config: Option<&Path>) -> Result<PoolSettings, CliError> {
        let mut s: PoolSettings = load(config)?;
        self.pool.apply(&mut s);
        Ok(s)
    }
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Spatially augmented Bayesian synthetic control.
    Sasc,
    /// Bayesian synthetic control without the distance prior.
    Bsc,
    /// Simplex-constrained least squares, no intervals.
    ScOls,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub pool: PoolFlags,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Hamiltonian Monte Carlo chains.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Iterations per chain, warmup included.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Warmup iterations per chain.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// km or unit (divide by the largest donor distance).
    #[arg(long, value_parser = named::<DistanceScale>)]
    pub distance_scale: Option<DistanceScale>,
    /// Scale of the outcome column: raw_rate, log_rate or simulated_log_rate.
    #[arg(long, value_parser = named::<Scale>)]
    pub scale: Option<Scale>,
    /// Impute zero rates and take logs before fitting (raw-rate panels).
    #[arg(long)]
    pub log_transform: bool,
    /// Smooth every day rather than only zero days.
    #[arg(long)]
    pub smooth_all: bool,
    /// Rolling window for zero imputation.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value = "heatsc-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub method: Method,
    pub pool: PoolSettings,
    pub hmc: HmcConfig,
    pub distance_scale: DistanceScale,
    pub scale: Scale,
    pub log_transform: bool,
    pub smooth_all: bool,
    pub window: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            method: Method::Sasc,
            pool: PoolSettings::default(),
            hmc: HmcConfig::default(),
            distance_scale: DistanceScale::Unit,
            scale: Scale::LogRate,
            log_transform: false,
            smooth_all: false,
            window: 5,
        }
    }
}

impl FitArgs {
    pub fn resolve(&self, config: Option<&Path>, seed: Option<u64>) -> Result<FitSettings, CliError> {
        let mut s: FitSettings = load(config)?;
        self.pool.apply(&mut s.pool);
        set(&mut s.method, &self.method);
        set(&mut s.hmc.chains, &self.chains);
        set(&mut s.hmc.iters, &self.iters);
        set(&mut s.hmc.warmup, &self.warmup);
        set(&mut s.hmc.seed, &seed);
        set(&mut s.distance_scale, &self.distance_scale);
        set(&mut s.scale, &self.scale);
        s.log_transform |= self.log_transform;
        s.smooth_all |= self.smooth_all;
        set(&mut s.window, &self.window);
        Ok(s)
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// sd+sp, sd, sp or none.
    #[arg(long, value_parser = scenario)]
    pub scenario: Option<Scenario>,
    /// Number of replications.
    #[arg(long)]
    pub reps: Option<u64>,
    #[arg(long, default_value = "heatsc-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSettings {
    pub scenario: Scenario,
    pub reps: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub bbox: BoundingBox,
    pub geo_seed: u64,
    pub dgp: DgpConfig,
    pub heat: HeatConfig,
    pub targets: TargetConfig,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        SimulateSettings {
            scenario: p.dgp.scenario,
            reps: 100,
            grid_rows: p.grid_rows,
            grid_cols: p.grid_cols,
            bbox: p.bbox,
            geo_seed: p.geo_seed,
            dgp: p.dgp,
            heat: p.heat,
            targets: p.targets,
        }
    }
}

impl SimulateSettings {
    /// The pipeline configuration sharing this geography and design.
    pub fn as_pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            reps: self.reps,
            scenarios: vec![self.scenario],
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            bbox: self.bbox,
            geo_seed: self.geo_seed,
            dgp: DgpConfig { scenario: self.scenario, ..self.dgp.clone() },
            heat: self.heat.clone(),
            targets: self.targets.clone(),
            ..PipelineConfig::default()
        }
    }
}

impl SimulateArgs {
    pub fn resolve(&self, config: Option<&Path>, seed: Option<u64>) -> Result<SimulateSettings, CliError> {
        let mut s: SimulateSettings = load(config)?;
        set(&mut s.scenario, &self.scenario);
        set(&mut s.reps, &self.reps);
        set(&mut s.dgp.seed_base, &seed);
        Ok(s)
    }
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of fit JSON files.
    #[arg(long)]
    pub fits: Option<PathBuf>,
    /// Directory written by `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Scenario label; defaults to the one in the truth manifest.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Table CSV; a manifest is written beside it.
    #[arg(long, default_value = "table.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSettings {
    pub fits: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub scenario: Option<String>,
}

impl EvaluateArgs {
    pub fn resolve(&self, config: Option<&Path>) -> Result<EvaluateSettings, CliError> {
        let mut s: EvaluateSettings = load(config)?;
        set_some(&mut s.fits, &self.fits);
        set_some(&mut s.truth, &self.truth);
        set_some(&mut s.scenario, &self.scenario);
        Ok(s)
    }
}

// ---------------------------------------------------------------- pool

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// CSV with log_rr and variance columns, one row per episode.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long)]
    pub knapp_hartung: bool,
    /// Summary JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolMetaSettings {
    pub inputs: Option<PathBuf>,
    pub knapp_hartung: bool,
}

impl PoolArgs {
    pub fn resolve(&self, config: Option<&Path>) -> Result<PoolMetaSettings, CliError> {
        let mut s: PoolMetaSettings = load(config)?;
        set_some(&mut s.inputs, &self.inputs);
        s.knapp_hartung |= self.knapp_hartung;
        Ok(s)
    }
}

// ---------------------------------------------------------------- pipeline-sim

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Replications per scenario.
    #[arg(long)]
    pub reps: Option<u64>,
    /// `all` or a comma separated list of sd+sp, sd, sp, none.
    #[arg(long)]
    pub scenarios: Option<String>,
    /// Donor pool of the spatial fit: buffered or contaminated.
    #[arg(long, value_parser = named::<DonorPolicy>)]
    pub donor_policy: Option<DonorPolicy>,
    /// Donor pool of the non-spatial fit.
    #[arg(long, value_parser = named::<DonorPolicy>)]
    pub sc_donor_policy: Option<DonorPolicy>,
    /// Hamiltonian Monte Carlo chains.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Iterations per chain, warmup included.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Warmup iterations per chain.
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value = "heatsc-out")]
    pub out: PathBuf,
}

impl PipelineArgs {
    /// `--seed` sets both the replication seed base and the sampler seed.
    pub fn resolve(&self, config: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, CliError> {
        let mut s: PipelineConfig = load(config)?;
        set(&mut s.reps, &self.reps);
        if let Some(list) = &self.scenarios {
            s.scenarios = scenario_list(list).map_err(CliError::input)?;
        }
        set(&mut s.donor_policy, &self.donor_policy);
        set(&mut s.sc_donor_policy, &self.sc_donor_policy);
        set(&mut s.hmc.chains, &self.chains);
        set(&mut s.hmc.iters, &self.iters);
        set(&mut s.hmc.warmup, &self.warmup);
        set(&mut s.dgp.seed_base, &seed);
        set(&mut s.hmc.seed, &seed);
        Ok(s)
    }
}
