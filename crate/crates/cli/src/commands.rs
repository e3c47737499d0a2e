use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use heatsc::donor::{eligible_donors, mahalanobis_screen, Buffer, DonorPool, PoolKind, Proximity};
use heatsc::evalx::{dl_meta, imputation_metrics, scenario_report, ImputedPath, MetaInput, MetricsRow};
use heatsc::exposure::{detect_heatwaves, first_of_season, mask_from_episodes, HeatwaveDefinition, HeatwaveEpisode};
use heatsc::geo::{degrees_of_separation, SpatialIndex};
use heatsc::io::{self, TruthRow};
use heatsc::panel::{build_panel, log_transform_rates, slice_window, EpisodeWindow, Panel, Scale, Smoothing};
use heatsc::pipeline::run_pipeline;
use heatsc::sasc::{fit_sasc, rr_summary, Diagnostics, Prior, RrSummary, SascData};
use heatsc::sc::{fit_sc, relative_risk};
use heatsc::simgen::{run_replication, CellClass, HeatSource, Scenario};

use crate::manifest::write_manifest;
use crate::settings::{
    required, DetectArgs, DonorsArgs, EvaluateArgs, FitArgs, FitSettings, Method, PipelineArgs, PoolArgs, PoolSettings,
    SimulateArgs,
};
use crate::{log, CliError, GlobalArgs, LogLevel, Outcome};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn read_panel(path: &Path, scale: Scale) -> Result<Panel, CliError> {
    let records = io::read_panel_records(path)?;
    build_panel(&records, scale).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- detect

#[derive(Serialize)]
struct MaskRow {
    unit_id: String,
    date: NaiveDate,
}

pub fn detect(g: &GlobalArgs, a: &DetectArgs) -> Result<Outcome, CliError> {
    let s = a.resolve(g.config.as_deref())?;
    let panel_path = required(&s.panel, "panel")?.to_path_buf();
    let panel = read_panel(&panel_path, Scale::RawRate)?;
    let mut def = HeatwaveDefinition::new(s.percentile, s.min_duration, s.reference)?;
    def.season = s.season;
    let (mut episodes, _) = detect_heatwaves(&panel, &def)?;
    if s.first_of_season {
        let dates: Vec<NaiveDate> = (0..panel.n_times()).map(|t| panel.date(t)).collect();
        episodes = first_of_season(&episodes, &dates, &def.season);
    }
    let mask = mask_from_episodes(&panel, &episodes)?;
    create_dir(&a.out)?;
    io::write_episodes(&a.out.join("episodes.csv"), &panel, &episodes)?;
    let mut rows = Vec::with_capacity(mask.count());
    for (i, u) in panel.units().iter().enumerate() {
        for t in 0..panel.n_times() {
            if mask.get(i, t) {
                rows.push(MaskRow { unit_id: u.to_string(), date: panel.date(t) });
            }
        }
    }
    io::write_csv(&a.out.join("mask.csv"), &rows)?;
    log(LogLevel::Info, format!("{} episodes, {} treated unit-days", episodes.len(), mask.count()));
    let outputs = ["episodes.csv".to_string(), "mask.csv".to_string()];
    write_manifest(&a.out, "manifest.json", "detect", &s, &[panel_path], &outputs, vec![])?;
    Ok(Outcome::default())
}

// ---------------------------------------------------------------- donor pools

/// Inputs shared by `donors` and `fit`.
struct PoolInputs {
    panel: Panel,
    episodes: Vec<HeatwaveEpisode>,
    index: SpatialIndex,
    separation: Option<heatsc::geo::SeparationMatrix>,
    covariates: Option<heatsc::donor::CovariateTable>,
    files: Vec<PathBuf>,
}

fn pool_inputs(s: &PoolSettings, panel: Panel, panel_path: &Path) -> Result<PoolInputs, CliError> {
    let episodes_path = required(&s.episodes, "episodes")?;
    let centroids_path = required(&s.centroids, "centroids")?;
    let episodes = io::read_episodes(episodes_path, &panel)?;
    let index = io::read_centroids(centroids_path)?.aligned_to(panel.units())?;
    let mut files = vec![panel_path.to_path_buf(), episodes_path.to_path_buf(), centroids_path.to_path_buf()];
    let separation = match (s.s0, &s.adjacency) {
        (Some(_), None) => return Err(CliError::input("--s0 needs --adjacency")),
        (_, Some(p)) => {
            files.push(p.clone());
            Some(degrees_of_separation(&io::read_adjacency(p, panel.units())?))
        }
        (None, None) => None,
    };
    let covariates = match (s.screen_k, &s.covariates) {
        (Some(_), None) => return Err(CliError::input("--screen-k needs --covariates")),
        (_, Some(p)) => {
            files.push(p.clone());
            Some(io::read_covariates(p)?)
        }
        (None, None) => None,
    };
    if s.s0.is_some() && s.buffer_km.is_some() {
        return Err(CliError::input("choose one of s0 and buffer_km"));
    }
    Ok(PoolInputs { panel, episodes, index, separation, covariates, files })
}

/// Episodes selected by the unit filter, in file order.
fn selected<'a>(s: &PoolSettings, episodes: &'a [HeatwaveEpisode]) -> Vec<&'a HeatwaveEpisode> {
    episodes.iter().filter(|e| s.units.is_empty() || s.units.iter().any(|u| u == e.unit.as_str())).collect()
}

fn build_pool(s: &PoolSettings, inp: &PoolInputs, ep: &HeatwaveEpisode) -> heatsc::Result<(EpisodeWindow, DonorPool)> {
    let post = s.post.unwrap_or(ep.length);
    let window = EpisodeWindow::new(ep.unit.clone(), ep.start, s.pre, post)?;
    if ep.start < s.pre {
        return Err(heatsc::Error::WindowOutOfRange {
            start: ep.start as i64 - s.pre as i64,
            end: (ep.start + post) as i64,
            len: inp.panel.n_times(),
        });
    }
    let mask = mask_from_episodes(&inp.panel, &inp.episodes)?;
    let units = inp.panel.units();
    let pool = match (s.s0, s.buffer_km) {
        (Some(s0), _) => {
            let sep = inp.separation.as_ref().expect("checked when loading");
            eligible_donors(units, &mask, Some(Proximity::Separation(sep)), &window, Some(Buffer::Degrees(s0)), PoolKind::SpatialBuffered)?
        }
        (None, Some(km)) => eligible_donors(
            units,
            &mask,
            Some(Proximity::Distance(&inp.index)),
            &window,
            Some(Buffer::Km(km)),
            PoolKind::SpatialBuffered,
        )?,
        (None, None) => eligible_donors(units, &mask, None, &window, None, PoolKind::Standard)?,
    };
    let pool = match (s.screen_k, &inp.covariates) {
        (Some(k), Some(cov)) => {
            let screened = mahalanobis_screen(&pool, cov, k)?;
            if screened.short_pool {
                log(LogLevel::Warn, format!("pool for {} has fewer than {k} donors; keeping all", ep.unit));
            }
            screened.pool
        }
        _ => pool,
    };
    Ok((window, pool))
}

fn donor_distances(index: &SpatialIndex, unit: usize, donors: &[heatsc::panel::UnitId]) -> Vec<f64> {
    donors
        .iter()
        .map(|d| {
            let j = index.units().iter().position(|u| u == d).expect("index is aligned to the panel");
            index.distances()[(unit, j)]
        })
        .collect()
}

#[derive(Serialize)]
struct DonorEntry {
    unit_id: String,
    /// Separation degree or km to the nearest treated unit, as the buffer measures it.
    proximity: Option<f64>,
    distance_km: f64,
}

#[derive(Serialize)]
struct PoolReport {
    treated_unit: String,
    onset: NaiveDate,
    pre_len: usize,
    post_len: usize,
    kind: PoolKind,
    buffer: Option<Buffer>,
    donors: Vec<DonorEntry>,
}

#[derive(Serialize)]
struct Skipped {
    unit_id: String,
    onset: NaiveDate,
    reason: String,
}

#[derive(Serialize)]
struct PoolsFile {
    pools: Vec<PoolReport>,
    skipped: Vec<Skipped>,
}

pub fn donors(g: &GlobalArgs, a: &DonorsArgs) -> Result<Outcome, CliError> {
    let s = a.resolve(g.config.as_deref())?;
    let panel_path = required(&s.panel, "panel")?.to_path_buf();
    let inp = pool_inputs(&s, read_panel(&panel_path, Scale::RawRate)?, &panel_path)?;
    let mut out = PoolsFile { pools: Vec::new(), skipped: Vec::new() };
    for ep in selected(&s, &inp.episodes) {
        let onset = inp.panel.date(ep.start);
        match build_pool(&s, &inp, ep) {
            Ok((window, pool)) => {
                let ti = inp.panel.unit_index(&ep.unit)?;
                let dist = donor_distances(&inp.index, ti, &pool.donors);
                out.pools.push(PoolReport {
                    treated_unit: ep.unit.to_string(),
                    onset,
                    pre_len: window.pre_len,
                    post_len: window.post_len,
                    kind: pool.kind,
                    buffer: pool.buffer,
                    donors: pool
                        .donors
                        .iter()
                        .zip(&pool.proximity)
                        .zip(dist)
                        .map(|((d, p), km)| DonorEntry { unit_id: d.to_string(), proximity: *p, distance_km: km })
                        .collect(),
                });
            }
            Err(e) => out.skipped.push(Skipped { unit_id: ep.unit.to_string(), onset, reason: e.to_string() }),
        }
    }
    create_dir(&a.out)?;
    io::write_json(&a.out.join("pools.json"), &out)?;
    let notes = out.skipped.iter().map(|k| format!("skipped {} {}: {}", k.unit_id, k.onset, k.reason)).collect();
    write_manifest(&a.out, "manifest.json", "donors", &s, &inp.files, &["pools.json".to_string()], notes)?;
    Ok(Outcome::default())
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightEntry {
    pub unit_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDay {
    pub date: NaiveDate,
    pub observed: f64,
    /// Weighted donor sum with the (posterior mean) weights.
    pub point: f64,
    pub median: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// One episode's fit, as written by `fit` and read by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub method: Method,
    /// Panel file stem, used to find the matching truth file.
    pub source: String,
    pub unit_id: String,
    pub onset: NaiveDate,
    pub pre_len: usize,
    pub post_len: usize,
    pub weights: Vec<WeightEntry>,
    pub rmse_pre: f64,
    pub days: Vec<FitDay>,
    /// Absent when the ratio overflows.
    pub rr_point: Option<f64>,
    pub rr: Option<RrSummary>,
    pub diagnostics: Option<Diagnostics>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

fn episode_seed(base: u64, k: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(k as u64)
}

fn fit_episode(
    s: &FitSettings,
    inp: &PoolInputs,
    source: &str,
    k: usize,
    ep: &HeatwaveEpisode,
) -> heatsc::Result<FitArtifact> {
    let (window, pool) = build_pool(&s.pool, inp, ep)?;
    let panel = &inp.panel;
    let slice = slice_window(panel, &window, &pool.donors)?;
    let dates: Vec<NaiveDate> = window.pre_range().chain(window.post_range()).map(|t| panel.date(t)).collect();
    let observed: Vec<f64> = slice.treated_pre.iter().chain(slice.treated_post.iter()).copied().collect();
    let observed_post: Vec<f64> = slice.treated_post.iter().copied().collect();
    let base = FitArtifact {
        method: s.method,
        source: source.to_string(),
        unit_id: ep.unit.to_string(),
        onset: panel.date(ep.start),
        pre_len: window.pre_len,
        post_len: window.post_len,
        weights: Vec::new(),
        rmse_pre: 0.0,
        days: Vec::new(),
        rr_point: None,
        rr: None,
        diagnostics: None,
        seed: None,
        config: serde_json::to_value(s)?,
    };
    match s.method {
        Method::ScOls => {
            let fit = fit_sc(&slice.treated_pre, &slice.donors_pre, &slice.donors_post, 1e-10, 10_000)?;
            let cf: Vec<f64> = fit.counterfactual_pre.iter().chain(&fit.counterfactual_post).copied().collect();
            Ok(FitArtifact {
                weights: pool
                    .donors
                    .iter()
                    .zip(&fit.weights.w)
                    .filter(|(_, w)| **w > 1e-6)
                    .map(|(d, w)| WeightEntry { unit_id: d.to_string(), weight: *w })
                    .collect(),
                rmse_pre: fit.rmse_pre,
                days: dates
                    .iter()
                    .zip(&observed)
                    .zip(&cf)
                    .map(|((d, y), c)| FitDay { date: *d, observed: *y, point: *c, median: None, lower: None, upper: None })
                    .collect(),
                rr_point: Some(relative_risk(&observed_post, &fit.counterfactual_post, panel.scale())?).filter(|v| v.is_finite()),
                ..base
            })
        }
        Method::Sasc | Method::Bsc => {
            let ti = panel.unit_index(&ep.unit)?;
            let dist = donor_distances(&inp.index, ti, &pool.donors);
            let data = SascData::new(slice.treated_pre.clone(), slice.donors_pre, slice.donors_post, &dist, s.distance_scale)?;
            let prior = if s.method == Method::Sasc { Prior::Spatial } else { Prior::NonSpatial };
            let seed = episode_seed(s.hmc.seed, k);
            let fit = fit_sasc(&data, prior, &heatsc::sasc::HmcConfig { seed, ..s.hmc.clone() })?;
            let rr = rr_summary(&fit, &observed_post, panel.scale())?;
            let rmse_pre = (fit.pre.iter().zip(slice.treated_pre.iter()).map(|(d, y)| (d.point - y).powi(2)).sum::<f64>()
                / window.pre_len as f64)
                .sqrt();
            Ok(FitArtifact {
                weights: pool
                    .donors
                    .iter()
                    .zip(&fit.omega_mean)
                    .map(|(d, w)| WeightEntry { unit_id: d.to_string(), weight: *w })
                    .collect(),
                rmse_pre,
                days: dates
                    .iter()
                    .zip(&observed)
                    .zip(fit.pre.iter().chain(&fit.post))
                    .map(|((d, y), s)| FitDay {
                        date: *d,
                        observed: *y,
                        point: s.point,
                        median: Some(s.median),
                        lower: Some(s.lower),
                        upper: Some(s.upper),
                    })
                    .collect(),
                rr_point: Some(rr.point).filter(|v| v.is_finite()),
                rr: Some(rr).filter(|r| [r.point, r.lower, r.upper, r.log_sd].iter().all(|v| v.is_finite())),
                diagnostics: Some(fit.diagnostics.clone()),
                seed: Some(seed),
                ..base
            })
        }
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn fit(g: &GlobalArgs, a: &FitArgs) -> Result<Outcome, CliError> {
    let s = a.resolve(g.config.as_deref(), g.seed)?;
    s.hmc.validate()?;
    let panel_path = required(&s.pool.panel, "panel")?.to_path_buf();
    let panel = if s.log_transform {
        let raw = read_panel(&panel_path, Scale::RawRate)?;
        let smoothing = if s.smooth_all { Smoothing::All } else { Smoothing::ZerosOnly };
        log_transform_rates(&raw, s.window, smoothing)?
    } else {
        read_panel(&panel_path, s.scale)?
    };
    let inp = pool_inputs(&s.pool, panel, &panel_path)?;
    let source = file_stem(&panel_path);
    let episodes = selected(&s.pool, &inp.episodes);
    let results: Vec<heatsc::Result<FitArtifact>> =
        episodes.par_iter().enumerate().map(|(k, ep)| fit_episode(&s, &inp, &source, k, ep)).collect();

    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut notes = Vec::new();
    let mut degraded = false;
    for (ep, r) in episodes.iter().zip(results) {
        let onset = inp.panel.date(ep.start);
        match r {
            Ok(art) => {
                degraded |= art.diagnostics.as_ref().is_some_and(|d| d.degraded);
                let method = serde_json::to_value(art.method).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                let name = format!("fit_{method}_{}_{}.json", safe_name(&art.unit_id), onset);
                io::write_json(&a.out.join(&name), &art)?;
                outputs.push(name);
            }
            Err(e) => {
                log(LogLevel::Warn, format!("skipping {} {onset}: {e}", ep.unit));
                notes.push(format!("skipped {} {onset}: {e}", ep.unit));
            }
        }
    }
    log(LogLevel::Info, format!("{} fits written, {} skipped", outputs.len(), notes.len()));
    write_manifest(&a.out, "manifest.json", "fit", &s, &inp.files, &outputs, notes)?;
    Ok(Outcome { degraded })
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct ReplicationRow {
    rep: u64,
    seed: u64,
    year: i32,
    focal: String,
    onset: NaiveDate,
    n_treated: usize,
}

fn class_label(c: CellClass) -> &'static str {
    match c {
        CellClass::Clean => "clean",
        CellClass::Treated => "treated",
        CellClass::Spillover => "spillover",
    }
}

pub fn simulate(g: &GlobalArgs, a: &SimulateArgs) -> Result<Outcome, CliError> {
    let s = a.resolve(g.config.as_deref(), g.seed)?;
    let cfg = s.as_pipeline();
    cfg.validate()?;
    let geo = cfg.geography()?;
    let targets = cfg.target_rates(&geo);
    create_dir(&a.out)?;
    io::write_centroids(&a.out.join("centroids.csv"), &geo.index)?;
    io::write_adjacency(&a.out.join("adjacency.csv"), &geo.adjacency, geo.units())?;
    let source = HeatSource::Synthetic(cfg.heat.clone());
    let sims = (0..s.reps)
        .into_par_iter()
        .map(|jj| run_replication(&cfg.dgp, &geo, &source, Some(&targets), jj))
        .collect::<heatsc::Result<Vec<_>>>()?;

    let mut outputs = vec!["centroids.csv".to_string(), "adjacency.csv".to_string()];
    let mut log_rows = Vec::new();
    for sim in &sims {
        let stem = format!("rep_{:04}", sim.jj);
        let panel = &sim.panel;
        let units = panel.units();
        io::write_panel(&a.out.join(format!("{stem}_panel.csv")), panel)?;
        let mut truth = Vec::with_capacity(units.len() * panel.n_times());
        for (i, u) in units.iter().enumerate() {
            for t in 0..panel.n_times() {
                truth.push(TruthRow {
                    unit_id: u.to_string(),
                    date: panel.date(t),
                    y00: sim.y00[(i, t)],
                    tau: sim.tau[(i, t)],
                    psi: sim.psi[(i, t)],
                    class: class_label(sim.classes[(i, t)]).to_string(),
                });
            }
        }
        io::write_csv(&a.out.join(format!("{stem}_truth.csv")), &truth)?;
        let post = sim.post_range().len();
        let episodes: Vec<HeatwaveEpisode> =
            sim.treated.iter().map(|&i| HeatwaveEpisode { unit: units[i].clone(), start: sim.t0, length: post }).collect();
        io::write_episodes(&a.out.join(format!("{stem}_episodes.csv")), panel, &episodes)?;
        io::write_episodes(&a.out.join(format!("{stem}_focal.csv")), panel, &episodes[..1])?;
        for suffix in ["panel", "truth", "episodes", "focal"] {
            outputs.push(format!("{stem}_{suffix}.csv"));
        }
        log_rows.push(ReplicationRow {
            rep: sim.jj,
            seed: sim.seed,
            year: sim.year,
            focal: units[sim.focal].to_string(),
            onset: panel.date(sim.t0),
            n_treated: sim.treated.len(),
        });
    }
    io::write_csv(&a.out.join("replications.csv"), &log_rows)?;
    outputs.push("replications.csv".to_string());
    write_manifest(&a.out, "manifest.json", "simulate", &s, &[], &outputs, vec![])?;
    Ok(Outcome::default())
}

// ---------------------------------------------------------------- evaluate

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Sasc => "SA-SC",
        Method::Bsc => "SC",
        Method::ScOls => "SC-OLS",
    }
}

fn scenario_from_manifest(truth_dir: &Path) -> Option<String> {
    let v: serde_json::Value = io::read_json(&truth_dir.join("manifest.json")).ok()?;
    let code = v.get("config")?.get("scenario")?.as_str()?;
    Scenario::parse(code).ok().map(|s| s.label().to_string())
}

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> Result<Outcome, CliError> {
    let s = a.resolve(g.config.as_deref())?;
    let fits_dir = required(&s.fits, "fits")?;
    let truth_dir = required(&s.truth, "truth")?;
    let scenario = s.scenario.clone().or_else(|| scenario_from_manifest(truth_dir)).unwrap_or_else(|| "unspecified".into());
    let mut fit_files: Vec<PathBuf> = std::fs::read_dir(fits_dir)
        .map_err(|e| CliError::input(format!("{}: {e}", fits_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    fit_files.sort();
    if fit_files.is_empty() {
        return Err(CliError::input(format!("no fit files in {}", fits_dir.display())));
    }
    let mut truth_cache: HashMap<String, HashMap<String, Vec<(NaiveDate, f64)>>> = HashMap::new();
    let mut by_method: Vec<(Method, Vec<ImputedPath>)> = Vec::new();
    let mut inputs = Vec::new();
    for path in &fit_files {
        let art: FitArtifact = io::read_json(path)?;
        let key = art.source.strip_suffix("_panel").unwrap_or(&art.source).to_string();
        if !truth_cache.contains_key(&key) {
            let tp = truth_dir.join(format!("{key}_truth.csv"));
            let rows: Vec<TruthRow> = io::read_csv(&tp, &["unit_id", "date", "y00"])?;
            inputs.push(tp);
            truth_cache.insert(key.clone(), io::truth_by_unit(&rows));
        }
        let series = truth_cache[&key]
            .get(&art.unit_id)
            .ok_or_else(|| CliError::input(format!("{}: no truth for unit {}", path.display(), art.unit_id)))?;
        let truth = art
            .days
            .iter()
            .map(|d| {
                series
                    .binary_search_by_key(&d.date, |(date, _)| *date)
                    .map(|k| series[k].1)
                    .map_err(|_| CliError::input(format!("{}: no truth on {}", path.display(), d.date)))
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        let path_est = ImputedPath {
            point: art.days.iter().map(|d| d.median.unwrap_or(d.point)).collect(),
            lower: art.days.iter().map(|d| d.lower.unwrap_or(d.point)).collect(),
            upper: art.days.iter().map(|d| d.upper.unwrap_or(d.point)).collect(),
            truth,
            t0: art.pre_len,
        };
        match by_method.iter_mut().find(|(m, _)| *m == art.method) {
            Some((_, v)) => v.push(path_est),
            None => by_method.push((art.method, vec![path_est])),
        }
        inputs.push(path.clone());
    }
    let rows: Vec<MetricsRow> = by_method
        .iter()
        .map(|(m, paths)| imputation_metrics(&scenario, method_label(*m), paths))
        .collect::<heatsc::Result<_>>()?;
    let report = scenario_report(&rows);
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    write_text(&a.out, &report.to_csv()?)?;
    let name = a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_manifest(dir, &format!("{}.manifest.json", file_stem(&a.out)), "evaluate", &s, &inputs, &[name], vec![])?;
    print!("{}", report.to_text());
    Ok(Outcome::default())
}

// ---------------------------------------------------------------- pool

#[derive(Deserialize)]
struct MetaRow {
    log_rr: f64,
    variance: f64,
}

pub fn pool(g: &GlobalArgs, a: &PoolArgs) -> Result<Outcome, CliError> {
    let s = a.resolve(g.config.as_deref())?;
    let path = required(&s.inputs, "inputs")?.to_path_buf();
    let rows: Vec<MetaRow> = io::read_csv(&path, &["log_rr", "variance"])?;
    let inputs: Vec<MetaInput> = rows.iter().map(|r| MetaInput { log_rr: r.log_rr, variance: r.variance }).collect();
    let result = dl_meta(&inputs, s.knapp_hartung)?;
    match &a.out {
        Some(out) => {
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            create_dir(dir)?;
            io::write_json(out, &result)?;
            let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            write_manifest(dir, &format!("{}.manifest.json", file_stem(out)), "pool", &s, &[path], &[name], vec![])?;
        }
        None => println!("{}", serde_json::to_string_pretty(&result).map_err(|e| CliError::input(e.to_string()))?),
    }
    Ok(Outcome::default())
}

// ---------------------------------------------------------------- pipeline-sim

pub fn pipeline_sim(g: &GlobalArgs, a: &PipelineArgs) -> Result<Outcome, CliError> {
    let cfg = a.resolve(g.config.as_deref(), g.seed)?;
    log(LogLevel::Info, format!("{} scenarios x {} replications", cfg.scenarios.len(), cfg.reps));
    let out = run_pipeline(&cfg)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("table.csv"), &out.report.to_csv()?)?;
    write_text(&a.out.join("table.json"), &(out.report.to_json()? + "\n"))?;
    write_text(&a.out.join("table.txt"), &out.report.to_text())?;
    let logs: Vec<_> = out.replications.iter().map(|r| r.log.clone()).collect();
    io::write_csv(&a.out.join("replications.csv"), &logs)?;
    let degraded = logs.iter().filter(|l| l.sc_degraded || l.sasc_degraded).count();
    let notes = if degraded > 0 {
        vec![format!("{degraded} of {} replications have a fit failing convergence diagnostics", logs.len())]
    } else {
        vec![]
    };
    let outputs: Vec<String> = ["table.csv", "table.json", "table.txt", "replications.csv"].map(String::from).to_vec();
    write_manifest(&a.out, "manifest.json", "pipeline-sim", &cfg, &[], &outputs, notes)?;
    print!("{}", out.report.to_text());
    Ok(Outcome { degraded: degraded > 0 })
}
