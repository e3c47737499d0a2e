//! Scoring imputed counterfactuals against simulation ground truth, and
//! random-effects pooling of per-episode relative risks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::sasc::SascFit;
use crate::simgen::Scenario;
use crate::stats;

/// Method labels in reporting order.
pub const METHODS: [&str; 2] = ["SC", "SA-SC"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub method: String,
    pub abs_avg_bias: f64,
    pub rmse_pre: f64,
    /// Root mean squared prediction error over the post window.
    pub rmse_post: f64,
    pub coverage_prob: f64,
    pub avg_ci_length: f64,
    pub n_cases: usize,
}

/// One imputed path with its interval and the true untreated outcome, over a
/// window whose post part starts at `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedPath {
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub truth: Vec<f64>,
    pub t0: usize,
}

impl ImputedPath {
    /// Posterior medians as the point estimate.
    pub fn from_sasc(fit: &SascFit, truth: &[f64]) -> Self {
        let days = fit.pre.iter().chain(&fit.post);
        ImputedPath {
            point: days.clone().map(|d| d.median).collect(),
            lower: days.clone().map(|d| d.lower).collect(),
            upper: days.map(|d| d.upper).collect(),
            truth: truth.to_vec(),
            t0: fit.pre.len(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.truth.len();
        if self.point.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Misalignment(format!(
                "path has {} estimates, {} bounds and {} truth values",
                self.point.len(),
                self.lower.len().min(self.upper.len()),
                n
            )));
        }
        if self.t0 == 0 || self.t0 >= n {
            return Err(Error::Misalignment(format!("split {} leaves an empty window of {n} days", self.t0)));
        }
        Ok(())
    }
}

/// Scores a set of paths with equal window lengths.
///
/// Absolute bias is the mean over post days of the mean over paths of the
/// absolute error; coverage and interval length are averaged over post cells.
pub fn imputation_metrics(scenario: &str, method: &str, paths: &[ImputedPath]) -> Result<MetricsRow> {
    let first = paths.first().ok_or_else(|| Error::Misalignment("no paths to score".into()))?;
    for p in paths {
        p.check()?;
        if p.truth.len() != first.truth.len() || p.t0 != first.t0 {
            return Err(Error::Misalignment("paths have different window splits".into()));
        }
    }
    let (t0, len) = (first.t0, first.truth.len());
    let k = paths.len() as f64;
    let mut bias = 0.0;
    let mut sq_pre = 0.0;
    let mut sq_post = 0.0;
    let mut covered = 0usize;
    let mut width = 0.0;
    for p in paths {
        for t in 0..len {
            let e = p.point[t] - p.truth[t];
            if t < t0 {
                sq_pre += e * e;
            } else {
                sq_post += e * e;
                bias += e.abs();
                width += p.upper[t] - p.lower[t];
                if p.lower[t] <= p.truth[t] && p.truth[t] <= p.upper[t] {
                    covered += 1;
                }
            }
        }
    }
    let post_cells = k * (len - t0) as f64;
    Ok(MetricsRow {
        scenario: scenario.to_string(),
        method: method.to_string(),
        abs_avg_bias: bias / post_cells,
        rmse_pre: (sq_pre / (k * t0 as f64)).sqrt(),
        rmse_post: (sq_post / post_cells).sqrt(),
        coverage_prob: covered as f64 / post_cells,
        avg_ci_length: width / post_cells,
        n_cases: paths.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaInput {
    pub log_rr: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub k: usize,
    pub log_rr: f64,
    pub se: f64,
    pub rr: f64,
    pub lower: f64,
    pub upper: f64,
    pub tau2: f64,
    pub q: f64,
    pub knapp_hartung: bool,
}

/// DerSimonian–Laird random-effects pooling on the log scale with a 95%
/// interval, normal-theory unless `knapp_hartung` is set.
pub fn dl_meta(inputs: &[MetaInput], knapp_hartung: bool) -> Result<MetaResult> {
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("meta-analysis needs at least one study".into()));
    }
    if let Some(bad) = inputs.iter().find(|m| !(m.variance > 0.0) || !m.variance.is_finite() || !m.log_rr.is_finite()) {
        return Err(Error::InvalidConfig(format!("study variance must be positive and finite, got {:?}", bad)));
    }
    let k = inputs.len();
    let w: Vec<f64> = inputs.iter().map(|m| 1.0 / m.variance).collect();
    let sw: f64 = w.iter().sum();
    let fixed: f64 = inputs.iter().zip(&w).map(|(m, wi)| wi * m.log_rr).sum::<f64>() / sw;
    let q: f64 = inputs.iter().zip(&w).map(|(m, wi)| wi * (m.log_rr - fixed).powi(2)).sum();
    let c = sw - w.iter().map(|x| x * x).sum::<f64>() / sw;
    let tau2 = if k > 1 && c > 0.0 { ((q - (k - 1) as f64) / c).max(0.0) } else { 0.0 };
    let wr: Vec<f64> = inputs.iter().map(|m| 1.0 / (m.variance + tau2)).collect();
    let swr: f64 = wr.iter().sum();
    let pooled: f64 = inputs.iter().zip(&wr).map(|(m, wi)| wi * m.log_rr).sum::<f64>() / swr;
    let (se, crit) = if knapp_hartung && k > 1 {
        let s: f64 = inputs.iter().zip(&wr).map(|(m, wi)| wi * (m.log_rr - pooled).powi(2)).sum::<f64>();
        let se = (s / ((k - 1) as f64 * swr)).sqrt();
        let t = StudentsT::new(0.0, 1.0, (k - 1) as f64).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        (se, t.inverse_cdf(0.975))
    } else {
        ((1.0 / swr).sqrt(), stats::probit(0.975))
    };
    Ok(MetaResult {
        k,
        log_rr: pooled,
        se,
        rr: pooled.exp(),
        lower: (pooled - crit * se).exp(),
        upper: (pooled + crit * se).exp(),
        tau2,
        q,
        knapp_hartung: knapp_hartung && k > 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub rows: Vec<MetricsRow>,
    /// `scenario / method` cells of the grid with no row.
    pub missing: Vec<String>,
}

/// Orders rows as scenario-major, method-minor in the standard grid order;
/// rows outside the grid follow in input order.
pub fn scenario_report(rows: &[MetricsRow]) -> ScenarioReport {
    let mut ordered = Vec::new();
    let mut missing = Vec::new();
    let mut used = BTreeSet::new();
    for s in Scenario::all() {
        for m in METHODS {
            match rows.iter().position(|r| r.scenario == s.label() && r.method == m) {
                Some(i) => {
                    used.insert(i);
                    ordered.push(rows[i].clone());
                }
                None => missing.push(format!("{} / {m}", s.label())),
            }
        }
    }
    ordered.extend(rows.iter().enumerate().filter(|(i, _)| !used.contains(i)).map(|(_, r)| r.clone()));
    ScenarioReport { rows: ordered, missing }
}

impl ScenarioReport {
    pub fn complete(&self) -> Result<()> {
        if self.missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompleteGrid(self.missing.clone()))
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["scenario", "method", "abs_avg_bias", "rmse_pre", "rmse_post", "coverage_prob", "avg_ci_length", "n_cases"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table with three decimals.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<36} {:<6} {:>8} {:>8} {:>9} {:>9} {:>8}\n",
            "Scenario", "Method", "Bias", "RMSE pre", "RMSE post", "Coverage", "CI len"
        );
        for r in &self.rows {
            out += &format!(
                "{:<36} {:<6} {:>8.3} {:>8.3} {:>9.3} {:>9.3} {:>8.3}\n",
                r.scenario, r.method, r.abs_avg_bias, r.rmse_pre, r.rmse_post, r.coverage_prob, r.avg_ci_length
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(point: Vec<f64>, half: f64, truth: Vec<f64>, t0: usize) -> ImputedPath {
        ImputedPath {
            lower: point.iter().map(|p| p - half).collect(),
            upper: point.iter().map(|p| p + half).collect(),
            point,
            truth,
            t0,
        }
    }

    #[test]
    fn perfect_estimator() {
        let truth = vec![0.3, 0.1, 0.4, 0.2, 0.5];
        let m = imputation_metrics("s", "SC", &[path(truth.clone(), 0.0, truth, 3)]).unwrap();
        assert_eq!((m.abs_avg_bias, m.rmse_pre, m.rmse_post, m.coverage_prob, m.avg_ci_length), (0.0, 0.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn constant_offset() {
        let truth = vec![1.0, 2.0, 3.0, 4.0];
        let point: Vec<f64> = truth.iter().map(|v| v + 0.5).collect();
        let m = imputation_metrics("s", "SC", &[path(point, 0.2, truth, 2)]).unwrap();
        assert!((m.abs_avg_bias - 0.5).abs() < 1e-12);
        assert!((m.rmse_pre - 0.5).abs() < 1e-12 && (m.rmse_post - 0.5).abs() < 1e-12);
        assert_eq!(m.coverage_prob, 0.0);
        assert!((m.avg_ci_length - 0.4).abs() < 1e-12);
    }

    #[test]
    fn misaligned_inputs() {
        let a = path(vec![0.0; 4], 1.0, vec![0.0; 4], 2);
        let mut b = a.clone();
        b.truth.pop();
        assert!(matches!(imputation_metrics("s", "SC", &[b]), Err(Error::Misalignment(_))));
        let c = path(vec![0.0; 4], 1.0, vec![0.0; 4], 3);
        assert!(matches!(imputation_metrics("s", "SC", &[a, c]), Err(Error::Misalignment(_))));
        assert!(imputation_metrics("s", "SC", &[]).is_err());
    }

    #[test]
    fn single_study_returns_itself() {
        let m = dl_meta(&[MetaInput { log_rr: 0.1, variance: 0.0025 }], false).unwrap();
        assert_eq!(m.log_rr, 0.1);
        assert_eq!(m.tau2, 0.0);
        assert!((m.lower - (0.1 - 1.959963984540054 * 0.05f64).exp()).abs() < 1e-12);
        assert!(dl_meta(&[], false).is_err());
        assert!(dl_meta(&[MetaInput { log_rr: 0.1, variance: 0.0 }], false).is_err());
    }

    #[test]
    fn two_close_studies() {
        let (a, b, v) = (0.10, 0.12, 0.01);
        let m = dl_meta(&[MetaInput { log_rr: a, variance: v }, MetaInput { log_rr: b, variance: v }], false).unwrap();
        // Q = (a - b)^2 / (2v) = 0.02 <= 1.
        assert!((m.q - 0.02).abs() < 1e-12);
        assert_eq!(m.tau2, 0.0);
        assert!((m.log_rr - 0.11).abs() < 1e-12);
    }

    #[test]
    fn heterogeneous_studies_match_hand_computation() {
        let ys = [0.0, 0.5, 1.0];
        let vs = [0.01, 0.02, 0.04];
        let inputs: Vec<MetaInput> = ys.iter().zip(&vs).map(|(y, v)| MetaInput { log_rr: *y, variance: *v }).collect();
        let m = dl_meta(&inputs, false).unwrap();
        // w = 100, 50, 25; fixed = 50/175; Q and C by hand.
        let fixed: f64 = 50.0 / 175.0;
        let q = 100.0 * fixed * fixed + 50.0 * (0.5 - fixed).powi(2) + 25.0 * (1.0 - fixed).powi(2);
        let c = 175.0 - (10000.0 + 2500.0 + 625.0) / 175.0;
        let tau2 = (q - 2.0) / c;
        assert!((m.tau2 - tau2).abs() < 1e-12);
        let wr: Vec<f64> = vs.iter().map(|v| 1.0 / (v + tau2)).collect();
        let pooled = (wr[1] * 0.5 + wr[2]) / wr.iter().sum::<f64>();
        assert!((m.log_rr - pooled).abs() < 1e-12);
        let kh = dl_meta(&inputs, true).unwrap();
        assert_eq!(kh.log_rr, m.log_rr);
        assert!(kh.knapp_hartung);
        assert!(kh.upper / kh.lower > 1.0);
    }

    fn row(s: Scenario, m: &str) -> MetricsRow {
        MetricsRow {
            scenario: s.label().into(),
            method: m.into(),
            abs_avg_bias: 0.8,
            rmse_pre: 1.3,
            rmse_post: 1.4,
            coverage_prob: 0.93,
            avg_ci_length: 3.7,
            n_cases: 25,
        }
    }

    #[test]
    fn report_orders_full_grid() {
        let mut rows = Vec::new();
        for s in Scenario::all().iter().rev() {
            for m in ["SA-SC", "SC"] {
                rows.push(row(*s, m));
            }
        }
        let r = scenario_report(&rows);
        assert!(r.complete().is_ok());
        assert_eq!(r.rows.len(), 8);
        assert_eq!(r.rows[0].scenario, "No Spatial depend. - No spillover");
        assert_eq!(r.rows[0].method, "SC");
        assert_eq!(r.rows[7].scenario, "Spatial depend. - Spillover");
        assert_eq!(r.rows[7].method, "SA-SC");
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("scenario,method,abs_avg_bias,rmse_pre,rmse_post,coverage_prob,avg_ci_length"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn empty_report_is_incomplete() {
        let r = scenario_report(&[]);
        assert!(r.rows.is_empty());
        assert_eq!(r.missing.len(), 8);
        assert!(matches!(r.complete(), Err(Error::IncompleteGrid(m)) if m.len() == 8));
        assert_eq!(r.to_csv().unwrap().lines().count(), 1);
    }

    proptest! {
        #[test]
        fn rmse_bounds_mean_absolute_error(errs in prop::collection::vec(-5.0f64..5.0, 6..30)) {
            let n = errs.len();
            let truth = vec![0.0; n];
            let m = imputation_metrics("s", "SC", &[path(errs.clone(), 1.0, truth, n / 2)]).unwrap();
            prop_assert!(m.rmse_post + 1e-12 >= m.abs_avg_bias);
            let post = &errs[n / 2..];
            let mean_bias = (post.iter().sum::<f64>() / post.len() as f64).abs();
            prop_assert!(m.rmse_post + 1e-12 >= mean_bias);
            prop_assert!((0.0..=1.0).contains(&m.coverage_prob));
        }

        #[test]
        fn pooled_estimate_within_study_range(
            studies in prop::collection::vec((-1.0f64..1.0, 0.001f64..0.5), 1..12),
            kh in any::<bool>(),
        ) {
            let inputs: Vec<MetaInput> = studies.iter().map(|(y, v)| MetaInput { log_rr: *y, variance: *v }).collect();
            let m = dl_meta(&inputs, kh).unwrap();
            let lo = studies.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
            let hi = studies.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m.log_rr >= lo - 1e-12 && m.log_rr <= hi + 1e-12);
            prop_assert!(m.tau2 >= 0.0 && m.lower <= m.rr && m.rr <= m.upper);
        }
    }
}
