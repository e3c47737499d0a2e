use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::hmc::{self, HmcConfig};
use super::model::{softmax_centered, Prior, SascData, SascModel, SascParams};
use crate::error::{Error, Result};
use crate::panel::Scale;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_rhat: f64,
    pub min_bulk_ess: f64,
    pub divergences: usize,
    pub draws: usize,
    pub step_sizes: Vec<f64>,
    pub degraded: bool,
}

impl Diagnostics {
    pub const MAX_RHAT: f64 = 1.05;
    pub const MIN_ESS: f64 = 100.0;
    pub const MAX_DIVERGENCE_RATE: f64 = 0.01;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub prior: Prior,
    pub seed: u64,
    /// `params[chain][draw]`.
    pub params: Vec<Vec<SascParams>>,
    /// Weights implied by each draw, same layout as `params`.
    pub omega: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Diagnostics,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Draws pooled across chains, in chain order.
    pub fn pooled(&self) -> impl Iterator<Item = (&SascParams, &Vec<f64>)> {
        self.params.iter().flatten().zip(self.omega.iter().flatten())
    }
}

/// Samples the posterior with HMC and computes convergence diagnostics on the
/// weights and the log scales.
pub fn sample_posterior(model: &SascModel, cfg: &HmcConfig) -> Result<PosteriorDraws> {
    if cfg.chains < 2 {
        return Err(Error::InvalidConfig("at least two chains are needed for diagnostics".into()));
    }
    let chains = hmc::sample(model, cfg)?;
    let params: Vec<Vec<SascParams>> = chains.iter().map(|c| c.draws.iter().map(|t| model.unpack(t)).collect()).collect();
    let omega: Vec<Vec<Vec<f64>>> = params.iter().map(|c| c.iter().map(|p| softmax_centered(&p.eta)).collect()).collect();

    let j = model.data.n_donors();
    let mut quantities: Vec<Vec<Vec<f64>>> = (0..j).map(|k| omega.iter().map(|c| c.iter().map(|w| w[k]).collect()).collect()).collect();
    quantities.push(params.iter().map(|c| c.iter().map(|p| p.sigma.ln()).collect()).collect());
    quantities.push(params.iter().map(|c| c.iter().map(|p| p.tau.ln()).collect()).collect());
    if model.prior == Prior::Spatial {
        quantities.push(params.iter().map(|c| c.iter().map(|p| p.varsigma.ln()).collect()).collect());
    }
    let mut max_rhat: f64 = 0.0;
    let mut min_ess = f64::INFINITY;
    for q in &quantities {
        let r = stats::split_rhat(q);
        let e = stats::bulk_ess(q);
        // Constant quantities (a weight pinned at zero) carry no information.
        if r.is_finite() {
            max_rhat = max_rhat.max(r);
        }
        if e.is_finite() {
            min_ess = min_ess.min(e);
        }
    }
    let divergences: usize = chains.iter().map(|c| c.divergences).sum();
    let draws: usize = chains.iter().map(|c| c.draws.len()).sum();
    let degraded = max_rhat > Diagnostics::MAX_RHAT
        || min_ess < Diagnostics::MIN_ESS
        || divergences as f64 > Diagnostics::MAX_DIVERGENCE_RATE * draws as f64;
    Ok(PosteriorDraws {
        prior: model.prior,
        seed: cfg.seed,
        params,
        omega,
        diagnostics: Diagnostics {
            max_rhat,
            min_bulk_ess: min_ess,
            divergences,
            draws,
            step_sizes: chains.iter().map(|c| c.step_size).collect(),
            degraded,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaySummary {
    /// `sum_j omega_bar_j Y_jt` with posterior mean weights.
    pub point: f64,
    /// Median of the predictive draws.
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SascFit {
    pub prior: Prior,
    pub omega_mean: Vec<f64>,
    pub sigma_mean: f64,
    pub pre: Vec<DaySummary>,
    pub post: Vec<DaySummary>,
    /// Predictive counterfactual draws for the post window, `[draw][day]`.
    #[serde(skip)]
    pub post_draws: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

fn summarize(point: &[f64], draws: &[Vec<f64>]) -> Vec<DaySummary> {
    (0..point.len())
        .map(|t| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[t]).collect();
            col.sort_by(f64::total_cmp);
            DaySummary {
                point: point[t],
                median: stats::quantile_sorted(&col, 0.5),
                lower: stats::quantile_sorted(&col, 0.025),
                upper: stats::quantile_sorted(&col, 0.975),
            }
        })
        .collect()
}

fn predictive_draws(
    donors: &DMatrix<f64>,
    draws: &PosteriorDraws,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    draws
        .pooled()
        .map(|(p, w)| {
            (0..donors.nrows())
                .map(|t| {
                    let mean: f64 = (0..w.len()).map(|j| w[j] * donors[(t, j)]).sum();
                    mean + p.sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect()
}

/// Posterior predictive counterfactuals for both windows. The predictive noise
/// uses a random stream separate from the sampler's, derived from its seed.
pub fn posterior_predictive(draws: &PosteriorDraws, data: &SascData) -> SascFit {
    let n = draws.n_draws().max(1) as f64;
    let j = data.n_donors();
    let mut omega_mean = vec![0.0; j];
    let mut sigma_mean = 0.0;
    for (p, w) in draws.pooled() {
        for k in 0..j {
            omega_mean[k] += w[k] / n;
        }
        sigma_mean += p.sigma / n;
    }
    let point = |donors: &DMatrix<f64>| -> Vec<f64> {
        (0..donors.nrows()).map(|t| (0..j).map(|k| omega_mean[k] * donors[(t, k)]).sum()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(draws.seed);
    rng.set_stream(u64::MAX);
    let pre_draws = predictive_draws(&data.donors_pre, draws, &mut rng);
    let post_draws = predictive_draws(&data.donors_post, draws, &mut rng);
    SascFit {
        prior: draws.prior,
        pre: summarize(&point(&data.donors_pre), &pre_draws),
        post: summarize(&point(&data.donors_post), &post_draws),
        omega_mean,
        sigma_mean,
        post_draws,
        diagnostics: draws.diagnostics.clone(),
    }
}

/// Samples and summarises in one call.
pub fn fit_sasc(data: &SascData, prior: Prior, cfg: &HmcConfig) -> Result<SascFit> {
    let model = SascModel::new(data.clone(), prior);
    let draws = sample_posterior(&model, cfg)?;
    Ok(posterior_predictive(&draws, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrSummary {
    /// Ratio using the point counterfactual.
    pub point: f64,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// Posterior standard deviation of log RR.
    pub log_sd: f64,
}

fn summarize_rr(point: f64, rr: &[f64]) -> RrSummary {
    let mut sorted = rr.to_vec();
    sorted.sort_by(f64::total_cmp);
    let logs: Vec<f64> = rr.iter().map(|v| v.ln()).collect();
    RrSummary {
        point,
        mean: stats::mean(rr),
        median: stats::quantile_sorted(&sorted, 0.5),
        lower: stats::quantile_sorted(&sorted, 0.025),
        upper: stats::quantile_sorted(&sorted, 0.975),
        log_sd: stats::variance(&logs).sqrt(),
    }
}

fn ratio(observed: &[f64], cf: &[f64], scale: Scale) -> Result<f64> {
    let rate = |v: f64| if scale.is_log() { v.exp() } else { v };
    let num: f64 = observed.iter().map(|v| rate(*v)).sum();
    let den: f64 = cf.iter().map(|v| rate(*v)).sum();
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::NonPositiveDenominator);
    }
    Ok(num / den)
}

/// Relative risk for one treated unit, per predictive draw.
pub fn rr_summary(fit: &SascFit, observed_post: &[f64], scale: Scale) -> Result<RrSummary> {
    aggregate_rrt(&[(fit, observed_post)], scale)
}

/// Mean over treated units of the per-unit relative risk, evaluated draw by
/// draw so the summary carries posterior uncertainty.
pub fn aggregate_rrt(fits: &[(&SascFit, &[f64])], scale: Scale) -> Result<RrSummary> {
    if fits.is_empty() {
        return Err(Error::DimensionMismatch("no fits to aggregate".into()));
    }
    let n_draws = fits[0].0.post_draws.len();
    for (fit, obs) in fits {
        if fit.post_draws.len() != n_draws || obs.len() != fit.post.len() {
            return Err(Error::DimensionMismatch("fits differ in draw count or window length".into()));
        }
    }
    let k = fits.len() as f64;
    let mut point = 0.0;
    for (fit, obs) in fits {
        let cf: Vec<f64> = fit.post.iter().map(|d| d.point).collect();
        point += ratio(obs, &cf, scale)? / k;
    }
    let mut rr = vec![0.0; n_draws];
    for (fit, obs) in fits {
        for (slot, draw) in rr.iter_mut().zip(&fit.post_draws) {
            *slot += ratio(obs, draw, scale)? / k;
        }
    }
    Ok(summarize_rr(point, &rr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sasc::model::DistanceScale;
    use nalgebra::DVector;

    fn fixed_draws(omega: Vec<f64>, sigma: f64, n: usize) -> PosteriorDraws {
        let params = SascParams { eta: omega.iter().map(|w| w.max(1e-300).ln()).collect(), sigma, tau: 1.0, varsigma: 1.0 };
        PosteriorDraws {
            prior: Prior::Spatial,
            seed: 1,
            params: vec![vec![params; n]; 2],
            omega: vec![vec![omega; n]; 2],
            diagnostics: Diagnostics { max_rhat: 1.0, min_bulk_ess: 1e3, divergences: 0, draws: 2 * n, step_sizes: vec![], degraded: false },
        }
    }

    fn toy_data() -> SascData {
        let pre = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.5, 2.5, 1.2, 2.2]);
        let post = DMatrix::from_row_slice(2, 2, &[1.1, 2.1, 1.3, 2.4]);
        SascData::new(DVector::from_vec(vec![1.0, 1.5, 1.2]), pre, post, &[10.0, 20.0], DistanceScale::Unit).unwrap()
    }

    #[test]
    fn degenerate_predictive_is_donor_series() {
        let data = toy_data();
        let fit = posterior_predictive(&fixed_draws(vec![1.0, 0.0], 1e-12, 50), &data);
        for (t, d) in fit.post.iter().enumerate() {
            let y = data.donors_post[(t, 0)];
            assert!((d.point - y).abs() < 1e-12 && (d.lower - y).abs() < 1e-9 && (d.upper - y).abs() < 1e-9);
        }
    }

    #[test]
    fn point_counterfactual_is_weighted_sum() {
        let data = toy_data();
        let mut draws = fixed_draws(vec![0.3, 0.7], 0.1, 20);
        draws.omega[1] = vec![vec![0.5, 0.5]; 20];
        let fit = posterior_predictive(&draws, &data);
        let w_bar = [0.4, 0.6];
        for t in 0..2 {
            let mut acc = 0.0;
            for j in 0..2 {
                acc += w_bar[j] * data.donors_post[(t, j)];
            }
            assert!((fit.post[t].point - acc).abs() < 1e-14);
            assert!(fit.post[t].lower <= fit.post[t].point && fit.post[t].point <= fit.post[t].upper);
        }
    }

    #[test]
    fn null_and_mean_rrt() {
        let data = toy_data();
        let fit = posterior_predictive(&fixed_draws(vec![0.5, 0.5], 1e-12, 10), &data);
        let obs: Vec<f64> = fit.post.iter().map(|d| d.point).collect();
        let s = rr_summary(&fit, &obs, Scale::LogRate).unwrap();
        assert!((s.point - 1.0).abs() < 1e-12 && (s.mean - 1.0).abs() < 1e-9);

        let obs_up: Vec<f64> = obs.iter().map(|v| v + 1.2f64.ln()).collect();
        let agg = aggregate_rrt(&[(&fit, &obs[..]), (&fit, &obs_up[..])], Scale::LogRate).unwrap();
        assert!((agg.point - 1.1).abs() < 1e-12);
    }
}
