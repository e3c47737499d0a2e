use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hmc::LogDensity;
use crate::error::{Error, Result};

/// Softmax of the mean-centred logits. Invariant to adding a constant to `eta`.
pub fn softmax_centered(eta: &[f64]) -> Vec<f64> {
    if eta.is_empty() {
        return Vec::new();
    }
    // Subtracting the maximum gives the same result as subtracting the mean
    // and cannot overflow.
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceScale {
    Km,
    /// Divide by the largest donor distance so distances lie in [0, 1].
    #[default]
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Prior {
    /// `eta_j ~ N(-varsigma * d_j, tau^2)`.
    #[default]
    Spatial,
    /// `eta_j ~ N(0, tau^2)`, no distance information.
    NonSpatial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SascData {
    pub y_pre: DVector<f64>,
    /// `|T-| x J`.
    pub donors_pre: DMatrix<f64>,
    /// `|T+| x J`.
    pub donors_post: DMatrix<f64>,
    pub d: Vec<f64>,
}

impl SascData {
    pub fn new(
        y_pre: DVector<f64>,
        donors_pre: DMatrix<f64>,
        donors_post: DMatrix<f64>,
        distances_km: &[f64],
        scale: DistanceScale,
    ) -> Result<Self> {
        let j = donors_pre.ncols();
        if j < 2 {
            return Err(Error::DimensionMismatch(format!("need at least two donors, got {j}")));
        }
        if donors_post.ncols() != j || distances_km.len() != j {
            return Err(Error::DimensionMismatch(format!(
                "{j} pre donors, {} post donors, {} distances",
                donors_post.ncols(),
                distances_km.len()
            )));
        }
        if y_pre.len() != donors_pre.nrows() || y_pre.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "treated pre length {} vs donor pre length {}",
                y_pre.len(),
                donors_pre.nrows()
            )));
        }
        let finite = y_pre.iter().chain(donors_pre.iter()).chain(donors_post.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidPanel("non-finite outcome in fit data".into()));
        }
        if distances_km.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidPanel("distances must be finite and nonnegative".into()));
        }
        let d = match scale {
            DistanceScale::Km => distances_km.to_vec(),
            DistanceScale::Unit => {
                let max = distances_km.iter().copied().fold(0.0f64, f64::max);
                if max > 0.0 {
                    distances_km.iter().map(|v| v / max).collect()
                } else {
                    vec![0.0; j]
                }
            }
        };
        Ok(SascData { y_pre, donors_pre, donors_post, d })
    }

    pub fn n_donors(&self) -> usize {
        self.donors_pre.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SascParams {
    pub eta: Vec<f64>,
    pub sigma: f64,
    pub tau: f64,
    /// Zero under the non-spatial prior.
    pub varsigma: f64,
}

/// The posterior of one treated unit's weights over the unconstrained vector
/// `(z, log sigma, log tau[, log varsigma])`, where the logits are
/// `eta = -varsigma * d + tau * z` and `z` is standard normal a priori.
/// Sampling `z` instead of `eta` avoids the funnel between `eta` and `tau`.
#[derive(Debug, Clone)]
pub struct SascModel {
    pub data: SascData,
    pub prior: Prior,
}

impl SascModel {
    pub fn new(data: SascData, prior: Prior) -> Self {
        SascModel { data, prior }
    }

    /// The same data under the non-spatial weight prior.
    pub fn disable_spatial_prior(&self) -> Self {
        SascModel { data: self.data.clone(), prior: Prior::NonSpatial }
    }

    pub fn unpack(&self, theta: &[f64]) -> SascParams {
        let j = self.data.n_donors();
        let tau = theta[j + 1].exp();
        let varsigma = match self.prior {
            Prior::Spatial => theta[j + 2].exp(),
            Prior::NonSpatial => 0.0,
        };
        let eta = theta[..j].iter().zip(&self.data.d).map(|(z, d)| -varsigma * d + tau * z).collect();
        SascParams { eta, sigma: theta[j].exp(), tau, varsigma }
    }

    pub fn pack(&self, params: &SascParams) -> Vec<f64> {
        let mut theta: Vec<f64> =
            params.eta.iter().zip(&self.data.d).map(|(e, d)| (e + params.varsigma * d) / params.tau).collect();
        theta.push(params.sigma.ln());
        theta.push(params.tau.ln());
        if self.prior == Prior::Spatial {
            theta.push(params.varsigma.ln());
        }
        theta
    }

    /// Log joint density up to a constant, with its gradient written to `grad`.
    pub fn log_posterior(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        let data = &self.data;
        let j_len = data.n_donors();
        let t_len = data.y_pre.len();
        let spatial = self.prior == Prior::Spatial;
        let z = &theta[..j_len];
        let (log_sigma, log_tau) = (theta[j_len], theta[j_len + 1]);
        let log_vs = if spatial { theta[j_len + 2] } else { f64::NEG_INFINITY };
        let sigma2 = (2.0 * log_sigma).exp();
        let tau = log_tau.exp();
        let vs = log_vs.exp();

        let eta: Vec<f64> = z.iter().zip(&data.d).map(|(z, d)| -vs * d + tau * z).collect();
        let omega = softmax_centered(&eta);
        let mut r: Vec<f64> = data.y_pre.iter().copied().collect();
        for (j, w) in omega.iter().enumerate() {
            let col = data.donors_pre.column(j);
            for (rt, y) in r.iter_mut().zip(col.iter()) {
                *rt -= w * y;
            }
        }
        let rss: f64 = r.iter().map(|v| v * v).sum();
        let a: Vec<f64> = (0..j_len).map(|j| data.donors_pre.column(j).iter().zip(&r).map(|(y, rt)| y * rt).sum::<f64>() / sigma2).collect();
        let wa: f64 = omega.iter().zip(&a).map(|(w, a)| w * a).sum();
        // Likelihood gradient with respect to the logits.
        let g_eta: Vec<f64> = omega.iter().zip(&a).map(|(w, a)| w * (a - wa)).collect();
        let z2: f64 = z.iter().map(|v| v * v).sum();

        let mut lp = -(t_len as f64) * log_sigma - 0.5 * rss / sigma2 - 0.5 * z2;
        // Half-normal(0, 1) on each positive scale plus the log-Jacobian.
        lp += -0.5 * sigma2 + log_sigma;
        lp += -0.5 * tau * tau + log_tau;
        if spatial {
            lp += -0.5 * vs * vs + log_vs;
        }
        if !lp.is_finite() {
            return Err(Error::NonFiniteDensity);
        }

        for j in 0..j_len {
            grad[j] = tau * g_eta[j] - z[j];
        }
        grad[j_len] = -(t_len as f64) + rss / sigma2 - sigma2 + 1.0;
        let gz: f64 = g_eta.iter().zip(z).map(|(g, z)| g * z).sum();
        grad[j_len + 1] = tau * gz - tau * tau + 1.0;
        if spatial {
            let gd: f64 = g_eta.iter().zip(&data.d).map(|(g, d)| g * d).sum();
            grad[j_len + 2] = -vs * gd - vs * vs + 1.0;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteDensity);
        }
        Ok(lp)
    }
}

impl LogDensity for SascModel {
    fn dim(&self) -> usize {
        self.data.n_donors() + if self.prior == Prior::Spatial { 3 } else { 2 }
    }

    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.log_posterior(theta, grad)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let j = self.data.n_donors();
        let uniform = DVector::from_element(j, 1.0 / j as f64);
        let resid = &self.data.y_pre - &self.data.donors_pre * uniform;
        let rmse = (resid.norm_squared() / resid.len() as f64).sqrt().clamp(1e-3, 1e3);
        let mut theta: Vec<f64> = (0..j).map(|_| rng.random_range(-0.5..0.5)).collect();
        theta.push(rmse.ln() + rng.random_range(-0.5..0.5));
        theta.push(rng.random_range(-1.0..1.0));
        if self.prior == Prior::Spatial {
            theta.push(rng.random_range(-1.0..1.0));
        }
        theta
    }
}
