//! Classical synthetic control: simplex-constrained least squares on the
//! pre-period, counterfactual imputation and relative risks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::Scale;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScWeights {
    pub w: Vec<f64>,
    /// Pre-period sum of squared errors.
    pub objective: f64,
    /// Frank–Wolfe duality gap at `w`; bounds the distance to the optimum.
    pub gap: f64,
    /// Objective after each major iteration.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScFit {
    pub weights: ScWeights,
    pub counterfactual_pre: Vec<f64>,
    pub counterfactual_post: Vec<f64>,
    pub rmse_pre: f64,
}

/// Minimises `||y - X w||^2` over the probability simplex.
///
/// With `sum(w) = 1` the residual is `sum_j w_j (x_j - y)`, so the problem is
/// the minimum-norm point of the convex hull of the shifted donor columns.
/// It is solved exactly with Wolfe's corral algorithm (a fully corrective
/// Frank–Wolfe method). The uniform vector is returned when it is already
/// optimal, which makes degenerate problems (identical donors) resolve to
/// equal weights; otherwise the search starts from the best single donor,
/// lowest index first.
pub fn fit_sc_weights(treated_pre: &DVector<f64>, donors_pre: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<ScWeights> {
    let (t_len, j_len) = donors_pre.shape();
    if j_len == 0 || t_len == 0 {
        return Err(Error::DimensionMismatch("need at least one donor and one pre period".into()));
    }
    if treated_pre.len() != t_len {
        return Err(Error::DimensionMismatch(format!(
            "treated series has {} periods, donors have {t_len}",
            treated_pre.len()
        )));
    }
    let q = DMatrix::from_fn(t_len, j_len, |t, j| donors_pre[(t, j)] - treated_pre[t]);
    let scale = (0..j_len).map(|j| q.column(j).norm_squared()).fold(0.0f64, f64::max).max(1e-300);
    let abs_tol = tol * scale;
    let gap_at = |z: &DVector<f64>| {
        let zz = z.norm_squared();
        let lo = (0..j_len).map(|j| q.column(j).dot(z)).fold(f64::INFINITY, f64::min);
        2.0 * (zz - lo)
    };

    let uniform = DVector::from_element(j_len, 1.0 / j_len as f64);
    let z_uniform = &q * &uniform;
    let g_uniform = gap_at(&z_uniform);
    if g_uniform <= abs_tol {
        return Ok(ScWeights {
            w: uniform.iter().copied().collect(),
            objective: z_uniform.norm_squared(),
            gap: g_uniform.max(0.0),
            trace: vec![z_uniform.norm_squared()],
        });
    }

    let start = (0..j_len)
        .min_by(|&a, &b| q.column(a).norm_squared().total_cmp(&q.column(b).norm_squared()).then(a.cmp(&b)))
        .unwrap_or(0);
    let mut corral: Vec<usize> = vec![start];
    let mut lambda: Vec<f64> = vec![1.0];
    let point = |corral: &[usize], lambda: &[f64]| {
        let mut z = DVector::zeros(t_len);
        for (&j, &l) in corral.iter().zip(lambda) {
            z.axpy(l, &q.column(j), 1.0);
        }
        z
    };
    let mut z = point(&corral, &lambda);
    let mut trace = vec![z.norm_squared()];
    let mut gap = gap_at(&z);

    for _ in 0..max_iter {
        if gap <= abs_tol {
            break;
        }
        let zz = z.norm_squared();
        let entering = (0..j_len)
            .min_by(|&a, &b| q.column(a).dot(&z).total_cmp(&q.column(b).dot(&z)).then(a.cmp(&b)))
            .unwrap_or(0);
        if corral.contains(&entering) || zz - q.column(entering).dot(&z) <= 1e-15 * scale {
            break;
        }
        corral.push(entering);
        lambda.push(0.0);

        // Minor cycles: move toward the affine minimiser of the corral,
        // dropping points whose coefficients would turn nonpositive.
        loop {
            let alpha = affine_minimizer(&q, &corral);
            if alpha.iter().all(|a| *a > 1e-14) {
                lambda = alpha;
                break;
            }
            let theta = corral
                .iter()
                .enumerate()
                .filter(|&(k, _)| alpha[k] <= 1e-14)
                .map(|(k, _)| lambda[k] / (lambda[k] - alpha[k]))
                .fold(1.0f64, f64::min)
                .clamp(0.0, 1.0);
            for k in 0..corral.len() {
                lambda[k] = theta * alpha[k] + (1.0 - theta) * lambda[k];
            }
            let keep: Vec<bool> = lambda.iter().map(|l| *l > 1e-14).collect();
            let mut k = 0;
            corral.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            let mut k = 0;
            lambda.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            let s: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= s);
            if corral.len() == 1 {
                lambda = vec![1.0];
                break;
            }
        }
        let z_new = point(&corral, &lambda);
        // Wolfe's iterates decrease strictly in exact arithmetic; guard
        // against rounding by keeping the better point.
        if z_new.norm_squared() > z.norm_squared() {
            break;
        }
        z = z_new;
        trace.push(z.norm_squared());
        gap = gap_at(&z);
    }

    let mut w = vec![0.0; j_len];
    for (&j, &l) in corral.iter().zip(&lambda) {
        w[j] = l;
    }
    let result = ScWeights { w, objective: z.norm_squared(), gap: gap.max(0.0), trace };
    if gap > abs_tol {
        return Err(Error::NonConvergence { best: Box::new(result) });
    }
    Ok(result)
}

/// Coefficients (summing to one) of the minimum-norm point of the affine hull
/// of the corral columns.
fn affine_minimizer(q: &DMatrix<f64>, corral: &[usize]) -> Vec<f64> {
    let m = corral.len();
    let mut a = DMatrix::zeros(m + 1, m + 1);
    for (r, &i) in corral.iter().enumerate() {
        for (c, &j) in corral.iter().enumerate() {
            a[(r, c)] = q.column(i).dot(&q.column(j));
        }
        a[(r, m)] = 1.0;
        a[(m, r)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let solved = a.clone().lu().solve(&rhs).filter(|x| x.iter().all(|v| v.is_finite()));
    let x = solved.unwrap_or_else(|| {
        // Affinely dependent corral under rounding: regularise the Gram block.
        let ridge = 1e-12 * (0..m).map(|k| a[(k, k)]).fold(1.0f64, f64::max);
        for k in 0..m {
            a[(k, k)] += ridge;
        }
        a.lu().solve(&rhs).unwrap_or_else(|| {
            let mut v = DVector::from_element(m + 1, 1.0 / m as f64);
            v[m] = 0.0;
            v
        })
    });
    x.rows(0, m).iter().copied().collect()
}

/// `donors_post * w`, one value per post day.
pub fn impute_counterfactual(weights: &ScWeights, donors_post: &DMatrix<f64>) -> Result<Vec<f64>> {
    if donors_post.ncols() != weights.w.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} donors",
            weights.w.len(),
            donors_post.ncols()
        )));
    }
    let w = DVector::from_column_slice(&weights.w);
    Ok((donors_post * w).iter().copied().collect())
}

/// Fits weights on the pre-period and imputes both windows.
pub fn fit_sc(
    treated_pre: &DVector<f64>,
    donors_pre: &DMatrix<f64>,
    donors_post: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ScFit> {
    let weights = fit_sc_weights(treated_pre, donors_pre, tol, max_iter)?;
    let counterfactual_pre = impute_counterfactual(&weights, donors_pre)?;
    let counterfactual_post = impute_counterfactual(&weights, donors_post)?;
    let rmse_pre = (weights.objective / treated_pre.len() as f64).sqrt();
    Ok(ScFit { weights, counterfactual_pre, counterfactual_post, rmse_pre })
}

/// Ratio of summed observed to summed counterfactual rates over the post
/// window; log-scale series are exponentiated first.
pub fn relative_risk(observed_post: &[f64], counterfactual_post: &[f64], scale: Scale) -> Result<f64> {
    if observed_post.len() != counterfactual_post.len() || observed_post.is_empty() {
        return Err(Error::DimensionMismatch("observed and counterfactual windows differ".into()));
    }
    let rate = |v: f64| if scale.is_log() { v.exp() } else { v };
    let num: f64 = observed_post.iter().map(|v| rate(*v)).sum();
    let den: f64 = counterfactual_post.iter().map(|v| rate(*v)).sum();
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::NonPositiveDenominator);
    }
    Ok(num / den)
}
