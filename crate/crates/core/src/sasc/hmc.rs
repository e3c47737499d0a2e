//! Fixed-length Hamiltonian Monte Carlo with a diagonal metric, dual-averaging
//! step size adaptation and windowed metric adaptation during warmup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density up to a constant; the gradient is written to `grad`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-2.0..2.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub chains: usize,
    /// Warmup iterations per chain, included in `iters`.
    pub warmup: usize,
    /// Total iterations per chain.
    pub iters: usize,
    pub steps: usize,
    pub target_accept: f64,
    /// Relative half-width of the uniform step size jitter, 0 to disable.
    pub jitter: f64,
    pub max_energy_error: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            chains: 4,
            warmup: 1000,
            iters: 5000,
            steps: 32,
            target_accept: 0.8,
            jitter: 0.1,
            max_energy_error: 1000.0,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 || self.steps < 1 || self.iters <= self.warmup {
            return Err(Error::InvalidConfig(format!(
                "need chains >= 1, steps >= 1 and iters > warmup (got {}, {}, {} <= {})",
                self.chains, self.steps, self.iters, self.warmup
            )));
        }
        if !(0.0..1.0).contains(&self.jitter) || !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidConfig("jitter must be in [0, 1) and target_accept in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    /// Post-warmup draws on the unconstrained scale.
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergences: usize,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub mean_accept: f64,
}

/// One trajectory of `steps` leapfrog steps. Returns the end point, its
/// gradient and log density; errors if the density becomes non-finite.
pub fn leapfrog<M: LogDensity + ?Sized>(
    model: &M,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    inv_metric: &[f64],
    steps: usize,
) -> Result<f64> {
    let mut lp = f64::NAN;
    for _ in 0..steps {
        for k in 0..q.len() {
            p[k] += 0.5 * eps * grad[k];
            q[k] += eps * inv_metric[k] * p[k];
        }
        lp = model.log_density_grad(q, grad)?;
        for k in 0..q.len() {
            p[k] += 0.5 * eps * grad[k];
        }
    }
    Ok(lp)
}

pub fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, delta: f64) -> Self {
        DualAveraging { mu: (10.0 * eps).ln(), s_bar: 0.0, x_bar: 0.0, counter: 0.0, delta }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let w = self.counter.powf(-Self::KAPPA);
        self.x_bar = w * x + (1.0 - w) * self.x_bar;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Ends (exclusive) of the slow metric adaptation windows, plus the start of
/// the first window.
fn adaptation_windows(warmup: usize) -> (usize, Vec<usize>) {
    if warmup < 20 {
        return (warmup, Vec::new());
    }
    let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
    if init + term + base > warmup {
        init = (0.15 * warmup as f64) as usize;
        term = (0.1 * warmup as f64) as usize;
        base = warmup - init - term;
    }
    let slow_end = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < slow_end {
        let mut end = start + size;
        // Extend the last window to the terminal buffer if the next would not fit.
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    (init, ends)
}

fn find_reasonable_step<M: LogDensity + ?Sized>(
    model: &M,
    q: &[f64],
    lp: f64,
    grad: &[f64],
    inv_metric: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut eps: f64 = 1.0;
    let trial = |eps: f64, rng: &mut ChaCha8Rng| -> f64 {
        let mut qq = q.to_vec();
        let mut gg = grad.to_vec();
        let mut p: Vec<f64> = inv_metric.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
        let h0 = -lp + kinetic(&p, inv_metric);
        match leapfrog(model, &mut qq, &mut p, &mut gg, eps, inv_metric, 1) {
            Ok(lp1) => {
                let dh = -lp1 + kinetic(&p, inv_metric) - h0;
                if dh.is_finite() { -dh } else { f64::NEG_INFINITY }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let log_half = 0.5f64.ln();
    let direction = if trial(eps, rng) > log_half { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let next = eps * 2f64.powf(direction);
        let crossed = if direction > 0.0 { trial(next, rng) <= log_half } else { trial(next, rng) > log_half };
        if crossed {
            return if direction > 0.0 { eps } else { next };
        }
        eps = next;
        if !(1e-12..=1e6).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-12, 1e6)
}

fn run_chain<M: LogDensity + ?Sized>(model: &M, cfg: &HmcConfig, chain: usize) -> Result<ChainDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let dim = model.dim();
    let mut grad = vec![0.0; dim];
    let mut q = Vec::new();
    let mut lp = f64::NAN;
    for _ in 0..100 {
        q = model.initial_point(&mut rng);
        if let Ok(v) = model.log_density_grad(&q, &mut grad) {
            lp = v;
            break;
        }
    }
    if !lp.is_finite() {
        return Err(Error::NonFiniteDensity);
    }

    let mut inv_metric = vec![1.0; dim];
    let mut eps = find_reasonable_step(model, &q, lp, &grad, &inv_metric, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let (slow_start, window_ends) = adaptation_windows(cfg.warmup);
    let mut window_idx = 0;
    let mut welford_n = 0.0f64;
    let mut welford_mean = vec![0.0; dim];
    let mut welford_m2 = vec![0.0; dim];

    let n_keep = cfg.iters - cfg.warmup;
    let mut out = ChainDraws {
        draws: Vec::with_capacity(n_keep),
        log_density: Vec::with_capacity(n_keep),
        divergences: 0,
        step_size: eps,
        inv_metric: inv_metric.clone(),
        mean_accept: 0.0,
    };
    let mut accept_sum = 0.0;

    let mut q_new = vec![0.0; dim];
    let mut g_new = vec![0.0; dim];
    let mut p = vec![0.0; dim];
    for it in 0..cfg.iters {
        let warming = it < cfg.warmup;
        let mut step = eps;
        if cfg.jitter > 0.0 {
            step *= 1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0);
        }
        for (pk, m) in p.iter_mut().zip(&inv_metric) {
            *pk = rng.sample::<f64, _>(StandardNormal) / m.sqrt();
        }
        let h0 = -lp + kinetic(&p, &inv_metric);
        q_new.copy_from_slice(&q);
        g_new.copy_from_slice(&grad);
        let result = leapfrog(model, &mut q_new, &mut p, &mut g_new, step, &inv_metric, cfg.steps);
        let (accept_prob, diverged, lp_new) = match result {
            Ok(lp1) => {
                let dh = -lp1 + kinetic(&p, &inv_metric) - h0;
                if !dh.is_finite() || dh > cfg.max_energy_error {
                    (0.0, true, lp1)
                } else {
                    ((-dh).exp().min(1.0), false, lp1)
                }
            }
            Err(_) => (0.0, true, f64::NAN),
        };
        let u: f64 = rng.random();
        if !diverged && u < accept_prob {
            q.copy_from_slice(&q_new);
            grad.copy_from_slice(&g_new);
            lp = lp_new;
        }

        if warming {
            eps = da.update(accept_prob);
            if window_idx < window_ends.len() && it >= slow_start {
                welford_n += 1.0;
                for k in 0..dim {
                    let delta = q[k] - welford_mean[k];
                    welford_mean[k] += delta / welford_n;
                    welford_m2[k] += delta * (q[k] - welford_mean[k]);
                }
                if it + 1 == window_ends[window_idx] {
                    let n = welford_n;
                    for k in 0..dim {
                        let var = if n > 1.0 { welford_m2[k] / (n - 1.0) } else { 1.0 };
                        inv_metric[k] = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
                    }
                    welford_n = 0.0;
                    welford_mean.iter_mut().for_each(|v| *v = 0.0);
                    welford_m2.iter_mut().for_each(|v| *v = 0.0);
                    window_idx += 1;
                    eps = find_reasonable_step(model, &q, lp, &grad, &inv_metric, &mut rng);
                    da = DualAveraging::new(eps, cfg.target_accept);
                }
            }
            if it + 1 == cfg.warmup {
                eps = da.final_step();
            }
        } else {
            if diverged {
                out.divergences += 1;
            }
            accept_sum += accept_prob;
            out.draws.push(q.clone());
            out.log_density.push(lp);
        }
    }
    out.step_size = eps;
    out.inv_metric = inv_metric;
    out.mean_accept = accept_sum / n_keep as f64;
    Ok(out)
}

/// Runs `cfg.chains` independent chains in parallel. Chain `c` uses stream `c`
/// of a ChaCha8 generator seeded with `cfg.seed`, so results do not depend on
/// the thread count.
pub fn sample<M: LogDensity + ?Sized>(model: &M, cfg: &HmcConfig) -> Result<Vec<ChainDraws>> {
    cfg.validate()?;
    (0..cfg.chains).into_par_iter().map(|c| run_chain(model, cfg, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent Gaussian with given means and standard deviations.
    struct Gauss {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Gauss {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
            let mut lp = 0.0;
            for k in 0..x.len() {
                let z = (x[k] - self.mean[k]) / self.sd[k];
                lp -= 0.5 * z * z;
                grad[k] = -z / self.sd[k];
            }
            Ok(lp)
        }
    }

    #[test]
    fn leapfrog_reversible() {
        let model = Gauss { mean: vec![1.0, -2.0, 0.5], sd: vec![1.0, 0.3, 2.0] };
        let metric = vec![1.0, 0.2, 3.0];
        let q0 = vec![0.3, -1.0, 2.0];
        let p0 = vec![0.5, -0.7, 0.1];
        let mut q = q0.clone();
        let mut p = p0.clone();
        let mut g = vec![0.0; 3];
        model.log_density_grad(&q, &mut g).unwrap();
        leapfrog(&model, &mut q, &mut p, &mut g, 0.1, &metric, 32).unwrap();
        p.iter_mut().for_each(|v| *v = -*v);
        leapfrog(&model, &mut q, &mut p, &mut g, 0.1, &metric, 32).unwrap();
        for k in 0..3 {
            assert!((q[k] - q0[k]).abs() < 1e-8);
            assert!((-p[k] - p0[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn energy_error_second_order() {
        let model = Gauss { mean: vec![0.0, 0.0], sd: vec![1.0, 0.5] };
        let metric = vec![1.0, 1.0];
        let total_time = 1.0;
        let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&eps| {
                let mut q = vec![1.0, 0.4];
                let mut p = vec![0.3, -0.8];
                let mut g = vec![0.0; 2];
                let lp0 = model.log_density_grad(&q, &mut g).unwrap();
                let h0 = -lp0 + kinetic(&p, &metric);
                let steps = (total_time / eps) as usize;
                let lp = leapfrog(&model, &mut q, &mut p, &mut g, eps, &metric, steps).unwrap();
                (-lp + kinetic(&p, &metric) - h0).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..5.5).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn window_schedule() {
        let (start, ends) = adaptation_windows(1000);
        assert_eq!(start, 75);
        assert_eq!(*ends.last().unwrap(), 950);
        assert_eq!(ends[0], 100);
        let (start, ends) = adaptation_windows(100);
        assert_eq!(start, 15);
        assert_eq!(ends, vec![90]);
    }

    #[test]
    fn gaussian_moments_and_determinism() {
        let model = Gauss { mean: vec![3.0, -1.0], sd: vec![0.5, 4.0] };
        let cfg = HmcConfig { chains: 4, warmup: 500, iters: 1500, steps: 16, seed: 7, ..HmcConfig::default() };
        let a = sample(&model, &cfg).unwrap();
        let b = sample(&model, &cfg).unwrap();
        assert_eq!(a, b);
        for k in 0..2 {
            let chains: Vec<Vec<f64>> = a.iter().map(|c| c.draws.iter().map(|d| d[k]).collect()).collect();
            let flat: Vec<f64> = chains.concat();
            let ess = crate::stats::ess(&chains);
            let mcse = model.sd[k] / ess.sqrt();
            let m = crate::stats::mean(&flat);
            assert!((m - model.mean[k]).abs() < 3.0 * mcse, "dim {k}: {m} (mcse {mcse})");
            let sd = crate::stats::variance(&flat).sqrt();
            assert!((sd / model.sd[k] - 1.0).abs() < 0.1);
        }
        assert!(a.iter().all(|c| c.divergences == 0));
    }
}
