//! Small numerical helpers shared by the sampler and the evaluation code.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Linear-interpolation quantile (R type 7) of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

/// Standard normal quantile function.
pub fn probit(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Splits every chain in half, dropping the middle draw of odd-length chains.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Potential scale reduction factor on split chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let n = split.first().map_or(0, Vec::len);
    if split.len() < 2 || n < 2 {
        return f64::NAN;
    }
    let (w, b) = within_between(&split);
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let nf = n as f64;
    (((nf - 1.0) / nf * w + b / nf) / w).sqrt()
}

/// Mean within-chain variance and `n` times the variance of chain means.
fn within_between(chains: &[Vec<f64>]) -> (f64, f64) {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    let b = n * variance(&means);
    (w, b)
}

/// Autocovariances at lags `0..max_lag` (biased, divisor `n`).
fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..max_lag.min(n))
        .map(|lag| centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.first().map_or(0, Vec::len);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let (w, b) = within_between(chains);
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    // Autocovariances are computed in blocks so well-mixing chains stay cheap.
    let mut max_lag = 64.min(n);
    loop {
        let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c, max_lag)).collect();
        let rho = |t: usize| {
            let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
            1.0 - (w * (nf - 1.0) / nf - mean_acov) / var_plus
        };
        let mut sum = 0.0;
        let mut prev = f64::INFINITY;
        let mut k = 0;
        let mut done = false;
        while 2 * k + 1 < max_lag {
            let pair = rho(2 * k) + rho(2 * k + 1);
            if pair < 0.0 {
                done = true;
                break;
            }
            let pair = pair.min(prev);
            sum += pair;
            prev = pair;
            k += 1;
        }
        if done || max_lag >= n {
            let tau = (-1.0 + 2.0 * sum).max(1.0 / (m as f64 * nf).log10());
            return m as f64 * nf / tau;
        }
        max_lag = (max_lag * 4).min(n);
    }
}

/// Bulk ESS: ESS of the rank-normalised split chains.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.is_empty() || split[0].len() < 4 {
        return f64::NAN;
    }
    let total: usize = split.iter().map(Vec::len).sum();
    let mut flat: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (c, chain) in split.iter().enumerate() {
        for (i, v) in chain.iter().enumerate() {
            flat.push((*v, c, i));
        }
    }
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut z: Vec<Vec<f64>> = split.iter().map(|c| vec![0.0; c.len()]).collect();
    // Average ranks over ties.
    let mut i = 0;
    while i < flat.len() {
        let mut j = i;
        while j + 1 < flat.len() && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let score = probit((rank - 0.375) / (total as f64 + 0.25));
        for item in &flat[i..=j] {
            z[item.1][item.2] = score;
        }
        i = j + 1;
    }
    ess(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn quantiles_type7() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&x, 0.5), 2.5);
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert!((quantile(&x, 0.25) - 1.75).abs() < 1e-15);
        assert_eq!(variance(&x), 5.0 / 3.0);
    }

    #[test]
    fn probit_roundtrip() {
        for p in [0.001, 0.025, 0.5, 0.9, 0.975] {
            assert!((normal_cdf(probit(p)) - p).abs() < 1e-10);
        }
        assert!((probit(0.975) - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn iid_chains_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..1000).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let r = split_rhat(&chains);
        assert!((r - 1.0).abs() < 0.01, "{r}");
        let e = bulk_ess(&chains);
        assert!(e > 3000.0 && e < 5500.0, "{e}");
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // For AR(1) with coefficient phi, n * (1 - phi) / (1 + phi).
        let phi: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        x = phi * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let expect = 20000.0 * (1.0 - phi) / (1.0 + phi);
        let got = ess(&chains);
        assert!((got / expect - 1.0).abs() < 0.25, "{got} vs {expect}");
    }

    #[test]
    fn stuck_chains_flagged() {
        let chains = vec![vec![0.0; 100], (0..100).map(|v| 5.0 + (v as f64).sin()).collect()];
        assert!(split_rhat(&chains) > 1.05);
    }
}
