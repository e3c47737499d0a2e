//! Donor pools for synthetic control fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::TreatmentMask;
use crate::geo::{SeparationMatrix, SpatialIndex};
use crate::panel::{EpisodeWindow, UnitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Units untreated throughout the window.
    Standard,
    /// Standard pool minus every unit inside the spillover buffer of any
    /// treated unit.
    SpatialBuffered,
}

/// Spillover buffer around treated units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Buffer {
    /// Exclude units within `s0` contiguity steps.
    Degrees(u32),
    /// Exclude units whose centroid lies within this many km.
    Km(f64),
}

/// Spatial structure the buffer predicate is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum Proximity<'a> {
    Separation(&'a SeparationMatrix),
    Distance(&'a SpatialIndex),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorPool {
    pub treated_unit: UnitId,
    pub window: EpisodeWindow,
    pub donors: Vec<UnitId>,
    pub kind: PoolKind,
    pub buffer: Option<Buffer>,
    /// Per donor: separation degree (`None` if unreachable) or km distance to
    /// the nearest treated unit, whichever the buffer uses.
    pub proximity: Vec<Option<f64>>,
}

impl DonorPool {
    pub fn len(&self) -> usize {
        self.donors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.donors.is_empty()
    }
}

/// Builds the donor pool for one episode.
///
/// `units` is the panel's unit order (the mask rows). Donors must be
/// untreated on every day of the pre and post window. For a buffered pool the
/// treated set is every unit treated on any day of the window, and donors are
/// ordered by increasing proximity measure (units just outside the buffer
/// first), ties by panel order. Standard pools keep panel order.
pub fn eligible_donors(
    units: &[UnitId],
    mask: &TreatmentMask,
    proximity: Option<Proximity<'_>>,
    window: &EpisodeWindow,
    buffer: Option<Buffer>,
    kind: PoolKind,
) -> Result<DonorPool> {
    let (n, t_len) = mask.shape();
    if units.len() != n {
        return Err(Error::DimensionMismatch(format!("{} units, mask has {n} rows", units.len())));
    }
    window.check_fits(t_len)?;
    let target = units
        .iter()
        .position(|u| *u == window.treated_unit)
        .ok_or_else(|| Error::UnknownUnit(window.treated_unit.to_string()))?;
    let span = window.pre_range().start..window.post_range().end;
    let mut treated = mask.treated_units(span.clone());
    if !treated.contains(&target) {
        treated.push(target);
    }
    let mut candidates: Vec<(usize, Option<f64>)> = (0..n)
        .filter(|&j| j != target && !mask.any_in(j, span.clone()))
        .map(|j| (j, None))
        .collect();

    if kind == PoolKind::SpatialBuffered {
        let (buffer, proximity) = match (buffer, proximity) {
            (Some(b), Some(p)) => (b, p),
            _ => return Err(Error::InvalidConfig("buffered pool needs a buffer and spatial structure".into())),
        };
        if matches!(
            (buffer, proximity),
            (Buffer::Degrees(_), Proximity::Distance(_)) | (Buffer::Km(_), Proximity::Separation(_))
        ) {
            return Err(Error::InvalidConfig("buffer kind does not match the spatial structure supplied".into()));
        }
        candidates = candidates
            .into_iter()
            .filter_map(|(j, _)| match (buffer, proximity) {
                (Buffer::Degrees(s0), Proximity::Separation(sep)) => {
                    let s = sep.min_to(j, &treated);
                    match s {
                        Some(s) if s <= s0 => None,
                        _ => Some((j, s.map(f64::from))),
                    }
                }
                (Buffer::Km(km), Proximity::Distance(index)) => {
                    let d = treated
                        .iter()
                        .map(|&i| index.distances()[(i, j)])
                        .fold(f64::INFINITY, f64::min);
                    (d > km).then_some((j, Some(d)))
                }
                _ => None,
            })
            .collect();
        candidates.sort_by(|a, b| {
            let key = |p: Option<f64>| p.unwrap_or(f64::INFINITY);
            key(a.1).total_cmp(&key(b.1)).then(a.0.cmp(&b.0))
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyPool(window.treated_unit.to_string()));
    }
    Ok(DonorPool {
        treated_unit: window.treated_unit.clone(),
        window: window.clone(),
        donors: candidates.iter().map(|(j, _)| units[*j].clone()).collect(),
        kind,
        buffer: (kind == PoolKind::SpatialBuffered).then_some(buffer).flatten(),
        proximity: candidates.iter().map(|(_, p)| *p).collect(),
    })
}

/// Per-unit covariate profiles, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub units: Vec<UnitId>,
    pub values: DMatrix<f64>,
}

impl CovariateTable {
    pub fn new(names: Vec<String>, units: Vec<UnitId>, values: DMatrix<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidConfig("covariate table needs at least one column".into()));
        }
        if values.shape() != (units.len(), names.len()) {
            return Err(Error::DimensionMismatch(format!(
                "covariates are {:?}, expected ({}, {})",
                values.shape(),
                units.len(),
                names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("covariates must be finite".into()));
        }
        Ok(CovariateTable { names, units, values })
    }

    pub fn row(&self, unit: &UnitId) -> Result<DVector<f64>> {
        let i = self
            .units
            .iter()
            .position(|u| u == unit)
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        Ok(self.values.row(i).transpose())
    }
}

/// Result of covariate screening.
#[derive(Debug, Clone, PartialEq)]
pub struct Screened {
    pub pool: DonorPool,
    /// Squared Mahalanobis distance of each retained donor.
    pub distances: Vec<f64>,
    /// Set when the pool held fewer than `k` donors and was returned whole.
    pub short_pool: bool,
}

/// Sample covariance of the donor covariates, ridge-regularised when it is
/// near-singular.
fn donor_precision(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, p) = x.shape();
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(m, p, |r, c| x[(r, c)] - mean[c]);
    let denom = (m.max(2) - 1) as f64;
    let mut cov = centered.transpose() * &centered / denom;
    let mean_diag = (cov.trace() / p as f64).max(f64::MIN_POSITIVE);
    let eig = cov.clone().symmetric_eigen();
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if lo <= 1e-10 * hi.max(f64::MIN_POSITIVE) {
        for i in 0..p {
            cov[(i, i)] += 1e-6 * mean_diag;
        }
    }
    cov.try_inverse().unwrap_or_else(|| DMatrix::identity(p, p) / mean_diag)
}

/// Keeps the `k` donors whose covariates are closest to the treated unit in
/// Mahalanobis distance under the pool's sample covariance.
///
/// Retained donors keep the pool's priority order. Ties in distance are
/// broken by unit id.
pub fn mahalanobis_screen(pool: &DonorPool, covariates: &CovariateTable, k: usize) -> Result<Screened> {
    if k == 0 {
        return Err(Error::InvalidConfig("screening size must be at least 1".into()));
    }
    let target = covariates.row(&pool.treated_unit)?;
    let p = target.len();
    let rows = pool.donors.iter().map(|d| covariates.row(d)).collect::<Result<Vec<_>>>()?;
    let x = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
    let precision = donor_precision(&x);
    let dist: Vec<f64> = rows
        .iter()
        .map(|r| {
            let d = r - &target;
            (d.transpose() * &precision * &d)[(0, 0)]
        })
        .collect();
    if pool.len() <= k {
        return Ok(Screened { pool: pool.clone(), distances: dist, short_pool: pool.len() < k });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then_with(|| pool.donors[a].cmp(&pool.donors[b])));
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    let mut out = pool.clone();
    out.donors = keep.iter().map(|&i| pool.donors[i].clone()).collect();
    out.proximity = keep.iter().map(|&i| pool.proximity[i]).collect();
    Ok(Screened { pool: out, distances: keep.iter().map(|&i| dist[i]).collect(), short_pool: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{degrees_of_separation, AdjacencyGraph, Centroid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<UnitId> {
        (0..n).map(|i| UnitId::new(format!("u{i}")).unwrap()).collect()
    }

    fn path_sep(n: usize) -> SeparationMatrix {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        degrees_of_separation(&AdjacencyGraph::from_edges(n, &edges).unwrap())
    }

    #[test]
    fn standard_pool_without_other_treatment() {
        let units = ids(5);
        let mut mask = TreatmentMask::empty(5, 30);
        mask.mark(0, 20, 3);
        let w = EpisodeWindow::new(units[0].clone(), 20, 20, 10).unwrap();
        let pool = eligible_donors(&units, &mask, None, &w, None, PoolKind::Standard).unwrap();
        assert_eq!(pool.donors, units[1..].to_vec());
    }

    #[test]
    fn buffered_pool_on_path() {
        let units = ids(4);
        let sep = path_sep(4);
        let mut mask = TreatmentMask::empty(4, 30);
        mask.mark(0, 20, 3);
        let w = EpisodeWindow::new(units[0].clone(), 20, 20, 10).unwrap();
        let pool = eligible_donors(
            &units,
            &mask,
            Some(Proximity::Separation(&sep)),
            &w,
            Some(Buffer::Degrees(1)),
            PoolKind::SpatialBuffered,
        )
        .unwrap();
        assert_eq!(pool.donors, vec![units[2].clone(), units[3].clone()]);
        assert_eq!(pool.proximity, vec![Some(2.0), Some(3.0)]);
    }

    #[test]
    fn treated_donor_in_window_is_excluded() {
        let units = ids(4);
        let mut mask = TreatmentMask::empty(4, 30);
        mask.mark(0, 20, 3);
        mask.mark(2, 5, 2);
        let w = EpisodeWindow::new(units[0].clone(), 20, 20, 10).unwrap();
        let pool = eligible_donors(&units, &mask, None, &w, None, PoolKind::Standard).unwrap();
        assert_eq!(pool.donors, vec![units[1].clone(), units[3].clone()]);
        let everyone = TreatmentMask::empty(1, 30);
        let single = EpisodeWindow::new(ids(1)[0].clone(), 20, 20, 10).unwrap();
        assert!(matches!(
            eligible_donors(&ids(1), &everyone, None, &single, None, PoolKind::Standard),
            Err(Error::EmptyPool(_))
        ));
    }

    #[test]
    fn km_buffer_excludes_close_units() {
        let units = ids(6);
        // Units spaced ~11 km apart along a meridian.
        let c: Vec<Centroid> = (0..6).map(|i| Centroid::new(40.0 + 0.1 * i as f64, -75.0).unwrap()).collect();
        let index = SpatialIndex::new(units.clone(), c).unwrap();
        let mut mask = TreatmentMask::empty(6, 80);
        mask.mark(0, 60, 3);
        let w = EpisodeWindow::new(units[0].clone(), 60, 60, 3).unwrap();
        let pool = eligible_donors(
            &units,
            &mask,
            Some(Proximity::Distance(&index)),
            &w,
            Some(Buffer::Km(20.0)),
            PoolKind::SpatialBuffered,
        )
        .unwrap();
        assert_eq!(pool.donors, units[2..].to_vec());
        for d in &pool.donors {
            let j = units.iter().position(|u| u == d).unwrap();
            assert!(index.distances()[(0, j)] > 20.0);
        }
    }

    fn covs(rows: &[[f64; 2]]) -> CovariateTable {
        let n = rows.len();
        CovariateTable::new(
            vec!["a".into(), "b".into()],
            ids(n),
            DMatrix::from_fn(n, 2, |r, c| rows[r][c]),
        )
        .unwrap()
    }

    fn pool_of(n: usize) -> DonorPool {
        let units = ids(n);
        DonorPool {
            treated_unit: units[0].clone(),
            window: EpisodeWindow::new(units[0].clone(), 5, 5, 1).unwrap(),
            donors: units[1..].to_vec(),
            kind: PoolKind::Standard,
            buffer: None,
            proximity: vec![None; n - 1],
        }
    }

    #[test]
    fn identical_covariates_are_kept() {
        let table = covs(&[[1.0, 2.0], [5.0, 1.0], [1.0, 2.0], [-3.0, 4.0], [2.0, 9.0], [0.0, -1.0]]);
        let s = mahalanobis_screen(&pool_of(6), &table, 1).unwrap();
        assert_eq!(s.pool.donors, vec![UnitId::new("u2").unwrap()]);
        assert!(s.distances[0].abs() < 1e-12);
    }

    #[test]
    fn screen_matches_direct_quadratic_form() {
        let table = covs(&[[0.3, -1.0], [1.0, 2.0], [2.5, 0.5], [-1.0, 1.5], [0.0, 0.0], [3.0, 3.0]]);
        let pool = pool_of(6);
        // Direct computation: sample covariance of donors, explicit inverse.
        let donors: Vec<[f64; 2]> = (1..6).map(|i| [table.values[(i, 0)], table.values[(i, 1)]]).collect();
        let m = [donors.iter().map(|d| d[0]).sum::<f64>() / 5.0, donors.iter().map(|d| d[1]).sum::<f64>() / 5.0];
        let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
        for d in &donors {
            s00 += (d[0] - m[0]).powi(2) / 4.0;
            s01 += (d[0] - m[0]) * (d[1] - m[1]) / 4.0;
            s11 += (d[1] - m[1]).powi(2) / 4.0;
        }
        let det = s00 * s11 - s01 * s01;
        let q = |d: [f64; 2]| {
            let (x, y) = (d[0] - 0.3, d[1] + 1.0);
            (s11 * x * x - 2.0 * s01 * x * y + s00 * y * y) / det
        };
        let mut ranked: Vec<usize> = (0..5).collect();
        ranked.sort_by(|&a, &b| q(donors[a]).total_cmp(&q(donors[b])));
        for k in 1..=5 {
            let mut want: Vec<UnitId> = ranked[..k].iter().map(|&i| pool.donors[i].clone()).collect();
            want.sort();
            let mut got = mahalanobis_screen(&pool, &table, k).unwrap().pool.donors;
            got.sort();
            assert_eq!(got, want, "k = {k}");
        }
        let s = mahalanobis_screen(&pool, &table, 20).unwrap();
        assert!(s.short_pool);
        assert_eq!(s.pool.donors.len(), 5);
    }

    proptest! {
        #[test]
        fn buffered_pools_nest(seed in 0u64..200, s0 in 0u32..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 15;
            let mut edges = Vec::new();
            for a in 0..n { for b in a + 1..n { if rng.random::<f64>() < 0.2 { edges.push((a, b)); } } }
            let sep = degrees_of_separation(&AdjacencyGraph::from_edges(n, &edges).unwrap());
            let units = ids(n);
            let mut mask = TreatmentMask::empty(n, 30);
            mask.mark(0, 20, 4);
            for i in 1..n { if rng.random::<f64>() < 0.15 { mask.mark(i, 21, 2); } }
            let w = EpisodeWindow::new(units[0].clone(), 20, 20, 10).unwrap();
            let std_pool = eligible_donors(&units, &mask, None, &w, None, PoolKind::Standard).ok();
            let pool = |s| eligible_donors(&units, &mask, Some(Proximity::Separation(&sep)), &w, Some(Buffer::Degrees(s)), PoolKind::SpatialBuffered)
                .map(|p| p.donors).unwrap_or_default();
            let (narrow, wide) = (pool(s0), pool(s0 + 1));
            prop_assert!(wide.iter().all(|d| narrow.contains(d)));
            if let Some(std_pool) = std_pool {
                prop_assert!(narrow.iter().all(|d| std_pool.donors.contains(d)));
            }
        }

        #[test]
        fn screen_is_affine_invariant(seed in 0u64..200, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let rows: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>() * 4.0, rng.random::<f64>() * 2.0 - 1.0]).collect();
            let a = [[rng.random::<f64>() + 0.5, rng.random::<f64>() - 0.5], [rng.random::<f64>() - 0.5, rng.random::<f64>() + 0.5]];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            prop_assume!(det.abs() > 0.1);
            let shift = [rng.random::<f64>() * 10.0, -rng.random::<f64>() * 10.0];
            let moved: Vec<[f64; 2]> = rows
                .iter()
                .map(|r| [a[0][0] * r[0] + a[0][1] * r[1] + shift[0], a[1][0] * r[0] + a[1][1] * r[1] + shift[1]])
                .collect();
            let pool = pool_of(n);
            let base = mahalanobis_screen(&pool, &covs(&rows), k).unwrap();
            let trans = mahalanobis_screen(&pool, &covs(&moved), k).unwrap();
            for (x, y) in base.distances.iter().zip(&trans.distances) {
                prop_assert!((x - y).abs() < 1e-6 * x.abs().max(1.0));
            }
            prop_assert_eq!(base.pool.donors, trans.pool.donors);
        }
    }
}
