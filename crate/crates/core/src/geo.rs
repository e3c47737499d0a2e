//! Spatial structure shared by the estimator prior and the simulator.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::UnitId;

/// Mean Earth radius in km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub lat: f64,
    pub lon: f64,
}

impl Centroid {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidConfig(format!("centroid ({lat}, {lon}) out of range")));
        }
        Ok(Centroid { lat, lon })
    }
}

/// Great-circle distance in km.
pub fn haversine_km(a: Centroid, b: Centroid) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = p2 - p1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Unit centroids and their pairwise great-circle distances.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialIndex {
    units: Vec<UnitId>,
    centroids: Vec<Centroid>,
    dist: DMatrix<f64>,
}

impl SpatialIndex {
    pub fn new(units: Vec<UnitId>, centroids: Vec<Centroid>) -> Result<Self> {
        if units.len() != centroids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} units, {} centroids",
                units.len(),
                centroids.len()
            )));
        }
        let n = units.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { haversine_km(centroids[i], centroids[j]) }).collect())
            .collect();
        let dist = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Ok(SpatialIndex { units, centroids, dist })
    }

    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    pub fn centroids(&self) -> &[Centroid] {
        &self.centroids
    }

    pub fn distances(&self) -> &DMatrix<f64> {
        &self.dist
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Indices of the `k` nearest other units, nearest first (ties by index).
    pub fn nearest(&self, i: usize, k: usize) -> Vec<usize> {
        let mut others: Vec<usize> = (0..self.len()).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| self.dist[(i, a)].total_cmp(&self.dist[(i, b)]).then(a.cmp(&b)));
        others.truncate(k);
        others
    }

    /// Reorders the index to follow `order`, which must be a permutation of
    /// this index's unit ids.
    pub fn aligned_to(&self, order: &[UnitId]) -> Result<SpatialIndex> {
        let pos: HashMap<&UnitId, usize> = self.units.iter().enumerate().map(|(i, u)| (u, i)).collect();
        let idx = order
            .iter()
            .map(|u| pos.get(u).copied().ok_or_else(|| Error::UnknownUnit(u.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let centroids = idx.iter().map(|&i| self.centroids[i]).collect();
        Ok(SpatialIndex {
            units: order.to_vec(),
            centroids,
            dist: DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.dist[(idx[a], idx[b])]),
        })
    }
}

/// Row-stochastic spatial weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoWeightMatrix {
    w: DMatrix<f64>,
    pub k: usize,
    pub bandwidth_km: f64,
}

impl GeoWeightMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.nrows() == 0
    }

    /// Indices of units whose row is an island (self weight 1).
    pub fn islands(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.w[(i, i)] == 1.0).collect()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// k-nearest-neighbour exponential kernel weights.
///
/// Each unit links to its `k` nearest neighbours with weight
/// `exp(-d / c)`, where `c = bandwidth_factor * c0` and `c0` is the median
/// over units of each unit's median k-NN distance. The graph is
/// max-symmetrised, then row-standardised.
pub fn knn_kernel_weights(index: &SpatialIndex, k: usize, bandwidth_factor: f64) -> Result<GeoWeightMatrix> {
    let n = index.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidConfig(format!("k must be in 1..{n}, got {k}")));
    }
    if bandwidth_factor <= 0.0 {
        return Err(Error::InvalidConfig("bandwidth factor must be positive".into()));
    }
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| index.nearest(i, k)).collect();
    let mut per_unit: Vec<f64> = neighbours
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut d: Vec<f64> = nb.iter().map(|&j| index.dist[(i, j)]).collect();
            median(&mut d)
        })
        .collect();
    let c0 = median(&mut per_unit);
    if c0 <= 0.0 {
        return Err(Error::DegenerateGeometry("median nearest-neighbour distance is zero".into()));
    }
    let c = bandwidth_factor * c0;
    let mut raw = DMatrix::zeros(n, n);
    for (i, nb) in neighbours.iter().enumerate() {
        for &j in nb {
            raw[(i, j)] = (-index.dist[(i, j)] / c).exp();
        }
    }
    let sym = DMatrix::from_fn(n, n, |i, j| raw[(i, j)].max(raw[(j, i)]));
    let mut out = row_standardize(&sym)?;
    out.k = k;
    out.bandwidth_km = c;
    Ok(out)
}

/// Divides every row by its sum; an all-zero row becomes an island with
/// weight 1 on its own diagonal.
pub fn row_standardize(w: &DMatrix<f64>) -> Result<GeoWeightMatrix> {
    if !w.is_square() {
        return Err(Error::DimensionMismatch("weight matrix must be square".into()));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
    }
    let n = w.nrows();
    let mut out = w.clone();
    for i in 0..n {
        let s: f64 = w.row(i).sum();
        if s > 0.0 {
            for j in 0..n {
                out[(i, j)] = w[(i, j)] / s;
            }
        } else {
            out[(i, i)] = 1.0;
        }
    }
    Ok(GeoWeightMatrix { w: out, k: 0, bandwidth_km: 0.0 })
}

/// Undirected contiguity graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    neighbours: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Builds the graph from undirected index pairs; self-loops are rejected
    /// and repeated edges collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbours = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidConfig(format!("edge ({a}, {b}) out of range for {n} units")));
            }
            if a == b {
                return Err(Error::InvalidConfig(format!("self-loop on unit index {a}")));
            }
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
        for nb in &mut neighbours {
            nb.sort_unstable();
            nb.dedup();
        }
        Ok(AdjacencyGraph { neighbours })
    }

    /// Builds the graph from unit-id pairs resolved against `units`.
    pub fn from_unit_edges(units: &[UnitId], edges: &[(UnitId, UnitId)]) -> Result<Self> {
        let pos: HashMap<&UnitId, usize> = units.iter().enumerate().map(|(i, u)| (u, i)).collect();
        let find = |u: &UnitId| pos.get(u).copied().ok_or_else(|| Error::UnknownUnit(u.to_string()));
        let idx = edges
            .iter()
            .map(|(a, b)| Ok((find(a)?, find(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_edges(units.len(), &idx)
    }

    pub fn len(&self) -> usize {
        self.neighbours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbours.is_empty()
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbours[a].binary_search(&b).is_ok()
    }

    /// Dense binary contiguity matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, nb) in self.neighbours.iter().enumerate() {
            for &j in nb {
                m[(i, j)] = 1.0;
            }
        }
        m
    }

    /// Sorted edge list with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbours.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }
}

/// Contiguity-graph distance between every pair of units; `None` marks an
/// unreachable pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeparationMatrix {
    n: usize,
    s: Vec<Option<u32>>,
}

impl SeparationMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        self.s[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Smallest separation from `j` to any unit in `set`.
    pub fn min_to(&self, j: usize, set: &[usize]) -> Option<u32> {
        set.iter().filter_map(|&i| self.get(i, j)).min()
    }
}

fn bfs_row(adj: &AdjacencyGraph, src: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in adj.neighbours(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Breadth-first degrees of separation from every unit.
pub fn degrees_of_separation(adj: &AdjacencyGraph) -> SeparationMatrix {
    let n = adj.len();
    let rows: Vec<Vec<Option<u32>>> = (0..n).into_par_iter().map(|i| bfs_row(adj, i)).collect();
    SeparationMatrix { n, s: rows.into_iter().flatten().collect() }
}

/// Solves `(I - varpi W) x = nu`.
pub fn sar_smooth(w: &GeoWeightMatrix, varpi: f64, nu: &DVector<f64>) -> Result<DVector<f64>> {
    let n = w.len();
    if nu.len() != n {
        return Err(Error::DimensionMismatch(format!("nu has {} entries, W is {n}x{n}", nu.len())));
    }
    if !(varpi.abs() < 1.0) {
        return Err(Error::InvalidConfig(format!("|varpi| must be < 1, got {varpi}")));
    }
    if varpi == 0.0 {
        return Ok(nu.clone());
    }
    let a = DMatrix::identity(n, n) - w.matrix() * varpi;
    a.lu().solve(nu).ok_or(Error::SingularSystem)
}
