//! Sensor graph built from pairwise distances with a thresholded Gaussian kernel.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_matrix_csv, write_matrix_csv};
use crate::tensor::Tensor2D;

/// Default sparsity threshold for kernel weights.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    adjacency: Tensor2D,
    neighbors: Vec<Vec<usize>>,
    bandwidth: f64,
    threshold: f64,
}

impl SensorGraph {
    /// `A_ij = exp(-d_ij^2 / bandwidth^2)`, zeroed below `threshold`, diagonal forced to 1.
    pub fn from_distances(dist: &Tensor2D, bandwidth: f64, threshold: f64) -> Result<Self> {
        let n = dist.rows();
        if dist.cols() != n {
            return Err(Error::shape("build_gaussian_adjacency", format!("distance matrix is {n}x{}", dist.cols())));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::invalid(format!("bandwidth must be > 0, got {bandwidth}")));
        }
        if !(threshold >= 0.0) || threshold >= 1.0 {
            return Err(Error::invalid(format!("threshold must lie in [0, 1), got {threshold}")));
        }
        for i in 0..n {
            for j in 0..n {
                let d = dist[(i, j)];
                if !d.is_finite() {
                    return Err(Error::invalid(format!("distance ({i},{j}) is not finite")));
                }
                if d < 0.0 {
                    return Err(Error::invalid(format!("distance ({i},{j}) is negative: {d}")));
                }
            }
            if dist[(i, i)] != 0.0 {
                return Err(Error::invalid(format!("distance ({i},{i}) must be 0")));
            }
        }
        let bw2 = bandwidth * bandwidth;
        let adjacency = Tensor2D::from_fn(n, n, |i, j| {
            if i == j {
                return 1.0;
            }
            let w = (-dist[(i, j)].powi(2) / bw2).exp();
            if w >= threshold {
                w
            } else {
                0.0
            }
        });
        Ok(Self::assemble(adjacency, bandwidth, threshold))
    }

    /// Builds with the default bandwidth (std of off-diagonal distances) and threshold.
    pub fn from_distances_default(dist: &Tensor2D) -> Result<Self> {
        let bw = default_bandwidth(dist)?;
        Self::from_distances(dist, bw, DEFAULT_THRESHOLD)
    }

    /// Wraps an explicit adjacency matrix (e.g. one read from CSV).
    pub fn from_adjacency(adjacency: Tensor2D) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(Error::shape("adjacency", format!("matrix is {n}x{}", adjacency.cols())));
        }
        for i in 0..n {
            if adjacency[(i, i)] != 1.0 {
                return Err(Error::invalid(format!("adjacency diagonal ({i},{i}) must be 1")));
            }
            for j in 0..n {
                let w = adjacency[(i, j)];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::invalid(format!("adjacency ({i},{j}) = {w} outside [0, 1]")));
                }
            }
        }
        Ok(Self::assemble(adjacency, f64::NAN, f64::NAN))
    }

    fn assemble(adjacency: Tensor2D, bandwidth: f64, threshold: f64) -> Self {
        let n = adjacency.rows();
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && adjacency[(i, j)] > 0.0).collect())
            .collect();
        Self { adjacency, neighbors, bandwidth, threshold }
    }

    pub fn n(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &Tensor2D {
        &self.adjacency
    }

    /// NaN when the graph was loaded from an explicit adjacency.
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Sorted indices `j != i` with `A_ij > 0`.
    pub fn neighbor_set(&self, i: usize) -> Result<&[usize]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("node {i} out of range for {} nodes", self.n())))
    }

    /// Row-major N x N mask of `N(i) ∪ {i}`, the attention support.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.n();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
            for &j in &self.neighbors[i] {
                mask[i * n + j] = true;
            }
        }
        mask
    }

    /// `D^{-1/2} A D^{-1/2}` with `D` the weighted degree (self-loops included).
    pub fn normalized_adjacency(&self) -> Tensor2D {
        let n = self.n();
        let inv_sqrt: Vec<f64> =
            (0..n).map(|i| 1.0 / self.adjacency.row(i).iter().sum::<f64>().sqrt()).collect();
        Tensor2D::from_fn(n, n, |i, j| inv_sqrt[i] * self.adjacency[(i, j)] * inv_sqrt[j])
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        check_permutation(perm, n)?;
        let adjacency = Tensor2D::from_fn(n, n, |i, j| self.adjacency[(perm[i], perm[j])]);
        Ok(Self::assemble(adjacency, self.bandwidth, self.threshold))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, &self.adjacency)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_adjacency(read_matrix_csv(path)?)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Population standard deviation of the off-diagonal distances.
pub fn default_bandwidth(dist: &Tensor2D) -> Result<f64> {
    let n = dist.rows();
    let off: Vec<f64> =
        (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|ij| dist[ij]).collect();
    if off.is_empty() {
        return Err(Error::invalid("bandwidth needs at least two nodes"));
    }
    let mean = off.iter().sum::<f64>() / off.len() as f64;
    let var = off.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / off.len() as f64;
    let std = var.sqrt();
    if std > 0.0 {
        Ok(std)
    } else {
        // all pairs equidistant: fall back to that distance
        Ok(mean.max(1.0))
    }
}

/// Geodesic distances between `n` nodes evenly spaced on a ring with unit spacing.
pub fn ring_distances(n: usize) -> Tensor2D {
    Tensor2D::from_fn(n, n, |i, j| {
        let d = i.abs_diff(j);
        d.min(n - d) as f64
    })
}
