//! Local Outlier Factor in novelty mode: fitted on normal points, queries
//! are scored against the fitted set only.
//!
//! Neighbor sets hold exactly `min_pts` points; ties in distance are broken
//! by index. Distances are brute force.

use serde::{Deserialize, Serialize};

use crate::datagen::Normalizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Chebyshev,
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            Metric::Chebyshev => diffs.fold(0.0, f64::max),
            Metric::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LofModel {
    points: Tensor,
    min_pts: usize,
    metric: Metric,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
    pub normalizer: Option<Normalizer>,
}

/// Indices and distances of the `k` nearest fitted points, nearest first.
fn nearest(points: &Tensor, metric: Metric, q: &[f64], k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = (0..points.rows())
        .filter(|&j| Some(j) != skip)
        .map(|j| (metric.distance(q, points.row(j)), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if d.len() > k {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d
}

/// `1 / mean reach-dist`; `+inf` when every neighbor coincides.
fn reachability_density(neighbors: &[(f64, usize)], k_distance: &[f64]) -> f64 {
    let total: f64 = neighbors.iter().map(|&(d, j)| d.max(k_distance[j])).sum();
    neighbors.len() as f64 / total
}

fn lof_ratio(neighbors: &[(f64, usize)], lrd: &[f64], own: f64) -> f64 {
    if own.is_infinite() {
        return 0.0;
    }
    let mean: f64 = neighbors.iter().map(|&(_, j)| lrd[j]).sum::<f64>() / neighbors.len() as f64;
    mean / own
}

impl LofModel {
    pub fn fit(points: Tensor, min_pts: usize, metric: Metric) -> Result<Self> {
        if points.shape().len() != 2 {
            return Err(Error::dim("lof_fit", points.shape(), &[0, 0]));
        }
        let n = points.rows();
        if min_pts == 0 || n <= min_pts {
            return Err(Error::contract(format!(
                "LOF needs more points ({n}) than min_pts ({min_pts}), and min_pts > 0"
            )));
        }
        let neighbors: Vec<Vec<(f64, usize)>> =
            (0..n).map(|i| nearest(&points, metric, points.row(i), min_pts, Some(i))).collect();
        let k_distance: Vec<f64> = neighbors.iter().map(|nb| nb[min_pts - 1].0).collect();
        let lrd = neighbors.iter().map(|nb| reachability_density(nb, &k_distance)).collect();
        Ok(Self {
            points,
            min_pts,
            metric,
            k_distance,
            lrd,
            normalizer: None,
        })
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn min_pts(&self) -> usize {
        self.min_pts
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn k_distance(&self) -> &[f64] {
        &self.k_distance
    }

    pub fn lrd(&self) -> &[f64] {
        &self.lrd
    }

    /// LOF of each fitted point against the others.
    pub fn fitted_scores(&self) -> Vec<f64> {
        (0..self.points.rows())
            .map(|i| {
                let nb = nearest(&self.points, self.metric, self.points.row(i), self.min_pts, Some(i));
                lof_ratio(&nb, &self.lrd, self.lrd[i])
            })
            .collect()
    }

    /// Novelty scores; about 1 for inliers, larger for outliers.
    pub fn score(&self, query: &Tensor) -> Result<Vec<f64>> {
        if query.is_empty() && query.shape().first() == Some(&0) {
            return Ok(Vec::new());
        }
        if query.shape().len() != 2 || query.cols() != self.dim() {
            return Err(Error::dim("lof_score", query.shape(), &[0, self.dim()]));
        }
        Ok((0..query.rows())
            .map(|i| {
                let nb = nearest(&self.points, self.metric, query.row(i), self.min_pts, None);
                let own = reachability_density(&nb, &self.k_distance);
                lof_ratio(&nb, &self.lrd, own)
            })
            .collect())
    }
}
