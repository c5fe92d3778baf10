//! k-nearest-neighbour classification over raw feature vectors.
//!
//! Scores are vote fractions: the share of the k nearest training rows
//! belonging to each class. An optional inverse-distance weighting mode
//! replaces the uniform votes.

use serde::{Deserialize, Serialize};

use super::persist::{BinReader, BinWriter};
use super::Rows;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    /// Sum of absolute coordinate differences.
    #[default]
    L1,
    /// Euclidean distance.
    L2,
    /// Maximum absolute coordinate difference.
    Chebyshev,
}

/// Distance between two equal-length vectors under the given metric.
pub fn knn_distance(a: &[f32], b: &[f32], metric: KnnMetric) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match metric {
        KnnMetric::L1 => a
            .iter()
            .zip(b)
            .map(|(&p, &q)| (p as f64 - q as f64).abs())
            .sum(),
        KnnMetric::L2 => a
            .iter()
            .zip(b)
            .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
            .sum::<f64>()
            .sqrt(),
        KnnMetric::Chebyshev => a
            .iter()
            .zip(b)
            .map(|(&p, &q)| (p as f64 - q as f64).abs())
            .fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnState {
    pub n: usize,
    pub d: usize,
    /// Training features, row major.
    pub x: Vec<f32>,
    /// Training labels as class indices.
    pub y: Vec<u32>,
}

impl KnnState {
    pub(crate) fn fit(x: Rows<'_>, y: &[u32]) -> KnnState {
        KnnState { n: x.n, d: x.d, x: x.data.to_vec(), y: y.to_vec() }
    }

    /// Per-class vote fractions among the k nearest training rows. Distance
    /// ties break toward the lower training-row index, which keeps scoring
    /// deterministic.
    pub fn score(
        &self,
        row: &[f32],
        k: usize,
        metric: KnnMetric,
        distance_weighted: bool,
        n_classes: usize,
    ) -> Vec<f64> {
        let k = k.min(self.n);
        let mut dists: Vec<(f64, u32)> = (0..self.n)
            .map(|i| {
                let train = &self.x[i * self.d..(i + 1) * self.d];
                (knn_distance(row, train, metric), i as u32)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));

        let mut scores = vec![0.0f64; n_classes];
        let mut total = 0.0f64;
        for &(dist, idx) in &dists[..k] {
            let weight = if distance_weighted { 1.0 / (dist + 1e-12) } else { 1.0 };
            scores[self.y[idx as usize] as usize] += weight;
            total += weight;
        }
        for s in &mut scores {
            *s /= total;
        }
        scores
    }

    pub fn encode(&self, w: &mut BinWriter) {
        w.usize(self.n);
        w.usize(self.d);
        w.f32_slice(&self.x);
        w.u32_slice(&self.y);
    }

    pub fn decode(r: &mut BinReader) -> Result<KnnState> {
        Ok(KnnState { n: r.usize()?, d: r.usize()?, x: r.f32_vec()?, y: r.u32_vec()? })
    }
}
