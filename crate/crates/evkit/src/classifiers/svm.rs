//! Linear one-vs-rest SVM with the squared hinge loss, trained by
//! deterministic full-batch gradient descent.
//!
//! The per-class objective is
//!   (1/n) Σ max(0, 1 − yᵢ(w·xᵢ + b))² + λ‖w‖²
//! with the bias unpenalized. The loss is convex with Lipschitz-continuous
//! gradient, so a constant step of 1/L (L bounded via the largest singular
//! value of the bias-augmented data matrix, found by power iteration)
//! descends monotonically. No randomness is involved anywhere, so training
//! is bitwise reproducible.

use rayon::prelude::*;

use super::persist::{BinReader, BinWriter};
use super::Rows;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmState {
    pub n_classes: usize,
    pub d: usize,
    /// Per-class weight vectors, row major (n_classes × d).
    pub w: Vec<f64>,
    /// Per-class biases.
    pub b: Vec<f64>,
}

impl SvmState {
    /// Per-class decision margins w_c·x + b_c (higher = more likely).
    pub fn score(&self, row: &[f32]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let w = &self.w[c * self.d..(c + 1) * self.d];
                let dot: f64 = w.iter().zip(row).map(|(&wj, &xj)| wj * xj as f64).sum();
                dot + self.b[c]
            })
            .collect()
    }

    pub fn encode(&self, w: &mut BinWriter) {
        w.usize(self.n_classes);
        w.usize(self.d);
        w.f64_slice(&self.w);
        w.f64_slice(&self.b);
    }

    pub fn decode(r: &mut BinReader) -> Result<SvmState> {
        Ok(SvmState {
            n_classes: r.usize()?,
            d: r.usize()?,
            w: r.f64_vec()?,
            b: r.f64_vec()?,
        })
    }
}

/// Largest eigenvalue of X̃ᵀX̃ where X̃ is `x` with a ones column appended,
/// estimated by power iteration without materializing the Gram matrix.
fn augmented_spectral_bound(x: Rows<'_>) -> f64 {
    let d1 = x.d + 1;
    let mut v = vec![1.0 / (d1 as f64).sqrt(); d1];
    let mut xv = vec![0.0f64; x.n];
    let mut next = vec![0.0f64; d1];
    let mut lambda = 0.0f64;
    for _ in 0..60 {
        for (i, out) in xv.iter_mut().enumerate() {
            let row = x.row(i);
            let mut acc = v[x.d]; // bias column is all ones
            for (j, &xj) in row.iter().enumerate() {
                acc += xj as f64 * v[j];
            }
            *out = acc;
        }
        next.iter_mut().for_each(|t| *t = 0.0);
        for (i, &u) in xv.iter().enumerate() {
            let row = x.row(i);
            for (j, &xj) in row.iter().enumerate() {
                next[j] += xj as f64 * u;
            }
            next[x.d] += u;
        }
        lambda = next.iter().map(|t| t * t).sum::<f64>().sqrt();
        if lambda <= 0.0 {
            return 0.0;
        }
        for (vj, &nj) in v.iter_mut().zip(next.iter()) {
            *vj = nj / lambda;
        }
    }
    lambda
}

fn fit_binary(x: Rows<'_>, sign: &[f64], iters: usize, lambda: f64, step: f64) -> (Vec<f64>, f64) {
    let n = x.n as f64;
    let mut w = vec![0.0f64; x.d];
    let mut b = 0.0f64;
    let mut grad_w = vec![0.0f64; x.d];
    for _ in 0..iters {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0f64;
        for i in 0..x.n {
            let row = x.row(i);
            let f: f64 =
                w.iter().zip(row).map(|(&wj, &xj)| wj * xj as f64).sum::<f64>() + b;
            let h = (1.0 - sign[i] * f).max(0.0);
            if h > 0.0 {
                let coeff = -2.0 * h * sign[i] / n;
                for (g, &xj) in grad_w.iter_mut().zip(row) {
                    *g += coeff * xj as f64;
                }
                grad_b += coeff;
            }
        }
        for (wj, &g) in w.iter_mut().zip(grad_w.iter()) {
            *wj -= step * (g + 2.0 * lambda * *wj);
        }
        b -= step * grad_b;
    }
    (w, b)
}

/// One-vs-rest squared-hinge SVM. `y` holds class indices below `n_classes`.
pub(crate) fn fit_svm(x: Rows<'_>, y: &[u32], n_classes: usize, iters: usize, lambda: f64) -> SvmState {
    let sigma = augmented_spectral_bound(x);
    // Gradient Lipschitz constant of the full objective.
    let lipschitz = 2.0 * sigma / x.n as f64 + 2.0 * lambda;
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let per_class: Vec<(Vec<f64>, f64)> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let sign: Vec<f64> =
                y.iter().map(|&yi| if yi as usize == c { 1.0 } else { -1.0 }).collect();
            fit_binary(x, &sign, iters, lambda, step)
        })
        .collect();

    let mut w = Vec::with_capacity(n_classes * x.d);
    let mut b = Vec::with_capacity(n_classes);
    for (wc, bc) in per_class {
        w.extend_from_slice(&wc);
        b.push(bc);
    }
    SvmState { n_classes, d: x.d, w, b }
}
