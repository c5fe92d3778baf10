//! Dense softmax head: a single affine layer trained with full-batch Adam
//! on the cross-entropy loss. All arithmetic is f64 and the only randomness
//! is the seeded weight initialization, so training is reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::persist::{BinReader, BinWriter};
use super::Rows;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub n_classes: usize,
    pub d: usize,
    /// Weights, row major (n_classes × d).
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseState {
    /// Softmax class probabilities.
    pub fn score(&self, row: &[f32]) -> Vec<f64> {
        let mut logits: Vec<f64> = (0..self.n_classes)
            .map(|c| {
                let w = &self.w[c * self.d..(c + 1) * self.d];
                w.iter().zip(row).map(|(&wj, &xj)| wj * xj as f64).sum::<f64>() + self.b[c]
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logits.iter_mut().for_each(|l| *l /= total);
        logits
    }

    pub fn encode(&self, w: &mut BinWriter) {
        w.usize(self.n_classes);
        w.usize(self.d);
        w.f64_slice(&self.w);
        w.f64_slice(&self.b);
    }

    pub fn decode(r: &mut BinReader) -> Result<DenseState> {
        Ok(DenseState {
            n_classes: r.usize()?,
            d: r.usize()?,
            w: r.f64_vec()?,
            b: r.f64_vec()?,
        })
    }
}

struct Adam {
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, len: usize) -> Adam {
        Adam { lr, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Train the head with full-batch Adam; one optimizer step per epoch.
pub(crate) fn fit_dense(
    x: Rows<'_>,
    y: &[u32],
    n_classes: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<DenseState> {
    if epochs == 0 {
        return Err(Error::Classifier("dense head needs at least one epoch".into()));
    }
    if learning_rate <= 0.0 {
        return Err(Error::Classifier(format!(
            "dense head learning rate must be positive, got {learning_rate}"
        )));
    }
    let (n, d) = (x.n, x.d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d as f64).sqrt();
    let mut state = DenseState {
        n_classes,
        d,
        w: (0..n_classes * d).map(|_| rng.gen_range(-bound..bound)).collect(),
        b: vec![0.0; n_classes],
    };
    let mut opt_w = Adam::new(learning_rate, n_classes * d);
    let mut opt_b = Adam::new(learning_rate, n_classes);
    let mut grad_w = vec![0.0f64; n_classes * d];
    let mut grad_b = vec![0.0f64; n_classes];

    for _ in 0..epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        grad_b.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let row = x.row(i);
            let probs = state.score(row);
            for c in 0..n_classes {
                let delta =
                    (probs[c] - if y[i] as usize == c { 1.0 } else { 0.0 }) / n as f64;
                grad_b[c] += delta;
                let gw = &mut grad_w[c * d..(c + 1) * d];
                for (g, &xj) in gw.iter_mut().zip(row) {
                    *g += delta * xj as f64;
                }
            }
        }
        opt_w.step(&mut state.w, &grad_w);
        opt_b.step(&mut state.b, &grad_b);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[f32], d: usize) -> Rows<'_> {
        Rows { data, n: data.len() / d, d }
    }

    fn blobs() -> (Vec<f32>, Vec<u32>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, center) in [(-2.0f32, 0.0f32), (2.0, 0.0), (0.0, 3.0)].iter().enumerate() {
            for k in 0..5 {
                let off = (k as f32 - 2.0) * 0.1;
                x.extend_from_slice(&[center.0 + off, center.1 - off]);
                y.push(c as u32);
            }
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (x, y) = blobs();
        let head = fit_dense(rows(&x, 2), &y, 3, 200, 0.05, 1).unwrap();
        for (row, &label) in x.chunks(2).zip(&y) {
            let scores = head.score(row);
            let argmax = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax as u32, label);
        }
    }

    #[test]
    fn scores_are_a_probability_vector() {
        let (x, y) = blobs();
        let head = fit_dense(rows(&x, 2), &y, 3, 50, 0.01, 1).unwrap();
        let scores = head.score(&[0.5, -1.0]);
        assert!((scores.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn same_seed_reproduces_weights_exactly() {
        let (x, y) = blobs();
        let a = fit_dense(rows(&x, 2), &y, 3, 30, 0.01, 7).unwrap();
        let b = fit_dense(rows(&x, 2), &y, 3, 30, 0.01, 7).unwrap();
        assert_eq!(a, b);
        let c = fit_dense(rows(&x, 2), &y, 3, 30, 0.01, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let (x, y) = blobs();
        assert!(fit_dense(rows(&x, 2), &y, 3, 0, 0.01, 1).is_err());
        assert!(fit_dense(rows(&x, 2), &y, 3, 10, 0.0, 1).is_err());
    }

    #[test]
    fn state_round_trips_through_binary() {
        let (x, y) = blobs();
        let head = fit_dense(rows(&x, 2), &y, 3, 20, 0.01, 3).unwrap();
        let mut w = BinWriter::new();
        head.encode(&mut w);
        let decoded = DenseState::decode(&mut BinReader::new(&w.buf)).unwrap();
        assert_eq!(decoded, head);
    }
}
