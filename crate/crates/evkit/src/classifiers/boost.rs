//! Gradient-boosted shallow trees with a one-vs-rest logistic objective.
//!
//! Each class gets its own sequence of depth-limited regression trees fit to
//! the logistic gradient/Hessian statistics (second-order boosting with an
//! L2 leaf penalty). Split search is greedy and exhaustive over features, so
//! training involves no randomness at all.

use rayon::prelude::*;

use super::persist::{BinReader, BinWriter};
use super::Rows;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum GbNode {
    /// Additive contribution of this leaf (learning rate already applied).
    Leaf { value: f64 },
    /// Rows with feature value ≤ threshold go left.
    Split { feature: u32, threshold: f32, left: Box<GbNode>, right: Box<GbNode> },
}

impl GbNode {
    pub fn depth(&self) -> usize {
        match self {
            GbNode::Leaf { .. } => 0,
            GbNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn eval(&self, row: &[f32]) -> f64 {
        match self {
            GbNode::Leaf { value } => *value,
            GbNode::Split { feature, threshold, left, right } => {
                if row[*feature as usize] <= *threshold {
                    left.eval(row)
                } else {
                    right.eval(row)
                }
            }
        }
    }

    fn encode(&self, w: &mut BinWriter) {
        match self {
            GbNode::Leaf { value } => {
                w.u8(0);
                w.f64(*value);
            }
            GbNode::Split { feature, threshold, left, right } => {
                w.u8(1);
                w.u32(*feature);
                w.f32(*threshold);
                left.encode(w);
                right.encode(w);
            }
        }
    }

    fn decode(r: &mut BinReader) -> Result<GbNode> {
        match r.u8()? {
            0 => Ok(GbNode::Leaf { value: r.f64()? }),
            _ => Ok(GbNode::Split {
                feature: r.u32()?,
                threshold: r.f32()?,
                left: Box::new(GbNode::decode(r)?),
                right: Box::new(GbNode::decode(r)?),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmState {
    pub n_classes: usize,
    pub d: usize,
    /// trees[c] is the boosting sequence for class c vs rest.
    pub trees: Vec<Vec<GbNode>>,
}

impl GbmState {
    /// Per-class sigmoid of the additive raw score. Monotone in the margin,
    /// so ranking (and therefore AUC) is unaffected by the squashing.
    pub fn score(&self, row: &[f32]) -> Vec<f64> {
        self.trees
            .iter()
            .map(|seq| {
                let raw: f64 = seq.iter().map(|t| t.eval(row)).sum();
                1.0 / (1.0 + (-raw).exp())
            })
            .collect()
    }

    pub fn encode(&self, w: &mut BinWriter) {
        w.usize(self.n_classes);
        w.usize(self.d);
        for seq in &self.trees {
            w.usize(seq.len());
            for tree in seq {
                tree.encode(w);
            }
        }
    }

    pub fn decode(r: &mut BinReader) -> Result<GbmState> {
        let n_classes = r.usize()?;
        let d = r.usize()?;
        let mut trees = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = r.usize()?;
            let seq = (0..len).map(|_| GbNode::decode(r)).collect::<Result<_>>()?;
            trees.push(seq);
        }
        Ok(GbmState { n_classes, d, trees })
    }
}

struct SplitChoice {
    gain: f64,
    feature: u32,
    threshold: f32,
}

struct GbGrower<'a> {
    x: Rows<'a>,
    /// Row indices sorted by each feature's value (precomputed once).
    sorted: &'a [Vec<u32>],
    grad: Vec<f64>,
    hess: Vec<f64>,
    lambda: f64,
    eta: f64,
    max_depth: usize,
}

impl<'a> GbGrower<'a> {
    fn leaf(&self, g: f64, h: f64) -> GbNode {
        GbNode::Leaf { value: self.eta * (-g / (h + self.lambda)) }
    }

    fn best_split(&self, member: &[bool], g_total: f64, h_total: f64) -> Option<SplitChoice> {
        let parent = g_total * g_total / (h_total + self.lambda);
        let mut best: Option<SplitChoice> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let mut gl = 0.0f64;
            let mut hl = 0.0f64;
            let mut prev: Option<f32> = None;
            for &i in order {
                let i = i as usize;
                if !member[i] {
                    continue;
                }
                let v = self.x.row(i)[f];
                if let Some(pv) = prev {
                    if v > pv {
                        let gr = g_total - gl;
                        let hr = h_total - hl;
                        let gain = gl * gl / (hl + self.lambda)
                            + gr * gr / (hr + self.lambda)
                            - parent;
                        if gain > 1e-12
                            && best.as_ref().is_none_or(|b| gain > b.gain)
                        {
                            best = Some(SplitChoice {
                                gain,
                                feature: f as u32,
                                threshold: pv,
                            });
                        }
                    }
                }
                gl += self.grad[i];
                hl += self.hess[i];
                prev = Some(v);
            }
        }
        best
    }

    fn grow(&self, member: &[bool], count: usize, depth: usize) -> GbNode {
        let mut g = 0.0f64;
        let mut h = 0.0f64;
        for (i, &m) in member.iter().enumerate() {
            if m {
                g += self.grad[i];
                h += self.hess[i];
            }
        }
        if depth >= self.max_depth || count < 2 {
            return self.leaf(g, h);
        }
        let Some(split) = self.best_split(member, g, h) else {
            return self.leaf(g, h);
        };
        let f = split.feature as usize;
        let mut left = vec![false; member.len()];
        let mut right = vec![false; member.len()];
        let mut left_count = 0usize;
        for (i, &m) in member.iter().enumerate() {
            if m {
                if self.x.row(i)[f] <= split.threshold {
                    left[i] = true;
                    left_count += 1;
                } else {
                    right[i] = true;
                }
            }
        }
        GbNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(self.grow(&left, left_count, depth + 1)),
            right: Box::new(self.grow(&right, count - left_count, depth + 1)),
        }
    }
}

/// Boost one binary (class vs rest) logistic model.
fn fit_class(
    x: Rows<'_>,
    sorted: &[Vec<u32>],
    targets: &[f64],
    rounds: usize,
    max_depth: usize,
    eta: f64,
    lambda: f64,
) -> Vec<GbNode> {
    let n = x.n;
    let mut raw = vec![0.0f64; n];
    let mut seq = Vec::with_capacity(rounds);
    let member = vec![true; n];
    for _ in 0..rounds {
        let mut grad = vec![0.0f64; n];
        let mut hess = vec![0.0f64; n];
        for i in 0..n {
            let p = 1.0 / (1.0 + (-raw[i]).exp());
            grad[i] = p - targets[i];
            hess[i] = p * (1.0 - p);
        }
        let grower = GbGrower { x, sorted, grad, hess, lambda, eta, max_depth };
        let tree = grower.grow(&member, n, 0);
        for i in 0..n {
            raw[i] += tree.eval(x.row(i));
        }
        seq.push(tree);
    }
    seq
}

/// One-vs-rest logistic gradient boosting over all classes.
pub(crate) fn fit_gbm(
    x: Rows<'_>,
    y: &[u32],
    n_classes: usize,
    rounds: usize,
    max_depth: usize,
    eta: f64,
    lambda: f64,
) -> GbmState {
    // Presort rows by every feature once; all node scans reuse the order.
    let sorted: Vec<Vec<u32>> = (0..x.d)
        .into_par_iter()
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.n as u32).collect();
            idx.sort_by(|&a, &b| {
                let va = x.row(a as usize)[f];
                let vb = x.row(b as usize)[f];
                va.partial_cmp(&vb).expect("finite features").then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let trees: Vec<Vec<GbNode>> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let targets: Vec<f64> =
                y.iter().map(|&yi| if yi as usize == c { 1.0 } else { 0.0 }).collect();
            fit_class(x, &sorted, &targets, rounds, max_depth, eta, lambda)
        })
        .collect();
    GbmState { n_classes, d: x.d, trees }
}
