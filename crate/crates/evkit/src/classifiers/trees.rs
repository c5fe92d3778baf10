//! Randomized tree ensembles: random forest (bootstrap resampling, best
//! threshold per candidate feature) and extra-trees (full sample, one random
//! threshold per candidate feature). Both grow unpruned multiway-class CART
//! trees on sqrt(d) features per node and score by averaging leaf class
//! frequencies across trees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::persist::{BinReader, BinWriter};
use super::Rows;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForestVariant {
    RandomForest,
    ExtraTrees,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// Class frequencies among the training rows that reached this leaf.
    Leaf { probs: Vec<f64> },
    /// Rows with feature value ≤ threshold go left.
    Split { feature: u32, threshold: f32, left: Box<TreeNode>, right: Box<TreeNode> },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaf_probs<'a>(&'a self, row: &[f32]) -> &'a [f64] {
        match self {
            TreeNode::Leaf { probs } => probs,
            TreeNode::Split { feature, threshold, left, right } => {
                if row[*feature as usize] <= *threshold {
                    left.leaf_probs(row)
                } else {
                    right.leaf_probs(row)
                }
            }
        }
    }

    fn encode(&self, w: &mut BinWriter) {
        match self {
            TreeNode::Leaf { probs } => {
                w.u8(0);
                w.f64_slice(probs);
            }
            TreeNode::Split { feature, threshold, left, right } => {
                w.u8(1);
                w.u32(*feature);
                w.f32(*threshold);
                left.encode(w);
                right.encode(w);
            }
        }
    }

    fn decode(r: &mut BinReader) -> Result<TreeNode> {
        match r.u8()? {
            0 => Ok(TreeNode::Leaf { probs: r.f64_vec()? }),
            _ => Ok(TreeNode::Split {
                feature: r.u32()?,
                threshold: r.f32()?,
                left: Box::new(TreeNode::decode(r)?),
                right: Box::new(TreeNode::decode(r)?),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestState {
    pub n_classes: usize,
    pub trees: Vec<TreeNode>,
}

impl ForestState {
    /// Mean leaf class frequency across all trees.
    pub fn score(&self, row: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.n_classes];
        for tree in &self.trees {
            for (acc, p) in out.iter_mut().zip(tree.leaf_probs(row)) {
                *acc += p;
            }
        }
        let scale = 1.0 / self.trees.len() as f64;
        for v in &mut out {
            *v *= scale;
        }
        out
    }

    pub fn encode(&self, w: &mut BinWriter) {
        w.usize(self.n_classes);
        w.usize(self.trees.len());
        for tree in &self.trees {
            tree.encode(w);
        }
    }

    pub fn decode(r: &mut BinReader) -> Result<ForestState> {
        let n_classes = r.usize()?;
        let count = r.usize()?;
        let trees = (0..count).map(|_| TreeNode::decode(r)).collect::<Result<_>>()?;
        Ok(ForestState { n_classes, trees })
    }
}

struct Grower<'a> {
    x: Rows<'a>,
    y: &'a [u32],
    n_classes: usize,
    variant: ForestVariant,
    mtry: usize,
    /// Feature indices, progressively permuted by per-node sampling.
    feature_pool: Vec<u32>,
}

struct BestSplit {
    feature: u32,
    threshold: f32,
    impurity: f64,
}

impl<'a> Grower<'a> {
    fn class_counts(&self, idx: &[u32]) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &i in idx {
            counts[self.y[i as usize] as usize] += 1;
        }
        counts
    }

    fn leaf(&self, counts: &[usize], total: usize) -> TreeNode {
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        TreeNode::Leaf { probs }
    }

    /// Weighted Gini impurity of a two-way partition described by counts.
    fn weighted_gini(left: &[usize], right: &[usize]) -> f64 {
        let side = |counts: &[usize]| -> (f64, f64) {
            let total: usize = counts.iter().sum();
            if total == 0 {
                return (0.0, 0.0);
            }
            let t = total as f64;
            let sq: f64 = counts.iter().map(|&c| (c as f64 / t).powi(2)).sum();
            (t, 1.0 - sq)
        };
        let (nl, gl) = side(left);
        let (nr, gr) = side(right);
        (nl * gl + nr * gr) / (nl + nr)
    }

    /// Best threshold for one feature under the variant's split policy, or
    /// None when the feature is constant over `idx`.
    fn candidate_split(
        &self,
        feature: u32,
        idx: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Option<BestSplit> {
        let f = feature as usize;
        match self.variant {
            ForestVariant::ExtraTrees => {
                let mut min = f32::INFINITY;
                let mut max = f32::NEG_INFINITY;
                for &i in idx {
                    let v = self.x.row(i as usize)[f];
                    min = min.min(v);
                    max = max.max(v);
                }
                if !(min < max) {
                    return None;
                }
                let threshold = rng.gen_range(min..max);
                let mut left = vec![0usize; self.n_classes];
                let mut right = vec![0usize; self.n_classes];
                for &i in idx {
                    let side = if self.x.row(i as usize)[f] <= threshold {
                        &mut left
                    } else {
                        &mut right
                    };
                    side[self.y[i as usize] as usize] += 1;
                }
                Some(BestSplit { feature, threshold, impurity: Self::weighted_gini(&left, &right) })
            }
            ForestVariant::RandomForest => {
                let mut pairs: Vec<(f32, u32)> = idx
                    .iter()
                    .map(|&i| (self.x.row(i as usize)[f], self.y[i as usize]))
                    .collect();
                pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
                if pairs[0].0 == pairs[pairs.len() - 1].0 {
                    return None;
                }
                let mut left = vec![0usize; self.n_classes];
                let mut right = self.class_counts(idx);
                let mut best: Option<BestSplit> = None;
                for w in 0..pairs.len() - 1 {
                    let (value, class) = pairs[w];
                    left[class as usize] += 1;
                    right[class as usize] -= 1;
                    if value == pairs[w + 1].0 {
                        continue; // threshold must separate distinct values
                    }
                    let impurity = Self::weighted_gini(&left, &right);
                    if best.as_ref().is_none_or(|b| impurity < b.impurity) {
                        best = Some(BestSplit { feature, threshold: value, impurity });
                    }
                }
                best
            }
        }
    }

    fn grow(&mut self, idx: &mut Vec<u32>, rng: &mut ChaCha8Rng) -> TreeNode {
        let counts = self.class_counts(idx);
        let total = idx.len();
        let pure = counts.iter().any(|&c| c == total);
        if total < 2 || pure {
            return self.leaf(&counts, total);
        }

        // Sample mtry distinct features (partial Fisher–Yates on the pool).
        let d = self.feature_pool.len();
        let mut best: Option<BestSplit> = None;
        for slot in 0..self.mtry.min(d) {
            let pick = rng.gen_range(slot..d);
            self.feature_pool.swap(slot, pick);
            let feature = self.feature_pool[slot];
            if let Some(candidate) = self.candidate_split(feature, idx, rng) {
                if best.as_ref().is_none_or(|b| candidate.impurity < b.impurity) {
                    best = Some(candidate);
                }
            }
        }
        let Some(split) = best else {
            return self.leaf(&counts, total);
        };

        let f = split.feature as usize;
        let mut left_idx = Vec::new();
        let mut right_idx = Vec::new();
        for &i in idx.iter() {
            if self.x.row(i as usize)[f] <= split.threshold {
                left_idx.push(i);
            } else {
                right_idx.push(i);
            }
        }
        debug_assert!(!left_idx.is_empty() && !right_idx.is_empty());
        idx.clear();
        idx.shrink_to_fit();
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(self.grow(&mut left_idx, rng)),
            right: Box::new(self.grow(&mut right_idx, rng)),
        }
    }
}

pub(crate) fn fit_forest(
    x: Rows<'_>,
    y: &[u32],
    n_classes: usize,
    n_trees: usize,
    seed: u64,
    variant: ForestVariant,
) -> ForestState {
    let mtry = ((x.d as f64).sqrt().floor() as usize).max(1);
    let trees = (0..n_trees)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let mut grower = Grower {
                x,
                y,
                n_classes,
                variant,
                mtry,
                feature_pool: (0..x.d as u32).collect(),
            };
            let mut idx: Vec<u32> = match variant {
                ForestVariant::RandomForest => {
                    (0..x.n).map(|_| rng.gen_range(0..x.n as u32)).collect()
                }
                ForestVariant::ExtraTrees => (0..x.n as u32).collect(),
            };
            grower.grow(&mut idx, &mut rng)
        })
        .collect();
    ForestState { n_classes, trees }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[f32], d: usize) -> Rows<'_> {
        Rows { data, n: data.len() / d, d }
    }

    /// Two well-separated 1-d clusters.
    fn separable() -> (Vec<f32>, Vec<u32>) {
        let x = vec![0.1, 0.2, 0.3, 0.4, 2.1, 2.2, 2.3, 2.4];
        let y = vec![0, 0, 0, 0, 1, 1, 1, 1];
        (x, y)
    }

    #[test]
    fn both_variants_memorize_separable_data() {
        let (x, y) = separable();
        for variant in [ForestVariant::RandomForest, ForestVariant::ExtraTrees] {
            let forest = fit_forest(rows(&x, 1), &y, 2, 25, 9, variant);
            for (row, &label) in x.chunks(1).zip(&y) {
                let scores = forest.score(row);
                let argmax = if scores[1] > scores[0] { 1 } else { 0 };
                assert_eq!(argmax, label, "{variant:?} misclassified {row:?}");
                let sum: f64 = scores.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_features_fall_back_to_class_frequencies() {
        // No split possible: every tree is a single leaf holding the class
        // frequencies, so scores are exactly those frequencies.
        let x = vec![1.0f32; 8];
        let y = vec![0, 0, 0, 0, 0, 0, 1, 1];
        let forest = fit_forest(rows(&x, 1), &y, 2, 10, 3, ForestVariant::ExtraTrees);
        let scores = forest.score(&[1.0]);
        assert_eq!(scores, vec![0.75, 0.25]);
    }

    #[test]
    fn same_seed_same_forest() {
        let (x, y) = separable();
        let a = fit_forest(rows(&x, 1), &y, 2, 5, 7, ForestVariant::RandomForest);
        let b = fit_forest(rows(&x, 1), &y, 2, 5, 7, ForestVariant::RandomForest);
        assert_eq!(a, b);
        let c = fit_forest(rows(&x, 1), &y, 2, 5, 8, ForestVariant::RandomForest);
        assert_ne!(a, c);
    }

    #[test]
    fn state_round_trips_through_binary() {
        let (x, y) = separable();
        let forest = fit_forest(rows(&x, 1), &y, 2, 5, 7, ForestVariant::ExtraTrees);
        let mut w = BinWriter::new();
        forest.encode(&mut w);
        let decoded = ForestState::decode(&mut BinReader::new(&w.buf)).unwrap();
        assert_eq!(decoded, forest);
    }
}
