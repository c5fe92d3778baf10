//! Classical classifiers scored over extracted feature vectors.
//!
//! Seven families share one façade: tree ensembles (extra-trees, random
//! forest), k-nearest-neighbour, linear SVM, PCA followed by SVM, gradient
//! boosting, and a dense softmax head. `fit` turns labeled feature vectors
//! into a [`TrainedClassifier`]; `score` returns one value per class, where
//! higher means more likely. Models persist to a small container file and
//! reload to bitwise-identical scores.

mod boost;
mod dense;
mod knn;
mod pca;
mod persist;
mod svm;
mod trees;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use boost::{GbNode, GbmState};
pub use dense::DenseState;
pub use knn::{knn_distance, KnnMetric, KnnState};
pub use pca::PcaState;
pub use persist::{read_container, write_container};
pub use svm::SvmState;
pub use trees::{ForestState, ForestVariant, TreeNode};

pub(crate) use boost::fit_gbm;
pub(crate) use dense::fit_dense;
pub(crate) use pca::pca_fit_transform;
pub(crate) use svm::fit_svm;
pub(crate) use trees::fit_forest;

use crate::error::{Error, Result};
use crate::features_global::{FeatureSpec, FeatureVector};
use persist::{BinReader, BinWriter};

/// Row-major feature matrix view shared by the classifier families.
#[derive(Clone, Copy)]
pub(crate) struct Rows<'a> {
    pub data: &'a [f32],
    pub n: usize,
    pub d: usize,
}

impl<'a> Rows<'a> {
    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierFamily {
    ExtraTrees,
    RandomForest,
    Knn,
    Svm,
    PcaSvm,
    GradBoost,
    DenseHead,
}

impl ClassifierFamily {
    pub const ALL: [ClassifierFamily; 7] = [
        ClassifierFamily::ExtraTrees,
        ClassifierFamily::RandomForest,
        ClassifierFamily::Knn,
        ClassifierFamily::Svm,
        ClassifierFamily::PcaSvm,
        ClassifierFamily::GradBoost,
        ClassifierFamily::DenseHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierFamily::ExtraTrees => "extra_trees",
            ClassifierFamily::RandomForest => "random_forest",
            ClassifierFamily::Knn => "knn",
            ClassifierFamily::Svm => "svm",
            ClassifierFamily::PcaSvm => "pca_svm",
            ClassifierFamily::GradBoost => "grad_boost",
            ClassifierFamily::DenseHead => "dense_head",
        }
    }

    /// Whether features are standardized (train-set mean/variance) before
    /// this family sees them. Margin- and gradient-based learners need the
    /// scaling; trees and kNN work on raw values.
    pub fn standardizes(self) -> bool {
        matches!(
            self,
            ClassifierFamily::Svm | ClassifierFamily::PcaSvm | ClassifierFamily::DenseHead
        )
    }
}

impl fmt::Display for ClassifierFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassifierFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                Error::Classifier(format!(
                    "unknown classifier family `{s}` (expected one of {})",
                    ClassifierFamily::ALL.map(|f| f.as_str()).join(", ")
                ))
            })
    }
}

fn default_n_trees() -> usize {
    100
}
fn default_k() -> usize {
    1
}
fn default_components() -> usize {
    32
}
fn default_svm_iters() -> usize {
    300
}
fn default_svm_lambda() -> f64 {
    1e-3
}
fn default_rounds() -> usize {
    100
}
fn default_max_depth() -> usize {
    2
}
fn default_eta() -> f64 {
    0.3
}
fn default_gb_lambda() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    0.01
}

/// Full hyperparameter record for one classifier. Unused fields keep their
/// defaults, so a spec can be written compactly in config files while still
/// serializing completely into model headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub family: ClassifierFamily,
    #[serde(default)]
    pub seed: u64,
    /// Ensemble size for the tree families.
    #[serde(default = "default_n_trees")]
    pub n_trees: usize,
    /// Neighbour count for knn; only 1, 2 and 4 are supported.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub metric: KnnMetric,
    /// Weight knn votes by inverse distance instead of uniformly.
    #[serde(default)]
    pub distance_weighted: bool,
    /// Principal component count for pca_svm; one of 32, 64, 128, 256.
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_svm_iters")]
    pub svm_iters: usize,
    #[serde(default = "default_svm_lambda")]
    pub svm_lambda: f64,
    /// Boosting rounds for grad_boost.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Tree depth for grad_boost; fixed at 2.
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_gb_lambda")]
    pub gb_lambda: f64,
    /// Training epochs for dense_head.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

impl ClassifierSpec {
    pub fn new(family: ClassifierFamily) -> ClassifierSpec {
        ClassifierSpec {
            family,
            seed: 0,
            n_trees: default_n_trees(),
            k: default_k(),
            metric: KnnMetric::L1,
            distance_weighted: false,
            components: default_components(),
            svm_iters: default_svm_iters(),
            svm_lambda: default_svm_lambda(),
            rounds: default_rounds(),
            max_depth: default_max_depth(),
            eta: default_eta(),
            gb_lambda: default_gb_lambda(),
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
        }
    }

    pub fn extra_trees(seed: u64) -> ClassifierSpec {
        ClassifierSpec { seed, ..ClassifierSpec::new(ClassifierFamily::ExtraTrees) }
    }

    pub fn random_forest(seed: u64) -> ClassifierSpec {
        ClassifierSpec { seed, ..ClassifierSpec::new(ClassifierFamily::RandomForest) }
    }

    pub fn knn(k: usize, metric: KnnMetric) -> ClassifierSpec {
        ClassifierSpec { k, metric, ..ClassifierSpec::new(ClassifierFamily::Knn) }
    }

    pub fn svm() -> ClassifierSpec {
        ClassifierSpec::new(ClassifierFamily::Svm)
    }

    pub fn pca_svm(components: usize) -> ClassifierSpec {
        ClassifierSpec { components, ..ClassifierSpec::new(ClassifierFamily::PcaSvm) }
    }

    pub fn grad_boost() -> ClassifierSpec {
        ClassifierSpec::new(ClassifierFamily::GradBoost)
    }

    pub fn dense_head(seed: u64) -> ClassifierSpec {
        ClassifierSpec { seed, ..ClassifierSpec::new(ClassifierFamily::DenseHead) }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Classifier(msg));
        match self.family {
            ClassifierFamily::ExtraTrees | ClassifierFamily::RandomForest => {
                if self.n_trees == 0 {
                    return err("tree ensembles need at least one tree".into());
                }
            }
            ClassifierFamily::Knn => {
                if ![1, 2, 4].contains(&self.k) {
                    return err(format!("knn k must be 1, 2 or 4, got {}", self.k));
                }
            }
            ClassifierFamily::Svm => {
                if self.svm_iters == 0 {
                    return err("svm needs at least one iteration".into());
                }
                if self.svm_lambda < 0.0 {
                    return err(format!("svm lambda must be ≥ 0, got {}", self.svm_lambda));
                }
            }
            ClassifierFamily::PcaSvm => {
                if ![32, 64, 128, 256].contains(&self.components) {
                    return err(format!(
                        "pca_svm components must be 32, 64, 128 or 256, got {}",
                        self.components
                    ));
                }
                if self.svm_iters == 0 {
                    return err("svm needs at least one iteration".into());
                }
            }
            ClassifierFamily::GradBoost => {
                if self.rounds == 0 {
                    return err("grad_boost needs at least one round".into());
                }
                if self.max_depth != 2 {
                    return err(format!(
                        "grad_boost max_depth is fixed at 2, got {}",
                        self.max_depth
                    ));
                }
                if !(self.eta > 0.0) {
                    return err(format!("grad_boost eta must be positive, got {}", self.eta));
                }
            }
            ClassifierFamily::DenseHead => {
                if self.epochs == 0 {
                    return err("dense head needs at least one epoch".into());
                }
                if !(self.learning_rate > 0.0) {
                    return err(format!(
                        "dense head learning rate must be positive, got {}",
                        self.learning_rate
                    ));
                }
            }
        }
        Ok(())
    }

    /// Short distinguishing label, used for report columns and file names:
    /// `extra_trees`, `1nn_l1`, `pca64_svm`, …
    pub fn label(&self) -> String {
        match self.family {
            ClassifierFamily::Knn => {
                let metric = match self.metric {
                    KnnMetric::L1 => "l1",
                    KnnMetric::L2 => "l2",
                    KnnMetric::Chebyshev => "chebyshev",
                };
                format!("{}nn_{}", self.k, metric)
            }
            ClassifierFamily::PcaSvm => format!("pca{}_svm", self.components),
            other => other.as_str().to_string(),
        }
    }
}

/// Per-dimension affine rescaling to zero mean and unit variance, fit on the
/// training set and replayed on every scored vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: Rows<'_>) -> Standardizer {
        let (n, d) = (x.n, x.d);
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for i in 0..n {
            for (s, (&v, &m)) in var.iter_mut().zip(x.row(i).iter().zip(&mean)) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let std = (s / n as f64).sqrt();
                if std < 1e-12 {
                    1.0
                } else {
                    1.0 / std
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, row: &[f32]) -> Vec<f32> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (&m, &s))| ((v as f64 - m) * s) as f32)
            .collect()
    }

    fn apply_all(&self, x: Rows<'_>) -> Vec<f32> {
        let mut out = Vec::with_capacity(x.n * x.d);
        for i in 0..x.n {
            out.extend_from_slice(&self.apply(x.row(i)));
        }
        out
    }

    fn encode(&self, w: &mut BinWriter) {
        w.f64_slice(&self.mean);
        w.f64_slice(&self.scale);
    }

    fn decode(r: &mut BinReader) -> Result<Standardizer> {
        Ok(Standardizer { mean: r.f64_vec()?, scale: r.f64_vec()? })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ModelState {
    Forest(ForestState),
    Knn(KnnState),
    Svm(SvmState),
    PcaSvm { pca: PcaState, svm: SvmState },
    GradBoost(GbmState),
    DenseHead(DenseState),
}

impl ModelState {
    fn encode(&self, w: &mut BinWriter) {
        match self {
            ModelState::Forest(s) => {
                w.u8(0);
                s.encode(w);
            }
            ModelState::Knn(s) => {
                w.u8(1);
                s.encode(w);
            }
            ModelState::Svm(s) => {
                w.u8(2);
                s.encode(w);
            }
            ModelState::PcaSvm { pca, svm } => {
                w.u8(3);
                pca.encode(w);
                svm.encode(w);
            }
            ModelState::GradBoost(s) => {
                w.u8(4);
                s.encode(w);
            }
            ModelState::DenseHead(s) => {
                w.u8(5);
                s.encode(w);
            }
        }
    }

    fn decode(r: &mut BinReader) -> Result<ModelState> {
        match r.u8()? {
            0 => Ok(ModelState::Forest(ForestState::decode(r)?)),
            1 => Ok(ModelState::Knn(KnnState::decode(r)?)),
            2 => Ok(ModelState::Svm(SvmState::decode(r)?)),
            3 => Ok(ModelState::PcaSvm {
                pca: PcaState::decode(r)?,
                svm: SvmState::decode(r)?,
            }),
            4 => Ok(ModelState::GradBoost(GbmState::decode(r)?)),
            5 => Ok(ModelState::DenseHead(DenseState::decode(r)?)),
            tag => Err(Error::Classifier(format!("unknown model state tag {tag}"))),
        }
    }
}

/// JSON header stored in front of the binary model payload.
#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    spec: ClassifierSpec,
    classes: Vec<String>,
    feature_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    feature_spec: Option<FeatureSpec>,
}

/// A fitted classifier: hyperparameters, the label vocabulary, the optional
/// standardizer and the family-specific state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    spec: ClassifierSpec,
    classes: Vec<String>,
    feature_dim: usize,
    feature_spec: Option<FeatureSpec>,
    standardizer: Option<Standardizer>,
    state: ModelState,
}

impl TrainedClassifier {
    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    /// Class names in score order (sorted lexicographically at fit time).
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn feature_spec(&self) -> Option<&FeatureSpec> {
        self.feature_spec.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardizer.is_some()
    }

    /// One score per class, aligned with [`classes`](Self::classes); higher
    /// means more likely.
    pub fn score(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim {
            return Err(Error::Classifier(format!(
                "feature vector has dimension {} but the model was trained on {}",
                x.len(),
                self.feature_dim
            )));
        }
        let standardized;
        let row: &[f32] = match &self.standardizer {
            Some(s) => {
                standardized = s.apply(x);
                &standardized
            }
            None => x,
        };
        Ok(match &self.state {
            ModelState::Forest(s) => s.score(row),
            ModelState::Knn(s) => s.score(
                row,
                self.spec.k,
                self.spec.metric,
                self.spec.distance_weighted,
                self.classes.len(),
            ),
            ModelState::Svm(s) => s.score(row),
            ModelState::PcaSvm { pca, svm } => {
                let z: Vec<f32> = pca.project(row).into_iter().map(|v| v as f32).collect();
                svm.score(&z)
            }
            ModelState::GradBoost(s) => s.score(row),
            ModelState::DenseHead(s) => s.score(row),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            format_version: persist::FORMAT_VERSION,
            spec: self.spec.clone(),
            classes: self.classes.clone(),
            feature_dim: self.feature_dim,
            feature_spec: self.feature_spec.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut w = BinWriter::new();
        match &self.standardizer {
            Some(s) => {
                w.u8(1);
                s.encode(&mut w);
            }
            None => w.u8(0),
        }
        self.state.encode(&mut w);
        write_container(path, &header_json, &w.buf)
    }
}

/// Map string labels onto sorted class indices.
fn index_labels(labels: &[String]) -> Result<(Vec<String>, Vec<u32>)> {
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        let only = classes.first().map(String::as_str).unwrap_or("<none>");
        return Err(Error::Classifier(format!(
            "training data contains a single class (`{only}`); at least 2 are required"
        )));
    }
    let y = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present") as u32)
        .collect();
    Ok((classes, y))
}

/// Fit a classifier on a row-major matrix with one string label per row.
pub fn fit_matrix(
    spec: &ClassifierSpec,
    data: &[f32],
    dim: usize,
    labels: &[String],
) -> Result<TrainedClassifier> {
    spec.validate()?;
    if dim == 0 {
        return Err(Error::Classifier("features must have at least one dimension".into()));
    }
    if data.len() != labels.len() * dim {
        return Err(Error::Classifier(format!(
            "matrix size {} does not equal {} rows × {} dims",
            data.len(),
            labels.len(),
            dim
        )));
    }
    if labels.is_empty() {
        return Err(Error::Classifier("cannot fit on an empty training set".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Classifier("features contain a non-finite value".into()));
    }
    let (classes, y) = index_labels(labels)?;
    let n_classes = classes.len();
    let x = Rows { data, n: labels.len(), d: dim };

    let standardizer = spec.family.standardizes().then(|| Standardizer::fit(x));
    let standardized_data = standardizer.as_ref().map(|s| s.apply_all(x));
    let x_in = match &standardized_data {
        Some(buf) => Rows { data: buf, n: x.n, d: x.d },
        None => x,
    };

    let state = match spec.family {
        ClassifierFamily::ExtraTrees => ModelState::Forest(fit_forest(
            x_in,
            &y,
            n_classes,
            spec.n_trees,
            spec.seed,
            ForestVariant::ExtraTrees,
        )),
        ClassifierFamily::RandomForest => ModelState::Forest(fit_forest(
            x_in,
            &y,
            n_classes,
            spec.n_trees,
            spec.seed,
            ForestVariant::RandomForest,
        )),
        ClassifierFamily::Knn => ModelState::Knn(KnnState::fit(x_in, &y)),
        ClassifierFamily::Svm => {
            ModelState::Svm(fit_svm(x_in, &y, n_classes, spec.svm_iters, spec.svm_lambda))
        }
        ClassifierFamily::PcaSvm => {
            let (pca, reduced) = pca_fit_transform(x_in, spec.components)?;
            let reduced_f32: Vec<f32> = reduced.into_iter().map(|v| v as f32).collect();
            let z = Rows { data: &reduced_f32, n: x.n, d: spec.components };
            let svm = fit_svm(z, &y, n_classes, spec.svm_iters, spec.svm_lambda);
            ModelState::PcaSvm { pca, svm }
        }
        ClassifierFamily::GradBoost => ModelState::GradBoost(fit_gbm(
            x_in,
            &y,
            n_classes,
            spec.rounds,
            spec.max_depth,
            spec.eta,
            spec.gb_lambda,
        )),
        ClassifierFamily::DenseHead => ModelState::DenseHead(fit_dense(
            x_in,
            &y,
            n_classes,
            spec.epochs,
            spec.learning_rate,
            spec.seed,
        )?),
    };

    Ok(TrainedClassifier {
        spec: spec.clone(),
        classes,
        feature_dim: dim,
        feature_spec: None,
        standardizer,
        state,
    })
}

/// Fit from tagged feature vectors, checking that they agree on dimension
/// and originating feature spec. Labels pair with features by position.
pub fn fit(
    spec: &ClassifierSpec,
    features: &[FeatureVector],
    labels: &[String],
) -> Result<TrainedClassifier> {
    if features.len() != labels.len() {
        return Err(Error::Classifier(format!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::Classifier("cannot fit on an empty training set".into()));
    }
    let dim = features[0].dim();
    for (i, f) in features.iter().enumerate() {
        if f.dim() != dim {
            return Err(Error::Classifier(format!(
                "feature {} (`{}`) has dimension {} but feature 0 has {}",
                i,
                f.image_id,
                f.dim(),
                dim
            )));
        }
        if f.spec != features[0].spec {
            return Err(Error::Classifier(format!(
                "feature {} (`{}`) was extracted as {} but feature 0 as {}",
                i,
                f.image_id,
                f.spec.canonical(),
                features[0].spec.canonical()
            )));
        }
    }
    let mut data = Vec::with_capacity(features.len() * dim);
    for f in features {
        data.extend_from_slice(&f.values);
    }
    let mut model = fit_matrix(spec, &data, dim, labels)?;
    model.feature_spec = Some(features[0].spec.clone());
    Ok(model)
}

/// Reload a model written by [`TrainedClassifier::save`].
pub fn load_classifier(path: &Path) -> Result<TrainedClassifier> {
    let (header_json, payload) = read_container(path)?;
    let header: ModelHeader = serde_json::from_slice(&header_json).map_err(|e| {
        Error::Classifier(format!("bad model header in {}: {e}", path.display()))
    })?;
    if header.format_version != persist::FORMAT_VERSION {
        return Err(Error::Classifier(format!(
            "unsupported model format version {} in {}",
            header.format_version,
            path.display()
        )));
    }
    let mut r = BinReader::new(&payload);
    let standardizer = match r.u8()? {
        0 => None,
        _ => Some(Standardizer::decode(&mut r)?),
    };
    let state = ModelState::decode(&mut r)?;
    Ok(TrainedClassifier {
        spec: header.spec,
        classes: header.classes,
        feature_dim: header.feature_dim,
        feature_spec: header.feature_spec,
        standardizer,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// Three Gaussian-ish blobs in 3-D, 8 points each, labels out of sorted
    /// order on purpose.
    fn blob_data() -> (Vec<f32>, Vec<String>) {
        let centers =
            [("seaside", [4.0f32, 0.0, 0.0]), ("alpine", [-4.0, 1.0, 0.0]), ("market", [0.0, -4.0, 2.0])];
        let offsets = [
            [0.1f32, -0.2, 0.0],
            [-0.1, 0.1, 0.2],
            [0.2, 0.0, -0.1],
            [0.0, 0.2, 0.1],
            [-0.2, -0.1, 0.0],
            [0.1, 0.1, -0.2],
            [0.0, -0.1, 0.1],
            [-0.1, 0.0, -0.1],
        ];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (name, c) in &centers {
            for o in &offsets {
                x.extend_from_slice(&[c[0] + o[0], c[1] + o[1], c[2] + o[2]]);
                y.push(name.to_string());
            }
        }
        (x, y)
    }

    fn all_specs() -> Vec<ClassifierSpec> {
        vec![
            ClassifierSpec::extra_trees(5),
            ClassifierSpec::random_forest(5),
            ClassifierSpec::knn(2, KnnMetric::L2),
            ClassifierSpec::svm(),
            // 3-D blobs cannot host 32 components; tweak below.
            ClassifierSpec::grad_boost(),
            ClassifierSpec::dense_head(5),
        ]
    }

    #[test]
    fn classes_are_sorted_and_scores_align() {
        let (x, y) = blob_data();
        let model = fit_matrix(&ClassifierSpec::knn(1, KnnMetric::L1), &x, 3, &y).unwrap();
        assert_eq!(model.classes(), ["alpine", "market", "seaside"]);
        // A point at the seaside centre must put all its knn vote there.
        let scores = model.score(&[4.0, 0.0, 0.0]).unwrap();
        assert_eq!(scores, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn every_family_learns_the_blobs() {
        let (x, y) = blob_data();
        for spec in all_specs() {
            let model = fit_matrix(&spec, &x, 3, &y).unwrap();
            let mut correct = 0;
            for (row, label) in x.chunks(3).zip(&y) {
                let scores = model.score(row).unwrap();
                let argmax = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if &model.classes()[argmax] == label {
                    correct += 1;
                }
            }
            assert_eq!(correct, y.len(), "{} failed on its training set", spec.label());
        }
    }

    #[test]
    fn standardization_policy_follows_the_family() {
        let (x, y) = blob_data();
        let svm = fit_matrix(&ClassifierSpec::svm(), &x, 3, &y).unwrap();
        assert!(svm.is_standardized());
        let trees = fit_matrix(&ClassifierSpec::extra_trees(1), &x, 3, &y).unwrap();
        assert!(!trees.is_standardized());
        let knn = fit_matrix(&ClassifierSpec::knn(1, KnnMetric::L1), &x, 3, &y).unwrap();
        assert!(!knn.is_standardized());
    }

    #[test]
    fn dimension_mismatch_names_both_dimensions() {
        let (x, y) = blob_data();
        let model = fit_matrix(&ClassifierSpec::extra_trees(1), &x, 3, &y).unwrap();
        let err = model.score(&[1.0, 2.0]).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn single_class_input_is_rejected() {
        let x = vec![0.0f32; 12];
        let y = vec!["only".to_string(); 4];
        let err = fit_matrix(&ClassifierSpec::extra_trees(1), &x, 3, &y).unwrap_err();
        assert!(err.to_string().contains("single class"), "{err}");
    }

    #[test]
    fn pca_svm_component_count_must_fit_sample_count() {
        // 24 samples cannot support 32 components.
        let (x, y) = blob_data();
        let err = fit_matrix(&ClassifierSpec::pca_svm(32), &x, 3, &y).unwrap_err();
        assert!(err.to_string().contains("components"), "{err}");
        // And off-menu component counts are rejected outright.
        let err = fit_matrix(&ClassifierSpec::pca_svm(31), &x, 3, &y).unwrap_err();
        assert!(err.to_string().contains("32, 64, 128 or 256"), "{err}");
    }

    #[test]
    fn knn_k_domain_is_enforced() {
        let (x, y) = blob_data();
        let err = fit_matrix(&ClassifierSpec::knn(3, KnnMetric::L1), &x, 3, &y).unwrap_err();
        assert!(err.to_string().contains("1, 2 or 4"), "{err}");
    }

    #[test]
    fn grad_boost_depth_is_pinned() {
        let mut spec = ClassifierSpec::grad_boost();
        spec.max_depth = 3;
        let (x, y) = blob_data();
        assert!(fit_matrix(&spec, &x, 3, &y).is_err());
    }

    #[test]
    fn save_load_round_trips_scores_bitwise() {
        let (x, y) = blob_data();
        let dir = tempdir().unwrap();
        let probes: Vec<&[f32]> =
            vec![&[0.0, 0.0, 0.0], &[4.1, -0.1, 0.2], &[-3.0, 2.0, 1.0]];
        // pca_svm needs a taller matrix than the blobs provide; build one by
        // repeating the blobs with small deterministic shifts in 40-D.
        for spec in all_specs() {
            let model = fit_matrix(&spec, &x, 3, &y).unwrap();
            let path = dir.path().join(format!("{}.evcm", spec.label()));
            model.save(&path).unwrap();
            let loaded = load_classifier(&path).unwrap();
            assert_eq!(loaded.classes(), model.classes());
            assert_eq!(loaded.spec(), model.spec());
            for probe in &probes {
                let a = model.score(probe).unwrap();
                let b = loaded.score(probe).unwrap();
                assert_eq!(a, b, "{} scores changed after reload", spec.label());
            }
        }
    }

    #[test]
    fn pca_svm_round_trips_on_wide_data() {
        // 40 samples in 64-D so components=32 is legal; d > n exercises the
        // Gram route.
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            for j in 0..64 {
                let base = if class == 0 { 1.0 } else { -1.0 };
                let v = base * ((i * 64 + j) % 7 + 1) as f32 / 7.0
                    + ((i + j) % 5) as f32 * 0.01;
                x.push(v);
            }
            y.push(if class == 0 { "pos".to_string() } else { "neg".to_string() });
        }
        let model = fit_matrix(&ClassifierSpec::pca_svm(32), &x, 64, &y).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("pca.evcm");
        model.save(&path).unwrap();
        let loaded = load_classifier(&path).unwrap();
        let probe = &x[0..64];
        assert_eq!(model.score(probe).unwrap(), loaded.score(probe).unwrap());
    }

    #[test]
    fn fit_from_feature_vectors_checks_consistency() {
        use crate::features_global::{FeatureKind, FeatureSpec};
        let spec_a = FeatureSpec::global(FeatureKind::GlobalOutput, "bb").unwrap();
        let fv = |vals: Vec<f32>, spec: &FeatureSpec| FeatureVector {
            spec: spec.clone(),
            values: vals,
            image_id: "img".into(),
        };
        let feats = vec![
            fv(vec![0.0, 0.1], &spec_a),
            fv(vec![1.0, 0.9], &spec_a),
            fv(vec![0.1, 0.0], &spec_a),
            fv(vec![0.9, 1.0], &spec_a),
        ];
        let labels: Vec<String> =
            ["a", "b", "a", "b"].iter().map(|s| s.to_string()).collect();
        let model = fit(&ClassifierSpec::knn(1, KnnMetric::L1), &feats, &labels).unwrap();
        assert_eq!(model.feature_spec().unwrap().canonical(), "global_output@bb");

        // Mixed dims are named by position and image id.
        let mut bad = feats.clone();
        bad[2].values.push(0.5);
        let err = fit(&ClassifierSpec::knn(1, KnnMetric::L1), &bad, &labels).unwrap_err();
        assert!(err.to_string().contains("feature 2"), "{err}");
    }
}
