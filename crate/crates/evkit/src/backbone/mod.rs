//! Pretrained-backbone handling: loading serialized classification graphs,
//! exposing the two feature taps, replacing the classification head, and
//! fine-tuning all weights on a labeled image set.
//!
//! Every backbone decomposes into a convolutional feature map and a
//! classification head. The graph publishes both as named outputs:
//! `intermediate` is the globally pooled last-convolution vector (length K)
//! and `output` is the softmax class-probability vector (length M). K, M and
//! the expected input side are read from graph metadata, never hardcoded.

pub mod net;
pub mod onnx;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::dataset::RasterImage;
use crate::error::{Error, Result};
use net::{Adam, Network};
use onnx::{Dim, ModelProto};

pub const INTERMEDIATE_TAP: &str = "intermediate";
pub const OUTPUT_TAP: &str = "output";

/// Per-channel normalization applied to [0,1] pixel values before the first
/// layer: `(value - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessing {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

/// Settings for [`BackboneModel::fine_tune`]. Rates slower than the 1e-4
/// default showed no improvement in practice, so that is the floor to reach
/// for; batch size and head initialization are recorded in run metadata.
#[derive(Debug, Clone)]
pub struct FineTuneConfig {
    pub num_classes: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train only the replaced head, keeping convolutional weights frozen.
    pub freeze_body: bool,
}

impl FineTuneConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            freeze_body: false,
        }
    }
}

#[derive(Debug)]
pub struct BackboneModel {
    pub name: String,
    pub input_side: usize,
    pub intermediate_dim: usize,
    pub output_dim: usize,
    pub preprocessing: Preprocessing,
    digest: String,
    network: Network,
}

fn backbone_err(name: &str, detail: impl Into<String>) -> Error {
    Error::Backbone { name: name.to_string(), detail: detail.into() }
}

/// Content digest of a model: hash of its canonical serialized form, stable
/// across load/save round trips. Feature-cache keys embed it.
fn model_digest(model: &ModelProto) -> String {
    let mut hasher = Sha256::new();
    hasher.update(onnx::encode_model(model));
    format!("{:x}", hasher.finalize())
}

fn dim_value(dim: &Dim) -> Option<usize> {
    match dim {
        Dim::Value(v) if *v > 0 => Some(*v as usize),
        _ => None,
    }
}

/// Loads a serialized graph from disk and resolves its taps and metadata.
pub fn load_backbone(model_path: &Path, name: &str) -> Result<BackboneModel> {
    let bytes = std::fs::read(model_path)
        .map_err(|e| backbone_err(name, format!("cannot read {}: {e}", model_path.display())))?;
    let model = onnx::decode_model(&bytes)
        .map_err(|e| backbone_err(name, format!("{}: {e}", model_path.display())))?;
    BackboneModel::from_model(model, name, Preprocessing::default())
}

impl BackboneModel {
    /// Compiles a decoded graph into a usable backbone, validating taps and
    /// reading K, M and the input side from the graph's declared shapes.
    pub fn from_model(
        model: ModelProto,
        name: &str,
        preprocessing: Preprocessing,
    ) -> Result<BackboneModel> {
        for std in preprocessing.std {
            if std <= 0.0 {
                return Err(backbone_err(name, "preprocessing std must be positive"));
            }
        }
        let digest = model_digest(&model);
        let network =
            Network::compile(&model).map_err(|e| backbone_err(name, e.to_string()))?;

        let tap_dim = |tap: &str| -> Result<usize> {
            let info = model
                .graph
                .outputs
                .iter()
                .find(|o| o.name == tap)
                .ok_or_else(|| backbone_err(name, format!("{tap} tap unresolvable")))?;
            info.shape
                .last()
                .and_then(dim_value)
                .ok_or_else(|| backbone_err(name, format!("{tap} tap has no declared width")))
        };
        let intermediate_dim = tap_dim(INTERMEDIATE_TAP)?;
        let output_dim = tap_dim(OUTPUT_TAP)?;

        let input_info = model
            .graph
            .inputs
            .iter()
            .find(|i| i.name == network.input_name())
            .ok_or_else(|| backbone_err(name, "graph input has no declared shape"))?;
        if input_info.shape.len() != 4 || dim_value(&input_info.shape[1]) != Some(3) {
            return Err(backbone_err(name, "graph input must be a batch of 3-channel images"));
        }
        let side_h = dim_value(&input_info.shape[2]);
        let side_w = dim_value(&input_info.shape[3]);
        let input_side = match (side_h, side_w) {
            (Some(h), Some(w)) if h == w => h,
            _ => return Err(backbone_err(name, "graph input must declare a square side")),
        };

        Ok(BackboneModel {
            name: name.to_string(),
            input_side,
            intermediate_dim,
            output_dim,
            preprocessing,
            digest,
            network,
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Serializes the current weights back to a single-file graph.
    pub fn save(&self, path: &Path) -> Result<()> {
        onnx::write_model(path, &self.network.to_model())
    }

    fn to_input_tensor(&self, images: &[&RasterImage]) -> Result<Array4<f32>> {
        let side = self.input_side;
        let mut batch = Array4::<f32>::zeros((images.len(), 3, side, side));
        for (n, img) in images.iter().enumerate() {
            if img.rows() != side || img.cols() != side {
                return Err(backbone_err(
                    &self.name,
                    format!(
                        "expected a {side}x{side} input, got {}x{}",
                        img.rows(),
                        img.cols()
                    ),
                ));
            }
            for ch in 0..3 {
                let mean = self.preprocessing.mean[ch];
                let inv_std = 1.0 / self.preprocessing.std[ch];
                for r in 0..side {
                    for c in 0..side {
                        batch[[n, ch, r, c]] = (img.get(r, c, ch) - mean) * inv_std;
                    }
                }
            }
        }
        Ok(batch)
    }

    /// Evaluates both taps in one forward pass over an already-sized image.
    pub fn extract(&self, img: &RasterImage) -> Result<(Vec<f32>, Vec<f32>)> {
        let input = self.to_input_tensor(&[img])?;
        let tape = self.network.forward(&input)?;
        let grab = |tap: &str| -> Result<Vec<f32>> {
            let v = self
                .network
                .value(&tape, tap)
                .ok_or_else(|| backbone_err(&self.name, format!("{tap} tap unresolvable")))?;
            Ok(v.iter().copied().collect())
        };
        Ok((grab(INTERMEDIATE_TAP)?, grab(OUTPUT_TAP)?))
    }

    /// Swaps the classification head for a freshly initialized `num_classes`-
    /// way fully connected layer. All other weights are copied unchanged, so
    /// intermediate-tap outputs are preserved exactly. New weights come from
    /// a seeded uniform distribution scaled by 1/sqrt(fan_in).
    pub fn replace_head(&self, num_classes: usize, seed: u64) -> Result<BackboneModel> {
        if num_classes < 2 {
            return Err(backbone_err(
                &self.name,
                format!("head needs at least 2 classes, got {num_classes}"),
            ));
        }
        let logits = self
            .network
            .logits_name()
            .ok_or_else(|| backbone_err(&self.name, "no softmax head found to replace"))?
            .to_string();
        let mut model = self.network.to_model();
        let head = model
            .graph
            .nodes
            .iter()
            .find(|n| n.op_type == "Gemm" && n.outputs[0] == logits)
            .ok_or_else(|| backbone_err(&self.name, "no fully connected head found to replace"))?
            .clone();

        let weight_name = head.inputs[1].clone();
        let bias_name = head.inputs.get(2).cloned();
        let fan_in = model
            .graph
            .initializers
            .iter()
            .find(|t| t.name == weight_name)
            .and_then(|t| t.dims.get(1).map(|&d| d as usize))
            .ok_or_else(|| backbone_err(&self.name, "head weights missing from graph"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = 1.0 / (fan_in as f32).sqrt();
        for init in &mut model.graph.initializers {
            if init.name == weight_name {
                init.dims = vec![num_classes as i64, fan_in as i64];
                init.values =
                    (0..num_classes * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
            } else if Some(&init.name) == bias_name.as_ref() {
                init.dims = vec![num_classes as i64];
                init.values = (0..num_classes).map(|_| rng.gen_range(-limit..limit)).collect();
            }
        }
        for output in &mut model.graph.outputs {
            if output.name == OUTPUT_TAP {
                if let Some(last) = output.shape.last_mut() {
                    *last = Dim::Value(num_classes as i64);
                }
            }
        }
        BackboneModel::from_model(model, &self.name, self.preprocessing)
    }

    /// Cross-entropy fine-tuning over all trainable weights (or the head
    /// alone with `freeze_body`). Images are resized square to the input side
    /// internally. Returns the tuned model and the per-epoch mean training
    /// loss. Runs single-threaded with seeded shuffling, so a given
    /// (data, seed) pair always produces the same trace and weights.
    pub fn fine_tune(
        &self,
        train: &[(RasterImage, usize)],
        cfg: &FineTuneConfig,
    ) -> Result<(BackboneModel, Vec<f64>)> {
        if train.is_empty() {
            return Err(backbone_err(&self.name, "empty training set"));
        }
        if cfg.num_classes < 2 {
            return Err(backbone_err(&self.name, "num_classes must be at least 2"));
        }
        if cfg.epochs == 0 {
            return Err(backbone_err(&self.name, "epochs must be at least 1"));
        }
        if !(cfg.learning_rate > 0.0) {
            return Err(backbone_err(&self.name, "learning_rate must be positive"));
        }
        if cfg.batch_size == 0 {
            return Err(backbone_err(&self.name, "batch_size must be at least 1"));
        }
        if self.output_dim != cfg.num_classes {
            return Err(backbone_err(
                &self.name,
                format!(
                    "head emits {} classes but the run expects {}; replace_head first",
                    self.output_dim, cfg.num_classes
                ),
            ));
        }
        for (i, (_, label)) in train.iter().enumerate() {
            if *label >= cfg.num_classes {
                return Err(backbone_err(
                    &self.name,
                    format!("label {label} at index {i} out of range for {} classes", cfg.num_classes),
                ));
            }
        }

        let mut tensors = Vec::with_capacity(train.len());
        for (img, _) in train {
            let sized = img.resize_square(self.input_side)?;
            tensors.push(self.to_input_tensor(&[&sized])?);
        }

        let mut network = Network::compile(&self.network.to_model())
            .map_err(|e| backbone_err(&self.name, e.to_string()))?;
        let logits = network
            .logits_name()
            .ok_or_else(|| backbone_err(&self.name, "no softmax head found"))?
            .to_string();
        if cfg.freeze_body {
            let head_params: Vec<String> = network
                .to_model()
                .graph
                .nodes
                .iter()
                .find(|n| n.op_type == "Gemm" && n.outputs[0] == logits)
                .map(|n| n.inputs[1..].to_vec())
                .unwrap_or_default();
            for param in network.params_mut() {
                if !head_params.iter().any(|h| h == &param.name) {
                    param.trainable = false;
                }
            }
        }

        let mut adam = Adam::new(cfg.learning_rate, network.params().len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut trace = Vec::with_capacity(cfg.epochs);
        let side = self.input_side;
        let mut order: Vec<usize> = (0..train.len()).collect();

        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0f64;
            for chunk in order.chunks(cfg.batch_size) {
                let mut batch = Array4::<f32>::zeros((chunk.len(), 3, side, side));
                for (slot, &idx) in chunk.iter().enumerate() {
                    batch
                        .index_axis_mut(ndarray::Axis(0), slot)
                        .assign(&tensors[idx].index_axis(ndarray::Axis(0), 0));
                }
                let tape = network.forward(&batch)?;
                let probs = network
                    .value(&tape, OUTPUT_TAP)
                    .expect("output tap recorded")
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("output tap is 2-d")
                    .to_owned();

                // Cross-entropy through softmax: gradient at the logits is
                // (probabilities - one-hot) / batch.
                let mut grad = probs.clone();
                let scale = 1.0 / chunk.len() as f32;
                for (slot, &idx) in chunk.iter().enumerate() {
                    let label = train[idx].1;
                    epoch_loss -= f64::from(probs[[slot, label]].max(1e-12)).ln();
                    grad[[slot, label]] -= 1.0;
                }
                grad.mapv_inplace(|g| g * scale);

                let param_grads = network.backward(&tape, &logits, grad.into_dyn())?;
                adam.step(network.params_mut(), &param_grads);
            }
            trace.push(epoch_loss / train.len() as f64);
        }

        let tuned = BackboneModel::from_model(network.to_model(), &self.name, self.preprocessing)?;
        Ok((tuned, trace))
    }
}

// ---------------------------------------------------------------------------
// registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize, serde::Serialize)]
pub struct RegistryEntry {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f32; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<[f32; 3]>,
}

#[derive(Debug, Deserialize)]
struct RegistryDoc {
    backbones: BTreeMap<String, RegistryEntry>,
}

/// Name → graph-file mapping with per-backbone preprocessing constants,
/// parsed from a `backbones.toml` file. Relative paths resolve against the
/// registry file's directory.
pub struct BackboneRegistry {
    dir: PathBuf,
    entries: BTreeMap<String, RegistryEntry>,
}

impl BackboneRegistry {
    pub fn load(path: &Path) -> Result<BackboneRegistry> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: format!("cannot read backbone registry: {e}"),
        })?;
        let doc: RegistryDoc = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: format!("invalid backbone registry: {e}"),
        })?;
        if doc.backbones.is_empty() {
            return Err(Error::Config {
                path: path.to_path_buf(),
                detail: "backbone registry declares no backbones".into(),
            });
        }
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(BackboneRegistry { dir, entries: doc.backbones })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    /// All entries keyed by name, with paths as written in the registry file
    /// (resolve relative ones against [`Self::dir`]).
    pub fn entries(&self) -> &BTreeMap<String, RegistryEntry> {
        &self.entries
    }

    /// Directory the registry file lives in; base for relative entry paths.
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn model_path(&self, name: &str) -> Option<PathBuf> {
        self.entries.get(name).map(|e| self.dir.join(&e.path))
    }

    pub fn load_backbone(&self, name: &str) -> Result<BackboneModel> {
        let entry = self.entries.get(name).ok_or_else(|| {
            backbone_err(
                name,
                format!("not in registry (available: {})", self.names().join(", ")),
            )
        })?;
        let mut model = load_backbone(&self.dir.join(&entry.path), name)?;
        let preprocessing = Preprocessing {
            mean: entry.mean.unwrap_or([0.0; 3]),
            std: entry.std.unwrap_or([1.0; 3]),
        };
        for std in preprocessing.std {
            if std <= 0.0 {
                return Err(backbone_err(name, "preprocessing std must be positive"));
            }
        }
        model.preprocessing = preprocessing;
        Ok(model)
    }
}
