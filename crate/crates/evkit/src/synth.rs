//! Synthetic verification corpus: procedurally textured "events" plus a set
//! of compact, randomly initialized demo backbones.
//!
//! The generator exists so the full pipeline — extraction, training,
//! evaluation, grid sweeps — can run end to end without any external dataset
//! or pretrained weights. Each event is a distinct texture family (stripes,
//! blobs, checkers, …) with per-image jitter, so transfer features from even
//! an untrained convolutional stack separate the classes while shuffled
//! labels stay at chance.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::onnx::{
    self, AttributeProto, Dim, GraphProto, ModelProto, NodeProto, TensorProto, ValueInfoProto,
};
use crate::dataset::RasterImage;
use crate::error::{Error, Result};

/// Event names available to the generator, in manifest order.
pub const EVENT_NAMES: [&str; 8] = [
    "aurora", "bonfire", "carnival", "derby", "eclipse", "flotilla", "gala", "harvest",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub out_dir: PathBuf,
    pub events: usize,
    pub train_per_event: usize,
    pub test_per_event: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            events: 4,
            train_per_event: 40,
            test_per_event: 20,
            seed: 7,
        }
    }
}

/// Writes `events × (train + test)` PNG images plus a `manifest.csv` under
/// `cfg.out_dir` and returns the manifest path.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<PathBuf> {
    if cfg.events < 2 || cfg.events > EVENT_NAMES.len() {
        return Err(Error::Config {
            path: cfg.out_dir.clone(),
            detail: format!(
                "synthetic corpus needs between 2 and {} events, got {}",
                EVENT_NAMES.len(),
                cfg.events
            ),
        });
    }
    if cfg.train_per_event == 0 || cfg.test_per_event == 0 {
        return Err(Error::Config {
            path: cfg.out_dir.clone(),
            detail: "train_per_event and test_per_event must be at least 1".into(),
        });
    }
    let image_dir = cfg.out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let mut rows = vec!["id,path,event,split".to_string()];
    for (event_idx, event) in EVENT_NAMES.iter().take(cfg.events).enumerate() {
        for (split, count) in [("train", cfg.train_per_event), ("test", cfg.test_per_event)] {
            for i in 0..count {
                let id = format!("{event}_{split}_{i:03}");
                // One independent stream per image: corpus content is stable
                // under changes to event count or split sizes elsewhere.
                let mut rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed
                        ^ (event_idx as u64) << 48
                        ^ if split == "train" { 0 } else { 1 << 40 }
                        ^ i as u64,
                );
                let img = texture_image(event_idx, &mut rng);
                let rel = format!("images/{id}.png");
                img.save_png(&cfg.out_dir.join(&rel))?;
                rows.push(format!("{id},{rel},{event},{split}"));
            }
        }
    }
    let manifest = cfg.out_dir.join("manifest.csv");
    std::fs::write(&manifest, rows.join("\n") + "\n")?;
    Ok(manifest)
}

/// Base colors per event family: (foreground, background).
const PALETTES: [([f32; 3], [f32; 3]); 8] = [
    ([0.15, 0.70, 0.45], [0.05, 0.30, 0.25]), // aurora: green bands
    ([0.90, 0.45, 0.10], [0.25, 0.08, 0.05]), // bonfire: warm blobs
    ([0.85, 0.15, 0.75], [0.10, 0.70, 0.80]), // carnival: magenta/cyan checkers
    ([0.15, 0.25, 0.85], [0.90, 0.90, 0.95]), // derby: blue/white diagonals
    ([0.55, 0.10, 0.60], [0.95, 0.80, 0.30]), // eclipse: violet rings
    ([0.10, 0.55, 0.85], [0.80, 0.85, 0.90]), // flotilla: cold verticals
    ([0.95, 0.75, 0.15], [0.35, 0.20, 0.45]), // gala: gold checkers
    ([0.60, 0.45, 0.15], [0.20, 0.40, 0.15]), // harvest: earthy diagonals
];

fn texture_image(event_idx: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    let rows = rng.gen_range(240..=360usize);
    let cols = (rows as f64 * rng.gen_range(0.8..1.4)).round() as usize;
    let (fg, bg) = PALETTES[event_idx % PALETTES.len()];
    let period = rng.gen_range(14.0..30.0f32);
    let phase = rng.gen_range(0.0..period);
    let noise = 0.06f32;

    // Blob parameters only used by the blob family; drawn unconditionally so
    // every family consumes the same RNG stream length per image.
    let blob_count = rng.gen_range(6..=12usize);
    let blobs: Vec<(f32, f32, f32)> = (0..blob_count)
        .map(|_| {
            (
                rng.gen_range(0.0..rows as f32),
                rng.gen_range(0.0..cols as f32),
                rng.gen_range(0.12..0.30) * rows as f32,
            )
        })
        .collect();

    let mut pixels = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let (rf, cf) = (r as f32, c as f32);
            // Foreground weight in [0,1], family-specific.
            let w = match event_idx % 4 {
                // horizontal sinusoidal bands
                0 => 0.5 + 0.5 * ((rf + phase) / period * std::f32::consts::TAU).sin(),
                // soft blobs: nearest-blob falloff
                1 => blobs
                    .iter()
                    .map(|&(br, bc, rad)| {
                        let d2 = (rf - br).powi(2) + (cf - bc).powi(2);
                        (1.0 - d2 / (rad * rad)).max(0.0)
                    })
                    .fold(0.0f32, f32::max),
                // checkerboard
                2 => {
                    let cell = period.max(8.0);
                    if ((rf / cell).floor() + (cf / cell).floor()) as i64 % 2 == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                // diagonal stripes
                _ => {
                    if (((rf + cf + phase) / period).floor()) as i64 % 2 == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            for ch in 0..3 {
                let base = bg[ch] + (fg[ch] - bg[ch]) * w;
                let v = base + rng.gen_range(-noise..noise);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    RasterImage::new(rows, cols, pixels).expect("texture dimensions are consistent")
}

// ---------------------------------------------------------------------------
// demo backbones
// ---------------------------------------------------------------------------

fn uniform_tensor(
    name: &str,
    dims: &[usize],
    limit: f32,
    rng: &mut ChaCha8Rng,
) -> TensorProto {
    let len: usize = dims.iter().product();
    TensorProto {
        name: name.into(),
        dims: dims.iter().map(|&d| d as i64).collect(),
        values: (0..len).map(|_| rng.gen_range(-limit..limit)).collect(),
    }
}

fn const_tensor(name: &str, len: usize, value: f32) -> TensorProto {
    TensorProto { name: name.into(), dims: vec![len as i64], values: vec![value; len] }
}

fn conv_node(name: &str, inputs: [&str; 3], output: &str, stride: i64) -> NodeProto {
    NodeProto {
        name: name.into(),
        op_type: "Conv".into(),
        inputs: inputs.map(String::from).to_vec(),
        outputs: vec![output.into()],
        attributes: vec![
            AttributeProto::ints("kernel_shape", vec![3, 3]),
            AttributeProto::ints("strides", vec![stride, stride]),
            AttributeProto::ints("pads", vec![1, 1, 1, 1]),
        ],
    }
}

fn unary_node(name: &str, op: &str, input: &str, output: &str) -> NodeProto {
    NodeProto {
        name: name.into(),
        op_type: op.into(),
        inputs: vec![input.into()],
        outputs: vec![output.into()],
        attributes: vec![],
    }
}

/// Builds a compact classification graph exposing the standard taps:
/// a strided convolutional stack with one residual block, globally pooled to
/// `intermediate` (length `intermediate_dim`), then a fully connected layer
/// plus softmax as `output` (length `output_dim`). Weights are seeded
/// fan-in-scaled uniforms, so three seeds give three distinct backbones.
pub fn demo_backbone_model(
    seed: u64,
    intermediate_dim: usize,
    output_dim: usize,
    input_side: usize,
) -> ModelProto {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = intermediate_dim;
    let lim = |fan_in: usize| (6.0 / fan_in as f32).sqrt();
    let initializers = vec![
        uniform_tensor("conv1_w", &[8, 3, 3, 3], lim(27), &mut rng),
        const_tensor("conv1_b", 8, 0.0),
        const_tensor("bn1_scale", 8, 1.0),
        const_tensor("bn1_bias", 8, 0.0),
        const_tensor("bn1_mean", 8, 0.0),
        const_tensor("bn1_var", 8, 1.0),
        uniform_tensor("conv2_w", &[16, 8, 3, 3], lim(72), &mut rng),
        const_tensor("conv2_b", 16, 0.0),
        uniform_tensor("conv3a_w", &[16, 16, 3, 3], lim(144), &mut rng),
        const_tensor("conv3a_b", 16, 0.0),
        uniform_tensor("conv3b_w", &[16, 16, 3, 3], lim(144), &mut rng),
        const_tensor("conv3b_b", 16, 0.0),
        uniform_tensor("conv4_w", &[k, 16, 3, 3], lim(144), &mut rng),
        const_tensor("conv4_b", k, 0.0),
        uniform_tensor("head_w", &[output_dim, k], 1.0 / (k as f32).sqrt(), &mut rng),
        uniform_tensor("head_b", &[output_dim], 1.0 / (k as f32).sqrt(), &mut rng),
    ];
    let nodes = vec![
        conv_node("conv1", ["input", "conv1_w", "conv1_b"], "c1", 2),
        NodeProto {
            name: "bn1".into(),
            op_type: "BatchNormalization".into(),
            inputs: ["c1", "bn1_scale", "bn1_bias", "bn1_mean", "bn1_var"]
                .map(String::from)
                .to_vec(),
            outputs: vec!["b1".into()],
            attributes: vec![AttributeProto::float("epsilon", 1e-5)],
        },
        unary_node("relu1", "Relu", "b1", "r1"),
        NodeProto {
            name: "pool1".into(),
            op_type: "MaxPool".into(),
            inputs: vec!["r1".into()],
            outputs: vec!["p1".into()],
            attributes: vec![
                AttributeProto::ints("kernel_shape", vec![2, 2]),
                AttributeProto::ints("strides", vec![2, 2]),
            ],
        },
        conv_node("conv2", ["p1", "conv2_w", "conv2_b"], "c2", 2),
        unary_node("relu2", "Relu", "c2", "r2"),
        conv_node("conv3a", ["r2", "conv3a_w", "conv3a_b"], "c3a", 1),
        unary_node("relu3a", "Relu", "c3a", "r3a"),
        conv_node("conv3b", ["r3a", "conv3b_w", "conv3b_b"], "c3b", 1),
        NodeProto {
            name: "residual".into(),
            op_type: "Add".into(),
            inputs: vec!["c3b".into(), "r2".into()],
            outputs: vec!["s3".into()],
            attributes: vec![],
        },
        unary_node("relu3b", "Relu", "s3", "r3b"),
        conv_node("conv4", ["r3b", "conv4_w", "conv4_b"], "c4", 2),
        unary_node("relu4", "Relu", "c4", "r4"),
        unary_node("gap", "GlobalAveragePool", "r4", "pooled"),
        unary_node("flatten", "Flatten", "pooled", "intermediate"),
        NodeProto {
            name: "head".into(),
            op_type: "Gemm".into(),
            inputs: ["intermediate", "head_w", "head_b"].map(String::from).to_vec(),
            outputs: vec!["logits".into()],
            attributes: vec![AttributeProto::int("transB", 1)],
        },
        unary_node("softmax", "Softmax", "logits", "output"),
    ];
    ModelProto {
        ir_version: 8,
        producer_name: "evkit".into(),
        opset_version: 13,
        graph: GraphProto {
            name: format!("demo-{seed}"),
            nodes,
            initializers,
            inputs: vec![ValueInfoProto {
                name: "input".into(),
                shape: vec![
                    Dim::Param("batch".into()),
                    Dim::Value(3),
                    Dim::Value(input_side as i64),
                    Dim::Value(input_side as i64),
                ],
            }],
            outputs: vec![
                ValueInfoProto {
                    name: "intermediate".into(),
                    shape: vec![Dim::Param("batch".into()), Dim::Value(k as i64)],
                },
                ValueInfoProto {
                    name: "output".into(),
                    shape: vec![Dim::Param("batch".into()), Dim::Value(output_dim as i64)],
                },
            ],
        },
    }
}

/// The (name, seed, intermediate width) of each bundled demo backbone.
pub const DEMO_BACKBONES: [(&str, u64, usize); 3] =
    [("demo_a", 101, 32), ("demo_b", 202, 24), ("demo_c", 303, 40)];

/// Writes the three demo backbone graphs plus a `backbones.toml` registry
/// into `dir` and returns the registry path. Stock-style 1000-class heads.
pub fn write_demo_backbones(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut registry = String::from("# Registry of demo backbones with their preprocessing.\n");
    for (name, seed, k) in DEMO_BACKBONES {
        let model = demo_backbone_model(seed, k, 1000, 224);
        onnx::write_model(&dir.join(format!("{name}.onnx")), &model)?;
        registry.push_str(&format!(
            "\n[backbones.{name}]\npath = \"{name}.onnx\"\nmean = [0.5, 0.5, 0.5]\nstd = [0.5, 0.5, 0.5]\n"
        ));
    }
    let registry_path = dir.join("backbones.toml");
    std::fs::write(&registry_path, registry)?;
    Ok(registry_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset;

    #[test]
    fn corpus_manifest_loads_and_balances() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(dir.path());
        cfg.train_per_event = 3;
        cfg.test_per_event = 2;
        let manifest_path = generate_corpus(&cfg).unwrap();
        let manifest = dataset::load_manifest(&manifest_path).unwrap();
        assert_eq!(manifest.events(), ["aurora", "bonfire", "carnival", "derby"]);
        assert_eq!(manifest.records().len(), 4 * 5);
        for record in manifest.records() {
            let img = RasterImage::from_file(&record.path).unwrap();
            assert!(img.rows() >= 240 && img.cols() >= 150);
        }
    }

    #[test]
    fn corpus_generation_is_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            let mut cfg = SynthConfig::new(dir.path());
            cfg.train_per_event = 1;
            cfg.test_per_event = 1;
            cfg.events = 2;
            generate_corpus(&cfg).unwrap();
        }
        let a = std::fs::read(dir_a.path().join("images/aurora_train_000.png")).unwrap();
        let b = std::fs::read(dir_b.path().join("images/aurora_train_000.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn event_count_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::new(dir.path());
        cfg.events = 1;
        assert!(generate_corpus(&cfg).is_err());
        cfg.events = 99;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn demo_backbones_have_distinct_weights() {
        let a = demo_backbone_model(101, 32, 1000, 224);
        let b = demo_backbone_model(202, 32, 1000, 224);
        assert_ne!(a.graph.initializers[0].values, b.graph.initializers[0].values);
    }
}
