//! Global feature extraction: one forward pass over the whole image, resized
//! square to the backbone's input side, yielding the pooled convolutional
//! vector (`global_intermediate`, length K), the class-probability vector
//! (`global_output`, length M), or their concatenation (`global_both`,
//! K then M — the order is fixed because cache entries depend on it).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::dataset::RasterImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    GlobalIntermediate,
    GlobalOutput,
    GlobalBoth,
    LocalSum,
    LocalFull,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::GlobalIntermediate,
        FeatureKind::GlobalOutput,
        FeatureKind::GlobalBoth,
        FeatureKind::LocalSum,
        FeatureKind::LocalFull,
    ];

    pub fn is_local(self) -> bool {
        matches!(self, FeatureKind::LocalSum | FeatureKind::LocalFull)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::GlobalIntermediate => "global_intermediate",
            FeatureKind::GlobalOutput => "global_output",
            FeatureKind::GlobalBoth => "global_both",
            FeatureKind::LocalSum => "local_sum",
            FeatureKind::LocalFull => "local_full",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Feature(format!(
                    "unknown feature kind `{s}` (expected one of {})",
                    FeatureKind::ALL.map(|k| k.as_str()).join(", ")
                ))
            })
    }
}

/// Patch settings for the local feature kinds. The 100-pixel overlap of
/// 224-wide windows corresponds to stride 124.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalParams {
    pub patch_side: usize,
    pub rescale_rows: usize,
    pub stride: usize,
}

impl Default for LocalParams {
    fn default() -> Self {
        Self { patch_side: 224, rescale_rows: 1120, stride: 124 }
    }
}

/// Identifies one feature flavor: which kind, from which backbone, and — for
/// local kinds — with which patch geometry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub backbone_name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params: Option<LocalParams>,
}

impl FeatureSpec {
    pub fn global(kind: FeatureKind, backbone_name: impl Into<String>) -> Result<FeatureSpec> {
        if kind.is_local() {
            return Err(Error::Feature(format!("{kind} needs patch parameters; use FeatureSpec::local")));
        }
        Ok(FeatureSpec { kind, backbone_name: backbone_name.into(), params: None })
    }

    pub fn local(
        kind: FeatureKind,
        backbone_name: impl Into<String>,
        params: LocalParams,
    ) -> Result<FeatureSpec> {
        if !kind.is_local() {
            return Err(Error::Feature(format!("{kind} takes no patch parameters")));
        }
        Ok(FeatureSpec { kind, backbone_name: backbone_name.into(), params: Some(params) })
    }

    /// Builds a spec for any kind, attaching default patch parameters to the
    /// local ones (overridden by `stride` when given).
    pub fn for_kind(
        kind: FeatureKind,
        backbone_name: impl Into<String>,
        stride: Option<usize>,
    ) -> FeatureSpec {
        let params = kind.is_local().then(|| LocalParams {
            stride: stride.unwrap_or(LocalParams::default().stride),
            ..LocalParams::default()
        });
        FeatureSpec { kind, backbone_name: backbone_name.into(), params }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.is_local(), &self.params) {
            (true, None) => Err(Error::Feature(format!(
                "{} spec is missing patch parameters",
                self.kind
            ))),
            (false, Some(_)) => Err(Error::Feature(format!(
                "{} spec must not carry patch parameters",
                self.kind
            ))),
            _ => {
                if let Some(p) = &self.params {
                    if p.stride == 0 || p.patch_side == 0 || p.rescale_rows < p.patch_side {
                        return Err(Error::Feature(format!(
                            "invalid patch parameters: patch {} rows {} stride {}",
                            p.patch_side, p.rescale_rows, p.stride
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Stable text form used in cache keys and report metadata; any change
    /// here invalidates existing caches.
    pub fn canonical(&self) -> String {
        match &self.params {
            None => format!("{}@{}", self.kind, self.backbone_name),
            Some(p) => format!(
                "{}@{}|patch={},rows={},stride={}",
                self.kind, self.backbone_name, p.patch_side, p.rescale_rows, p.stride
            ),
        }
    }

    /// Filesystem-safe short form for naming per-spec artifacts.
    pub fn file_slug(&self) -> String {
        let safe_backbone: String = self
            .backbone_name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        match &self.params {
            None => format!("{}-{}", self.kind, safe_backbone),
            Some(p) => format!(
                "{}-{}-p{}r{}s{}",
                self.kind, safe_backbone, p.patch_side, p.rescale_rows, p.stride
            ),
        }
    }
}

/// One extracted vector, tagged with the feature spec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub spec: FeatureSpec,
    pub values: Vec<f32>,
    pub image_id: String,
}

impl FeatureVector {
    pub fn new(spec: FeatureSpec, values: Vec<f32>) -> FeatureVector {
        FeatureVector { spec, values, image_id: String::new() }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Extracts a global feature vector; the image is resized square to the
/// backbone's input side internally.
pub fn global_features(
    model: &BackboneModel,
    img: &RasterImage,
    kind: FeatureKind,
) -> Result<FeatureVector> {
    if kind.is_local() {
        return Err(Error::Feature(format!(
            "{kind} is not a global kind; use the local extraction entry points"
        )));
    }
    let sized = img.resize_square(model.input_side)?;
    let (intermediate, output) = model.extract(&sized)?;
    let values = match kind {
        FeatureKind::GlobalIntermediate => intermediate,
        FeatureKind::GlobalOutput => output,
        FeatureKind::GlobalBoth => {
            let mut both = intermediate;
            both.extend_from_slice(&output);
            both
        }
        FeatureKind::LocalSum | FeatureKind::LocalFull => unreachable!("rejected above"),
    };
    Ok(FeatureVector::new(FeatureSpec::for_kind(kind, &model.name, None), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneModel, Preprocessing};
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_backbone() -> BackboneModel {
        let proto = synth::demo_backbone_model(5, 16, 10, 32);
        BackboneModel::from_model(proto, "demo", Preprocessing::default()).unwrap()
    }

    fn random_image(seed: u64, rows: usize, cols: usize) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..rows * cols * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        RasterImage::new(rows, cols, pixels).unwrap()
    }

    #[test]
    fn kinds_round_trip_through_strings() {
        for kind in FeatureKind::ALL {
            assert_eq!(kind.as_str().parse::<FeatureKind>().unwrap(), kind);
        }
        assert!("globalboth".parse::<FeatureKind>().is_err());
    }

    #[test]
    fn dims_follow_backbone_metadata() {
        let model = small_backbone();
        let img = random_image(1, 60, 45);
        let inter = global_features(&model, &img, FeatureKind::GlobalIntermediate).unwrap();
        let out = global_features(&model, &img, FeatureKind::GlobalOutput).unwrap();
        let both = global_features(&model, &img, FeatureKind::GlobalBoth).unwrap();
        assert_eq!(inter.dim(), model.intermediate_dim);
        assert_eq!(out.dim(), model.output_dim);
        assert_eq!(both.dim(), model.intermediate_dim + model.output_dim);
    }

    #[test]
    fn both_is_exact_concatenation() {
        let model = small_backbone();
        let img = random_image(2, 80, 80);
        let inter = global_features(&model, &img, FeatureKind::GlobalIntermediate).unwrap();
        let out = global_features(&model, &img, FeatureKind::GlobalOutput).unwrap();
        let both = global_features(&model, &img, FeatureKind::GlobalBoth).unwrap();
        assert_eq!(&both.values[..inter.dim()], &inter.values[..]);
        assert_eq!(&both.values[inter.dim()..], &out.values[..]);
    }

    #[test]
    fn output_kind_is_a_probability_vector() {
        let model = small_backbone();
        let out = global_features(&model, &random_image(3, 50, 70), FeatureKind::GlobalOutput)
            .unwrap();
        assert!(out.values.iter().all(|&v| v >= 0.0));
        let sum: f32 = out.values.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn extraction_is_deterministic() {
        let model = small_backbone();
        let img = random_image(4, 90, 40);
        let a = global_features(&model, &img, FeatureKind::GlobalBoth).unwrap();
        let b = global_features(&model, &img, FeatureKind::GlobalBoth).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn local_kinds_are_rejected() {
        let model = small_backbone();
        let err =
            global_features(&model, &random_image(5, 40, 40), FeatureKind::LocalSum).unwrap_err();
        assert!(err.to_string().contains("not a global kind"));
    }

    #[test]
    fn spec_validation_and_canonical_form() {
        let global = FeatureSpec::global(FeatureKind::GlobalBoth, "demo_a").unwrap();
        global.validate().unwrap();
        assert_eq!(global.canonical(), "global_both@demo_a");

        let local =
            FeatureSpec::local(FeatureKind::LocalSum, "demo_a", LocalParams::default()).unwrap();
        local.validate().unwrap();
        assert_eq!(local.canonical(), "local_sum@demo_a|patch=224,rows=1120,stride=124");

        assert!(FeatureSpec::global(FeatureKind::LocalSum, "demo_a").is_err());
        assert!(FeatureSpec::local(FeatureKind::GlobalBoth, "demo_a", LocalParams::default())
            .is_err());

        let missing = FeatureSpec {
            kind: FeatureKind::LocalFull,
            backbone_name: "demo_a".into(),
            params: None,
        };
        assert!(missing.validate().is_err());
    }
}
