//! Run configuration: one TOML file describing a whole run (data, backbones,
//! features, classifiers, seeds, output), with a small set of command-line
//! overrides layered on top.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifiers::ClassifierSpec;
use crate::error::{Error, Result};
use crate::features_global::{FeatureKind, FeatureSpec, LocalParams};

/// How per-event AUCs are summarized into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean of defined per-event AUCs.
    #[default]
    Macro,
    /// Single AUC over all pooled (item, event) score/label pairs.
    Micro,
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Macro => "macro",
            Averaging::Micro => "micro",
        })
    }
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "micro" => Ok(Averaging::Micro),
            other => Err(Error::Config {
                path: PathBuf::new(),
                detail: format!("unknown averaging `{other}` (expected macro or micro)"),
            }),
        }
    }
}

/// One `[[features]]` entry as written in TOML.
#[derive(Debug, Clone, Deserialize)]
struct FeatureEntry {
    kind: FeatureKind,
    backbone: String,
    patch_side: Option<usize>,
    rescale_rows: Option<usize>,
    stride: Option<usize>,
}

impl FeatureEntry {
    fn to_spec(&self) -> Result<FeatureSpec> {
        let has_patch_params =
            self.patch_side.is_some() || self.rescale_rows.is_some() || self.stride.is_some();
        let spec = if self.kind.is_local() {
            let defaults = LocalParams::default();
            FeatureSpec::local(
                self.kind,
                &self.backbone,
                LocalParams {
                    patch_side: self.patch_side.unwrap_or(defaults.patch_side),
                    rescale_rows: self.rescale_rows.unwrap_or(defaults.rescale_rows),
                    stride: self.stride.unwrap_or(defaults.stride),
                },
            )?
        } else {
            if has_patch_params {
                return Err(Error::Feature(format!(
                    "{} feature entry must not set patch parameters",
                    self.kind
                )));
            }
            FeatureSpec::global(self.kind, &self.backbone)?
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Optional backbone fine-tuning stage, run by `train` before classifiers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FineTuneSection {
    /// Registry name of the backbone to tune.
    pub backbone: String,
    /// Name under which the tuned copy is registered (default `{backbone}_tuned`).
    pub tuned_name: Option<String>,
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ft_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub freeze_body: bool,
}

fn default_ft_epochs() -> usize {
    10
}
fn default_ft_lr() -> f64 {
    1e-4
}
fn default_ft_batch() -> usize {
    32
}

impl FineTuneSection {
    pub fn resolved_name(&self) -> String {
        self.tuned_name.clone().unwrap_or_else(|| format!("{}_tuned", self.backbone))
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawConfig {
    manifest: PathBuf,
    registry: PathBuf,
    out_dir: PathBuf,
    cache_dir: Option<PathBuf>,
    seed: Option<u64>,
    repeats: Option<usize>,
    averaging: Option<Averaging>,
    #[serde(default)]
    features: Vec<FeatureEntry>,
    #[serde(default)]
    classifiers: Vec<ClassifierSpec>,
    fine_tune: Option<FineTuneSection>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub registry: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub seed: u64,
    pub repeats: usize,
    pub averaging: Averaging,
    pub features: Vec<FeatureSpec>,
    pub classifiers: Vec<ClassifierSpec>,
    pub fine_tune: Option<FineTuneSection>,
}

/// Command-line overrides applied after the file is parsed.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Retarget every feature spec to this backbone.
    pub backbone: Option<String>,
    /// Keep only features of this kind (adding one with default parameters
    /// if the config has none).
    pub features: Option<FeatureKind>,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: format!("cannot read config: {e}"),
        })?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        let out_dir = resolve(&overrides.out.clone().unwrap_or_else(|| raw.out_dir.clone()));
        let cache_dir = raw
            .cache_dir
            .as_deref()
            .map(resolve)
            .unwrap_or_else(|| out_dir.join("cache"));

        let mut features = raw
            .features
            .iter()
            .map(FeatureEntry::to_spec)
            .collect::<Result<Vec<_>>>()?;
        if let Some(name) = &overrides.backbone {
            for spec in &mut features {
                spec.backbone_name = name.clone();
            }
        }
        if let Some(kind) = overrides.features {
            let matching: Vec<FeatureSpec> =
                features.iter().filter(|s| s.kind == kind).cloned().collect();
            features = if matching.is_empty() {
                let backbone = overrides
                    .backbone
                    .clone()
                    .or_else(|| features.first().map(|s| s.backbone_name.clone()))
                    .ok_or_else(|| Error::Config {
                        path: path.to_path_buf(),
                        detail: format!(
                            "--features {kind} given but the config lists no features \
                             to take a backbone from"
                        ),
                    })?;
                vec![FeatureSpec::for_kind(kind, backbone, None)]
            } else {
                matching
            };
        }

        let config = RunConfig {
            manifest: resolve(&raw.manifest),
            registry: resolve(&raw.registry),
            out_dir,
            cache_dir,
            seed: overrides.seed.unwrap_or(raw.seed.unwrap_or(0)),
            repeats: overrides.repeats.unwrap_or(raw.repeats.unwrap_or(1)),
            averaging: raw.averaging.unwrap_or_default(),
            features,
            classifiers: raw.classifiers,
            fine_tune: raw.fine_tune,
        };
        config.validate(path)?;
        Ok(config)
    }

    fn validate(&self, config_path: &Path) -> Result<()> {
        let err = |detail: String| Error::Config {
            path: config_path.to_path_buf(),
            detail,
        };
        if !self.manifest.is_file() {
            return Err(err(format!("manifest not found: {}", self.manifest.display())));
        }
        if !self.registry.is_file() {
            return Err(err(format!("registry not found: {}", self.registry.display())));
        }
        if self.features.is_empty() {
            return Err(err("config lists no features".into()));
        }
        if self.classifiers.is_empty() {
            return Err(err("config lists no classifiers".into()));
        }
        if self.repeats == 0 {
            return Err(err("repeats must be at least 1".into()));
        }
        for spec in &self.features {
            spec.validate()?;
        }
        for spec in &self.classifiers {
            spec.validate()?;
        }
        if let Some(ft) = &self.fine_tune {
            if ft.epochs == 0 {
                return Err(err("fine_tune.epochs must be at least 1".into()));
            }
            if !(ft.learning_rate > 0.0) {
                return Err(err("fine_tune.learning_rate must be positive".into()));
            }
            if ft.batch_size == 0 {
                return Err(err("fine_tune.batch_size must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ClassifierFamily;
    use std::fs;
    use tempfile::tempdir;

    fn write_fixture(dir: &Path, config_body: &str) -> PathBuf {
        fs::write(dir.join("manifest.csv"), "id,path,event,split\n").unwrap();
        fs::write(dir.join("backbones.toml"), "").unwrap();
        let path = dir.join("run.toml");
        fs::write(&path, config_body).unwrap();
        path
    }

    const MINIMAL: &str = r#"
manifest = "manifest.csv"
registry = "backbones.toml"
out_dir = "out"

[[features]]
kind = "global_intermediate"
backbone = "demo_a"

[[classifiers]]
family = "extra_trees"
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempdir().unwrap();
        let path = write_fixture(dir.path(), MINIMAL);
        let cfg = RunConfig::load(&path, &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.repeats, 1);
        assert_eq!(cfg.averaging, Averaging::Macro);
        assert_eq!(cfg.cache_dir, dir.path().join("out").join("cache"));
        assert_eq!(cfg.manifest, dir.path().join("manifest.csv"));
        assert_eq!(cfg.features.len(), 1);
        assert_eq!(cfg.classifiers[0].family, ClassifierFamily::ExtraTrees);
        assert_eq!(cfg.classifiers[0].n_trees, 100);
    }

    #[test]
    fn local_features_get_default_patch_params() {
        let dir = tempdir().unwrap();
        let body = MINIMAL.replace("global_intermediate", "local_sum");
        let path = write_fixture(dir.path(), &body);
        let cfg = RunConfig::load(&path, &Overrides::default()).unwrap();
        let params = cfg.features[0].params.unwrap();
        assert_eq!((params.patch_side, params.rescale_rows, params.stride), (224, 1120, 124));
    }

    #[test]
    fn global_feature_with_stride_is_rejected() {
        let dir = tempdir().unwrap();
        let body = MINIMAL.replace(
            "backbone = \"demo_a\"",
            "backbone = \"demo_a\"\nstride = 124",
        );
        let path = write_fixture(dir.path(), &body);
        let err = RunConfig::load(&path, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("patch parameters"), "{err}");
    }

    #[test]
    fn overrides_replace_backbone_seed_and_out() {
        let dir = tempdir().unwrap();
        let path = write_fixture(dir.path(), MINIMAL);
        let overrides = Overrides {
            backbone: Some("demo_b".into()),
            seed: Some(42),
            out: Some(PathBuf::from("elsewhere")),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(&path, &overrides).unwrap();
        assert_eq!(cfg.features[0].backbone_name, "demo_b");
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.out_dir, dir.path().join("elsewhere"));
    }

    #[test]
    fn feature_kind_override_filters_or_synthesizes() {
        let dir = tempdir().unwrap();
        let path = write_fixture(dir.path(), MINIMAL);
        // No local_sum entry in the config: one is synthesized with defaults.
        let overrides =
            Overrides { features: Some(FeatureKind::LocalSum), ..Overrides::default() };
        let cfg = RunConfig::load(&path, &overrides).unwrap();
        assert_eq!(cfg.features.len(), 1);
        assert_eq!(cfg.features[0].kind, FeatureKind::LocalSum);
        assert_eq!(cfg.features[0].backbone_name, "demo_a");
        assert!(cfg.features[0].params.is_some());
    }

    #[test]
    fn missing_manifest_is_a_config_error() {
        let dir = tempdir().unwrap();
        let path = write_fixture(dir.path(), MINIMAL);
        fs::remove_file(dir.path().join("manifest.csv")).unwrap();
        let err = RunConfig::load(&path, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("manifest"), "{err}");
    }

    #[test]
    fn unknown_family_is_a_config_error() {
        let dir = tempdir().unwrap();
        let body = MINIMAL.replace("extra_trees", "boosted_stumps");
        let path = write_fixture(dir.path(), &body);
        let err = RunConfig::load(&path, &Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{err}");
    }

    #[test]
    fn fine_tune_section_parses_with_defaults() {
        let dir = tempdir().unwrap();
        let body = format!("{MINIMAL}\n[fine_tune]\nbackbone = \"demo_a\"\n");
        let path = write_fixture(dir.path(), &body);
        let cfg = RunConfig::load(&path, &Overrides::default()).unwrap();
        let ft = cfg.fine_tune.unwrap();
        assert_eq!(ft.backbone, "demo_a");
        assert_eq!(ft.epochs, 10);
        assert_eq!(ft.learning_rate, 1e-4);
        assert_eq!(ft.batch_size, 32);
        assert!(!ft.freeze_body);
        assert_eq!(ft.resolved_name(), "demo_a_tuned");
    }
}
