//! The four run stages behind the CLI: feature extraction into the cache,
//! classifier training (with optional backbone fine-tuning), evaluation of
//! saved models, and the full feature × classifier grid sweep.
//!
//! Stages communicate only through files — the feature cache, saved model
//! containers, and the merged backbone registry — so each stage can run in a
//! separate process. Everything is seeded and rayon is only applied to
//! independent work items collected back in index order, so a stage rerun
//! with the same inputs produces byte-identical artifacts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{BackboneModel, BackboneRegistry, FineTuneConfig};
use crate::classifiers::{fit, load_classifier, ClassifierSpec, TrainedClassifier};
use crate::config::{Averaging, FineTuneSection, RunConfig};
use crate::dataset::{load_manifest, DatasetManifest, ImageRecord, RasterImage, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvaluationReport};
use crate::features_global::{global_features, FeatureKind, FeatureSpec, FeatureVector};
use crate::features_local::{full_features_with, sum_features_with};
use crate::report;
use crate::store::{cache_key, file_digest, CacheEntry, CacheLookup, FeatureCache};

/// Lazily loaded backbones shared across feature specs. Fine-tuned models are
/// inserted directly so specs referencing them resolve within the same run.
pub struct ModelPool {
    registry: BackboneRegistry,
    loaded: Mutex<HashMap<String, Arc<BackboneModel>>>,
}

impl ModelPool {
    pub fn new(registry: BackboneRegistry) -> ModelPool {
        ModelPool { registry, loaded: Mutex::new(HashMap::new()) }
    }

    pub fn registry(&self) -> &BackboneRegistry {
        &self.registry
    }

    pub fn get(&self, name: &str) -> Result<Arc<BackboneModel>> {
        if let Some(model) = self.loaded.lock().unwrap().get(name) {
            return Ok(model.clone());
        }
        let model = Arc::new(self.registry.load_backbone(name)?);
        let mut loaded = self.loaded.lock().unwrap();
        Ok(loaded.entry(name.to_string()).or_insert(model).clone())
    }

    pub fn insert(&self, model: BackboneModel) {
        self.loaded.lock().unwrap().insert(model.name.clone(), Arc::new(model));
    }
}

/// Opens the registry a stage should use: the merged one written by a
/// fine-tuning `train` run when present, the configured one otherwise.
pub fn open_registry(config: &RunConfig) -> Result<BackboneRegistry> {
    let merged = config.out_dir.join("backbones").join("backbones.toml");
    if config.fine_tune.is_some() && merged.is_file() {
        BackboneRegistry::load(&merged)
    } else {
        BackboneRegistry::load(&config.registry)
    }
}

/// Extracts one feature vector according to `spec` (whose backbone must be
/// the given model). Input sizing is handled by the extractors themselves.
pub fn compute_feature(
    model: &BackboneModel,
    img: &RasterImage,
    spec: &FeatureSpec,
) -> Result<FeatureVector> {
    spec.validate()?;
    let params = &spec.params;
    match spec.kind {
        FeatureKind::LocalSum => sum_features_with(model, img, params.as_ref().unwrap()),
        FeatureKind::LocalFull => full_features_with(model, img, params.as_ref().unwrap()),
        kind => global_features(model, img, kind),
    }
}

/// One split's features with their event labels, index-aligned.
pub struct SplitFeatures {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<String>,
}

/// Everything one feature spec yields for a dataset.
pub struct FeatureSet {
    pub spec: FeatureSpec,
    pub backbone_digest: String,
    pub train: SplitFeatures,
    pub test: SplitFeatures,
}

fn feature_for_record(
    record: &ImageRecord,
    model: &BackboneModel,
    spec: &FeatureSpec,
    cache: &FeatureCache,
    strict: bool,
) -> Result<(FeatureVector, bool)> {
    let digest = file_digest(&record.path)?;
    let key = cache_key(&digest, spec, model.digest());
    let lookup = cache.get(&key);
    if let CacheLookup::Hit(values) = lookup {
        let fv = FeatureVector {
            spec: spec.clone(),
            values,
            image_id: record.id.clone(),
        };
        return Ok((fv, true));
    }
    if strict {
        return Err(Error::MissingFeatures {
            key,
            image_id: record.id.clone(),
            spec: spec.canonical(),
        });
    }
    if let CacheLookup::Corrupt(detail) = &lookup {
        eprintln!("warning: {detail}; recomputing");
    }
    let img = RasterImage::from_file(&record.path)?;
    let mut fv = compute_feature(model, &img, spec)?;
    fv.image_id = record.id.clone();
    cache.put(&CacheEntry {
        key,
        spec: spec.canonical(),
        image_id: record.id.clone(),
        values: fv.values.clone(),
    })?;
    Ok((fv, false))
}

/// Per-record results computed in parallel but returned in record order, with
/// the first error (in record order) winning.
fn features_for_split(
    records: &[&ImageRecord],
    model: &BackboneModel,
    spec: &FeatureSpec,
    cache: &FeatureCache,
    strict: bool,
) -> Result<(SplitFeatures, usize)> {
    let results: Vec<Result<(FeatureVector, bool)>> = records
        .par_iter()
        .map(|record| feature_for_record(record, model, spec, cache, strict))
        .collect();
    let mut features = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut hits = 0;
    for (record, result) in records.iter().zip(results) {
        let (fv, hit) = result?;
        features.push(fv);
        labels.push(record.event.clone());
        hits += hit as usize;
    }
    Ok((SplitFeatures { features, labels }, hits))
}

/// Computes or loads every feature for `spec` over both splits. With
/// `strict`, absent cache entries are an error instead of work.
pub fn gather_features(
    manifest: &DatasetManifest,
    pool: &ModelPool,
    cache: &FeatureCache,
    spec: &FeatureSpec,
    strict: bool,
) -> Result<FeatureSet> {
    spec.validate()?;
    let model = pool.get(&spec.backbone_name)?;
    let train_records: Vec<&ImageRecord> = manifest.split(Split::Train).collect();
    let test_records: Vec<&ImageRecord> = manifest.split(Split::Test).collect();
    let (train, _) = features_for_split(&train_records, &model, spec, cache, strict)?;
    let (test, _) = features_for_split(&test_records, &model, spec, cache, strict)?;
    Ok(FeatureSet {
        spec: spec.clone(),
        backbone_digest: model.digest().to_string(),
        train,
        test,
    })
}

/// Effective training seed for one classifier in one repeat. Reduces to the
/// classifier's own seed at run seed 0, repeat 0, so isolated unit runs and
/// pipeline runs agree by default.
pub fn repeat_seed(spec_seed: u64, run_seed: u64, repeat: usize) -> u64 {
    spec_seed
        ^ run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (repeat as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Human-readable, filesystem-safe, unique labels for the configured
/// classifiers, in config order. Duplicates get `-2`, `-3`, … suffixes.
pub fn classifier_labels(specs: &[ClassifierSpec]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    specs
        .iter()
        .map(|spec| {
            let base = spec.label();
            let count = seen.entry(base.clone()).or_insert(0);
            *count += 1;
            if *count == 1 {
                base
            } else {
                format!("{base}-{count}")
            }
        })
        .collect()
}

fn summary_auc(report: &EvaluationReport, averaging: Averaging) -> Option<f64> {
    match averaging {
        Averaging::Macro => report.macro_auc,
        Averaging::Micro => report.micro_auc,
    }
}

fn fit_with_seed(
    spec: &ClassifierSpec,
    run_seed: u64,
    repeat: usize,
    train: &SplitFeatures,
) -> Result<TrainedClassifier> {
    let mut spec = spec.clone();
    spec.seed = repeat_seed(spec.seed, run_seed, repeat);
    fit(&spec, &train.features, &train.labels)
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct ExtractSummary {
    pub records: usize,
    pub specs: usize,
    pub computed: usize,
    pub cache_hits: usize,
    pub cache_dir: PathBuf,
}

/// Computes every configured feature for every manifest record into the
/// cache. Already-cached vectors are counted as hits and left untouched.
pub fn cmd_extract(config: &RunConfig) -> Result<ExtractSummary> {
    let manifest = load_manifest(&config.manifest)?;
    let pool = ModelPool::new(open_registry(config)?);
    let cache = FeatureCache::open(&config.cache_dir)?;
    let records: Vec<&ImageRecord> = manifest.records().iter().collect();

    let mut computed = 0;
    let mut cache_hits = 0;
    for spec in &config.features {
        spec.validate()?;
        let model = pool.get(&spec.backbone_name)?;
        let (_, hits) = features_for_split(&records, &model, spec, &cache, false)?;
        cache_hits += hits;
        computed += records.len() - hits;
    }
    Ok(ExtractSummary {
        records: records.len(),
        specs: config.features.len(),
        computed,
        cache_hits,
        cache_dir: config.cache_dir.clone(),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct FineTuneSummary {
    pub backbone: String,
    pub tuned_name: String,
    pub tuned_digest: String,
    pub model_path: PathBuf,
    pub registry_path: PathBuf,
    pub trace_path: PathBuf,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct TrainedModelInfo {
    pub feature: String,
    pub classifier: String,
    pub path: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub models: Vec<TrainedModelInfo>,
    pub fine_tune: Option<FineTuneSummary>,
}

fn run_fine_tune(
    config: &RunConfig,
    manifest: &DatasetManifest,
    pool: &ModelPool,
    section: &FineTuneSection,
) -> Result<FineTuneSummary> {
    let base = pool.get(&section.backbone)?;
    let num_classes = manifest.events().len();

    let train_records: Vec<&ImageRecord> = manifest.split(Split::Train).collect();
    let loaded: Vec<Result<(RasterImage, usize)>> = train_records
        .par_iter()
        .map(|record| {
            let img = RasterImage::from_file(&record.path)?;
            let label = manifest
                .event_index(&record.event)
                .expect("manifest events cover every record");
            Ok((img, label))
        })
        .collect();
    let train: Vec<(RasterImage, usize)> = loaded.into_iter().collect::<Result<_>>()?;

    let with_head = base.replace_head(num_classes, config.seed)?;
    let ft_config = FineTuneConfig {
        num_classes,
        learning_rate: section.learning_rate as f32,
        epochs: section.epochs,
        batch_size: section.batch_size,
        seed: config.seed,
        freeze_body: section.freeze_body,
    };
    let (mut tuned, loss_trace) = with_head.fine_tune(&train, &ft_config)?;
    tuned.name = section.resolved_name();

    let backbone_dir = config.out_dir.join("backbones");
    fs::create_dir_all(&backbone_dir)?;
    let model_path = backbone_dir.join(format!("{}.onnx", tuned.name));
    tuned.save(&model_path)?;
    let registry_path = write_merged_registry(pool.registry(), &backbone_dir, &tuned)?;

    let trace_path = config.out_dir.join("fine_tune_trace.json");
    let trace_doc = serde_json::json!({
        "schema_version": 1,
        "backbone": section.backbone,
        "tuned_name": tuned.name,
        "tuned_digest": tuned.digest(),
        "num_classes": num_classes,
        "epochs": section.epochs,
        "learning_rate": section.learning_rate,
        "batch_size": section.batch_size,
        "freeze_body": section.freeze_body,
        "seed": config.seed,
        "loss_trace": loss_trace,
    });
    report::write_json(&trace_path, &trace_doc)?;

    let summary = FineTuneSummary {
        backbone: section.backbone.clone(),
        tuned_name: tuned.name.clone(),
        tuned_digest: tuned.digest().to_string(),
        model_path,
        registry_path,
        trace_path,
        loss_trace,
    };
    pool.insert(tuned);
    Ok(summary)
}

#[derive(Serialize)]
struct RegistryEntryOut {
    path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<[f32; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    std: Option<[f32; 3]>,
}

#[derive(Serialize)]
struct RegistryOut {
    backbones: BTreeMap<String, RegistryEntryOut>,
}

/// Writes `{dir}/backbones.toml` containing every original entry (paths made
/// absolute so they keep resolving from the new location) plus the tuned
/// model next to it. The tuned entry inherits the base preprocessing.
fn write_merged_registry(
    original: &BackboneRegistry,
    dir: &Path,
    tuned: &BackboneModel,
) -> Result<PathBuf> {
    let mut backbones = BTreeMap::new();
    for (name, entry) in original.entries() {
        backbones.insert(
            name.clone(),
            RegistryEntryOut {
                path: original.dir().join(&entry.path).display().to_string(),
                mean: entry.mean,
                std: entry.std,
            },
        );
    }
    backbones.insert(
        tuned.name.clone(),
        RegistryEntryOut {
            path: format!("{}.onnx", tuned.name),
            mean: Some(tuned.preprocessing.mean),
            std: Some(tuned.preprocessing.std),
        },
    );
    let doc = RegistryOut { backbones };
    let text = toml::to_string_pretty(&doc).map_err(|e| Error::Config {
        path: dir.join("backbones.toml"),
        detail: format!("cannot serialize merged registry: {e}"),
    })?;
    let path = dir.join("backbones.toml");
    fs::write(&path, text)?;
    Ok(path)
}

/// Model container path for one (feature, classifier) pairing.
fn model_path(out_dir: &Path, spec: &FeatureSpec, classifier_label: &str) -> PathBuf {
    out_dir
        .join("models")
        .join(format!("{}__{}.evcm", spec.file_slug(), classifier_label))
}

/// Trains one classifier per configured (feature, classifier) pairing on the
/// train split and saves each as a model container under `out_dir/models`.
/// Runs the fine-tuning stage first when configured, so feature specs may
/// reference the tuned backbone by its registered name.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    let manifest = load_manifest(&config.manifest)?;
    let pool = ModelPool::new(BackboneRegistry::load(&config.registry)?);
    let cache = FeatureCache::open(&config.cache_dir)?;
    fs::create_dir_all(config.out_dir.join("models"))?;

    let fine_tune = match &config.fine_tune {
        Some(section) => Some(run_fine_tune(config, &manifest, &pool, section)?),
        None => None,
    };

    let labels = classifier_labels(&config.classifiers);
    ensure_distinct_model_paths(config, &labels)?;
    let mut models = Vec::new();
    for spec in &config.features {
        let set = gather_features(&manifest, &pool, &cache, spec, false)?;
        for (classifier, label) in config.classifiers.iter().zip(&labels) {
            let trained = fit_with_seed(classifier, config.seed, 0, &set.train)?;
            let path = model_path(&config.out_dir, spec, label);
            trained.save(&path)?;
            models.push(TrainedModelInfo {
                feature: spec.canonical(),
                classifier: label.clone(),
                path,
            });
        }
    }
    Ok(TrainSummary { models, fine_tune })
}

/// Duplicate feature specs would silently overwrite each other's containers;
/// reject them up front. Classifier labels are already deduplicated.
fn ensure_distinct_model_paths(config: &RunConfig, labels: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for spec in &config.features {
        for label in labels {
            if !seen.insert(model_path(&config.out_dir, spec, label)) {
                return Err(Error::Validation(format!(
                    "duplicate feature spec {} maps two models onto one file; \
                     remove the repeated [[features]] entry",
                    spec.canonical()
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct EvalRun {
    pub feature: String,
    pub feature_slug: String,
    pub backbone: String,
    pub backbone_digest: String,
    pub classifier: String,
    pub model_file: String,
    pub summary_auc: Option<f64>,
    pub per_repeat: Vec<Option<f64>>,
    pub spread: Option<f64>,
    pub report: EvaluationReport,
}

#[derive(Debug, Serialize)]
pub struct EvalDoc {
    pub schema_version: u32,
    pub averaging: Averaging,
    pub seed: u64,
    pub repeats: usize,
    pub manifest_digest: String,
    pub runs: Vec<EvalRun>,
}

#[derive(Debug)]
pub struct EvalSummary {
    pub report_path: PathBuf,
    pub doc: EvalDoc,
}

/// Aggregates per-repeat summaries: mean over defined values, with the
/// max−min spread when every repeat is defined.
fn aggregate(per_repeat: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let defined: Vec<f64> = per_repeat.iter().flatten().copied().collect();
    if defined.is_empty() {
        return (None, None);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    let spread = if defined.len() == per_repeat.len() {
        let max = defined.iter().copied().fold(f64::MIN, f64::max);
        let min = defined.iter().copied().fold(f64::MAX, f64::min);
        Some(max - min)
    } else {
        None
    };
    (Some(mean), spread)
}

/// Scores every saved model on the test split and writes the evaluation
/// report plus per-event ROC CSVs and plots. Features must already be
/// cached (run `extract` or `train` first); repeats beyond the first retrain
/// in memory with derived seeds to measure seed sensitivity.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalSummary> {
    let manifest = load_manifest(&config.manifest)?;
    let pool = ModelPool::new(open_registry(config)?);
    let cache = FeatureCache::open(&config.cache_dir)?;
    let labels = classifier_labels(&config.classifiers);

    let mut runs = Vec::new();
    for spec in &config.features {
        let set = gather_features(&manifest, &pool, &cache, spec, true)?;
        for (classifier, label) in config.classifiers.iter().zip(&labels) {
            let path = model_path(&config.out_dir, spec, label);
            if !path.is_file() {
                return Err(Error::Classifier(format!(
                    "model container not found: {}; run `evkit train` first",
                    path.display()
                )));
            }
            let saved = load_classifier(&path)?;
            let base_report = evaluate(&saved, &set.test.features, &set.test.labels)?;

            let mut per_repeat = vec![summary_auc(&base_report, config.averaging)];
            for repeat in 1..config.repeats {
                let retrained = fit_with_seed(classifier, config.seed, repeat, &set.train)?;
                let report = evaluate(&retrained, &set.test.features, &set.test.labels)?;
                per_repeat.push(summary_auc(&report, config.averaging));
            }
            let (summary, spread) = aggregate(&per_repeat);

            runs.push(EvalRun {
                feature: spec.canonical(),
                feature_slug: spec.file_slug(),
                backbone: spec.backbone_name.clone(),
                backbone_digest: set.backbone_digest.clone(),
                classifier: label.clone(),
                model_file: format!("models/{}__{}.evcm", spec.file_slug(), label),
                summary_auc: summary,
                per_repeat,
                spread,
                report: base_report,
            });
        }
    }

    let doc = EvalDoc {
        schema_version: 1,
        averaging: config.averaging,
        seed: config.seed,
        repeats: config.repeats,
        manifest_digest: file_digest(&config.manifest)?,
        runs,
    };
    let report_path = config.out_dir.join("report.json");
    report::write_json(&report_path, &doc)?;
    report::write_roc_artifacts(&config.out_dir, &doc)?;
    Ok(EvalSummary { report_path, doc })
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub feature: String,
    pub feature_kind: String,
    pub backbone: String,
    pub classifier: String,
    pub auc: Option<f64>,
    pub spread: Option<f64>,
    pub per_repeat: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct GridDoc {
    pub schema_version: u32,
    pub averaging: Averaging,
    pub seed: u64,
    pub repeats: usize,
    pub manifest_digest: String,
    pub backbone_digests: BTreeMap<String, String>,
    pub features: Vec<String>,
    pub classifiers: Vec<ClassifierSpec>,
    pub classifier_labels: Vec<String>,
    pub cells: Vec<GridCell>,
}

#[derive(Debug)]
pub struct GridSummary {
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
    pub html_path: PathBuf,
    pub doc: GridDoc,
}

fn grid_cell(
    spec: &FeatureSpec,
    label: &str,
    classifier: &ClassifierSpec,
    set: &FeatureSet,
    config: &RunConfig,
) -> GridCell {
    let mut cell = GridCell {
        feature: spec.canonical(),
        feature_kind: spec.kind.as_str().to_string(),
        backbone: spec.backbone_name.clone(),
        classifier: label.to_string(),
        auc: None,
        spread: None,
        per_repeat: Vec::new(),
        diagnostic: None,
    };
    let mut event_diagnostics: Vec<String> = Vec::new();
    for repeat in 0..config.repeats {
        let outcome = fit_with_seed(classifier, config.seed, repeat, &set.train)
            .and_then(|model| evaluate(&model, &set.test.features, &set.test.labels));
        match outcome {
            Ok(report) => {
                cell.per_repeat.push(summary_auc(&report, config.averaging));
                if repeat == 0 {
                    event_diagnostics = report
                        .outcomes
                        .iter()
                        .filter_map(|o| o.diagnostic.clone())
                        .collect();
                }
            }
            Err(e) => {
                cell.diagnostic = Some(e.to_string());
                return cell;
            }
        }
    }
    let (auc, spread) = aggregate(&cell.per_repeat);
    cell.auc = auc;
    cell.spread = spread;
    if cell.auc.is_none() {
        cell.diagnostic = Some(if event_diagnostics.is_empty() {
            "summary AUC undefined".to_string()
        } else {
            format!("summary AUC undefined: {}", event_diagnostics.join("; "))
        });
    }
    cell
}

/// Runs every configured feature × classifier pairing end to end (features
/// through the cache, classifiers trained in memory) and writes the grid as
/// JSON, CSV and a shaded HTML table. A failure in one cell becomes that
/// cell's diagnostic instead of aborting the sweep.
pub fn cmd_grid(config: &RunConfig) -> Result<GridSummary> {
    let manifest = load_manifest(&config.manifest)?;
    let pool = ModelPool::new(open_registry(config)?);
    let cache = FeatureCache::open(&config.cache_dir)?;
    let labels = classifier_labels(&config.classifiers);

    let mut backbone_digests = BTreeMap::new();
    let mut cells = Vec::with_capacity(config.features.len() * config.classifiers.len());
    for spec in &config.features {
        match gather_features(&manifest, &pool, &cache, spec, false) {
            Ok(set) => {
                backbone_digests
                    .insert(spec.backbone_name.clone(), set.backbone_digest.clone());
                let row: Vec<GridCell> = config
                    .classifiers
                    .par_iter()
                    .zip(&labels)
                    .map(|(classifier, label)| grid_cell(spec, label, classifier, &set, config))
                    .collect();
                cells.extend(row);
            }
            Err(e) => {
                let detail = e.to_string();
                for (_, label) in config.classifiers.iter().zip(&labels) {
                    cells.push(GridCell {
                        feature: spec.canonical(),
                        feature_kind: spec.kind.as_str().to_string(),
                        backbone: spec.backbone_name.clone(),
                        classifier: label.clone(),
                        auc: None,
                        spread: None,
                        per_repeat: Vec::new(),
                        diagnostic: Some(detail.clone()),
                    });
                }
            }
        }
    }

    let doc = GridDoc {
        schema_version: 1,
        averaging: config.averaging,
        seed: config.seed,
        repeats: config.repeats,
        manifest_digest: file_digest(&config.manifest)?,
        backbone_digests,
        features: config.features.iter().map(FeatureSpec::canonical).collect(),
        classifiers: config.classifiers.clone(),
        classifier_labels: labels,
        cells,
    };
    fs::create_dir_all(&config.out_dir)?;
    let json_path = config.out_dir.join("grid.json");
    let csv_path = config.out_dir.join("grid.csv");
    let html_path = config.out_dir.join("grid.html");
    report::write_json(&json_path, &doc)?;
    report::write_grid_csv(&csv_path, &doc)?;
    report::write_grid_html(&html_path, &doc)?;
    Ok(GridSummary { json_path, csv_path, html_path, doc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::KnnMetric;
    use crate::synth;

    #[test]
    fn repeat_seed_reduces_to_spec_seed_at_defaults() {
        assert_eq!(repeat_seed(7, 0, 0), 7);
        assert_ne!(repeat_seed(7, 1, 0), 7);
        assert_ne!(repeat_seed(7, 0, 1), 7);
        assert_ne!(repeat_seed(7, 1, 1), repeat_seed(7, 1, 2));
    }

    #[test]
    fn classifier_labels_disambiguate_duplicates() {
        let specs = vec![
            ClassifierSpec::extra_trees(0),
            ClassifierSpec::extra_trees(1),
            ClassifierSpec::knn(2, KnnMetric::L2),
        ];
        let labels = classifier_labels(&specs);
        assert_eq!(labels, ["extra_trees", "extra_trees-2", "2nn_l2"]);
    }

    #[test]
    fn model_pool_loads_each_backbone_once() {
        let dir = tempfile::tempdir().unwrap();
        let registry_path = synth::write_demo_backbones(dir.path()).unwrap();
        let pool = ModelPool::new(BackboneRegistry::load(&registry_path).unwrap());
        let a = pool.get("demo_a").unwrap();
        let b = pool.get("demo_a").unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert!(pool.get("missing").is_err());
    }

    #[test]
    fn aggregate_handles_mixed_definitions() {
        assert_eq!(aggregate(&[]), (None, None));
        assert_eq!(aggregate(&[None, None]), (None, None));
        let (mean, spread) = aggregate(&[Some(0.5), Some(0.7)]);
        assert!((mean.unwrap() - 0.6).abs() < 1e-12);
        assert!((spread.unwrap() - 0.2).abs() < 1e-12);
        let (mean, spread) = aggregate(&[Some(0.5), None]);
        assert_eq!(mean, Some(0.5));
        assert_eq!(spread, None);
    }
}
