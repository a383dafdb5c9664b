//! The two training phases (translation, then detection) wired to files on
//! disk, plus corpus generation, evaluation, the regime comparison and the
//! CSV report. Every step writes the resolved config next to its outputs.

use crate::checkpoint::Checkpoint;
use crate::data::{
    audit, classic_augment, gen_synthetic_corpus, manifest_path, AugmentKind, Corpus, CorpusConfig,
    DatasetManifest, Domain,
};
use crate::detector::{
    detect_manifest, evaluate_on, read_detections, train_detector, write_detections, DetectorSpec,
    DetectorTrainConfig, TrainedDetector, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU,
};
use crate::gan::{derive_seed, loss_csv, run_training, transform_dataset, GanConfig, GanMode, GanModel, GanRun, Translator};
use crate::metrics::{ApMode, CorLocMode, Detection, EvalConfig, PASCAL_IOU};
use crate::params::ParamSet;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DAGAN_OUT";
pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const GAN_CHECKPOINT: &str = "gan.dagn";
pub const DETECTOR_CHECKPOINT: &str = "detector.dagn";
pub const LOSSES_CSV: &str = "losses.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const DETECTIONS: &str = "detections.jsonl";
pub const TRANSFORMED: &str = "transformed";
pub const COMPARE_JSON: &str = "compare.json";
pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_MD: &str = "compare.md";

// seed streams derived from the global / per-run seed
const CORPUS_STREAM: u64 = 1;
const GAN_STREAM: u64 = 2;
const DETECTOR_STREAM: u64 = 3;
const AUGMENT_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    pub corloc_mode: CorLocMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
            iou_threshold: PASCAL_IOU,
            ap_mode: ApMode::AllPoint,
            corloc_mode: CorLocMode::AllDetections,
        }
    }
}

impl EvalSettings {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            iou_threshold: self.iou_threshold,
            ap_mode: self.ap_mode,
            corloc_mode: self.corloc_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou", self.nms_iou),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("eval.{name} in [0, 1] violated ({v})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// One full set of regimes per seed; tables report the median.
    pub seeds: Vec<u64>,
    /// Classic augmentation settings, each trained as its own regime.
    pub augment_grid: Vec<AugmentKind>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            augment_grid: default_augment_grid(),
        }
    }
}

/// Noise levels as listed for the original experiment (already relative to
/// the dynamic range); blur kernels and sigmas shrunk with the image size.
pub fn default_augment_grid() -> Vec<AugmentKind> {
    let mut grid: Vec<AugmentKind> = [0.01, 0.05, 0.1, 0.5, 1.0]
        .into_iter()
        .map(|sigma| AugmentKind::Noise { sigma })
        .collect();
    for sigma in [0.5, 1.0] {
        for kernel in [3, 5, 7] {
            grid.push(AugmentKind::Blur { kernel, sigma });
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Global seed; component seeds not given explicitly derive from it.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub gan: GanConfig,
    pub detector: DetectorSpec,
    pub detector_train: DetectorTrainConfig,
    pub eval: EvalSettings,
    pub compare: CompareConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            corpus: CorpusConfig::default(),
            gan: GanConfig::default(),
            detector: DetectorSpec::default(),
            detector_train: DetectorTrainConfig::default(),
            eval: EvalSettings::default(),
            compare: CompareConfig::default(),
        }
        .with_derived_seeds(&Value::Null)
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.gan.validate()?;
        self.detector.validate()?;
        self.detector_train.validate()?;
        self.eval.validate()?;
        if self.compare.seeds.is_empty() {
            return Err(Error::Config("compare.seeds must not be empty".into()));
        }
        for k in &self.compare.augment_grid {
            k.validate()?;
        }
        if self.detector.n_classes != self.corpus.n_classes {
            return Err(Error::Config(format!(
                "detector.n_classes == corpus.n_classes violated ({} != {})",
                self.detector.n_classes, self.corpus.n_classes
            )));
        }
        Ok(())
    }

    /// Fills component seeds that `raw` does not set explicitly.
    fn with_derived_seeds(mut self, raw: &Value) -> Self {
        let explicit = |section: &str| raw.get(section).and_then(|s| s.get("seed")).is_some();
        if !explicit("corpus") {
            self.corpus.seed = derive_seed(self.seed, CORPUS_STREAM);
        }
        if !explicit("gan") {
            self.gan.seed = derive_seed(self.seed, GAN_STREAM);
        }
        if !explicit("detector_train") {
            self.detector_train.seed = derive_seed(self.seed, DETECTOR_STREAM);
        }
        self
    }

    /// Output root: the config's `out_dir`, else `$DAGAN_OUT`, else `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(RESOLVED_CONFIG);
        write_file(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// Parses a JSON config file (absent path or empty file = all defaults) and
/// applies `key.path=value` overrides on top. Values parse as JSON when they
/// can, else as strings. Unknown keys are rejected.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let mut raw = match path {
        None => Value::Object(Default::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(p.to_path_buf()),
                _ => Error::io(p, e),
            })?;
            if text.trim().is_empty() {
                Value::Object(Default::default())
            } else {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        }
    };
    if !raw.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    for (key, value) in overrides {
        set_path(&mut raw, key, parse_value(value))?;
    }
    let cfg: PipelineConfig = serde_json::from_value(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = cfg.with_derived_seeds(&raw);
    cfg.validate()?;
    Ok(cfg)
}

fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override key {key:?}")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn open_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    DatasetManifest::open(path)
}

// ---- gen-corpus ----

pub fn gen_corpus(cfg: &PipelineConfig, out: &Path) -> Result<Corpus> {
    let corpus = gen_synthetic_corpus(&cfg.corpus, out)?;
    cfg.write_resolved(out)?;
    Ok(corpus)
}

// ---- train-gan / transform ----

fn class_checkpoint(c: usize) -> String {
    format!("gan_class{c}.dagn")
}

fn class_losses(c: usize) -> String {
    format!("losses_class{c}.csv")
}

/// Writes every model of a run: `gan.dagn` + `losses.csv` for the shared
/// model, `gan_class{c}.dagn` + `losses_class{c}.csv` per class.
pub fn save_gan_run(run: &GanRun, dir: &Path) -> Result<()> {
    if let Some(t) = &run.unconditioned {
        t.checkpoint()?.save(dir.join(GAN_CHECKPOINT))?;
        write_file(&dir.join(LOSSES_CSV), loss_csv(&t.history))?;
    }
    for (c, t) in &run.per_class {
        t.checkpoint()?
            .with_meta("class", c.to_string())
            .save(dir.join(class_checkpoint(*c)))?;
        write_file(&dir.join(class_losses(*c)), loss_csv(&t.history))?;
    }
    Ok(())
}

pub fn train_gan(cfg: &PipelineConfig, source: &DatasetManifest, target: &DatasetManifest, out: &Path) -> Result<GanRun> {
    if source.samples.iter().any(|s| s.domain != Domain::Source) {
        return Err(Error::Config("train-gan: --source manifest holds non-source samples".into()));
    }
    if target.samples.iter().any(|s| s.domain != Domain::Target) {
        return Err(Error::Config("train-gan: --target manifest holds non-target samples".into()));
    }
    let run = run_training(source, target, &cfg.gan)?;
    save_gan_run(&run, out)?;
    cfg.write_resolved(out)?;
    Ok(run)
}

/// Rebuilds the translator from the checkpoints [`save_gan_run`] wrote.
pub fn load_translator(dir: &Path) -> Result<Translator> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut default = None;
    let mut per_class = BTreeMap::new();
    let mut cfg: Option<GanConfig> = None;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dagn"))
        .collect();
    entries.sort();
    for path in entries {
        let ckpt = Checkpoint::<f32>::load(&path)?;
        if ckpt.metadata.get("kind").map(String::as_str) != Some("gan") {
            continue;
        }
        let model = GanModel::from_checkpoint(&ckpt)?;
        cfg.get_or_insert(GanModel::config_of(&ckpt)?);
        match ckpt.metadata.get("class") {
            Some(c) => {
                let c: usize = c.parse().map_err(|_| Error::Checkpoint(format!("bad class tag in {}", path.display())))?;
                per_class.insert(c, model.g);
            }
            None => default = Some(model.g),
        }
    }
    let cfg = cfg.ok_or_else(|| Error::MissingArtifact(dir.join(GAN_CHECKPOINT)))?;
    Ok(Translator {
        spec: cfg.generator,
        side: cfg.crop_to,
        default,
        per_class,
    })
}

/// Translates `source` into `out/transformed.jsonl` (+ images).
pub fn transform(translator: &Translator, source: &DatasetManifest, out: &Path) -> Result<DatasetManifest> {
    let m = transform_dataset(translator, source, out)?;
    m.save(manifest_path(out, TRANSFORMED))?;
    Ok(m)
}

// ---- train-detector / evaluate ----

pub fn detector_checkpoint(spec: &DetectorSpec, cfg: &DetectorTrainConfig, params: &ParamSet<f32>) -> Result<Checkpoint<f32>> {
    Ok(Checkpoint::new(params.clone())
        .with_meta("kind", "detector")
        .with_meta("spec", serde_json::to_string(spec)?)
        .with_meta("train", serde_json::to_string(cfg)?))
}

pub fn load_detector(path: &Path) -> Result<(DetectorSpec, ParamSet<f32>)> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    if ckpt.metadata.get("kind").map(String::as_str) != Some("detector") {
        return Err(Error::Checkpoint(format!("{} is not a detector checkpoint", path.display())));
    }
    let spec: DetectorSpec = serde_json::from_str(
        ckpt.metadata
            .get("spec")
            .ok_or_else(|| Error::Checkpoint("detector checkpoint lacks its spec".into()))?,
    )?;
    spec.validate()?;
    Ok((spec, ckpt.params))
}

/// Refuses boxed target-domain samples unless the caller opted in.
pub fn check_unsupervised(manifest: &DatasetManifest, allow_target_labels: bool) -> Result<()> {
    let boxed_target = manifest
        .samples
        .iter()
        .filter(|s| s.domain == Domain::Target && s.n_boxes() > 0)
        .count();
    if boxed_target > 0 && !allow_target_labels {
        return Err(Error::Config(format!(
            "training manifest has {boxed_target} target-domain images with boxes; pass --allow-target-labels for the supervised upper bound"
        )));
    }
    Ok(())
}

pub fn train_detector_on(
    cfg: &PipelineConfig,
    train: &DatasetManifest,
    out: &Path,
    allow_target_labels: bool,
) -> Result<TrainedDetector> {
    check_unsupervised(train, allow_target_labels)?;
    if train.n_classes() != cfg.detector.n_classes {
        return Err(Error::Config(format!(
            "manifest has {} classes, detector.n_classes is {}",
            train.n_classes(),
            cfg.detector.n_classes
        )));
    }
    let trained = train_detector(train, &cfg.detector, &cfg.detector_train)?;
    detector_checkpoint(&cfg.detector, &cfg.detector_train, &trained.params)?.save(out.join(DETECTOR_CHECKPOINT))?;
    write_file(&out.join(LOSSES_CSV), trained.loss_csv())?;
    cfg.write_resolved(out)?;
    Ok(trained)
}

/// Metrics file written by `evaluate`. CorLoc is omitted when there were no
/// detections to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub map: f64,
    pub classes: Vec<String>,
    /// Parallel to `classes`; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corloc: Option<f64>,
    pub corloc_mode: CorLocMode,
    pub iou_threshold: f64,
    pub n_images: usize,
    pub n_detections: usize,
}

pub fn evaluate_detections(
    settings: &EvalSettings,
    test: &DatasetManifest,
    detections: &[Vec<Detection>],
) -> Result<EvalReport> {
    let s = evaluate_on(test, detections, &settings.metrics())?;
    Ok(EvalReport {
        map: s.map,
        classes: test.classes.clone(),
        per_class_ap: s.per_class_ap,
        corloc: s.corloc,
        corloc_mode: settings.corloc_mode,
        iou_threshold: settings.iou_threshold,
        n_images: s.n_images,
        n_detections: detections.iter().map(Vec::len).sum(),
    })
}

/// Where `evaluate` gets its detections from.
pub enum DetectionSource<'a> {
    Detector(&'a Path),
    File(&'a Path),
}

pub fn evaluate(cfg: &PipelineConfig, test: &DatasetManifest, source: DetectionSource<'_>, out: &Path) -> Result<EvalReport> {
    let dets = match source {
        DetectionSource::Detector(path) => {
            let (spec, params) = load_detector(path)?;
            let dets = detect_manifest(&spec, &params, test, cfg.eval.conf_threshold, cfg.eval.nms_iou)?;
            write_detections(out.join(DETECTIONS), test, &dets)?;
            dets
        }
        DetectionSource::File(path) => read_detections(path, test)?,
    };
    let report = evaluate_detections(&cfg.eval, test, &dets)?;
    write_file(&out.join(EVAL_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    cfg.write_resolved(out)?;
    Ok(report)
}

// ---- compare ----

/// Regimes in table order: lower bound first, upper bound last.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    RawSource,
    ClassicAugment(String),
    ForwardGan,
    CycleGan,
    ConditionedCycleGan,
    UpperBound,
}

impl Regime {
    pub fn key(&self) -> String {
        match self {
            Regime::RawSource => "raw_source".into(),
            Regime::ClassicAugment(k) => format!("augment_{k}"),
            Regime::ForwardGan => "forward_gan".into(),
            Regime::CycleGan => "cycle_gan".into(),
            Regime::ConditionedCycleGan => "conditioned_cycle_gan".into(),
            Regime::UpperBound => "upper_bound".into(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Regime::RawSource => "Source (lower bound)".into(),
            Regime::ClassicAugment(k) => format!("Source + {k}"),
            Regime::ForwardGan => "ForwardGAN source".into(),
            Regime::CycleGan => "CycleGAN source".into(),
            Regime::ConditionedCycleGan => "Conditioned CycleGAN source".into(),
            Regime::UpperBound => "Target labels (upper bound)".into(),
        }
    }
}

/// Audit scope under which a regime's training runs.
pub fn train_scope(r: &Regime) -> String {
    format!("train/{}", r.key())
}

pub fn eval_scope(r: &Regime) -> String {
    format!("eval/{}", r.key())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub corloc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub regime: Regime,
    pub key: String,
    pub label: String,
    pub runs: Vec<SeedResult>,
    pub median_map: f64,
}

/// Mean L1 between source images and their translations, per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureRow {
    pub seed: u64,
    pub cycle_l1: f64,
    pub forward_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleLossRow {
    pub seed: u64,
    pub first50: f64,
    pub last50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub classes: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<RegimeRow>,
    pub structure: Vec<StructureRow>,
    pub cycle_loss: Vec<CycleLossRow>,
    /// Target-domain box reads per audit scope.
    pub target_box_reads: BTreeMap<String, usize>,
    pub upper_bound_included: bool,
}

impl CompareTable {
    pub fn row(&self, r: &Regime) -> Option<&RegimeRow> {
        self.rows.iter().find(|x| &x.regime == r)
    }

    pub fn median(&self, r: &Regime) -> Option<f64> {
        self.row(r).map(|x| x.median_map)
    }

    /// Best classic augmentation by median mAP.
    pub fn best_augment(&self) -> Option<&RegimeRow> {
        self.rows
            .iter()
            .filter(|r| matches!(r.regime, Regime::ClassicAugment(_)))
            .max_by(|a, b| a.median_map.total_cmp(&b.median_map))
    }

    /// Scopes that read target boxes without being allowed to.
    pub fn audit_violations(&self) -> Vec<String> {
        let allowed = train_scope(&Regime::UpperBound);
        self.target_box_reads
            .iter()
            .filter(|(k, &n)| n > 0 && !k.starts_with("eval/") && **k != allowed)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime,label,seed,map,corloc");
        for c in &self.classes {
            s += &format!(",ap_{c}");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in &self.rows {
            for r in &row.runs {
                s += &format!("{},{},{},{:.6},{}", row.key, row.label, r.seed, r.map, opt(r.corloc));
                for ap in &r.per_class_ap {
                    s += &format!(",{}", opt(*ap));
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Train set |");
        for c in &self.classes {
            s += &format!(" {c} |");
        }
        s += " mAP (median) |";
        for seed in &self.seeds {
            s += &format!(" seed {seed} |");
        }
        s += "\n|---|";
        s += &"---|".repeat(self.classes.len() + 1 + self.seeds.len());
        s.push('\n');
        for row in &self.rows {
            s += &format!("| {} |", row.label);
            for c in 0..self.classes.len() {
                let aps: Vec<f64> = row.runs.iter().filter_map(|r| r.per_class_ap[c]).collect();
                match aps.is_empty() {
                    true => s += " - |",
                    false => s += &format!(" {:.1} |", 100.0 * median(&aps)),
                }
            }
            s += &format!(" **{:.1}** |", 100.0 * row.median_map);
            for r in &row.runs {
                s += &format!(" {:.1} |", 100.0 * r.map);
            }
            s.push('\n');
        }
        s
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn mean_l1(a: &DatasetManifest, b: &DatasetManifest) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!("L1 over {} vs {} images", a.len(), b.len())));
    }
    let mut total = 0.0;
    for i in 0..a.len() {
        let (x, y) = (a.load(i)?, b.load(i)?);
        if x.shape() != y.shape() {
            return Err(Error::shape("mean_l1", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        total += x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.numel() as f64;
    }
    Ok(total / a.len() as f64)
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

struct SeedRun<'a> {
    cfg: &'a PipelineConfig,
    corpus: &'a Corpus,
    dir: PathBuf,
    seed: u64,
    detector_train: DetectorTrainConfig,
}

impl SeedRun<'_> {
    fn gan(&self, mode: GanMode, conditioned: bool) -> Result<(GanRun, DatasetManifest)> {
        let name = match (mode, conditioned) {
            (GanMode::Forward, _) => "forward_gan",
            (GanMode::Cycle, false) => "cycle_gan",
            (GanMode::Cycle, true) => "conditioned_cycle_gan",
        };
        let cfg = GanConfig {
            mode,
            conditioned,
            seed: derive_seed(self.seed, GAN_STREAM),
            ..self.cfg.gan.clone()
        };
        log::info!("seed {}: training {name}", self.seed);
        let run = run_training(&self.corpus.source_train, &self.corpus.target_train, &cfg)?;
        let dir = self.dir.join("gan").join(name);
        save_gan_run(&run, &dir)?;
        let m = transform(&Translator::from_run(&run), &self.corpus.source_train, &self.dir.join("data").join(name))?;
        Ok((run, m))
    }

    fn detector(&self, regime: &Regime, train: &DatasetManifest) -> Result<SeedResult> {
        log::info!("seed {}: detector for {}", self.seed, regime.key());
        let allow = *regime == Regime::UpperBound;
        let trained = audit::scoped(&train_scope(regime), || {
            check_unsupervised(train, allow)?;
            train_detector(train, &self.cfg.detector, &self.detector_train)
        })?;
        let dir = self.dir.join("detectors").join(regime.key());
        detector_checkpoint(&self.cfg.detector, &self.detector_train, &trained.params)?.save(dir.join(DETECTOR_CHECKPOINT))?;
        write_file(&dir.join(LOSSES_CSV), trained.loss_csv())?;
        let test = &self.corpus.target_test;
        let report = audit::scoped(&eval_scope(regime), || {
            let dets = detect_manifest(&self.cfg.detector, &trained.params, test, self.cfg.eval.conf_threshold, self.cfg.eval.nms_iou)?;
            write_detections(dir.join(DETECTIONS), test, &dets)?;
            evaluate_detections(&self.cfg.eval, test, &dets)
        })?;
        write_file(&dir.join(EVAL_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(SeedResult {
            seed: self.seed,
            map: report.map,
            per_class_ap: report.per_class_ap,
            corloc: report.corloc,
        })
    }
}

/// Trains every regime for every seed and evaluates on the target test
/// split. The upper bound is trained only when `allow_target_labels` is set.
pub fn compare(cfg: &PipelineConfig, out: &Path, allow_target_labels: bool) -> Result<CompareTable> {
    cfg.validate()?;
    audit::reset();
    cfg.write_resolved(out)?;
    let corpus = gen_synthetic_corpus(&cfg.corpus, out.join("corpus"))?;
    let mut results: BTreeMap<Regime, Vec<SeedResult>> = BTreeMap::new();
    let mut structure = Vec::new();
    let mut cycle_loss = Vec::new();
    for &seed in &cfg.compare.seeds {
        let run = SeedRun {
            cfg,
            corpus: &corpus,
            dir: out.join(format!("seed{seed}")),
            seed,
            detector_train: DetectorTrainConfig {
                seed: derive_seed(seed, DETECTOR_STREAM),
                ..cfg.detector_train.clone()
            },
        };
        let mut push = |r: Regime, res: SeedResult| results.entry(r).or_default().push(res);

        push(Regime::RawSource, run.detector(&Regime::RawSource, &corpus.source_train)?);

        for (i, kind) in cfg.compare.augment_grid.iter().enumerate() {
            let regime = Regime::ClassicAugment(kind.to_string());
            let aug_seed = derive_seed(derive_seed(seed, AUGMENT_STREAM), i as u64);
            let m = audit::scoped(&train_scope(&regime), || {
                classic_augment(&corpus.source_train, *kind, aug_seed, run.dir.join("data").join(regime.key()))
            })?;
            push(regime.clone(), run.detector(&regime, &m)?);
        }

        let (_, forward) = audit::scoped(&train_scope(&Regime::ForwardGan), || run.gan(GanMode::Forward, false))?;
        push(Regime::ForwardGan, run.detector(&Regime::ForwardGan, &forward)?);

        let (cycle_run, cycle) = audit::scoped(&train_scope(&Regime::CycleGan), || run.gan(GanMode::Cycle, false))?;
        push(Regime::CycleGan, run.detector(&Regime::CycleGan, &cycle)?);
        structure.push(StructureRow {
            seed,
            cycle_l1: mean_l1(&corpus.source_train, &cycle)?,
            forward_l1: mean_l1(&corpus.source_train, &forward)?,
        });
        if let Some(t) = &cycle_run.unconditioned {
            let h: Vec<f64> = t.history.iter().map(|r| r.cyc_fwd).collect();
            let n = h.len().min(50);
            cycle_loss.push(CycleLossRow {
                seed,
                first50: window_mean(&h[..n]),
                last50: window_mean(&h[h.len() - n..]),
            });
        }

        let (_, cond) = audit::scoped(&train_scope(&Regime::ConditionedCycleGan), || run.gan(GanMode::Cycle, true))?;
        push(Regime::ConditionedCycleGan, run.detector(&Regime::ConditionedCycleGan, &cond)?);

        if allow_target_labels {
            push(Regime::UpperBound, run.detector(&Regime::UpperBound, &corpus.target_train_labels)?);
        }
    }
    let rows = results
        .into_iter()
        .map(|(regime, runs)| RegimeRow {
            key: regime.key(),
            label: regime.label(),
            median_map: median(&runs.iter().map(|r| r.map).collect::<Vec<_>>()),
            regime,
            runs,
        })
        .collect();
    let table = CompareTable {
        classes: corpus.source_train.classes.clone(),
        seeds: cfg.compare.seeds.clone(),
        rows,
        structure,
        cycle_loss,
        target_box_reads: audit::snapshot(),
        upper_bound_included: allow_target_labels,
    };
    let violations = table.audit_violations();
    if !violations.is_empty() {
        return Err(Error::Invalid(format!("target boxes read outside the upper bound: {violations:?}")));
    }
    write_file(&out.join(COMPARE_JSON), serde_json::to_string_pretty(&table)? + "\n")?;
    write_file(&out.join(COMPARE_CSV), table.to_csv())?;
    write_file(&out.join(COMPARE_MD), table.to_markdown())?;
    Ok(table)
}

// ---- report ----

/// Merges `eval.json` and `compare.json` files into one long-format CSV:
/// `source,regime,seed,map,corloc,ap_<class>...`.
pub fn report(inputs: &[PathBuf]) -> Result<String> {
    struct Line {
        source: String,
        regime: String,
        seed: String,
        map: f64,
        corloc: Option<f64>,
        aps: BTreeMap<String, Option<f64>>,
    }
    let mut lines = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
            _ => Error::io(path, e),
        })?;
        let v: Value = serde_json::from_str(&text)?;
        let source = path.display().to_string();
        if v.get("rows").is_some() {
            let t: CompareTable = serde_json::from_value(v)?;
            for c in &t.classes {
                if !classes.contains(c) {
                    classes.push(c.clone());
                }
            }
            for row in &t.rows {
                for r in &row.runs {
                    lines.push(Line {
                        source: source.clone(),
                        regime: row.key.clone(),
                        seed: r.seed.to_string(),
                        map: r.map,
                        corloc: r.corloc,
                        aps: t.classes.iter().cloned().zip(r.per_class_ap.iter().copied()).collect(),
                    });
                }
            }
        } else {
            let e: EvalReport =
                serde_json::from_value(v).map_err(|e| Error::Config(format!("{source}: not an eval or compare file: {e}")))?;
            for c in &e.classes {
                if !classes.contains(c) {
                    classes.push(c.clone());
                }
            }
            let regime = path
                .parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            lines.push(Line {
                source,
                regime,
                seed: String::new(),
                map: e.map,
                corloc: e.corloc,
                aps: e.classes.iter().cloned().zip(e.per_class_ap.iter().copied()).collect(),
            });
        }
    }
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("source,regime,seed,map,corloc");
    for c in &classes {
        s += &format!(",ap_{c}");
    }
    s.push('\n');
    for l in lines {
        s += &format!("{},{},{},{:.6},{}", l.source, l.regime, l.seed, l.map, opt(l.corloc));
        for c in &classes {
            s += &format!(",{}", opt(l.aps.get(c).copied().flatten()));
        }
        s.push('\n');
    }
    Ok(s)
}
