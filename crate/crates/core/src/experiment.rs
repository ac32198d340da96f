//! Reproducible experiments: the TOML experiment configuration, dataset
//! artifacts on disk, self-describing run directories, and the eval and
//! export passes that read them back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{train_ce, train_vanilla_kd};
use crate::checkpoint::{load_model, save_model};
use crate::container::{sha256_hex, Container};
use crate::data::{
    carve_validation, gen_gaussian_mix, make_longtail, parse_cifar10_bytes, ChannelNorm, GaussianMixSpec,
    LabeledDataset, LongTailSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{self, export_weight_scatter, tail_mean, Metrics, WeightScatterRecord};
use crate::nn::{Activation, Architecture, MetaNetSpec, MlpSpec, Model};
use crate::scalar::{Dtype, Real};
use crate::seed::SeedStreams;
use crate::train::{fit, RunLog, Splits, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUNLOG: &str = "runlog.csv";
pub const MODEL_STEM: &str = "model";
pub const META_STEM: &str = "meta";

/// Number of smallest training classes averaged into the tail score.
pub const TAIL_CLASSES: usize = 3;

// Init-stream salts keep teacher, student, and weighting network draws apart.
const STUDENT_SALT: u64 = 7;
const META_SALT: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ce,
    Kd,
    Bikd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Kd => "kd",
            Method::Bikd => "bikd",
        }
    }
}

/// A teacher run is plain cross-entropy on the teacher backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    #[default]
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub role: Role,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Directory written by the data command.
    pub dataset: PathBuf,
    /// Teacher run directory (or its parent holding `seed-<n>` runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_arch: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_arch: Option<Architecture>,
    #[serde(default)]
    pub meta: MetaNetSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.role == Role::Teacher && self.method != Method::Ce {
            return Err(Error::Config(format!(
                "a teacher run uses method ce, not {}",
                self.method.as_str()
            )));
        }
        if self.method != Method::Ce && self.teacher.is_none() {
            return Err(Error::Config(format!(
                "method {} needs a teacher run directory",
                self.method.as_str()
            )));
        }
        for a in [&self.student_arch, &self.teacher_arch].into_iter().flatten() {
            if matches!(a, Architecture::MetaNet(_)) {
                return Err(Error::Config("backbones must be mlp or tiny_cnn".into()));
            }
            a.validate()?;
        }
        Architecture::MetaNet(self.meta.clone()).validate()
    }

    /// Short tag separating runs that differ in the method's key knob.
    pub fn label(&self) -> String {
        match (self.role, self.method) {
            (Role::Teacher, _) => "teacher".into(),
            (_, Method::Ce) => "ce".into(),
            (_, Method::Kd) => format!("kd(alpha={})", self.train.alpha),
            (_, Method::Bikd) => format!("bikd(k={})", self.train.k),
        }
    }

    fn backbone(&self, dim: usize, classes: usize) -> Architecture {
        let (explicit, widths) = match self.role {
            Role::Teacher => (&self.teacher_arch, vec![dim, 256, 256, classes]),
            Role::Student => (&self.student_arch, vec![dim, 64, classes]),
        };
        explicit.clone().unwrap_or(Architecture::Mlp(MlpSpec {
            layer_widths: widths,
            hidden_activation: Activation::Relu,
            seed: 0,
        }))
    }
}

// ------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Isotropic Gaussian classes around random unit-direction means.
    Synthetic {
        classes: usize,
        dim: usize,
        separation: f64,
        scale: f64,
        test_per_class: usize,
    },
    /// The five CIFAR-10 training batches and the test batch in `dir`.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        norm: ChannelNorm,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub n_max: usize,
    pub rho: f64,
    /// Size of the class-balanced validation split.
    pub val_total: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                classes: 10,
                dim: 32,
                separation: 0.6,
                scale: 1.0,
                test_per_class: 300,
            },
            n_max: 1000,
            rho: 50.0,
            val_total: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl DatasetSplits {
    pub fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            val: &self.val,
            test: &self.test,
        }
    }
}

fn read_cifar(dir: &Path, files: &[String], norm: &ChannelNorm) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    for f in files {
        let p = dir.join(f);
        if !p.exists() {
            return Err(Error::Input(format!("missing CIFAR-10 file {}", p.display())));
        }
        bytes.extend(std::fs::read(&p)?);
    }
    parse_cifar10_bytes(&bytes, norm)
}

/// Validation is carved from the balanced pool before long-tail
/// subsampling, so it never overlaps training.
pub fn build_dataset(spec: &DatasetSpec) -> Result<DatasetSplits> {
    let seeds = SeedStreams::new(spec.seed);
    let (pool, test) = match &spec.source {
        DataSource::Synthetic {
            classes,
            dim,
            separation,
            scale,
            test_per_class,
        } => {
            if *classes == 0 || !spec.val_total.is_multiple_of(*classes) {
                return Err(Error::Parameter(format!(
                    "validation size {} is not a multiple of {classes} classes",
                    spec.val_total
                )));
            }
            let means = GaussianMixSpec::random_means(*classes, *dim, *separation, seeds.data);
            let mix = |per_class, seed| GaussianMixSpec {
                classes: *classes,
                dim: *dim,
                means: means.clone(),
                scale: *scale,
                per_class,
                seed,
            };
            let pool = gen_gaussian_mix(&mix(spec.n_max + spec.val_total / classes, seeds.data ^ 1))?;
            let test = gen_gaussian_mix(&mix(*test_per_class, seeds.data ^ 2))?;
            (pool, test)
        }
        DataSource::Cifar10 { dir, norm } => {
            let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
            let pool = read_cifar(dir, &train_files, norm)?;
            let test = read_cifar(dir, &["test_batch.bin".to_string()], norm)?;
            (pool, test)
        }
    };
    let (val, rest) = carve_validation(&pool, spec.val_total)?;
    let train = make_longtail(
        &rest,
        &LongTailSpec {
            classes: pool.classes(),
            n_max: spec.n_max,
            rho: spec.rho,
            seed: seeds.data,
        },
    )?;
    Ok(DatasetSplits { train, val, test })
}

/// `dataset.json`: provenance and per-split digests of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub classes: usize,
    pub dim: usize,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    /// Split stem to blob SHA-256.
    pub splits: BTreeMap<String, String>,
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("dataset manifest: {e}"),
        })?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported dataset schema version {}", m.schema_version),
            });
        }
        for counts in [&m.train_counts, &m.val_counts, &m.test_counts] {
            if counts.len() != m.classes {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("{} class counts for {} classes", counts.len(), m.classes),
                });
            }
        }
        for s in SPLIT_NAMES {
            if !m.splits.contains_key(s) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("dataset manifest lacks the {s} split"),
                });
            }
        }
        Ok(m)
    }
}

pub fn write_dataset(dir: &Path, spec: &DatasetSpec, data: &DatasetSplits) -> Result<DatasetManifest> {
    let mut splits = BTreeMap::new();
    for (name, d) in SPLIT_NAMES.iter().zip([&data.train, &data.val, &data.test]) {
        splits.insert(name.to_string(), d.to_container(name).write(dir, name)?);
    }
    let m = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        classes: data.train.classes(),
        dim: data.train.dim(),
        train_counts: data.train.counts(),
        val_counts: data.val.counts(),
        test_counts: data.test.counts(),
        splits,
    };
    std::fs::write(dir.join(DATASET_MANIFEST), to_json(&m)?)?;
    Ok(m)
}

/// Reads and digest-checks every split of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, DatasetSplits)> {
    let m = DatasetManifest::from_json(&read_text(&dir.join(DATASET_MANIFEST))?)?;
    let mut loaded = Vec::with_capacity(3);
    for name in SPLIT_NAMES {
        let (c, digest) = Container::read_with_digest(dir, name)?;
        if digest != m.splits[name] {
            return Err(Error::Data(format!(
                "{name} split in {} does not match its recorded digest",
                dir.display()
            )));
        }
        loaded.push(LabeledDataset::from_container(&c)?);
    }
    let test = loaded.pop().expect("three splits");
    let val = loaded.pop().expect("three splits");
    let train = loaded.pop().expect("three splits");
    if train.counts() != m.train_counts {
        return Err(Error::Data("training split counts disagree with the dataset manifest".into()));
    }
    Ok((m, DatasetSplits { train, val, test }))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Data(format!("missing artifact {}", path.display())));
    }
    Ok(std::fs::read_to_string(path)?)
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))
}

// ----------------------------------------------------------------- runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub sha256: String,
}

/// `manifest.json` of a run directory; enough to re-evaluate the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub label: String,
    pub seed: u64,
    pub streams: BTreeMap<String, u64>,
    /// Effective configuration after all overrides.
    pub config: ExperimentConfig,
    pub dataset: PathBuf,
    pub dataset_digests: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<ArtifactRef>,
    pub model_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_sha256: Option<String>,
    pub runlog_sha256: String,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        Self::from_json(&read_text(&run_dir.join(RUN_MANIFEST))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("run manifest: {e}"),
        })?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported run schema version {}", m.schema_version),
            });
        }
        Ok(m)
    }
}

/// `<output>/seed-<n>`.
pub fn run_dir(output: &Path, seed: u64) -> PathBuf {
    output.join(format!("seed-{seed}"))
}

/// A teacher reference is either a run directory or a parent of per-seed runs.
pub fn resolve_teacher(path: &Path, seed: u64) -> Result<PathBuf> {
    let direct = path.join(format!("{MODEL_STEM}.json"));
    if direct.exists() {
        return Ok(path.to_path_buf());
    }
    let per_seed = run_dir(path, seed);
    if per_seed.join(format!("{MODEL_STEM}.json")).exists() {
        return Ok(per_seed);
    }
    // A single teacher run is shared by every student seed.
    if let Ok(rd) = std::fs::read_dir(path) {
        let runs: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-"))
                    && p.join(format!("{MODEL_STEM}.json")).exists()
            })
            .collect();
        if let [only] = &runs[..] {
            return Ok(only.clone());
        }
    }
    Err(Error::Input(format!(
        "missing teacher checkpoint: neither {} nor {} exists",
        direct.display(),
        per_seed.join(format!("{MODEL_STEM}.json")).display()
    )))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub log: RunLog,
}

fn streams_map(s: &SeedStreams) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("data".to_string(), s.data),
        ("init".to_string(), s.init),
        ("shuffle".to_string(), s.shuffle),
        ("val_sampler".to_string(), s.val_sampler),
    ])
}

fn check_backbone(arch: &Architecture, data: &DatasetSplits) -> Result<()> {
    if arch.input_dim() != data.train.dim() || arch.output_dim() != data.train.classes() {
        return Err(Error::Config(format!(
            "backbone maps {} -> {} but the dataset has dimension {} and {} classes",
            arch.input_dim(),
            arch.output_dim(),
            data.train.dim(),
            data.train.classes()
        )));
    }
    Ok(())
}

/// Trains one seed of `cfg` into `dir` and writes checkpoints, the run log,
/// and the run manifest.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_seed_t::<f32>(cfg, seed, dir),
        Precision::F64 => run_seed_t::<f64>(cfg, seed, dir),
    }
}

fn run_seed_t<T: Real>(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunOutcome> {
    let (dm, data) = load_dataset(&cfg.dataset)?;
    let seeds = SeedStreams::new(seed);
    let arch = cfg.backbone(data.train.dim(), data.train.classes());
    check_backbone(&arch, &data)?;
    let salt = if cfg.role == Role::Teacher { 0 } else { STUDENT_SALT };
    let model = Model::<T>::init(arch.clone(), seeds.init ^ salt ^ arch.seed())?;
    let teacher = match (&cfg.teacher, cfg.method) {
        (Some(t), Method::Kd | Method::Bikd) => {
            let tdir = resolve_teacher(t, seed)?;
            let (c, digest) = Container::read_with_digest(&tdir, MODEL_STEM)?;
            let dtype = c.meta.get("dtype").cloned();
            let (tm, _) = load_model::<T>(&tdir, MODEL_STEM).map_err(|e| match e {
                Error::Data(_) | Error::Format { .. } => Error::Config(format!(
                    "teacher checkpoint in {} has dtype {}, run precision is {:?}: {e}",
                    tdir.display(),
                    dtype.unwrap_or_default(),
                    cfg.precision
                )),
                other => other,
            })?;
            check_backbone(&tm.arch, &data)?;
            Some((tm, ArtifactRef { path: tdir, sha256: digest }))
        }
        _ => None,
    };
    let splits = data.splits();
    std::fs::create_dir_all(dir)?;
    let (student, meta, log) = match (cfg.method, &teacher) {
        (Method::Ce, _) => {
            let (m, log) = train_ce(&cfg.train, &seeds, splits, model)?;
            (m, None, log)
        }
        (Method::Kd, Some((t, _))) => {
            let (m, log) = train_vanilla_kd(&cfg.train, &seeds, splits, t, model)?;
            (m, None, log)
        }
        (Method::Bikd, Some((t, _))) => {
            let march = Architecture::MetaNet(cfg.meta.clone());
            let meta = Model::<T>::init(march, seeds.init ^ META_SALT ^ cfg.meta.seed)?;
            let out = fit(&cfg.train, &seeds, splits, t, model, meta)?;
            (out.student, Some(out.meta), out.log)
        }
        (m, None) => {
            return Err(Error::Config(format!("method {} needs a teacher", m.as_str())));
        }
    };
    let model_sha256 = save_model(&student, seed, dir, MODEL_STEM)?;
    let meta_sha256 = meta.map(|m| save_model(&m, seed, dir, META_STEM)).transpose()?;
    let csv = log.to_csv();
    std::fs::write(dir.join(RUNLOG), &csv)?;
    let dataset = std::fs::canonicalize(&cfg.dataset)?;
    let teacher = teacher
        .map(|(_, r)| -> Result<ArtifactRef> {
            Ok(ArtifactRef {
                path: std::fs::canonicalize(&r.path)?,
                sha256: r.sha256,
            })
        })
        .transpose()?;
    let mut effective = cfg.clone();
    effective.dataset = dataset.clone();
    if let Some(t) = &teacher {
        effective.teacher = Some(t.path.clone());
    }
    effective.seeds = vec![seed];
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        label: cfg.label(),
        seed,
        streams: streams_map(&seeds),
        config: effective,
        dataset,
        dataset_digests: dm.splits,
        teacher,
        model_sha256,
        meta_sha256,
        runlog_sha256: sha256_hex(csv.as_bytes()),
    };
    std::fs::write(dir.join(RUN_MANIFEST), to_json(&manifest)?)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
        log,
    })
}

/// Checks the run's recorded digests against what is on disk.
fn open_run(run_dir: &Path) -> Result<(RunManifest, DatasetSplits)> {
    let m = RunManifest::read(run_dir)?;
    for stem in [Some(MODEL_STEM), m.meta_sha256.as_ref().map(|_| META_STEM)].into_iter().flatten() {
        for p in {
            let (a, b) = Container::paths(run_dir, stem);
            [a, b]
        } {
            if !p.exists() {
                return Err(Error::Data(format!("missing artifact {}", p.display())));
            }
        }
    }
    let (dm, data) = load_dataset(&m.dataset)?;
    if dm.splits != m.dataset_digests {
        return Err(Error::Data(format!(
            "dataset at {} changed since the run was recorded",
            m.dataset.display()
        )));
    }
    Ok((m, data))
}

/// Metrics of one run directory, from its manifest alone.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEval {
    pub label: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub tail: f64,
}

/// Re-evaluates the saved student on the test split and writes
/// `metrics.csv` and `confusion.csv` into the run directory.
pub fn eval_run(run_dir: &Path) -> Result<RunEval> {
    let (m, data) = open_run(run_dir)?;
    let metrics = match m.config.precision {
        Precision::F32 => metrics::evaluate(&load_model::<f32>(run_dir, MODEL_STEM)?.0, &data.test, &data.train.counts())?,
        Precision::F64 => metrics::evaluate(&load_model::<f64>(run_dir, MODEL_STEM)?.0, &data.test, &data.train.counts())?,
    };
    std::fs::write(run_dir.join("metrics.csv"), metrics::metrics_csv(&metrics))?;
    std::fs::write(run_dir.join("confusion.csv"), metrics::confusion_csv(&metrics))?;
    let tail = tail_mean(&metrics.per_class, &data.train.counts(), TAIL_CLASSES);
    Ok(RunEval {
        label: m.label,
        seed: m.seed,
        metrics,
        tail,
    })
}

/// One row per method label, averaged over its runs, in first-seen order.
pub fn comparison_csv(evals: &[RunEval]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for e in evals {
        if !order.contains(&e.label.as_str()) {
            order.push(&e.label);
        }
    }
    let mut out = String::from("method,runs,accuracy,head_accuracy,tail_accuracy,tail3_accuracy\n");
    for label in order {
        let rows: Vec<&RunEval> = evals.iter().filter(|e| e.label == label).collect();
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&RunEval) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{label},{},{:.6},{:.6},{:.6},{:.6}",
            rows.len(),
            mean(&|r| r.metrics.accuracy),
            mean(&|r| r.metrics.head_accuracy),
            mean(&|r| r.metrics.tail_accuracy),
            mean(&|r| r.tail),
        );
    }
    out
}

/// Per-sample weights of a bilevel run on its training split; writes
/// `weight_scatter.csv` into the run directory.
pub fn export_run(run_dir: &Path) -> Result<Vec<WeightScatterRecord>> {
    let (m, data) = open_run(run_dir)?;
    if m.meta_sha256.is_none() {
        return Err(Error::Input(format!(
            "{} is a {} run; weight export needs a bikd run",
            run_dir.display(),
            m.label
        )));
    }
    let teacher = m
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Data("bikd run manifest lacks its teacher".into()))?;
    let (_, digest) = Container::read_with_digest(&teacher.path, MODEL_STEM)?;
    if digest != teacher.sha256 {
        return Err(Error::Data(format!(
            "teacher checkpoint in {} changed since the run was recorded",
            teacher.path.display()
        )));
    }
    let records = match m.config.precision {
        Precision::F32 => export_t::<f32>(run_dir, &teacher.path, &data)?,
        Precision::F64 => export_t::<f64>(run_dir, &teacher.path, &data)?,
    };
    std::fs::write(run_dir.join("weight_scatter.csv"), metrics::scatter_csv(&records))?;
    Ok(records)
}

fn export_t<T: Real>(run_dir: &Path, teacher_dir: &Path, data: &DatasetSplits) -> Result<Vec<WeightScatterRecord>> {
    let (student, _) = load_model::<T>(run_dir, MODEL_STEM)?;
    let (meta, _) = load_model::<T>(run_dir, META_STEM)?;
    let (teacher, _) = load_model::<T>(teacher_dir, MODEL_STEM)?;
    export_weight_scatter(&meta, &teacher, &student, &data.train)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "method = \"ce\"\ndataset = \"d\"\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.meta.hidden, 64);
        assert_eq!(c.precision, Precision::F32);
        assert_eq!(c.role, Role::Student);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.method = Method::Bikd;
        c.teacher = Some("t".into());
        c.train.k = 3;
        c.train.clip_meta_inputs = Some(50.0);
        c.student_arch = Some(Architecture::Mlp(MlpSpec {
            layer_widths: vec![4, 8, 2],
            hidden_activation: Activation::Tanh,
            seed: 1,
        }));
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_toml_str("method = \"ce\"\ndataset = \"d\"\nlearning_rate = 1\n").unwrap_err();
        assert_eq!(e.code(), "E_CONFIG");
        let e = ExperimentConfig::from_toml_str("method = \"ce\"\ndataset = \"d\"\n[train]\netaa = 1\n").unwrap_err();
        assert!(e.to_string().contains("etaa"), "{e}");
    }

    #[test]
    fn distillation_needs_a_teacher() {
        let e = ExperimentConfig::from_toml_str("method = \"kd\"\ndataset = \"d\"\n").unwrap_err();
        assert!(e.to_string().contains("teacher"), "{e}");
    }

    #[test]
    fn teacher_role_is_ce_only() {
        let text = "method = \"bikd\"\nrole = \"teacher\"\nteacher = \"t\"\ndataset = \"d\"\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn invalid_train_values_fail_validation() {
        assert!(ExperimentConfig::from_toml_str("method = \"ce\"\ndataset = \"d\"\n[train]\nk = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"ce\"\ndataset = \"d\"\nseeds = [1, 1]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"ce\"\ndataset = \"d\"\nseeds = []\n").is_err());
    }

    #[test]
    fn dataset_spec_toml_shape() {
        let s: DatasetSpec = toml::from_str(
            "n_max = 20\nrho = 4.0\nval_total = 8\nseed = 2\n[source]\nkind = \"synthetic\"\nclasses = 4\n\
             dim = 3\nseparation = 1.0\nscale = 1.0\ntest_per_class = 5\n",
        )
        .unwrap();
        assert_eq!(s.n_max, 20);
        let s: DatasetSpec = toml::from_str(
            "n_max = 20\nrho = 4.0\nval_total = 8\nseed = 2\n[source]\nkind = \"cifar10\"\ndir = \"x\"\n\
             [source.norm]\nmean = [0.5, 0.5, 0.5]\nstd = [0.25, 0.25, 0.25]\n",
        )
        .unwrap();
        assert!(matches!(s.source, DataSource::Cifar10 { .. }));
    }

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            source: DataSource::Synthetic {
                classes: 4,
                dim: 3,
                separation: 2.0,
                scale: 1.0,
                test_per_class: 10,
            },
            n_max: 40,
            rho: 4.0,
            val_total: 8,
            seed: 5,
        }
    }

    #[test]
    fn build_dataset_shapes_splits() {
        let d = build_dataset(&tiny_spec()).unwrap();
        assert_eq!(d.train.counts(), vec![40, 25, 16, 10]);
        assert_eq!(d.val.counts(), vec![2; 4]);
        assert_eq!(d.test.counts(), vec![10; 4]);
        assert_eq!(d, build_dataset(&tiny_spec()).unwrap());
    }

    #[test]
    fn dataset_directory_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let d = build_dataset(&spec).unwrap();
        let m = write_dataset(dir.path(), &spec, &d).unwrap();
        let (m2, d2) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(d, d2);
        let other = build_dataset(&DatasetSpec { seed: 6, ..spec }).unwrap();
        other.val.to_container("val").write(dir.path(), "val").unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("digest"));
    }

    #[test]
    fn manifest_parser_rejects_inconsistency() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        write_dataset(dir.path(), &spec, &build_dataset(&spec).unwrap()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(DATASET_MANIFEST)).unwrap();
        assert!(DatasetManifest::from_json(&text).is_ok());
        let bad = text.replace("\"classes\": 4", "\"classes\": 5");
        assert!(DatasetManifest::from_json(&bad).is_err());
        assert!(DatasetManifest::from_json("{").is_err());
    }

    #[test]
    fn single_teacher_run_is_shared() {
        let dir = tempfile::tempdir().unwrap();
        let t = run_dir(dir.path(), 4);
        std::fs::create_dir_all(&t).unwrap();
        std::fs::write(t.join("model.json"), "{}").unwrap();
        assert_eq!(resolve_teacher(dir.path(), 0).unwrap(), t);
        assert_eq!(resolve_teacher(dir.path(), 4).unwrap(), t);
        let t2 = run_dir(dir.path(), 5);
        std::fs::create_dir_all(&t2).unwrap();
        std::fs::write(t2.join("model.json"), "{}").unwrap();
        assert!(resolve_teacher(dir.path(), 0).is_err());
        assert_eq!(resolve_teacher(dir.path(), 5).unwrap(), t2);
    }

    #[test]
    fn missing_teacher_names_the_paths() {
        let dir = tempfile::tempdir().unwrap();
        let e = resolve_teacher(dir.path(), 3).unwrap_err().to_string();
        assert!(e.contains("seed-3"), "{e}");
    }

    #[test]
    fn comparison_rows_average_per_label() {
        let ev = |label: &str, acc: f64| RunEval {
            label: label.into(),
            seed: 0,
            metrics: metrics::from_predictions(&[0, 1], &[0, 1], 2, &[2, 1]).map(|mut m| {
                m.accuracy = acc;
                m
            })
            .unwrap(),
            tail: acc,
        };
        let csv = comparison_csv(&[ev("kd", 0.5), ev("bikd", 0.25), ev("kd", 0.75)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("kd,2,0.625000,"), "{}", lines[1]);
        assert!(lines[2].starts_with("bikd,1,0.250000,"));
    }
}
