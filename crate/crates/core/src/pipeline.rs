//! Manifest-driven runs: load a dataset, retrieve, score every configured
//! method, label, and write reports.
//!
//! All report files are produced from in-memory results by a single writer
//! at the end of a run. Apart from `timing.json`, identical manifests and
//! inputs produce identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{self, EvalError, MethodAuc, PrCurve, DEFAULT_THRESHOLD_M};
use crate::fusion::{classification_accuracy, FusionError, FusionModel, SvmConfig};
use crate::io::{self, IoError, Polarity, ScoreChannel};
use crate::model::{
    validate_map, DescriptorSet, GroundTruthLabel, Method, ModelError, PoseSet, RankedMatches, UncertaintyRecord,
    VprMap,
};
use crate::par::{self, Execution};
use crate::retrieval::{build_index, l2_normalize, RetrievalError};
use crate::synthgen::{
    generate_world, inject_confidence_channel, write_world, ConfidenceChannel, SynthError, SyntheticWorld, WorldConfig,
    QUERY_DESCRIPTORS_FILE, QUERY_POSES_FILE, REF_DESCRIPTORS_FILE, REF_POSES_FILE,
};
use crate::uncertainty::{
    pose_density_with, score_l2, score_pa, sue_score, sue_score_density_compensated, PoseDensity, SueConfig,
    UncertaintyError,
};

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(IoError::Io(e))
    }
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    MissingInput,
    Parse,
    Data,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Synth(SynthError::InvalidConfig(_) | SynthError::InvalidPartition { .. }) => ErrorClass::Config,
            Error::Synth(SynthError::Io(e)) | Error::Io(e) => match e {
                IoError::Open { .. } => ErrorClass::MissingInput,
                IoError::Io(_) => ErrorClass::Io,
                IoError::Model(_) | IoError::DuplicateQueryId(_) => ErrorClass::Data,
                _ => ErrorClass::Parse,
            },
            Error::Fusion(FusionError::Io(_)) => ErrorClass::Io,
            Error::Fusion(FusionError::Format(_)) => ErrorClass::Parse,
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    pub name: String,
    pub path: PathBuf,
    pub polarity: Polarity,
}

/// One estimator to run. `name` overrides the report label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    L2 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Pa {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Sue {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(flatten)]
        config: SueConfig,
    },
    SueDc {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(flatten)]
        config: SueConfig,
        /// Pose-space neighbour rank used for the density estimate.
        #[serde(default = "default_density_k")]
        density_k: usize,
    },
    /// Uniform random scores; a chance-level reference line.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        seed: u64,
    },
}

fn default_density_k() -> usize {
    1
}

impl MethodSpec {
    pub fn sue(config: SueConfig) -> Self {
        MethodSpec::Sue { name: None, config }
    }

    pub fn named(self, label: &str) -> Self {
        let label = Some(label.to_string());
        match self {
            MethodSpec::L2 { .. } => MethodSpec::L2 { name: label },
            MethodSpec::Pa { .. } => MethodSpec::Pa { name: label },
            MethodSpec::Sue { config, .. } => MethodSpec::Sue { name: label, config },
            MethodSpec::SueDc { config, density_k, .. } => MethodSpec::SueDc {
                name: label,
                config,
                density_k,
            },
            MethodSpec::Random { seed, .. } => MethodSpec::Random { name: label, seed },
        }
    }

    pub fn label(&self) -> String {
        let (name, default) = match self {
            MethodSpec::L2 { name } => (name, "l2"),
            MethodSpec::Pa { name } => (name, "pa"),
            MethodSpec::Sue { name, .. } => (name, "sue"),
            MethodSpec::SueDc { name, .. } => (name, "sue_dc"),
            MethodSpec::Random { name, .. } => (name, "random"),
        };
        name.clone().unwrap_or_else(|| default.to_string())
    }

    pub fn method(&self) -> Method {
        match self {
            MethodSpec::L2 { .. } => Method::L2,
            MethodSpec::Pa { .. } => Method::Pa,
            MethodSpec::Sue { .. } => Method::Sue,
            MethodSpec::SueDc { .. } => Method::SueDc,
            MethodSpec::Random { .. } => Method::External("random".into()),
        }
    }

    /// Neighbours this method reads from the retrieval list.
    fn neighbors_needed(&self) -> usize {
        match self {
            MethodSpec::L2 { .. } | MethodSpec::Random { .. } => 1,
            MethodSpec::Pa { .. } => 2,
            MethodSpec::Sue { config, .. } | MethodSpec::SueDc { config, .. } => config.k,
        }
    }
}

pub fn default_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::L2 { name: None },
        MethodSpec::Pa { name: None },
        MethodSpec::sue(SueConfig::default()),
    ]
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD_M
}

/// Which method and channel feed the two fusion features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub uncertainty: String,
    pub confidence: String,
    #[serde(default)]
    pub svm: SvmConfig,
}

/// A recorded run: inputs, methods and settings. Relative paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub reference_descriptors: PathBuf,
    pub reference_poses: PathBuf,
    pub query_descriptors: PathBuf,
    pub query_poses: PathBuf,
    #[serde(default)]
    pub external_scores: Vec<ExternalSpec>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_threshold")]
    pub threshold_m: f64,
    #[serde(default)]
    pub l2_normalize: bool,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionSpec>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| {
            Error::Io(IoError::Open {
                path: path.display().to_string(),
                source,
            })
        })?;
        let mut manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.resolve_paths(base);
        manifest.validate()?;
        Ok(manifest)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.reference_descriptors);
        fix(&mut self.reference_poses);
        fix(&mut self.query_descriptors);
        fix(&mut self.query_poses);
        fix(&mut self.output_dir);
        for ext in &mut self.external_scores {
            fix(&mut ext.path);
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.threshold_m.is_nan() || self.threshold_m <= 0.0 {
            return Err(Error::Config("threshold_m must be positive".into()));
        }
        let mut seen = HashMap::new();
        let labels = self
            .methods
            .iter()
            .map(MethodSpec::label)
            .chain(self.external_scores.iter().map(|e| e.name.clone()));
        for label in labels {
            if seen.insert(label.clone(), ()).is_some() {
                return Err(Error::Config(format!("duplicate method name {label}")));
            }
        }
        for m in &self.methods {
            if let MethodSpec::Sue { config, .. } | MethodSpec::SueDc { config, .. } = m {
                if config.k == 0 || config.alpha.is_nan() || config.alpha < 0.0 {
                    return Err(Error::Config(format!("{}: need k >= 1 and alpha >= 0", m.label())));
                }
            }
            if let MethodSpec::SueDc { density_k: 0, .. } = m {
                return Err(Error::Config(format!("{}: density_k must be positive", m.label())));
            }
        }
        Ok(())
    }
}

/// Everything a run consumes, in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub map: VprMap,
    pub queries: DescriptorSet,
    pub query_poses: PoseSet,
    pub channels: Vec<ScoreChannel>,
}

impl Dataset {
    pub fn load(manifest: &RunManifest) -> Result<Self, Error> {
        let mut refs = io::load_descriptors(&manifest.reference_descriptors)?;
        let ref_poses = io::load_poses(&manifest.reference_poses)?;
        let mut queries = io::load_descriptors(&manifest.query_descriptors)?;
        let query_poses = io::load_poses(&manifest.query_poses)?;
        if manifest.l2_normalize {
            refs = l2_normalize(&refs)?;
            queries = l2_normalize(&queries)?;
        }
        let channels = manifest
            .external_scores
            .iter()
            .map(|e| io::load_external_scores(&e.path, &e.name, e.polarity))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            map: validate_map(refs, ref_poses)?,
            queries,
            query_poses,
            channels,
        })
    }

    pub fn from_world(world: &SyntheticWorld) -> Self {
        Self {
            map: world.map.clone(),
            queries: world.queries.clone(),
            query_poses: world.query_poses.clone(),
            channels: Vec::new(),
        }
    }
}

/// Scores of one method for every query, in query order.
#[derive(Debug, Clone)]
pub struct MethodScores {
    pub label: String,
    pub records: Vec<UncertaintyRecord>,
    /// Median per-query scoring time in milliseconds.
    pub median_ms: f64,
}

impl MethodScores {
    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }
}

/// Retrieval, labels and per-method scores for one dataset.
#[derive(Debug, Clone)]
pub struct ScoredRun {
    pub matches: Vec<RankedMatches>,
    pub labels: Vec<GroundTruthLabel>,
    pub methods: Vec<MethodScores>,
}

impl ScoredRun {
    pub fn correct(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.correct).collect()
    }

    pub fn get(&self, label: &str) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.label == label)
    }

    pub fn auc(&self, label: &str) -> Result<f64, Error> {
        let m = self
            .get(label)
            .ok_or_else(|| Error::Config(format!("unknown method {label}")))?;
        Ok(evaluation::pr_curve(&m.scores(), &self.correct())?.auc)
    }

    pub fn curves(&self, exec: Execution) -> Result<Vec<(String, PrCurve)>, Error> {
        let correct = self.correct();
        Ok(par::try_map(&self.methods, exec, |m| {
            evaluation::pr_curve(&m.scores(), &correct).map(|c| (m.label.clone(), c))
        })?)
    }

    pub fn auc_table(&self, exec: Execution) -> Result<Vec<MethodAuc>, Error> {
        let records: Vec<(String, Vec<UncertaintyRecord>)> = self
            .methods
            .iter()
            .map(|m| (m.label.clone(), m.records.clone()))
            .collect();
        Ok(evaluation::compare_methods_with(&records, &self.labels, exec)?)
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn timed<F>(matches: &[RankedMatches], exec: Execution, f: F) -> Result<(Vec<f64>, f64), Error>
where
    F: Fn(&RankedMatches) -> Result<f64, UncertaintyError> + Sync + Send,
{
    let results = par::map(matches, exec, |m| {
        let start = Instant::now();
        let s = f(m);
        (s, start.elapsed().as_secs_f64() * 1e3)
    });
    let mut times = Vec::with_capacity(results.len());
    let mut scores = Vec::with_capacity(results.len());
    for (s, t) in results {
        scores.push(s?);
        times.push(t);
    }
    Ok((scores, median(&mut times)))
}

/// Retrieves, labels and scores every query under each method.
pub fn score_dataset(
    data: &Dataset,
    methods: &[MethodSpec],
    threshold_m: f64,
    exec: Execution,
) -> Result<ScoredRun, Error> {
    let k_max = methods
        .iter()
        .map(MethodSpec::neighbors_needed)
        .max()
        .unwrap_or(1)
        .max(1);
    let index = build_index(&data.map);
    let matches = index.batch_retrieve_with(&data.queries, k_max, exec)?;
    let labels = evaluation::label_retrievals(&data.query_poses, &matches, threshold_m)?;

    let mut densities: BTreeMap<usize, PoseDensity> = BTreeMap::new();
    for m in methods {
        if let MethodSpec::SueDc { density_k, .. } = m {
            if !densities.contains_key(density_k) {
                densities.insert(*density_k, pose_density_with(data.map.poses(), *density_k, exec)?);
            }
        }
    }

    let mut out = Vec::with_capacity(methods.len() + data.channels.len());
    for spec in methods {
        let (scores, median_ms) = match spec {
            MethodSpec::L2 { .. } => timed(&matches, exec, score_l2)?,
            MethodSpec::Pa { .. } => timed(&matches, exec, score_pa)?,
            MethodSpec::Sue { config, .. } => timed(&matches, exec, |m| Ok(sue_score(m, config)?.trace))?,
            MethodSpec::SueDc { config, density_k, .. } => {
                let density = &densities[density_k];
                timed(&matches, exec, |m| {
                    Ok(sue_score_density_compensated(m, density, config)?.trace)
                })?
            }
            MethodSpec::Random { seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (matches.iter().map(|_| rng.random::<f64>()).collect(), 0.0)
            }
        };
        let method = spec.method();
        out.push(MethodScores {
            label: spec.label(),
            records: matches
                .iter()
                .zip(scores)
                .map(|(m, s)| UncertaintyRecord::new(m.query_id.clone(), method.clone(), s))
                .collect(),
            median_ms,
        });
    }

    for ch in &data.channels {
        let aligned = evaluation::align_scores(&ch.name, &ch.records, &labels)?;
        let by_id: HashMap<&str, &UncertaintyRecord> = ch.records.iter().map(|r| (r.query_id.as_str(), r)).collect();
        out.push(MethodScores {
            label: ch.name.clone(),
            records: labels
                .iter()
                .zip(aligned)
                .map(|(l, s)| UncertaintyRecord {
                    score: s,
                    ..by_id[l.query_id.as_str()].clone()
                })
                .collect(),
            median_ms: 0.0,
        });
    }

    Ok(ScoredRun {
        matches,
        labels,
        methods: out,
    })
}

/// Raw `(uncertainty, confidence)` feature rows for fusion.
pub fn fusion_features(run: &ScoredRun, spec: &FusionSpec) -> Result<Vec<[f64; 2]>, Error> {
    let unc = run
        .get(&spec.uncertainty)
        .ok_or_else(|| Error::Config(format!("fusion: unknown uncertainty method {}", spec.uncertainty)))?;
    let conf = run
        .get(&spec.confidence)
        .ok_or_else(|| Error::Config(format!("fusion: unknown confidence channel {}", spec.confidence)))?;
    Ok(unc
        .records
        .iter()
        .zip(&conf.records)
        .map(|(u, c)| [u.score, c.gv_confidence.unwrap_or(-c.score)])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub combination: String,
    pub accuracy: f64,
}

/// Trains on `train` features and reports test accuracy for the uncertainty
/// alone, the confidence alone, and both fused.
pub fn fusion_accuracy(
    spec: &FusionSpec,
    train: (&[[f64; 2]], &[bool]),
    test: (&[[f64; 2]], &[bool]),
) -> Result<(FusionModel, Vec<AccuracyRow>), Error> {
    let only = |x: &[[f64; 2]], keep: usize| -> Vec<[f64; 2]> {
        x.iter()
            .map(|r| {
                let mut o = [0.0; 2];
                o[keep] = r[keep];
                o
            })
            .collect()
    };
    let mut rows = Vec::new();
    let mut fused_model = None;
    for (name, keep) in [
        (spec.uncertainty.clone(), Some(0)),
        (spec.confidence.clone(), Some(1)),
        (format!("{}+{}", spec.uncertainty, spec.confidence), None),
    ] {
        let (tr, te) = match keep {
            Some(j) => (only(train.0, j), only(test.0, j)),
            None => (train.0.to_vec(), test.0.to_vec()),
        };
        let model = FusionModel::fit(&tr, train.1, &spec.svm)?;
        let accuracy = classification_accuracy(&model.decide_all(&te), test.1)?;
        rows.push(AccuracyRow {
            combination: name,
            accuracy,
        });
        if keep.is_none() {
            fused_model = Some(model);
        }
    }
    Ok((fused_model.expect("fused row is always trained"), rows))
}

/// Results of `evaluate`, ready to be written.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub manifest: RunManifest,
    pub run: ScoredRun,
    pub table: Vec<MethodAuc>,
    pub curves: Vec<(String, PrCurve)>,
    pub accuracy: Option<Vec<AccuracyRow>>,
}

fn default_fusion(manifest: &RunManifest, run: &ScoredRun) -> Option<FusionSpec> {
    if let Some(f) = &manifest.fusion {
        return Some(f.clone());
    }
    let conf = manifest
        .external_scores
        .iter()
        .find(|e| e.polarity == Polarity::Confidence)?;
    let unc = manifest
        .methods
        .iter()
        .find(|m| matches!(m, MethodSpec::Sue { .. }))
        .or_else(|| manifest.methods.first())?;
    run.get(&unc.label())?;
    Some(FusionSpec {
        uncertainty: unc.label(),
        confidence: conf.name.clone(),
        svm: SvmConfig {
            seed: manifest.seed,
            ..SvmConfig::default()
        },
    })
}

pub fn evaluate(manifest: &RunManifest, exec: Execution) -> Result<EvalReport, Error> {
    manifest.validate()?;
    let data = Dataset::load(manifest)?;
    evaluate_dataset(manifest, &data, exec)
}

pub fn evaluate_dataset(manifest: &RunManifest, data: &Dataset, exec: Execution) -> Result<EvalReport, Error> {
    let run = score_dataset(data, &manifest.methods, manifest.threshold_m, exec)?;
    let table = run.auc_table(exec)?;
    let curves = run.curves(exec)?;
    let accuracy = match default_fusion(manifest, &run) {
        Some(spec) => {
            let x = fusion_features(&run, &spec)?;
            let y = run.correct();
            Some(fusion_accuracy(&spec, (&x, &y), (&x, &y))?.1)
        }
        None => None,
    };
    Ok(EvalReport {
        manifest: manifest.clone(),
        run,
        table,
        curves,
        accuracy,
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path).map(BufWriter::new).map_err(|source| {
        Error::Io(IoError::Open {
            path: path.display().to_string(),
            source,
        })
    })
}

pub const TIMING_FILE: &str = "timing.json";

/// Writes every report file of `report` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &report.manifest).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;

    let mut w = create(&dir.join("auc.csv"))?;
    evaluation::write_auc_csv(&mut w, &report.table)?;
    w.flush()?;
    let mut w = create(&dir.join("auc.json"))?;
    evaluation::write_auc_json(&mut w, &report.table)?;
    w.flush()?;

    for (label, curve) in &report.curves {
        let mut w = create(&dir.join(format!("pr_{}.csv", sanitize(label))))?;
        evaluation::write_curve_csv(&mut w, curve)?;
        w.flush()?;
    }

    let run = &report.run;
    let mut w = create(&dir.join("scores.csv"))?;
    write!(w, "query_id,best_match,correct")?;
    for m in &run.methods {
        write!(w, ",{}", m.label)?;
    }
    writeln!(w)?;
    for (i, label) in run.labels.iter().enumerate() {
        let best = run.matches[i].best().map(|n| n.reference_id.as_str()).unwrap_or("");
        write!(w, "{},{},{}", label.query_id, best, label.correct as u8)?;
        for m in &run.methods {
            write!(w, ",{}", m.records[i].score)?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    if let Some(rows) = &report.accuracy {
        write_accuracy(&dir.join("accuracy.csv"), rows)?;
    }

    let timing: BTreeMap<&str, f64> = run.methods.iter().map(|m| (m.label.as_str(), m.median_ms)).collect();
    let mut w = create(&dir.join(TIMING_FILE))?;
    serde_json::to_writer_pretty(&mut w, &timing).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_accuracy(path: &Path, rows: &[AccuracyRow]) -> Result<(), Error> {
    let mut w = create(path)?;
    writeln!(w, "combination,accuracy")?;
    for r in rows {
        writeln!(w, "{},{}", r.combination, r.accuracy)?;
    }
    w.flush()?;
    Ok(())
}

/// Train a fusion model on one manifest and apply it to another.
#[derive(Debug, Clone)]
pub struct FuseReport {
    pub spec: FusionSpec,
    pub model: FusionModel,
    pub accuracy: Vec<AccuracyRow>,
    pub test_ids: Vec<String>,
    pub test_correct: Vec<bool>,
    pub test_features: Vec<[f64; 2]>,
}

pub fn fuse(train: &RunManifest, test: &RunManifest, exec: Execution) -> Result<FuseReport, Error> {
    let train_data = Dataset::load(train)?;
    let test_data = Dataset::load(test)?;
    fuse_datasets(train, &train_data, test, &test_data, exec)
}

pub fn fuse_datasets(
    train: &RunManifest,
    train_data: &Dataset,
    test: &RunManifest,
    test_data: &Dataset,
    exec: Execution,
) -> Result<FuseReport, Error> {
    let train_run = score_dataset(train_data, &train.methods, train.threshold_m, exec)?;
    let test_run = score_dataset(test_data, &test.methods, test.threshold_m, exec)?;
    let spec = default_fusion(train, &train_run)
        .ok_or_else(|| Error::Config("fusion needs a confidence channel and an uncertainty method".into()))?;
    let train_x = fusion_features(&train_run, &spec)?;
    let test_x = fusion_features(&test_run, &spec)?;
    let train_y = train_run.correct();
    let test_y = test_run.correct();
    let (model, accuracy) = fusion_accuracy(&spec, (&train_x, &train_y), (&test_x, &test_y))?;
    Ok(FuseReport {
        spec,
        model,
        accuracy,
        test_ids: test_run.labels.iter().map(|l| l.query_id.clone()).collect(),
        test_correct: test_y,
        test_features: test_x,
    })
}

pub fn write_fuse_report(report: &FuseReport, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    report.model.save(dir.join("fusion_model.json"))?;
    write_accuracy(&dir.join("accuracy.csv"), &report.accuracy)?;
    let mut w = create(&dir.join("decisions.csv"))?;
    writeln!(
        w,
        "query_id,correct,{},{},decision",
        report.spec.uncertainty, report.spec.confidence
    )?;
    for ((id, c), x) in report
        .test_ids
        .iter()
        .zip(&report.test_correct)
        .zip(&report.test_features)
    {
        let d = if report.model.decide(*x).is_accept() {
            "accept"
        } else {
            "reject"
        };
        writeln!(w, "{id},{},{},{},{d}", *c as u8, x[0], x[1])?;
    }
    w.flush()?;
    Ok(())
}

/// Grid values for the hyper-parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k_values: Vec<usize>,
    pub alpha_values: Vec<f64>,
    /// Held fixed while K varies.
    pub fixed_alpha: f64,
    /// Held fixed while alpha varies.
    pub fixed_k: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 5, 10, 20],
            alpha_values: vec![0.0, 50.0, 200.0, 350.0, 500.0],
            fixed_alpha: 350.0,
            fixed_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: &'static str,
    pub value: f64,
    pub auc_pr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauCheck {
    pub auc_k1: f64,
    pub auc_k10: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Present when both K=1 and K=10 are in the grid.
    pub plateau: Option<PlateauCheck>,
}

pub fn sweep_dataset(
    data: &Dataset,
    threshold_m: f64,
    grid: &SweepGrid,
    exec: Execution,
) -> Result<SweepReport, Error> {
    let mut methods = Vec::new();
    for &k in &grid.k_values {
        let cfg = SueConfig {
            k,
            alpha: grid.fixed_alpha,
            ..SueConfig::default()
        };
        methods.push(MethodSpec::sue(cfg).named(&format!("k={k}")));
    }
    for &alpha in &grid.alpha_values {
        let cfg = SueConfig {
            k: grid.fixed_k,
            alpha,
            ..SueConfig::default()
        };
        methods.push(MethodSpec::sue(cfg).named(&format!("alpha={alpha}")));
    }
    let run = score_dataset(data, &methods, threshold_m, exec)?;
    let mut rows = Vec::new();
    for &k in &grid.k_values {
        rows.push(SweepRow {
            parameter: "k",
            value: k as f64,
            auc_pr: run.auc(&format!("k={k}"))?,
        });
    }
    for &alpha in &grid.alpha_values {
        rows.push(SweepRow {
            parameter: "alpha",
            value: alpha,
            auc_pr: run.auc(&format!("alpha={alpha}"))?,
        });
    }
    let plateau = match (run.auc("k=1"), run.auc("k=10")) {
        (Ok(auc_k1), Ok(auc_k10)) => Some(PlateauCheck {
            auc_k1,
            auc_k10,
            pass: auc_k10 >= auc_k1,
        }),
        _ => None,
    };
    Ok(SweepReport { rows, plateau })
}

pub fn sweep(manifest: &RunManifest, grid: &SweepGrid, exec: Execution) -> Result<SweepReport, Error> {
    if grid.k_values.contains(&0) || grid.fixed_k == 0 {
        return Err(Error::Config("sweep K values must be positive".into()));
    }
    let data = Dataset::load(manifest)?;
    sweep_dataset(&data, manifest.threshold_m, grid, exec)
}

pub fn write_sweep_report(report: &SweepReport, dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("sweep.csv"))?;
    writeln!(w, "parameter,value,auc_pr")?;
    for r in &report.rows {
        writeln!(w, "{},{},{}", r.parameter, r.value, r.auc_pr)?;
    }
    w.flush()?;
    let mut w = create(&dir.join("sweep.json"))?;
    serde_json::to_writer_pretty(&mut w, report).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// A synthetic GV-like confidence channel written next to a generated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GvChannelSpec {
    #[serde(flatten)]
    pub channel: ConfidenceChannel,
    /// Threshold used to decide which top-1 matches count as correct.
    #[serde(default = "default_threshold")]
    pub threshold_m: f64,
}

/// Input of `synthesize`: a world plus an optional confidence channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub world: WorldConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gv_channel: Option<GvChannelSpec>,
}

impl SynthSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| {
            Error::Io(IoError::Open {
                path: path.display().to_string(),
                source,
            })
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub const GV_SCORES_FILE: &str = "gv_scores.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Top-1 correctness of every query of `world`, in query order.
pub fn top1_correct(world: &SyntheticWorld, threshold_m: f64, exec: Execution) -> Result<Vec<bool>, Error> {
    let index = build_index(&world.map);
    let matches = index.batch_retrieve_with(&world.queries, 1, exec)?;
    let labels = evaluation::label_retrievals(&world.query_poses, &matches, threshold_m)?;
    Ok(labels.iter().map(|l| l.correct).collect())
}

/// Generates the world of `spec` and writes its dataset files, the optional
/// confidence channel and a manifest that evaluates them, into `dir`.
pub fn synthesize(spec: &SynthSpec, dir: &Path) -> Result<RunManifest, Error> {
    let world = generate_world(&spec.world)?;
    write_world(&world, dir)?;
    let mut manifest = RunManifest {
        reference_descriptors: REF_DESCRIPTORS_FILE.into(),
        reference_poses: REF_POSES_FILE.into(),
        query_descriptors: QUERY_DESCRIPTORS_FILE.into(),
        query_poses: QUERY_POSES_FILE.into(),
        external_scores: Vec::new(),
        methods: default_methods(),
        threshold_m: DEFAULT_THRESHOLD_M,
        l2_normalize: false,
        output_dir: "report".into(),
        seed: spec.world.seed,
        fusion: None,
    };
    if let Some(gv) = &spec.gv_channel {
        let correct = top1_correct(&world, gv.threshold_m, Execution::Sequential)?;
        let values = inject_confidence_channel(&correct, &gv.channel);
        let ids = world.queries.iter().map(|d| d.id.as_str());
        io::save_scores(dir.join(GV_SCORES_FILE), ids.zip(values))?;
        manifest.threshold_m = gv.threshold_m;
        manifest.external_scores.push(ExternalSpec {
            name: "gv".into(),
            path: GV_SCORES_FILE.into(),
            polarity: Polarity::Confidence,
        });
    }
    let mut w = create(&dir.join(RUN_MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(std::io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(manifest)
}
