//! End-to-end experiments: pretrain a source model, stream corrupted
//! batches through the adaptation loop, and report accuracy, diagnosis
//! quality and forgetting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    adapt_step_with, episodic_reset, AdaptConfig, DiagnosisMemory, LossBreakdown, OptimizerState, Strategy,
};
use crate::checkpoint::load_checkpoint;
use crate::datagen::{
    build_stream, gen_dataset, pretrain_source, random_direction, segment_seed, Dataset, PretrainConfig,
    PretrainLog, Protocol, Segment, ShiftKind, ShiftSpec, Stream, StreamManifest, StreamSpec, TaskData, TaskSpec,
};
use crate::error::{Error, Result};
use crate::model::{encode_all, predict_joint, predict_unimodal, AdapterBank, Bottleneck, ModelConfig, ModelParams};
use crate::redundancy;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    NoStable,
    NoPlastic,
    SymmetricAll,
    AsymmetricOpposite,
    SourceOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::NoStable,
        AblationMode::NoPlastic,
        AblationMode::SymmetricAll,
        AblationMode::AsymmetricOpposite,
        AblationMode::SourceOnly,
    ];

    pub fn strategy(&self) -> Strategy {
        match self {
            AblationMode::Full => Strategy::Asymmetric,
            AblationMode::NoStable => Strategy::NoStable,
            AblationMode::NoPlastic => Strategy::NoPlastic,
            AblationMode::SymmetricAll => Strategy::Symmetric,
            AblationMode::AsymmetricOpposite => Strategy::Opposite,
            AblationMode::SourceOnly => Strategy::Frozen,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoStable => "no_stable",
            AblationMode::NoPlastic => "no_plastic",
            AblationMode::SymmetricAll => "symmetric_all",
            AblationMode::AsymmetricOpposite => "asymmetric_opposite",
            AblationMode::SourceOnly => "source_only",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationMode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown ablation mode {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub stable_rank: usize,
    pub bottleneck: Bottleneck,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = ModelConfig::default();
        Self {
            hidden_dim: base.hidden_dim,
            latent_dim: base.latent_dim,
            stable_rank: base.stable_rank,
            bottleneck: base.bottleneck,
        }
    }
}

/// How the harness lays out a stream. Every segment is a distinct
/// corruption: its own seed, and for rank-1 shifts its own direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSettings {
    pub protocol: Protocol,
    pub shift: ShiftKind,
    pub severity: u8,
    /// Corrupted modality; interleaved streams start here and alternate.
    pub target: String,
    pub segments: usize,
    pub batches_per_segment: usize,
    pub batch_size: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            protocol: Protocol::Episodic,
            shift: ShiftKind::Rank1Latent,
            severity: 5,
            target: "video".into(),
            segments: 4,
            batches_per_segment: 300,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ablation: AblationMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Load the source model from here instead of pretraining.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub task: TaskSpec,
    pub model: ModelSettings,
    pub pretrain: PretrainConfig,
    pub stream: StreamSettings,
    pub adapt: AdaptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: AblationMode::Full,
            out_dir: None,
            checkpoint: None,
            task: TaskSpec::default(),
            model: ModelSettings::default(),
            pretrain: PretrainConfig::default(),
            stream: StreamSettings::default(),
            adapt: AdaptConfig {
                learning_rate: 3e-4,
                ..AdaptConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            modalities: self.task.modalities.clone(),
            input_dim: self.task.input_dim,
            hidden_dim: self.model.hidden_dim,
            latent_dim: self.model.latent_dim,
            num_classes: self.task.num_classes,
            stable_rank: self.model.stable_rank,
            bottleneck: self.model.bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.task.validate().map_err(as_config)?;
        self.model_config().validate().map_err(as_config)?;
        self.adapt.validate()?;
        let s = &self.stream;
        crate::datagen::severity_sigma(s.severity).map_err(as_config)?;
        if !self.task.modalities.contains(&s.target) {
            return Err(Error::Config(format!("stream target {:?} is not a modality", s.target)));
        }
        if s.segments == 0 || s.batches_per_segment == 0 {
            return Err(Error::Config("stream needs at least one segment and one batch".into()));
        }
        if s.batch_size < 2 {
            return Err(Error::Config("stream batch_size must be at least 2".into()));
        }
        if s.protocol == Protocol::Interleaved && self.task.modalities.len() < 2 {
            return Err(Error::Config("interleaved streams need at least two modalities".into()));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.learning_rate > 0.0) {
            return Err(Error::Config("pretrain needs a positive batch size and learning rate".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the config's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A pretrained source model with its data and shift calibration.
#[derive(Clone, Debug)]
pub struct SourceModel {
    pub model: ModelParams,
    pub data: TaskData,
    pub log: Option<PretrainLog>,
    /// Per modality: per-dimension standard deviation of clean features in
    /// the unified space, `f^u(z)`.
    pub unified_std: Vec<Vec<f64>>,
    /// Per modality: root of the mean per-entry input variance.
    pub input_gain: Vec<f64>,
}

fn column_variances(x: &Tensor) -> Vec<f64> {
    let mean = x.mean_rows();
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let mu = mean.data()[j];
            (0..x.rows()).map(|r| (x.get(r, j) - mu).powi(2)).sum::<f64>() / n
        })
        .collect()
}

impl SourceModel {
    fn calibrate(model: ModelParams, data: TaskData, log: Option<PretrainLog>) -> Result<Self> {
        let mut unified_std = Vec::new();
        let mut input_gain = Vec::new();
        for (m, x) in data.train.inputs.iter().enumerate() {
            let z = model.encode(m, x)?;
            let u = model.fuse(&z)?;
            unified_std.push(column_variances(&u).iter().map(|v| v.sqrt()).collect());
            let v = column_variances(x);
            input_gain.push((v.iter().sum::<f64>() / v.len() as f64).sqrt());
        }
        Ok(Self {
            model,
            data,
            log,
            unified_std,
            input_gain,
        })
    }

    /// A rank-1 shift of modality `m`'s encoder output whose image in the
    /// unified space is `α · √D · (v ⊙ std(f^u(z)))`: unit-scale in
    /// standardized unified coordinates, where diagnosis looks. The encoder
    /// space offset is that image pulled back through the fusion weights.
    pub fn standardized_rank1(&self, m: usize, severity: u8, v: &[f64]) -> Result<ShiftSpec> {
        let d = v.len();
        let scale = (d as f64).sqrt();
        let w = DVector::from_iterator(d, v.iter().zip(&self.unified_std[m]).map(|(a, s)| scale * a * s));
        let fusion = DMatrix::from_row_slice(d, d, self.model.fusion_w.data());
        let inv = fusion
            .try_inverse()
            .ok_or_else(|| Error::Contract("fusion projection is singular".into()))?;
        // Offsets are row vectors: `u · W_u = w` gives `u = w · W_u⁻¹`.
        let u = inv.transpose() * w;
        let norm = u.norm();
        let mut shift = ShiftSpec::rank1(
            &self.config().modalities[m],
            severity,
            u.iter().map(|x| x / norm).collect(),
        );
        shift.gain = norm;
        Ok(shift)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}

fn model_seed(seed: u64) -> u64 {
    segment_seed(seed, "model")
}

fn adapter_seed(seed: u64) -> u64 {
    segment_seed(seed, "adapters")
}

/// Generates the task and pretrains (or loads) the source model.
pub fn prepare_source(cfg: &ExperimentConfig) -> Result<SourceModel> {
    cfg.validate()?;
    let data = gen_dataset(&cfg.task)?;
    let model_cfg = cfg.model_config();
    let (model, log) = match &cfg.checkpoint {
        Some(path) => (load_checkpoint(path, Some(&model_cfg))?.model, None),
        None => {
            let mut model = ModelParams::init(model_cfg, model_seed(cfg.seed))?;
            let log = pretrain_source(&mut model, &data.train, &cfg.pretrain, cfg.seed)?;
            (model, Some(log))
        }
    };
    SourceModel::calibrate(model, data, log)
}

/// The stream layout for `cfg`, with shift gains calibrated on `source`.
pub fn stream_spec(cfg: &ExperimentConfig, source: &SourceModel) -> Result<StreamSpec> {
    let s = &cfg.stream;
    let names = &source.config().modalities;
    let start = names
        .iter()
        .position(|n| *n == s.target)
        .ok_or_else(|| Error::Config(format!("stream target {:?} is not a modality", s.target)))?;
    let d = source.config().latent_dim;
    let mut segments = Vec::with_capacity(s.segments);
    for i in 0..s.segments {
        let m = match s.protocol {
            Protocol::Interleaved => (start + i) % names.len(),
            _ => start,
        };
        let label = format!("{}/{}/{}/{i}", s.shift.as_str(), names[m], s.severity);
        let seed = segment_seed(cfg.seed, &label);
        let shift = match s.shift {
            ShiftKind::InputGaussian => ShiftSpec {
                gain: source.input_gain[m],
                ..ShiftSpec::input_gaussian(&names[m], s.severity)
            },
            ShiftKind::Rank1Latent => {
                source.standardized_rank1(m, s.severity, &random_direction(d, seed ^ 0x0d1e))?
            }
        };
        segments.push(Segment {
            shift: Some(shift),
            batches: s.batches_per_segment,
            seed,
        });
    }
    Ok(StreamSpec {
        protocol: s.protocol,
        segments,
        batch_size: s.batch_size,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub segment: usize,
    /// Percent correct, from predictions made before the update.
    pub accuracy: f64,
    pub biased: Vec<usize>,
    pub truth: Option<usize>,
    pub diagnosis_available: bool,
    pub losses: LossBreakdown,
    pub updated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub index: usize,
    pub kind: Option<ShiftKind>,
    pub modality: Option<String>,
    pub severity: Option<u8>,
    pub batches: usize,
    /// Percent.
    pub accuracy: f64,
    /// Fraction of batches whose diagnosed set equals the ground truth.
    pub diagnosis_hit_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisCounts {
    pub batches: usize,
    /// Batches with a corrupted modality.
    pub corrupted: usize,
    /// Corrupted batches whose corrupted modality was detected.
    pub detected: usize,
    /// Modalities flagged that were not corrupted.
    pub false_positives: usize,
    /// Batches whose diagnosed set equals the ground truth exactly.
    pub exact: usize,
}

impl DiagnosisCounts {
    pub fn record(&mut self, biased: &[usize], truth: Option<usize>) {
        self.batches += 1;
        let hit = truth.is_some_and(|t| biased.contains(&t));
        if truth.is_some() {
            self.corrupted += 1;
        }
        if hit {
            self.detected += 1;
        }
        self.false_positives += biased.iter().filter(|&&m| Some(m) != truth).count();
        let expected: Vec<usize> = truth.into_iter().collect();
        if biased == expected.as_slice() {
            self.exact += 1;
        }
    }

    /// Correct detections over all detections; 1 when nothing was flagged.
    pub fn precision(&self) -> f64 {
        let flagged = self.detected + self.false_positives;
        if flagged == 0 {
            1.0
        } else {
            self.detected as f64 / flagged as f64
        }
    }

    /// Detected corruptions over corrupted batches; `None` on clean streams.
    pub fn recall(&self) -> Option<f64> {
        (self.corrupted > 0).then(|| self.detected as f64 / self.corrupted as f64)
    }

    pub fn hit_rate(&self) -> f64 {
        if self.batches == 0 {
            0.0
        } else {
            self.exact as f64 / self.batches as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub precision: f64,
    pub recall: Option<f64>,
    pub overall: DiagnosisCounts,
    /// Keyed by severity level; clean batches under key 0.
    pub per_severity: BTreeMap<u8, DiagnosisCounts>,
}

impl DiagnosisReport {
    fn from_counts(overall: DiagnosisCounts, per_severity: BTreeMap<u8, DiagnosisCounts>) -> Self {
        Self {
            precision: overall.precision(),
            recall: overall.recall(),
            overall,
            per_severity,
        }
    }
}

/// Clean-source accuracy lost by adaptation, in points (`original −
/// adapted`), measured with plastic adapters off and stable adapters as
/// adapted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub joint: f64,
    pub per_modality: BTreeMap<String, f64>,
    pub original_joint: f64,
    pub adapted_joint: f64,
}

/// Wall-clock measurements. They vary between runs, so they are neither
/// serialized into reports nor part of a report's equality.
#[derive(Clone, Debug, Default)]
pub struct WallClock {
    pub step_seconds: Vec<f64>,
}

impl PartialEq for WallClock {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl WallClock {
    pub fn mean_ms(&self) -> f64 {
        if self.step_seconds.is_empty() {
            0.0
        } else {
            1e3 * self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: Protocol,
    pub ablation: AblationMode,
    pub seed: u64,
    pub config_hash: String,
    pub stream_digest: String,
    /// Percent, clean test split, unadapted model.
    pub source_accuracy: f64,
    pub segments: Vec<SegmentReport>,
    /// Arithmetic mean of segment accuracies.
    pub mean_accuracy: f64,
    pub diagnosis: DiagnosisReport,
    /// Present for continual and interleaved runs.
    pub forgetting: Option<Forgetting>,
    pub parameter_updates: usize,
    pub steps: Vec<StepRecord>,
    pub config: ExperimentConfig,
    #[serde(skip)]
    pub wall_clock: WallClock,
}

fn percent_correct(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Joint accuracy in percent on `data` with the given plastic flags.
pub fn joint_accuracy(model: &ModelParams, adapters: &AdapterBank, data: &Dataset, plastic: &[bool]) -> Result<f64> {
    let z = encode_all(model, &data.inputs)?;
    let p = predict_joint(model, adapters, &z, plastic)?;
    Ok(percent_correct(&p.argmax_rows(), &data.labels))
}

/// Unimodal accuracy of modality `m` in percent.
pub fn unimodal_accuracy(
    model: &ModelParams,
    adapters: &AdapterBank,
    m: usize,
    data: &Dataset,
    adapted: bool,
) -> Result<f64> {
    let z = model.encode(m, &data.inputs[m])?;
    let p = predict_unimodal(model, adapters, m, &z, adapted)?;
    Ok(percent_correct(&p.argmax_rows(), &data.labels))
}

fn forgetting(model: &ModelParams, adapters: &AdapterBank, test: &Dataset) -> Result<Forgetting> {
    let fresh = AdapterBank::fresh(&model.config, adapters.init_seed);
    let mut retained = adapters.clone();
    for p in &mut retained.pairs {
        p.plastic_active = false;
    }
    let off = vec![false; adapters.len()];
    let original_joint = joint_accuracy(model, &fresh, test, &off)?;
    let adapted_joint = joint_accuracy(model, &retained, test, &off)?;
    let mut per_modality = BTreeMap::new();
    for (m, name) in model.config.modalities.iter().enumerate() {
        let before = unimodal_accuracy(model, &fresh, m, test, true)?;
        let after = unimodal_accuracy(model, &retained, m, test, true)?;
        per_modality.insert(name.clone(), before - after);
    }
    Ok(Forgetting {
        joint: original_joint - adapted_joint,
        per_modality,
        original_joint,
        adapted_joint,
    })
}

/// Runs `cfg` end to end, pretraining the source model first.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let source = prepare_source(cfg)?;
    run_with_source(cfg, &source)
}

/// Runs `cfg` against an already prepared source model.
pub fn run_with_source(cfg: &ExperimentConfig, source: &SourceModel) -> Result<RunReport> {
    cfg.validate()?;
    let spec = stream_spec(cfg, source)?;
    let stream = build_stream(&spec, &source.data.test, source.config())?;
    run_stream(cfg, source, &stream)
}

/// Runs the adaptation loop over a prebuilt stream.
pub fn run_stream(cfg: &ExperimentConfig, source: &SourceModel, stream: &Stream) -> Result<RunReport> {
    let model = &source.model;
    let adapt = AdaptConfig {
        strategy: cfg.ablation.strategy(),
        ..cfg.adapt.clone()
    };
    adapt.validate()?;
    let mut adapters = AdapterBank::fresh(&model.config, adapter_seed(cfg.seed));
    let mut opt = OptimizerState::new();
    let mut memory = DiagnosisMemory::new();
    let off = vec![false; adapters.len()];
    let source_accuracy = joint_accuracy(model, &adapters, &source.data.test, &off)?;

    let mut steps = Vec::with_capacity(stream.len());
    let mut wall_clock = WallClock::default();
    let mut overall = DiagnosisCounts::default();
    let mut per_severity: BTreeMap<u8, DiagnosisCounts> = BTreeMap::new();
    let mut per_segment: Vec<(f64, DiagnosisCounts)> = vec![(0.0, DiagnosisCounts::default()); stream.spec.segments.len()];
    let mut parameter_updates = 0;
    for (i, item) in stream.items.iter().enumerate() {
        if item.reset {
            episodic_reset(&mut adapters, &mut opt);
            memory.clear();
        }
        let start = Instant::now();
        let outcome = adapt_step_with(model, &mut adapters, &mut opt, Some(&mut memory), &item.batch, &adapt)?;
        wall_clock.step_seconds.push(start.elapsed().as_secs_f64());
        let accuracy = percent_correct(&outcome.predictions, &item.labels);
        overall.record(&outcome.biased, item.truth);
        per_severity
            .entry(item.severity.unwrap_or(0))
            .or_default()
            .record(&outcome.biased, item.truth);
        let seg = &mut per_segment[item.segment];
        seg.0 += accuracy;
        seg.1.record(&outcome.biased, item.truth);
        parameter_updates += outcome.updated.len();
        steps.push(StepRecord {
            step: i,
            segment: item.segment,
            accuracy,
            biased: outcome.biased,
            truth: item.truth,
            diagnosis_available: outcome.diagnosis_available,
            losses: outcome.losses,
            updated: outcome.updated.len(),
        });
    }

    let segments: Vec<SegmentReport> = stream
        .spec
        .segments
        .iter()
        .zip(&per_segment)
        .enumerate()
        .map(|(index, (seg, (acc_sum, counts)))| SegmentReport {
            index,
            kind: seg.shift.as_ref().map(|s| s.kind),
            modality: seg.shift.as_ref().map(|s| s.modality.clone()),
            severity: seg.shift.as_ref().map(|s| s.severity),
            batches: counts.batches,
            accuracy: acc_sum / counts.batches.max(1) as f64,
            diagnosis_hit_rate: counts.hit_rate(),
        })
        .collect();
    let mean_accuracy = segments.iter().map(|s| s.accuracy).sum::<f64>() / segments.len() as f64;
    let forgetting = match stream.spec.protocol {
        Protocol::Episodic => None,
        Protocol::Continual | Protocol::Interleaved => Some(forgetting(model, &adapters, &source.data.test)?),
    };
    Ok(RunReport {
        protocol: stream.spec.protocol,
        ablation: cfg.ablation,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        stream_digest: stream.digest(),
        source_accuracy,
        segments,
        mean_accuracy,
        diagnosis: DiagnosisReport::from_counts(overall, per_severity),
        forgetting,
        parameter_updates,
        steps,
        config: cfg.clone(),
        wall_clock,
    })
}

/// Diagnosis alone on the source model, without adaptation.
pub fn diagnosis_eval(stream: &Stream, model: &ModelParams, cfg: &AdaptConfig) -> Result<DiagnosisReport> {
    let mut overall = DiagnosisCounts::default();
    let mut per_severity: BTreeMap<u8, DiagnosisCounts> = BTreeMap::new();
    for item in &stream.items {
        let z = item.batch.encode(model)?;
        let features = z.iter().map(|zm| model.fuse(zm)).collect::<Result<Vec<_>>>()?;
        let report = redundancy::build_report(&features, &model.config.modalities, cfg.delta, cfg.variance_eps)?;
        let biased: Vec<usize> = report.biased.into_iter().collect();
        overall.record(&biased, item.truth);
        per_severity
            .entry(item.severity.unwrap_or(0))
            .or_default()
            .record(&biased, item.truth);
    }
    Ok(DiagnosisReport::from_counts(overall, per_severity))
}

/// Diagnosis quality of `cfg`'s stream layout at each severity level 1..=5.
pub fn severity_sweep(cfg: &ExperimentConfig, source: &SourceModel) -> Result<Vec<(u8, DiagnosisReport)>> {
    (1..=5u8)
        .map(|severity| {
            let c = ExperimentConfig {
                stream: StreamSettings {
                    severity,
                    ..cfg.stream.clone()
                },
                ..cfg.clone()
            };
            let stream = build_stream(&stream_spec(&c, source)?, &source.data.test, source.config())?;
            Ok((severity, diagnosis_eval(&stream, &source.model, &c.adapt)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<RunReport>,
}

impl AblationTable {
    pub fn get(&self, mode: AblationMode) -> Option<&RunReport> {
        self.rows.iter().find(|r| r.ablation == mode)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>10} {:>10} {:>10} {:>10}",
            "mode", "mean acc", "forget Δ", "precision", "updates"
        );
        for r in &self.rows {
            let forget = r
                .forgetting
                .as_ref()
                .map_or_else(|| "-".to_string(), |f| format!("{:.2}", f.joint));
            let _ = writeln!(
                out,
                "{:<22} {:>10.2} {:>10} {:>10.3} {:>10}",
                r.ablation.as_str(),
                r.mean_accuracy,
                forget,
                r.diagnosis.precision,
                r.parameter_updates
            );
        }
        out
    }
}

/// All six ablation modes on the same source model and stream.
pub fn ablation_matrix(base: &ExperimentConfig) -> Result<AblationTable> {
    let source = prepare_source(base)?;
    ablation_matrix_with(base, &source)
}

pub fn ablation_matrix_with(base: &ExperimentConfig, source: &SourceModel) -> Result<AblationTable> {
    let spec = stream_spec(base, source)?;
    let stream = build_stream(&spec, &source.data.test, source.config())?;
    let rows = AblationMode::ALL
        .iter()
        .map(|&ablation| {
            let cfg = ExperimentConfig {
                ablation,
                ..base.clone()
            };
            run_stream(&cfg, source, &stream)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn report_json(report: &RunReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn render_summary(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "protocol {}  ablation {}  seed {}  config {}",
        report.protocol.as_str(),
        report.ablation.as_str(),
        report.seed,
        report.config_hash
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>7}  {:<14} {:<8} {:>8} {:>9} {:>9}",
        "segment", "corruption", "modality", "severity", "accuracy", "diag hit"
    );
    for s in &report.segments {
        let _ = writeln!(
            out,
            "{:>7}  {:<14} {:<8} {:>8} {:>9.2} {:>9.3}",
            s.index,
            s.kind.map_or("clean", |k| k.as_str()),
            s.modality.as_deref().unwrap_or("-"),
            s.severity.map_or_else(|| "-".to_string(), |v| v.to_string()),
            s.accuracy,
            s.diagnosis_hit_rate
        );
    }
    let _ = writeln!(out, "{:>7}  {:<42} {:>9.2}", "mean", "", report.mean_accuracy);
    let _ = writeln!(out);
    let _ = writeln!(out, "source accuracy (clean)   {:.2}", report.source_accuracy);
    let recall = report
        .diagnosis
        .recall
        .map_or_else(|| "-".to_string(), |r| format!("{r:.3}"));
    let _ = writeln!(
        out,
        "diagnosis precision       {:.3}   recall {recall}",
        report.diagnosis.precision
    );
    if let Some(f) = &report.forgetting {
        let _ = writeln!(out, "forgetting Δ (joint)      {:.2}", f.joint);
        for (name, d) in &f.per_modality {
            let _ = writeln!(out, "forgetting Δ ({name:<6})    {d:.2}");
        }
    }
    let _ = writeln!(out, "parameter updates         {}", report.parameter_updates);
    let _ = writeln!(out, "wall clock per step (ms)  {:.3}", report.wall_clock.mean_ms());
    out
}

/// Writes `report.json`, `segments.csv` and `summary.txt` into `dir`.
pub fn write_report(report: &RunReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), report_json(report)?.as_bytes())?;

    let csv_path = dir.join("segments.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Serialize(format!("{}: {e}", csv_path.display())))?;
    let csv_err = |e: csv::Error| Error::Serialize(format!("{}: {e}", csv_path.display()));
    w.write_record([
        "protocol",
        "segment",
        "corruption",
        "modality",
        "severity",
        "accuracy",
        "diagnosis_hit_rate",
        "seed",
        "config_hash",
    ])
    .map_err(csv_err)?;
    for s in &report.segments {
        w.write_record([
            report.protocol.as_str().to_string(),
            s.index.to_string(),
            s.kind.map_or("clean", |k| k.as_str()).to_string(),
            s.modality.clone().unwrap_or_default(),
            s.severity.map(|v| v.to_string()).unwrap_or_default(),
            format!("{:.6}", s.accuracy),
            format!("{:.6}", s.diagnosis_hit_rate),
            report.seed.to_string(),
            report.config_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    write_file(&dir.join("summary.txt"), render_summary(report).as_bytes())
}

/// What `replay` needs: the config and the exact stream it ran on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub stream: StreamManifest,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, stream: &Stream) -> Self {
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            stream: stream.manifest(&cfg.task),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))?;
        write_file(path.as_ref(), json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the recorded stream and reruns the experiment on it.
    pub fn replay(&self) -> Result<RunReport> {
        let source = prepare_source(&self.config)?;
        let stream = self.stream.rebuild(&source.data.test, source.config())?;
        run_stream(&self.config, &source, &stream)
    }
}

/// Runs `cfg` and returns the report along with its replay manifest.
pub fn run_with_manifest(cfg: &ExperimentConfig, source: &SourceModel) -> Result<(RunReport, RunManifest)> {
    let spec = stream_spec(cfg, source)?;
    let stream = build_stream(&spec, &source.data.test, source.config())?;
    let report = run_stream(cfg, source, &stream)?;
    Ok((report, RunManifest::new(cfg, &stream)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!(matches!("bogus".parse::<AblationMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig {
            seed: 7,
            ablation: AblationMode::NoPlastic,
            out_dir: Some("runs/x".into()),
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let default = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&default.to_toml().unwrap()).unwrap(), default);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("[adapt]\nlearning_rat = 1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("learning_rat"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        let err = ExperimentConfig::from_toml("[stream]\nseverity = 9\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn diagnosis_counts() {
        let mut c = DiagnosisCounts::default();
        c.record(&[1], Some(1));
        c.record(&[], Some(1));
        c.record(&[0], None);
        c.record(&[], None);
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), Some(0.5));
        assert_eq!(c.hit_rate(), 0.5);
        assert_eq!(DiagnosisCounts::default().precision(), 1.0);
        assert_eq!(DiagnosisCounts::default().recall(), None);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..Default::default()
        };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
