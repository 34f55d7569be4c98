//! Synthetic source task, supervised pretraining, and corrupted test streams.
//!
//! Each sample draws a class `y` and a per-sample semantic vector
//! `e ~ N(0, I_k)` shared by all modalities, then
//!
//! ```text
//! x^m = μ_{y,m} + latent_noise · e P_m + noise · ε^m
//! μ_{y,m} = separation · s_y P_m + ξ_{y,m}
//! ```
//!
//! where `s_y` is the class's semantic vector, `P_m` a fixed random
//! projection per modality, and `ξ` a modality-private offset. The shared
//! `e` is what makes a clean modality informative about a corrupted one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::UnlabeledBatch;
use crate::error::{Error, Result};
use crate::graph::BoundModel;
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Shift standard deviation `σ_α` for severity levels 1 to 5.
///
/// The levels are a fixed repo convention, not measured from any benchmark.
pub const SEVERITY_SIGMA: [f64; 5] = [0.25, 0.5, 1.0, 1.5, 2.0];

pub fn severity_sigma(level: u8) -> Result<f64> {
    match level {
        1..=5 => Ok(SEVERITY_SIGMA[level as usize - 1]),
        _ => Err(Error::Spec(format!("severity must be in 1..=5, got {level}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub modalities: Vec<String>,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Dimension `k` of the shared semantic space.
    pub semantic_dim: usize,
    pub separation: f64,
    pub private_offset: f64,
    pub latent_noise: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            modalities: vec!["audio".into(), "video".into()],
            num_classes: 10,
            input_dim: 32,
            semantic_dim: 8,
            separation: 0.7,
            private_offset: 0.2,
            latent_noise: 0.3,
            noise: 1.0,
            train_per_class: 200,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Spec("no modalities".into()));
        }
        if self.input_dim == 0 || self.semantic_dim == 0 {
            return Err(Error::Spec("input_dim and semantic_dim must be positive".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Spec("sample counts must be positive".into()));
        }
        for (what, v) in [
            ("separation", self.separation),
            ("private_offset", self.private_offset),
            ("latent_noise", self.latent_noise),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Spec(format!("{what} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// A model configuration whose input and output sizes fit this task.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            modalities: self.modalities.clone(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            ..base.clone()
        }
    }
}

/// Paired multi-modal samples. `inputs[m]` is `N × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.iter().map(|x| x.select_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn unlabeled(&self) -> UnlabeledBatch {
        UnlabeledBatch::new(self.inputs.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
    /// Class means per modality, `C × d_in`.
    pub means: Vec<Tensor>,
}

pub fn gen_dataset(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, k, d) = (spec.num_classes, spec.semantic_dim, spec.input_dim);
    let semantic = Tensor::normal(&[c, k], 1.0, &mut rng);
    let mut projections = Vec::new();
    let mut means = Vec::new();
    for _ in &spec.modalities {
        let p = Tensor::normal(&[k, d], (1.0 / k as f64).sqrt(), &mut rng);
        let private = Tensor::normal(&[c, d], spec.private_offset, &mut rng);
        let mu = semantic.matmul(&p)?.scale(spec.separation).add(&private)?;
        for a in 0..c {
            for b in (a + 1)..c {
                if mu.row(a) == mu.row(b) {
                    return Err(Error::Spec(format!("class means {a} and {b} coincide")));
                }
            }
        }
        projections.push(p);
        means.push(mu);
    }
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut labels: Vec<usize> = (0..c).flat_map(|y| std::iter::repeat_n(y, per_class)).collect();
        labels.shuffle(rng);
        let n = labels.len();
        let shared = Tensor::normal(&[n, k], 1.0, rng);
        let mut inputs = Vec::new();
        for (m, p) in projections.iter().enumerate() {
            let centers = means[m].select_rows(&labels);
            let semantic_part = shared.matmul(p)?.scale(spec.latent_noise);
            let private = Tensor::normal(&[n, d], 1.0, rng).scale(spec.noise);
            inputs.push(centers.add(&semantic_part)?.add(&private)?);
        }
        Ok(Dataset { inputs, labels })
    };
    let train = draw(spec.train_per_class, &mut rng)?;
    let test = draw(spec.test_per_class, &mut rng)?;
    Ok(TaskData { train, test, means })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        t.set(r, y, 1.0);
    }
    t
}

/// Supervised training of encoders, fusion and head with cross-entropy on
/// the joint prediction plus the mean cross-entropy of each modality's
/// unimodal prediction. Adapters are not involved.
pub fn pretrain_source(
    model: &mut ModelParams,
    data: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainLog> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("pretraining needs a positive batch size and learning rate".into()));
    }
    let n_mod = model.config.num_modalities();
    if data.inputs.len() != n_mod {
        return Err(Error::Contract(format!(
            "dataset has {} modalities, model expects {n_mod}",
            data.inputs.len()
        )));
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    let mut opt: Adam<usize> = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e37_79b9_7f4a);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = PretrainLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.subset(chunk);
            let loss = train_step(model, &batch, &mut opt, &adam)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, seed });
            }
            total += loss;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
    }
    if !model.all_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs.saturating_sub(1),
            seed,
        });
    }
    Ok(log)
}

fn train_step(model: &mut ModelParams, batch: &Dataset, opt: &mut Adam<usize>, adam: &AdamConfig) -> Result<f64> {
    let n_mod = model.config.num_modalities();
    let b = batch.len() as f64;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model, true);
    let target = tape.constant(one_hot(&batch.labels, model.config.num_classes));
    let mut unified = Vec::with_capacity(n_mod);
    for (m, x) in batch.inputs.iter().enumerate() {
        let xv = tape.constant(x.clone());
        let z = bound.encode(&mut tape, m, xv)?;
        unified.push(bound.fuse(&mut tape, z)?);
    }
    let ce = |tape: &mut Tape, u| -> Result<_> {
        let logits = bound.classify(tape, u)?;
        let p = tape.softmax_rows(logits);
        let lp = tape.log(p, 1e-12);
        let picked = tape.mul(target, lp)?;
        let s = tape.sum(picked);
        Ok(tape.scale(s, -1.0 / b))
    };
    let mut pooled = unified[0];
    for &u in &unified[1..] {
        pooled = tape.add(pooled, u)?;
    }
    let pooled = tape.scale(pooled, 1.0 / n_mod as f64);
    let mut loss = ce(&mut tape, pooled)?;
    let mut uni = None;
    for &u in &unified {
        let l = ce(&mut tape, u)?;
        uni = Some(match uni {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    if let Some(u) = uni {
        let u = tape.scale(u, 1.0 / n_mod as f64);
        loss = tape.add(loss, u)?;
    }
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = tape.backward(loss)?;
    opt.begin_step();
    let mut slot = 0usize;
    let mut apply = |var, param: &mut Tensor| -> Result<()> {
        let g = grads
            .take(var)
            .ok_or_else(|| Error::Contract("missing pretraining gradient".into()))?;
        opt.update(&slot, param, &g, adam)?;
        slot += 1;
        Ok(())
    };
    for (e, be) in model.encoders.iter_mut().zip(&bound.encoders) {
        apply(be.w1, &mut e.w1)?;
        apply(be.b1, &mut e.b1)?;
        apply(be.w2, &mut e.w2)?;
        apply(be.b2, &mut e.b2)?;
    }
    apply(bound.fusion_w, &mut model.fusion_w)?;
    apply(bound.fusion_b, &mut model.fusion_b)?;
    apply(bound.head_w, &mut model.head_w)?;
    apply(bound.head_b, &mut model.head_b)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShiftKind {
    /// Per-entry Gaussian noise on the raw inputs.
    #[serde(rename = "input-gaussian")]
    InputGaussian,
    /// `z̃ = z + α v` on the encoder output with `α ~ N(0, σ_α²)` per sample.
    #[serde(rename = "rank1-latent")]
    Rank1Latent,
}

impl ShiftKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftKind::InputGaussian => "input-gaussian",
            ShiftKind::Rank1Latent => "rank1-latent",
        }
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input-gaussian" => Ok(ShiftKind::InputGaussian),
            "rank1-latent" => Ok(ShiftKind::Rank1Latent),
            other => Err(Error::Config(format!(
                "unknown shift kind {other:?} (expected input-gaussian or rank1-latent)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub modality: String,
    pub severity: u8,
    /// Unit-norm direction `v` in encoder-output space (rank-1 kind only).
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    /// Scale of the shift in the units of the space it acts on: the shift
    /// added is `gain · α · v` (or noise of standard deviation
    /// `gain · σ_α`). 1 reproduces the textbook model exactly.
    #[serde(default = "unit_gain")]
    pub gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

/// A dense unit vector drawn from `seed`.
pub fn random_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && v.iter().filter(|x| **x != 0.0).count() >= 2.min(dim) {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl ShiftSpec {
    pub fn input_gaussian(modality: &str, severity: u8) -> Self {
        Self {
            kind: ShiftKind::InputGaussian,
            modality: modality.to_string(),
            severity,
            direction: None,
            gain: 1.0,
        }
    }

    pub fn rank1(modality: &str, severity: u8, direction: Vec<f64>) -> Self {
        Self {
            kind: ShiftKind::Rank1Latent,
            modality: modality.to_string(),
            severity,
            direction: Some(direction),
            gain: 1.0,
        }
    }

    pub fn sigma_alpha(&self) -> Result<f64> {
        severity_sigma(self.severity)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.sigma_alpha()?;
        if config.modality_by_name(&self.modality).is_none() {
            return Err(Error::Spec(format!("shift targets unknown modality {:?}", self.modality)));
        }
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return Err(Error::Spec("shift gain must be positive".into()));
        }
        if self.kind == ShiftKind::Rank1Latent {
            let v = self
                .direction
                .as_ref()
                .ok_or_else(|| Error::Spec("rank-1 shift needs a direction".into()))?;
            if v.len() != config.latent_dim {
                return Err(Error::Spec(format!(
                    "shift direction has {} entries, latent dimension is {}",
                    v.len(),
                    config.latent_dim
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Spec(format!("shift direction has norm {norm}, expected 1")));
            }
            if v.iter().filter(|x| **x != 0.0).count() < 2 {
                return Err(Error::Spec("shift direction needs at least 2 nonzero entries".into()));
            }
        }
        Ok(())
    }
}

/// Corrupts the target modality of `batch`. Other modalities are returned
/// unchanged.
pub fn apply_shift<R: Rng + ?Sized>(
    batch: &UnlabeledBatch,
    shift: &ShiftSpec,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<UnlabeledBatch> {
    shift.validate(config)?;
    let m = config
        .modality_by_name(&shift.modality)
        .map(|id| id.index)
        .ok_or_else(|| Error::Spec(format!("unknown modality {:?}", shift.modality)))?;
    if m >= batch.inputs.len() {
        return Err(Error::Contract(format!("batch lacks modality {:?}", shift.modality)));
    }
    let sigma = shift.sigma_alpha()? * shift.gain;
    let mut out = batch.clone();
    let b = batch.len();
    match shift.kind {
        ShiftKind::InputGaussian => {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::Spec(e.to_string()))?;
            for x in out.inputs[m].data_mut() {
                *x += noise.sample(rng);
            }
        }
        ShiftKind::Rank1Latent => {
            let v = shift.direction.as_ref().expect("validated");
            let d = v.len();
            let mut offset = Tensor::zeros(&[b, d]);
            for r in 0..b {
                let z: f64 = StandardNormal.sample(rng);
                let alpha = sigma * z;
                for (j, vj) in v.iter().enumerate() {
                    offset.set(r, j, alpha * vj);
                }
            }
            out.latent_offsets[m] = Some(match out.latent_offsets[m].take() {
                Some(prev) => prev.add(&offset)?,
                None => offset,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Adapters reset at the start of every segment.
    #[default]
    Episodic,
    /// Segments follow each other without resets.
    Continual,
    /// Like continual, with the corrupted modality alternating.
    Interleaved,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Episodic => "episodic",
            Protocol::Continual => "continual",
            Protocol::Interleaved => "interleaved",
        }
    }

    pub fn resets(&self) -> bool {
        *self == Protocol::Episodic
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "episodic" => Ok(Protocol::Episodic),
            "continual" => Ok(Protocol::Continual),
            "interleaved" => Ok(Protocol::Interleaved),
            other => Err(Error::Config(format!(
                "unknown protocol {other:?} (expected episodic, continual or interleaved)"
            ))),
        }
    }
}

/// A run of batches under one corruption. `shift: None` is clean data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub shift: Option<ShiftSpec>,
    pub batches: usize,
    /// Drives sample selection and shift draws for this segment alone, so a
    /// segment's data does not depend on where it sits in the stream.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub protocol: Protocol,
    pub segments: Vec<Segment>,
    pub batch_size: usize,
}

impl StreamSpec {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Spec("stream has no segments".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Spec("batch_size must be at least 2".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.batches == 0 {
                return Err(Error::Spec(format!("segment {i} has no batches")));
            }
            if let Some(s) = &seg.shift {
                s.validate(config)?;
            }
        }
        if self.protocol == Protocol::Interleaved {
            for (i, pair) in self.segments.windows(2).enumerate() {
                let a = pair[0].shift.as_ref().map(|s| &s.modality);
                let b = pair[1].shift.as_ref().map(|s| &s.modality);
                if a == b {
                    return Err(Error::Spec(format!(
                        "interleaved segments {i} and {} target the same modality",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches).sum()
    }
}

/// One batch of a stream. Labels travel beside the batch, never inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamItem {
    pub segment: usize,
    pub batch: UnlabeledBatch,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    /// The corrupted modality, if any.
    pub truth: Option<usize>,
    pub severity: Option<u8>,
    /// Adapters must be reset before this batch.
    pub reset: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub spec: StreamSpec,
    pub items: Vec<StreamItem>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn reset_count(&self) -> usize {
        self.items.iter().filter(|i| i.reset).count()
    }

    /// SHA-256 over every tensor and label in the stream, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for item in &self.items {
            h.update((item.segment as u64).to_le_bytes());
            for x in &item.batch.inputs {
                for v in x.data() {
                    h.update(v.to_le_bytes());
                }
            }
            for off in &item.batch.latent_offsets {
                match off {
                    Some(o) => {
                        h.update([1u8]);
                        for v in o.data() {
                            h.update(v.to_le_bytes());
                        }
                    }
                    None => h.update([0u8]),
                }
            }
            for &y in &item.labels {
                h.update((y as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self, task: &TaskSpec) -> StreamManifest {
        StreamManifest {
            task: task.clone(),
            spec: self.spec.clone(),
            batches: self
                .items
                .iter()
                .map(|i| ManifestEntry {
                    segment: i.segment,
                    indices: i.indices.clone(),
                    truth: i.truth,
                    reset: i.reset,
                })
                .collect(),
            digest: self.digest(),
        }
    }
}

/// Yields the batches of `spec` drawn from `data` (normally the test
/// split), with ground truth and reset markers attached.
pub fn build_stream(spec: &StreamSpec, data: &Dataset, config: &ModelConfig) -> Result<Stream> {
    spec.validate(config)?;
    if data.len() < spec.batch_size {
        return Err(Error::Spec(format!(
            "batch_size {} exceeds the {} available samples",
            spec.batch_size,
            data.len()
        )));
    }
    let mut items = Vec::with_capacity(spec.total_batches());
    for (s, seg) in spec.segments.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seg.seed);
        let mut pool: Vec<usize> = (0..data.len()).collect();
        pool.shuffle(&mut rng);
        let mut cursor = 0;
        let truth = match &seg.shift {
            Some(sh) => config.modality_by_name(&sh.modality).map(|id| id.index),
            None => None,
        };
        for b in 0..seg.batches {
            if cursor + spec.batch_size > pool.len() {
                pool.shuffle(&mut rng);
                cursor = 0;
            }
            let indices = pool[cursor..cursor + spec.batch_size].to_vec();
            cursor += spec.batch_size;
            let clean = data.subset(&indices);
            let batch = match &seg.shift {
                Some(sh) => apply_shift(&clean.unlabeled(), sh, config, &mut rng)?,
                None => clean.unlabeled(),
            };
            items.push(StreamItem {
                segment: s,
                batch,
                labels: clean.labels,
                indices,
                truth,
                severity: seg.shift.as_ref().map(|sh| sh.severity),
                reset: spec.protocol.resets() && b == 0,
            });
        }
    }
    Ok(Stream {
        spec: spec.clone(),
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub segment: usize,
    pub indices: Vec<usize>,
    pub truth: Option<usize>,
    pub reset: bool,
}

/// Everything needed to rebuild a stream exactly, plus a digest to prove it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub task: TaskSpec,
    pub spec: StreamSpec,
    pub batches: Vec<ManifestEntry>,
    pub digest: String,
}

impl StreamManifest {
    /// Rebuilds the stream and checks it against the recorded sample
    /// indices and digest.
    pub fn rebuild(&self, data: &Dataset, config: &ModelConfig) -> Result<Stream> {
        let stream = build_stream(&self.spec, data, config)?;
        let same_layout = stream.items.len() == self.batches.len()
            && stream
                .items
                .iter()
                .zip(&self.batches)
                .all(|(i, e)| i.indices == e.indices && i.segment == e.segment && i.reset == e.reset);
        if !same_layout || stream.digest() != self.digest {
            return Err(Error::Contract("rebuilt stream does not match its manifest".into()));
        }
        Ok(stream)
    }
}

/// Segment seeds derived from the segment's content, not its position.
pub fn segment_seed(stream_seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(stream_seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
