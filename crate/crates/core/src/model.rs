//! The toy multi-modal classifier.
//!
//! Each modality `m` has its own encoder `f^m` (affine → ReLU → affine)
//! producing a `D`-dimensional feature `z^m`. A shared affine fusion
//! projection `f^u` maps every modality into one unified space, the joint
//! prediction mean-pools the projected features, and an affine head `f^c`
//! produces class logits.
//!
//! Test-time adaptation never touches [`ModelParams`]. It trains the
//! per-modality [`AdapterPair`]s that sit between the encoder and the
//! fusion projection:
//!
//! * the stable adapter is a residual low-rank bottleneck,
//!   `h = z + σ(z·W_down)·W_up`;
//! * the plastic adapter is a residual full-rank map, `h = z + z·W`.
//!
//! Both start as exact identities (`W_up = 0`, `W = 0`).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the uniform init for the stable down-projection.
pub const STABLE_DOWN_INIT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId {
    pub name: String,
    pub index: usize,
}

/// Nonlinearity inside the stable bottleneck.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    #[default]
    Relu,
    Linear,
}

impl Bottleneck {
    pub(crate) fn code(self) -> f64 {
        match self {
            Bottleneck::Relu => 0.0,
            Bottleneck::Linear => 1.0,
        }
    }

    pub(crate) fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            0 => Some(Bottleneck::Relu),
            1 => Some(Bottleneck::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<String>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub stable_rank: usize,
    pub bottleneck: Bottleneck,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: vec!["audio".into(), "video".into()],
            input_dim: 32,
            hidden_dim: 64,
            latent_dim: 64,
            num_classes: 10,
            stable_rank: 8,
            bottleneck: Bottleneck::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Spec("model needs at least one modality".into()));
        }
        let mut names: Vec<&String> = self.modalities.iter().collect();
        names.sort();
        names.dedup();
        if names.len() != self.modalities.len() {
            return Err(Error::Spec(format!(
                "modality names must be unique: {:?}",
                self.modalities
            )));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Spec("model dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least two classes".into()));
        }
        if self.stable_rank == 0 || self.stable_rank >= self.latent_dim {
            return Err(Error::Spec(format!(
                "stable rank {} must lie in 1..{}",
                self.stable_rank, self.latent_dim
            )));
        }
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality(&self, index: usize) -> ModalityId {
        ModalityId {
            name: self.modalities[index].clone(),
            index,
        }
    }

    pub fn modality_by_name(&self, name: &str) -> Option<ModalityId> {
        self.modalities
            .iter()
            .position(|n| n == name)
            .map(|index| self.modality(index))
    }

    /// Arranges a name-keyed batch into modality-index order.
    pub fn order_batch(&self, mut batch: HashMap<String, Tensor>) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.modalities.len());
        for name in &self.modalities {
            let t = batch
                .remove(name)
                .ok_or_else(|| Error::Contract(format!("batch is missing modality `{name}`")))?;
            out.push(t);
        }
        if let Some(extra) = batch.keys().next() {
            return Err(Error::Contract(format!("unknown modality `{extra}` in batch")));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoders: Vec<Encoder>,
    pub fusion_w: Tensor,
    pub fusion_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    /// Random init: He-scaled first layer, `1/fan_in` variance elsewhere,
    /// zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, h, d, c) = (
            config.input_dim,
            config.hidden_dim,
            config.latent_dim,
            config.num_classes,
        );
        let encoders = (0..config.num_modalities())
            .map(|_| Encoder {
                w1: Tensor::normal(&[d_in, h], (2.0 / d_in as f64).sqrt(), &mut rng),
                b1: Tensor::zeros(&[1, h]),
                w2: Tensor::normal(&[h, d], (1.0 / h as f64).sqrt(), &mut rng),
                b2: Tensor::zeros(&[1, d]),
            })
            .collect();
        let fusion_w = Tensor::eye(d);
        let head_w = Tensor::normal(&[d, c], (1.0 / d as f64).sqrt(), &mut rng);
        Ok(Self {
            encoders,
            fusion_w,
            fusion_b: Tensor::zeros(&[1, d]),
            head_w,
            head_b: Tensor::zeros(&[1, c]),
            config,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d_in, h, d, c) = (
            config.input_dim,
            config.hidden_dim,
            config.latent_dim,
            config.num_classes,
        );
        Ok(Self {
            encoders: (0..config.num_modalities())
                .map(|_| Encoder {
                    w1: Tensor::zeros(&[d_in, h]),
                    b1: Tensor::zeros(&[1, h]),
                    w2: Tensor::zeros(&[h, d]),
                    b2: Tensor::zeros(&[1, d]),
                })
                .collect(),
            fusion_w: Tensor::zeros(&[d, d]),
            fusion_b: Tensor::zeros(&[1, d]),
            head_w: Tensor::zeros(&[d, c]),
            head_b: Tensor::zeros(&[1, c]),
            config,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.encoders
            .iter()
            .all(|e| e.w1.all_finite() && e.b1.all_finite() && e.w2.all_finite() && e.b2.all_finite())
            && self.fusion_w.all_finite()
            && self.fusion_b.all_finite()
            && self.head_w.all_finite()
            && self.head_b.all_finite()
    }

    fn check_modality(&self, m: usize) -> Result<()> {
        if m >= self.encoders.len() {
            return Err(Error::Contract(format!(
                "modality index {m} out of range for {} modalities",
                self.encoders.len()
            )));
        }
        Ok(())
    }

    /// `z^m = f^m(x^m)`.
    pub fn encode(&self, m: usize, x: &Tensor) -> Result<Tensor> {
        self.check_modality(m)?;
        let e = &self.encoders[m];
        let h = x.matmul(&e.w1)?.add_row(&e.b1)?.relu();
        h.matmul(&e.w2)?.add_row(&e.b2)
    }

    /// `f^u(z)`: projection into the unified space.
    pub fn fuse(&self, z: &Tensor) -> Result<Tensor> {
        z.matmul(&self.fusion_w)?.add_row(&self.fusion_b)
    }

    /// `f^c(u)`: class logits.
    pub fn classify(&self, u: &Tensor) -> Result<Tensor> {
        u.matmul(&self.head_w)?.add_row(&self.head_b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableAdapter {
    /// `D × r_s`
    pub down: Tensor,
    /// `r_s × D`
    pub up: Tensor,
    pub activation: Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    pub stable: StableAdapter,
    /// Full-rank `D × D` residual weight.
    pub plastic: Tensor,
    pub plastic_active: bool,
    pub stable_trainable: bool,
}

impl AdapterPair {
    pub fn fresh(latent_dim: usize, rank: usize, activation: Bottleneck, rng: &mut ChaCha8Rng) -> Self {
        Self {
            stable: StableAdapter {
                down: Tensor::uniform(&[latent_dim, rank], -STABLE_DOWN_INIT, STABLE_DOWN_INIT, rng),
                up: Tensor::zeros(&[rank, latent_dim]),
                activation,
            },
            plastic: Tensor::zeros(&[latent_dim, latent_dim]),
            plastic_active: false,
            stable_trainable: true,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.plastic.rows()
    }

    pub fn rank(&self) -> usize {
        self.stable.down.cols()
    }

    fn check(&self, z: &Tensor, op: &'static str) -> Result<()> {
        if !z.is_matrix() || z.cols() != self.latent_dim() {
            return Err(Error::shape(op, z.shape(), self.plastic.shape()));
        }
        Ok(())
    }

    /// `h = z + σ(z·W_down)·W_up`
    pub fn stable_forward(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z, "stable_forward")?;
        let mut hidden = z.matmul(&self.stable.down)?;
        if self.stable.activation == Bottleneck::Relu {
            hidden = hidden.relu();
        }
        z.add(&hidden.matmul(&self.stable.up)?)
    }

    /// `h = z + z·W`
    pub fn plastic_forward(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z, "plastic_forward")?;
        z.add(&z.matmul(&self.plastic)?)
    }

    /// Stable adapter, then the plastic adapter only when `biased`. The
    /// plastic branch is skipped entirely otherwise, whatever its weights.
    pub fn adapted_features(&self, z: &Tensor, biased: bool) -> Result<Tensor> {
        let h = self.stable_forward(z)?;
        if biased {
            self.plastic_forward(&h)
        } else {
            Ok(h)
        }
    }
}

/// Adapters for every modality, plus the seed that regenerates their
/// initial state on reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterBank {
    pub pairs: Vec<AdapterPair>,
    pub init_seed: u64,
}

impl AdapterBank {
    pub fn fresh(config: &ModelConfig, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let pairs = (0..config.num_modalities())
            .map(|_| {
                AdapterPair::fresh(config.latent_dim, config.stable_rank, config.bottleneck, &mut rng)
            })
            .collect();
        Self { pairs, init_seed }
    }

    /// Restores every adapter to its freshly initialized state.
    pub fn reset(&mut self) {
        let pair = &self.pairs[0];
        let (d, r, act) = (pair.latent_dim(), pair.rank(), pair.stable.activation);
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        for p in &mut self.pairs {
            *p = AdapterPair::fresh(d, r, act, &mut rng);
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Modalities whose plastic adapter is currently active.
    pub fn active_set(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.plastic_active).collect()
    }
}

/// Encodes every modality of a batch, `x[m]` being modality `m`'s input.
pub fn encode_all(model: &ModelParams, x: &[Tensor]) -> Result<Vec<Tensor>> {
    x.iter().enumerate().map(|(m, xm)| model.encode(m, xm)).collect()
}

/// `z̃^m`: stable then plastic for a biased modality, stable only otherwise.
pub fn adapted_features(adapters: &AdapterBank, m: usize, z: &Tensor, biased: bool) -> Result<Tensor> {
    let pair = adapters
        .pairs
        .get(m)
        .ok_or_else(|| Error::Contract(format!("no adapter for modality {m}")))?;
    pair.adapted_features(z, biased)
}

/// Class probabilities from one modality alone. `adapted = false` is the
/// source path `f^c(f^u(z))`; `adapted = true` routes `z` through the
/// adapters first, with the plastic branch following the adapter's
/// `plastic_active` flag.
pub fn predict_unimodal(
    model: &ModelParams,
    adapters: &AdapterBank,
    m: usize,
    z: &Tensor,
    adapted: bool,
) -> Result<Tensor> {
    let feat = if adapted {
        let biased = adapters.pairs.get(m).map(|p| p.plastic_active).unwrap_or(false);
        adapted_features(adapters, m, z, biased)?
    } else {
        z.clone()
    };
    Ok(model.classify(&model.fuse(&feat)?)?.softmax_rows())
}

/// Joint class probabilities: mean over modalities of `f^u(z̃^m)`, then
/// `f^c` and softmax. `z[m]` is modality `m`'s encoder output and
/// `biased[m]` selects its plastic branch. Modalities are summed in index
/// order.
pub fn predict_joint(
    model: &ModelParams,
    adapters: &AdapterBank,
    z: &[Tensor],
    biased: &[bool],
) -> Result<Tensor> {
    let n = model.config.num_modalities();
    if z.len() != n || biased.len() != n {
        return Err(Error::Contract(format!(
            "joint prediction needs all {n} modalities, got {} feature sets and {} flags",
            z.len(),
            biased.len()
        )));
    }
    let rows = z[0].rows();
    let mut acc: Option<Tensor> = None;
    for (m, zm) in z.iter().enumerate() {
        if zm.rows() != rows {
            return Err(Error::shape("predict_joint", z[0].shape(), zm.shape()));
        }
        let u = model.fuse(&adapted_features(adapters, m, zm, biased[m])?)?;
        acc = Some(match acc {
            None => u,
            Some(a) => a.add(&u)?,
        });
    }
    let pooled = acc.expect("at least one modality").scale(1.0 / n as f64);
    Ok(model.classify(&pooled)?.softmax_rows())
}
