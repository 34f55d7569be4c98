//! Online test-time adaptation with diagnosis-gated asymmetric updates.
//!
//! Each step encodes the batch, scores every modality's redundancy on the
//! source path, diagnoses the biased set `G`, and then trains
//!
//! * the plastic adapter of every `m ∈ G` (its stable adapter frozen), and
//! * the stable adapter of every `m ∉ G` (its plastic adapter bypassed),
//!
//! against
//!
//! ```text
//! L_total = L_div + λ_ent · L_ent + λ_kl · L_kl
//! ```
//!
//! where `L_ent` is the batch-mean prediction entropy of the joint output,
//! `L_div = Σ_y p̂_y ln p̂_y` over the batch-mean prediction `p̂`, and `L_kl`
//! is the mean over unbiased modalities of `KL(p_tgt^m ‖ p_src^m)`.
//!
//! The alternative [`Strategy`] values implement the ablations.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::batch::UnlabeledBatch;
use crate::error::{Error, Result};
use crate::graph::{AdapterBinding, BoundAdapter, BoundModel};
use crate::model::{predict_unimodal, AdapterBank, ModelParams};
use crate::optim::{Adam, AdamConfig};
use crate::redundancy::{self, FeatureQueue, RedundancyReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on row sums accepted by the eager loss functions.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Which adapters train for which modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plastic for biased modalities, stable (with KL) for the rest.
    #[default]
    Asymmetric,
    /// Stable adapters removed: only the plastic adapters of biased
    /// modalities train.
    NoStable,
    /// Plastic adapters removed: biased modalities fall back to training
    /// their stable adapter (without the KL anchor).
    NoPlastic,
    /// No diagnosis gating: every adapter of every modality trains, no KL.
    Symmetric,
    /// The rule inverted: plastic for unbiased, stable (with KL) for biased.
    Opposite,
    /// Nothing trains; predictions are the source model's.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub lambda_ent: f64,
    pub lambda_kl: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub episodic_reset: bool,
    pub variance_eps: f64,
    /// Majority vote of the diagnosis over this many recent batches;
    /// 0 or 1 disables smoothing.
    pub vote_window: usize,
    /// Score redundancy over a FIFO of recent rows when batches are small.
    pub feature_queue: bool,
    /// Diagnose on adapted rather than source-path features.
    pub diagnose_on_adapted: bool,
    pub strategy: Strategy,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            delta: 0.05,
            lambda_ent: 0.5,
            lambda_kl: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            episodic_reset: false,
            variance_eps: redundancy::DEFAULT_VARIANCE_EPS,
            vote_window: 0,
            feature_queue: false,
            diagnose_on_adapted: false,
            strategy: Strategy::Asymmetric,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.lambda_ent >= 0.0) || !(self.lambda_kl >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.variance_eps > 0.0) {
            return bad("epsilon and variance_eps must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

fn check_prob_rows(p: &Tensor, what: &str) -> Result<()> {
    if !p.is_matrix() {
        return Err(Error::Contract(format!("{what}: expected B×C probabilities, got {:?}", p.shape())));
    }
    for r in 0..p.rows() {
        let row = p.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Contract(format!(
                "{what}: row {r} is not a probability vector (sums to {s})"
            )));
        }
    }
    Ok(())
}

fn xlogx(p: f64) -> f64 {
    p * p.max(PROB_FLOOR).ln()
}

/// Batch-mean Shannon entropy of the rows of `p`, in nats.
pub fn entropy_loss(p: &Tensor) -> Result<f64> {
    check_prob_rows(p, "entropy")?;
    let total: f64 = (0..p.rows()).map(|r| -p.row(r).iter().map(|&v| xlogx(v)).sum::<f64>()).sum();
    Ok(total / p.rows() as f64)
}

/// `Σ_y p̂_y ln p̂_y` for the batch-mean prediction `p̂`: the negative
/// entropy of the marginal, lowest when predictions spread over classes.
pub fn diversity_loss(p: &Tensor) -> Result<f64> {
    check_prob_rows(p, "diversity")?;
    Ok(p.mean_rows().data().iter().map(|&v| xlogx(v)).sum())
}

/// Batch-mean `KL(p_tgt ‖ p_src)`.
pub fn kl_loss(p_tgt: &Tensor, p_src: &Tensor) -> Result<f64> {
    check_prob_rows(p_tgt, "kl target")?;
    check_prob_rows(p_src, "kl source")?;
    if p_tgt.shape() != p_src.shape() {
        return Err(Error::shape("kl_loss", p_tgt.shape(), p_src.shape()));
    }
    let mut total = 0.0;
    for (t, s) in p_tgt.data().iter().zip(p_src.data()) {
        total += t * (t.max(PROB_FLOOR).ln() - s.max(PROB_FLOOR).ln());
    }
    Ok(total / p_tgt.rows() as f64)
}

/// Taped batch-mean entropy.
pub fn entropy_on(tape: &mut Tape, p: Var) -> Result<Var> {
    let b = tape.value(p).rows() as f64;
    let lp = tape.log(p, PROB_FLOOR);
    let plp = tape.mul(p, lp)?;
    let s = tape.sum(plp);
    Ok(tape.scale(s, -1.0 / b))
}

/// Taped diversity term.
pub fn diversity_on(tape: &mut Tape, p: Var) -> Result<Var> {
    let marginal = tape.mean_rows(p);
    let lm = tape.log(marginal, PROB_FLOOR);
    let mlm = tape.mul(marginal, lm)?;
    Ok(tape.sum(mlm))
}

/// Taped batch-mean KL against a fixed source distribution, given as its
/// clamped log.
pub fn kl_on(tape: &mut Tape, p_tgt: Var, log_src: &Tensor) -> Result<Var> {
    let b = tape.value(p_tgt).rows() as f64;
    let lt = tape.log(p_tgt, PROB_FLOOR);
    let neg_ls = tape.constant(log_src.scale(-1.0));
    let diff = tape.add(lt, neg_ls)?;
    let prod = tape.mul(p_tgt, diff)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSlot {
    StableDown,
    StableUp,
    Plastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub modality: usize,
    pub slot: AdapterSlot,
}

impl ParamKey {
    pub fn name(&self, modalities: &[String]) -> String {
        let m = &modalities[self.modality];
        match self.slot {
            AdapterSlot::StableDown => format!("{m}.stable.down"),
            AdapterSlot::StableUp => format!("{m}.stable.up"),
            AdapterSlot::Plastic => format!("{m}.plastic"),
        }
    }
}

pub type OptimizerState = Adam<ParamKey>;

/// The outcome of the parameter-selection rule for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub bindings: Vec<AdapterBinding>,
    /// Modalities contributing to the KL term.
    pub kl_modalities: Vec<usize>,
}

impl Selection {
    pub fn trainable(&self) -> BTreeSet<ParamKey> {
        let mut out = BTreeSet::new();
        for (m, b) in self.bindings.iter().enumerate() {
            if b.train_stable {
                out.insert(ParamKey { modality: m, slot: AdapterSlot::StableDown });
                out.insert(ParamKey { modality: m, slot: AdapterSlot::StableUp });
            }
            if b.train_plastic && b.plastic_on {
                out.insert(ParamKey { modality: m, slot: AdapterSlot::Plastic });
            }
        }
        out
    }

    pub fn plastic_mask(&self) -> Vec<bool> {
        self.bindings.iter().map(|b| b.plastic_on).collect()
    }
}

/// Selection under `strategy` for diagnosed set `biased`. Also updates the
/// `plastic_active` / `stable_trainable` flags on the adapters.
pub fn select_for(strategy: Strategy, adapters: &mut AdapterBank, biased: &BTreeSet<usize>) -> Selection {
    let n = adapters.len();
    let plastic = AdapterBinding {
        train_stable: false,
        train_plastic: true,
        plastic_on: true,
    };
    let stable = AdapterBinding {
        train_stable: true,
        train_plastic: false,
        plastic_on: false,
    };
    let frozen = AdapterBinding::default();
    let mut bindings = Vec::with_capacity(n);
    let mut kl = Vec::new();
    for m in 0..n {
        let in_g = biased.contains(&m);
        let (b, anchored) = match strategy {
            Strategy::Asymmetric => {
                if in_g {
                    (plastic, false)
                } else {
                    (stable, true)
                }
            }
            Strategy::NoStable => {
                if in_g {
                    (plastic, false)
                } else {
                    (frozen, true)
                }
            }
            Strategy::NoPlastic => (stable, !in_g),
            Strategy::Symmetric => (
                AdapterBinding {
                    train_stable: true,
                    train_plastic: true,
                    plastic_on: true,
                },
                false,
            ),
            Strategy::Opposite => {
                if in_g {
                    (stable, true)
                } else {
                    (plastic, false)
                }
            }
            Strategy::Frozen => (frozen, false),
        };
        if anchored {
            kl.push(m);
        }
        let pair = &mut adapters.pairs[m];
        pair.plastic_active = b.plastic_on;
        pair.stable_trainable = b.train_stable;
        bindings.push(b);
    }
    Selection {
        bindings,
        kl_modalities: kl,
    }
}

/// The asymmetric rule: plastic weights of `m ∈ G`, stable weights of
/// `m ∉ G`.
pub fn select_trainable(adapters: &mut AdapterBank, biased: &BTreeSet<usize>) -> Selection {
    select_for(Strategy::Asymmetric, adapters, biased)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub entropy: f64,
    pub diversity: f64,
    pub kl: f64,
}

/// Loss values, joint predictions and gradients for every selected
/// parameter, for encoder features `z` under `selection`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub losses: LossBreakdown,
    pub probabilities: Tensor,
    pub gradients: BTreeMap<ParamKey, Tensor>,
}

pub fn evaluate_objective(
    model: &ModelParams,
    adapters: &AdapterBank,
    z: &[Tensor],
    selection: &Selection,
    cfg: &AdaptConfig,
) -> Result<Objective> {
    let n = model.config.num_modalities();
    if z.len() != n || selection.bindings.len() != n {
        return Err(Error::Contract(format!(
            "objective needs {n} modalities, got {} feature sets",
            z.len()
        )));
    }
    let mut tape = Tape::new();
    let top = BoundModel::bind_top(&mut tape, model);
    let mut bound = Vec::with_capacity(n);
    let mut unified = Vec::with_capacity(n);
    for (m, zm) in z.iter().enumerate() {
        let zv = tape.constant(zm.clone());
        let ad = BoundAdapter::bind(&mut tape, &adapters.pairs[m], selection.bindings[m]);
        let zt = ad.forward(&mut tape, zv)?;
        unified.push(top.fuse(&mut tape, zt)?);
        bound.push(ad);
    }
    let mut pooled = unified[0];
    for &u in &unified[1..] {
        pooled = tape.add(pooled, u)?;
    }
    let pooled = tape.scale(pooled, 1.0 / n as f64);
    let logits = top.classify(&mut tape, pooled)?;
    let p = tape.softmax_rows(logits);

    let ent = entropy_on(&mut tape, p)?;
    let div = diversity_on(&mut tape, p)?;
    let mut kl_terms = Vec::new();
    for &m in &selection.kl_modalities {
        let src = predict_unimodal(model, adapters, m, &z[m], false)?;
        let log_src = src.map(|v| v.max(PROB_FLOOR).ln());
        let lm = top.classify(&mut tape, unified[m])?;
        let pm = tape.softmax_rows(lm);
        kl_terms.push(kl_on(&mut tape, pm, &log_src)?);
    }
    let kl = if kl_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut acc = kl_terms[0];
        for &t in &kl_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        tape.scale(acc, 1.0 / kl_terms.len() as f64)
    };
    let w_ent = tape.scale(ent, cfg.lambda_ent);
    let w_kl = tape.scale(kl, cfg.lambda_kl);
    let total = tape.add(div, w_ent)?;
    let total = tape.add(total, w_kl)?;

    let losses = LossBreakdown {
        total: tape.value(total).item()?,
        entropy: tape.value(ent).item()?,
        diversity: tape.value(div).item()?,
        kl: tape.value(kl).item()?,
    };
    if !losses.total.is_finite() {
        return Err(Error::Contract("adaptation loss is not finite".into()));
    }

    let mut gradients = BTreeMap::new();
    let trainable = selection.trainable();
    if !trainable.is_empty() {
        let mut grads = tape.backward(total)?;
        for key in trainable {
            let ad = &bound[key.modality];
            let var = match key.slot {
                AdapterSlot::StableDown => Some(ad.down),
                AdapterSlot::StableUp => Some(ad.up),
                AdapterSlot::Plastic => ad.plastic,
            };
            if let Some(g) = var.and_then(|v| grads.take(v)) {
                gradients.insert(key, g);
            }
        }
    }
    Ok(Objective {
        losses,
        probabilities: tape.value(p).clone(),
        gradients,
    })
}

/// Per-loop state beyond adapters and optimizer: the optional feature
/// queues and the recent diagnoses for majority voting.
#[derive(Clone, Debug, Default)]
pub struct DiagnosisMemory {
    queues: Vec<FeatureQueue>,
    votes: VecDeque<BTreeSet<usize>>,
}

impl DiagnosisMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.queues.clear();
        self.votes.clear();
    }

    fn smooth(&mut self, g: BTreeSet<usize>, window: usize) -> BTreeSet<usize> {
        if window <= 1 {
            return g;
        }
        self.votes.push_back(g);
        while self.votes.len() > window {
            self.votes.pop_front();
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for set in &self.votes {
            for &m in set {
                *counts.entry(m).or_default() += 1;
            }
        }
        let need = self.votes.len() / 2 + 1;
        counts
            .into_iter()
            .filter(|(_, c)| *c >= need)
            .map(|(m, _)| m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// The diagnosed set used for this step (after any smoothing).
    pub biased: Vec<usize>,
    pub diagnosis_available: bool,
    pub report: RedundancyReport,
    /// Names of the parameters the optimizer updated.
    pub updated: Vec<String>,
    /// Argmax of the joint prediction, computed before the update.
    pub predictions: Vec<usize>,
    /// Filled in by evaluation code that holds labels.
    pub accuracy: Option<f64>,
}

/// One adaptation step on an unlabeled batch.
pub fn adapt_step(
    model: &ModelParams,
    adapters: &mut AdapterBank,
    opt: &mut OptimizerState,
    batch: &UnlabeledBatch,
    cfg: &AdaptConfig,
) -> Result<StepOutcome> {
    adapt_step_with(model, adapters, opt, None, batch, cfg)
}

/// [`adapt_step`] with optional cross-batch diagnosis state.
pub fn adapt_step_with(
    model: &ModelParams,
    adapters: &mut AdapterBank,
    opt: &mut OptimizerState,
    memory: Option<&mut DiagnosisMemory>,
    batch: &UnlabeledBatch,
    cfg: &AdaptConfig,
) -> Result<StepOutcome> {
    let z = batch.encode(model)?;
    let names = &model.config.modalities;

    let mut diag_features = Vec::with_capacity(z.len());
    for (m, zm) in z.iter().enumerate() {
        let feat = if cfg.diagnose_on_adapted {
            let pair = &adapters.pairs[m];
            pair.adapted_features(zm, pair.plastic_active)?
        } else {
            zm.clone()
        };
        diag_features.push(model.fuse(&feat)?);
    }

    let mut memory = memory;
    if let Some(mem) = memory.as_deref_mut() {
        if cfg.feature_queue && batch.len() < redundancy::QUEUE_MIN_BATCH {
            if mem.queues.len() != z.len() {
                mem.queues = vec![FeatureQueue::new(redundancy::DEFAULT_QUEUE_CAPACITY); z.len()];
            }
            for (q, f) in mem.queues.iter_mut().zip(diag_features.iter_mut()) {
                q.push_batch(f);
                if let Some(mx) = q.matrix() {
                    *f = mx;
                }
            }
        }
    }

    let report = redundancy::build_report(&diag_features, names, cfg.delta, cfg.variance_eps)?;
    let mut biased = report.biased.clone();
    if let Some(mem) = memory {
        biased = mem.smooth(biased, cfg.vote_window);
    }

    let selection = select_for(cfg.strategy, adapters, &biased);
    let objective = evaluate_objective(model, adapters, &z, &selection, cfg)?;

    let mut updated = Vec::new();
    if !objective.gradients.is_empty() {
        opt.begin_step();
        let adam = cfg.adam();
        for (key, grad) in &objective.gradients {
            let pair = &mut adapters.pairs[key.modality];
            let param = match key.slot {
                AdapterSlot::StableDown => &mut pair.stable.down,
                AdapterSlot::StableUp => &mut pair.stable.up,
                AdapterSlot::Plastic => &mut pair.plastic,
            };
            opt.update(key, param, grad, &adam)?;
            updated.push(key.name(names));
        }
    }

    Ok(StepOutcome {
        losses: objective.losses,
        biased: biased.into_iter().collect(),
        diagnosis_available: report.available,
        report,
        updated,
        predictions: objective.probabilities.argmax_rows(),
        accuracy: None,
    })
}

/// Returns adapters to their initial state and clears optimizer moments.
/// Source model weights are never touched.
pub fn episodic_reset(adapters: &mut AdapterBank, opt: &mut OptimizerState) {
    adapters.reset();
    opt.reset();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_anchors() {
        let u = Tensor::full(&[3, 10], 0.1);
        assert!((entropy_loss(&u).unwrap() - 10f64.ln()).abs() < 1e-12);
        let onehot = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(entropy_loss(&onehot).unwrap(), 0.0);
        let p = Tensor::from_rows(&[[0.7, 0.3]]);
        let expect = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        assert!((entropy_loss(&p).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.610864).abs() < 1e-6);
    }

    #[test]
    fn diversity_anchors() {
        let u = Tensor::full(&[4, 5], 0.2);
        assert!((diversity_loss(&u).unwrap() + 5f64.ln()).abs() < 1e-12);
        let same = Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0]]);
        assert_eq!(diversity_loss(&same).unwrap(), 0.0);
        let split = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!((diversity_loss(&split).unwrap() + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_anchors() {
        let p = Tensor::from_rows(&[[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]);
        assert_eq!(kl_loss(&p, &p).unwrap(), 0.0);
        let t = Tensor::from_rows(&[[1.0, 0.0]]);
        let s = Tensor::from_rows(&[[0.5, 0.5]]);
        assert!((kl_loss(&t, &s).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn losses_reject_unnormalized_rows() {
        let bad = Tensor::from_rows(&[[0.5, 0.4]]);
        assert!(matches!(entropy_loss(&bad), Err(Error::Contract(_))));
        assert!(matches!(diversity_loss(&bad), Err(Error::Contract(_))));
        let ok = Tensor::from_rows(&[[0.5, 0.5]]);
        assert!(matches!(kl_loss(&bad, &ok), Err(Error::Contract(_))));
        assert!(matches!(kl_loss(&ok, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn taped_losses_match_eager() {
        let p = Tensor::from_rows(&[[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.0, 0.0, 1.0]]);
        let s = Tensor::from_rows(&[[0.3, 0.3, 0.4], [0.5, 0.25, 0.25], [0.1, 0.1, 0.8]]);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let e = entropy_on(&mut tape, pv).unwrap();
        let d = diversity_on(&mut tape, pv).unwrap();
        let k = kl_on(&mut tape, pv, &s.map(|v| v.max(PROB_FLOOR).ln())).unwrap();
        assert!((tape.value(e).item().unwrap() - entropy_loss(&p).unwrap()).abs() < 1e-15);
        assert!((tape.value(d).item().unwrap() - diversity_loss(&p).unwrap()).abs() < 1e-15);
        assert!((tape.value(k).item().unwrap() - kl_loss(&p, &s).unwrap()).abs() < 1e-15);
    }

    fn bank(n: usize) -> AdapterBank {
        let cfg = crate::model::ModelConfig {
            modalities: (0..n).map(|i| format!("m{i}")).collect(),
            latent_dim: 8,
            stable_rank: 2,
            ..Default::default()
        };
        AdapterBank::fresh(&cfg, 1)
    }

    fn keys(sel: &Selection) -> Vec<(usize, AdapterSlot)> {
        sel.trainable().into_iter().map(|k| (k.modality, k.slot)).collect()
    }

    #[test]
    fn selection_with_empty_g_is_stable_only() {
        let mut b = bank(2);
        let sel = select_trainable(&mut b, &BTreeSet::new());
        assert_eq!(
            keys(&sel),
            vec![
                (0, AdapterSlot::StableDown),
                (0, AdapterSlot::StableUp),
                (1, AdapterSlot::StableDown),
                (1, AdapterSlot::StableUp)
            ]
        );
        assert_eq!(sel.kl_modalities, vec![0, 1]);
        assert!(b.pairs.iter().all(|p| !p.plastic_active && p.stable_trainable));
    }

    #[test]
    fn selection_with_biased_audio() {
        let mut b = bank(2);
        let sel = select_trainable(&mut b, &BTreeSet::from([0]));
        assert_eq!(
            keys(&sel),
            vec![
                (0, AdapterSlot::Plastic),
                (1, AdapterSlot::StableDown),
                (1, AdapterSlot::StableUp)
            ]
        );
        assert_eq!(sel.kl_modalities, vec![1]);
        assert!(b.pairs[0].plastic_active && !b.pairs[0].stable_trainable);
        assert!(!b.pairs[1].plastic_active && b.pairs[1].stable_trainable);
    }

    #[test]
    fn ablation_selections() {
        let g = BTreeSet::from([0]);
        let mut b = bank(2);
        let sym = select_for(Strategy::Symmetric, &mut b, &g);
        assert_eq!(sym.trainable().len(), 6);
        assert!(sym.kl_modalities.is_empty());

        let opp = select_for(Strategy::Opposite, &mut b, &g);
        assert_eq!(
            keys(&opp),
            vec![
                (0, AdapterSlot::StableDown),
                (0, AdapterSlot::StableUp),
                (1, AdapterSlot::Plastic)
            ]
        );
        assert_eq!(opp.kl_modalities, vec![0]);

        let ns = select_for(Strategy::NoStable, &mut b, &g);
        assert_eq!(keys(&ns), vec![(0, AdapterSlot::Plastic)]);

        let np = select_for(Strategy::NoPlastic, &mut b, &g);
        assert_eq!(np.trainable().len(), 4);
        assert_eq!(np.kl_modalities, vec![1]);
        assert!(np.plastic_mask().iter().all(|on| !on));

        let fz = select_for(Strategy::Frozen, &mut b, &g);
        assert!(fz.trainable().is_empty());
    }

    #[test]
    fn majority_vote_window() {
        let mut mem = DiagnosisMemory::new();
        let a = BTreeSet::from([0]);
        let none = BTreeSet::new();
        assert_eq!(mem.smooth(a.clone(), 5), a);
        assert_eq!(mem.smooth(none.clone(), 5), none);
        assert_eq!(mem.smooth(a.clone(), 5), a);
        assert_eq!(mem.smooth(none.clone(), 5), none);
        assert_eq!(mem.smooth(none.clone(), 5), none);
        // window disabled passes through
        assert_eq!(DiagnosisMemory::new().smooth(a.clone(), 0), a);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        let bad = AdaptConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdaptConfig {
            delta: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
