//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mmtta::adaptation::{evaluate_objective, AdaptConfig, AdapterSlot, ParamKey, Selection};
use mmtta::batch::UnlabeledBatch;
use mmtta::model::{AdapterBank, ModelConfig, ModelParams};
use mmtta::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two modalities, D = 8, C = 4.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        modalities: vec!["audio".into(), "video".into()],
        input_dim: 6,
        hidden_dim: 10,
        latent_dim: 8,
        num_classes: 4,
        stable_rank: 2,
        ..ModelConfig::default()
    }
}

/// Random model with a random (not identity) fusion projection.
pub fn random_model(config: ModelConfig, seed: u64) -> ModelParams {
    let mut model = ModelParams::init(config, seed).unwrap();
    let d = model.config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    model.fusion_w = Tensor::normal(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
    model.fusion_b = Tensor::normal(&[1, d], 0.1, &mut rng);
    model.head_b = Tensor::normal(&[1, model.config.num_classes], 0.1, &mut rng);
    model
}

/// Adapters with every weight nonzero, so every gradient is nontrivial.
pub fn busy_adapters(config: &ModelConfig, seed: u64) -> AdapterBank {
    let mut bank = AdapterBank::fresh(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9);
    for pair in &mut bank.pairs {
        let (d, r) = (pair.latent_dim(), pair.rank());
        pair.stable.down = Tensor::normal(&[d, r], 0.5, &mut rng);
        pair.stable.up = Tensor::normal(&[r, d], 0.3, &mut rng);
        pair.plastic = Tensor::normal(&[d, d], 0.2, &mut rng);
    }
    bank
}

pub fn random_batch(config: &ModelConfig, rows: usize, seed: u64) -> UnlabeledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    UnlabeledBatch::new(
        (0..config.num_modalities())
            .map(|_| Tensor::normal(&[rows, config.input_dim], 1.0, &mut rng))
            .collect(),
    )
}

/// A batch whose modality `target` carries a strong rank-1 latent offset.
pub fn rank1_batch(config: &ModelConfig, rows: usize, target: usize, sigma: f64, seed: u64) -> UnlabeledBatch {
    let mut batch = random_batch(config, rows, seed);
    let d = config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ff5);
    let v = vec![1.0 / (d as f64).sqrt(); d];
    let alpha = Tensor::normal(&[rows, 1], sigma, &mut rng);
    let offset = alpha.matmul(&Tensor::from_rows(&[v])).unwrap();
    batch.latent_offsets[target] = Some(offset);
    batch
}

pub fn set(items: &[usize]) -> BTreeSet<usize> {
    items.iter().copied().collect()
}

pub fn param_mut(bank: &mut AdapterBank, key: ParamKey) -> &mut Tensor {
    let pair = &mut bank.pairs[key.modality];
    match key.slot {
        AdapterSlot::StableDown => &mut pair.stable.down,
        AdapterSlot::StableUp => &mut pair.stable.up,
        AdapterSlot::Plastic => &mut pair.plastic,
    }
}

/// Largest tensor-wise relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between the
/// taped gradient and central differences with step `h`, over every
/// selected parameter.
pub fn max_gradient_error(
    model: &ModelParams,
    adapters: &AdapterBank,
    z: &[Tensor],
    selection: &Selection,
    cfg: &AdaptConfig,
    h: f64,
) -> f64 {
    let analytic = evaluate_objective(model, adapters, z, selection, cfg).unwrap().gradients;
    assert_eq!(
        analytic.keys().copied().collect::<BTreeSet<_>>(),
        selection.trainable(),
        "every selected parameter gets a gradient"
    );
    let loss = |bank: &AdapterBank| {
        evaluate_objective(model, bank, z, selection, cfg)
            .unwrap()
            .losses
            .total
    };
    let mut worst: f64 = 0.0;
    for (key, grad) in &analytic {
        let mut bank = adapters.clone();
        let mut num = vec![0.0; grad.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = param_mut(&mut bank, *key).data()[i];
            param_mut(&mut bank, *key).data_mut()[i] = orig + h;
            let up = loss(&bank);
            param_mut(&mut bank, *key).data_mut()[i] = orig - h;
            let down = loss(&bank);
            param_mut(&mut bank, *key).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = grad.data().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = grad.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
        let err = if na + nn == 0.0 { 0.0 } else { diff / (na + nn) };
        worst = worst.max(err);
    }
    worst
}
