//! Unlabeled multi-modal batches as they arrive at test time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// One test-time batch with every modality's inputs and no labels.
///
/// `latent_offsets[m]`, when present, is added to modality `m`'s encoder
/// output. It carries shifts defined directly in feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledBatch {
    pub inputs: Vec<Tensor>,
    pub latent_offsets: Vec<Option<Tensor>>,
}

impl UnlabeledBatch {
    pub fn new(inputs: Vec<Tensor>) -> Self {
        let n = inputs.len();
        Self {
            inputs,
            latent_offsets: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_modalities(&self) -> usize {
        self.inputs.len()
    }

    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        let n = model.config.num_modalities();
        if self.inputs.len() != n || self.latent_offsets.len() != n {
            return Err(Error::Contract(format!(
                "batch has {} modalities, model expects {n}",
                self.inputs.len()
            )));
        }
        let b = self.len();
        for (m, x) in self.inputs.iter().enumerate() {
            if x.rows() != b {
                return Err(Error::shape("batch", self.inputs[0].shape(), x.shape()));
            }
            if let Some(off) = &self.latent_offsets[m] {
                if off.shape() != [b, model.config.latent_dim] {
                    return Err(Error::shape(
                        "latent offset",
                        off.shape(),
                        &[b, model.config.latent_dim],
                    ));
                }
            }
        }
        Ok(())
    }

    /// Encoder features `z^m` for every modality, offsets applied.
    pub fn encode(&self, model: &ModelParams) -> Result<Vec<Tensor>> {
        self.validate(model)?;
        self.inputs
            .iter()
            .zip(&self.latent_offsets)
            .enumerate()
            .map(|(m, (x, off))| {
                let z = model.encode(m, x)?;
                match off {
                    Some(o) => z.add(o),
                    None => Ok(z),
                }
            })
            .collect()
    }
}
