//! Model and adapter forward passes recorded on a [`Tape`].
//!
//! The eager functions in [`crate::model`] and these taped versions compute
//! the same thing; tests hold them to bit equality. Weights enter the tape
//! either as parameters (trainable) or constants (frozen).

use crate::error::Result;
use crate::model::{AdapterPair, Bottleneck, ModelParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoders: Vec<BoundEncoder>,
    pub fusion_w: Var,
    pub fusion_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, model: &ModelParams, trainable: bool) -> Self {
        let encoders = model
            .encoders
            .iter()
            .map(|e| BoundEncoder {
                w1: leaf(tape, &e.w1, trainable),
                b1: leaf(tape, &e.b1, trainable),
                w2: leaf(tape, &e.w2, trainable),
                b2: leaf(tape, &e.b2, trainable),
            })
            .collect();
        Self {
            encoders,
            fusion_w: leaf(tape, &model.fusion_w, trainable),
            fusion_b: leaf(tape, &model.fusion_b, trainable),
            head_w: leaf(tape, &model.head_w, trainable),
            head_b: leaf(tape, &model.head_b, trainable),
        }
    }

    /// Only the fusion projection and head, for callers that start from
    /// precomputed encoder features.
    pub fn bind_top(tape: &mut Tape, model: &ModelParams) -> Self {
        Self {
            encoders: Vec::new(),
            fusion_w: tape.constant(model.fusion_w.clone()),
            fusion_b: tape.constant(model.fusion_b.clone()),
            head_w: tape.constant(model.head_w.clone()),
            head_b: tape.constant(model.head_b.clone()),
        }
    }

    pub fn encode(&self, tape: &mut Tape, m: usize, x: Var) -> Result<Var> {
        let e = &self.encoders[m];
        let h = tape.matmul(x, e.w1)?;
        let h = tape.add_row(h, e.b1)?;
        let h = tape.relu(h);
        let z = tape.matmul(h, e.w2)?;
        tape.add_row(z, e.b2)
    }

    pub fn fuse(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let u = tape.matmul(z, self.fusion_w)?;
        tape.add_row(u, self.fusion_b)
    }

    pub fn classify(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let l = tape.matmul(u, self.head_w)?;
        tape.add_row(l, self.head_b)
    }
}

/// How one modality's adapter enters the graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AdapterBinding {
    pub train_stable: bool,
    pub train_plastic: bool,
    /// Route features through the plastic branch at all.
    pub plastic_on: bool,
}

#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub down: Var,
    pub up: Var,
    /// Present only when the plastic branch is routed.
    pub plastic: Option<Var>,
    pub activation: Bottleneck,
}

impl BoundAdapter {
    pub fn bind(tape: &mut Tape, pair: &AdapterPair, binding: AdapterBinding) -> Self {
        let down = leaf(tape, &pair.stable.down, binding.train_stable);
        let up = leaf(tape, &pair.stable.up, binding.train_stable);
        let plastic = binding
            .plastic_on
            .then(|| leaf(tape, &pair.plastic, binding.train_plastic));
        Self {
            down,
            up,
            plastic,
            activation: pair.stable.activation,
        }
    }

    pub fn stable(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mut h = tape.matmul(z, self.down)?;
        if self.activation == Bottleneck::Relu {
            h = tape.relu(h);
        }
        let r = tape.matmul(h, self.up)?;
        tape.add(z, r)
    }

    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.stable(tape, z)?;
        match self.plastic {
            Some(w) => {
                let r = tape.matmul(h, w)?;
                tape.add(h, r)
            }
            None => Ok(h),
        }
    }
}
