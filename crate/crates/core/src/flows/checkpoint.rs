use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{AffineCoupling, BentLayer, CouplingSpec, FlowError, FlowLayer, FlowStack, Permutation};
use crate::p4inv::{LayerState, P4InvConfig, P4InvLayer};

pub const CHECKPOINT_FORMAT: &str = "p4flow-stack/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerCheckpoint {
    P4inv {
        config: P4InvConfig,
        state: LayerState,
    },
    Bent {
        dim: usize,
        inverted: bool,
    },
    Coupling {
        spec: CouplingSpec,
        t_params: Vec<f64>,
        s_params: Vec<f64>,
    },
    Permutation {
        perm: Vec<usize>,
    },
}

/// Architecture and parameters of a [`FlowStack`].
///
/// P⁴Inv layers are stored at a reset point: any pending perturbation is
/// merged into the saved copy (without the merge gate), so the checkpoint
/// reproduces the current function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackCheckpoint {
    pub format: String,
    pub dim: usize,
    pub layers: Vec<LayerCheckpoint>,
}

impl FlowStack {
    pub fn checkpoint(&self) -> Result<StackCheckpoint, FlowError> {
        let layers = self
            .layers()
            .iter()
            .map(|l| {
                Ok(match l {
                    FlowLayer::P4Inv(p) => LayerCheckpoint::P4inv {
                        config: p.config().clone(),
                        state: p.snapshot()?,
                    },
                    FlowLayer::Bent(b) => LayerCheckpoint::Bent {
                        dim: super::Bijection::dim(b),
                        inverted: b.is_inverted(),
                    },
                    FlowLayer::Coupling(c) => LayerCheckpoint::Coupling {
                        spec: c.spec().clone(),
                        t_params: c.t_net().params().to_vec(),
                        s_params: c.s_net().params().to_vec(),
                    },
                    FlowLayer::Permutation(p) => LayerCheckpoint::Permutation {
                        perm: p.indices().to_vec(),
                    },
                })
            })
            .collect::<Result<_, FlowError>>()?;
        Ok(StackCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            dim: super::Bijection::dim(self),
            layers,
        })
    }

    /// Rebuilds a stack. `rng` draws the fresh `v` vectors of P⁴Inv layers,
    /// which do not affect the function at a reset point.
    pub fn from_checkpoint(ck: &StackCheckpoint, rng: &mut dyn RngCore) -> Result<Self, FlowError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(FlowError::Checkpoint(format!(
                "unsupported format {:?}",
                ck.format
            )));
        }
        let mut stack = FlowStack::new(ck.dim);
        for (i, layer) in ck.layers.iter().enumerate() {
            let bad = |what: &str| FlowError::Checkpoint(format!("layer {i}: {what}"));
            let built: FlowLayer = match layer {
                LayerCheckpoint::P4inv { config, state } => {
                    P4InvLayer::from_state(state, config.clone(), rng)?.into()
                }
                LayerCheckpoint::Bent { dim, inverted } => {
                    if *inverted {
                        BentLayer::inverted(*dim).into()
                    } else {
                        BentLayer::new(*dim).into()
                    }
                }
                LayerCheckpoint::Coupling {
                    spec,
                    t_params,
                    s_params,
                } => AffineCoupling::from_parts(spec.clone(), t_params.clone(), s_params.clone())
                    .ok_or_else(|| bad("coupling parameters do not match its shape"))?
                    .into(),
                LayerCheckpoint::Permutation { perm } => Permutation::new(perm.clone())
                    .ok_or_else(|| bad("not a permutation"))?
                    .into(),
            };
            stack.push(built)?;
        }
        Ok(stack)
    }

    pub fn to_json(&self) -> Result<String, FlowError> {
        serde_json::to_string_pretty(&self.checkpoint()?)
            .map_err(|e| FlowError::Checkpoint(e.to_string()))
    }

    pub fn from_json(json: &str, rng: &mut dyn RngCore) -> Result<Self, FlowError> {
        let ck: StackCheckpoint =
            serde_json::from_str(json).map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck, rng)
    }
}
