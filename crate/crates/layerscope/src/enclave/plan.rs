//! Partition plans and secure-region memory accounting.
//!
//! A plan cuts the layer stack at an absolute index: everything from the cut
//! to the output, plus the cost computation, runs inside the secure worker
//! under a byte budget. The account charges f64 storage for parameters,
//! gradients, and momentum of each secure parameterized layer, one in-flight
//! batch of activations per layer, the buffer for activations arriving at
//! the cut, and the cost node — plus the front-layer copy rule: a
//! parameterless layer placed first-in-region still needs the parameters of
//! its preceding parameterized layer, so those bytes are copied in.

use serde::{Deserialize, Serialize};

use crate::arch::LayerSpec;
use crate::error::{Error, Result};
use crate::model::{layer_shapes, Model};

pub const DEFAULT_BUDGET_BYTES: u64 = 16 * 1024 * 1024;
const F64_BYTES: u64 = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// Absolute stack index of the first secure layer. A cut at `stack_len`
    /// keeps only the cost computation inside; past that the region is empty.
    pub cut_index: usize,
    pub budget_bytes: u64,
    /// Batch size the activation buffers are sized for; must match the
    /// training config the plan is run with.
    pub batch_size: usize,
}

impl PartitionPlan {
    pub fn new(cut_index: usize) -> PartitionPlan {
        PartitionPlan {
            cut_index,
            budget_bytes: DEFAULT_BUDGET_BYTES,
            batch_size: 128,
        }
    }

    pub fn with_budget(mut self, budget_bytes: u64) -> PartitionPlan {
        self.budget_bytes = budget_bytes;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> PartitionPlan {
        self.batch_size = batch_size;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecureLayerCost {
    pub layer_index: usize,
    pub label: String,
    pub params_bytes: u64,
    pub grads_bytes: u64,
    pub momentum_bytes: u64,
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CopiedFrontLayer {
    pub layer_index: usize,
    /// Parameter value bytes only; a copied front layer is inference-only.
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryAccount {
    pub cut_index: usize,
    pub batch_size: usize,
    pub layers: Vec<SecureLayerCost>,
    pub copied_front_layers: Vec<CopiedFrontLayer>,
    /// Buffer holding the activations received at the cut.
    pub input_buffer_bytes: u64,
    /// Probabilities plus per-example losses of the cost computation.
    pub cost_node_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryAccount {
    fn empty(plan: &PartitionPlan) -> MemoryAccount {
        MemoryAccount {
            cut_index: plan.cut_index,
            batch_size: plan.batch_size,
            layers: Vec::new(),
            copied_front_layers: Vec::new(),
            input_buffer_bytes: 0,
            cost_node_bytes: 0,
            total_bytes: 0,
        }
    }

    pub fn copied_front_bytes(&self) -> u64 {
        self.copied_front_layers.iter().map(|c| c.bytes).sum()
    }

    /// Number of parameterized layers inside the secure region.
    pub fn param_layers_secure(&self) -> usize {
        self.layers.iter().filter(|l| l.params_bytes > 0).count()
    }
}

fn param_numel(spec: &LayerSpec, in_shape: &[usize], out_shape: &[usize]) -> u64 {
    match spec {
        LayerSpec::Conv { filters } => {
            (filters * in_shape[0] * crate::ops::KERNEL * crate::ops::KERNEL + filters) as u64
        }
        LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxHead { .. } => {
            (in_shape[0] * out_shape[0] + out_shape[0]) as u64
        }
        LayerSpec::MaxPool | LayerSpec::Dropout { .. } => 0,
    }
}

/// Label a cut by its first secure layer, numbered per layer kind from the
/// front of the stack ("C5", "MP3", "FC1"). The cost-only cut is "O" and an
/// empty region "none".
pub fn cut_label(specs: &[LayerSpec], cut_index: usize) -> String {
    if cut_index == specs.len() {
        return "O".to_string();
    }
    if cut_index > specs.len() {
        return "none".to_string();
    }
    let code = specs[cut_index].short_code();
    let ordinal = specs[..=cut_index]
        .iter()
        .filter(|s| s.short_code() == code)
        .count();
    format!("{code}{ordinal}")
}

/// Memory account for `plan` over an abstract layer stack. The worker uses
/// this form to re-check its budget before allocating anything.
pub fn account_from_specs(
    specs: &[LayerSpec],
    input_shape: [usize; 3],
    plan: &PartitionPlan,
) -> Result<MemoryAccount> {
    if plan.batch_size == 0 {
        return Err(Error::InvalidArg("plan batch_size must be at least 1".into()));
    }
    let n = specs.len();
    if plan.cut_index > n {
        return Ok(MemoryAccount::empty(plan));
    }
    let shapes = layer_shapes(specs, input_shape)?;
    let b = plan.batch_size as u64;
    let cut = plan.cut_index;

    let classes: u64 = shapes
        .last()
        .map(|(_, out)| out.iter().product::<usize>() as u64)
        .unwrap_or(0);
    let cost_node_bytes = b * (classes + 1) * F64_BYTES;
    let input_numel: u64 = if cut < n {
        shapes[cut].0.iter().product::<usize>() as u64
    } else {
        classes
    };
    let input_buffer_bytes = b * input_numel * F64_BYTES;

    let mut layers = Vec::new();
    let mut copied: Vec<CopiedFrontLayer> = Vec::new();
    for idx in cut..n {
        let (in_shape, out_shape) = &shapes[idx];
        let params = param_numel(&specs[idx], in_shape, out_shape) * F64_BYTES;
        layers.push(SecureLayerCost {
            layer_index: idx,
            label: specs[idx].short_code().to_string(),
            params_bytes: params,
            grads_bytes: params,
            momentum_bytes: params,
            activation_bytes: b * out_shape.iter().product::<usize>() as u64 * F64_BYTES,
        });
        if params == 0 {
            // Front-layer copy rule: the nearest parameterized layer below a
            // parameterless one must be present for its output to exist; if
            // it sits outside the region its parameter values are copied in.
            if let Some(front) = (0..idx).rev().find(|&j| {
                param_numel(&specs[j], &shapes[j].0, &shapes[j].1) > 0
            }) {
                if front < cut && !copied.iter().any(|c| c.layer_index == front) {
                    copied.push(CopiedFrontLayer {
                        layer_index: front,
                        bytes: param_numel(&specs[front], &shapes[front].0, &shapes[front].1)
                            * F64_BYTES,
                    });
                }
            }
        }
    }

    let total_bytes = layers
        .iter()
        .map(|l| l.params_bytes + l.grads_bytes + l.momentum_bytes + l.activation_bytes)
        .sum::<u64>()
        + copied.iter().map(|c| c.bytes).sum::<u64>()
        + input_buffer_bytes
        + cost_node_bytes;

    Ok(MemoryAccount {
        cut_index: cut,
        batch_size: plan.batch_size,
        layers,
        copied_front_layers: copied,
        input_buffer_bytes,
        cost_node_bytes,
        total_bytes,
    })
}

pub fn account_memory(model: &Model, plan: &PartitionPlan) -> Result<MemoryAccount> {
    account_from_specs(model.arch(), model.input_shape(), plan)
}

/// The account when it fits the budget, the exceeded error otherwise.
pub fn validate_plan(model: &Model, plan: &PartitionPlan) -> Result<MemoryAccount> {
    validate_from_specs(model.arch(), model.input_shape(), plan)
}

pub fn validate_from_specs(
    specs: &[LayerSpec],
    input_shape: [usize; 3],
    plan: &PartitionPlan,
) -> Result<MemoryAccount> {
    let account = account_from_specs(specs, input_shape, plan)?;
    if account.total_bytes > plan.budget_bytes {
        return Err(Error::BudgetExceeded {
            total_bytes: account.total_bytes,
            budget_bytes: plan.budget_bytes,
        });
    }
    Ok(account)
}
