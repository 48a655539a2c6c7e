//! Exact parameter and multiply-accumulate accounting.
//!
//! Conventions: a convolution costs `kh*kw*(cin/groups)*cout` weights and that
//! many MACs per output pixel; normalization has `2*channels` parameters and no
//! MACs; a fully connected layer has `in*out + out` parameters and `in*out`
//! MACs; pooling and activations are free. Running statistics are buffers,
//! not parameters. The trunk is charged once no matter how many branches
//! read from it.

use std::fmt;

use serde::Serialize;

use crate::arch::{layer_templates, ModelSpec, Owner, Tier};
use crate::error::{HlfpError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub stage: String,
    #[serde(serialize_with = "serialize_display")]
    pub owner: Owner,
    pub params: u64,
    pub macs: u64,
}

fn serialize_display<S: serde::Serializer>(o: &Owner, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(o)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input_shape: [usize; 3],
    pub per_layer: Vec<LayerCost>,
    pub trunk_params: u64,
    pub trunk_macs: u64,
    /// Cost of one superclass tier copy (zero when there is no tier).
    pub per_superclass_params: u64,
    pub per_superclass_macs: u64,
    pub superclass_count: usize,
    /// Cost of one branch copy, including its head (zero for serial models).
    pub per_branch_params: u64,
    pub per_branch_macs: u64,
    pub branch_count: usize,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn superclass_params(&self) -> u64 {
        self.per_superclass_params * self.superclass_count as u64
    }

    pub fn branch_params(&self) -> u64 {
        self.per_branch_params * self.branch_count as u64
    }
}

/// Cost of every layer of `model` at its own input shape.
pub fn cost_report(model: &ModelSpec) -> Result<CostReport> {
    let templates = layer_templates(model)?;
    let mut per_layer = Vec::new();
    let mut tier_params = [0u64; 3];
    let mut tier_macs = [0u64; 3];
    for t in &templates {
        let idx = t.tier as usize;
        tier_params[idx] += t.params();
        tier_macs[idx] += t.macs();
    }
    for tier in [Tier::Trunk, Tier::Superclass, Tier::Branch] {
        for owner in model.owners(tier) {
            for t in templates.iter().filter(|t| t.tier == tier) {
                per_layer.push(LayerCost {
                    layer: owner.tensor_name(&t.name, "").trim_end_matches('.').to_string(),
                    stage: t.stage.clone(),
                    owner,
                    params: t.params(),
                    macs: t.macs(),
                });
            }
        }
    }
    let superclass_count = model.active_superclasses().len();
    let branch_count = if model.has_branches() {
        model.active_classes.len()
    } else {
        0
    };
    let total_params = tier_params[0] + tier_params[1] * superclass_count as u64 + tier_params[2] * branch_count as u64;
    let total_macs = tier_macs[0] + tier_macs[1] * superclass_count as u64 + tier_macs[2] * branch_count as u64;
    debug_assert_eq!(total_params, per_layer.iter().map(|l| l.params).sum::<u64>());
    Ok(CostReport {
        model: model.name.clone(),
        input_shape: model.input_shape,
        per_layer,
        trunk_params: tier_params[0],
        trunk_macs: tier_macs[0],
        per_superclass_params: tier_params[1],
        per_superclass_macs: tier_macs[1],
        superclass_count,
        per_branch_params: tier_params[2],
        per_branch_macs: tier_macs[2],
        branch_count,
        total_params,
        total_macs,
    })
}

pub fn count_params(model: &ModelSpec) -> Result<u64> {
    Ok(cost_report(model)?.total_params)
}

pub fn count_macs(model: &ModelSpec, input_shape: [usize; 3]) -> Result<u64> {
    let mut m = model.clone();
    m.input_shape = input_shape;
    Ok(cost_report(&m)?.total_macs)
}

/// Relative savings of a reduced model, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Reduction {
    pub param_reduction_pct: f64,
    pub mac_reduction_pct: f64,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "parameters -{:.1} %, MACs -{:.1} %",
            self.param_reduction_pct, self.mac_reduction_pct
        )
    }
}

/// `100 * (1 - reduced / full)`.
pub fn reduction_pct(full: f64, reduced: f64) -> Result<f64> {
    if full == 0.0 {
        return Err(HlfpError::InvalidArgument("reference cost is zero".into()));
    }
    Ok(100.0 * (1.0 - reduced / full))
}

pub fn reduction_report(full: &CostReport, cut: &CostReport) -> Result<Reduction> {
    if full.total_params == 0 || full.total_macs == 0 {
        return Err(HlfpError::InvalidArgument("reference report has zero totals".into()));
    }
    Ok(Reduction {
        param_reduction_pct: reduction_pct(full.total_params as f64, cut.total_params as f64)?,
        mac_reduction_pct: reduction_pct(full.total_macs as f64, cut.total_macs as f64)?,
    })
}
