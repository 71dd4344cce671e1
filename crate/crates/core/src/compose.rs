//! Training-free composition of checkpoints that share a base model.
//!
//! Parameters present in exactly one input pass through unchanged; parameters
//! with the same name in several inputs form a common group and are merged by
//! averaging (`naive`) or by a per-checkpoint weighted sum (`weighted`).
//! Decoupled checkpoints keep their `.mod.<m>` weights unique, so only the
//! `.text` weights are merged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::params::{self, ParamError, ParameterMap, LORA_A, LORA_B};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("no checkpoints to compose")]
    NoCheckpoints,
    #[error("base model mismatch: {first} vs {other}")]
    BaseMismatch { first: String, other: String },
    #[error("shape conflict for {name}: {shapes:?}")]
    ShapeConflict {
        name: String,
        shapes: Vec<Vec<usize>>,
    },
    #[error("weighted strategy requires coefficients")]
    MissingCoefficients,
    #[error("expected {expected} coefficients, got {got}")]
    CoeffCount { expected: usize, got: usize },
    #[error("cannot mix decoupled and coupled checkpoints; convert the coupled ones first")]
    MixedDecoupling,
    #[error("adapter mismatch: {0}")]
    AdapterMismatch(String),
    #[error("{name} differs from the base LLM; input was not trained with a frozen LLM")]
    NotFrozen { name: String },
    #[error("checkpoint is already decoupled")]
    AlreadyDecoupled,
    #[error("modality {0:?} is not part of the checkpoint")]
    UnknownModality(String),
    #[error("conflicting copies of {0}")]
    ConflictingCopies(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Weighted,
    ProjOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub strategy: Strategy,
    pub coeffs: Option<Vec<f64>>,
    /// Scale for each modality's decoupled `.mod.<m>` weights; missing entries mean 1.0.
    #[serde(default)]
    pub modality_coeffs: BTreeMap<String, f64>,
}

impl MergeSpec {
    pub fn naive() -> Self {
        Self {
            strategy: Strategy::Naive,
            coeffs: None,
            modality_coeffs: BTreeMap::new(),
        }
    }

    pub fn weighted(coeffs: Vec<f64>) -> Self {
        Self {
            strategy: Strategy::Weighted,
            coeffs: Some(coeffs),
            modality_coeffs: BTreeMap::new(),
        }
    }

    pub fn proj_only() -> Self {
        Self {
            strategy: Strategy::ProjOnly,
            coeffs: None,
            modality_coeffs: BTreeMap::new(),
        }
    }

    fn modality_scale(&self, name: &str) -> f64 {
        match params::weight_tag(name) {
            Some(tag) if tag != params::TEXT_TAG => {
                self.modality_coeffs.get(tag).copied().unwrap_or(1.0)
            }
            _ => 1.0,
        }
    }
}

/// `(checkpoint index, parameter name)`.
pub type Member = (usize, String);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterPartition {
    pub unique: Vec<Member>,
    pub common_groups: BTreeMap<String, Vec<Member>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub strategy: Strategy,
    pub coefficients: Vec<f64>,
    pub n_unique: usize,
    pub n_common_groups: usize,
    pub groups: Vec<GroupSummary>,
    pub base_id: String,
    pub n_output_params: usize,
}

fn check_bases(checkpoints: &[&Checkpoint]) -> Result<(), ComposeError> {
    let first = checkpoints.first().ok_or(ComposeError::NoCheckpoints)?;
    for c in &checkpoints[1..] {
        if c.base_id != first.base_id {
            return Err(ComposeError::BaseMismatch {
                first: first.base_id.clone(),
                other: c.base_id.clone(),
            });
        }
    }
    Ok(())
}

/// Splits all parameters into unique ones and same-name common groups.
pub fn partition_parameters(checkpoints: &[&Checkpoint]) -> Result<ParameterPartition, ComposeError> {
    check_bases(checkpoints)?;
    let mut owners: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in checkpoints.iter().enumerate() {
        for name in c.params.names() {
            owners.entry(name).or_default().push(i);
        }
    }
    let mut partition = ParameterPartition::default();
    for (name, idx) in owners {
        if let [only] = idx.as_slice() {
            partition.unique.push((*only, name.to_string()));
            continue;
        }
        let shapes: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| checkpoints[i].params.get(name).expect("owned").shape().to_vec())
            .collect();
        if shapes.iter().any(|s| *s != shapes[0]) {
            return Err(ComposeError::ShapeConflict {
                name: name.to_string(),
                shapes,
            });
        }
        partition.common_groups.insert(
            name.to_string(),
            idx.into_iter().map(|i| (i, name.to_string())).collect(),
        );
    }
    Ok(partition)
}

fn coefficients(spec: &MergeSpec, n: usize) -> Result<Vec<f64>, ComposeError> {
    match spec.strategy {
        Strategy::Weighted => {
            let c = spec.coeffs.clone().ok_or(ComposeError::MissingCoefficients)?;
            if c.len() != n {
                return Err(ComposeError::CoeffCount {
                    expected: n,
                    got: c.len(),
                });
            }
            Ok(c)
        }
        _ => Ok(tensor::uniform_coeffs(n)),
    }
}

fn output_metadata(checkpoints: &[&Checkpoint], params: ParameterMap) -> Checkpoint {
    Checkpoint {
        base_id: checkpoints[0].base_id.clone(),
        modalities: checkpoints
            .iter()
            .flat_map(|c| c.modalities.iter().cloned())
            .collect(),
        decoupled: checkpoints.iter().any(|c| c.decoupled),
        adapter: None,
        params,
    }
}

fn report(
    checkpoints: &[&Checkpoint],
    partition: &ParameterPartition,
    spec: &MergeSpec,
    coeffs: Vec<f64>,
    out: &Checkpoint,
) -> CompositionReport {
    CompositionReport {
        strategy: spec.strategy,
        coefficients: coeffs,
        n_unique: partition.unique.len(),
        n_common_groups: partition.common_groups.len(),
        groups: partition
            .common_groups
            .iter()
            .map(|(name, members)| GroupSummary {
                name: name.clone(),
                shape: checkpoints[members[0].0]
                    .params
                    .get(name)
                    .expect("member")
                    .shape()
                    .to_vec(),
                members: members.iter().map(|m| m.0).collect(),
            })
            .collect(),
        base_id: out.base_id.clone(),
        n_output_params: out.params.len(),
    }
}

fn scaled(t: &Tensor, scale: f64) -> Result<Tensor, TensorError> {
    if scale == 1.0 {
        return Ok(t.clone());
    }
    tensor::weighted_sum(&[t], &[scale])
}

/// Composes checkpoints according to `spec`.
///
/// Adapter-bearing inputs are merged in delta space (see
/// [`merge_adapters_then_materialize`]); the output always stores full weights.
pub fn compose(
    checkpoints: &[&Checkpoint],
    spec: &MergeSpec,
) -> Result<(Checkpoint, CompositionReport), ComposeError> {
    check_bases(checkpoints)?;
    if spec.strategy == Strategy::ProjOnly {
        let base = checkpoints[0];
        let out = compose_proj_only(base, checkpoints)?;
        let partition = partition_parameters(checkpoints)?;
        let rep = report(checkpoints, &partition, spec, vec![], &out);
        return Ok((out, rep));
    }
    let decoupled = checkpoints.iter().filter(|c| c.decoupled).count();
    if decoupled != 0 && decoupled != checkpoints.len() {
        return Err(ComposeError::MixedDecoupling);
    }
    let coeffs = coefficients(spec, checkpoints.len())?;
    if checkpoints.iter().any(|c| c.adapter.is_some()) {
        let out = merge_adapters_then_materialize(checkpoints, spec)?;
        let partition = partition_parameters(checkpoints)?;
        let rep = report(checkpoints, &partition, spec, coeffs, &out);
        return Ok((out, rep));
    }
    let partition = partition_parameters(checkpoints)?;
    let mut params = ParameterMap::new();
    for (i, name) in &partition.unique {
        let t = checkpoints[*i].params.get(name).expect("unique member");
        params.insert(name.clone(), scaled(t, spec.modality_scale(name))?)?;
    }
    for (name, members) in &partition.common_groups {
        let tensors: Vec<&Tensor> = members
            .iter()
            .map(|(i, n)| checkpoints[*i].params.get(n).expect("member"))
            .collect();
        let merged = match spec.strategy {
            Strategy::Weighted => {
                let c: Vec<f64> = members.iter().map(|(i, _)| coeffs[*i]).collect();
                tensor::weighted_sum(&tensors, &c)?
            }
            _ => tensor::average(&tensors)?,
        };
        params.insert(name.clone(), merged)?;
    }
    let out = output_metadata(checkpoints, params);
    out.validate()?;
    let rep = report(checkpoints, &partition, spec, coeffs, &out);
    Ok((out, rep))
}

/// Merges LoRA-adapted checkpoints by combining their effective deltas
/// `(alpha/r)·B·A` around the shared base weights, then materializing.
///
/// For a group with coefficients summing to one this equals merging the fully
/// materialized weights. Parameters without adapters belong to the frozen
/// shared base and must agree bitwise across inputs.
pub fn merge_adapters_then_materialize(
    checkpoints: &[&Checkpoint],
    spec: &MergeSpec,
) -> Result<Checkpoint, ComposeError> {
    check_bases(checkpoints)?;
    let adapter = checkpoints[0]
        .adapter
        .ok_or_else(|| ComposeError::AdapterMismatch("input 0 has no adapter config".into()))?;
    for (i, c) in checkpoints.iter().enumerate() {
        if c.adapter != Some(adapter) {
            return Err(ComposeError::AdapterMismatch(format!(
                "input {i} has {:?}, input 0 has {adapter:?}",
                c.adapter
            )));
        }
    }
    let coeffs = coefficients(spec, checkpoints.len())?;
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for c in checkpoints {
        names.extend(
            c.params
                .names()
                .map(String::as_str)
                .filter(|n| params::adapter_base(n).is_none()),
        );
    }
    let mut out = ParameterMap::new();
    for name in names {
        let members: Vec<usize> = (0..checkpoints.len())
            .filter(|&i| checkpoints[i].params.contains(name))
            .collect();
        let base = checkpoints[members[0]].params.get(name).expect("member");
        for &i in &members[1..] {
            let other = checkpoints[i].params.get(name).expect("member");
            if other.shape() != base.shape() {
                return Err(ComposeError::ShapeConflict {
                    name: name.to_string(),
                    shapes: vec![base.shape().to_vec(), other.shape().to_vec()],
                });
            }
            if !other.bits_eq(base) {
                return Err(ComposeError::AdapterMismatch(format!(
                    "base weight {name} differs between inputs {} and {i}",
                    members[0]
                )));
            }
        }
        let group_coeffs: Vec<f64> = if members.len() == 1 {
            vec![spec.modality_scale(name)]
        } else {
            match spec.strategy {
                Strategy::Weighted => members.iter().map(|&i| coeffs[i]).collect(),
                _ => tensor::uniform_coeffs(members.len()),
            }
        };
        let mut acc: Vec<f64> = base.data().iter().map(|&v| f64::from(v)).collect();
        let mut touched = false;
        for (&i, &c) in members.iter().zip(&group_coeffs) {
            let p = &checkpoints[i].params;
            let (Some(a), Some(b)) = (
                p.get(&format!("{name}{LORA_A}")),
                p.get(&format!("{name}{LORA_B}")),
            ) else {
                continue;
            };
            let (_, _, delta) = tensor::adapter_delta(a, b, adapter.r, adapter.alpha)?;
            for (x, d) in acc.iter_mut().zip(delta) {
                *x += c * d;
            }
            touched = true;
        }
        let merged = if touched {
            Tensor::new(base.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())?
        } else {
            base.clone()
        };
        out.insert(name.to_string(), merged)?;
    }
    let ckpt = output_metadata(checkpoints, out);
    ckpt.validate()?;
    Ok(ckpt)
}

/// Frozen-LLM composition: keeps the base LLM verbatim and attaches every
/// input's encoders and projectors.
pub fn compose_proj_only(base: &Checkpoint, checkpoints: &[&Checkpoint]) -> Result<Checkpoint, ComposeError> {
    let mut all = vec![base];
    all.extend_from_slice(checkpoints);
    check_bases(&all)?;
    let llm_names: BTreeSet<&String> = base.params.names().filter(|n| n.starts_with("llm.")).collect();
    let mut params = ParameterMap::new();
    for name in &llm_names {
        params.insert((*name).clone(), base.params.get(name).expect("base").clone())?;
    }
    let mut modalities = base.modalities.clone();
    for c in checkpoints {
        for (name, t) in &c.params {
            if name.starts_with("llm.") {
                let frozen = base.params.get(name).is_some_and(|b| b.bits_eq(t));
                if !frozen {
                    return Err(ComposeError::NotFrozen { name: name.clone() });
                }
            } else {
                match params.get(name) {
                    Some(existing) if !existing.bits_eq(t) => {
                        return Err(ComposeError::ConflictingCopies(name.clone()))
                    }
                    Some(_) => {}
                    None => params.insert(name.clone(), t.clone())?,
                }
            }
        }
        if let Some(missing) = llm_names.iter().find(|n| !c.params.contains(n)) {
            return Err(ComposeError::NotFrozen {
                name: (*missing).clone(),
            });
        }
        modalities.extend(c.modalities.iter().cloned());
    }
    for (name, t) in &base.params {
        if !name.starts_with("llm.") && !params.contains(name) {
            params.insert(name.clone(), t.clone())?;
        }
    }
    let out = Checkpoint {
        base_id: base.base_id.clone(),
        modalities,
        decoupled: false,
        adapter: None,
        params,
    };
    out.validate()?;
    Ok(out)
}

/// Converts a coupled checkpoint into decoupled form by replicating every
/// attention/FFN tensor into `.text` and `.mod.<tag>` copies.
pub fn decouple_inference(ckpt: &Checkpoint, tag: &str) -> Result<Checkpoint, ComposeError> {
    if ckpt.decoupled {
        return Err(ComposeError::AlreadyDecoupled);
    }
    if !ckpt.modalities.contains(tag) {
        return Err(ComposeError::UnknownModality(tag.to_string()));
    }
    let mut params = ParameterMap::new();
    for (name, t) in &ckpt.params {
        if !params::is_block_linear(name) {
            params.insert(name.clone(), t.clone())?;
            continue;
        }
        let (base, suffix) = match params::adapter_base(name) {
            Some(b) => (b, &name[b.len()..]),
            None => (name.as_str(), ""),
        };
        for route in [params::TEXT_TAG, tag] {
            params.insert(
                format!("{base}{}{suffix}", params::tag_suffix(route)),
                t.clone(),
            )?;
        }
    }
    let out = Checkpoint {
        base_id: ckpt.base_id.clone(),
        modalities: ckpt.modalities.clone(),
        decoupled: true,
        adapter: ckpt.adapter,
        params,
    };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedDiff {
    pub name: String,
    /// `None` when the shapes differ.
    pub max_abs_diff: Option<f64>,
    pub shape_a: Vec<usize>,
    pub shape_b: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub shared: Vec<SharedDiff>,
    pub only_a: Vec<String>,
    pub only_b: Vec<String>,
}

/// Name-by-name comparison, lexicographically ordered.
pub fn diff_checkpoints(a: &Checkpoint, b: &Checkpoint) -> DiffReport {
    let mut shared = Vec::new();
    let mut only_a = Vec::new();
    for (name, ta) in &a.params {
        match b.params.get(name) {
            Some(tb) => shared.push(SharedDiff {
                name: name.clone(),
                max_abs_diff: ta.max_abs_diff(tb).ok(),
                shape_a: ta.shape().to_vec(),
                shape_b: tb.shape().to_vec(),
            }),
            None => only_a.push(name.clone()),
        }
    }
    let only_b = b
        .params
        .names()
        .filter(|n| !a.params.contains(n))
        .cloned()
        .collect();
    DiffReport {
        shared,
        only_a,
        only_b,
    }
}
