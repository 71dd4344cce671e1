//! Seeded parameter initialization for base LLMs, modality branches and adapters.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::checkpoint::{content_hash, AdapterConfig, Checkpoint};
use crate::params::{self, ParameterMap, ATTN_ROLES, FFN_ROLES, LORA_A, LORA_B};
use crate::tensor::Tensor;

/// Output-head scale; lets the fixed head express confident distributions.
pub const HEAD_GAIN: f64 = 3.0;

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("finite samples")
}

/// Stable stream id for a string label.
pub fn label_stream(label: &str) -> u64 {
    crate::mcub::fnv1a64(label.as_bytes())
}

/// A text-only base LLM. The base id is the architecture descriptor plus a hash of the weights.
pub fn init_base_llm(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let mut p = ParameterMap::new();
    p.insert("llm.embed", normal(&mut rng, vec![config.vocab_size, d], 1.0))?;
    p.insert(
        "llm.head",
        normal(&mut rng, vec![config.vocab_size, d], HEAD_GAIN / (d as f64).sqrt()),
    )?;
    p.insert("llm.head_bias", Tensor::zeros(vec![config.vocab_size]))?;
    p.insert("llm.ln_f.gain", Tensor::full(vec![d], 1.0))?;
    p.insert("llm.ln_f.bias", Tensor::zeros(vec![d]))?;
    for i in 0..config.n_layers {
        for ln in ["ln1", "ln2"] {
            p.insert(format!("llm.blocks.{i}.{ln}.gain"), Tensor::full(vec![d], 1.0))?;
            p.insert(format!("llm.blocks.{i}.{ln}.bias"), Tensor::zeros(vec![d]))?;
        }
        for role in ATTN_ROLES {
            p.insert(
                params::block_weight(i, role),
                normal(&mut rng, vec![d, d], 1.0 / (d as f64).sqrt()),
            )?;
        }
        p.insert(
            params::block_weight(i, "w1"),
            normal(&mut rng, vec![config.d_ff, d], 1.0 / (d as f64).sqrt()),
        )?;
        p.insert(
            params::block_weight(i, "w2"),
            normal(&mut rng, vec![d, config.d_ff], 1.0 / (config.d_ff as f64).sqrt()),
        )?;
    }
    let base_id = format!("{}@sha256:{}", config.arch_id(), content_hash(&p));
    Ok(Checkpoint {
        base_id,
        modalities: BTreeSet::new(),
        decoupled: false,
        adapter: None,
        params: p,
    })
}

/// Adds a freshly initialized `enc.<m>` / `proj.<m>` branch for one modality.
pub fn attach_modality(
    ckpt: &mut Checkpoint,
    config: &ModelConfig,
    modality: &str,
    feature_dim: usize,
    seed: u64,
) -> Result<(), ModelError> {
    if modality == params::TEXT_TAG || !params::is_valid_name(modality) || modality.contains('.') {
        return Err(ModelError::Config(format!("invalid modality tag {modality:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_stream(modality));
    let e = config.encoder_dim;
    let out = config.n_modality_tokens * config.d_model;
    let p = &mut ckpt.params;
    p.insert(
        format!("enc.{modality}.weight"),
        normal(&mut rng, vec![e, feature_dim], 1.0 / (feature_dim as f64).sqrt()),
    )?;
    p.insert(format!("enc.{modality}.bias"), Tensor::zeros(vec![e]))?;
    p.insert(
        format!("proj.{modality}.weight"),
        normal(&mut rng, vec![out, e], 1.0 / (e as f64).sqrt()),
    )?;
    p.insert(format!("proj.{modality}.bias"), Tensor::zeros(vec![out]))?;
    ckpt.modalities.insert(modality.to_string());
    Ok(())
}

/// Adds LoRA pairs (A random, B zero) to every block linear weight accepted by `filter`.
pub fn attach_adapters(
    ckpt: &mut Checkpoint,
    adapter: AdapterConfig,
    seed: u64,
    filter: impl Fn(&str) -> bool,
) -> Result<(), ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_stream("lora"));
    let targets: Vec<(String, usize, usize)> = ckpt
        .params
        .iter()
        .filter(|(n, _)| {
            params::is_block_linear(n) && params::adapter_base(n).is_none() && filter(n)
        })
        .filter(|(n, _)| {
            let role = n.split('.').nth(4).unwrap_or_default();
            ATTN_ROLES.contains(&role) || FFN_ROLES.contains(&role)
        })
        .map(|(n, t)| {
            let (o, i) = t.dims2().expect("2-D block weight");
            (n.clone(), o, i)
        })
        .collect();
    for (name, d_out, d_in) in targets {
        ckpt.params.insert(
            format!("{name}{LORA_A}"),
            normal(&mut rng, vec![adapter.r, d_in], 1.0 / (d_in as f64).sqrt()),
        )?;
        ckpt.params
            .insert(format!("{name}{LORA_B}"), Tensor::zeros(vec![d_out, adapter.r]))?;
    }
    ckpt.adapter = Some(adapter);
    Ok(())
}
