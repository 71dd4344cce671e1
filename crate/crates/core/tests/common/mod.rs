#![allow(dead_code)]

use std::collections::BTreeSet;

use modelcompose::compose::decouple_inference;
use modelcompose::model::init::{attach_adapters, attach_modality, init_base_llm};
use modelcompose::model::{Matrix, TagWeights};
use modelcompose::{AdapterConfig, Checkpoint, ModelConfig, Segment, SegmentedSequence, ToyMLLM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(d_model: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads: 2,
        n_layers: 2,
        d_ff: 2 * d_model,
        vocab_size: 24,
        encoder_dim: 6,
        n_modality_tokens: 2,
        ..ModelConfig::default()
    }
}

/// Base LLM plus one modality branch per entry of `modalities` (feature dim 5).
pub fn model_with(config: &ModelConfig, seed: u64, modalities: &[&str]) -> Checkpoint {
    let mut ck = init_base_llm(config, seed).unwrap();
    for (i, m) in modalities.iter().enumerate() {
        attach_modality(&mut ck, config, m, 5, seed + 100 + i as u64).unwrap();
    }
    ck
}

/// Overwrites every tensor in `names` with N(0, std) noise.
pub fn randomize(ck: &mut Checkpoint, names: impl Fn(&str) -> bool, std: f64, seed: u64) {
    let mut r = rng(seed);
    let keys: Vec<String> = ck.params.names().filter(|n| names(n)).cloned().collect();
    for k in keys {
        let t = ck.params.get_mut(&k).unwrap();
        for v in t.data_mut() {
            *v = (std * (r.random::<f64>() * 2.0 - 1.0) * 1.7) as f32;
        }
    }
}

/// Decoupled, adapter-bearing model with every parameter nonzero.
pub fn full_featured(config: &ModelConfig, seed: u64, modality: &str) -> ToyMLLM {
    let ck = model_with(config, seed, &[modality]);
    let mut ck = decouple_inference(&ck, modality).unwrap();
    attach_adapters(&mut ck, AdapterConfig { r: 2, alpha: 4.0 }, seed, |_| true).unwrap();
    randomize(&mut ck, |n| n.ends_with(".lora_b") || n.ends_with("bias"), 0.2, seed + 7);
    randomize(&mut ck, |n| n.ends_with("gain"), 0.3, seed + 8);
    ToyMLLM::from_checkpoint(ck).unwrap()
}

pub fn random_features(r: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| r.random::<f32>() * 2.0 - 1.0).collect()
}

/// Random interleaving of text runs and modality segments.
pub fn random_input(r: &mut ChaCha8Rng, model: &ToyMLLM) -> SegmentedSequence {
    let mods: Vec<(String, usize)> = model
        .config
        .modality_feature_dims
        .iter()
        .map(|(m, d)| (m.clone(), *d))
        .collect();
    let vocab = model.config.vocab_size as u32;
    let mut segs = Vec::new();
    let n = r.random_range(1..=4);
    for _ in 0..n {
        if !mods.is_empty() && r.random_bool(0.5) {
            let (m, d) = &mods[r.random_range(0..mods.len())];
            segs.push(Segment::modality(m.clone(), random_features(r, *d)));
        } else {
            let len = r.random_range(1..=3);
            segs.push(Segment::text((0..len).map(|_| r.random_range(0..vocab)).collect::<Vec<_>>()));
        }
    }
    segs.push(Segment::text(vec![r.random_range(0..vocab)]));
    SegmentedSequence::new(segs)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in &mut m.data {
        *v = (r.random::<f64>() * 2.0 - 1.0) / (cols as f64).sqrt();
    }
    m
}

pub fn random_tag_weights(r: &mut ChaCha8Rng, d: usize, ff: usize) -> TagWeights {
    TagWeights {
        wq: random_matrix(r, d, d),
        wk: random_matrix(r, d, d),
        wv: random_matrix(r, d, d),
        wo: random_matrix(r, d, d),
        w1: random_matrix(r, ff, d),
        w2: random_matrix(r, d, ff),
    }
}

pub fn all_names(model: &ToyMLLM) -> BTreeSet<String> {
    model.params().names().cloned().collect()
}
