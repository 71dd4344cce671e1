//! Browser bindings: caption similarity, the coefficient grid, and a small
//! composition workbench over randomly initialized toy checkpoints.

use std::collections::BTreeMap;

use modelcompose::compose::{compose, MergeSpec};
use modelcompose::mcub::{cosine, default_embed, group_similarity};
use modelcompose::model::init::{attach_adapters, attach_modality, init_base_llm};
use modelcompose::model::{Segment, SegmentedSequence};
use modelcompose::{enumerate_grid, AdapterConfig, Checkpoint, ModelConfig, ToyMLLM};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Mean pairwise cosine of the non-empty lines of `text`, plus the pair matrix.
#[wasm_bindgen]
pub fn caption_similarity(text: &str) -> Result<String, JsError> {
    let captions: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
    let mean = group_similarity(&refs, default_embed).map_err(js_err)?;
    let embs: Vec<Vec<f64>> = captions.iter().map(|c| default_embed(c)).collect();
    let pairs: Vec<Vec<f64>> = embs
        .iter()
        .map(|a| embs.iter().map(|b| cosine(a, b)).collect())
        .collect();
    Ok(json!({ "captions": captions, "mean": mean, "pairs": pairs }).to_string())
}

/// Every coefficient vector searched when composing `n` models.
#[wasm_bindgen]
pub fn lambda_grid(n: usize) -> Result<String, JsError> {
    let grid = enumerate_grid(n).map_err(js_err)?;
    Ok(json!({ "values": grid.values(), "candidates": grid.candidates }).to_string())
}

const MODALITIES: [&str; 2] = ["image", "audio"];

/// Two single-modality toy models sharing one base, ready to compose.
#[wasm_bindgen]
pub struct Workbench {
    config: ModelConfig,
    models: Vec<Checkpoint>,
    features: BTreeMap<String, Vec<f32>>,
}

fn lcg(state: &mut u64) -> f32 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
}

#[wasm_bindgen]
impl Workbench {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, adapter_scale: f32) -> Result<Workbench, JsError> {
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: 12,
            encoder_dim: 6,
            n_modality_tokens: 2,
            modality_feature_dims: MODALITIES.iter().map(|m| (m.to_string(), 4)).collect(),
        };
        let base = init_base_llm(&config, u64::from(seed)).map_err(js_err)?;
        let mut state = u64::from(seed) ^ 0x9e37_79b9_7f4a_7c15;
        let mut models = Vec::new();
        let mut features = BTreeMap::new();
        for (i, m) in MODALITIES.iter().enumerate() {
            let mut ck = base.clone();
            attach_modality(&mut ck, &config, m, 4, u64::from(seed) + i as u64).map_err(js_err)?;
            let adapter = AdapterConfig { r: 2, alpha: 4.0 };
            attach_adapters(&mut ck, adapter, u64::from(seed) + 17 * (i as u64 + 1), |_| true).map_err(js_err)?;
            let names: Vec<String> = ck.params.names().filter(|n| n.ends_with(".lora_b")).cloned().collect();
            for n in names {
                let t = ck.params.get_mut(&n).expect("listed");
                for v in t.data_mut() {
                    *v = lcg(&mut state) * adapter_scale;
                }
            }
            features.insert(m.to_string(), (0..4).map(|_| lcg(&mut state)).collect());
            models.push(ck);
        }
        Ok(Workbench {
            config,
            models,
            features,
        })
    }

    /// Composes both models and reports logits on single- and two-modality inputs.
    /// `strategy` is `naive`, `weighted` or `proj-only`.
    pub fn compose(&self, strategy: &str, lambda_image: f64, lambda_audio: f64) -> Result<String, JsError> {
        let spec = match strategy {
            "naive" => MergeSpec::naive(),
            "weighted" => MergeSpec::weighted(vec![lambda_image, lambda_audio]),
            "proj-only" => {
                let frozen: Vec<Checkpoint> = self.models.iter().map(strip_adapters).collect();
                let refs: Vec<&Checkpoint> = frozen.iter().collect();
                return self.report(compose(&refs, &MergeSpec::proj_only()).map_err(js_err)?.0, &frozen);
            }
            other => return Err(JsError::new(&format!("unknown strategy {other:?}"))),
        };
        let refs: Vec<&Checkpoint> = self.models.iter().collect();
        let (composite, _) = compose(&refs, &spec).map_err(js_err)?;
        self.report(composite, &self.models)
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
}

fn strip_adapters(ck: &Checkpoint) -> Checkpoint {
    let mut out = ck.clone();
    let names: Vec<String> = out.params.names().filter(|n| n.contains(".lora_")).cloned().collect();
    for n in names {
        out.params.remove(&n);
    }
    out.adapter = None;
    out
}

impl Workbench {
    fn input(&self, modalities: &[&str]) -> SegmentedSequence {
        let mut segs: Vec<Segment> = modalities
            .iter()
            .map(|m| Segment::modality(*m, self.features[*m].clone()))
            .collect();
        segs.push(Segment::text(vec![3u32, 4]));
        SegmentedSequence::new(segs)
    }

    fn last_logits(model: &ToyMLLM, input: &SegmentedSequence) -> Result<Vec<f64>, JsError> {
        let logits = model.forward(input).map_err(js_err)?;
        Ok(logits.row(logits.rows - 1).to_vec())
    }

    fn report(&self, composite: Checkpoint, constituents: &[Checkpoint]) -> Result<String, JsError> {
        let n_params = composite.params.len();
        let model = ToyMLLM::from_checkpoint(composite).map_err(js_err)?;
        let mut single = Vec::new();
        for (m, ck) in MODALITIES.iter().zip(constituents) {
            let input = self.input(&[m]);
            let own = ToyMLLM::from_checkpoint(ck.clone()).map_err(js_err)?;
            let a = Self::last_logits(&model, &input)?;
            let b = Self::last_logits(&own, &input)?;
            let diff = a.iter().zip(&b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
            single.push(json!({ "modality": m, "composite": a, "constituent": b, "max_abs_diff": diff }));
        }
        let joint = Self::last_logits(&model, &self.input(&MODALITIES))?;
        let out: Value = json!({ "n_params": n_params, "single": single, "joint": joint });
        Ok(out.to_string())
    }
}

