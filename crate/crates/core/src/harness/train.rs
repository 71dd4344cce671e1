//! Two-stage training of single-modality toy models with plain SGD.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{concept_token, TaskExample};
use super::{derive_seed, HarnessError};
use crate::checkpoint::{AdapterConfig, Checkpoint};
use crate::compose::decouple_inference;
use crate::model::init::{attach_adapters, attach_modality};
use crate::model::{GradientMap, ModelConfig, Target, ToyMLLM};
use crate::params::{self, LORA_A, LORA_B};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// LLM untouched; only the encoder and projector learn.
    Frozen,
    /// Adapters on the shared LLM weights.
    Full,
    /// Weights replicated per tag; modality adapters at the main rate, text adapters at `text_lr`.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Objective {
    /// Cross-entropy on the caption (concept) token; trains encoder and projector.
    #[default]
    Caption,
    /// Mean squared error between projected tokens and the caption token's
    /// embedding; trains the projector only.
    Alignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub text_lr: f64,
    pub adapter_r: usize,
    pub adapter_alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub stage1_objective: Stage1Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            stage1_steps: 200,
            stage1_lr: 1e-2,
            stage2_steps: 200,
            stage2_lr: 1e-3,
            text_lr: 1e-4,
            adapter_r: 4,
            adapter_alpha: 8.0,
            batch_size: 16,
            seed: 0,
            stage1_objective: Stage1Objective::Caption,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let rates = [self.stage1_lr, self.stage2_lr, self.text_lr, self.adapter_alpha];
        if self.batch_size == 0 || self.adapter_r == 0 {
            return Err(HarnessError::Config("batch_size and adapter_r must be >= 1".into()));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.adapter_alpha <= 0.0 {
            return Err(HarnessError::Config("learning rates and alpha must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            r: self.adapter_r,
            alpha: self.adapter_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean minibatch loss at every step.
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// Loss over the first (up to 256) stage-1 examples before and after stage 1.
    pub stage1_probe: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Most evidence groups in a prompt.
    pub max_groups: usize,
    pub max_filler: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_examples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_groups: 3,
            max_filler: 4,
            steps: 8000,
            lr: 0.1,
            batch_size: 32,
            n_examples: 4096,
        }
    }
}

/// Full-parameter SGD of a text-only LLM on text option questions.
pub fn pretrain_text_llm(
    base: &Checkpoint,
    n_concepts: usize,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<f64>), HarnessError> {
    if config.steps == 0 {
        return Ok((base.clone(), vec![]));
    }
    if config.batch_size == 0 || config.n_examples == 0 || !(config.lr.is_finite() && config.lr >= 0.0) {
        return Err(HarnessError::Config("invalid pretraining configuration".into()));
    }
    let data = super::dataset::text_pretrain_dataset(n_concepts, config.max_groups, config.max_filler, config.n_examples, derive_seed(seed, "pretrain/data"))?;
    let mut model = ToyMLLM::from_checkpoint(base.clone())?;
    let groups = base
        .params
        .names()
        .filter(|n| n.starts_with("llm."))
        .map(|n| (n.clone(), config.lr))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain"));
    let losses = sgd_loop(&mut model, &data, &groups, config.steps, config.batch_size, &mut rng, "pretrain")?;
    let mut ck = model.checkpoint;
    let arch = ck.base_id.split('@').next().unwrap_or_default().to_string();
    ck.base_id = format!("{arch}@sha256:{}", crate::checkpoint::content_hash(ck.params.iter()));
    Ok((ck, losses))
}

/// Adds a fresh encoder and projector for `modality` to a text-only base.
pub fn init_modality(
    base: &Checkpoint,
    model: &ModelConfig,
    modality: &str,
    seed: u64,
) -> Result<Checkpoint, HarnessError> {
    if !base.modalities.is_empty() || base.params.names().any(|n| !n.starts_with("llm.")) {
        return Err(HarnessError::Config("base must be a text-only LLM checkpoint".into()));
    }
    let dim = *model
        .modality_feature_dims
        .get(modality)
        .ok_or_else(|| HarnessError::UnknownModality(modality.to_string()))?;
    let mut ck = base.clone();
    attach_modality(&mut ck, model, modality, dim, derive_seed(seed, "modality"))?;
    Ok(ck)
}

/// Converts a stage-1 checkpoint into the variant's stage-2 starting point.
/// Adapters start with `B = 0`, so the function is unchanged.
pub fn prepare_stage2(
    ckpt: &Checkpoint,
    modality: &str,
    config: &TrainConfig,
) -> Result<Checkpoint, HarnessError> {
    let seed = derive_seed(config.seed, "adapters");
    Ok(match config.variant {
        Variant::Frozen => ckpt.clone(),
        Variant::Full => {
            let mut ck = ckpt.clone();
            attach_adapters(&mut ck, config.adapter(), seed, |_| true)?;
            ck
        }
        Variant::Decoupled => {
            let mut ck = decouple_inference(ckpt, modality)?;
            attach_adapters(&mut ck, config.adapter(), seed, |_| true)?;
            ck
        }
    })
}

/// Initialization that zero training steps return unchanged.
pub fn initialize_mllm(
    base: &Checkpoint,
    model: &ModelConfig,
    modality: &str,
    config: &TrainConfig,
) -> Result<Checkpoint, HarnessError> {
    let ck = init_modality(base, model, modality, config.seed)?;
    prepare_stage2(&ck, modality, config)
}

fn branch_params(ckpt: &Checkpoint, modality: &str, include_encoder: bool) -> Vec<String> {
    ckpt.params
        .names()
        .filter(|n| {
            n.starts_with(&format!("proj.{modality}."))
                || (include_encoder && n.starts_with(&format!("enc.{modality}.")))
        })
        .cloned()
        .collect()
}

/// Parameter name → learning rate for stage 2 of `variant`.
pub fn stage2_groups(ckpt: &Checkpoint, modality: &str, config: &TrainConfig) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, f64> = branch_params(ckpt, modality, true)
        .into_iter()
        .map(|n| (n, config.stage2_lr))
        .collect();
    if config.variant == Variant::Frozen {
        return groups;
    }
    for name in ckpt.params.names() {
        if !(name.ends_with(LORA_A) || name.ends_with(LORA_B)) {
            continue;
        }
        let lr = match (config.variant, params::weight_tag(params::adapter_base(name).unwrap_or(name))) {
            (Variant::Decoupled, Some(params::TEXT_TAG)) => config.text_lr,
            _ => config.stage2_lr,
        };
        groups.insert(name.clone(), lr);
    }
    groups
}

fn sgd_loop(
    model: &mut ToyMLLM,
    data: &[TaskExample],
    groups: &BTreeMap<String, f64>,
    steps: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    stage: &'static str,
) -> Result<Vec<f64>, HarnessError> {
    let trainable: BTreeSet<String> = groups.keys().cloned().collect();
    let targets: Vec<[Target; 1]> = data.iter().map(|e| [e.target()]).collect();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<(&crate::model::SegmentedSequence, &[Target])> = (0..batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                (&data[i].input, &targets[i][..])
            })
            .collect();
        let (loss, grads) = model.batch_grad(&batch, &trainable)?;
        check_finite(loss, &grads, stage, step)?;
        apply_sgd(model, &grads, groups)?;
        losses.push(loss);
    }
    Ok(losses)
}

fn check_finite(loss: f64, grads: &GradientMap, stage: &'static str, step: usize) -> Result<(), HarnessError> {
    let max_grad = grads
        .values()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    if !loss.is_finite() || !max_grad.is_finite() {
        return Err(HarnessError::NonFiniteLoss {
            stage,
            step,
            loss,
            max_grad,
        });
    }
    Ok(())
}

fn apply_sgd(
    model: &mut ToyMLLM,
    grads: &GradientMap,
    groups: &BTreeMap<String, f64>,
) -> Result<(), HarnessError> {
    for (name, g) in grads {
        let lr = groups[name];
        let t = model
            .params_mut()
            .get_mut(name)
            .expect("trainable parameter exists");
        for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
            *w = (f64::from(*w) - lr * f64::from(*d)) as f32;
        }
    }
    Ok(())
}

fn probe_loss(model: &ToyMLLM, data: &[TaskExample]) -> Result<f64, HarnessError> {
    let take = data.len().min(256);
    let runner = model.runner()?;
    let mut total = 0.0;
    for e in &data[..take] {
        let logits = runner.logits(&e.input)?;
        let (pos, tok) = e.target();
        let mut p = logits.row(pos).to_vec();
        crate::model::linalg::softmax_in_place(&mut p);
        total -= p[tok as usize].ln();
    }
    Ok(total / take as f64)
}

/// Stage 1: align the new modality branch with the frozen text model.
pub fn train_stage1(
    ckpt: &Checkpoint,
    modality: &str,
    data: &[TaskExample],
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Checkpoint, HarnessError> {
    config.validate()?;
    if config.stage1_steps == 0 {
        return Ok(ckpt.clone());
    }
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "stage1"));
    match config.stage1_objective {
        Stage1Objective::Caption => {
            let mut model = ToyMLLM::from_checkpoint(ckpt.clone())?;
            let before = probe_loss(&model, data)?;
            let groups = branch_params(ckpt, modality, true)
                .into_iter()
                .map(|n| (n, config.stage1_lr))
                .collect();
            log.stage1_losses = sgd_loop(
                &mut model,
                data,
                &groups,
                config.stage1_steps,
                config.batch_size,
                &mut rng,
                "stage1",
            )?;
            log.stage1_probe = Some((before, probe_loss(&model, data)?));
            Ok(model.checkpoint)
        }
        Stage1Objective::Alignment => {
            let mut ck = ckpt.clone();
            let mut problem = AlignmentProblem::new(&ck, modality, data)?;
            let before = problem.loss();
            for step in 0..config.stage1_steps {
                let batch: Vec<usize> = (0..config.batch_size)
                    .map(|_| rng.random_range(0..data.len()))
                    .collect();
                let loss = problem.sgd_step(&batch, config.stage1_lr);
                if !loss.is_finite() {
                    return Err(HarnessError::NonFiniteLoss {
                        stage: "stage1",
                        step,
                        loss,
                        max_grad: f64::NAN,
                    });
                }
                log.stage1_losses.push(loss);
            }
            log.stage1_probe = Some((before, problem.loss()));
            problem.write_back(&mut ck, modality)?;
            Ok(ck)
        }
    }
}

/// Projector regression onto caption-token embeddings with the encoder held fixed.
pub struct AlignmentProblem {
    /// Encoder hidden activations, one row per example.
    pub hidden: Vec<Vec<f64>>,
    /// Target projector output per example (`n_tokens × d_model`, flattened).
    pub targets: Vec<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_dim: usize,
}

impl AlignmentProblem {
    pub fn new(ckpt: &Checkpoint, modality: &str, data: &[TaskExample]) -> Result<Self, HarnessError> {
        let p = &ckpt.params;
        let enc_w = p.require(&format!("enc.{modality}.weight")).map_err(crate::model::ModelError::from)?;
        let enc_b = p.require(&format!("enc.{modality}.bias")).map_err(crate::model::ModelError::from)?;
        let proj_w = p.require(&format!("proj.{modality}.weight")).map_err(crate::model::ModelError::from)?;
        let proj_b = p.require(&format!("proj.{modality}.bias")).map_err(crate::model::ModelError::from)?;
        let embed = p.require("llm.embed").map_err(crate::model::ModelError::from)?;
        let d_model = embed.shape()[1];
        let (e, f) = (enc_w.shape()[0], enc_w.shape()[1]);
        let out_dim = proj_w.shape()[0];
        let mut hidden = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len());
        for ex in data {
            let features = ex
                .input
                .segments
                .iter()
                .find_map(|s| match s {
                    crate::model::Segment::Modality { tag, features } if tag == modality => Some(features),
                    _ => None,
                })
                .ok_or_else(|| HarnessError::MissingModalities(vec![modality.to_string()]))?;
            if features.len() != f {
                return Err(HarnessError::Config(format!(
                    "feature dim {} does not match encoder input {f}",
                    features.len()
                )));
            }
            let z: Vec<f64> = (0..e)
                .map(|r| {
                    let s: f64 = (0..f)
                        .map(|c| f64::from(enc_w.data()[r * f + c]) * f64::from(features[c]))
                        .sum();
                    (s + f64::from(enc_b.data()[r])).tanh()
                })
                .collect();
            hidden.push(z);
            let tok = concept_token(ex.concept) as usize;
            let row = &embed.data()[tok * d_model..(tok + 1) * d_model];
            targets.push(
                (0..out_dim)
                    .map(|i| f64::from(row[i % d_model]))
                    .collect(),
            );
        }
        Ok(Self {
            hidden,
            targets,
            weight: proj_w.data().iter().map(|&v| f64::from(v)).collect(),
            bias: proj_b.data().iter().map(|&v| f64::from(v)).collect(),
            out_dim,
        })
    }

    fn predict(&self, i: usize) -> Vec<f64> {
        let e = self.hidden[i].len();
        (0..self.out_dim)
            .map(|r| {
                self.bias[r]
                    + (0..e)
                        .map(|c| self.weight[r * e + c] * self.hidden[i][c])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Mean squared error over all examples and output elements.
    pub fn loss(&self) -> f64 {
        let n = self.hidden.len() as f64 * self.out_dim as f64;
        (0..self.hidden.len())
            .map(|i| {
                self.predict(i)
                    .iter()
                    .zip(&self.targets[i])
                    .map(|(p, t)| (p - t).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n
    }

    fn sgd_step(&mut self, batch: &[usize], lr: f64) -> f64 {
        let e = self.hidden[0].len();
        let scale = 2.0 / (batch.len() as f64 * self.out_dim as f64);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.bias.len()];
        let mut loss = 0.0;
        for &i in batch {
            let pred = self.predict(i);
            for r in 0..self.out_dim {
                let diff = pred[r] - self.targets[i][r];
                loss += diff * diff;
                gb[r] += scale * diff;
                for c in 0..e {
                    gw[r * e + c] += scale * diff * self.hidden[i][c];
                }
            }
        }
        for (w, g) in self.weight.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
        loss / (batch.len() as f64 * self.out_dim as f64)
    }

    fn write_back(&self, ckpt: &mut Checkpoint, modality: &str) -> Result<(), HarnessError> {
        for (name, values) in [("weight", &self.weight), ("bias", &self.bias)] {
            let t = ckpt
                .params
                .get_mut(&format!("proj.{modality}.{name}"))
                .expect("projector present");
            for (dst, v) in t.data_mut().iter_mut().zip(values) {
                *dst = *v as f32;
            }
        }
        Ok(())
    }
}

/// Stage 2: instruction tuning according to the variant.
pub fn train_stage2(
    ckpt: &Checkpoint,
    modality: &str,
    data: &[TaskExample],
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<Checkpoint, HarnessError> {
    config.validate()?;
    if config.stage2_steps == 0 {
        return Ok(ckpt.clone());
    }
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "stage2"));
    let groups = stage2_groups(ckpt, modality, config);
    let mut model = ToyMLLM::from_checkpoint(ckpt.clone())?;
    log.stage2_losses = sgd_loop(
        &mut model,
        data,
        &groups,
        config.stage2_steps,
        config.batch_size,
        &mut rng,
        "stage2",
    )?;
    Ok(model.checkpoint)
}

/// Full two-stage recipe for one modality on top of a text-only base.
pub fn train_toy_mllm(
    base: &Checkpoint,
    model: &ModelConfig,
    modality: &str,
    stage1: &[TaskExample],
    stage2: &[TaskExample],
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), HarnessError> {
    config.validate()?;
    let mut log = TrainLog::default();
    let ck = init_modality(base, model, modality, config.seed)?;
    let ck = train_stage1(&ck, modality, stage1, config, &mut log)?;
    let ck = prepare_stage2(&ck, modality, config)?;
    let ck = train_stage2(&ck, modality, stage2, config, &mut log)?;
    Ok((ck, log))
}
