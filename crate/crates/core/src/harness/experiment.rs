//! Train constituents per variant, compose them per method, and score every
//! (method, modality combination) cell on held-out joint data.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::dataset::{generate_dataset, AnswerFormat, DatasetSpec, TaskExample, TaskKind};
use super::eval::{evaluate, extraction_for};
use super::train::{
    init_modality, prepare_stage2, pretrain_text_llm, train_stage1, train_stage2, PretrainConfig, TrainConfig,
    Stage1Objective, TrainLog, Variant,
};
use super::world::{build_synthetic_world, SyntheticWorld, WorldConfig};
use super::{derive_seed, HarnessError};
use crate::checkpoint::Checkpoint;
use crate::compose::{compose, MergeSpec};
use crate::model::init::init_base_llm;
use crate::model::ModelConfig;
use crate::search::{enumerate_grid, search};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Frozen-LLM constituents; only encoders and projectors are combined.
    ProjOnly,
    /// Adapter-tuned constituents averaged uniformly.
    Naive,
    /// Decoupled constituents with coefficients searched on validation data.
    Damc,
}

impl Method {
    pub fn variant(self) -> Variant {
        match self {
            Method::ProjOnly => Variant::Frozen,
            Method::Naive => Variant::Full,
            Method::Damc => Variant::Decoupled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world_seeds: Vec<u64>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    /// Seed of the shared text-only base, independent of the world seeds.
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Shared hyperparameters; the variant is set per method.
    pub train: TrainConfig,
    pub n_stage1: usize,
    pub n_stage2: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub methods: Vec<Method>,
    pub combos: Vec<Vec<String>>,
    pub format: AnswerFormat,
    /// Filler budget of the training prompts; evaluation prompts carry none.
    #[serde(default)]
    pub max_filler: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let model = ModelConfig {
            modality_feature_dims: world.feature_dims.clone(),
            ..ModelConfig::default()
        };
        let mods: Vec<String> = world.feature_dims.keys().cloned().collect();
        let mut combos: Vec<Vec<String>> = mods.iter().map(|m| vec![m.clone()]).collect();
        combos.push(mods);
        Self {
            world_seeds: (0..5).collect(),
            world,
            model,
            base_seed: 0,
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                stage1_steps: 300,
                stage1_lr: 10.0,
                stage2_steps: 600,
                stage2_lr: 0.1,
                text_lr: 0.02,
                adapter_r: 4,
                adapter_alpha: 8.0,
                batch_size: 16,
                stage1_objective: Stage1Objective::Alignment,
                ..TrainConfig::default()
            },
            n_stage1: 512,
            n_stage2: 1024,
            n_val: 128,
            n_test: 400,
            methods: vec![Method::ProjOnly, Method::Naive, Method::Damc],
            combos,
            format: AnswerFormat::OptionLetter,
            max_filler: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        self.model.validate()?;
        if self.combos.is_empty() || self.methods.is_empty() {
            return Err(HarnessError::Config("methods and combos must be non-empty".into()));
        }
        if self.n_test == 0 || self.n_val == 0 {
            return Err(HarnessError::Config("n_val and n_test must be >= 1".into()));
        }
        for m in self.combos.iter().flatten() {
            if !self.world.feature_dims.contains_key(m) {
                return Err(HarnessError::UnknownModality(m.clone()));
            }
            if self.model.modality_feature_dims.get(m) != self.world.feature_dims.get(m) {
                return Err(HarnessError::Config(format!(
                    "model and world disagree on the feature dim of {m:?}"
                )));
            }
        }
        let needed = 16 + self.world.n_concepts;
        if self.model.vocab_size < needed {
            return Err(HarnessError::Config(format!(
                "vocab_size {} too small for {} concepts",
                self.model.vocab_size, self.world.n_concepts
            )));
        }
        Ok(())
    }

    fn modalities(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.combos.iter().flatten().collect();
        set.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub combo: Vec<String>,
    pub accuracy: f64,
    /// Coefficients used for the merge (searched for DAMC).
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstituentScore {
    pub variant: Variant,
    pub modality: String,
    pub accuracy: f64,
    pub stage1_probe: Option<(f64, f64)>,
    pub final_stage2_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_examples: usize,
    pub cells: Vec<Cell>,
    pub constituents: Vec<ConstituentScore>,
}

impl EvalReport {
    pub fn cell(&self, method: Method, combo: &[String]) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.combo == combo)
    }

    pub fn constituent(&self, variant: Variant, modality: &str) -> Option<&ConstituentScore> {
        self.constituents
            .iter()
            .find(|c| c.variant == variant && c.modality == modality)
    }
}

/// Trained constituents of one world, keyed by variant then modality.
pub struct Constituents {
    pub world: SyntheticWorld,
    pub models: BTreeMap<Variant, BTreeMap<String, Checkpoint>>,
    pub logs: BTreeMap<(Variant, String), TrainLog>,
}

/// Text-only base shared by every world seed: initialized, then warmed up on text option questions.
pub fn prepare_base(config: &ExperimentConfig) -> Result<Checkpoint, HarnessError> {
    config.validate()?;
    let base = init_base_llm(&config.model, derive_seed(config.base_seed, "base"))?;
    Ok(pretrain_text_llm(&base, config.world.n_concepts, &config.pretrain, config.base_seed)?.0)
}

pub fn train_constituents(
    config: &ExperimentConfig,
    base: &Checkpoint,
    world_seed: u64,
) -> Result<Constituents, HarnessError> {
    config.validate()?;
    let world = build_synthetic_world(world_seed, &config.world)?;
    let variants: BTreeSet<Variant> = config.methods.iter().map(|m| m.variant()).collect();
    let mut models: BTreeMap<Variant, BTreeMap<String, Checkpoint>> = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for modality in config.modalities() {
        let stage1_data = generate_dataset(
            &world,
            &DatasetSpec {
                kind: TaskKind::Single,
                modalities: vec![modality.clone()],
                n: config.n_stage1,
                seed: derive_seed(world_seed, &format!("stage1/{modality}")),
                format: AnswerFormat::ConceptToken,
                max_filler: config.max_filler,
            },
        )?;
        let stage2_data = generate_dataset(
            &world,
            &DatasetSpec {
                kind: TaskKind::Single,
                modalities: vec![modality.clone()],
                n: config.n_stage2,
                seed: derive_seed(world_seed, &format!("stage2/{modality}")),
                format: config.format,
                max_filler: config.max_filler,
            },
        )?;
        let train_cfg = TrainConfig {
            seed: derive_seed(world_seed, &format!("train/{modality}")),
            ..config.train.clone()
        };
        let mut stage1_log = TrainLog::default();
        let ck = init_modality(base, &config.model, &modality, train_cfg.seed)?;
        let aligned = train_stage1(&ck, &modality, &stage1_data, &train_cfg, &mut stage1_log)?;
        for &variant in &variants {
            let cfg = TrainConfig {
                variant,
                ..train_cfg.clone()
            };
            let mut log = stage1_log.clone();
            let start = prepare_stage2(&aligned, &modality, &cfg)?;
            let trained = train_stage2(&start, &modality, &stage2_data, &cfg, &mut log)?;
            models.entry(variant).or_default().insert(modality.clone(), trained);
            logs.insert((variant, modality.clone()), log);
        }
    }
    Ok(Constituents { world, models, logs })
}

fn joint_split(
    config: &ExperimentConfig,
    world: &SyntheticWorld,
    world_seed: u64,
    label: &str,
    n: usize,
) -> Result<Vec<TaskExample>, HarnessError> {
    let modalities = config.modalities();
    let kind = if modalities.len() == 1 {
        TaskKind::Single
    } else {
        TaskKind::Joint
    };
    generate_dataset(
        world,
        &DatasetSpec {
            kind,
            modalities,
            n,
            seed: derive_seed(world_seed, label),
            format: config.format,
            max_filler: 0,
        },
    )
}

fn restrict(data: &[TaskExample], combo: &[String]) -> Vec<TaskExample> {
    data.iter().map(|e| e.restricted_to(combo)).collect()
}

/// Composes the constituents of `combo` with `method`; returns the composite and the coefficients used.
pub fn compose_for(
    method: Method,
    constituents: &BTreeMap<String, Checkpoint>,
    combo: &[String],
    val: &[TaskExample],
    format: AnswerFormat,
) -> Result<(Checkpoint, Option<Vec<f64>>), HarnessError> {
    let inputs: Vec<&Checkpoint> = combo
        .iter()
        .map(|m| {
            constituents
                .get(m)
                .ok_or_else(|| HarnessError::UnknownModality(m.clone()))
        })
        .collect::<Result<_, _>>()?;
    match method {
        Method::ProjOnly => Ok((compose(&inputs, &MergeSpec::proj_only())?.0, None)),
        Method::Naive => {
            let (c, r) = compose(&inputs, &MergeSpec::naive())?;
            Ok((c, Some(r.coefficients)))
        }
        Method::Damc => {
            let grid = enumerate_grid(inputs.len())?;
            let val = restrict(val, combo);
            let extraction = extraction_for(format);
            let result = search(&grid, |lambda| -> Result<f64, HarnessError> {
                let (c, _) = compose(&inputs, &MergeSpec::weighted(lambda.to_vec()))?;
                Ok(evaluate(&c, &val, extraction)?.accuracy)
            })?;
            let (c, _) = compose(&inputs, &MergeSpec::weighted(result.best_lambda.clone()))?;
            Ok((c, Some(result.best_lambda)))
        }
    }
}

/// Scores trained constituents; separated from training so tests can reuse models.
pub fn score_constituents(
    config: &ExperimentConfig,
    trained: &Constituents,
    world_seed: u64,
) -> Result<EvalReport, HarnessError> {
    let val = joint_split(config, &trained.world, world_seed, "val", config.n_val)?;
    let test = joint_split(config, &trained.world, world_seed, "test", config.n_test)?;
    let extraction = extraction_for(config.format);
    let mut cells = Vec::new();
    for &method in &config.methods {
        let models = &trained.models[&method.variant()];
        for combo in &config.combos {
            let (composite, lambda) = compose_for(method, models, combo, &val, config.format)?;
            let acc = evaluate(&composite, &restrict(&test, combo), extraction)?.accuracy;
            cells.push(Cell {
                method,
                combo: combo.clone(),
                accuracy: acc,
                lambda,
            });
        }
    }
    let mut constituents = Vec::new();
    for (variant, models) in &trained.models {
        for (modality, ck) in models {
            let data = restrict(&test, std::slice::from_ref(modality));
            let log = &trained.logs[&(*variant, modality.clone())];
            constituents.push(ConstituentScore {
                variant: *variant,
                modality: modality.clone(),
                accuracy: evaluate(ck, &data, extraction)?.accuracy,
                stage1_probe: log.stage1_probe,
                final_stage2_loss: log.stage2_losses.last().copied(),
            });
        }
    }
    Ok(EvalReport {
        seed: world_seed,
        n_examples: config.n_test,
        cells,
        constituents,
    })
}

pub fn run_composition_experiment(config: &ExperimentConfig, world_seed: u64) -> Result<EvalReport, HarnessError> {
    run_with_base(config, &prepare_base(config)?, world_seed)
}

pub fn run_with_base(config: &ExperimentConfig, base: &Checkpoint, world_seed: u64) -> Result<EvalReport, HarnessError> {
    let trained = train_constituents(config, base, world_seed)?;
    score_constituents(config, &trained, world_seed)
}

/// Runs every configured world seed, in parallel when the feature is enabled.
pub fn run_all_seeds(config: &ExperimentConfig) -> Result<Vec<EvalReport>, HarnessError> {
    let base = prepare_base(config)?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        config
            .world_seeds
            .par_iter()
            .map(|&s| run_with_base(config, &base, s))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    config
        .world_seeds
        .iter()
        .map(|&s| run_with_base(config, &base, s))
        .collect()
}

/// Mean accuracy per (method, combo) across reports.
pub fn mean_cells(reports: &[EvalReport]) -> Vec<Cell> {
    let mut acc: BTreeMap<(Method, Vec<String>), Vec<f64>> = BTreeMap::new();
    for r in reports {
        for c in &r.cells {
            acc.entry((c.method, c.combo.clone())).or_default().push(c.accuracy);
        }
    }
    acc.into_iter()
        .map(|((method, combo), v)| Cell {
            method,
            combo,
            accuracy: v.iter().sum::<f64>() / v.len() as f64,
            lambda: None,
        })
        .collect()
}
