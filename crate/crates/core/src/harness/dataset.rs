//! Task examples drawn from a synthetic world.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::SyntheticWorld;
use super::{HarnessError, ANSWER, COMMON, CONCEPT_BASE, FILLER, LETTER_BASE, QUESTION};
use crate::model::{Segment, SegmentedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One modality segment.
    Single,
    /// One segment per modality, all showing the same concept.
    Joint,
    /// Each segment shows the shared concept plus its own distractor.
    Commonality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    /// The answer is the concept token itself.
    ConceptToken,
    /// Four concept options follow the question; the answer is a letter token.
    #[default]
    OptionLetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: TaskKind,
    pub modalities: Vec<String>,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub format: AnswerFormat,
    /// Each example opens its text with 0..=`max_filler` filler tokens.
    #[serde(default)]
    pub max_filler: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub kind: TaskKind,
    pub input: SegmentedSequence,
    /// Expected next token after the prompt.
    pub answer: u32,
    pub concept: usize,
    /// Concepts shown in each modality segment, in segment order.
    pub segment_concepts: Vec<Vec<usize>>,
    /// Concept tokens listed as options (empty for concept-token answers).
    pub options: Vec<u32>,
}

impl TaskExample {
    /// Supervised position: the last text position.
    pub fn target(&self) -> (usize, u32) {
        (self.input.text_len() - 1, self.answer)
    }

    /// Copy keeping only the listed modality segments.
    pub fn restricted_to(&self, modalities: &[String]) -> TaskExample {
        let mut out = self.clone();
        out.input = self.input.restricted_to(modalities.iter().map(String::as_str));
        let mut concepts = self.segment_concepts.iter();
        out.segment_concepts = self
            .input
            .segments
            .iter()
            .filter_map(|s| match s {
                Segment::Modality { tag, .. } => {
                    let c = concepts.next().cloned().unwrap_or_default();
                    modalities.contains(tag).then_some(c)
                }
                Segment::Text { .. } => None,
            })
            .collect();
        out
    }
}

pub fn concept_token(c: usize) -> u32 {
    CONCEPT_BASE + c as u32
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Correct concept first, then `preferred` distractors, then random fill; shuffled.
fn build_options(
    correct: usize,
    preferred: &[usize],
    n_concepts: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, usize) {
    let mut chosen = vec![correct];
    for &p in preferred {
        if chosen.len() < 4 && !chosen.contains(&p) {
            chosen.push(p);
        }
    }
    while chosen.len() < 4 {
        let c = rng.random_range(0..n_concepts);
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen.shuffle(rng);
    let pos = chosen.iter().position(|&c| c == correct).expect("present");
    (chosen.into_iter().map(concept_token).collect(), pos)
}

fn one_example(
    world: &SyntheticWorld,
    spec: &DatasetSpec,
    index: usize,
) -> Result<TaskExample, HarnessError> {
    let mut rng = example_rng(spec.seed, index);
    let n = world.n_concepts;
    let concept = rng.random_range(0..n);
    let mut segment_concepts = Vec::with_capacity(spec.modalities.len());
    let mut preferred = Vec::new();
    match spec.kind {
        TaskKind::Single | TaskKind::Joint => {
            for m in &spec.modalities {
                segment_concepts.push(vec![concept]);
                preferred.push(world.confusable_with(m, concept)?);
            }
        }
        TaskKind::Commonality => {
            let mut taken = BTreeSet::from([concept]);
            for _ in &spec.modalities {
                let d = loop {
                    let d = rng.random_range(0..n);
                    if taken.insert(d) {
                        break d;
                    }
                };
                segment_concepts.push(vec![concept, d]);
                preferred.push(d);
            }
        }
    }
    let mut segments = Vec::with_capacity(spec.modalities.len() + 1);
    for (m, concepts) in spec.modalities.iter().zip(&segment_concepts) {
        segments.push(Segment::modality(m.clone(), world.features(m, concepts, &mut rng)?));
    }
    let lead = if spec.kind == TaskKind::Commonality {
        COMMON
    } else {
        QUESTION
    };
    let mut text = vec![FILLER; rng.random_range(0..=spec.max_filler)];
    let (options, answer, text) = match spec.format {
        AnswerFormat::ConceptToken => {
            text.extend([lead, ANSWER]);
            (vec![], concept_token(concept), text)
        }
        AnswerFormat::OptionLetter => {
            let (options, pos) = build_options(concept, &preferred, n, &mut rng);
            text.push(lead);
            text.extend(&options);
            text.push(ANSWER);
            (options, LETTER_BASE + pos as u32, text)
        }
    };
    segments.push(Segment::text(text));
    Ok(TaskExample {
        kind: spec.kind,
        input: SegmentedSequence::new(segments),
        answer,
        concept,
        segment_concepts,
        options,
    })
}

/// Text-only warm-up data over `n_concepts`. The prompt opens with
/// 1..=`max_groups` evidence groups; each holds the concept repeated 1..=2
/// times and, when there are several groups, possibly an equally frequent
/// decoy of its own, so only the concept recurs in every group, followed by
/// 0..=`max_filler` filler tokens. Half the
/// examples then ask for the concept itself (`[.., QUESTION, ANSWER]`), half
/// for its option letter.
pub fn text_pretrain_dataset(
    n_concepts: usize,
    max_groups: usize,
    max_filler: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<TaskExample>, HarnessError> {
    if n_concepts < (max_groups + 1).max(4) || max_groups == 0 {
        return Err(HarnessError::Config("pretraining needs >= 1 group and more concepts than decoys".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = example_rng(seed, i);
            let concept = rng.random_range(0..n_concepts);
            let groups = rng.random_range(1..=max_groups);
            let mut decoys = Vec::new();
            let mut text = Vec::new();
            for _ in 0..groups {
                let reps = rng.random_range(1..=2);
                let mut group = vec![concept; reps];
                if groups > 1 && rng.random_bool(0.5) {
                    let d = loop {
                        let d = rng.random_range(0..n_concepts);
                        if d != concept && !decoys.contains(&d) {
                            break d;
                        }
                    };
                    decoys.push(d);
                    group.extend(std::iter::repeat_n(d, reps));
                }
                group.shuffle(&mut rng);
                text.extend(group.into_iter().map(concept_token));
            }
            text.extend(std::iter::repeat_n(FILLER, rng.random_range(0..=max_filler)));
            text.push(QUESTION);
            let (options, answer) = if rng.random_bool(0.5) {
                (vec![], concept_token(concept))
            } else {
                let (options, pos) = build_options(concept, &decoys, n_concepts, &mut rng);
                text.extend(&options);
                (options, LETTER_BASE + pos as u32)
            };
            text.push(ANSWER);
            TaskExample {
                kind: TaskKind::Single,
                input: SegmentedSequence::new(vec![Segment::text(text)]),
                answer,
                concept,
                segment_concepts: vec![],
                options,
            }
        })
        .collect())
}

pub fn generate_dataset(
    world: &SyntheticWorld,
    spec: &DatasetSpec,
) -> Result<Vec<TaskExample>, HarnessError> {
    for m in &spec.modalities {
        world.generator(m)?;
    }
    let distinct: BTreeSet<&String> = spec.modalities.iter().collect();
    if distinct.len() != spec.modalities.len() {
        return Err(HarnessError::Config("dataset modalities must be distinct".into()));
    }
    match spec.kind {
        TaskKind::Single if spec.modalities.len() != 1 => {
            return Err(HarnessError::Config("single task takes exactly one modality".into()))
        }
        TaskKind::Joint | TaskKind::Commonality if spec.modalities.len() < 2 => {
            return Err(HarnessError::Config(format!(
                "{:?} task needs at least two modalities",
                spec.kind
            )))
        }
        TaskKind::Commonality if spec.modalities.len() + 1 > world.n_concepts => {
            return Err(HarnessError::Config("not enough concepts for distractors".into()))
        }
        _ => {}
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..spec.n)
            .into_par_iter()
            .map(|i| one_example(world, spec, i))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    (0..spec.n).map(|i| one_example(world, spec, i)).collect()
}

/// Same inputs with answers permuted across examples.
pub fn shuffle_labels(data: &[TaskExample], seed: u64) -> Vec<TaskExample> {
    let mut answers: Vec<u32> = data.iter().map(|e| e.answer).collect();
    answers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    data.iter()
        .zip(answers)
        .map(|(e, a)| TaskExample {
            answer: a,
            ..e.clone()
        })
        .collect()
}
