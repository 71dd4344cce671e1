//! Commonality benchmark construction: group sampling by caption similarity,
//! four-option question generation and answer scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBED_DIM: usize = 256;
pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error)]
pub enum McubError {
    #[error("need at least 2 captions, got {0}")]
    TooFewCaptions(usize),
    #[error("no entities in the pool for modality {0:?}")]
    EmptyPool(String),
    #[error("group modalities must be distinct, {0:?} repeated")]
    DuplicateModality(String),
    #[error("k={k} exceeds n_candidates={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("group has no tag shared by every member")]
    NoSharedTag,
    #[error("only {0} distractor tags available, need 3")]
    NotEnoughDistractors(usize),
    #[error("{items} items but {predictions} predictions")]
    LengthMismatch { items: usize, predictions: usize },
    #[error("invalid entity: {0}")]
    InvalidEntity(String),
    #[error("invalid item: {0}")]
    InvalidItem(String),
    #[error("could not parse generator output: {0}")]
    Parse(String),
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedEntity {
    pub modality: String,
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

impl CaptionedEntity {
    pub fn new(modality: &str, id: &str, caption: &str, tags: &[&str]) -> Self {
        Self {
            modality: modality.into(),
            id: id.into(),
            caption: caption.into(),
            tags: (!tags.is_empty()).then(|| tags.iter().map(|t| t.to_string()).collect()),
        }
    }

    pub fn tag_set(&self) -> BTreeSet<&str> {
        self.tags
            .iter()
            .flatten()
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityGroup {
    pub members: Vec<CaptionedEntity>,
    pub similarity: f64,
}

impl EntityGroup {
    pub fn member_ids(&self) -> Vec<String> {
        self.members
            .iter()
            .map(|m| format!("{}:{}", m.modality, m.id))
            .collect()
    }

    /// Tags held by every member.
    pub fn shared_tags(&self) -> BTreeSet<&str> {
        let mut it = self.members.iter().map(CaptionedEntity::tag_set);
        let first = it.next().unwrap_or_default();
        it.fold(first, |acc, s| acc.intersection(&s).copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub member_ids: Vec<String>,
    pub group: EntityGroup,
    pub question: String,
    /// Option texts for A, B, C, D.
    pub options: Vec<String>,
    pub answer: char,
    pub explanation: String,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), McubError> {
        if self.options.len() != 4 {
            return Err(McubError::InvalidItem(format!(
                "{} options, need 4",
                self.options.len()
            )));
        }
        let distinct: BTreeSet<&str> = self.options.iter().map(|o| o.trim()).collect();
        if distinct.len() != 4 {
            return Err(McubError::InvalidItem("options are not distinct".into()));
        }
        if !LETTERS.contains(&self.answer) {
            return Err(McubError::InvalidItem(format!("answer {:?}", self.answer)));
        }
        Ok(())
    }

    pub fn answer_text(&self) -> &str {
        let idx = LETTERS.iter().position(|&c| c == self.answer).unwrap_or(0);
        &self.options[idx]
    }
}

fn words(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Bag-of-words embedding: each lowercase word hashed into one of 256 buckets, L2-normalized.
pub fn default_embed(caption: &str) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    for w in words(caption) {
        v[(fnv1a64(w.as_bytes()) % EMBED_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean cosine similarity over all unordered caption pairs.
pub fn group_similarity(
    captions: &[&str],
    embed_fn: impl Fn(&str) -> Vec<f64>,
) -> Result<f64, McubError> {
    if captions.len() < 2 {
        return Err(McubError::TooFewCaptions(captions.len()));
    }
    let embs: Vec<Vec<f64>> = captions.iter().map(|c| embed_fn(c)).collect();
    Ok(mean_pairwise(&embs))
}

/// Summed in sorted order so any permutation of the inputs gives the same bits.
fn mean_pairwise(embs: &[Vec<f64>]) -> f64 {
    let mut sims = Vec::new();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            sims.push(cosine(&embs[i], &embs[j]));
        }
    }
    sims.sort_by(f64::total_cmp);
    sims.iter().sum::<f64>() / sims.len() as f64
}

/// Samples `n_candidates` groups (one entity per modality) and keeps the `k` most similar.
pub fn sample_and_select_groups(
    pools: &BTreeMap<String, Vec<CaptionedEntity>>,
    modalities: &[String],
    n_candidates: usize,
    k: usize,
    seed: u64,
    embed_fn: impl Fn(&str) -> Vec<f64> + Sync,
) -> Result<Vec<EntityGroup>, McubError> {
    if k > n_candidates {
        return Err(McubError::KTooLarge { k, n: n_candidates });
    }
    if modalities.len() < 2 {
        return Err(McubError::TooFewCaptions(modalities.len()));
    }
    let mut seen = BTreeSet::new();
    let mut chosen_pools = Vec::with_capacity(modalities.len());
    for m in modalities {
        if !seen.insert(m) {
            return Err(McubError::DuplicateModality(m.clone()));
        }
        match pools.get(m) {
            Some(p) if !p.is_empty() => chosen_pools.push(p),
            _ => return Err(McubError::EmptyPool(m.clone())),
        }
    }
    let embeddings: Vec<Vec<Vec<f64>>> = chosen_pools
        .iter()
        .map(|p| p.iter().map(|e| embed_fn(&e.caption)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = (0..n_candidates)
        .map(|_| {
            chosen_pools
                .iter()
                .map(|p| rng.random_range(0..p.len()))
                .collect()
        })
        .collect();

    let score = |pick: &Vec<usize>| {
        let embs: Vec<Vec<f64>> = pick
            .iter()
            .enumerate()
            .map(|(m, &i)| embeddings[m][i].clone())
            .collect();
        mean_pairwise(&embs)
    };
    #[cfg(feature = "parallel")]
    let scores: Vec<f64> = {
        use rayon::prelude::*;
        picks.par_iter().map(score).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let scores: Vec<f64> = picks.iter().map(score).collect();

    let mut order: Vec<usize> = (0..n_candidates).collect();
    // Stable sort keeps sample order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order
        .into_iter()
        .take(k)
        .map(|g| EntityGroup {
            members: picks[g]
                .iter()
                .enumerate()
                .map(|(m, &i)| chosen_pools[m][i].clone())
                .collect(),
            similarity: scores[g],
        })
        .collect())
}

/// Produces one or more questions for a group.
pub trait QuestionGenerator: Sync {
    fn generate(&self, group: &EntityGroup, seed: u64) -> Result<Vec<McqItem>, McubError>;
}

/// Offline generator driven by entity tags.
#[derive(Debug, Clone, Default)]
pub struct TemplateGenerator {
    /// Fallback distractors when strict-subset tags run short.
    pub distractor_pool: Vec<String>,
}

fn group_rng(group: &EntityGroup, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(group.member_ids().join("|").as_bytes()));
    rng
}

fn question_text(n: usize) -> String {
    format!("Which of the followings are the common point of the {n} entities?")
}

impl QuestionGenerator for TemplateGenerator {
    fn generate(&self, group: &EntityGroup, seed: u64) -> Result<Vec<McqItem>, McubError> {
        let shared = group.shared_tags();
        if shared.is_empty() {
            return Err(McubError::NoSharedTag);
        }
        let mut rng = group_rng(group, seed);
        let shared: Vec<&str> = shared.into_iter().collect();
        let correct = shared[rng.random_range(0..shared.len())];

        let all_shared: BTreeSet<&str> = shared.iter().copied().collect();
        let mut partial: Vec<&str> = group
            .members
            .iter()
            .flat_map(CaptionedEntity::tag_set)
            .filter(|t| !all_shared.contains(t))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        partial.shuffle(&mut rng);
        let mut distractors: Vec<&str> = partial.into_iter().take(3).collect();
        if distractors.len() < 3 {
            let mut extra: Vec<&str> = self
                .distractor_pool
                .iter()
                .map(String::as_str)
                .filter(|t| !all_shared.contains(t) && !distractors.contains(t))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            extra.shuffle(&mut rng);
            let need = 3 - distractors.len();
            distractors.extend(extra.into_iter().take(need));
        }
        if distractors.len() < 3 {
            return Err(McubError::NotEnoughDistractors(distractors.len()));
        }

        let mut options: Vec<&str> = std::iter::once(correct).chain(distractors).collect();
        options.shuffle(&mut rng);
        let pos = options.iter().position(|&o| o == correct).expect("present");
        let item = McqItem {
            member_ids: group.member_ids(),
            group: group.clone(),
            question: question_text(group.members.len()),
            options: options.into_iter().map(String::from).collect(),
            answer: LETTERS[pos],
            explanation: format!("Every entity has the attribute \"{correct}\"."),
        };
        item.validate()?;
        Ok(vec![item])
    }
}

fn entity_label(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn describe(i: usize, e: &CaptionedEntity) -> String {
    match &e.tags {
        Some(tags) if !tags.is_empty() => format!(
            "entity {} with caption \"{}\" and properties \"{}\"",
            entity_label(i),
            e.caption,
            tags.join(", ")
        ),
        _ => format!("entity {} with caption \"{}\"", entity_label(i), e.caption),
    }
}

fn join_and(parts: &[String]) -> String {
    match parts {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

const PROMPT_EXEMPLAR: &str = "Given entity A with caption \"A cat meowing and humans speaking on the background.\" with properties: agile, independent, and domesticated, entity B with caption \"Loud barking and traffic\" with properties aggressive, loud, and high energy, entity C with caption \"Birds chirping in a quiet forest\" and properties peaceful, wild, and vocal, and entity D with caption \"A bustling city street with honking cars\" and properties busy, noisy, and chaotic, you can generate a set of instruction answer pairs to find the commond point of the entities as follows:\n\
Example: Question: Which of the followings are the common point of the four entities. A. Rhythmic ocean waves crashing on the shore. B. Gentle rustling of leaves in a serene garden. C. Audible environmental sounds. D. Soft crackling of a campfire under a starry sky.  Answer: C. Explanation: The maximum common point among the four entities is the presence of ambient environmental sounds, which can be perceived audibly.\n";

/// Prompt for an external text generator asking for three question triplets about `group`.
pub fn render_prompt(group: &EntityGroup) -> String {
    let parts: Vec<String> = group
        .members
        .iter()
        .enumerate()
        .map(|(i, e)| describe(i, e))
        .collect();
    format!(
        "{PROMPT_EXEMPLAR}Generate three such Question, Answer, Explanation triplets for {}",
        join_and(&parts)
    )
}

/// First standalone letter from `A` to `D`, optionally followed by `.` or `)`.
pub fn extract_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len()).find_map(|i| {
        let c = chars[i];
        if !LETTERS.contains(&c) {
            return None;
        }
        let before_ok = i == 0 || !chars[i - 1].is_alphanumeric();
        let after_ok = chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        (before_ok && after_ok).then_some(c)
    })
}

fn find_option_markers(body: &str) -> Option<[usize; 4]> {
    let mut out = [0usize; 4];
    let mut from = 0;
    for (k, letter) in LETTERS.iter().enumerate() {
        let marker = format!("{letter}.");
        let pos = body[from..].match_indices(&marker).map(|(p, _)| p + from).find(|&p| {
            p == 0 || body[..p].ends_with(char::is_whitespace)
        })?;
        out[k] = pos;
        from = pos + marker.len();
    }
    Some(out)
}

/// Parses `Question: … A. … D. … Answer: X. Explanation: …` blocks.
pub fn parse_triplets(text: &str, group: &EntityGroup) -> Result<Vec<McqItem>, McubError> {
    let mut items = Vec::new();
    for (n, chunk) in text.split("Question:").skip(1).enumerate() {
        let err = |msg: &str| McubError::Parse(format!("triplet {}: {msg}", n + 1));
        let a_pos = chunk.find("Answer:").ok_or_else(|| err("missing Answer:"))?;
        let (body, rest) = chunk.split_at(a_pos);
        let rest = &rest["Answer:".len()..];
        let (answer_part, explanation) = match rest.find("Explanation:") {
            Some(e) => (&rest[..e], rest[e + "Explanation:".len()..].trim()),
            None => (rest, ""),
        };
        let answer = extract_letter(answer_part).ok_or_else(|| err("no answer letter"))?;
        let marks = find_option_markers(body).ok_or_else(|| err("missing options A-D"))?;
        let question = body[..marks[0]].trim().to_string();
        let options: Vec<String> = (0..4)
            .map(|k| {
                let end = if k < 3 { marks[k + 1] } else { body.len() };
                body[marks[k] + 2..end].trim().to_string()
            })
            .collect();
        let item = McqItem {
            member_ids: group.member_ids(),
            group: group.clone(),
            question,
            options,
            answer,
            explanation: explanation.to_string(),
        };
        item.validate().map_err(|e| err(&e.to_string()))?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(McubError::Parse("no Question: blocks found".into()));
    }
    Ok(items)
}

/// Runs `generator` over `groups` with at most `max_concurrency` workers; output follows group order.
pub fn generate_all(
    groups: &[EntityGroup],
    generator: &dyn QuestionGenerator,
    seed: u64,
    max_concurrency: usize,
) -> Result<Vec<McqItem>, McubError> {
    let slots: Vec<Mutex<Option<Result<Vec<McqItem>, McubError>>>> =
        groups.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = max_concurrency.clamp(1, groups.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= groups.len() {
                    break;
                }
                let r = generator.generate(&groups[i], seed);
                *slots[i].lock().expect("slot") = Some(r);
            });
        }
    });
    let mut out = Vec::new();
    for slot in slots {
        out.extend(slot.into_inner().expect("slot").expect("filled")?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub index: usize,
    pub gold: char,
    pub predicted: Option<char>,
    pub correct: bool,
    pub unparseable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub accuracy: f64,
    pub records: Vec<ScoreRecord>,
}

pub fn score_answers(items: &[McqItem], predictions: &[&str]) -> Result<ScoreReport, McubError> {
    if items.len() != predictions.len() {
        return Err(McubError::LengthMismatch {
            items: items.len(),
            predictions: predictions.len(),
        });
    }
    let records: Vec<ScoreRecord> = items
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(index, (item, pred))| {
            let predicted = extract_letter(pred);
            ScoreRecord {
                index,
                gold: item.answer,
                predicted,
                correct: predicted == Some(item.answer),
                unparseable: predicted.is_none(),
            }
        })
        .collect();
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(ScoreReport {
        accuracy: if records.is_empty() {
            0.0
        } else {
            correct as f64 / records.len() as f64
        },
        records,
    })
}

/// The four 3-modality subsets of a 4-modality set, in lexicographic order of the omitted index reversed.
pub fn mcub3_subsets(modalities: &[String]) -> Vec<Vec<String>> {
    (0..modalities.len())
        .rev()
        .map(|skip| {
            modalities
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != skip)
                .map(|(_, m)| m.clone())
                .collect()
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, McubError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| McubError::Json { line: i + 1, source }))
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

/// Groups entities by modality, rejecting empty captions and duplicate ids.
pub fn pools_by_modality(
    entities: Vec<CaptionedEntity>,
) -> Result<BTreeMap<String, Vec<CaptionedEntity>>, McubError> {
    let mut pools: BTreeMap<String, Vec<CaptionedEntity>> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for e in entities {
        if e.caption.trim().is_empty() {
            return Err(McubError::InvalidEntity(format!("{}:{} has an empty caption", e.modality, e.id)));
        }
        if !ids.insert((e.modality.clone(), e.id.clone())) {
            return Err(McubError::InvalidEntity(format!("duplicate id {}:{}", e.modality, e.id)));
        }
        pools.entry(e.modality.clone()).or_default().push(e);
    }
    Ok(pools)
}
