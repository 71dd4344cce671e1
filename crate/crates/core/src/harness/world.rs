//! Per-modality synthetic feature generators over a shared concept set.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::mcub::fnv1a64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_concepts: usize,
    pub sigma: f64,
    pub feature_dims: BTreeMap<String, usize>,
    /// When set, every modality maps concepts in disjoint pairs to identical
    /// features, so one modality alone cannot tell the two apart.
    pub confusable_pairs: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_concepts: 8,
            sigma: 0.1,
            feature_dims: BTreeMap::from([("image".into(), 16), ("audio".into(), 16)]),
            confusable_pairs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityGenerator {
    pub feature_dim: usize,
    /// Row-major `feature_dim × n_concepts`, unit-variance entries scaled by `1/sqrt(feature_dim)`.
    pub matrix: Vec<f32>,
    /// `partner[c]` is the concept sharing `c`'s features (`c` itself when unpaired).
    pub partner: Vec<usize>,
}

impl ModalityGenerator {
    pub fn column(&self, concept: usize) -> Vec<f32> {
        let n = self.partner.len();
        let src = concept.min(self.partner[concept]);
        (0..self.feature_dim).map(|r| self.matrix[r * n + src]).collect()
    }

    pub fn content_hash(&self) -> u64 {
        let bytes: Vec<u8> = self.matrix.iter().flat_map(|v| v.to_le_bytes()).collect();
        fnv1a64(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub n_concepts: usize,
    pub sigma: f64,
    pub modalities: BTreeMap<String, ModalityGenerator>,
}

fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(label.as_bytes()));
    rng
}

/// Random perfect matching avoiding every pair already in `used`.
fn disjoint_matching(
    n: usize,
    used: &BTreeSet<(usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    for _ in 0..1000 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut partner = vec![0; n];
        let mut ok = true;
        for pair in order.chunks(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if used.contains(&(a, b)) {
                ok = false;
                break;
            }
            partner[a] = b;
            partner[b] = a;
        }
        if ok {
            return Some(partner);
        }
    }
    None
}

pub fn build_synthetic_world(seed: u64, config: &WorldConfig) -> Result<SyntheticWorld, HarnessError> {
    if config.n_concepts < 4 {
        return Err(HarnessError::Config(format!(
            "n_concepts must be >= 4, got {}",
            config.n_concepts
        )));
    }
    if config.confusable_pairs && config.n_concepts % 2 != 0 {
        return Err(HarnessError::Config(
            "confusable pairs need an even number of concepts".into(),
        ));
    }
    if !(config.sigma >= 0.0 && config.sigma.is_finite()) {
        return Err(HarnessError::Config(format!("invalid sigma {}", config.sigma)));
    }
    let n = config.n_concepts;
    let mut used = BTreeSet::new();
    let mut pairing_rng = stream_rng(seed, "pairing");
    let mut modalities = BTreeMap::new();
    for (name, &dim) in &config.feature_dims {
        if dim == 0 {
            return Err(HarnessError::Config(format!("modality {name:?} has feature_dim 0")));
        }
        let mut rng = stream_rng(seed, name);
        let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let matrix = (0..dim * n).map(|_| dist.sample(&mut rng) as f32).collect();
        let partner = if config.confusable_pairs {
            let p = disjoint_matching(n, &used, &mut pairing_rng).ok_or_else(|| {
                HarnessError::Config("too many modalities for disjoint concept pairings".into())
            })?;
            for (a, &b) in p.iter().enumerate() {
                used.insert((a.min(b), a.max(b)));
            }
            p
        } else {
            (0..n).collect()
        };
        modalities.insert(
            name.clone(),
            ModalityGenerator {
                feature_dim: dim,
                matrix,
                partner,
            },
        );
    }
    Ok(SyntheticWorld {
        seed,
        n_concepts: n,
        sigma: config.sigma,
        modalities,
    })
}

impl SyntheticWorld {
    pub fn generator(&self, modality: &str) -> Result<&ModalityGenerator, HarnessError> {
        self.modalities
            .get(modality)
            .ok_or_else(|| HarnessError::UnknownModality(modality.to_string()))
    }

    /// Features for a set of concepts present at once (summed), plus noise.
    pub fn features(
        &self,
        modality: &str,
        concepts: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f32>, HarnessError> {
        let g = self.generator(modality)?;
        let mut f = vec![0.0f64; g.feature_dim];
        for &c in concepts {
            for (v, x) in f.iter_mut().zip(g.column(c)) {
                *v += f64::from(x);
            }
        }
        if self.sigma > 0.0 {
            let noise = Normal::new(0.0, self.sigma / (g.feature_dim as f64).sqrt())
                .expect("positive std");
            for v in &mut f {
                *v += noise.sample(rng);
            }
        }
        Ok(f.into_iter().map(|v| v as f32).collect())
    }

    /// Concepts that `modality` cannot tell apart from `concept`.
    pub fn confusable_with(&self, modality: &str, concept: usize) -> Result<usize, HarnessError> {
        Ok(self.generator(modality)?.partner[concept])
    }
}
