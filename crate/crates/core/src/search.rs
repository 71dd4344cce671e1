//! Exhaustive search over merge coefficients on the grid `{1/N, 2/N, …, N/N}^N`.

use std::collections::HashMap;
use std::fmt::Display;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::compose::{self, ComposeError, MergeSpec};

pub const MAX_MODELS: usize = 6;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("grid size N={0} outside 1..={MAX_MODELS}")]
    OutOfRange(usize),
    #[error("evaluation failed at lambda {lambda:?}: {message}")]
    Eval { lambda: Vec<f64>, message: String },
    #[error("non-finite score {score} at lambda {lambda:?}")]
    NonFinite { lambda: Vec<f64>, score: f64 },
    #[error("expected {expected} checkpoints for this grid, got {got}")]
    ModelCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub n_models: usize,
    /// All `N^N` vectors, lexicographic with the first coordinate most significant.
    pub candidates: Vec<Vec<f64>>,
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        (1..=self.n_models)
            .map(|k| k as f64 / self.n_models as f64)
            .collect()
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.n_models as f64; self.n_models]
    }
}

pub fn enumerate_grid(n: usize) -> Result<LambdaGrid, SearchError> {
    if !(1..=MAX_MODELS).contains(&n) {
        return Err(SearchError::OutOfRange(n));
    }
    let total = n.pow(n as u32);
    let candidates = (0..total)
        .map(|mut idx| {
            let mut digits = vec![0usize; n];
            for d in digits.iter_mut().rev() {
                *d = idx % n;
                idx /= n;
            }
            digits
                .into_iter()
                .map(|k| (k + 1) as f64 / n as f64)
                .collect()
        })
        .collect();
    Ok(LambdaGrid {
        n_models: n,
        candidates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLambda {
    pub lambda: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_lambda: Vec<f64>,
    pub best_score: f64,
    pub table: Vec<ScoredLambda>,
    /// True when several candidates shared the best score.
    pub tie_rule_applied: bool,
}

/// Evaluates every candidate once and returns the argmax.
///
/// Ties go to the uniform vector when it is among the best, otherwise to the
/// earliest candidate in enumeration order.
pub fn search<E: Display>(
    grid: &LambdaGrid,
    mut eval_fn: impl FnMut(&[f64]) -> Result<f64, E>,
) -> Result<SearchResult, SearchError> {
    let mut table = Vec::with_capacity(grid.candidates.len());
    for lambda in &grid.candidates {
        let score = eval_fn(lambda).map_err(|e| SearchError::Eval {
            lambda: lambda.clone(),
            message: e.to_string(),
        })?;
        if !score.is_finite() {
            return Err(SearchError::NonFinite {
                lambda: lambda.clone(),
                score,
            });
        }
        table.push(ScoredLambda {
            lambda: lambda.clone(),
            score,
        });
    }
    Ok(select(grid, table))
}

fn select(grid: &LambdaGrid, table: Vec<ScoredLambda>) -> SearchResult {
    let best_score = table
        .iter()
        .map(|s| s.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<&ScoredLambda> = table.iter().filter(|s| s.score == best_score).collect();
    let uniform = grid.uniform();
    let best = tied
        .iter()
        .find(|s| s.lambda == uniform)
        .unwrap_or(&tied[0]);
    SearchResult {
        best_lambda: best.lambda.clone(),
        best_score,
        tie_rule_applied: tied.len() > 1,
        table,
    }
}

/// Parallel variant of [`search`]; the table is still assembled in enumeration order.
#[cfg(feature = "parallel")]
pub fn search_parallel<E: Display + Send>(
    grid: &LambdaGrid,
    eval_fn: impl Fn(&[f64]) -> Result<f64, E> + Sync,
) -> Result<SearchResult, SearchError> {
    use rayon::prelude::*;
    let scores: Vec<Result<f64, E>> = grid.candidates.par_iter().map(|l| eval_fn(l)).collect();
    let mut it = scores.into_iter();
    search(grid, |_| it.next().expect("one score per candidate"))
}

/// Memoizes an evaluation function by lambda vector.
pub struct CachedEval<F> {
    inner: F,
    cache: HashMap<Vec<u64>, f64>,
    pub calls: usize,
}

impl<F, E> CachedEval<F>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
{
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
            calls: 0,
        }
    }

    pub fn eval(&mut self, lambda: &[f64]) -> Result<f64, E> {
        let key: Vec<u64> = lambda.iter().map(|v| v.to_bits()).collect();
        if let Some(&s) = self.cache.get(&key) {
            return Ok(s);
        }
        self.calls += 1;
        let s = (self.inner)(lambda)?;
        self.cache.insert(key, s);
        Ok(s)
    }
}

/// Searches the grid by composing `checkpoints` with the weighted strategy and scoring each composite.
pub fn search_composition<E: Display>(
    checkpoints: &[&Checkpoint],
    grid: &LambdaGrid,
    modality_coeffs: &std::collections::BTreeMap<String, f64>,
    mut score: impl FnMut(&Checkpoint) -> Result<f64, E>,
) -> Result<SearchResult, SearchError> {
    if checkpoints.len() != grid.n_models {
        return Err(SearchError::ModelCount {
            expected: grid.n_models,
            got: checkpoints.len(),
        });
    }
    search(grid, |lambda| -> Result<f64, String> {
        let mut spec = MergeSpec::weighted(lambda.to_vec());
        spec.modality_coeffs = modality_coeffs.clone();
        let (composite, _) =
            compose::compose(checkpoints, &spec).map_err(|e: ComposeError| e.to_string())?;
        score(&composite).map_err(|e| e.to_string())
    })
}
