//! Greedy-decoding accuracy of a checkpoint on a task dataset.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dataset::TaskExample;
use super::{HarnessError, LETTER_BASE};
use crate::checkpoint::Checkpoint;
use crate::model::{argmax_lowest, Runner, ToyMLLM, EOS_TOKEN};

/// Decoding budget when looking for an option letter.
pub const LETTER_DECODE_LIMIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extraction {
    /// The first decoded token is the prediction.
    ArgmaxToken,
    /// The first decoded token in the letter range is the prediction.
    OptionLetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub n: usize,
    pub correct: usize,
    pub unparseable: usize,
}

pub fn is_letter(token: u32) -> bool {
    (LETTER_BASE..LETTER_BASE + 4).contains(&token)
}

/// Predicted answer token, or `None` when nothing could be extracted.
pub fn predict(runner: &Runner, example: &TaskExample, extraction: Extraction) -> Result<Option<u32>, HarnessError> {
    let mut seq = example.input.clone();
    let limit = match extraction {
        Extraction::ArgmaxToken => 1,
        Extraction::OptionLetter => LETTER_DECODE_LIMIT,
    };
    for _ in 0..limit {
        let logits = runner.logits(&seq)?;
        let tok = argmax_lowest(logits.row(logits.rows - 1)) as u32;
        match extraction {
            Extraction::ArgmaxToken => return Ok(Some(tok)),
            Extraction::OptionLetter if is_letter(tok) => return Ok(Some(tok)),
            Extraction::OptionLetter if tok == EOS_TOKEN => return Ok(None),
            Extraction::OptionLetter => seq.push_text_token(tok),
        }
    }
    Ok(None)
}

pub fn check_modalities(ckpt: &Checkpoint, data: &[TaskExample]) -> Result<(), HarnessError> {
    let needed: BTreeSet<&str> = data.iter().flat_map(|e| e.input.modality_tags()).collect();
    let missing: Vec<String> = needed
        .into_iter()
        .filter(|t| !ckpt.modalities.contains(*t))
        .map(String::from)
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::MissingModalities(missing))
    }
}

pub fn evaluate(ckpt: &Checkpoint, data: &[TaskExample], extraction: Extraction) -> Result<EvalOutcome, HarnessError> {
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    check_modalities(ckpt, data)?;
    let model = ToyMLLM::from_checkpoint(ckpt.clone())?;
    let runner = model.runner()?;
    let run = |e: &TaskExample| predict(&runner, e, extraction).map(|p| (p, e.answer));
    #[cfg(feature = "parallel")]
    let preds: Vec<(Option<u32>, u32)> = {
        use rayon::prelude::*;
        data.par_iter().map(run).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let preds: Vec<(Option<u32>, u32)> = data.iter().map(run).collect::<Result<_, _>>()?;
    let correct = preds.iter().filter(|(p, a)| *p == Some(*a)).count();
    let unparseable = preds.iter().filter(|(p, _)| p.is_none()).count();
    Ok(EvalOutcome {
        accuracy: correct as f64 / data.len() as f64,
        n: data.len(),
        correct,
        unparseable,
    })
}

/// Extraction matching the answer format of a dataset.
pub fn extraction_for(format: super::AnswerFormat) -> Extraction {
    match format {
        super::AnswerFormat::ConceptToken => Extraction::ArgmaxToken,
        super::AnswerFormat::OptionLetter => Extraction::OptionLetter,
    }
}
