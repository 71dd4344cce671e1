//! Named parameter maps and the parameter naming convention.
//!
//! Names are dotted paths whose segments match `[a-z0-9_]+`:
//!
//! * `enc.<m>.*` modality encoder, `proj.<m>.*` projector
//! * `llm.embed`, `llm.head`, `llm.head_bias`, layer norms `llm.*.ln*`
//! * `llm.blocks.<i>.attn.{wq,wk,wv,wo}[.text|.mod.<m>]`
//! * `llm.blocks.<i>.ffn.{w1,w2}[.text|.mod.<m>]`
//! * adapters append `.lora_a` / `.lora_b` to the weight they modify.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::Tensor;

pub const LORA_A: &str = ".lora_a";
pub const LORA_B: &str = ".lora_b";
pub const TEXT_TAG: &str = "text";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("invalid parameter name {0:?}")]
    InvalidName(String),
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("missing parameter {0:?}")]
    Missing(String),
}

/// Ordered map from parameter name to tensor. Iteration is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterMap {
    entries: BTreeMap<String, Tensor>,
}

pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.split('.').all(|seg| {
            !seg.is_empty()
                && seg
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        })
}

impl ParameterMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new entry; the name must be valid and not yet present.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if !is_valid_name(&name) {
            return Err(ParamError::InvalidName(name));
        }
        if self.entries.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Inserts or replaces an entry.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if !is_valid_name(&name) {
            return Err(ParamError::InvalidName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.get(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

impl<'a> IntoIterator for &'a ParameterMap {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Weight roles inside one transformer block.
pub const ATTN_ROLES: [&str; 4] = ["wq", "wk", "wv", "wo"];
pub const FFN_ROLES: [&str; 2] = ["w1", "w2"];

/// Base name of an attention/FFN weight, without any tag suffix.
pub fn block_weight(layer: usize, role: &str) -> String {
    let group = if FFN_ROLES.contains(&role) { "ffn" } else { "attn" };
    format!("llm.blocks.{layer}.{group}.{role}")
}

/// Suffix selecting the weight set for a routing tag in a decoupled model.
pub fn tag_suffix(tag: &str) -> String {
    if tag == TEXT_TAG {
        ".text".to_string()
    } else {
        format!(".mod.{tag}")
    }
}

/// True for `llm.blocks.<i>.attn.*` and `llm.blocks.<i>.ffn.*` names (adapters included).
pub fn is_block_linear(name: &str) -> bool {
    let mut parts = name.split('.');
    matches!(
        (parts.next(), parts.next(), parts.next(), parts.next()),
        (Some("llm"), Some("blocks"), Some(i), Some("attn" | "ffn")) if i.bytes().all(|b| b.is_ascii_digit())
    )
}

/// Strips a `.lora_a` / `.lora_b` suffix.
pub fn adapter_base(name: &str) -> Option<&str> {
    name.strip_suffix(LORA_A)
        .or_else(|| name.strip_suffix(LORA_B))
}

/// Routing tag encoded in a decoupled block weight name: `Some("text")`,
/// `Some(<m>)` for `.mod.<m>`, `None` when the name carries no tag.
pub fn weight_tag(name: &str) -> Option<&str> {
    let base = adapter_base(name).unwrap_or(name);
    if base.ends_with(".text") {
        return Some(TEXT_TAG);
    }
    let idx = base.rfind(".mod.")?;
    let tag = &base[idx + 5..];
    (!tag.is_empty() && !tag.contains('.')).then_some(tag)
}

/// Modality owning an `enc.<m>.*` or `proj.<m>.*` parameter.
pub fn modality_component(name: &str) -> Option<&str> {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("enc" | "proj"), Some(m)) => Some(m),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_validation() {
        assert!(is_valid_name("llm.blocks.0.attn.wq.mod.vision"));
        assert!(is_valid_name("enc.point_cloud.weight"));
        assert!(!is_valid_name("llm..embed"));
        assert!(!is_valid_name("LLM.embed"));
        assert!(!is_valid_name("llm.embed."));
        assert!(!is_valid_name(""));
        let mut m = ParameterMap::new();
        assert!(m.insert("bad name", Tensor::scalar(0.0)).is_err());
        m.insert("b", Tensor::scalar(1.0)).unwrap();
        m.insert("a", Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            m.insert("a", Tensor::scalar(2.0)),
            Err(ParamError::Duplicate("a".into()))
        );
        let names: Vec<_> = m.names().cloned().collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn tags_and_roles() {
        assert_eq!(block_weight(1, "w2"), "llm.blocks.1.ffn.w2");
        assert_eq!(block_weight(0, "wq"), "llm.blocks.0.attn.wq");
        assert_eq!(tag_suffix("text"), ".text");
        assert_eq!(tag_suffix("audio"), ".mod.audio");
        assert_eq!(weight_tag("llm.blocks.0.attn.wq.mod.audio.lora_b"), Some("audio"));
        assert_eq!(weight_tag("llm.blocks.0.attn.wq.text"), Some("text"));
        assert_eq!(weight_tag("llm.blocks.0.attn.wq"), None);
        assert!(is_block_linear("llm.blocks.12.ffn.w1.lora_a"));
        assert!(!is_block_linear("llm.blocks.0.ln1.gain"));
        assert!(!is_block_linear("enc.vision.weight"));
        assert_eq!(modality_component("proj.audio.bias"), Some("audio"));
        assert_eq!(modality_component("llm.embed"), None);
    }
}
