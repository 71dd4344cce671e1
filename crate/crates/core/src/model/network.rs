use std::collections::{BTreeMap, BTreeSet};

use super::layers::{
    self, AttnCache, EncoderCache, EncoderWeights, FfnCache, LnCache, TagWeights,
};
use super::linalg::{position_encoding, softmax_in_place, Matrix};
use super::{DecoupledLayerWeights, ModelError, Segment, SegmentedSequence, ToyMLLM};
use crate::params::{self, ATTN_ROLES, FFN_ROLES, LORA_A, LORA_B, TEXT_TAG};
use crate::tensor::Tensor;

/// A supervised position: index among the text positions and the expected token.
pub type Target = (usize, u32);

/// Gradients keyed by parameter name; the key set equals the requested trainable set.
pub type GradientMap = BTreeMap<String, Tensor>;

struct Block {
    ln1: (Vec<f64>, Vec<f64>),
    ln2: (Vec<f64>, Vec<f64>),
    /// Weight sets keyed by name suffix: `""` for coupled, `.text` / `.mod.<m>` otherwise.
    sets: BTreeMap<String, TagWeights>,
}

/// The model's parameters in `f64` with adapters folded into their base weights.
pub(crate) struct Prepared {
    d_model: usize,
    n_heads: usize,
    vocab: usize,
    decoupled: bool,
    embed: Matrix,
    head: Matrix,
    head_bias: Vec<f64>,
    ln_f: (Vec<f64>, Vec<f64>),
    blocks: Vec<Block>,
    encoders: BTreeMap<String, EncoderWeights>,
}

pub(crate) struct RawGrads {
    embed: Matrix,
    head: Matrix,
    head_bias: Vec<f64>,
    ln_f: (Vec<f64>, Vec<f64>),
    blocks: Vec<Block>,
    encoders: BTreeMap<String, EncoderWeights>,
}

struct BlockTrace {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ffn: FfnCache,
}

struct Trace {
    binding: Vec<usize>,
    keys: Vec<String>,
    tokens: Vec<(usize, u32)>,
    encoded: Vec<(usize, String, EncoderCache)>,
    blocks: Vec<BlockTrace>,
    ln_f: LnCache,
    final_hidden: Matrix,
    text_rows: Vec<usize>,
}

fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn effective(model: &ToyMLLM, name: &str) -> Result<Matrix, ModelError> {
    let p = model.params();
    let mut w = Matrix::from_tensor(p.require(name)?);
    if let (Some(cfg), Some(a), Some(b)) = (
        model.adapter(),
        p.get(&format!("{name}{LORA_A}")),
        p.get(&format!("{name}{LORA_B}")),
    ) {
        let (_, _, delta) = crate::tensor::adapter_delta(a, b, cfg.r, cfg.alpha)?;
        for (w, d) in w.data.iter_mut().zip(delta) {
            *w += d;
        }
    }
    Ok(w)
}

fn set_keys(model: &ToyMLLM) -> Vec<String> {
    if !model.decoupled() {
        return vec![String::new()];
    }
    let mut keys = vec![params::tag_suffix(TEXT_TAG)];
    for m in model.modalities() {
        let key = params::tag_suffix(m);
        if model
            .params()
            .contains(&format!("{}{key}", params::block_weight(0, "wq")))
            || model.config.n_layers == 0
        {
            keys.push(key);
        }
    }
    keys
}

impl Prepared {
    pub(crate) fn new(model: &ToyMLLM) -> Result<Self, ModelError> {
        let p = model.params();
        let cfg = &model.config;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let ln = |n: &str| -> Result<Vec<f64>, ModelError> {
                Ok(vec_of(p.require(&format!("llm.blocks.{i}.{n}"))?))
            };
            let mut sets = BTreeMap::new();
            for key in set_keys(model) {
                let w = |role: &str| effective(model, &format!("{}{key}", params::block_weight(i, role)));
                sets.insert(
                    key.clone(),
                    TagWeights {
                        wq: w("wq")?,
                        wk: w("wk")?,
                        wv: w("wv")?,
                        wo: w("wo")?,
                        w1: w("w1")?,
                        w2: w("w2")?,
                    },
                );
            }
            blocks.push(Block {
                ln1: (ln("ln1.gain")?, ln("ln1.bias")?),
                ln2: (ln("ln2.gain")?, ln("ln2.bias")?),
                sets,
            });
        }
        let mut encoders = BTreeMap::new();
        for m in model.modalities() {
            let get = |n: &str| p.require(n).map_err(ModelError::from);
            let proj_w = Matrix::from_tensor(get(&format!("proj.{m}.weight"))?);
            encoders.insert(
                m.clone(),
                EncoderWeights {
                    enc_w: Matrix::from_tensor(get(&format!("enc.{m}.weight"))?),
                    enc_b: vec_of(get(&format!("enc.{m}.bias"))?),
                    n_tokens: proj_w.rows / cfg.d_model,
                    proj_w,
                    proj_b: vec_of(get(&format!("proj.{m}.bias"))?),
                },
            );
        }
        Ok(Self {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            vocab: cfg.vocab_size,
            decoupled: model.decoupled(),
            embed: Matrix::from_tensor(p.require("llm.embed")?),
            head: Matrix::from_tensor(p.require("llm.head")?),
            head_bias: vec_of(p.require("llm.head_bias")?),
            ln_f: (
                vec_of(p.require("llm.ln_f.gain")?),
                vec_of(p.require("llm.ln_f.bias")?),
            ),
            blocks,
            encoders,
        })
    }

    fn key_for(&self, tag: &str) -> String {
        if self.decoupled {
            params::tag_suffix(tag)
        } else {
            String::new()
        }
    }

    pub(crate) fn layer_weights(
        &self,
        layer: usize,
        modalities: &BTreeSet<String>,
    ) -> Result<DecoupledLayerWeights, ModelError> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| ModelError::Config(format!("no layer {layer}")))?;
        let mut per_tag = BTreeMap::new();
        for tag in std::iter::once(TEXT_TAG).chain(modalities.iter().map(String::as_str)) {
            if let Some(w) = block.sets.get(&self.key_for(tag)) {
                per_tag.insert(tag.to_string(), w.clone());
            }
        }
        Ok(DecoupledLayerWeights { per_tag })
    }

    pub(crate) fn encode(&self, tag: &str, features: &[f32]) -> Result<Matrix, ModelError> {
        let enc = self
            .encoders
            .get(tag)
            .ok_or_else(|| ModelError::UnknownTag(tag.to_string()))?;
        if features.len() != enc.feature_dim() {
            return Err(ModelError::FeatureDim {
                tag: tag.to_string(),
                expected: enc.feature_dim(),
                got: features.len(),
            });
        }
        let f: Vec<f64> = features.iter().map(|&v| f64::from(v)).collect();
        Ok(enc.forward(&f).0)
    }

    fn run(&self, input: &SegmentedSequence) -> Result<(Matrix, Trace), ModelError> {
        let mut keys: Vec<String> = Vec::new();
        let mut binding = Vec::new();
        let mut parts = Vec::new();
        let mut tokens = Vec::new();
        let mut encoded = Vec::new();
        let mut text_rows = Vec::new();
        let mut row = 0usize;
        for seg in &input.segments {
            let key = self.key_for(seg.tag());
            if self.blocks.first().is_some_and(|b| !b.sets.contains_key(&key)) {
                return Err(ModelError::UnknownTag(seg.tag().to_string()));
            }
            let idx = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            };
            match seg {
                Segment::Text { tokens: toks } => {
                    let mut m = Matrix::zeros(toks.len(), self.d_model);
                    for (r, &t) in toks.iter().enumerate() {
                        if t as usize >= self.vocab {
                            return Err(ModelError::TokenOutOfRange(t));
                        }
                        m.row_mut(r).copy_from_slice(self.embed.row(t as usize));
                        tokens.push((row + r, t));
                        text_rows.push(row + r);
                    }
                    binding.extend(std::iter::repeat_n(idx, toks.len()));
                    row += toks.len();
                    parts.push(m);
                }
                Segment::Modality { tag, features } => {
                    let enc = self
                        .encoders
                        .get(tag)
                        .ok_or_else(|| ModelError::UnknownTag(tag.clone()))?;
                    if features.len() != enc.feature_dim() {
                        return Err(ModelError::FeatureDim {
                            tag: tag.clone(),
                            expected: enc.feature_dim(),
                            got: features.len(),
                        });
                    }
                    let f: Vec<f64> = features.iter().map(|&v| f64::from(v)).collect();
                    let (m, cache) = enc.forward(&f);
                    encoded.push((row, tag.clone(), cache));
                    binding.extend(std::iter::repeat_n(idx, m.rows));
                    row += m.rows;
                    parts.push(m);
                }
            }
        }
        if row == 0 {
            return Err(ModelError::EmptyInput);
        }
        let mut x = Matrix::vstack(&parts);
        for r in 0..x.rows {
            let pe = position_encoding(r, self.d_model);
            for (v, p) in x.row_mut(r).iter_mut().zip(pe) {
                *v += p;
            }
        }
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let bound: Vec<&TagWeights> = keys.iter().map(|k| &block.sets[k]).collect();
            let (h1, ln1) = layers::layer_norm_forward(&x, &block.ln1.0, &block.ln1.1);
            let (a, attn) = layers::attention_forward(&h1, &binding, &bound, self.n_heads, true);
            x.add_assign(&a, 1.0);
            let (h2, ln2) = layers::layer_norm_forward(&x, &block.ln2.0, &block.ln2.1);
            let (f, ffn) = layers::ffn_forward(&h2, &binding, &bound);
            x.add_assign(&f, 1.0);
            block_traces.push(BlockTrace {
                ln1,
                attn,
                ln2,
                ffn,
            });
        }
        let (hf, ln_f) = layers::layer_norm_forward(&x, &self.ln_f.0, &self.ln_f.1);
        let mut logits = Matrix::zeros(text_rows.len(), self.vocab);
        for (i, &r) in text_rows.iter().enumerate() {
            let mut l = self.head.matvec(hf.row(r));
            for (v, b) in l.iter_mut().zip(&self.head_bias) {
                *v += b;
            }
            logits.row_mut(i).copy_from_slice(&l);
        }
        let trace = Trace {
            binding,
            keys,
            tokens,
            encoded,
            blocks: block_traces,
            ln_f,
            final_hidden: hf,
            text_rows,
        };
        Ok((logits, trace))
    }

    pub(crate) fn logits(&self, input: &SegmentedSequence) -> Result<Matrix, ModelError> {
        Ok(self.run(input)?.0)
    }

    fn check_targets(logits: &Matrix, targets: &[Target], vocab: usize) -> Result<(), ModelError> {
        if targets.is_empty() {
            return Err(ModelError::EmptyTargets);
        }
        for &(pos, tok) in targets {
            if pos >= logits.rows {
                return Err(ModelError::TargetOutOfRange(pos));
            }
            if tok as usize >= vocab {
                return Err(ModelError::TokenOutOfRange(tok));
            }
        }
        Ok(())
    }

    pub(crate) fn loss(&self, input: &SegmentedSequence, targets: &[Target]) -> Result<f64, ModelError> {
        let logits = self.logits(input)?;
        Self::check_targets(&logits, targets, self.vocab)?;
        let mut total = 0.0;
        for &(pos, tok) in targets {
            let mut p = logits.row(pos).to_vec();
            softmax_in_place(&mut p);
            total -= p[tok as usize].ln();
        }
        Ok(total / targets.len() as f64)
    }

    pub(crate) fn zero_grads(&self) -> RawGrads {
        RawGrads {
            embed: Matrix::zeros(self.embed.rows, self.embed.cols),
            head: Matrix::zeros(self.head.rows, self.head.cols),
            head_bias: vec![0.0; self.head_bias.len()],
            ln_f: (vec![0.0; self.d_model], vec![0.0; self.d_model]),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: (vec![0.0; self.d_model], vec![0.0; self.d_model]),
                    ln2: (vec![0.0; self.d_model], vec![0.0; self.d_model]),
                    sets: b
                        .sets
                        .iter()
                        .map(|(k, w)| (k.clone(), TagWeights::zeros_like(w)))
                        .collect(),
                })
                .collect(),
            encoders: self
                .encoders
                .iter()
                .map(|(k, e)| (k.clone(), e.zeros_like()))
                .collect(),
        }
    }

    /// Adds `weight · ∂loss/∂θ` into `acc` and returns the unweighted loss.
    pub(crate) fn accumulate(
        &self,
        input: &SegmentedSequence,
        targets: &[Target],
        acc: &mut RawGrads,
        weight: f64,
    ) -> Result<f64, ModelError> {
        let (logits, trace) = self.run(input)?;
        Self::check_targets(&logits, targets, self.vocab)?;
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut dhidden = Matrix::zeros(trace.final_hidden.rows, self.d_model);
        for &(pos, tok) in targets {
            let mut p = logits.row(pos).to_vec();
            softmax_in_place(&mut p);
            loss -= p[tok as usize].ln() / n;
            p[tok as usize] -= 1.0;
            let dl: Vec<f64> = p.iter().map(|v| v * weight / n).collect();
            let r = trace.text_rows[pos];
            acc.head.add_outer(&dl, trace.final_hidden.row(r), 1.0);
            for (g, d) in acc.head_bias.iter_mut().zip(&dl) {
                *g += d;
            }
            let dh = self.head.matvec_t(&dl);
            for (g, d) in dhidden.row_mut(r).iter_mut().zip(dh) {
                *g += d;
            }
        }
        let mut dx = layers::layer_norm_backward(
            &dhidden,
            &trace.ln_f,
            &self.ln_f.0,
            &mut acc.ln_f.0,
            &mut acc.ln_f.1,
        );
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bt = &trace.blocks[i];
            let bound: Vec<&TagWeights> = trace.keys.iter().map(|k| &block.sets[k]).collect();
            let gblock = &mut acc.blocks[i];
            let mut gsets: Vec<TagWeights> = trace
                .keys
                .iter()
                .map(|k| TagWeights::zeros_like(&block.sets[k]))
                .collect();
            let dh2 = layers::ffn_backward(&dx, &bt.ffn, &trace.binding, &bound, &mut gsets);
            let dx1 = layers::layer_norm_backward(
                &dh2,
                &bt.ln2,
                &block.ln2.0,
                &mut gblock.ln2.0,
                &mut gblock.ln2.1,
            );
            dx.add_assign(&dx1, 1.0);
            let dh1 = layers::attention_backward(
                &dx,
                &bt.attn,
                &trace.binding,
                &bound,
                &mut gsets,
                self.n_heads,
            );
            let dx0 = layers::layer_norm_backward(
                &dh1,
                &bt.ln1,
                &block.ln1.0,
                &mut gblock.ln1.0,
                &mut gblock.ln1.1,
            );
            dx.add_assign(&dx0, 1.0);
            for (k, g) in trace.keys.iter().zip(gsets) {
                let dst = gblock.sets.get_mut(k).expect("key present");
                for role in ATTN_ROLES.iter().chain(FFN_ROLES.iter()) {
                    let m = match *role {
                        "wq" => (&mut dst.wq, &g.wq),
                        "wk" => (&mut dst.wk, &g.wk),
                        "wv" => (&mut dst.wv, &g.wv),
                        "wo" => (&mut dst.wo, &g.wo),
                        "w1" => (&mut dst.w1, &g.w1),
                        _ => (&mut dst.w2, &g.w2),
                    };
                    m.0.add_assign(m.1, 1.0);
                }
            }
        }
        for &(r, tok) in &trace.tokens {
            let src = dx.row(r).to_vec();
            for (g, d) in acc.embed.row_mut(tok as usize).iter_mut().zip(src) {
                *g += d;
            }
        }
        for (start, tag, cache) in &trace.encoded {
            let enc = &self.encoders[tag];
            let dout = dx.slice_rows(*start, start + enc.n_tokens);
            enc.backward(&dout, cache, acc.encoders.get_mut(tag).expect("encoder grads"));
        }
        Ok(loss)
    }

    /// Maps raw gradients onto parameter names, applying the adapter chain rule.
    pub(crate) fn named_grads(
        &self,
        model: &ToyMLLM,
        acc: &RawGrads,
        trainable: &BTreeSet<String>,
    ) -> Result<GradientMap, ModelError> {
        let mut out = GradientMap::new();
        let p = model.params();
        let tensor = |shape: &[usize], data: &[f64]| -> Result<Tensor, ModelError> {
            Ok(Tensor::new(
                shape.to_vec(),
                data.iter().map(|&v| v as f32).collect(),
            )?)
        };
        for name in trainable {
            let shape = p.require(name)?.shape().to_vec();
            let grad = match name.as_str() {
                "llm.embed" => tensor(&shape, &acc.embed.data)?,
                "llm.head" => tensor(&shape, &acc.head.data)?,
                "llm.head_bias" => tensor(&shape, &acc.head_bias)?,
                "llm.ln_f.gain" => tensor(&shape, &acc.ln_f.0)?,
                "llm.ln_f.bias" => tensor(&shape, &acc.ln_f.1)?,
                _ => self.named_grad(model, acc, name, &shape)?,
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn named_grad(
        &self,
        model: &ToyMLLM,
        acc: &RawGrads,
        name: &str,
        shape: &[usize],
    ) -> Result<Tensor, ModelError> {
        let to_tensor = |data: Vec<f64>| -> Result<Tensor, ModelError> {
            Ok(Tensor::new(
                shape.to_vec(),
                data.into_iter().map(|v| v as f32).collect(),
            )?)
        };
        if let Some(m) = params::modality_component(name) {
            let g = &acc.encoders[m];
            let leaf = name.rsplit('.').next().unwrap_or_default();
            let data = match (name.starts_with("enc."), leaf) {
                (true, "weight") => g.enc_w.data.clone(),
                (true, "bias") => g.enc_b.clone(),
                (false, "weight") => g.proj_w.data.clone(),
                (false, "bias") => g.proj_b.clone(),
                _ => return Err(ModelError::UnknownParameter(name.to_string())),
            };
            return to_tensor(data);
        }
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() < 4 || parts[0] != "llm" || parts[1] != "blocks" {
            return Err(ModelError::UnknownParameter(name.to_string()));
        }
        let layer: usize = parts[2]
            .parse()
            .map_err(|_| ModelError::UnknownParameter(name.to_string()))?;
        let gblock = &acc.blocks[layer];
        match (parts[3], parts.get(4).copied()) {
            ("ln1", Some("gain")) => return to_tensor(gblock.ln1.0.clone()),
            ("ln1", Some("bias")) => return to_tensor(gblock.ln1.1.clone()),
            ("ln2", Some("gain")) => return to_tensor(gblock.ln2.0.clone()),
            ("ln2", Some("bias")) => return to_tensor(gblock.ln2.1.clone()),
            _ => {}
        }
        let weight_name = params::adapter_base(name).unwrap_or(name);
        let role = weight_name.split('.').nth(4).unwrap_or_default();
        let prefix = params::block_weight(layer, role);
        let key = &weight_name[prefix.len()..];
        let dw = gblock
            .sets
            .get(key)
            .map(|s| s.role(role))
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        if name.ends_with(LORA_A) || name.ends_with(LORA_B) {
            let cfg = model.adapter().expect("adapter params imply a config");
            let s = cfg.scale();
            let a = Matrix::from_tensor(model.params().require(&format!("{weight_name}{LORA_A}"))?);
            let b = Matrix::from_tensor(model.params().require(&format!("{weight_name}{LORA_B}"))?);
            let g = if name.ends_with(LORA_A) {
                b.transpose().matmul(dw)
            } else {
                dw.matmul(&a.transpose())
            };
            return to_tensor(g.data.into_iter().map(|v| v * s).collect());
        }
        to_tensor(dw.data.clone())
    }
}

pub(crate) fn check_trainable(model: &ToyMLLM, trainable: &BTreeSet<String>) -> Result<(), ModelError> {
    for name in trainable {
        if !model.params().contains(name) {
            return Err(ModelError::UnknownParameter(name.clone()));
        }
    }
    Ok(())
}
