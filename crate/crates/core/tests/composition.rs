mod common;

use std::collections::BTreeMap;

use common::*;
use modelcompose::compose::{
    compose, compose_proj_only, decouple_inference, diff_checkpoints, merge_adapters_then_materialize,
    partition_parameters, ComposeError, MergeSpec,
};
use modelcompose::model::init::attach_adapters;
use modelcompose::{AdapterConfig, Checkpoint, Segment, SegmentedSequence, Tensor, ToyMLLM};
use proptest::prelude::*;
use rand::Rng;

fn lora_pairs(ck: &Checkpoint) -> Vec<String> {
    ck.params
        .names()
        .filter_map(|n| n.strip_suffix(".lora_a").map(String::from))
        .collect()
}

/// `W + (alpha/r)·B·A` with explicit loops.
fn materialize_by_hand(ck: &Checkpoint) -> Checkpoint {
    let cfg = ck.adapter.expect("adapter config");
    let s = cfg.alpha / cfg.r as f64;
    let mut out = ck.clone();
    out.adapter = None;
    for base in lora_pairs(ck) {
        let w = ck.params.get(&base).unwrap();
        let a = ck.params.get(&format!("{base}.lora_a")).unwrap();
        let b = ck.params.get(&format!("{base}.lora_b")).unwrap();
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0f64;
                for k in 0..cfg.r {
                    acc += f64::from(b.data()[i * cfg.r + k]) * f64::from(a.data()[k * cols + j]);
                }
                data.push((f64::from(w.data()[i * cols + j]) + s * acc) as f32);
            }
        }
        out.params.set(base.clone(), Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        out.params.remove(&format!("{base}.lora_a"));
        out.params.remove(&format!("{base}.lora_b"));
    }
    out
}

fn adapter_constituent(base: &Checkpoint, modality: &str, cfg: AdapterConfig, seed: u64) -> Checkpoint {
    let mcfg = small_config(8);
    let mut ck = base.clone();
    modelcompose::model::init::attach_modality(&mut ck, &mcfg, modality, 5, seed).unwrap();
    attach_adapters(&mut ck, cfg, seed, |_| true).unwrap();
    randomize(&mut ck, |n| n.ends_with(".lora_b"), 0.05, seed + 1);
    ck
}

fn joint_input(r: &mut rand_chacha::ChaCha8Rng, mods: &[&str]) -> SegmentedSequence {
    let mut segs = vec![Segment::text(vec![r.random_range(0..24)])];
    for m in mods {
        segs.push(Segment::modality(*m, random_features(r, 5)));
    }
    segs.push(Segment::text(vec![r.random_range(0..24), r.random_range(0..24)]));
    SegmentedSequence::new(segs)
}

#[test]
fn naive_merge_of_identical_models_is_identity() {
    let cfg = small_config(16);
    let ck = model_with(&cfg, 3, &["image"]);
    let (comp, report) = compose(&[&ck, &ck], &MergeSpec::naive()).unwrap();
    assert_eq!(report.n_unique, 0);
    assert_eq!(report.n_common_groups, ck.params.len());
    let a = ToyMLLM::from_checkpoint(ck).unwrap();
    let b = ToyMLLM::from_checkpoint(comp).unwrap();
    let mut r = rng(0);
    for _ in 0..20 {
        let x = random_input(&mut r, &a);
        assert!(a.forward(&x).unwrap().max_abs_diff(&b.forward(&x).unwrap()) <= 1e-6);
    }
}

#[test]
fn partition_by_name() {
    let cfg = small_config(8);
    let base = model_with(&cfg, 1, &[]);
    let mut img = base.clone();
    modelcompose::model::init::attach_modality(&mut img, &cfg, "image", 5, 2).unwrap();
    let mut aud = base.clone();
    modelcompose::model::init::attach_modality(&mut aud, &cfg, "audio", 5, 3).unwrap();
    let p = partition_parameters(&[&img, &aud]).unwrap();
    assert_eq!(p.unique.len(), 8);
    assert!(p.unique.iter().all(|(i, n)| (*i == 0) == n.contains("image")));
    assert_eq!(p.common_groups.len(), base.params.len());
    assert!(p.common_groups.values().all(|m| m.len() == 2));
}

#[test]
fn weighted_merge_applies_coefficients_literally() {
    let cfg = small_config(8);
    let mut a = model_with(&cfg, 1, &["image"]);
    let mut b = a.clone();
    b.modalities.clear();
    b.params.retain(|n| n.starts_with("llm."));
    randomize(&mut a, |n| n.starts_with("llm."), 0.5, 10);
    randomize(&mut b, |n| n.starts_with("llm."), 0.5, 11);
    let (c, _) = compose(&[&a, &b], &MergeSpec::weighted(vec![1.0, 1.0])).unwrap();
    let name = "llm.blocks.0.attn.wq";
    for ((x, y), z) in a.params.get(name).unwrap().data().iter()
        .zip(b.params.get(name).unwrap().data())
        .zip(c.params.get(name).unwrap().data())
    {
        assert_eq!(*z, (f64::from(*x) + f64::from(*y)) as f32);
    }
    assert_eq!(c.params.get("enc.image.weight"), a.params.get("enc.image.weight"));
}

#[test]
fn validation_errors() {
    let cfg = small_config(8);
    let a = model_with(&cfg, 1, &["image"]);
    let other_base = model_with(&cfg, 2, &["audio"]);
    match compose(&[&a, &other_base], &MergeSpec::naive()) {
        Err(ComposeError::BaseMismatch { first, other }) => {
            assert_eq!(first, a.base_id);
            assert_eq!(other, other_base.base_id);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(compose(&[], &MergeSpec::naive()), Err(ComposeError::NoCheckpoints)));
    assert!(matches!(
        compose(&[&a, &a], &MergeSpec::weighted(vec![1.0])),
        Err(ComposeError::CoeffCount { expected: 2, got: 1 })
    ));
    let mut spec = MergeSpec::weighted(vec![]);
    spec.coeffs = None;
    assert!(matches!(compose(&[&a], &spec), Err(ComposeError::MissingCoefficients)));
    let dec = decouple_inference(&a, "image").unwrap();
    assert!(matches!(compose(&[&a, &dec], &MergeSpec::naive()), Err(ComposeError::MixedDecoupling)));
    assert!(matches!(decouple_inference(&dec, "image"), Err(ComposeError::AlreadyDecoupled)));
    assert!(matches!(decouple_inference(&a, "audio"), Err(ComposeError::UnknownModality(_))));
    let mut wide = a.clone();
    wide.params.set("enc.image.bias", Tensor::zeros(vec![7])).unwrap();
    assert!(matches!(compose(&[&a, &wide], &MergeSpec::naive()), Err(ComposeError::ShapeConflict { .. })));
}

#[test]
fn proj_only_is_bitwise_pass_through() {
    let cfg = small_config(8);
    let base = model_with(&cfg, 4, &[]);
    let mut img = base.clone();
    modelcompose::model::init::attach_modality(&mut img, &cfg, "image", 5, 20).unwrap();
    let mut aud = base.clone();
    modelcompose::model::init::attach_modality(&mut aud, &cfg, "audio", 5, 21).unwrap();
    randomize(&mut img, |n| n.starts_with("proj."), 0.3, 1);
    let comp = compose_proj_only(&base, &[&img, &aud]).unwrap();
    let (via_compose, _) = compose(&[&img, &aud], &MergeSpec::proj_only()).unwrap();
    assert_eq!(comp, via_compose);
    let c = ToyMLLM::from_checkpoint(comp).unwrap();
    let m = ToyMLLM::from_checkpoint(img.clone()).unwrap();
    let mut r = rng(3);
    for _ in 0..20 {
        let x = joint_input(&mut r, &["image"]);
        assert_eq!(c.forward(&x).unwrap(), m.forward(&x).unwrap());
    }
    let mut tuned = img.clone();
    randomize(&mut tuned, |n| n == "llm.head_bias", 0.1, 2);
    assert!(matches!(compose_proj_only(&base, &[&tuned]), Err(ComposeError::NotFrozen { .. })));
}

#[test]
fn decoupled_merge_keeps_modality_weights_unique() {
    let cfg = small_config(8);
    let base = model_with(&cfg, 5, &[]);
    let mut img = base.clone();
    modelcompose::model::init::attach_modality(&mut img, &cfg, "image", 5, 1).unwrap();
    let mut aud = base.clone();
    modelcompose::model::init::attach_modality(&mut aud, &cfg, "audio", 5, 2).unwrap();
    let mut img = decouple_inference(&img, "image").unwrap();
    let aud = decouple_inference(&aud, "audio").unwrap();
    randomize(&mut img, |n| n.contains(".mod.image"), 0.3, 4);
    let mut spec = MergeSpec::naive();
    spec.modality_coeffs = BTreeMap::from([("image".to_string(), 0.5)]);
    let (comp, report) = compose(&[&img, &aud], &spec).unwrap();
    assert!(report.groups.iter().all(|g| !g.name.contains(".mod.")));
    let name = "llm.blocks.1.ffn.w1.mod.image";
    for (x, y) in img.params.get(name).unwrap().data().iter().zip(comp.params.get(name).unwrap().data()) {
        assert_eq!(*y, (f64::from(*x) * 0.5) as f32);
    }
    assert_eq!(comp.params.get("llm.blocks.1.ffn.w1.mod.audio"), aud.params.get("llm.blocks.1.ffn.w1.mod.audio"));
    assert!(comp.decoupled);
    let model = ToyMLLM::from_checkpoint(comp).unwrap();
    let x = joint_input(&mut rng(0), &["image", "audio"]);
    assert!(model.forward(&x).is_ok());
}

#[test]
fn adapter_merge_matches_full_weight_merge() {
    let base = model_with(&small_config(8), 6, &[]);
    for case in 0..10u64 {
        let cfg = if case == 0 {
            AdapterConfig { r: 128, alpha: 256.0 }
        } else {
            AdapterConfig { r: 1 + case as usize, alpha: 2.0 * case as f64 }
        };
        let a = adapter_constituent(&base, "image", cfg, 100 + case);
        let b = adapter_constituent(&base, "audio", cfg, 200 + case);
        let specs = [MergeSpec::naive(), MergeSpec::weighted(vec![0.25, 0.75])];
        for spec in specs {
            let delta = merge_adapters_then_materialize(&[&a, &b], &spec).unwrap();
            let (full, _) = compose(&[&materialize_by_hand(&a), &materialize_by_hand(&b)], &spec).unwrap();
            let d = diff_checkpoints(&delta, &full);
            assert!(d.only_a.is_empty() && d.only_b.is_empty());
            for s in d.shared {
                assert!(s.max_abs_diff.unwrap() <= 1e-6, "{}: {:?}", s.name, s.max_abs_diff);
            }
        }
    }
}

#[test]
fn adapter_merge_rejects_diverged_bases() {
    let base = model_with(&small_config(8), 6, &[]);
    let cfg = AdapterConfig { r: 2, alpha: 4.0 };
    let a = adapter_constituent(&base, "image", cfg, 1);
    let mut b = adapter_constituent(&base, "audio", cfg, 2);
    randomize(&mut b, |n| n == "llm.blocks.0.attn.wq", 0.1, 3);
    assert!(matches!(compose(&[&a, &b], &MergeSpec::naive()), Err(ComposeError::AdapterMismatch(_))));
    let c = adapter_constituent(&base, "audio", AdapterConfig { r: 3, alpha: 4.0 }, 2);
    assert!(matches!(compose(&[&a, &c], &MergeSpec::naive()), Err(ComposeError::AdapterMismatch(_))));
}

#[test]
fn decoupled_inference_conversion_preserves_function() {
    let mcfg = small_config(16);
    let base = model_with(&mcfg, 8, &["image"]);
    let mut ck = base.clone();
    attach_adapters(&mut ck, AdapterConfig { r: 2, alpha: 2.0 }, 1, |_| true).unwrap();
    randomize(&mut ck, |n| n.ends_with(".lora_b"), 0.1, 5);
    for src in [base, ck] {
        let dec = decouple_inference(&src, "image").unwrap();
        let a = ToyMLLM::from_checkpoint(src).unwrap();
        let b = ToyMLLM::from_checkpoint(dec).unwrap();
        let mut r = rng(9);
        for _ in 0..20 {
            let x = random_input(&mut r, &a);
            assert!(a.forward(&x).unwrap().max_abs_diff(&b.forward(&x).unwrap()) <= 1e-6);
        }
    }
}

#[test]
fn diff_reports_names_and_magnitudes() {
    let cfg = small_config(8);
    let a = model_with(&cfg, 1, &["image"]);
    let mut b = a.clone();
    b.params.remove("enc.image.bias");
    b.params.get_mut("llm.head_bias").unwrap().data_mut()[0] = 0.5;
    let d = diff_checkpoints(&a, &b);
    assert_eq!(d.only_a, vec!["enc.image.bias".to_string()]);
    assert!(d.only_b.is_empty());
    let hb = d.shared.iter().find(|s| s.name == "llm.head_bias").unwrap();
    assert_eq!(hb.max_abs_diff, Some(0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn naive_merge_is_order_independent(seed in 0u64..500) {
        let cfg = small_config(8);
        let mut a = model_with(&cfg, 1, &["image"]);
        let mut b = model_with(&cfg, 1, &["audio"]);
        randomize(&mut a, |n| n.starts_with("llm.blocks"), 0.5, seed);
        randomize(&mut b, |n| n.starts_with("llm.blocks"), 0.5, seed + 1);
        let (ab, _) = compose(&[&a, &b], &MergeSpec::naive()).unwrap();
        let (ba, _) = compose(&[&b, &a], &MergeSpec::naive()).unwrap();
        prop_assert_eq!(ab.params, ba.params);
    }

    #[test]
    fn one_hot_weights_select_a_constituent(seed in 0u64..500, pick in 0usize..3) {
        let cfg = small_config(8);
        let mut cks: Vec<Checkpoint> = (0..3).map(|_| model_with(&cfg, 2, &[])).collect();
        for (i, c) in cks.iter_mut().enumerate() {
            randomize(c, |n| n.starts_with("llm."), 0.5, seed * 3 + i as u64);
        }
        let mut w = vec![0.0; 3];
        w[pick] = 1.0;
        let refs: Vec<&Checkpoint> = cks.iter().collect();
        let (c, _) = compose(&refs, &MergeSpec::weighted(w)).unwrap();
        prop_assert_eq!(&c.params, &cks[pick].params);
    }

    #[test]
    fn unique_parameters_pass_through(seed in 0u64..500) {
        let cfg = small_config(8);
        let a = model_with(&cfg, 3, &["image"]);
        let mut b = model_with(&cfg, 3, &["audio"]);
        b.params.retain(|n| !n.starts_with("enc.image") && !n.starts_with("proj.image"));
        randomize(&mut b, |n| n.starts_with("proj.audio"), 1.0, seed);
        let (c, _) = compose(&[&a, &b], &MergeSpec::weighted(vec![0.3, 0.9])).unwrap();
        for (name, t) in &b.params {
            if !name.starts_with("llm.") {
                prop_assert_eq!(c.params.get(name), Some(t));
            }
        }
    }
}
