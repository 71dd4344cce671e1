use std::collections::{BTreeMap, BTreeSet};

use modelcompose::mcub::{
    cosine, default_embed, fnv1a64, generate_all, group_similarity, mcub3_subsets, render_prompt,
    sample_and_select_groups, score_answers, CaptionedEntity, EntityGroup, McqItem, QuestionGenerator,
    TemplateGenerator,
};
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "a", "dog", "cat", "barking", "river", "loud", "quiet", "street", "car", "bird", "forest",
    "rain", "engine", "child", "laughing", "mat",
];

fn random_caption(r: &mut ChaCha8Rng) -> String {
    let n = r.random_range(1..=6);
    (0..n).map(|_| *WORDS.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Word counts hashed into 256 buckets, built without the library's helpers.
fn count_vector(caption: &str) -> Vec<f64> {
    let mut v = vec![0.0; 256];
    for w in caption.split_whitespace() {
        v[(fnv1a64(w.to_lowercase().as_bytes()) % 256) as usize] += 1.0;
    }
    v
}

fn brute_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn brute_group_similarity(captions: &[String]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..captions.len() {
        for j in 0..captions.len() {
            if i < j {
                sum += brute_cosine(&count_vector(&captions[i]), &count_vector(&captions[j]));
                count += 1;
            }
        }
    }
    sum / f64::from(count)
}

#[test]
fn group_similarity_matches_pair_enumeration() {
    let mut r = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let n = r.random_range(2..=5);
        let caps: Vec<String> = (0..n).map(|_| random_caption(&mut r)).collect();
        let refs: Vec<&str> = caps.iter().map(String::as_str).collect();
        let got = group_similarity(&refs, default_embed).unwrap();
        assert!((got - brute_group_similarity(&caps)).abs() <= 1e-9);
    }
}

#[test]
fn hand_computed_bag_of_words() {
    // Counts: a:2 cat:1 on:1 mat:1 versus a:2 dog:1 on:1 mat:1; dot = 4+1+1 = 6, norms sqrt(7).
    let expected = 6.0 / 7.0;
    let got = cosine(&default_embed("a cat on a mat"), &default_embed("a dog on a mat"));
    assert!((got - expected).abs() < 1e-12, "{got}");
    assert!((cosine(&default_embed("x y"), &default_embed("x y")) - 1.0).abs() < 1e-12);
    let three = ["rain on the roof"; 3];
    assert!((group_similarity(&three, default_embed).unwrap() - 1.0).abs() < 1e-12);
    assert!(group_similarity(&["one"], default_embed).is_err());
}

#[test]
fn three_way_average() {
    let caps = ["a dog barking", "a dog", "a cat on a mat"];
    let e: Vec<Vec<f64>> = caps.iter().map(|c| default_embed(c)).collect();
    let expected = (cosine(&e[0], &e[1]) + cosine(&e[0], &e[2]) + cosine(&e[1], &e[2])) / 3.0;
    assert!((group_similarity(&caps, default_embed).unwrap() - expected).abs() < 1e-12);
}

fn pools(r: &mut ChaCha8Rng, modalities: &[&str], size: usize) -> BTreeMap<String, Vec<CaptionedEntity>> {
    modalities
        .iter()
        .map(|m| {
            let pool = (0..size)
                .map(|i| {
                    let tags: Vec<&str> = (0..4).map(|_| *WORDS.choose(r).unwrap()).collect();
                    CaptionedEntity::new(m, &format!("{m}{i}"), &random_caption(r), &tags)
                })
                .collect();
            (m.to_string(), pool)
        })
        .collect()
}

#[test]
fn dog_group_ranks_first() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mods = ["audio", "image", "video"];
    let mut pools = pools(&mut r, &mods, 6);
    for (m, caption) in mods.iter().zip(["dog dog", "dog", "dog dog dog"]) {
        let pool = pools.get_mut(*m).unwrap();
        pool.retain(|e| !e.caption.contains("dog"));
        pool.push(CaptionedEntity::new(m, &format!("{m}-dog"), caption, &["dog"]));
    }
    let mods: Vec<String> = mods.iter().map(|m| m.to_string()).collect();
    let n = 4000;
    let groups = sample_and_select_groups(&pools, &mods, n, n, 11, default_embed).unwrap();
    assert_eq!(groups.len(), n);
    assert!(groups.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    let brute_best = groups
        .iter()
        .map(|g| {
            let caps: Vec<String> = g.members.iter().map(|e| e.caption.clone()).collect();
            brute_group_similarity(&caps)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let top = &groups[0];
    assert!(top.members.iter().all(|e| e.id.ends_with("-dog")), "{:?}", top.member_ids());
    assert!((top.similarity - brute_best).abs() < 1e-9);
}

#[test]
fn selection_shape_and_errors() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mods = ["audio", "image", "point", "video"];
    let pools = pools(&mut r, &mods, 5);
    let mods: Vec<String> = mods.iter().map(|m| m.to_string()).collect();
    let groups = sample_and_select_groups(&pools, &mods, 50, 10, 1, default_embed).unwrap();
    assert_eq!(groups.len(), 10);
    for g in &groups {
        let tags: Vec<&str> = g.members.iter().map(|e| e.modality.as_str()).collect();
        assert_eq!(tags, ["audio", "image", "point", "video"]);
        assert!((-1.0..=1.0).contains(&g.similarity));
    }
    assert!(sample_and_select_groups(&pools, &mods, 5, 6, 1, default_embed).is_err());
    let missing = vec!["audio".to_string(), "smell".to_string()];
    assert!(sample_and_select_groups(&pools, &missing, 5, 2, 1, default_embed).is_err());
    assert_eq!(mcub3_subsets(&mods).len(), 4);
}

fn check_sound(item: &McqItem) {
    item.validate().unwrap();
    let correct = item.answer_text();
    for member in &item.group.members {
        assert!(member.tag_set().contains(correct), "{correct} not held by {}", member.id);
    }
    for opt in item.options.iter().filter(|o| o.as_str() != correct) {
        assert!(
            item.group.members.iter().any(|m| !m.tag_set().contains(opt.as_str())),
            "distractor {opt} is held by every member"
        );
    }
}

fn tagged_group(r: &mut ChaCha8Rng, n_members: usize) -> EntityGroup {
    let shared = *WORDS.choose(r).unwrap();
    let members = (0..n_members)
        .map(|i| {
            let mut tags: BTreeSet<&str> = (0..4).map(|_| *WORDS.choose(r).unwrap()).collect();
            tags.insert(shared);
            let tags: Vec<&str> = tags.into_iter().collect();
            CaptionedEntity::new(&format!("m{i}"), &format!("e{i}"), &random_caption(r), &tags)
        })
        .collect();
    EntityGroup { members, similarity: 0.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn template_items_are_sound(world in 0u64..10_000, n_members in 2usize..5, seed in 0u64..100) {
        let mut r = ChaCha8Rng::seed_from_u64(world);
        let group = tagged_group(&mut r, n_members);
        let generator = TemplateGenerator {
            distractor_pool: WORDS.iter().map(|w| w.to_string()).collect(),
        };
        match generator.generate(&group, seed) {
            Ok(items) => {
                prop_assert_eq!(items.len(), 1);
                check_sound(&items[0]);
                prop_assert_eq!(&items, &generator.generate(&group, seed).unwrap());
            }
            // Every word shared leaves nothing to distract with.
            Err(e) => prop_assert!(group.shared_tags().len() > WORDS.len() - 3, "{}", e),
        }
    }

    #[test]
    fn similarity_is_permutation_invariant(world in 0u64..10_000) {
        let mut r = ChaCha8Rng::seed_from_u64(world);
        let mut caps: Vec<String> = (0..4).map(|_| random_caption(&mut r)).collect();
        let refs: Vec<&str> = caps.iter().map(String::as_str).collect();
        let a = group_similarity(&refs, default_embed).unwrap();
        caps.reverse();
        caps.swap(0, 2);
        let refs: Vec<&str> = caps.iter().map(String::as_str).collect();
        prop_assert_eq!(a, group_similarity(&refs, default_embed).unwrap());
    }
}

#[test]
fn generated_dataset_is_schema_valid() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let groups: Vec<EntityGroup> = (0..40).map(|_| tagged_group(&mut r, 3)).collect();
    let generator = TemplateGenerator {
        distractor_pool: WORDS.iter().map(|w| w.to_string()).collect(),
    };
    let items = generate_all(&groups, &generator, 2, 4).unwrap();
    assert_eq!(items.len(), groups.len());
    for (item, group) in items.iter().zip(&groups) {
        assert_eq!(&item.group, group);
        check_sound(item);
    }
}

#[test]
fn all_dog_group() {
    let members = ["audio", "image", "video"]
        .iter()
        .map(|m| CaptionedEntity::new(m, &format!("{m}1"), "something", &["dog", m]))
        .collect();
    let group = EntityGroup { members, similarity: 0.5 };
    let generator = TemplateGenerator {
        distractor_pool: vec!["cat".into(), "car".into()],
    };
    let item = &generator.generate(&group, 7).unwrap()[0];
    assert_eq!(item.answer_text(), "dog");
    let distinct: BTreeSet<&String> = item.options.iter().collect();
    assert_eq!(distinct.len(), 4);
    assert_eq!(item.answer, generator.generate(&group, 7).unwrap()[0].answer);
}

#[test]
fn prompt_substitutes_every_member() {
    let members: Vec<CaptionedEntity> = ["audio", "image", "point", "video"]
        .iter()
        .map(|m| CaptionedEntity::new(m, m, &format!("caption of the {m}"), &["x"]))
        .collect();
    let prompt = render_prompt(&EntityGroup { members, similarity: 0.0 });
    assert!(prompt.contains("Generate three such Question, Answer, Explanation triplets"));
    for m in ["audio", "image", "point", "video"] {
        assert!(prompt.contains(&format!("caption of the {m}")));
    }
}

#[test]
fn scoring_exemplar_and_unparseable() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let generator = TemplateGenerator {
        distractor_pool: WORDS.iter().map(|w| w.to_string()).collect(),
    };
    let mut item = generator.generate(&tagged_group(&mut r, 2), 0).unwrap().remove(0);
    item.answer = 'C';
    let items = vec![item.clone(), item.clone(), item];
    let report = score_answers(&items, &["C. Audible environmental sounds.", "maybe option 2?", "(C)"]).unwrap();
    assert_eq!(report.records[0].predicted, Some('C'));
    assert!(report.records[0].correct);
    assert!(report.records[1].unparseable && !report.records[1].correct);
    assert!(report.records[2].correct);
    assert!((report.accuracy - 2.0 / 3.0).abs() < 1e-12);
    assert!(score_answers(&items, &["A"]).is_err());
}
