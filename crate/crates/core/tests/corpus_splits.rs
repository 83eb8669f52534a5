mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use fsied::corpus::{
    build_manifest, dedupe_corpus, materialize_splits, rank_classes, read_splits, write_manifest, read_manifest,
    write_splits, EventMention, ManifestConfig, RoundKind, Split,
};
use fsied::synthetic::{generate, SyntheticSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_key(m: &EventMention) -> String {
    let sentence: Vec<String> = m.tokens.iter().map(|t| t.to_lowercase()).collect();
    format!("{}|{}:{}|{}", sentence.join(" "), m.trigger.0, m.trigger.1, m.label)
}

fn random_mention(rng: &mut ChaCha8Rng, id: usize) -> EventMention {
    let len = rng.gen_range(1..4);
    let tokens: Vec<String> = (0..len)
        .map(|_| {
            let w = ["a", "B", "c", "attack", "Attack"][rng.gen_range(0..5)];
            w.to_string()
        })
        .collect();
    let start = rng.gen_range(0..len);
    EventMention {
        id: format!("m{id}"),
        tokens,
        trigger: (start, start + 1),
        label: format!("L{}", rng.gen_range(0..3)),
    }
}

#[test]
fn dedupe_matches_hash_set_oracle_at_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(70852);
    let mentions: Vec<EventMention> = (0..70_852).map(|i| random_mention(&mut rng, i)).collect();
    let oracle: HashSet<String> = mentions.iter().map(oracle_key).collect();
    let kept = dedupe_corpus(mentions.clone());
    assert_eq!(kept.len(), oracle.len());
    assert!(kept.len() < mentions.len());
    let kept_keys: HashSet<String> = kept.iter().map(oracle_key).collect();
    assert_eq!(kept_keys, oracle);
}

#[test]
fn ranking_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mentions: Vec<EventMention> = (0..20_000)
        .map(|i| EventMention {
            id: format!("m{i}"),
            tokens: vec!["x".into()],
            trigger: (0, 1),
            label: format!("C{:02}", rng.gen_range(0..100)),
        })
        .collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for m in &mentions {
        *counts.entry(m.label.clone()).or_default() += 1;
    }
    let mut oracle: Vec<(String, usize)> = counts.into_iter().collect();
    oracle.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let ranked = rank_classes(&mentions);
    assert_eq!(ranked.len(), 100);
    assert_eq!(&ranked[..67], &oracle[..67]);
}

#[test]
fn seventy_class_corpus_gives_the_five_way_five_shot_layout() {
    let corpus = generate(&SyntheticSpec::seventy_classes(4));
    let ranked = rank_classes(&corpus.mentions);
    let manifest = build_manifest(&ranked, &ManifestConfig::five_way_five_shot(), 4).unwrap();
    let stats: Vec<(String, usize, Option<usize>, usize, usize)> = manifest.statistics();
    let mut expected = vec![("c_b".to_string(), 10, Some(1000), 500, 500)];
    for r in 1..=5 {
        expected.push((format!("c_{r}"), 5, Some(25), 50, 50));
    }
    expected.push(("c_ood".to_string(), 7, None, 105, 105));
    assert_eq!(stats, expected);
    let top67: BTreeSet<&String> = ranked.iter().take(67).map(|(l, _)| l).collect();
    let mut used = BTreeSet::new();
    for r in &manifest.rounds {
        for c in &r.classes {
            assert!(top67.contains(c));
            assert!(used.insert(c.clone()), "class in two rounds");
        }
    }
    assert_eq!(manifest.unused_classes.len(), 67 - (10 + 25 + 7));
}

#[test]
fn ten_way_ten_shot_rounds() {
    let mut spec = SyntheticSpec::seventy_classes(2);
    spec.counts.iter_mut().skip(10).for_each(|c| *c = 60);
    let corpus = generate(&spec);
    let manifest =
        build_manifest(&rank_classes(&corpus.mentions), &ManifestConfig::ten_way_ten_shot(), 2).unwrap();
    let stats = manifest.statistics();
    for (r, row) in stats.iter().enumerate().take(5).skip(1) {
        assert_eq!(*row, (format!("c_{r}"), 10, Some(100), 100, 100));
    }
    // 67 eligible minus 10 base and 7 OOD classes leaves exactly five rounds of 10.
    assert_eq!(stats[5].1, 10);
}

#[test]
fn splits_are_disjoint_and_sized_by_the_manifest() {
    let corpus = generate(&SyntheticSpec { duplicates: 200, ..SyntheticSpec::seventy_classes(9) });
    let ranked = rank_classes(&dedupe_corpus(corpus.mentions.clone()));
    let manifest = build_manifest(&ranked, &ManifestConfig::five_way_five_shot(), 9).unwrap();
    let splits = materialize_splits(&corpus.mentions, &manifest).unwrap();
    let mut ids: HashMap<String, (usize, Split)> = HashMap::new();
    let mut keys: HashMap<String, (usize, Split)> = HashMap::new();
    for (round, spec) in splits.rounds.iter().zip(&manifest.rounds) {
        for split in Split::ALL {
            let part = round.split(split);
            let expected = match split {
                Split::Train => spec.shots_train,
                Split::Dev => spec.per_class_dev,
                Split::Test => spec.per_class_test,
            };
            let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
            for m in part {
                *per_class.entry(&m.label).or_default() += 1;
                assert!(ids.insert(m.id.clone(), (round.round_id, split)).is_none(), "id reused");
                assert!(keys.insert(oracle_key(m), (round.round_id, split)).is_none(), "key reused");
            }
            if expected > 0 {
                assert_eq!(per_class.len(), spec.classes.len());
                assert!(per_class.values().all(|&n| n == expected));
            } else {
                assert!(part.is_empty());
            }
        }
    }
    // Brute-force pairwise intersection of train/dev/test per round.
    for round in &splits.rounds {
        let sets: Vec<BTreeSet<&str>> =
            Split::ALL.iter().map(|s| round.split(*s).iter().map(|m| m.id.as_str()).collect()).collect();
        for a in 0..3 {
            for b in a + 1..3 {
                assert_eq!(sets[a].intersection(&sets[b]).count(), 0);
            }
        }
    }
}

#[test]
fn seed_changes_membership_not_counts() {
    let corpus = generate(&SyntheticSpec::seventy_classes(1));
    let ranked = rank_classes(&corpus.mentions);
    let layout = ManifestConfig::five_way_five_shot();
    let a = materialize_splits(&corpus.mentions, &build_manifest(&ranked, &layout, 1).unwrap()).unwrap();
    let again = materialize_splits(&corpus.mentions, &build_manifest(&ranked, &layout, 1).unwrap()).unwrap();
    let b = materialize_splits(&corpus.mentions, &build_manifest(&ranked, &layout, 2).unwrap()).unwrap();
    assert_eq!(a, again);
    assert_ne!(a.assignment(), b.assignment());
    for (ra, rb) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(ra.classes, rb.classes);
        for s in Split::ALL {
            assert_eq!(ra.split(s).len(), rb.split(s).len());
        }
    }
}

#[test]
fn files_round_trip() {
    let desk = common::five_way(3);
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&dir.path().join("m.json"), &desk.manifest).unwrap();
    write_splits(&dir.path().join("splits"), &desk.splits).unwrap();
    let manifest = read_manifest(&dir.path().join("m.json")).unwrap();
    assert_eq!(manifest, desk.manifest);
    assert_eq!(read_splits(&dir.path().join("splits"), &manifest).unwrap(), desk.splits);
    assert_eq!(manifest.rounds.last().unwrap().kind, RoundKind::Ood);
}

proptest! {
    #[test]
    fn dedupe_is_idempotent_and_never_grows(seed in 0u64..1000, n in 0usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mentions: Vec<EventMention> = (0..n).map(|i| random_mention(&mut rng, i)).collect();
        let once = dedupe_corpus(mentions.clone());
        prop_assert!(once.len() <= mentions.len());
        prop_assert_eq!(dedupe_corpus(once.clone()), once);
    }
}
