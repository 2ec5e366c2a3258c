use std::path::PathBuf;

use proptest::prelude::*;

use super::*;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/ml-100k")
        .join(name)
}

#[test]
fn canonical_ratings_file_shape() {
    let ds = load_ratings(&data_path("u.data")).unwrap();
    assert_eq!(ds.num_ratings(), 100_000);
    assert_eq!(ds.num_users(), 943);
    assert_eq!(ds.num_items(), 1682);
    // Every user rated at least 20 movies on the unmodified data.
    let min = (0..ds.num_users()).map(|u| ds.profile_len(u)).min().unwrap();
    assert!(min >= 20, "min profile length {min}");
}

#[test]
fn canonical_attributes_file_shape() {
    let ds = load_ratings(&data_path("u.data")).unwrap();
    let attrs = load_user_attributes(&data_path("u.user"), &ds.user_ids).unwrap();
    assert_eq!(attrs.num_users(), 943);
    // First row of the canonical file: 1|24|M|technician|85711.
    let u0 = ds.user_ids.dense(1).unwrap();
    assert_eq!(attrs.label(u0, Attribute::Gender).unwrap(), 0);
    assert_eq!(attrs.label(u0, Attribute::Age).unwrap(), 0);
    assert_eq!(
        attrs.label(u0, Attribute::Occupation).unwrap(),
        OCCUPATIONS.iter().position(|&o| o == "technician").unwrap()
    );
}

#[test]
fn empty_file_gives_empty_dataset() {
    let ds = parse_ratings("").unwrap();
    assert_eq!(ds.num_users(), 0);
    assert_eq!(ds.num_items(), 0);
    assert_eq!(ds.num_ratings(), 0);
}

#[test]
fn two_line_file_reindexes_densely() {
    let ds = parse_ratings("1\t1\t5\t0\n1\t2\t3\t1\n").unwrap();
    assert_eq!(ds.num_users(), 1);
    assert_eq!(ds.num_items(), 2);
    assert_eq!(ds.item_set_of(0), vec![0, 1]);
}

#[test]
fn malformed_line_reports_line_number() {
    let err = parse_ratings("1\t1\t5\t0\n1\tx\t3\t1\n").unwrap_err();
    match err {
        RapError::Parse { line, .. } => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    let err = parse_ratings("1\t1\t9\t0\n").unwrap_err();
    assert!(matches!(err, RapError::Validation(_)));
}

#[test]
fn attribute_parsing_and_bucketing() {
    let ds = parse_ratings("1\t1\t5\t0\n2\t1\t4\t0\n3\t1\t3\t0\n").unwrap();
    let attrs = parse_user_attributes(
        "1|24|M|technician|85711\n2|35|F|writer|00000\n3|45|M|doctor|11111\n",
        &ds.user_ids,
    )
    .unwrap();
    assert_eq!(attrs.label_unguarded(0, Attribute::Gender), 0);
    assert_eq!(attrs.label_unguarded(0, Attribute::Age), 0);
    assert_eq!(attrs.label_unguarded(1, Attribute::Gender), 1);
    assert_eq!(attrs.label_unguarded(1, Attribute::Age), 1);
    assert_eq!(attrs.label_unguarded(2, Attribute::Age), 2);

    assert_eq!(age_bucket(99), 2);
    assert_eq!(age_bucket(34), 0);
    assert_eq!(age_bucket(44), 1);

    let err = parse_user_attributes("1|24|M|astronaut|85711\n", &ds.user_ids).unwrap_err();
    assert!(format!("{err}").contains("astronaut"));
    let err = parse_user_attributes("9|24|M|technician|85711\n", &ds.user_ids).unwrap_err();
    assert!(matches!(err, RapError::Validation(_)));
}

#[test]
fn bucketing_is_total_over_plausible_ages() {
    for age in 1..=120 {
        let b = age_bucket(age);
        assert!(b <= 2);
        // Exactly one bucket: recompute by definition.
        let want = if age < 35 {
            0
        } else if age < 45 {
            1
        } else {
            2
        };
        assert_eq!(b, want);
    }
}

#[test]
fn access_guard_trips_on_held_out_users() {
    let ds = parse_ratings("1\t1\t5\t0\n2\t1\t4\t0\n").unwrap();
    let attrs =
        parse_user_attributes("1|24|M|technician|85711\n2|30|F|writer|00000\n", &ds.user_ids)
            .unwrap();
    let guarded = attrs.with_guard(&[1]);
    assert!(guarded.label(0, Attribute::Gender).is_ok());
    assert!(guarded.label(1, Attribute::Gender).is_err());
    // Evaluation reads bypass the guard explicitly.
    assert_eq!(guarded.label_unguarded(1, Attribute::Gender), 1);
}

fn synth_dataset(num_users: usize, num_items: usize, per_user: usize, seed: u64) -> RatingDataset {
    let mut text = String::new();
    let mut rng = derive_rng(seed, "synth", 0);
    for u in 0..num_users {
        let mut items: Vec<usize> = (0..num_items).collect();
        let sel = sample_distinct(&mut items, per_user, &mut rng);
        for (k, i) in sel.iter().enumerate() {
            let score = 1 + ((u + k) % 5);
            text.push_str(&format!("{}\t{}\t{}\t{}\n", u + 1, i + 1, score, 1000 + k));
        }
    }
    parse_ratings(&text).unwrap()
}

#[test]
fn rec_split_partitions_each_profile() {
    let ds = synth_dataset(12, 30, 10, 9);
    let split = split_recommendation(&ds, 4, 123).unwrap();
    for u in 0..ds.num_users() {
        assert_eq!(split.heldout[u].len(), 4);
        let mut rebuilt: Vec<usize> = split.train.item_set_of(u);
        rebuilt.extend(&split.heldout[u]);
        rebuilt.sort_unstable();
        assert_eq!(rebuilt, ds.item_set_of(u));
        for &i in &split.heldout[u] {
            assert!(!split.train.is_rated(u, i));
        }
    }
    // Determinism.
    let again = split_recommendation(&ds, 4, 123).unwrap();
    assert_eq!(again.heldout, split.heldout);
    let other_seed = split_recommendation(&ds, 4, 124).unwrap();
    assert_ne!(other_seed.heldout, split.heldout);
}

#[test]
fn rec_split_flags_short_and_degenerate_profiles() {
    // User 1 has 6 ratings, user 2 has 4 (degenerate at l=4), user 3 has 2.
    let mut text = String::new();
    for i in 0..6 {
        text.push_str(&format!("1\t{}\t3\t0\n", i + 1));
    }
    for i in 0..4 {
        text.push_str(&format!("2\t{}\t3\t0\n", i + 1));
    }
    for i in 0..2 {
        text.push_str(&format!("3\t{}\t3\t0\n", i + 1));
    }
    let ds = parse_ratings(&text).unwrap();
    let split = split_recommendation(&ds, 4, 7).unwrap();
    assert_eq!(split.excluded_users, vec![2]);
    assert_eq!(split.degenerate_users, vec![1]);
    assert_eq!(split.train.profile_len(1), 0);
    assert_eq!(split.heldout[2], Vec::<usize>::new());
    assert!(split_recommendation(&ds, 0, 7).is_err());
}

#[test]
fn attack_split_is_a_partition_with_floor_counts() {
    let ds = synth_dataset(10, 40, 12, 3);
    let split = split_attacker(&ds, 0.8, 5, 99).unwrap();
    assert_eq!(split.train_users.len(), 8);
    assert_eq!(split.test_users.len(), 2);
    let mut all: Vec<usize> = split
        .train_users
        .iter()
        .chain(split.test_users.iter())
        .copied()
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());

    let reduced = split.apply(&ds).unwrap();
    for (k, &u) in split.test_users.iter().enumerate() {
        assert_eq!(split.removed[k].len(), 5);
        assert_eq!(reduced.profile_len(u), 7);
    }
    for &u in &split.train_users {
        assert_eq!(reduced.profile_len(u), 12);
    }

    let again = split_attacker(&ds, 0.8, 5, 99).unwrap();
    assert_eq!(again.train_users, split.train_users);
    assert_eq!(again.removed, split.removed);

    assert!(split_attacker(&ds, 0.0, 5, 1).is_err());
    assert!(split_attacker(&ds, 1.0, 5, 1).is_err());

    let tiny = synth_dataset(2, 40, 12, 4);
    let half = split_attacker(&tiny, 0.5, 3, 1).unwrap();
    assert_eq!(half.train_users.len(), 1);
    assert_eq!(half.test_users.len(), 1);
}

#[test]
fn attack_manifest_round_trips() {
    let ds = synth_dataset(9, 25, 8, 5);
    let split = split_attacker(&ds, 0.7, 3, 17).unwrap();
    let manifest = split.manifest(&ds);
    let json = serde_json::to_string(&manifest).unwrap();
    let back: AttackSplitManifest = serde_json::from_str(&json).unwrap();
    let restored = AttackSplit::from_manifest(&back, &ds).unwrap();
    assert_eq!(restored.train_users, split.train_users);
    assert_eq!(restored.test_users, split.test_users);
    assert_eq!(restored.removed, split.removed);
}

proptest! {
    #[test]
    fn reindexing_is_a_bijection(ids in proptest::collection::btree_set(1u32..10_000, 1..40)) {
        let text: String = ids
            .iter()
            .map(|id| format!("{id}\t{}\t3\t0\n", id % 97 + 1))
            .collect();
        let ds = parse_ratings(&text).unwrap();
        for (dense, _) in (0..ds.num_users()).enumerate() {
            let orig = ds.user_ids.orig(dense);
            prop_assert_eq!(ds.user_ids.dense(orig), Some(dense));
        }
        prop_assert_eq!(ds.num_users(), ids.len());
    }

    #[test]
    fn rec_split_union_property(seed in 0u64..500) {
        let ds = synth_dataset(6, 20, 8, 42);
        let split = split_recommendation(&ds, 3, seed).unwrap();
        for u in 0..ds.num_users() {
            let mut union: Vec<usize> = split.train.item_set_of(u);
            union.extend(&split.heldout[u]);
            union.sort_unstable();
            union.dedup();
            prop_assert_eq!(union, ds.item_set_of(u));
        }
    }
}
