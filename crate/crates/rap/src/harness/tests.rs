use super::*;
use crate::dataio::{parse_ratings, parse_user_attributes};

/// Small but non-degenerate dataset: 16 users, 24 items, 8 ratings each,
/// with attribute-correlated item choices so the attack has signal.
fn tiny_world() -> (RatingDataset, AttributeTable) {
    let mut text = String::new();
    for u in 0..16 {
        let base = if u % 2 == 0 { 0 } else { 8 };
        for k in 0..8 {
            let item = base + (u / 2 + k) % 12;
            text.push_str(&format!("{}\t{}\t{}\t{}\n", u + 1, item + 1, 1 + (k % 5), k as i64));
        }
    }
    let ds = parse_ratings(&text).unwrap();
    let mut at = String::new();
    for u in 0..16 {
        let g = if u % 2 == 0 { "M" } else { "F" };
        let age = if u % 3 == 0 { 25 } else { 50 };
        let occ = crate::dataio::OCCUPATIONS[u % 4];
        at.push_str(&format!("{}|{age}|{g}|{occ}|00000\n", u + 1));
    }
    let attrs = parse_user_attributes(&at, &ds.user_ids).unwrap();
    (ds, attrs)
}

fn tiny_config() -> ExperimentConfig {
    let mut x = ExperimentConfig::default();
    x.seeds = vec![1];
    x.l_values = vec![3];
    x.k = 3;
    x.attack_frac = 0.75;
    x.train.epochs = 2;
    x.train.batch_size = 4;
    x.train.embed_dim = 4;
    x.train.rec_hidden = 3;
    x.train.att_hidden = 4;
    x.train.max_unroll = 30;
    x.adversary.epochs = 5;
    x.adversary.hidden_dim = 6;
    x.baseline.blurme_k_add = Some(1);
    x
}

#[test]
fn every_method_produces_the_same_report_schema() {
    let (ds, attrs) = tiny_world();
    let x = tiny_config();
    for method in Method::ALL {
        let cell = run_cell(&x, &ds, &attrs, method.key(), method, 3, None, None).unwrap();
        assert_eq!(cell.l, 3);
        assert_eq!(cell.per_seed.len(), 1);
        for v in [
            cell.auc_gender,
            cell.auc_age,
            cell.auc_occupation,
            cell.p_at_k,
            cell.r_at_k,
        ] {
            assert!((0.0..=1.0).contains(&v), "{method}: {v}");
        }
    }
}

#[test]
fn report_round_trips_losslessly() {
    let (ds, attrs) = tiny_world();
    let x = tiny_config();
    let cell = run_cell(&x, &ds, &attrs, "rap", Method::Rap, 3, None, None).unwrap();
    let report = ExperimentReport {
        k: x.k,
        attack_frac: x.attack_frac,
        seeds: x.seeds.clone(),
        cells: vec![cell],
        wall_secs: 1.25,
    };
    let json = serde_json::to_string(&report).unwrap();
    let back: ExperimentReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    let csv = report.to_csv();
    assert!(csv.starts_with("method,l,"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn utility_average_equals_mean_of_per_user_metrics() {
    let (ds, attrs) = tiny_world();
    let x = tiny_config();
    let seed = 5;
    let split = crate::dataio::split_recommendation(&ds, 3, seed).unwrap();
    let tcfg = crate::advtrain::TrainConfig {
        seed,
        alpha: 0.0,
        epochs: 1,
        batch_size: 4,
        embed_dim: 4,
        rec_hidden: 3,
        att_hidden: 4,
        k_train: 3,
        ..Default::default()
    };
    let users: Vec<usize> = (0..ds.num_users()).collect();
    let (state, _) = crate::advtrain::fit(&tcfg, &split.train, &attrs, &users).unwrap();
    let m = score_utility(&state, &split.train, &split.heldout, x.k).unwrap();
    // Independent accumulation, user by user.
    let mut p = Vec::new();
    for u in 0..ds.num_users() {
        if split.heldout[u].is_empty() {
            continue;
        }
        let rec = crate::recommender::top_k(
            &state.rec_params,
            u,
            &split.train.item_set_of(u),
            x.k,
        )
        .unwrap();
        p.push(crate::metrics::precision_at_k(&split.heldout[u], &rec, x.k).unwrap());
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!((m.p_at_k - mean).abs() < 1e-12);
    assert_eq!(m.evaluated_users, p.len());
}

#[test]
fn attack_protocol_guards_test_labels_and_reports_counts() {
    let (ds, attrs) = tiny_world();
    let x = tiny_config();
    let m = attack_protocol(&x, &ds, &attrs, Method::Rap, 3, 2, None, None).unwrap();
    assert_eq!(m.train_users, 12);
    assert_eq!(m.test_users, 4);
    for v in [m.auc_gender, m.auc_age, m.auc_occupation] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn alpha_zero_sweep_point_matches_original_method() {
    let (ds, attrs) = tiny_world();
    let x = tiny_config();
    let orig = attack_protocol(&x, &ds, &attrs, Method::Original, 3, 1, None, None).unwrap();
    let sweep0 = attack_protocol(&x, &ds, &attrs, Method::Rap, 3, 1, Some(0.0), None).unwrap();
    assert_eq!(orig, sweep0);
}

#[test]
fn variant_masks_change_only_the_trained_head() {
    let (ds, attrs) = tiny_world();
    let x = tiny_config();
    let cell = run_cell(
        &x,
        &ds,
        &attrs,
        "rap-age",
        Method::Rap,
        3,
        None,
        Some(&[Attribute::Age]),
    )
    .unwrap();
    assert_eq!(cell.method, "rap-age");
    assert!((0.0..=1.0).contains(&cell.auc_age));
}
