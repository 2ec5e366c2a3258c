use super::*;
use crate::dataio::parse_ratings;
use crate::nnkernel::{adam_step, finite_difference_check, AdamState, FD_EPS};
use crate::recommender::{init_rec_params, RecDims};

fn rating(item: usize, ts: i64) -> Rating {
    Rating {
        user: 0,
        item,
        score: 4,
        timestamp: ts,
    }
}

#[test]
fn ordering_rated_by_timestamp_then_recommended() {
    let rated = vec![rating(5, 30), rating(2, 10), rating(7, 20)];
    let seq = order_items(0, &rated, &[9, 4]);
    assert_eq!(seq.items, vec![2, 7, 5, 9, 4]);
    assert_eq!(seq.n_rated, 3);
    assert!(!seq.is_recommended(2));
    assert!(seq.is_recommended(3));
}

#[test]
fn ordering_edge_cases() {
    let seq = order_items(0, &[rating(3, 2), rating(1, 1)], &[]);
    assert_eq!(seq.items, vec![1, 3]);

    let seq = order_items(0, &[], &[4, 2, 8]);
    assert_eq!(seq.items, vec![4, 2, 8]);
    assert_eq!(seq.n_rated, 0);

    // Overlapping item appears once, in the rated segment.
    let seq = order_items(0, &[rating(4, 5)], &[4, 6]);
    assert_eq!(seq.items, vec![4, 6]);
    assert_eq!(seq.n_rated, 1);

    // Timestamp ties broken by item index.
    let seq = order_items(0, &[rating(9, 7), rating(3, 7)], &[]);
    assert_eq!(seq.items, vec![3, 9]);
}

fn toy_dims() -> (RecDims, AttackerDims) {
    (
        RecDims {
            num_users: 2,
            num_items: 4,
            embed_dim: 2,
            hidden_dim: 2,
        },
        AttackerDims {
            embed_dim: 2,
            hidden_dim: 2,
            max_unroll: 200,
        },
    )
}

#[test]
fn zero_weights_predict_uniform() {
    let (rd, ad) = toy_dims();
    let rec_ps = init_rec_params(&rd, 3);
    let mut att_ps = ParameterSet::new();
    for attr in Attribute::ALL {
        let c = attr.class_count();
        att_ps
            .insert(&param_name(attr, "w_in"), Tensor::zeros(&[2, 2]))
            .unwrap();
        att_ps
            .insert(&param_name(attr, "w_hh"), Tensor::zeros(&[2, 2]))
            .unwrap();
        att_ps
            .insert(&param_name(attr, "b_h"), Tensor::zeros(&[2]))
            .unwrap();
        att_ps
            .insert(&param_name(attr, "head_w"), Tensor::zeros(&[c, 4]))
            .unwrap();
        att_ps
            .insert(&param_name(attr, "head_b"), Tensor::zeros(&[c]))
            .unwrap();
    }
    let seq = order_items(0, &[rating(0, 1), rating(2, 2)], &[1]);
    for attr in Attribute::ALL {
        let c = attr.class_count();
        let p = predict_attribute(&att_ps, &rec_ps, &seq, attr, &ad).unwrap();
        assert_eq!(p.len(), c);
        for v in &p {
            assert!((v - 1.0 / c as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn prediction_is_a_distribution() {
    let (rd, ad) = toy_dims();
    let rec_ps = init_rec_params(&rd, 5);
    let att_ps = init_att_params(&ad, &Attribute::ALL, 6);
    let seq = order_items(1, &[rating(0, 1), rating(3, 0)], &[2, 1]);
    for attr in Attribute::ALL {
        let p = predict_attribute(&att_ps, &rec_ps, &seq, attr, &ad).unwrap();
        assert_eq!(p.len(), attr.class_count());
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn empty_sequence_uses_zero_initial_state() {
    let (rd, ad) = toy_dims();
    let rec_ps = init_rec_params(&rd, 5);
    let att_ps = init_att_params(&ad, &[Attribute::Gender], 6);
    let empty = ItemListSequence {
        user: 0,
        items: vec![],
        n_rated: 0,
    };
    let p = predict_attribute(&att_ps, &rec_ps, &empty, Attribute::Gender, &ad).unwrap();
    assert_eq!(p.len(), 2);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn two_item_sequence_matches_hand_unrolled_computation() {
    // d=2, hidden=2, hand-set weights; oracle computed with plain
    // expressions below, independent of the tape.
    let (rd, ad) = toy_dims();
    let mut rec_ps = init_rec_params(&rd, 9);
    let ie = rec_ps.id(crate::recommender::PARAM_ITEM_EMBED).unwrap();
    rec_ps.value_mut(ie).vals.copy_from_slice(&[
        0.1, 0.2, //
        -0.3, 0.4, //
        0.5, -0.6, //
        0.0, 0.0,
    ]);
    let ue = rec_ps.id(crate::recommender::PARAM_USER_EMBED).unwrap();
    rec_ps.value_mut(ue).vals[..2].copy_from_slice(&[0.25, -0.75]);

    let mut att_ps = ParameterSet::new();
    let attr = Attribute::Gender;
    let w_in = [0.5, -0.2, 0.1, 0.3];
    let w_hh = [0.2, 0.0, -0.1, 0.4];
    let b_h = [0.05, -0.05];
    let head_w = [0.3, -0.4, 0.2, 0.6, -0.5, 0.1, 0.25, -0.35];
    let head_b = [0.02, -0.02];
    att_ps
        .insert(&param_name(attr, "w_in"), Tensor::from_vec(&[2, 2], w_in.to_vec()).unwrap())
        .unwrap();
    att_ps
        .insert(&param_name(attr, "w_hh"), Tensor::from_vec(&[2, 2], w_hh.to_vec()).unwrap())
        .unwrap();
    att_ps
        .insert(&param_name(attr, "b_h"), Tensor::from_vec(&[2], b_h.to_vec()).unwrap())
        .unwrap();
    att_ps
        .insert(
            &param_name(attr, "head_w"),
            Tensor::from_vec(&[2, 4], head_w.to_vec()).unwrap(),
        )
        .unwrap();
    att_ps
        .insert(
            &param_name(attr, "head_b"),
            Tensor::from_vec(&[2], head_b.to_vec()).unwrap(),
        )
        .unwrap();

    // Sequence: item 0 (ts 1) then item 2 (ts 5); user 0.
    let seq = order_items(0, &[rating(2, 5), rating(0, 1)], &[]);
    let got = predict_attribute(&att_ps, &rec_ps, &seq, attr, &ad).unwrap();

    // Hand unroll.
    let x0 = [0.1, 0.2];
    let x2 = [0.5, -0.6];
    let q = [0.25, -0.75];
    let h1 = [
        (w_in[0] * x0[0] + w_in[1] * x0[1] + b_h[0]).tanh(),
        (w_in[2] * x0[0] + w_in[3] * x0[1] + b_h[1]).tanh(),
    ];
    let h2 = [
        (w_in[0] * x2[0] + w_in[1] * x2[1] + w_hh[0] * h1[0] + w_hh[1] * h1[1] + b_h[0]).tanh(),
        (w_in[2] * x2[0] + w_in[3] * x2[1] + w_hh[2] * h1[0] + w_hh[3] * h1[1] + b_h[1]).tanh(),
    ];
    let cat = [h2[0], h2[1], q[0], q[1]];
    let logit = |row: &[f64], b: f64| {
        row.iter().zip(cat.iter()).map(|(a, b)| a * b).sum::<f64>() + b
    };
    let l0 = logit(&head_w[0..4], head_b[0]);
    let l1 = logit(&head_w[4..8], head_b[1]);
    let z = l0.exp() + l1.exp();
    let want = [l0.exp() / z, l1.exp() / z];
    assert!((got[0] - want[0]).abs() < 1e-12, "{got:?} vs {want:?}");
    assert!((got[1] - want[1]).abs() < 1e-12);
}

#[test]
fn uniform_predictor_loss_closed_form() {
    let (rd, ad) = toy_dims();
    let rec_ps = init_rec_params(&rd, 3);
    let mut att_ps = ParameterSet::new();
    for attr in Attribute::ALL {
        let c = attr.class_count();
        for (part, t) in [
            ("w_in", Tensor::zeros(&[2, 2])),
            ("w_hh", Tensor::zeros(&[2, 2])),
            ("b_h", Tensor::zeros(&[2])),
            ("head_w", Tensor::zeros(&[c, 4])),
            ("head_b", Tensor::zeros(&[c])),
        ] {
            att_ps.insert(&param_name(attr, part), t).unwrap();
        }
    }
    let ds = parse_ratings("1\t1\t4\t0\n1\t2\t3\t1\n2\t3\t2\t0\n").unwrap();
    let attrs = crate::dataio::parse_user_attributes(
        "1|24|M|technician|85711\n2|50|F|writer|00000\n",
        &ds.user_ids,
    )
    .unwrap();
    let seq0 = order_items(0, ds.items_of(0), &[]);
    let seq1 = order_items(1, ds.items_of(1), &[]);

    let mut tape = Tape::new();
    let rec = RecLeaves::bind(&mut tape, &rec_ps, false).unwrap();
    let mut att = AttLeaves::bind(&mut tape, &att_ps, &Attribute::ALL, &ad, true).unwrap();
    let loss = build_attacker_loss(&mut tape, &mut att, &rec, &[&seq0, &seq1], &attrs).unwrap();
    let want = (2f64.ln() + 3f64.ln() + 21f64.ln()) / 3.0;
    assert!((tape.scalar(loss) - want).abs() < 1e-12);

    // Batch of 2 equals the mean of the two single-user losses.
    let single = |seq: &ItemListSequence| {
        let mut t = Tape::new();
        let rec = RecLeaves::bind(&mut t, &rec_ps, false).unwrap();
        let mut att = AttLeaves::bind(&mut t, &att_ps, &Attribute::ALL, &ad, true).unwrap();
        let l = build_attacker_loss(&mut t, &mut att, &rec, &[seq], &attrs).unwrap();
        t.scalar(l)
    };
    let mean = 0.5 * (single(&seq0) + single(&seq1));
    assert!((tape.scalar(loss) - mean).abs() < 1e-12);
}

#[test]
fn guarded_labels_error_out_of_training_loss() {
    let (rd, ad) = toy_dims();
    let rec_ps = init_rec_params(&rd, 3);
    let att_ps = init_att_params(&ad, &Attribute::ALL, 4);
    let ds = parse_ratings("1\t1\t4\t0\n2\t2\t3\t1\n").unwrap();
    let attrs = crate::dataio::parse_user_attributes(
        "1|24|M|technician|85711\n2|50|F|writer|00000\n",
        &ds.user_ids,
    )
    .unwrap()
    .with_guard(&[1]);
    let seq = order_items(1, ds.items_of(1), &[]);
    let mut tape = Tape::new();
    let rec = RecLeaves::bind(&mut tape, &rec_ps, false).unwrap();
    let mut att = AttLeaves::bind(&mut tape, &att_ps, &Attribute::ALL, &ad, true).unwrap();
    let err = build_attacker_loss(&mut tape, &mut att, &rec, &[&seq], &attrs).unwrap_err();
    assert!(matches!(err, RapError::Usage(_)));
}

#[test]
fn gradients_flow_into_both_attacker_and_embeddings() {
    let (rd, ad) = toy_dims();
    let mut rec_ps = init_rec_params(&rd, 13);
    let mut att_ps = init_att_params(&ad, &Attribute::ALL, 14);
    let ds = parse_ratings("1\t1\t4\t0\n1\t3\t3\t1\n2\t2\t2\t0\n").unwrap();
    let attrs = crate::dataio::parse_user_attributes(
        "1|24|M|technician|85711\n2|50|F|writer|00000\n",
        &ds.user_ids,
    )
    .unwrap();
    let seqs = [
        order_items(0, ds.items_of(0), &[1]),
        order_items(1, ds.items_of(1), &[0]),
    ];
    let batch: Vec<&ItemListSequence> = seqs.iter().collect();

    // Attacker-parameter gradients.
    let mut tape = Tape::new();
    let rec = RecLeaves::bind(&mut tape, &rec_ps, false).unwrap();
    let mut att = AttLeaves::bind(&mut tape, &att_ps, &Attribute::ALL, &ad, true).unwrap();
    let loss = build_attacker_loss(&mut tape, &mut att, &rec, &batch, &attrs).unwrap();
    tape.backward(loss, &mut att_ps).unwrap();
    let err = finite_difference_check(
        |att_ps| {
            let mut t = Tape::new();
            let rec = RecLeaves::bind(&mut t, &rec_ps, false).unwrap();
            let mut att = AttLeaves::bind(&mut t, att_ps, &Attribute::ALL, &ad, true).unwrap();
            let l = build_attacker_loss(&mut t, &mut att, &rec, &batch, &attrs).unwrap();
            t.scalar(l)
        },
        &mut att_ps,
        FD_EPS,
        12,
        1,
    );
    assert!(err < 1e-4, "attacker-params fd err {err}");

    // Embedding gradients (recommender trainable, attacker frozen).
    let mut tape = Tape::new();
    let rec = RecLeaves::bind(&mut tape, &rec_ps, true).unwrap();
    let mut att = AttLeaves::bind(&mut tape, &att_ps, &Attribute::ALL, &ad, false).unwrap();
    let loss = build_attacker_loss(&mut tape, &mut att, &rec, &batch, &attrs).unwrap();
    rec_ps.zero_grads();
    tape.backward(loss, &mut rec_ps).unwrap();
    let err = finite_difference_check(
        |rec_ps| {
            let mut t = Tape::new();
            let rec = RecLeaves::bind(&mut t, rec_ps, true).unwrap();
            let mut att = AttLeaves::bind(&mut t, &att_ps, &Attribute::ALL, &ad, false).unwrap();
            let l = build_attacker_loss(&mut t, &mut att, &rec, &batch, &attrs).unwrap();
            t.scalar(l)
        },
        &mut rec_ps,
        FD_EPS,
        12,
        2,
    );
    assert!(err < 1e-4, "embedding fd err {err}");
}

#[test]
fn recommended_segment_order_affects_predictions() {
    let (rd, ad) = toy_dims();
    let rec_ps = init_rec_params(&rd, 23);
    let att_ps = init_att_params(&ad, &[Attribute::Gender], 24);
    let rated = [rating(0, 1)];
    let a = order_items(0, &rated, &[1, 2, 3]);
    let b = order_items(0, &rated, &[3, 2, 1]);
    let pa = predict_attribute(&att_ps, &rec_ps, &a, Attribute::Gender, &ad).unwrap();
    let pb = predict_attribute(&att_ps, &rec_ps, &b, Attribute::Gender, &ad).unwrap();
    assert!((pa[0] - pb[0]).abs() > 1e-9, "order insensitivity: {pa:?} vs {pb:?}");
    // Fixed sequence, fixed output.
    let pa2 = predict_attribute(&att_ps, &rec_ps, &a, Attribute::Gender, &ad).unwrap();
    assert_eq!(pa, pa2);
}

#[test]
fn sequences_truncate_to_most_recent_items() {
    let (rd, _) = toy_dims();
    let rec_ps = init_rec_params(&rd, 23);
    let att_ps = init_att_params(
        &AttackerDims {
            embed_dim: 2,
            hidden_dim: 2,
            max_unroll: 2,
        },
        &[Attribute::Gender],
        24,
    );
    let short = AttackerDims {
        embed_dim: 2,
        hidden_dim: 2,
        max_unroll: 2,
    };
    // Sequences sharing the last two items predict identically under a
    // 2-item window.
    let a = order_items(0, &[rating(0, 1), rating(1, 2), rating(2, 3)], &[]);
    let b = order_items(0, &[rating(3, 1), rating(1, 2), rating(2, 3)], &[]);
    let pa = predict_attribute(&att_ps, &rec_ps, &a, Attribute::Gender, &short).unwrap();
    let pb = predict_attribute(&att_ps, &rec_ps, &b, Attribute::Gender, &short).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn attacker_alone_fits_separable_toy() {
    // Item 0 perfectly encodes gender: gender-0 users rated it, gender-1
    // users did not. The recommender stays frozen.
    let n_users = 8;
    let mut text = String::new();
    for u in 0..n_users {
        if u % 2 == 0 {
            text.push_str(&format!("{}\t1\t5\t0\n", u + 1));
            text.push_str(&format!("{}\t3\t4\t1\n", u + 1));
        } else {
            text.push_str(&format!("{}\t2\t5\t0\n", u + 1));
            text.push_str(&format!("{}\t3\t4\t1\n", u + 1));
        }
    }
    let ds = parse_ratings(&text).unwrap();
    let mut attr_text = String::new();
    for u in 0..n_users {
        let g = if u % 2 == 0 { "M" } else { "F" };
        attr_text.push_str(&format!("{}|30|{g}|student|00000\n", u + 1));
    }
    let attrs = crate::dataio::parse_user_attributes(&attr_text, &ds.user_ids).unwrap();

    let rd = RecDims {
        num_users: n_users,
        num_items: 3,
        embed_dim: 4,
        hidden_dim: 2,
    };
    let ad = AttackerDims {
        embed_dim: 4,
        hidden_dim: 6,
        max_unroll: 200,
    };
    let rec_ps = init_rec_params(&rd, 31);
    let mut att_ps = init_att_params(&ad, &[Attribute::Gender], 32);
    let mut adam = AdamState::new(&att_ps, 0.01);
    let seqs: Vec<ItemListSequence> = (0..n_users)
        .map(|u| order_items(u, ds.items_of(u), &[]))
        .collect();
    let batch: Vec<&ItemListSequence> = seqs.iter().collect();
    let mut tape = Tape::new();
    for _ in 0..500 {
        tape.reset();
        let rec = RecLeaves::bind(&mut tape, &rec_ps, false).unwrap();
        let mut att =
            AttLeaves::bind(&mut tape, &att_ps, &[Attribute::Gender], &ad, true).unwrap();
        let loss = build_attacker_loss(&mut tape, &mut att, &rec, &batch, &attrs).unwrap();
        att_ps.zero_grads();
        tape.backward(loss, &mut att_ps).unwrap();
        adam_step(&mut att_ps, &mut adam).unwrap();
    }
    let mut correct = 0;
    for (u, seq) in seqs.iter().enumerate() {
        let p = predict_attribute(&att_ps, &rec_ps, seq, Attribute::Gender, &ad).unwrap();
        let pred = if p[1] > p[0] { 1 } else { 0 };
        if pred == attrs.label_unguarded(u, Attribute::Gender) {
            correct += 1;
        }
    }
    let acc = correct as f64 / n_users as f64;
    assert!(acc >= 0.95, "training accuracy {acc}");
}
