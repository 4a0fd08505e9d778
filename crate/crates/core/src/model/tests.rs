use super::*;
use crate::schema::Dimension;
use crate::tensor::{grad_check_params, Tensor};
use approx::assert_abs_diff_eq;

fn story(tokens: &[&str], tags: &[ElementTag]) -> Story {
    Story {
        id: "t".into(),
        text: tokens.join(" "),
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        element_tags: tags.to_vec(),
        dims: [Some(2), Some(1), Some(6), Some(2), Some(2)],
        forms: [Some(true), Some(false), Some(true)],
        split: None,
    }
}

fn six() -> Story {
    use ElementTag::*;
    story(
        &["a", "man", "groped", "me", "on", "bus"],
        &[Harasser, Harasser, Trigger, Trigger, None, Location],
    )
}

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(["a", "man", "groped", "me", "on", "bus", "night"])
}

fn model(config: ModelConfig, seed: u64) -> Model {
    Model::new(config, vocab(), None, seed).unwrap()
}

fn eval_values(m: &Model, s: &Story) -> (Option<Tensor>, Vec<Tensor>) {
    let mut g = Graph::new(m.params());
    let out = m.forward(&mut g, s, &mut Mode::Eval).unwrap();
    (
        out.element_logits.map(|v| g.tape.value(v).clone()),
        out.heads.iter().map(|h| g.tape.value(h.logits).clone()).collect(),
    )
}

#[test]
fn joint_cnn_output_shapes_follow_class_counts() {
    let m = model(ModelConfig::small(Variant::JCnn), 1);
    let (elem, heads) = eval_values(&m, &six());
    assert_eq!(elem.unwrap().shape(), &[6, 5]);
    let sizes: Vec<usize> = heads.iter().map(|t| t.len()).collect();
    assert_eq!(sizes, [3, 3, 10, 14, 3]);
    let expected: Vec<usize> = Dimension::ALL.iter().map(|d| d.class_count()).collect();
    assert_eq!(sizes, expected);
}

#[test]
fn eval_mode_is_repeatable() {
    for v in Variant::ALL {
        let m = model(ModelConfig::small(v), 2);
        assert_eq!(eval_values(&m, &six()), eval_values(&m, &six()), "{v}");
    }
}

#[test]
fn element_logits_follow_extraction_flag() {
    for v in Variant::ALL {
        let m = model(ModelConfig::small(v), 3);
        let (elem, _) = eval_values(&m, &six());
        assert_eq!(elem.is_some(), m.config().extraction(), "{v}");
    }
    assert!(eval_values(&model(ModelConfig::small(Variant::Cnn), 0), &six()).0.is_none());
    assert!(eval_values(&model(ModelConfig::small(Variant::JCnnStar), 0), &six()).0.is_none());
}

#[test]
fn train_mode_dropout_changes_outputs_but_is_seeded() {
    let m = model(ModelConfig::small(Variant::JAcnn), 4);
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(m.params());
        let out = m.forward(&mut g, &six(), &mut Mode::Train(&mut rng)).unwrap();
        g.tape.value(out.heads[0].logits).clone()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn uniform_element_logits_give_ln5() {
    let mut m = model(ModelConfig::small(Variant::JCnn), 5);
    let element = m.layout.element.unwrap();
    m.params_mut().get_mut(element.weight).data_mut().fill(0.0);
    let mut g = Graph::new(m.params());
    let out = m.forward(&mut g, &six(), &mut Mode::Eval).unwrap();
    let loss = m.total_loss(&mut g, &out, &six()).unwrap();
    assert_abs_diff_eq!(g.tape.scalar(loss.extraction.unwrap()).unwrap(), 5f64.ln(), epsilon = 1e-12);
}

#[test]
fn missing_gold_label_is_data_error() {
    let m = model(ModelConfig::small(Variant::JCnn), 6);
    let mut s = six();
    s.dims[3] = None;
    let mut g = Graph::new(m.params());
    let out = m.forward(&mut g, &s, &mut Mode::Eval).unwrap();
    assert!(matches!(m.total_loss(&mut g, &out, &s), Err(Error::Data(_))));
}

#[test]
fn supervised_loss_splits_into_attention_and_rest() {
    let sa = model(ModelConfig::small(Variant::JSacnn), 7);
    let a = model(ModelConfig::small(Variant::JAcnn), 7);
    assert_eq!(sa.params().numel(), a.params().numel());
    let run = |m: &Model| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(m.params());
        let out = m.forward(&mut g, &six(), &mut Mode::Train(&mut rng)).unwrap();
        let l = m.total_loss(&mut g, &out, &six()).unwrap();
        let att: f64 = l.attention.iter().map(|(_, v)| g.tape.scalar(*v).unwrap()).sum();
        (g.tape.scalar(l.total).unwrap(), att)
    };
    let (total_sa, att) = run(&sa);
    let (total_a, none) = run(&a);
    assert_eq!(none, 0.0);
    assert!(att > 0.0);
    assert_abs_diff_eq!(total_sa - att, total_a, epsilon = 1e-12);
}

#[test]
fn j_cnn_star_matches_j_cnn_classification_without_extraction() {
    let full = model(ModelConfig::small(Variant::JCnn), 8);
    let mut star = model(ModelConfig::small(Variant::JCnnStar), 9);
    for (_, name, t) in full.params().iter() {
        if let Some(id) = star.params().id(name) {
            *star.params_mut().get_mut(id) = t.clone();
        }
    }
    let cls = |m: &Model| {
        let mut g = Graph::new(m.params());
        let out = m.forward(&mut g, &six(), &mut Mode::Eval).unwrap();
        let l = m.total_loss(&mut g, &out, &six()).unwrap();
        l.classification.iter().map(|(_, v)| g.tape.scalar(*v).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(cls(&full), cls(&star));
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[2.0, 1.0, 0.0, 0.0, 0.0]), 0);
    assert_eq!(argmax(&[0.0; 5]), 0);
    assert_eq!(argmax(&[0.0, 3.0, 3.0]), 1);
}

#[test]
fn attention_dump_rows_sum_to_one() {
    for v in [Variant::JAcnn, Variant::JSacnn, Variant::JAbilstm, Variant::Abilstm] {
        let m = model(ModelConfig::small(v), 10);
        let inf = m.infer(&six()).unwrap();
        for (_, w) in inf.attention.unwrap() {
            assert_eq!(w.len(), 6);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
        let one = story(&["man"], &[ElementTag::Harasser]);
        let mut g = Graph::new(m.params());
        let out = m.forward(&mut g, &one, &mut Mode::Eval).unwrap();
        let dump = attention_dump(&g.tape, &out, &one).unwrap();
        let row = dump.lines().nth(1).unwrap();
        assert!(row.starts_with("man\t1.0000"), "{dump}");
    }
}

#[test]
fn attention_dump_needs_attentive_variant() {
    let m = model(ModelConfig::small(Variant::JCnn), 11);
    let mut g = Graph::new(m.params());
    let out = m.forward(&mut g, &six(), &mut Mode::Eval).unwrap();
    assert!(matches!(attention_dump(&g.tape, &out, &six()), Err(Error::Unsupported(_))));
}

#[test]
fn gradients_match_finite_differences() {
    for v in [Variant::JSacnn, Variant::JSabilstm, Variant::Cnn] {
        let m = model(ModelConfig::small(v), 13);
        let s = six();
        let report = grad_check_params(m.params(), 1e-5, |tape, store| {
            let mut g = Graph::with_tape(std::mem::take(tape), store);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let out = m.forward(&mut g, &s, &mut Mode::Train(&mut rng))?;
            let l = m.total_loss(&mut g, &out, &s)?;
            *tape = g.into_tape();
            Ok(l.total)
        })
        .unwrap();
        assert!(report.max_error < 1e-4, "{v}: {:?}", report.per_param);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = model(ModelConfig::small(Variant::JSabilstm), 14);
    let bytes = m.to_bytes();
    let back = Model::from_bytes(&bytes, Some(m.config())).unwrap();
    assert_eq!(eval_values(&m, &six()), eval_values(&back, &six()));
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn truncated_or_foreign_checkpoint_is_rejected() {
    let m = model(ModelConfig::small(Variant::JAcnn), 15);
    let bytes = m.to_bytes();
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Model::from_bytes(&bytes[..cut], None), Err(Error::Checkpoint(_))), "{cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() - 100;
    flipped[mid] ^= 1;
    assert!(Model::from_bytes(&flipped, None).is_err());
    let other = ModelConfig::small(Variant::JCnn);
    let err = Model::from_bytes(&bytes, Some(&other)).unwrap_err();
    assert!(err.to_string().contains("config-hash mismatch"), "{err}");
}

#[test]
fn vectors_must_match_vocabulary() {
    let v = vocab();
    let table = crate::text::EmbeddingTable {
        matrix: Tensor::zeros(&[v.len(), 5]),
        trainable: true,
    };
    assert!(Model::new(ModelConfig::small(Variant::JCnn), v, Some(&table), 0).is_err());
}

#[test]
fn pool_margin_is_finite_only_with_max_pooling() {
    let s = six();
    let cnn = model(ModelConfig::small(Variant::JCnn), 13);
    let margin = cnn.pool_margin(&s, 3).unwrap();
    assert!(margin.is_finite() && margin >= 0.0);
    assert_eq!(margin, cnn.pool_margin(&s, 3).unwrap());
    let lstm = model(ModelConfig::small(Variant::JBilstm), 13);
    assert_eq!(lstm.pool_margin(&s, 3).unwrap(), f64::INFINITY);
}
