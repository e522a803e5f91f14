use super::*;
use crate::data::{random_bag, Vocab};
use crate::numerics::GradCheckConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_bag(r: &mut ChaCha8Rng, m: usize) -> Bag {
    random_bag(r, 12, 5, m, 7)
}

#[test]
fn probabilities_sum_to_one_for_every_variant() {
    let mut r = rng(1);
    for v in Variant::ALL {
        let model = SegModel::new(ModelConfig { dropout: 0.5, ..ModelConfig::tiny(v) }).unwrap();
        for m in 1..=3 {
            let bag = tiny_bag(&mut r, m);
            for mode in [Mode::Eval, Mode::Train { dropout_seed: Some(9) }, Mode::TRAIN_DETERMINISTIC] {
                let p = model.forward_bag(&bag, mode).unwrap();
                assert_eq!(p.probs.len(), 5);
                assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{v}");
                assert!(p.probs.iter().all(|&x| x >= 0.0));
            }
        }
    }
}

#[test]
fn bag_vector_widths_at_reference_dimensions() {
    let base = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
    let seg = ModelConfig { variant: Variant::Seg, ..base.clone() };
    let wo_gate = ModelConfig { variant: Variant::SegWoGate, ..base.clone() };
    assert_eq!(seg.bag_dim(), 690);
    assert_eq!(wo_gate.bag_dim(), 840);
    let wo_ent = ModelConfig { variant: Variant::SegWoEnt, ..base };
    assert_eq!(wo_ent.encoder_dim(), 60);
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(v.row_label().parse::<Variant>().unwrap(), v);
    }
    let rows: Vec<_> = Variant::ALL.iter().map(|v| v.row_label()).collect();
    assert_eq!(
        rows,
        ["seg", "wo_ent", "wo_gate", "wo_gate_wo_attn", "wo_all", "attn_wo_gate", "attn", "stack"]
    );
    assert!(matches!("nope".parse::<Variant>(), Err(SegError::Config(_))));
}

#[test]
fn config_validation_names_the_constraint() {
    let bad = ModelConfig { d_h: 10, ..ModelConfig::tiny(Variant::Seg) };
    let msg = bad.validate().unwrap_err().to_string();
    assert!(msg.contains("d_h") && msg.contains("3·d_w"), "{msg}");
    // d_h is free once the entity-aware embedding is off
    for v in [Variant::SegWoEnt, Variant::SegWoAll] {
        assert!(ModelConfig { d_h: 10, ..ModelConfig::tiny(v) }.validate().is_ok());
    }
    for bad in [
        ModelConfig { window: 4, ..ModelConfig::tiny(Variant::Seg) },
        ModelConfig { dropout: 1.0, ..ModelConfig::tiny(Variant::Seg) },
        ModelConfig { num_relations: 1, ..ModelConfig::tiny(Variant::Seg) },
        ModelConfig { vocab_size: 0, ..ModelConfig::tiny(Variant::Seg) },
    ] {
        assert!(matches!(SegModel::new(bad), Err(SegError::Config(_))));
    }
}

#[test]
fn registry_matches_variant_wiring() {
    let names = |v| -> Vec<String> {
        SegModel::new(ModelConfig::tiny(v))
            .unwrap()
            .params()
            .iter()
            .map(|p| p.name.clone())
            .collect()
    };
    let has = |v, prefix: &str| names(v).iter().any(|n| n.starts_with(prefix));
    assert!(has(Variant::Seg, "selective_gate") && !has(Variant::Seg, "selective_attn"));
    assert!(!has(Variant::SegWoAll, "entity_gate") && !has(Variant::SegWoAll, "self_attn"));
    assert!(has(Variant::SegWoAll, "selective_attn"));
    assert!(!has(Variant::SegWoGateWoAttn, "self_attn"));
    assert!(!has(Variant::SegAttnWoGate, "self_attn") && !has(Variant::SegAttnWoGate, "selective_gate"));
    assert!(has(Variant::SegAttn, "selective_gate") && has(Variant::SegAttn, "selective_attn"));
}

#[test]
fn shared_seed_gives_identical_shared_parameters() {
    let seg = SegModel::new(ModelConfig::tiny(Variant::Seg)).unwrap();
    for v in Variant::ALL {
        let other = SegModel::new(ModelConfig::tiny(v)).unwrap();
        for p in other.params().iter() {
            if let Some(id) = seg.params().find(&p.name) {
                if seg.params().get(id).shape() == p.value.shape() {
                    assert_eq!(seg.params().get(id), &p.value, "{v}: {}", p.name);
                }
            }
        }
    }
    let reseeded = SegModel::new(ModelConfig { seed: 1, ..ModelConfig::tiny(Variant::Seg) }).unwrap();
    assert_ne!(reseeded.params(), seg.params());
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(2);
    let bag = tiny_bag(&mut r, 3);
    for v in Variant::ALL {
        let model = SegModel::new(ModelConfig { dropout: 0.5, ..ModelConfig::tiny(v) }).unwrap();
        assert_eq!(model.predict(&bag).unwrap(), model.predict(&bag).unwrap());
        let train = Mode::Train { dropout_seed: Some(4) };
        assert_eq!(model.forward_bag(&bag, train).unwrap(), model.forward_bag(&bag, train).unwrap());
    }
}

#[test]
fn sentence_order_does_not_matter() {
    let mut r = rng(3);
    for v in Variant::ALL {
        let model = SegModel::new(ModelConfig::tiny(v)).unwrap();
        for _ in 0..5 {
            let bag = tiny_bag(&mut r, 4);
            let mut shuffled = bag.clone();
            shuffled.sentences.shuffle(&mut r);
            let (a, b) = (model.predict(&bag).unwrap(), model.predict(&shuffled).unwrap());
            for (x, y) in a.probs.iter().zip(&b.probs) {
                assert!((x - y).abs() < 1e-12, "{v}");
            }
        }
    }
}

fn zero_params(model: &mut SegModel) {
    for id in model.params().ids().collect::<Vec<_>>() {
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn loss_closed_forms() {
    let mut r = rng(4);
    let cfg = ModelConfig { num_relations: 53, l2: 0.0, ..ModelConfig::tiny(Variant::Seg) };
    let mut model = SegModel::new(cfg).unwrap();
    let mut bag = tiny_bag(&mut r, 2);
    bag.label = 17;

    // zero output layer: uniform over 53 relations
    let out_w = model.params().find("classifier.w_out").unwrap();
    let out_b = model.params().find("classifier.b_out").unwrap();
    model.params_mut().get_mut(out_w).data_mut().fill(0.0);
    model.params_mut().get_mut(out_b).data_mut().fill(0.0);
    let loss = model.loss(model.params(), &[&bag], Mode::TRAIN_DETERMINISTIC).unwrap();
    assert!((loss - 53f64.ln()).abs() < 1e-9);

    // a saturated gold logit gives p_gold = 1
    model.params_mut().get_mut(out_b).data_mut()[17] = 1000.0;
    let loss = model.loss(model.params(), &[&bag], Mode::TRAIN_DETERMINISTIC).unwrap();
    assert_eq!(loss, 0.0);

    // L2 term: one weight of 2 at β = 0.1
    let mut model = SegModel::new(ModelConfig { l2: 0.1, ..model.config().clone() }).unwrap();
    zero_params(&mut model);
    let w = model.params().find("pcnn.w_c").unwrap();
    model.params_mut().get_mut(w).data_mut()[0] = 2.0;
    let loss = model.loss(model.params(), &[&bag], Mode::TRAIN_DETERMINISTIC).unwrap();
    assert!((loss - 53f64.ln() - 0.4).abs() < 1e-12);
}

#[test]
fn out_of_range_label_is_a_data_error() {
    let mut r = rng(5);
    let model = SegModel::new(ModelConfig::tiny(Variant::Seg)).unwrap();
    let mut bag = tiny_bag(&mut r, 1);
    bag.label = 5;
    assert!(matches!(
        model.loss(model.params(), &[&bag], Mode::TRAIN_DETERMINISTIC),
        Err(SegError::Data(_))
    ));
    assert!(matches!(
        model.batch_gradient(&[&bag], |_| Mode::TRAIN_DETERMINISTIC, Exec::Sequential),
        Err(SegError::Data(_))
    ));
}

#[test]
fn batch_loss_matches_objective() {
    let mut r = rng(6);
    let bags: Vec<Bag> = (0..4).map(|i| tiny_bag(&mut r, 1 + i % 3)).collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    for v in Variant::ALL {
        let model = SegModel::new(ModelConfig::tiny(v)).unwrap();
        let bg = model.batch_gradient(&refs, |_| Mode::TRAIN_DETERMINISTIC, Exec::Sequential).unwrap();
        let direct = model.loss(model.params(), &refs, Mode::TRAIN_DETERMINISTIC).unwrap();
        assert!((bg.loss - direct).abs() < 1e-12, "{v}");
    }
}

#[test]
fn parallel_and_sequential_gradients_are_bit_identical() {
    let mut r = rng(7);
    let bags: Vec<Bag> = (0..9).map(|i| tiny_bag(&mut r, 1 + i % 3)).collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    let model = SegModel::new(ModelConfig { dropout: 0.5, ..ModelConfig::tiny(Variant::Seg) }).unwrap();
    let mode = |i: usize| Mode::Train { dropout_seed: Some(100 + i as u64) };
    let a = model.batch_gradient(&refs, mode, Exec::Sequential).unwrap();
    let b = model.batch_gradient(&refs, mode, Exec::Parallel).unwrap();
    assert_eq!(a.grads, b.grads);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
}

#[test]
fn every_variant_passes_gradient_check() {
    // seed 8 puts a classifier ReLU within 1e-6 of its kink for seg_attn,
    // where central differences straddle the corner
    let mut r = rng(18);
    let bags: Vec<Bag> = (1..=3).map(|m| tiny_bag(&mut r, m)).collect();
    let check = GradCheckConfig::default();
    for v in Variant::ALL {
        for scalar_gate in [false, true] {
            let cfg = ModelConfig { scalar_gate, ..ModelConfig::tiny(v) };
            let report = check_gradients(&cfg, &bags, &check, None).unwrap();
            assert!(report.passed(), "{v} scalar={scalar_gate}: {:?}", report.failures().collect::<Vec<_>>());
        }
    }
    let stacked = ModelConfig { stack_residual: true, ..ModelConfig::tiny(Variant::SegStack) };
    assert!(check_gradients(&stacked, &bags, &check, None).unwrap().passed());
}

#[test]
fn planted_fault_is_caught_by_name() {
    let mut r = rng(9);
    let bags = vec![tiny_bag(&mut r, 2)];
    let cfg = ModelConfig::tiny(Variant::Seg);
    let report =
        check_gradients(&cfg, &bags, &GradCheckConfig::default(), Some("selective_gate.w_sg1")).unwrap();
    assert!(!report.passed());
    let failures: Vec<_> = report.failures().collect();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].name, "selective_gate.w_sg1");
    assert!((failures[0].max_rel_error - 0.5).abs() < 1e-3);
    assert!(check_gradients(&cfg, &bags, &GradCheckConfig::default(), Some("nope")).is_err());
}

#[test]
fn gradient_check_refuses_dropout() {
    let mut r = rng(10);
    let bags = vec![tiny_bag(&mut r, 1)];
    let cfg = ModelConfig { dropout: 0.5, ..ModelConfig::tiny(Variant::Seg) };
    assert!(matches!(
        check_gradients(&cfg, &bags, &GradCheckConfig::default(), None),
        Err(SegError::Config(_))
    ));
}

#[test]
fn single_sentence_attention_ignores_its_parameters() {
    let mut r = rng(11);
    for _ in 0..20 {
        let bag = tiny_bag(&mut r, 1);
        let model = SegModel::new(ModelConfig { seed: r.gen(), ..ModelConfig::tiny(Variant::SegWoAll) }).unwrap();
        let attn = model.layout().selective_attn.unwrap();
        let bg = model
            .batch_gradient(&[&bag], |_| Mode::TRAIN_DETERMINISTIC, Exec::Sequential)
            .unwrap();
        // only the L2 part remains
        for id in [attn.query, attn.bilinear] {
            let l2 = model.params().get(id).map(|v| 2.0 * model.config().l2 * v);
            assert_eq!(bg.grads[id.index()], l2);
        }
        let mut perturbed = model.clone();
        for id in [attn.query, attn.bilinear] {
            let t = perturbed.params_mut().get_mut(id);
            *t = t.map(|v| v * -3.0 + 0.7);
        }
        assert_eq!(model.predict(&bag).unwrap(), perturbed.predict(&bag).unwrap());

        let seg = SegModel::new(ModelConfig { l2: 0.0, seed: r.gen(), ..ModelConfig::tiny(Variant::Seg) }).unwrap();
        let gate = seg.layout().selective_gate.unwrap();
        let bg = seg.batch_gradient(&[&bag], |_| Mode::TRAIN_DETERMINISTIC, Exec::Sequential).unwrap();
        assert!(bg.grads[gate.w_sg1.index()].sum_squares() > 0.0);
    }
}

#[test]
fn small_step_lowers_single_bag_loss() {
    let mut r = rng(12);
    for v in Variant::ALL {
        for _ in 0..3 {
            let m = r.gen_range(1..4);
            let bag = tiny_bag(&mut r, m);
            let mut model = SegModel::new(ModelConfig { seed: r.gen(), ..ModelConfig::tiny(v) }).unwrap();
            let bg = model.batch_gradient(&[&bag], |_| Mode::TRAIN_DETERMINISTIC, Exec::Sequential).unwrap();
            model.params_mut().sgd_step(&bg.grads, 1e-4).unwrap();
            let after = model.loss(model.params(), &[&bag], Mode::TRAIN_DETERMINISTIC).unwrap();
            assert!(after < bg.loss, "{v}: {after} !< {}", bg.loss);
        }
    }
}

#[test]
fn with_params_rejects_mismatched_registry() {
    let seg = SegModel::new(ModelConfig::tiny(Variant::Seg)).unwrap();
    let other = ModelConfig::tiny(Variant::SegWoAll);
    assert!(matches!(
        SegModel::with_params(other, seg.params().clone()),
        Err(SegError::Config(_))
    ));
    let same = SegModel::with_params(seg.config().clone(), seg.params().clone()).unwrap();
    assert_eq!(same.params(), seg.params());
}

fn vocab(n: usize) -> Vocab {
    let mut v = Vocab::with_reserved();
    for i in 2..n {
        v.insert(&format!("w{i}"));
    }
    v
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut r = rng(13);
    let dir = tempfile::tempdir().unwrap();
    let relations: Vec<String> = (0..5).map(|i| if i == 0 { "NA".into() } else { format!("r{i}") }).collect();
    let words = vocab(12);
    let entities = vocab(4);
    let bag = tiny_bag(&mut r, 3);
    for v in Variant::ALL {
        let model = SegModel::new(ModelConfig { seed: 3, ..ModelConfig::tiny(v) }).unwrap();
        let path = dir.path().join(v.name());
        let train = serde_json::json!({"lr0": 0.1});
        save_checkpoint(&path, &model, &relations, &words, &entities, 42, Some(train.clone())).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.manifest.step, 42);
        assert_eq!(ck.manifest.train, Some(train));
        assert_eq!(ck.word_vocab, words);
        assert_eq!(ck.entity_vocab, entities);
        for (a, b) in model.params().iter().zip(ck.model.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        let (p, q) = (model.predict(&bag).unwrap(), ck.model.predict(&bag).unwrap());
        assert_eq!(p, q);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let relations = vec!["NA".to_string(), "r1".into(), "r2".into(), "r3".into(), "r4".into()];
    let model = SegModel::new(ModelConfig::tiny(Variant::Seg)).unwrap();
    save_checkpoint(dir.path(), &model, &relations, &vocab(12), &vocab(3), 0, None).unwrap();

    let bin = dir.path().join("params.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(SegError::Checkpoint(_))));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&bin, &bad_magic).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(SegError::Checkpoint(_))));
    std::fs::write(&bin, &bytes).unwrap();
    assert!(load_checkpoint(dir.path()).is_ok());

    // vocabulary edited after training
    let vocab_path = dir.path().join("vocab.json");
    let text = std::fs::read_to_string(&vocab_path).unwrap().replace("\"w5\"", "\"zz\"");
    std::fs::write(&vocab_path, text).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(SegError::VocabMismatch { .. })));

    assert!(load_checkpoint(dir.path().join("missing")).is_err());
}

#[test]
fn default_gradcheck_batch_passes_for_every_variant() {
    for v in Variant::ALL {
        let cfg = ModelConfig::tiny(v);
        let bags = gradcheck_bags(&cfg, DEFAULT_GRADCHECK_SEED);
        assert_eq!(bags.iter().map(Bag::len).collect::<Vec<_>>(), vec![1, 2, 3]);
        let report = check_gradients(&cfg, &bags, &GradCheckConfig::default(), None).unwrap();
        assert!(report.passed(), "{v}: {:?}", report.failures().collect::<Vec<_>>());
    }
}
