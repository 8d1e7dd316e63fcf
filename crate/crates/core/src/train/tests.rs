use super::*;
use crate::autograd::ParamStore;
use crate::data::{synthetic_task, TaskKind};
use crate::homeostasis::Mechanism;
use crate::tensor::Tensor;

fn tiny_config(variant: Variant) -> ExperimentConfig {
    let mut m = TransformerConfig::new(8, 2, 16, 1, 10, 10);
    m.max_len = 6;
    let mut c = ExperimentConfig::new(variant, m);
    c.batch_size = 4;
    c.s = 0.5;
    c.q_att = 3;
    c.q_bo = 2;
    c.lr = 1e-3;
    c.checkpoint_interval_epochs = 2;
    c.eval_interval_epochs = 0;
    c.resolved()
}

fn corpus(count: usize, seed: u64) -> ParallelCorpus {
    synthetic_task(TaskKind::Copy, 6, 1..=5, count, seed).unwrap()
}

#[test]
fn variant_mapping() {
    let m = |v: Variant| {
        let (a, b) = v.inserts(0.9, 256, 16, 0.1);
        (a.mechanism, b.mechanism, a.q, b.q)
    };
    use Mechanism::*;
    assert_eq!(m(Variant::A).0, None);
    assert_eq!(m(Variant::A).1, None);
    assert_eq!((m(Variant::B).0, m(Variant::B).1), (RfbKwta, Dropout));
    assert_eq!((m(Variant::C).0, m(Variant::C).1), (Dropout, Dropout));
    assert_eq!(m(Variant::D), (SmartInhibition, SmartInhibition, 256, 16));
    assert_eq!((m(Variant::E).0, m(Variant::E).1), (RfbKwta, SmartInhibition));
    let (a, _) = Variant::D.inserts(0.9, 256, 16, 0.1);
    assert_eq!(a.s, 0.9);
    let (_, b) = Variant::C.inserts(0.9, 256, 16, 0.3);
    assert_eq!(b.dropout_p, 0.3);
}

#[test]
fn variant_parsing() {
    assert_eq!("d".parse::<Variant>().unwrap(), Variant::D);
    assert_eq!(Variant::E.to_string(), "E");
    assert!("F".parse::<Variant>().is_err());
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let c = tiny_config(Variant::E);
    let json = serde_json::to_string(&c).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, c);
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["bogus"] = serde_json::json!(1);
    assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
}

#[test]
fn config_validation() {
    let mut c = tiny_config(Variant::B);
    assert!(c.validate().is_ok());
    c.s = 1.0;
    assert!(c.validate().is_err());
    let mut c = tiny_config(Variant::B);
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let mut c = tiny_config(Variant::B);
    c.model.attn_insert = HomeostasisConfig::none();
    assert!(c.validate().is_err());
    assert!(c.resolved().validate().is_ok());
}

#[test]
fn adam_matches_hand_computation() {
    let mut params = ParamStore::new();
    let id = params.add("w", Tensor::new(vec![3, 1], vec![1.0, -2.0, 0.5]).unwrap());
    let c = [2.0, 3.0, -4.0];
    let grads = |p: &ParamStore| {
        let mut g = crate::autograd::Graph::new(p);
        let x = g.input(Tensor::new(vec![1, 3], c.to_vec()).unwrap());
        let w = g.param(id);
        let y = g.linear(x, w, None).unwrap();
        g.backward(y).unwrap()
    };
    let mut opt = Adam::new(0.1, &params);
    let g1 = grads(&params);
    opt.step(&mut params, &g1);
    // Step 1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε).
    let expect1: Vec<f64> = [1.0, -2.0, 0.5]
        .iter()
        .zip(c)
        .map(|(w, g)| w - 0.1 * g / (f64::abs(g) + 1e-8))
        .collect();
    for (a, b) in params.get(id).data().iter().zip(&expect1) {
        assert!((a - b).abs() < 1e-15);
    }
    // Step 2 with the same gradient: bias-corrected moments still equal g and g².
    let g2 = grads(&params);
    opt.step(&mut params, &g2);
    for ((a, b), g) in params.get(id).data().iter().zip(&expect1).zip(c) {
        let want = b - 0.1 * g / (f64::abs(g) + 1e-8);
        assert!((a - want).abs() < 1e-12);
    }
    assert_eq!(opt.steps_taken(), 2);
}

#[test]
fn zero_steps_returns_initial_weights_and_empty_series() {
    let cfg = tiny_config(Variant::A);
    let fresh = Trainer::new(cfg.clone()).unwrap().snapshot();
    let c = corpus(8, 1);
    let out = train(cfg, &c, &c).unwrap();
    assert!(out.train_bleu.is_empty() && out.val_bleu.is_empty());
    assert_eq!(out.checkpoints.filled(), 1);
    let last = out.checkpoints.get(Slot::Last).unwrap();
    assert_eq!(last.checkpoint.weights, fresh.weights);
    assert!(out.state.step_losses.is_empty());
}

#[test]
fn fixed_seed_runs_are_identical() {
    for v in Variant::ALL {
        let mut cfg = tiny_config(v);
        cfg.steps = 12;
        let c = corpus(10, 2);
        let a = train(cfg.clone(), &c, &c).unwrap();
        let b = train(cfg.clone(), &c, &c).unwrap();
        assert_eq!(a.state.step_losses, b.state.step_losses, "variant {v}");
        assert_eq!(a.state.step_losses.len(), 12);
        cfg.seed = 1;
        let d = train(cfg, &c, &c).unwrap();
        assert_ne!(a.state.step_losses, d.state.step_losses);
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    for v in [Variant::B, Variant::D, Variant::E] {
        let cfg = tiny_config(v);
        let (tr, va) = (corpus(10, 3), corpus(4, 4));
        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.run_until(40, &tr, &va).unwrap();

        let mut first = Trainer::new(cfg.clone()).unwrap();
        first.run_until(17, &tr, &va).unwrap();
        let bytes = first.snapshot().to_bytes().unwrap();
        drop(first);
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed.run_until(40, &tr, &va).unwrap();

        assert_eq!(full.state().step_losses, resumed.state().step_losses, "variant {v}");
        assert_eq!(full.snapshot().weights, resumed.snapshot().weights);
        assert_eq!(full.snapshot().caches, resumed.snapshot().caches);
        let strip = |s: &TrainState| s.records.iter().map(|r| (r.step, r.loss, r.bleu)).collect::<Vec<_>>();
        assert_eq!(strip(full.state()), strip(resumed.state()));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = tiny_config(Variant::E);
    cfg.steps = 9;
    let c = corpus(10, 5);
    let mut t = Trainer::new(cfg).unwrap();
    t.set_vocab(c.src_vocab.clone(), c.tgt_vocab.clone());
    t.run_until(9, &c, &c).unwrap();
    let snap = t.snapshot();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    snap.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, snap);
    let mut restored = Trainer::from_checkpoint(&back).unwrap();
    assert_eq!(restored.teacher_forced(&c).unwrap(), t.teacher_forced(&c).unwrap());
    assert_eq!(restored.decode_corpus(&c).unwrap(), t.decode_corpus(&c).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let snap = Trainer::new(tiny_config(Variant::B)).unwrap().snapshot();
    let bytes = snap.to_bytes().unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    for bad in [flipped, bytes[..bytes.len() - 9].to_vec(), b"garbage".to_vec()] {
        match Checkpoint::from_bytes(&bad) {
            Err(Error::Checkpoint(msg)) => assert!(!msg.is_empty()),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }
    // A valid container with a different version number.
    let mut v2 = bytes[..bytes.len() - 4].to_vec();
    v2[8..12].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast::hash(&v2);
    v2.extend_from_slice(&crc.to_le_bytes());
    let err = Checkpoint::from_bytes(&v2).unwrap_err();
    assert!(err.to_string().contains("version"));
}

#[test]
fn loading_into_a_different_width_fails() {
    let snap = Trainer::new(tiny_config(Variant::A)).unwrap().snapshot();
    let mut other = tiny_config(Variant::A);
    other.model.d_model = 12;
    other.model.heads = 2;
    let mut t = Trainer::new(other).unwrap();
    let err = t.restore(&snap).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("shape mismatch")), "{err}");
}

#[test]
fn pad_embeddings_receive_no_gradient() {
    let cfg = tiny_config(Variant::A);
    let mut t = Trainer::new(cfg).unwrap();
    let c = corpus(4, 6);
    let pairs: Vec<(&[u32], &[u32])> = c.pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let batch = Batch::from_pairs(&pairs, vec![0, 1, 2, 3], 6);
    assert!(batch.src.contains(&PAD) && batch.tgt_in.contains(&PAD));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ForwardCtx { training: true, rng: &mut rng };
    let model = t.model_mut();
    let (g, l) = model.loss(&batch, &mut ctx).unwrap();
    let grads = g.backward(l).unwrap();
    for (id, p) in t.model().params().iter() {
        if p.name.ends_with("_embed") {
            let row = &grads.get(id).unwrap().data()[..8];
            assert!(row.iter().all(|&x| x == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn evaluation_is_repeatable_and_untrained_bleu_is_low() {
    let mut t = Trainer::new(tiny_config(Variant::E)).unwrap();
    let c = corpus(12, 7);
    let a = t.evaluate(&c).unwrap();
    let b = t.evaluate(&c).unwrap();
    assert_eq!(a, b);
    assert!(a.bleu < 0.1, "untrained BLEU {}", a.bleu);
    assert!(t.model().caches().iter().all(|(_, c)| c.fill() == 0));
}

#[test]
fn memorising_model_scores_high_bleu() {
    let mut m = TransformerConfig::new(16, 2, 32, 1, 10, 10);
    m.max_len = 6;
    let mut cfg = ExperimentConfig::new(Variant::A, m);
    cfg.batch_size = 8;
    cfg.lr = 3e-3;
    let c = synthetic_task(TaskKind::Copy, 6, 2..=4, 8, 8).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.run_until(400, &c, &c).unwrap();
    let e = t.evaluate(&c).unwrap();
    assert!(e.bleu > 0.95, "BLEU {}", e.bleu);
    assert!(e.token_accuracy > 0.99);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut t = Trainer::new(tiny_config(Variant::A)).unwrap();
    let c = corpus(4, 9);
    t.model_mut().params_mut().iter_mut().last().unwrap().value.data_mut()[0] = f64::NAN;
    match t.step(&c) {
        Err(Error::NonFiniteLoss { step, diagnostics }) => {
            assert_eq!(step, 0);
            assert!(diagnostics.contains("generator.bias=NaN"), "{diagnostics}");
        }
        other => panic!("expected non-finite loss error, got {:?}", other.map(|o| o.loss)),
    }
}

#[test]
fn checkpoint_policy_fills_five_slots() {
    let mut cfg = tiny_config(Variant::D);
    cfg.steps = 15;
    cfg.checkpoint_interval_epochs = 1;
    let (tr, va) = (corpus(8, 10), corpus(4, 11));
    let out = train(cfg, &tr, &va).unwrap();
    assert_eq!(out.checkpoints.filled(), 5);
    // 8 pairs / batch 4 = 2 steps per epoch; 7 full epochs plus a final partial save point.
    assert_eq!(out.train_bleu.len(), 8);
    let records = out.state.series(Split::Val);
    let best = records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.checkpoints.get(Slot::BestValLoss).unwrap().metric, Some(best));
    assert_eq!(out.checkpoints.get(Slot::Last).unwrap().step, 15);
    let dir = tempfile::tempdir().unwrap();
    let files = out.checkpoints.save_dir(dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    assert!(dir.path().join("best_val_bleu.ckpt").exists());
    let imis: Vec<Option<f64>> = records.iter().map(|r| r.imi_running).collect();
    assert!(imis[0].is_none() && imis[1..].iter().all(Option::is_some));
}
