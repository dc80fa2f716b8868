use std::collections::BTreeMap;

use embed_distill::config::{RunConfig, Split, Stage, StageConfig, TokenFreeze};
use embed_distill::diffcore::{Binder, Graph};
use embed_distill::encoders::Task;
use embed_distill::model::{MultimodalModel, ParamGroup};
use embed_distill::trainer::{
    apply_trainable, batch_objective, compute_step, load_checkpoint, read_metrics, save_checkpoint,
    stage_tasks, trainable_params, StageExit, StepRecord, Trainer,
};
use embed_distill::Error;

fn run(trainer: &mut Trainer, idx: usize, stop: Option<u64>) -> (Vec<StepRecord>, StageExit) {
    let stage = trainer.cfg().stages[idx].stage;
    let data = trainer.cfg().manifest(Split::Stage(stage));
    let mut log = Vec::new();
    let exit = trainer
        .run_stage(idx, &data, stop, &mut |r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
    (log, exit)
}

fn group_names(m: &MultimodalModel, stage: StageConfig) -> BTreeMap<ParamGroup, bool> {
    trainable_params(&stage, m)
        .unwrap()
        .into_iter()
        .map(|p| (p.group, p.trainable))
        .collect()
}

#[test]
fn trainable_partition_per_stage() {
    let m = MultimodalModel::new(&RunConfig::tiny()).unwrap();
    let pt = group_names(&m, StageConfig::new(Stage::Pt));
    assert!(pt[&ParamGroup::Predictors] && pt[&ParamGroup::Projector] && pt[&ParamGroup::SpecialTokens]);
    assert!(!pt[&ParamGroup::Llm]);
    let ift = group_names(&m, StageConfig::new(Stage::Ift));
    assert!(ift[&ParamGroup::Llm] && ift[&ParamGroup::Projector]);
    assert!(!ift[&ParamGroup::SpecialTokens] && !ift[&ParamGroup::Predictors]);
    let mut learn = StageConfig::new(Stage::Ift);
    learn.special_tokens = Some(TokenFreeze::Learnable);
    assert!(group_names(&m, learn)[&ParamGroup::SpecialTokens]);

    // Every parameter lands in exactly one group.
    let plans = trainable_params(&StageConfig::new(Stage::Pt), &m).unwrap();
    let total: usize = plans.iter().map(|p| p.names.len()).sum();
    assert_eq!(total, m.store.len());
}

#[test]
fn two_phase_step_matches_single_graph() {
    let cfg = RunConfig::tiny();
    let mut t = Trainer::new(&cfg).unwrap();
    apply_trainable(&cfg.stages[0], &mut t.model).unwrap();
    let items = t.items(&cfg.manifest(Split::Stage(Stage::Pt))).unwrap();
    let batch: Vec<_> = items.iter().take(4).collect();
    let tasks = stage_tasks(&cfg, &cfg.stages[0]);
    let (losses, grads) = compute_step(&t.model, &batch, &tasks).unwrap();

    let mut g = Graph::<f64>::new();
    let mut b = Binder::new(&t.model.store);
    let terms = batch_objective(&mut g, &mut b, &t.model, &batch, &tasks).unwrap();
    assert!((g.scalar(terms.total) - losses.total).abs() < 1e-4 * losses.total.abs());
    let reference = b.collect(&g, &g.backward(terms.total).unwrap());
    assert_eq!(reference.len(), grads.len());
    for ((ia, ga), (ib, gb)) in reference.iter().zip(&grads) {
        assert_eq!(ia, ib);
        let scale = ga.iter().map(|v| v.abs()).fold(1e-6f32, f32::max);
        for (x, y) in ga.iter().zip(gb) {
            assert!((x - y).abs() <= 1e-3 * scale, "{}: {x} vs {y}", t.model.store.name(*ia));
        }
    }
}

#[test]
fn zero_task_weights_match_ntp_only_bitwise() {
    let mut a = RunConfig::tiny();
    a.stages = vec![StageConfig { max_steps: Some(4), ..a.stages[0].clone() }];
    let mut b = a.clone();
    a.distill.weights.set_tasks(0.0);
    b.stages[0].embedding_losses = Some(false);
    let (la, _) = run(&mut Trainer::new(&a).unwrap(), 0, None);
    let (lb, _) = run(&mut Trainer::new(&b).unwrap(), 0, None);
    assert_eq!(la.len(), 4);
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!(x.losses.total.to_bits(), y.losses.total.to_bits());
    }
}

#[test]
fn same_seed_same_trajectory() {
    let mut cfg = RunConfig::tiny();
    cfg.stages = vec![StageConfig { max_steps: Some(11), epochs: Some(2), ..cfg.stages[0].clone() }];
    let (a, _) = run(&mut Trainer::new(&cfg).unwrap(), 0, None);
    let (b, _) = run(&mut Trainer::new(&cfg).unwrap(), 0, None);
    assert_eq!(a.len(), 11);
    for s in [0, 10] {
        assert!((a[s].losses.total - b[s].losses.total).abs() <= 1e-6);
    }
    assert_eq!(a, b);
}

#[test]
fn resume_mid_stage_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.stages = vec![StageConfig { epochs: Some(2), ..cfg.stages[0].clone() }];
    let (full, exit) = run(&mut Trainer::new(&cfg).unwrap(), 0, Some(11));
    assert_eq!(exit, StageExit::Paused);

    let mut t = Trainer::new(&cfg).unwrap();
    let (head, _) = run(&mut t, 0, Some(9));
    let p = dir.path().join("mid.edck");
    save_checkpoint(&t.model, &t.state, &p).unwrap();
    let mut resumed = Trainer::from_checkpoint(&p).unwrap();
    let (tail, _) = run(&mut resumed, 0, Some(11));
    assert_eq!(head.len() + tail.len(), full.len());
    for (x, y) in head.iter().chain(&tail).zip(&full) {
        assert_eq!(x.step, y.step);
        assert!((x.losses.total - y.losses.total).abs() <= 1e-6);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.stages[0].max_steps = Some(2);
    let mut t = Trainer::new(&cfg).unwrap();
    run(&mut t, 0, None);
    let a = dir.path().join("a.edck");
    let b = dir.path().join("b.edck");
    save_checkpoint(&t.model, &t.state, &a).unwrap();
    let (m, s) = load_checkpoint(&a).unwrap();
    save_checkpoint(&m, &s, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(m.fingerprint(), t.model.fingerprint());

    let mut bytes = std::fs::read(&a).unwrap();
    bytes[1] ^= 0xff;
    std::fs::write(&b, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&b), Err(Error::Format { .. })));

    // A checkpoint of a wider model names the first offending parameter.
    let mut wide = cfg.clone();
    wide.model.hidden = 32;
    let other = Trainer::new(&wide).unwrap();
    save_checkpoint(&other.model, &other.state, &b).unwrap();
    let mut bytes = std::fs::read(&b).unwrap();
    let at = bytes.windows(11).position(|w| w == b"\"hidden\":32").unwrap();
    bytes[at + 9..at + 11].copy_from_slice(b"16");
    std::fs::write(&b, &bytes).unwrap();
    match load_checkpoint(&b) {
        Err(Error::ParamMismatch { name, .. }) => assert_eq!(name, "projector.w1"),
        other => panic!("expected mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn ift_freezes_specials_and_predictors() {
    let mut cfg = RunConfig::tiny();
    cfg.stages[0].max_steps = Some(3);
    cfg.stages[1].max_steps = Some(3);
    cfg.stages[1].lr = Some(1e-2);
    let mut t = Trainer::new(&cfg).unwrap();
    let before_pt = t.model.store.fingerprint_prefix("pred.");
    run(&mut t, 0, None);
    assert_ne!(before_pt, t.model.store.fingerprint_prefix("pred."));
    let specials = t.model.special_values().unwrap();
    let pred = t.model.store.fingerprint_prefix("pred.");
    let special = t.model.store.fingerprint_prefix("special.");
    let llm = t.model.store.fingerprint_prefix("llm.");
    run(&mut t, 1, None);
    assert_eq!(pred, t.model.store.fingerprint_prefix("pred."));
    assert_eq!(special, t.model.store.fingerprint_prefix("special."));
    assert_eq!(specials, t.model.special_values().unwrap());
    assert_ne!(llm, t.model.store.fingerprint_prefix("llm."));

    cfg.stages[1].embedding_losses = Some(true);
    let mut t = Trainer::new(&cfg).unwrap();
    run(&mut t, 0, None);
    let pred = t.model.store.fingerprint_prefix("pred.");
    run(&mut t, 1, None);
    assert_ne!(pred, t.model.store.fingerprint_prefix("pred."));
}

#[test]
fn run_all_writes_checkpoints_and_merged_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.stages[0].max_steps = Some(2);
    cfg.stages[1].max_steps = Some(2);
    let mut t = Trainer::new(&cfg).unwrap();
    let cks = t.run_all(dir.path()).unwrap();
    assert_eq!(cks.len(), 2);
    assert!(cks.iter().all(|p| p.exists()));
    let recs = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[0].stage, Stage::Pt);
    assert_eq!(recs[3].stage, Stage::Ift);
    assert!(recs[0].losses.emb.contains_key(&format!("emb.{}.l2", Task::Depth)));
    assert!(recs[3].losses.emb.is_empty());
}

#[test]
fn non_finite_loss_aborts_with_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.stages[0].max_steps = Some(1);
    let mut t = Trainer::new(&cfg).unwrap();
    // Completing PT leaves a checkpoint; then poison the LM for IFT.
    let pt = cfg.manifest(Split::Stage(Stage::Pt));
    t.run_stage(0, &pt, None, &mut |_| Ok(())).unwrap();
    let ck = dir.path().join("checkpoints/stage0_PT.edck");
    save_checkpoint(&t.model, &t.state, &ck).unwrap();
    let id = t.model.store.id("llm.lnf_g").unwrap();
    t.model.store.get_mut(id).data_mut()[0] = f32::NAN;
    match t.run_all(dir.path()) {
        Err(Error::NonFiniteLoss { step, last_good }) => {
            assert_eq!(step, 0);
            assert_eq!(last_good.unwrap(), ck);
        }
        other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
    }
}
