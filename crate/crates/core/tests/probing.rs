use std::collections::BTreeSet;

use embed_distill::config::{ProbeConfig, RunConfig, Split};
use embed_distill::diffcore::Tensor;
use embed_distill::encoders::{EncoderBank, Task};
use embed_distill::model::MultimodalModel;
use embed_distill::probing::{
    cache_activations, emit_report, eval_probe, mean_token_cosine, probe_model, task_targets, train_probe,
    ActivationStore, ProbeReport, ProbeRow,
};
use embed_distill::resampler::ResamplerConfig;
use embed_distill::synthdata::probe_query;
use embed_distill::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(items: usize) -> (RunConfig, MultimodalModel, EncoderBank) {
    let mut cfg = RunConfig::tiny();
    cfg.data.probe_train_items = items;
    cfg.probe.batch_size = cfg.probe.batch_size.min(items);
    let m = MultimodalModel::new(&cfg).unwrap();
    let bank = EncoderBank::new(&cfg.encoders, cfg.data.generation.canvas).unwrap();
    (cfg, m, bank)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-1.0f32..1.0)).unwrap();
    for r in 0..rows {
        let n: f32 = t.row(r).iter().map(|x| x * x).sum::<f32>().sqrt();
        t.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x /= n);
    }
    t
}

#[test]
fn store_counts_determinism_and_fingerprints() {
    let (cfg, m, bank) = setup(10);
    let data = cfg.manifest(Split::ProbeTrain);
    let layers: BTreeSet<usize> = [1, 2, 4].into();
    let a = cache_activations(&m, &bank, &data, &layers, &probe_query()).unwrap();
    assert_eq!(a.len(), 30);
    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    a.write(&d1).unwrap();
    cache_activations(&m, &bank, &data, &layers, &probe_query()).unwrap().write(&d2).unwrap();
    for f in std::fs::read_dir(&d1).unwrap() {
        let f = f.unwrap().file_name();
        assert_eq!(std::fs::read(d1.join(&f)).unwrap(), std::fs::read(d2.join(&f)).unwrap());
    }
    assert_eq!(ActivationStore::open(&d1, &m, &data).unwrap(), a);

    let mut other_cfg = cfg.clone();
    other_cfg.seed = 99;
    let other = MultimodalModel::new(&other_cfg).unwrap();
    assert!(matches!(
        ActivationStore::open(&d1, &other, &data),
        Err(Error::Fingerprint { what: "model", .. })
    ));
    // Same store directory with different contents is refused.
    let fewer = cache_activations(&m, &bank, &data, &[1].into(), &probe_query()).unwrap();
    assert!(matches!(fewer.write(&d1), Err(Error::Fingerprint { .. })));
}

#[test]
fn probing_does_not_mutate_the_model() {
    let (mut cfg, m, _) = setup(16);
    cfg.data.probe_eval_items = 8;
    cfg.probe.tasks = [Task::Gen].into();
    let before = m.fingerprint();
    let r = probe_model(&m, &cfg, Some(&[2].into()), None).unwrap();
    assert_eq!(before, m.fingerprint());
    assert_eq!(r.rows.len(), 1);
}

#[test]
fn zero_epochs_returns_initialization() {
    let (cfg, m, bank) = setup(8);
    let data = cfg.manifest(Split::ProbeTrain);
    let store = cache_activations(&m, &bank, &data, &[3].into(), &probe_query()).unwrap();
    let targets = task_targets(&bank, &data, Task::Depth).unwrap();
    let sched = ProbeConfig { epochs: 0, ..cfg.probe.clone() };
    let a = train_probe(&store, 3, Task::Depth, &targets, &sched, &cfg.resampler).unwrap();
    let b = train_probe(&store, 3, Task::Depth, &targets, &ProbeConfig { epochs: 1, ..sched.clone() }, &cfg.resampler)
        .unwrap();
    assert!(a.final_train_loss.is_none());
    // The untrained probe equals a fresh one drawn from the same seed.
    let c = train_probe(&store, 3, Task::Depth, &targets, &sched, &cfg.resampler).unwrap();
    assert_eq!(a.store.fingerprint(), c.store.fingerprint());
    assert_ne!(a.store.fingerprint(), b.store.fingerprint());
}

#[test]
fn constant_targets_are_learned() {
    let (cfg, m, bank) = setup(32);
    let data = cfg.manifest(Split::ProbeTrain);
    let store = cache_activations(&m, &bank, &data, &[2].into(), &probe_query()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = unit_rows(&mut rng, 36, 32);
    let targets = vec![c; 32];
    let sched = ProbeConfig { epochs: 60, lr: 1e-2, batch_size: 8, ..cfg.probe.clone() };
    let p = train_probe(&store, 2, Task::Depth, &targets, &sched, &cfg.resampler).unwrap();
    let s = eval_probe(&p, &store, &targets).unwrap();
    assert!(s.cosine > 0.95, "cosine {}", s.cosine);
}

#[test]
fn cosine_identity_antipodal_and_skips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t: Vec<Tensor> = (0..5).map(|_| unit_rows(&mut rng, 4, 8)).collect();
    let neg: Vec<Tensor> = t
        .iter()
        .map(|x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| -v).collect()).unwrap())
        .collect();
    assert!((mean_token_cosine(&t, &t).unwrap().cosine - 1.0).abs() < 1e-6);
    assert!((mean_token_cosine(&neg, &t).unwrap().cosine + 1.0).abs() < 1e-6);
    let mut z = t.clone();
    z[0].data_mut()[..8].iter_mut().for_each(|v| *v = 0.0);
    let s = mean_token_cosine(&z, &t).unwrap();
    assert_eq!(s.skipped, 1);
    assert!(s.flagged);
    assert!((s.cosine - 1.0).abs() < 1e-6);
}

#[test]
fn untrained_probe_is_near_zero_on_random_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = embed_distill::diffcore::ParamStore::new();
    let block = embed_distill::resampler::ResamplerBlock::register(
        &mut ps, "probe", 4, 16, 32, true, &ResamplerConfig::default(), &mut rng,
    )
    .unwrap();
    let preds: Vec<Tensor> = (0..100)
        .map(|_| block.resample(&ps, &unit_rows(&mut rng, 10, 16)).unwrap())
        .collect();
    let targets: Vec<Tensor> = (0..100).map(|_| unit_rows(&mut rng, 4, 32)).collect();
    let c = mean_token_cosine(&preds, &targets).unwrap().cosine;
    assert!(c.abs() < 0.25, "cosine {c}");
}

fn row(layer: usize, task: Task, cosine: f64) -> ProbeRow {
    ProbeRow { layer, task, cosine, n: 10, flagged: false, final_train_loss: None }
}

#[test]
fn report_rows_argmax_and_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<ProbeRow> = (0..8)
        .flat_map(|l| Task::ALL.map(|t| row(l, t, 0.0)))
        .map(|mut r| {
            r.cosine = rng.gen_range(-1.0..1.0);
            r
        })
        .collect();
    let rep = ProbeReport { model_fingerprint: "m".into(), config_hash: "c".into(), rows };
    let dir = tempfile::tempdir().unwrap();
    emit_report(&rep, &dir.path().join("a")).unwrap();
    emit_report(&rep, &dir.path().join("b")).unwrap();
    for f in ["report.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    let csv = std::fs::read_to_string(dir.path().join("a/report.csv")).unwrap();
    let parsed = ProbeReport::parse_csv(&csv).unwrap();
    assert_eq!(parsed.len(), 24);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/summary.json")).unwrap()).unwrap();
    for task in Task::ALL {
        let best = parsed
            .iter()
            .filter(|r| r.1 == task)
            .fold((0usize, f64::MIN), |b, r| if r.2 > b.1 { (r.0, r.2) } else { b });
        assert_eq!(summary["argmax_layer"][task.name()].as_u64().unwrap() as usize, best.0);
    }
    let empty = ProbeReport { rows: vec![], ..rep };
    assert!(emit_report(&empty, dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_stays_in_range(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-3.0f32..3.0)).unwrap()).collect();
        let b: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(vec![rows, cols], |_| rng.gen_range(-3.0f32..3.0)).unwrap()).collect();
        let c = mean_token_cosine(&a, &b).unwrap().cosine;
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}
