use super::*;
use crate::nets::{DiscriminatorConfig, ExtractorConfig, SegmenterConfig};
use crate::synthdata::{generate_sample, DomainSpec};

const SIZE: usize = 32;

fn small_config(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.input_size = SIZE;
    cfg.model.segmenter = SegmenterConfig { base_width: 4, depth: 2, ..Default::default() };
    cfg.model.discriminator = DiscriminatorConfig { widths: vec![4, 8, 8, 8], ..Default::default() };
    cfg.model.extractor = ExtractorConfig { width_divisor: 16, ..ExtractorConfig::fallback() };
    cfg.train.mode = mode;
    cfg.train.batch_size = 2;
    cfg.train.seed = 3;
    cfg.eval.every = 0;
    cfg
}

fn dataset(domain: Domain, n: usize, labels: bool) -> Dataset {
    let base = match domain {
        Domain::Source => DomainSpec::default_source(),
        Domain::Target => DomainSpec::default_target(),
    };
    let spec = DomainSpec { width: 48, height: 40, ..base };
    let samples = (0..n).map(|i| generate_sample(&spec, i).unwrap()).collect();
    Dataset::from_samples(domain, labels, samples).unwrap()
}

fn data(mode: Mode) -> TrainData {
    let labelled = match mode {
        Mode::Oracle => dataset(Domain::Target, 6, true),
        _ => dataset(Domain::Source, 6, true),
    };
    TrainData {
        labelled: PreparedSet::new(&labelled, SIZE).unwrap(),
        unlabelled: mode.adapts().then(|| PreparedSet::new(&dataset(Domain::Target, 5, false), SIZE).unwrap()),
        val: Some(dataset(Domain::Target, 3, true)),
    }
}

fn batches(mode: Mode, d: &TrainData, n: usize) -> Vec<(Batch, Option<Batch>)> {
    match &d.unlabelled {
        Some(u) if mode.adapts() => {
            paired_iterator(&d.labelled, u, 2, 3).unwrap().take(n).map(|(s, t)| (s, Some(t))).collect()
        }
        _ => labelled_iterator(&d.labelled, 2, 3).unwrap().take(n).map(|s| (s, None)).collect(),
    }
}

fn run_steps(tr: &mut Trainer, bs: &[(Batch, Option<Batch>)]) -> Vec<LossRecord> {
    bs.iter().map(|(s, t)| tr.train_step(s, t.as_ref()).unwrap()).collect()
}

fn values<M: Module<f32>>(m: &M) -> Vec<(String, Tensor<f32>)> {
    m.named_values()
}

#[test]
fn modes_construct_only_the_networks_they_use() {
    for (mode, disc, ex) in [
        (Mode::SourceOnly, false, false),
        (Mode::Oracle, false, false),
        (Mode::AdversarialOnly, true, false),
        (Mode::Paaa, true, true),
    ] {
        let tr = Trainer::new(&small_config(mode)).unwrap();
        assert_eq!(tr.state().disc.is_some(), disc, "{mode}");
        assert_eq!(tr.extractor().is_some(), ex, "{mode}");
    }
}

#[test]
fn paaa_step_is_live() {
    let d = data(Mode::Paaa);
    let mut tr = Trainer::new(&small_config(Mode::Paaa)).unwrap();
    let before = values(&tr.state().disc.as_ref().unwrap().net);
    let r = run_steps(&mut tr, &batches(Mode::Paaa, &d, 1))[0];
    for v in [r.seg, r.adv_gen, r.per, r.disc, r.total] {
        assert!(v.is_finite() && v > 0.0, "{r:?}");
    }
    assert_eq!(r.step, 1);
    assert!((r.total - (100.0 * r.seg + 0.01 * r.adv_gen + 0.06 * r.per)).abs() < 1e-9 * r.total);
    assert_ne!(before, values(&tr.state().disc.as_ref().unwrap().net));
}

#[test]
fn source_only_records_no_adaptation_terms() {
    let d = data(Mode::SourceOnly);
    let mut tr = Trainer::new(&small_config(Mode::SourceOnly)).unwrap();
    for r in run_steps(&mut tr, &batches(Mode::SourceOnly, &d, 3)) {
        assert_eq!((r.adv_gen, r.per, r.disc), (0.0, 0.0, 0.0));
        assert_eq!(r.total, 100.0 * r.seg);
    }
}

#[test]
fn batches_must_match_the_mode() {
    let d = data(Mode::Paaa);
    let bs = batches(Mode::Paaa, &d, 1);
    let mut tr = Trainer::new(&small_config(Mode::Paaa)).unwrap();
    assert!(tr.train_step(&bs[0].0, None).is_err());
    assert!(tr.train_step(&bs[0].0, Some(&bs[0].0)).is_err());
    assert!(tr.train_step(bs[0].1.as_ref().unwrap(), bs[0].1.as_ref()).is_err());
    assert_eq!(tr.state().step, 0);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    for mode in [Mode::Paaa, Mode::SourceOnly] {
        let d = data(mode);
        let bs = batches(mode, &d, 20);
        let a = run_steps(&mut Trainer::new(&small_config(mode)).unwrap(), &bs);
        let b = run_steps(&mut Trainer::new(&small_config(mode)).unwrap(), &bs);
        assert_eq!(a, b);
    }
}

#[test]
fn sequential_execution_matches_parallel() {
    let d = data(Mode::Paaa);
    let bs = batches(Mode::Paaa, &d, 4);
    let a = run_steps(&mut Trainer::new(&small_config(Mode::Paaa)).unwrap(), &bs);
    exec::set_sequential(true);
    let b = run_steps(&mut Trainer::new(&small_config(Mode::Paaa)).unwrap(), &bs);
    exec::set_sequential(false);
    assert_eq!(a, b);
}

#[test]
fn zero_perceptual_weight_reproduces_adversarial_only() {
    let d = data(Mode::Paaa);
    let bs = batches(Mode::Paaa, &d, 8);
    let mut cfg = small_config(Mode::Paaa);
    cfg.loss.lambda_per = 0.0;
    let mut a = Trainer::new(&cfg).unwrap();
    assert!(a.extractor().is_none());
    let mut b = Trainer::new(&small_config(Mode::AdversarialOnly)).unwrap();
    assert_eq!(run_steps(&mut a, &bs), run_steps(&mut b, &bs));
    assert_eq!(values(&a.state().segmenter), values(&b.state().segmenter));
}

#[test]
fn checkpoint_resume_continues_the_trajectory() {
    let d = data(Mode::Paaa);
    let bs = batches(Mode::Paaa, &d, 24);
    let cfg = small_config(Mode::Paaa);
    let full = run_steps(&mut Trainer::new(&cfg).unwrap(), &bs);

    let mut first = Trainer::new(&cfg).unwrap();
    run_steps(&mut first, &bs[..12]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    first.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck, first.checkpoint());
    let mut resumed = Trainer::from_checkpoint(&cfg, &ck).unwrap();
    assert_eq!(resumed.state().step, 12);
    let rest = run_steps(&mut resumed, &bs[12..]);
    assert_eq!(&full[12..], &rest[..]);
}

#[test]
fn checkpoint_rejects_other_architectures() {
    let cfg = small_config(Mode::SourceOnly);
    let ck = Trainer::new(&cfg).unwrap().checkpoint();
    let mut other = cfg.clone();
    other.model.segmenter.base_width = 8;
    assert!(matches!(Trainer::from_checkpoint(&other, &ck), Err(Error::Checkpoint(_))));
    let mut forged = ck.clone();
    forged.meta.config.model.segmenter.base_width = 8;
    let err = load_segmenter(&forged).err().unwrap();
    assert!(err.to_string().contains("architecture mismatch"), "{err}");
}

#[test]
fn generator_and_discriminator_updates_touch_only_their_network() {
    let d = data(Mode::AdversarialOnly);
    let bs = batches(Mode::AdversarialOnly, &d, 1);
    let mut cfg = small_config(Mode::AdversarialOnly);
    cfg.loss.lambda_seg = 0.0;
    let mut tr = Trainer::new(&cfg).unwrap();
    let g0 = values(&tr.state().segmenter);
    let d0 = values(&tr.state().disc.as_ref().unwrap().net);
    let (rec, probs) = tr.generator_phase(&bs[0].0, bs[0].1.as_ref()).unwrap();
    assert!(rec.adv_gen > 0.0);
    let g1 = values(&tr.state().segmenter);
    assert_ne!(g0, g1);
    assert_eq!(d0, values(&tr.state().disc.as_ref().unwrap().net));
    tr.discriminator_phase(&probs, 2).unwrap();
    assert_ne!(d0, values(&tr.state().disc.as_ref().unwrap().net));
    assert_eq!(g1, values(&tr.state().segmenter));
}

#[test]
fn segmenter_update_ignores_the_discriminator_learning_rate() {
    let d = data(Mode::Paaa);
    let bs = batches(Mode::Paaa, &d, 1);
    let mut slow = small_config(Mode::Paaa);
    slow.train.lr_disc = 1e-9;
    let mut fast = slow.clone();
    fast.train.lr_disc = 1.0;
    let mut a = Trainer::new(&slow).unwrap();
    let mut b = Trainer::new(&fast).unwrap();
    run_steps(&mut a, &bs);
    run_steps(&mut b, &bs);
    assert_eq!(values(&a.state().segmenter), values(&b.state().segmenter));
}

#[test]
fn trained_discriminator_sees_a_shifted_band() {
    let d = data(Mode::AdversarialOnly);
    let mut tr = Trainer::new(&small_config(Mode::AdversarialOnly)).unwrap();
    run_steps(&mut tr, &batches(Mode::AdversarialOnly, &d, 1));
    let band = |top: usize| {
        let mut m = Mask::new(SIZE, SIZE);
        for y in top..top + 8 {
            for x in 0..SIZE {
                m.set(x, y, true);
            }
        }
        crate::dataio::onehot(&m)
    };
    let net = &tr.state().disc.as_ref().unwrap().net;
    let a = net.forward(&band(4)).unwrap();
    let b = net.forward(&band(20)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn extractor_is_frozen_through_a_run() {
    let mut cfg = small_config(Mode::Paaa);
    cfg.train.steps = 4;
    let d = data(Mode::Paaa);
    let reference = FeatureExtractor::<f32>::new(&cfg.model.extractor).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &d, dir.path(), None).unwrap();
    let after = out.trainer.extractor().unwrap().parameters();
    assert_eq!(reference.parameters(), after);
}

#[test]
fn run_writes_log_and_checkpoints() {
    let mut cfg = small_config(Mode::AdversarialOnly);
    cfg.train.steps = 6;
    cfg.eval.every = 3;
    let d = data(Mode::AdversarialOnly);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &d, dir.path(), None).unwrap();
    assert_eq!(out.history.len(), 6);
    assert_eq!(out.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![3, 6]);
    let best = out.best.unwrap();
    assert!(out.evals.iter().all(|e| e.iou <= best.iou));
    let ck = Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(ck.meta.step, best.step);
    assert_eq!(Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap().meta.step, 6);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["event"], "header");
    assert_eq!(lines[0]["config"]["loss"]["lambda_seg"], 100.0);
    assert_eq!(lines[0]["config"]["train"]["adam_beta2"], 0.99);
    assert_eq!(lines.iter().filter(|l| l["event"] == "step").count(), 6);
    assert_eq!(lines.iter().filter(|l| l["event"] == "eval").count(), 2);
}

#[test]
fn zero_steps_emit_the_initial_checkpoint() {
    let mut cfg = small_config(Mode::SourceOnly);
    cfg.train.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data(Mode::SourceOnly), dir.path(), None).unwrap();
    assert!(out.history.is_empty() && out.evals.is_empty());
    let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.meta.step, 0);
    assert_eq!(ck, Trainer::new(&cfg).unwrap().checkpoint());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = small_config(Mode::Paaa);
    cfg.train.steps = 14;
    let d = data(Mode::Paaa);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, &d, &dir.path().join("full"), None).unwrap();

    let mut short = cfg.clone();
    short.train.steps = 4;
    let part = dir.path().join("part");
    train(&short, &d, &part, None).unwrap();
    let ck = Checkpoint::load(&part.join(LAST_CHECKPOINT)).unwrap();
    let rest = train(&cfg, &d, &part, Some(&ck)).unwrap();
    assert_eq!(&full.history[4..], &rest.history[..]);
    let log = std::fs::read_to_string(part.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"event\":\"step\"")).count(), 14);
}

#[test]
fn non_finite_state_aborts_and_keeps_the_last_checkpoint() {
    let mut cfg = small_config(Mode::SourceOnly);
    cfg.train.steps = 2;
    let d = data(Mode::SourceOnly);
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &d, dir.path(), None).unwrap();
    let last = dir.path().join(LAST_CHECKPOINT);
    let saved = std::fs::read(&last).unwrap();

    let mut poisoned = Checkpoint::load(&last).unwrap();
    let (_, t) = poisoned.tensors.iter_mut().find(|(n, _)| n == "segmenter.head.weight").unwrap();
    t.data_mut()[0] = f32::NAN;
    cfg.train.steps = 5;
    let err = train(&cfg, &d, dir.path(), Some(&poisoned)).err().unwrap();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(std::fs::read(&last).unwrap(), saved);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert!(log.lines().last().unwrap().contains("\"event\":\"abort\""));
}

#[test]
fn evaluation_is_finite_and_idempotent() {
    let cfg = small_config(Mode::SourceOnly);
    let tr = Trainer::new(&cfg).unwrap();
    let val = dataset(Domain::Target, 3, true);
    let a = evaluate(&tr.state().segmenter, SIZE, &val).unwrap();
    let b = evaluate_checkpoint(&tr.checkpoint(), &val).unwrap();
    assert_eq!(a, b);
    assert!(a.iou.is_finite() && a.ausde.is_finite());
    assert_eq!(a.images, 3);
    let hidden = Dataset::from_samples(Domain::Target, false, (0..2).map(|i| val.sample(i).clone()).collect()).unwrap();
    assert!(matches!(evaluate(&tr.state().segmenter, SIZE, &hidden), Err(Error::LabelsHidden { .. })));
}

#[test]
fn predictions_come_back_at_native_resolution() {
    let tr = Trainer::new(&small_config(Mode::SourceOnly)).unwrap();
    let val = dataset(Domain::Target, 2, true);
    for m in predict_masks(&tr.state().segmenter, SIZE, &val).unwrap() {
        assert_eq!((m.width, m.height), (48, 40));
    }
}

#[test]
fn oracle_fed_masks_score_perfectly() {
    let val = dataset(Domain::Target, 3, true);
    let items: Vec<_> = (0..3).map(|i| (val.id(i).to_string(), val.mask(i).unwrap().clone(), val.mask(i).unwrap().clone())).collect();
    let r = MetricReport::from_masks(&items).unwrap();
    assert_eq!((r.iou, r.ausde), (1.0, 0.0));
}
