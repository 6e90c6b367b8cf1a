//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 1-3 are experiments. They read finished runs from the ablation
//! cache (`$PAAA_ACCEPTANCE_DIR`, default `target/acceptance`). With
//! `PAAA_ACCEPTANCE_RUN=1` missing runs are trained first, which takes hours
//! on one core. Criteria 4-8 are computed here in a few seconds.
//!
//! The process fails when any of 4-8 fails. Experimental failures are
//! reported but only fail the process under `PAAA_ACCEPTANCE_STRICT=1`.

use paaa::ablation::{cached_results, median_for, run_plan, AblationPlan, RunResult};
use paaa::config::{Mode, RunConfig};
use paaa::dataio::{paired_iterator, Batch, Dataset, PreparedSet};
use paaa::losses::{adv_gen_loss, disc_loss, perceptual_loss, seg_loss, total_loss, LossRecord, LossWeights};
use paaa::metrics::{ausde, gap, iou};
use paaa::nets::{DiscriminatorConfig, ExtractorConfig, ExtractorSource, FeatureExtractor, FeaturePyramid, SegmenterConfig};
use paaa::raster::Mask;
use paaa::synthdata::{generate_sample, DomainSpec};
use paaa::trainer::{Checkpoint, Trainer};
use paaa::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

const EPS: f64 = 1e-7;
const FD_TOL: f64 = 1e-3;
const CLOSED_FORM_TOL: f64 = 1e-6;
const GAP_MIN: f64 = 0.10;
const RECOVERY_MIN: f64 = 0.5;
const TIE: f64 = 0.01;

type Outcome = Result<String, String>;

struct Line {
    id: u8,
    name: &'static str,
    outcome: Outcome,
}

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

// ---- criteria 1-3 -------------------------------------------------------

fn cache_dir() -> PathBuf {
    std::env::var_os("PAAA_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn experiment_results(plan: &AblationPlan) -> Result<Vec<RunResult>, String> {
    let cache = cache_dir();
    if std::env::var("PAAA_ACCEPTANCE_RUN").is_ok_and(|v| v == "1") {
        return run_plan(plan, &cache, |m| eprintln!("{m}")).map_err(|e| e.to_string());
    }
    cached_results(plan, &cache).map_err(|e| e.to_string())
}

fn medians(results: &[RunResult], mode: Mode, seeds: usize) -> Result<(f64, f64), String> {
    let n = results.iter().filter(|r| r.mode == mode).count();
    if n < seeds {
        return Err(format!(
            "{mode}: {n}/{seeds} seeds in {} (rerun with PAAA_ACCEPTANCE_RUN=1)",
            cache_dir().display()
        ));
    }
    Ok(median_for(results, mode).expect("seeds present"))
}

fn experiments() -> Vec<Line> {
    let plan = AblationPlan::desk_scale();
    let seeds = plan.seeds.len();
    let results = experiment_results(&plan);
    let get = |mode| -> Result<(f64, f64), String> { medians(results.as_ref().map_err(Clone::clone)?, mode, seeds) };
    let pct = |v: f64| format!("{:.2}", 100.0 * v);

    let c1 = (|| {
        let (so, so_ausde) = get(Mode::SourceOnly)?;
        let (or, or_ausde) = get(Mode::Oracle)?;
        let slowest = results.as_ref().unwrap().iter().map(|r| r.seconds).fold(0.0, f64::max);
        let msg = format!(
            "source_only IOU {} vs oracle IOU {} (gap {} points; AUSDE {:.2} vs {:.2}; slowest run {:.1} min)",
            pct(so),
            pct(or),
            pct(or - so),
            so_ausde,
            or_ausde,
            slowest / 60.0
        );
        check(or - so >= GAP_MIN, msg.clone(), format!("{msg}; need >= {} points", pct(GAP_MIN)))
    })();

    let c2 = (|| {
        let (so, so_ausde) = get(Mode::SourceOnly)?;
        let (or, _) = get(Mode::Oracle)?;
        let (pa, pa_ausde) = get(Mode::Paaa)?;
        let recovered = if or > so { (pa - so) / (or - so) } else { f64::NAN };
        let msg = format!(
            "paaa IOU {} recovers {:.1}% of the gap; AUSDE paaa {:.2} vs source_only {:.2}",
            pct(pa),
            100.0 * recovered,
            pa_ausde,
            so_ausde
        );
        check(
            recovered >= RECOVERY_MIN && pa_ausde < so_ausde,
            msg.clone(),
            format!("{msg}; need >= 50% and lower AUSDE"),
        )
    })();

    let c3 = (|| {
        let (adv, _) = get(Mode::AdversarialOnly)?;
        let (pa, _) = get(Mode::Paaa)?;
        let msg = format!("paaa IOU {} vs adversarial_only IOU {}", pct(pa), pct(adv));
        if pa >= adv {
            Ok(msg)
        } else if adv - pa <= TIE {
            Err(format!("{msg}; soft failure, tie within 1 point"))
        } else {
            Err(msg)
        }
    })();

    vec![
        Line { id: 1, name: "domain gap exists", outcome: c1 },
        Line { id: 2, name: "adaptation recovers the gap", outcome: c2 },
        Line { id: 3, name: "ablation ordering", outcome: c3 },
    ]
}

// ---- criterion 4 --------------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn fd_error(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let num = (f(&p) - f(&m)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((num - a).abs() / num.abs().max(a.abs()).max(1e-6));
    }
    worst
}

fn onehot(rng: &mut ChaCha8Rng, b: usize, s: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros([b, 2, s, s]);
    for bi in 0..b {
        for i in 0..s * s {
            let c = rng.gen_range(0..2);
            t.plane_mut(bi, c)[i] = 1.0;
        }
    }
    t
}

fn binary_probs(rng: &mut ChaCha8Rng, b: usize, s: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros([b, 2, s, s]);
    for bi in 0..b {
        for i in 0..s * s {
            let p = rng.gen_range(0.05..0.95);
            t.plane_mut(bi, 0)[i] = p;
            t.plane_mut(bi, 1)[i] = 1.0 - p;
        }
    }
    t
}

fn loss_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let probs = binary_probs(&mut rng, 2, 8);
    let labels = onehot(&mut rng, 2, 8);
    let g = seg_loss(&probs, &labels, EPS).map_err(|e| e.to_string())?.grad;
    errs.push(("seg", fd_error(&probs, &g, |p| seg_loss(p, &labels, EPS).unwrap().value)));

    let s = uniform(&mut rng, [2, 1, 6, 6], 0.05, 0.95);
    let t = uniform(&mut rng, [2, 1, 6, 6], 0.05, 0.95);
    let g = adv_gen_loss(&t, EPS).map_err(|e| e.to_string())?.grad;
    errs.push(("adv_gen", fd_error(&t, &g, |x| adv_gen_loss(x, EPS).unwrap().value)));
    let d = disc_loss(&s, &t, EPS).map_err(|e| e.to_string())?;
    errs.push(("disc/source", fd_error(&s, &d.grad_source, |x| disc_loss(x, &t, EPS).unwrap().value)));
    errs.push(("disc/target", fd_error(&t, &d.grad_target, |x| disc_loss(&s, x, EPS).unwrap().value)));

    let shapes = [[1, 3, 8, 8], [1, 4, 4, 4], [1, 4, 2, 2], [1, 5, 1, 1]];
    let a: Vec<_> = shapes.iter().map(|&sh| uniform(&mut rng, sh, -1.0, 1.0)).collect();
    let b: Vec<_> = shapes.iter().map(|&sh| uniform(&mut rng, sh, -1.0, 1.0)).collect();
    let label = FeaturePyramid { levels: b };
    let (_, grads) = perceptual_loss(&FeaturePyramid { levels: a.clone() }, &label).map_err(|e| e.to_string())?;
    let mut per_err: f64 = 0.0;
    for lvl in 0..a.len() {
        per_err = per_err.max(fd_error(&a[lvl], &grads[lvl], |x| {
            let mut levels = a.clone();
            levels[lvl] = x.clone();
            perceptual_loss(&FeaturePyramid { levels }, &label).unwrap().0
        }));
    }
    errs.push(("perceptual", per_err));

    let ex = FeatureExtractor::<f64>::new(&ExtractorConfig { width_divisor: 16, ..ExtractorConfig::fallback() })
        .map_err(|e| e.to_string())?;
    let img = uniform(&mut rng, [1, 1, 32, 32], 0.0, 1.0);
    let pa = ex.forward(&img).map_err(|e| e.to_string())?;
    let pb = ex.forward(&img).map_err(|e| e.to_string())?;
    let (per_same, _) = perceptual_loss(&pa, &pb).map_err(|e| e.to_string())?;

    let ln2 = std::f64::consts::LN_2;
    let half4 = Tensor::full([1, 2, 4, 4], 0.5);
    let lab4 = onehot(&mut rng, 1, 4);
    let closed = [
        ("16 log 2", seg_loss(&half4, &lab4, EPS).unwrap().value, 16.0 * ln2),
        ("9 log 2", adv_gen_loss(&Tensor::full([1, 1, 3, 3], 0.5), EPS).unwrap().value, 9.0 * ln2),
        ("100.07", total_loss(1.0, 1.0, 1.0, &LossWeights::default()), 100.07),
    ];

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let closed_err = closed.iter().map(|(_, v, want)| (v - want).abs()).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    let msg = format!(
        "max FD rel err {worst:.1e} ({detail}); perceptual(x, x) = {per_same}; closed forms within {closed_err:.1e}"
    );
    check(worst <= FD_TOL && per_same == 0.0 && closed_err <= CLOSED_FORM_TOL, msg.clone(), msg)
}

// ---- criterion 5 --------------------------------------------------------

fn brute_iou(p: &Mask, r: &Mask) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for y in 0..p.height {
        for x in 0..p.width {
            let (a, b) = (p.get(x, y), r.get(x, y));
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn brute_ausde(p: &Mask, r: &Mask) -> (f64, usize) {
    let lowest = |m: &Mask, x: usize| (0..m.height).rev().find(|&y| m.get(x, y));
    let (mut total, mut n, mut skipped) = (0.0, 0, 0);
    for x in 0..p.width {
        match (lowest(p, x), lowest(r, x)) {
            (None, None) => skipped += 1,
            (Some(a), Some(b)) => {
                total += (a as f64 - b as f64).abs();
                n += 1;
            }
            _ => {
                total += p.height as f64;
                n += 1;
            }
        }
    }
    (if n == 0 { 0.0 } else { total / n as f64 }, skipped)
}

fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let mut m = Mask::new(16, 16);
    let density = rng.gen_range(0.0..1.0);
    for y in 0..16 {
        for x in 0..16 {
            m.set(x, y, rng.gen_bool(density));
        }
    }
    m
}

fn metric_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (p, r) = (random_mask(&mut rng), random_mask(&mut rng));
        let a = ausde(&p, &r).map_err(|e| e.to_string())?;
        let (bv, bs) = brute_ausde(&p, &r);
        if iou(&p, &r).map_err(|e| e.to_string())? != brute_iou(&p, &r) || a.value != bv || a.skipped != bs {
            mismatches += 1;
        }
    }
    let g1 = (100.0 * gap(3.21, 2.65)).round() / 100.0;
    let g2 = (100.0 * gap(85.77, 89.30)).round() / 100.0;
    let msg = format!("{mismatches}/200 mismatches; gap(3.21, 2.65) = {g1}, gap(85.77, 89.30) = {g2}");
    check(mismatches == 0 && g1 == 0.56 && g2 == 3.53, msg.clone(), msg)
}

// ---- criterion 6 --------------------------------------------------------

fn constant_fidelity() -> Outcome {
    let golden = include_str!("fixtures/default_config.toml");
    let cfg = RunConfig::default();
    let text = cfg.to_toml();
    let l = &cfg.loss;
    let t = &cfg.train;
    let msg = format!(
        "lambda ({}, {}, {}), beta ({}, {}), wd {}, lr ({}, {}), input {}",
        l.lambda_seg,
        l.lambda_adv,
        l.lambda_per,
        t.adam_beta1,
        t.adam_beta2,
        t.weight_decay,
        t.lr_seg,
        t.lr_disc,
        cfg.model.input_size
    );
    let constants = (l.lambda_seg, l.lambda_adv, l.lambda_per) == (100.0, 0.01, 0.06)
        && (t.adam_beta1, t.adam_beta2) == (0.9, 0.99)
        && t.weight_decay == 1e-4
        && (t.lr_seg, t.lr_disc) == (1e-3, 1e-4)
        && cfg.model.input_size == 224;
    let parsed = RunConfig::from_toml(golden).map_err(|e| e.to_string())? == cfg;
    check(
        text == golden && constants && parsed,
        format!("{msg}; byte-identical to the golden fixture"),
        format!("{msg}; fixture equal: {}, constants: {constants}, parses: {parsed}", text == golden),
    )
}

// ---- criterion 7 --------------------------------------------------------

const SIZE: usize = 32;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.input_size = SIZE;
    cfg.model.segmenter = SegmenterConfig { base_width: 4, depth: 2, ..Default::default() };
    cfg.model.discriminator = DiscriminatorConfig { widths: vec![4, 8, 8, 8], ..Default::default() };
    cfg.model.extractor = ExtractorConfig { width_divisor: 16, ..ExtractorConfig::fallback() };
    cfg.train.mode = Mode::Paaa;
    cfg.train.batch_size = 2;
    cfg.train.seed = 11;
    cfg
}

fn prepared(spec: DomainSpec, n: usize, labels: bool) -> Result<PreparedSet, String> {
    let spec = DomainSpec { width: 48, height: 40, ..spec };
    let domain = spec.domain;
    let samples = (0..n).map(|i| generate_sample(&spec, i)).collect::<paaa::Result<Vec<_>>>();
    let ds = Dataset::from_samples(domain, labels, samples.map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    PreparedSet::new(&ds, SIZE).map_err(|e| e.to_string())
}

fn run(tr: &mut Trainer, bs: &[(Batch, Batch)]) -> Result<Vec<LossRecord>, String> {
    bs.iter().map(|(s, t)| tr.train_step(s, Some(t)).map_err(|e| e.to_string())).collect()
}

fn determinism() -> Outcome {
    let cfg = small_config();
    let source = prepared(DomainSpec::default_source(), 6, true)?;
    let target = prepared(DomainSpec::default_target(), 5, false)?;
    let bs: Vec<_> = paired_iterator(&source, &target, 2, cfg.train.seed).map_err(|e| e.to_string())?.take(20).collect();

    let first = run(&mut Trainer::new(&cfg).map_err(|e| e.to_string())?, &bs)?;
    let second = run(&mut Trainer::new(&cfg).map_err(|e| e.to_string())?, &bs)?;
    let same = first.iter().zip(&second).all(|(a, b)| {
        [a.seg, a.adv_gen, a.per, a.disc, a.total].map(f64::to_bits) == [b.seg, b.adv_gen, b.per, b.disc, b.total].map(f64::to_bits)
    });

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.safetensors");
    let mut head = Trainer::new(&cfg).map_err(|e| e.to_string())?;
    run(&mut head, &bs[..10])?;
    head.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(&cfg, &ck).map_err(|e| e.to_string())?;
    let tail = run(&mut resumed, &bs[10..])?;
    let mut whole = Trainer::new(&cfg).map_err(|e| e.to_string())?;
    run(&mut whole, &bs)?;
    let resume_ok = tail == first[10..] && resumed.checkpoint().tensors == whole.checkpoint().tensors;

    let msg = format!(
        "20-step LossRecord streams bit-identical: {same}; resume at step 10 matches uninterrupted run: {resume_ok}"
    );
    check(same && resume_ok && first.len() == 20, msg.clone(), msg)
}

fn main() {
    let strict = std::env::var("PAAA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut lines = experiments();
    lines.push(Line { id: 4, name: "loss correctness", outcome: loss_correctness() });
    lines.push(Line { id: 5, name: "metric oracle equivalence", outcome: metric_equivalence() });
    lines.push(Line { id: 6, name: "paper-constant fidelity", outcome: constant_fidelity() });
    lines.push(Line { id: 7, name: "determinism and checkpoint integrity", outcome: determinism() });

    let offline = lines.iter().filter(|l| (4..=7).contains(&l.id)).all(|l| l.outcome.is_ok());
    let fallback = small_config().model.extractor.source == ExtractorSource::Fallback
        && std::env::var_os("PAAA_VGG19_WEIGHTS").is_none();
    let msg = format!("criteria 4-7 passed: {offline}; fallback extractor only, no weight file or network: {fallback}");
    lines.push(Line { id: 8, name: "offline capability", outcome: check(offline && fallback, msg.clone(), msg) });

    let mut hard_failure = false;
    for l in &lines {
        match &l.outcome {
            Ok(m) => println!("PASS criterion {} ({}): {m}", l.id, l.name),
            Err(m) => {
                println!("FAIL criterion {} ({}): {m}", l.id, l.name);
                hard_failure |= l.id >= 4 || strict;
            }
        }
    }
    if hard_failure {
        std::process::exit(1);
    }
}
