//! Alternating optimization of the segmenter and the patch discriminator,
//! run-level training with periodic evaluation, checkpoints and a JSONL log,
//! and checkpoint evaluation.

mod checkpoint;
#[cfg(test)]
mod tests;

pub use checkpoint::{BestMetric, Checkpoint, CheckpointMeta, FORMAT, VERSION};

use crate::config::{Mode, RunConfig};
use crate::dataio::{labelled_iterator, load_dataset, paired_iterator, preprocess_image, Batch, Dataset, PreparedSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{adv_gen_loss, disc_loss, perceptual_loss, seg_loss, total_loss, LossRecord, LossWeights};
use crate::metrics::MetricReport;
use crate::nets::{Discriminator, FeatureExtractor, Segmenter};
use crate::nn::Module;
use crate::optim::{Adam, AdamConfig};
use crate::raster::Mask;
use crate::synthdata::Domain;
use crate::tensor::{Float, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

const SEGMENTER_STREAM: u64 = 0;
const DISCRIMINATOR_STREAM: u64 = 1;

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const LOG_FILE: &str = "log.jsonl";

/// The discriminator and its optimizer.
#[derive(Clone, Debug)]
pub struct Opponent {
    pub net: Discriminator<f32>,
    pub opt: Adam<f32>,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub segmenter: Segmenter<f32>,
    pub seg_opt: Adam<f32>,
    /// Absent in modes without the adversarial term.
    pub disc: Option<Opponent>,
    pub best: Option<BestMetric>,
}

pub struct Trainer {
    config: RunConfig,
    weights: LossWeights,
    state: TrainState,
    /// Frozen; constructed only when the perceptual term is active.
    extractor: Option<FeatureExtractor<f32>>,
}

fn module_tensors<M: Module<f32>>(prefix: &str, m: &M, out: &mut Vec<(String, Tensor<f32>)>) {
    m.visit(prefix, &mut |name, p| out.push((name.to_string(), p.value.clone())));
}

fn adam_tensors<M: Module<f32>>(prefix: &str, m: &M, opt: &Adam<f32>, out: &mut Vec<(String, Tensor<f32>)>) {
    let mut names = Vec::new();
    m.visit("", &mut |name, _| names.push(name.to_string()));
    for (name, (mom1, mom2)) in names.iter().zip(opt.moments()) {
        out.push((format!("{prefix}.m.{name}"), mom1.clone()));
        out.push((format!("{prefix}.v.{name}"), mom2.clone()));
    }
}

fn take(ck: &Checkpoint, name: &str, shape: [usize; 4]) -> Result<Tensor<f32>> {
    let t = ck.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: {name} is {:?} in the checkpoint but {:?} in the model",
            t.shape(),
            shape
        )));
    }
    Ok(t.clone())
}

fn load_module<M: Module<f32>>(prefix: &str, m: &mut M, ck: &Checkpoint) -> Result<()> {
    let mut result = Ok(());
    m.visit_mut(prefix, &mut |name, p| {
        if result.is_ok() {
            match take(ck, name, p.value.shape()) {
                Ok(t) => p.value = t,
                Err(e) => result = Err(e),
            }
        }
    });
    result
}

fn load_adam<M: Module<f32>>(prefix: &str, m: &M, opt: &mut Adam<f32>, step: u64, ck: &Checkpoint) -> Result<()> {
    let mut moments = Vec::new();
    let mut result = Ok(());
    m.visit("", &mut |name, p| {
        let pair = take(ck, &format!("{prefix}.m.{name}"), p.value.shape())
            .and_then(|a| Ok((a, take(ck, &format!("{prefix}.v.{name}"), p.value.shape())?)));
        match pair {
            Ok(pair) => moments.push(pair),
            Err(e) if result.is_ok() => result = Err(e),
            Err(_) => {}
        }
    });
    result?;
    opt.restore(step, moments)
}

/// Rebuilds the segmenter stored in a checkpoint.
pub fn load_segmenter(ck: &Checkpoint) -> Result<Segmenter<f32>> {
    let cfg = &ck.meta.config.model.segmenter;
    let mut seg = Segmenter::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_module("segmenter", &mut seg, ck)?;
    Ok(seg)
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let adam = |lr| AdamConfig::new(lr, t.adam_beta1, t.adam_beta2, t.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(SEGMENTER_STREAM);
        let segmenter = Segmenter::new(&config.model.segmenter, &mut rng)?;
        let seg_opt = Adam::new(adam(t.lr_seg), &segmenter);
        let disc = if config.needs_discriminator() {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            rng.set_stream(DISCRIMINATOR_STREAM);
            let net = Discriminator::new(&config.model.discriminator, &mut rng)?;
            let opt = Adam::new(adam(t.lr_disc), &net);
            Some(Opponent { net, opt })
        } else {
            None
        };
        let extractor =
            if config.needs_extractor() { Some(FeatureExtractor::new(&config.model.extractor)?) } else { None };
        Ok(Trainer {
            config: config.clone(),
            weights: config.effective_weights(),
            state: TrainState { step: 0, segmenter, seg_opt, disc, best: None },
            extractor,
        })
    }

    /// Restores a trainer. The checkpoint must come from a run with the same
    /// model, mode and seed; other settings (such as `steps`) may differ.
    pub fn from_checkpoint(config: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let saved = &ck.meta.config;
        if saved.model != config.model {
            return Err(Error::Checkpoint("architecture mismatch between checkpoint and config".into()));
        }
        if saved.train.mode != config.train.mode || saved.train.seed != config.train.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained in mode {} with seed {}",
                saved.train.mode, saved.train.seed
            )));
        }
        let mut tr = Trainer::new(config)?;
        let step = ck.meta.step;
        let st = &mut tr.state;
        load_module("segmenter", &mut st.segmenter, ck)?;
        load_adam("segmenter_adam", &st.segmenter, &mut st.seg_opt, step, ck)?;
        if let Some(op) = st.disc.as_mut() {
            load_module("discriminator", &mut op.net, ck)?;
            load_adam("discriminator_adam", &op.net, &mut op.opt, step, ck)?;
        }
        st.step = step;
        st.best = ck.meta.best;
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let st = &self.state;
        let mut tensors = Vec::new();
        module_tensors("segmenter", &st.segmenter, &mut tensors);
        adam_tensors("segmenter_adam", &st.segmenter, &st.seg_opt, &mut tensors);
        if let Some(op) = &st.disc {
            module_tensors("discriminator", &op.net, &mut tensors);
            adam_tensors("discriminator_adam", &op.net, &op.opt, &mut tensors);
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint {
            meta: CheckpointMeta {
                format: FORMAT.into(),
                version: VERSION,
                step: st.step,
                config: self.config.clone(),
                best: st.best,
            },
            tensors,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn extractor(&self) -> Option<&FeatureExtractor<f32>> {
        self.extractor.as_ref()
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// One generator update followed by one discriminator update.
    ///
    /// `labelled` carries the supervised batch (source images, or target
    /// images in oracle mode). `unlabelled` is the label-free target batch,
    /// required exactly when the mode adapts.
    pub fn train_step(&mut self, labelled: &Batch, unlabelled: Option<&Batch>) -> Result<LossRecord> {
        let (mut record, probs) = self.generator_phase(labelled, unlabelled)?;
        if self.state.disc.is_some() {
            record.disc = self.discriminator_phase(&probs, labelled.images.batch())?;
        }
        self.state.step += 1;
        record.step = self.state.step;
        Ok(record)
    }

    /// Updates the segmenter. Returns the partial record and the
    /// probabilities it produced (source rows first), for the
    /// discriminator phase.
    pub(crate) fn generator_phase(
        &mut self,
        labelled: &Batch,
        unlabelled: Option<&Batch>,
    ) -> Result<(LossRecord, Tensor<f32>)> {
        let w = self.weights;
        let labels = labelled
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("the supervised batch carries no labels".into()))?;
        let adapts = self.state.disc.is_some() || self.extractor.is_some();
        let target = match (adapts, unlabelled) {
            (true, Some(t)) => {
                if t.labels.is_some() {
                    return Err(Error::Config("the unlabelled target batch must not carry labels".into()));
                }
                Some(t)
            }
            (true, None) => return Err(Error::Config(format!("mode {} needs a target batch", self.config.train.mode))),
            (false, _) => None,
        };
        let b = labelled.images.batch();
        let input = match target {
            Some(t) => Tensor::concat_batch(&[&labelled.images, &t.images]),
            None => labelled.images.clone(),
        };
        let (probs, tape) = self.state.segmenter.forward_train(&input)?;
        let ps = if target.is_some() { probs.slice_batch(0, b) } else { probs.clone() };
        let seg = seg_loss(&ps, labels, w.eps)?;
        let grad_s = seg.grad.scale(f32::lit(w.lambda_seg));
        let (mut adv_v, mut per_v) = (0.0, 0.0);
        let grad = match target {
            None => grad_s,
            Some(t) => {
                let pt = probs.slice_batch(b, probs.batch());
                let mut gt = Tensor::zeros(pt.shape());
                if let Some(op) = &self.state.disc {
                    let (scores, dtape) = op.net.forward_train(&pt)?;
                    let adv = adv_gen_loss(&scores, w.eps)?;
                    adv_v = adv.value;
                    gt.add_assign(&op.net.backward_input(&dtape, &adv.grad.scale(f32::lit(w.lambda_adv))));
                }
                if let Some(ex) = &self.extractor {
                    if t.images.batch() != b {
                        return Err(Error::Shape("perceptual pairing needs equal source and target batch sizes".into()));
                    }
                    let reference = ex.forward(&labels.channel(1))?;
                    let (pred, etape) = ex.forward_train(&pt.channel(1))?;
                    let (per, level_grads) = perceptual_loss(&pred, &reference)?;
                    per_v = per;
                    let scale = f32::lit(w.lambda_per);
                    let level_grads: Vec<_> = level_grads.iter().map(|g| g.scale(scale)).collect();
                    let gin = ex.backward_input(&etape, &level_grads);
                    for i in 0..b {
                        for (d, &s) in gt.plane_mut(i, 1).iter_mut().zip(gin.plane(i, 0)) {
                            *d += s;
                        }
                    }
                }
                Tensor::concat_batch(&[&grad_s, &gt])
            }
        };
        let total = total_loss(seg.value, adv_v, per_v, &w);
        let record = LossRecord { step: self.state.step + 1, seg: seg.value, adv_gen: adv_v, per: per_v, disc: 0.0, total };
        if !record.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "training step {}: seg={} adv_gen={} per={} total={}",
                record.step, record.seg, record.adv_gen, record.per, record.total
            )));
        }
        let seg_net = &mut self.state.segmenter;
        seg_net.zero_grad();
        seg_net.backward(&tape, &grad);
        self.state.seg_opt.step(seg_net);
        Ok((record, probs))
    }

    /// Updates the discriminator on detached predictions: rows `..b` are
    /// source, the rest target.
    pub(crate) fn discriminator_phase(&mut self, probs: &Tensor<f32>, b: usize) -> Result<f64> {
        let eps = self.weights.eps;
        let op = self.state.disc.as_mut().expect("discriminator phase without a discriminator");
        let (scores, tape) = op.net.forward_train(probs)?;
        let d = disc_loss(&scores.slice_batch(0, b), &scores.slice_batch(b, scores.batch()), eps)?;
        if !d.value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at step {}", self.state.step + 1)));
        }
        op.net.zero_grad();
        op.net.backward(&tape, &Tensor::concat_batch(&[&d.grad_source, &d.grad_target]));
        op.opt.step(&mut op.net);
        Ok(d.value)
    }
}

/// Datasets one run consumes, preprocessed to network resolution.
pub struct TrainData {
    /// Supervised set: source, or labelled target in oracle mode.
    pub labelled: PreparedSet,
    /// Label-free target set for the adapting modes.
    pub unlabelled: Option<PreparedSet>,
    /// Labelled target split for evaluation and model selection.
    pub val: Option<Dataset>,
}

impl TrainData {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let d = &config.data;
        let size = config.model.input_size;
        let labelled = match config.train.mode {
            Mode::Oracle => load_dataset(&d.target, Domain::Target, true)?,
            _ => load_dataset(&d.source, Domain::Source, true)?,
        };
        let unlabelled = if config.train.mode.adapts() {
            Some(PreparedSet::new(&load_dataset(&d.target, Domain::Target, false)?, size)?)
        } else {
            None
        };
        let val = Some(load_dataset(&d.target_val, Domain::Target, true)?);
        Ok(TrainData { labelled: PreparedSet::new(&labelled, size)?, unlabelled, val })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: u64,
    pub iou: f64,
    pub ausde: f64,
}

pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub evals: Vec<EvalPoint>,
    pub best: Option<BestMetric>,
    pub trainer: Trainer,
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogLine<'a> {
    Header { config: &'a RunConfig, start_step: u64 },
    Step(&'a LossRecord),
    Eval(&'a EvalPoint),
    Abort { step: u64, error: String },
}

struct Log(std::io::LineWriter<std::fs::File>, PathBuf);

impl Log {
    fn write(&mut self, line: &LogLine<'_>) -> Result<()> {
        let text = serde_json::to_string(line).expect("log line serializes");
        writeln!(self.0, "{text}").map_err(|e| Error::io(&self.1, e))
    }
}

/// Runs `config.train.steps` steps (continuing from `resume` if given),
/// evaluating on the validation split every `eval.every` steps and after the
/// last one. Writes `log.jsonl`, `last.safetensors` and `best.safetensors`
/// into `run_dir`. On a non-finite loss the run stops with an error and the
/// previously written checkpoints are left untouched.
pub fn train(config: &RunConfig, data: &TrainData, run_dir: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ck) => Trainer::from_checkpoint(config, ck)?,
        None => Trainer::new(config)?,
    };
    if data.labelled.size() != config.model.input_size {
        return Err(Error::Config("training data was prepared at a different input size".into()));
    }
    if config.train.mode.adapts() && data.unlabelled.is_none() {
        return Err(Error::Config(format!("mode {} needs unlabelled target data", config.train.mode)));
    }
    let batch = config.train.batch_size;
    let seed = config.train.seed;
    let start = trainer.state.step;
    let mut supervised = labelled_iterator(&data.labelled, batch, seed)?.starting_at(start as usize);
    let mut paired = match &data.unlabelled {
        Some(u) if config.train.mode.adapts() => {
            Some(paired_iterator(&data.labelled, u, batch, seed)?.starting_at(start as usize))
        }
        _ => None,
    };

    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(LOG_FILE);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Log(std::io::LineWriter::new(file), log_path);
    log.write(&LogLine::Header { config, start_step: start })?;

    let last_path = run_dir.join(LAST_CHECKPOINT);
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let steps = config.train.steps;
    if start >= steps {
        trainer.checkpoint().save(&last_path)?;
    }
    while trainer.state.step < steps {
        let result = match paired.as_mut() {
            Some(it) => {
                let (s, t) = it.next().expect("endless");
                trainer.train_step(&s, Some(&t))
            }
            None => {
                let s = supervised.next().expect("endless");
                trainer.train_step(&s, None)
            }
        };
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                log.write(&LogLine::Abort { step: trainer.state.step + 1, error: e.to_string() })?;
                return Err(e);
            }
        };
        log.write(&LogLine::Step(&record))?;
        log::debug!("{record:?}");
        history.push(record);
        let step = trainer.state.step;
        let every = config.eval.every;
        if (every > 0 && step % every == 0) || step == steps {
            if let Some(val) = &data.val {
                let report = evaluate(&trainer.state.segmenter, config.model.input_size, val)?;
                let point = EvalPoint { step, iou: report.iou, ausde: report.ausde };
                log.write(&LogLine::Eval(&point))?;
                log::info!("step {step}: validation iou {:.4} ausde {:.3}", point.iou, point.ausde);
                evals.push(point);
                if trainer.state.best.is_none_or(|b| point.iou > b.iou) {
                    trainer.state.best = Some(BestMetric { step, iou: point.iou, ausde: point.ausde });
                    trainer.checkpoint().save(&run_dir.join(BEST_CHECKPOINT))?;
                }
            }
            trainer.checkpoint().save(&last_path)?;
        }
    }
    log.0.flush().map_err(|e| Error::io(&log.1, e))?;
    Ok(TrainOutcome { history, evals, best: trainer.state.best, trainer })
}

/// Argmax masks at each sample's native resolution.
pub fn predict_masks(seg: &Segmenter<f32>, input_size: usize, ds: &Dataset) -> Result<Vec<Mask>> {
    exec::try_map_range(ds.len(), |i| {
        let img = ds.image(i);
        let probs = seg.forward(&preprocess_image(img, input_size)?)?;
        let mut m = Mask::new(input_size, input_size);
        for (d, (&bg, &fg)) in m.data.iter_mut().zip(probs.plane(0, 0).iter().zip(probs.plane(0, 1))) {
            *d = (fg > bg) as u8;
        }
        Ok(m.resize_nearest(img.width, img.height))
    })
}

/// Segmenter-only evaluation on a labelled dataset.
pub fn evaluate(seg: &Segmenter<f32>, input_size: usize, ds: &Dataset) -> Result<MetricReport> {
    let masks = predict_masks(seg, input_size, ds)?;
    let items = masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| Ok((ds.id(i).to_string(), m, ds.mask(i)?.clone())))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_masks(&items)
}

pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset) -> Result<MetricReport> {
    let seg = load_segmenter(ck)?;
    evaluate(&seg, ck.meta.config.model.input_size, ds)
}
