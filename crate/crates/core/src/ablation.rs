//! Multi-seed comparison of the four training modes on a synthetic domain
//! pair, with per-run results cached by config hash.
//!
//! Training is deterministic, so a cached result is exactly what a fresh run
//! would produce.

use crate::config::{Mode, RunConfig};
use crate::dataio::load_dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::nets::ExtractorConfig;
use crate::synthdata::{generate_dataset, Domain, DomainSpec, MANIFEST_FILE};
use crate::trainer::{evaluate_checkpoint, train, BestMetric, Checkpoint, TrainData, BEST_CHECKPOINT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RESULT_FILE: &str = "result.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub source: DomainSpec,
    /// Target training images; validation and test splits reuse this spec
    /// with seeds `seed + 1` and `seed + 2`.
    pub target: DomainSpec,
    pub source_count: usize,
    pub target_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    /// Template run; data paths, mode and seed are filled in per run.
    pub base: RunConfig,
}

impl AblationPlan {
    /// 128x128 inputs, base width 16, 3000 steps, three seeds, with the
    /// fallback extractor and narrowed discriminator so one run fits a
    /// single CPU core.
    pub fn desk_scale() -> Self {
        let mut base = RunConfig::default();
        base.model.input_size = 128;
        base.model.segmenter.base_width = 16;
        base.model.discriminator.widths = vec![32, 64, 128, 256];
        base.model.extractor = ExtractorConfig { width_divisor: 4, ..ExtractorConfig::fallback() };
        base.train.steps = 3000;
        base.eval.every = 250;
        AblationPlan {
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            source_count: 100,
            target_count: 100,
            val_count: 20,
            test_count: 40,
            seeds: vec![0, 1, 2],
            modes: Mode::ALL.to_vec(),
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.source.domain != Domain::Source || self.target.domain != Domain::Target {
            return Err(Error::Config("plan specs must be tagged source and target".into()));
        }
        for (key, n) in [
            ("source_count", self.source_count),
            ("target_count", self.target_count),
            ("val_count", self.val_count),
            ("test_count", self.test_count),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{key} must be >= 1")));
            }
        }
        if self.seeds.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("a plan needs at least one seed and one mode".into()));
        }
        self.base.validate()
    }

    fn data_key(&self) -> String {
        let text = serde_json::to_string(&(
            &self.source,
            &self.target,
            self.source_count,
            self.target_count,
            self.val_count,
            self.test_count,
        ))
        .expect("plan serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..6])
    }

    fn split_spec(&self, offset: u64) -> DomainSpec {
        DomainSpec { seed: self.target.seed.wrapping_add(offset), ..self.target.clone() }
    }

    /// Generates the four splits under `root` unless they already exist.
    pub fn materialize(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(format!("data-{}", self.data_key()));
        let splits = [
            ("source", self.source.clone(), self.source_count),
            ("target", self.target.clone(), self.target_count),
            ("target_val", self.split_spec(1), self.val_count),
            ("target_test", self.split_spec(2), self.test_count),
        ];
        for (name, spec, count) in splits {
            let dest = dir.join(name);
            if dest.join(MANIFEST_FILE).exists() {
                continue;
            }
            let tmp = dir.join(format!(".{name}.partial"));
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            }
            generate_dataset(&spec, count, &tmp)?;
            std::fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
        }
        Ok(dir)
    }

    /// The config of one (mode, seed) run against materialized data.
    pub fn run_config(&self, data_dir: &Path, mode: Mode, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.data.source = data_dir.join("source");
        cfg.data.target = data_dir.join("target");
        cfg.data.target_val = data_dir.join("target_val");
        cfg.train.mode = mode;
        cfg.train.seed = seed;
        cfg
    }
}

/// Outcome of one run: the best-on-validation checkpoint scored on the
/// held-out test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub best: Option<BestMetric>,
    pub test: MetricReport,
    pub seconds: f64,
}

/// Runs (or loads from `cache`) every mode and seed in the plan.
pub fn run_plan(plan: &AblationPlan, cache: &Path, mut progress: impl FnMut(&str)) -> Result<Vec<RunResult>> {
    plan.validate()?;
    let data_dir = plan.materialize(cache)?;
    let test = load_dataset(&data_dir.join("target_test"), Domain::Target, true)?;
    let mut results = Vec::new();
    for &seed in &plan.seeds {
        for &mode in &plan.modes {
            let cfg = plan.run_config(&data_dir, mode, seed);
            let hash = cfg.hash();
            let run_dir = run_dir(cache, mode, seed, &hash);
            let result_path = run_dir.join(RESULT_FILE);
            if let Some(r) = read_result(&result_path) {
                progress(&format!("cached {mode} seed {seed}: test iou {:.4}", r.test.iou));
                results.push(r);
                continue;
            }
            progress(&format!("training {mode} seed {seed} ({} steps)", cfg.train.steps));
            let start = Instant::now();
            let data = TrainData::load(&cfg)?;
            let outcome = train(&cfg, &data, &run_dir, None)?;
            let ck = Checkpoint::load(&run_dir.join(BEST_CHECKPOINT))?;
            let report = evaluate_checkpoint(&ck, &test)?;
            let r = RunResult {
                mode,
                seed,
                config_hash: hash,
                best: outcome.best,
                test: report,
                seconds: start.elapsed().as_secs_f64(),
            };
            let text = serde_json::to_string_pretty(&r).expect("result serializes");
            std::fs::write(&result_path, text).map_err(|e| Error::io(&result_path, e))?;
            progress(&format!("done {mode} seed {seed}: test iou {:.4} in {:.0}s", r.test.iou, r.seconds));
            results.push(r);
        }
    }
    Ok(results)
}

/// The results already present in `cache`, without training anything.
/// Runs that have not finished are missing from the returned list.
pub fn cached_results(plan: &AblationPlan, cache: &Path) -> Result<Vec<RunResult>> {
    plan.validate()?;
    let data_dir = cache.join(format!("data-{}", plan.data_key()));
    let mut results = Vec::new();
    for &seed in &plan.seeds {
        for &mode in &plan.modes {
            let hash = plan.run_config(&data_dir, mode, seed).hash();
            if let Some(r) = read_result(&run_dir(cache, mode, seed, &hash).join(RESULT_FILE)) {
                results.push(r);
            }
        }
    }
    Ok(results)
}

fn run_dir(cache: &Path, mode: Mode, seed: u64, hash: &str) -> PathBuf {
    cache.join("runs").join(format!("{mode}-seed{seed}-{hash}"))
}

fn read_result(path: &Path) -> Option<RunResult> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

/// Median over seeds of (IOU, AUSDE) for one mode.
pub fn median_for(results: &[RunResult], mode: Mode) -> Option<(f64, f64)> {
    let mut iou: Vec<f64> = results.iter().filter(|r| r.mode == mode).map(|r| r.test.iou).collect();
    let mut ausde: Vec<f64> = results.iter().filter(|r| r.mode == mode).map(|r| r.test.ausde).collect();
    Some((median(&mut iou)?, median(&mut ausde)?))
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
