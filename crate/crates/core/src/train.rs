//! Pool-sampling training loop, evaluation and the desk-scale overfit
//! harness.
//!
//! One outer iteration draws `sample_size` scans from the pool without
//! replacement, then runs `epochs_per_iteration` passes over them in a
//! freshly shuffled order, taking one Adam step per scan. The learning
//! rate is looked up once per outer iteration.

use std::collections::HashMap;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{phantom_set, PhantomConfig, ScanPair, Volume};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{self, EllConfig, LossKind, DEFAULT_EPS};
use crate::model::{Model, ModelConfig};
use crate::optim::{adam_step, AdamParams, AdamState, LrSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sample_size: usize,
    pub epochs_per_iteration: usize,
    pub iterations: usize,
    pub schedule: LrSchedule,
    /// Only 1 is supported.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub ell: EllConfig,
    pub adam: AdamParams,
    /// Record wall-clock seconds per iteration in the log.
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sample_size: 5,
            epochs_per_iteration: 5,
            iterations: 500,
            schedule: LrSchedule::default(),
            batch_size: 1,
            seed: 0,
            loss: LossKind::Dice,
            ell: EllConfig::default(),
            adam: AdamParams::default(),
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch_size {} is unsupported; only 1 is implemented", self.batch_size)));
        }
        if self.sample_size == 0 || self.epochs_per_iteration == 0 {
            return Err(Error::Config("sample_size and epochs_per_iteration must be >= 1".into()));
        }
        if self.iterations > 0 && self.sample_size > pool_size {
            return Err(Error::Config(format!(
                "sample_size {} exceeds the pool of {pool_size} scans",
                self.sample_size
            )));
        }
        self.schedule.validate()?;
        self.ell.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub scan_ids: Vec<String>,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn total_steps(&self) -> usize {
        self.records.iter().map(|r| r.steps).sum()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialise"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("bad log line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }
}

/// Loss of `model` on one scan and the gradient of every parameter.
pub fn loss_and_grads(
    model: &Model<f32>,
    scan: &ScanPair,
    loss: LossKind,
    ell: &EllConfig,
) -> Result<(f64, IndexMap<String, Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let x = g.constant(scan.image.to_tensor());
    let p = model.arch.forward(&mut g, &bound, x)?;
    let l = losses::loss_var(&mut g, loss, p, &scan.mask.to_tensor(), ell)?;
    let value = g.value(l).item()? as f64;
    let mut grads = g.backward(l)?;
    let mut out = IndexMap::with_capacity(model.params.len());
    for (name, v) in bound.iter() {
        let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(model.params.get(name).expect("bound name").shape()));
        out.insert(name.to_string(), t);
    }
    Ok((value, out))
}

/// Trains on `pool` and returns the updated model with its log.
pub fn train(model: Model<f32>, pool: &[ScanPair], cfg: &TrainConfig) -> Result<(Model<f32>, TrainLog)> {
    train_with(model, pool, cfg, |_, _| Ok(()))
}

/// As [`train`], calling `after_iteration` with each finished record and
/// the model at that point (used for periodic checkpoints).
pub fn train_with<F>(mut model: Model<f32>, pool: &[ScanPair], cfg: &TrainConfig, mut after_iteration: F) -> Result<(Model<f32>, TrainLog)>
where
    F: FnMut(&IterationRecord, &Model<f32>) -> Result<()>,
{
    cfg.validate(pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at(it)?;
        let sample = index::sample(&mut rng, pool.len(), cfg.sample_size).into_vec();
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..cfg.epochs_per_iteration {
            let mut order = sample.clone();
            order.shuffle(&mut rng);
            for &i in &order {
                let (loss, grads) = match loss_and_grads(&model, &pool[i], cfg.loss, &cfg.ell) {
                    Err(Error::NonFinite { .. }) => return Err(Error::DivergedLoss { iteration: it }),
                    r => r?,
                };
                if !loss.is_finite() {
                    return Err(Error::DivergedLoss { iteration: it });
                }
                match adam_step(&mut model.params, &grads, &mut state, lr, &cfg.adam) {
                    Err(Error::NonFinite { .. }) => return Err(Error::DivergedLoss { iteration: it }),
                    r => r?,
                }
                total += loss;
                steps += 1;
            }
        }
        let record = IterationRecord {
            iteration: it,
            scan_ids: sample.iter().map(|&i| pool[i].id.clone()).collect(),
            lr,
            mean_loss: total / steps as f64,
            steps,
            wall_time_s: cfg.wall_time.then(|| start.elapsed().as_secs_f64()),
        };
        after_iteration(&record, &model)?;
        log.records.push(record);
    }
    Ok((model, log))
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Anything that maps a scan to a foreground probability volume.
pub trait Segmenter {
    fn predict(&self, id: &str, image: &Volume) -> Result<Volume>;
}

impl Segmenter for Model<f32> {
    fn predict(&self, _id: &str, image: &Volume) -> Result<Volume> {
        let y = self.forward(&image.to_tensor())?;
        Volume::from_tensor(&y, image.spacing)
    }
}

/// Returns the stored ground-truth mask for each known scan id.
#[derive(Debug, Clone, Default)]
pub struct OracleStub {
    masks: HashMap<String, Volume>,
}

impl OracleStub {
    pub fn new(scans: &[ScanPair]) -> Self {
        OracleStub { masks: scans.iter().map(|s| (s.id.clone(), s.mask.clone())).collect() }
    }

    pub fn insert(&mut self, id: impl Into<String>, mask: Volume) {
        self.masks.insert(id.into(), mask);
    }
}

impl Segmenter for OracleStub {
    fn predict(&self, id: &str, image: &Volume) -> Result<Volume> {
        let m = self.masks.get(id).ok_or_else(|| Error::Invalid(format!("oracle has no mask for scan `{id}`")))?;
        if m.dims != image.dims {
            return Err(Error::Invalid(format!("oracle mask for `{id}` has dims {:?}, image {:?}", m.dims, image.dims)));
        }
        Ok(m.clone())
    }
}

/// Predicts the same probability everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f32);

impl Segmenter for ConstantPredictor {
    fn predict(&self, _id: &str, image: &Volume) -> Result<Volume> {
        Ok(Volume { dims: image.dims, spacing: image.spacing, voxels: vec![self.0; image.voxels.len()] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    /// Soft Dice of the raw probabilities.
    pub soft_dsc: f64,
    /// Dice of the mask thresholded at the report's threshold.
    pub dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_soft_dsc(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.soft_dsc))
    }

    pub fn mean_dsc(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.dsc))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = it.len();
    (n > 0).then(|| it.sum::<f64>() / n as f64)
}

pub fn evaluate<S: Segmenter + ?Sized>(model: &S, scans: &[ScanPair], threshold: f64) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(scans.len());
    for s in scans {
        let p = model.predict(&s.id, &s.image)?.to_tensor();
        let g = s.mask.to_tensor();
        rows.push(EvalRow {
            id: s.id.clone(),
            soft_dsc: losses::soft_dsc(&p, &g, DEFAULT_EPS)?,
            dsc: losses::dsc(&losses::threshold(&p, threshold), &g, DEFAULT_EPS)?,
        });
    }
    Ok(EvalReport { threshold, rows })
}

// ── Overfit smoke ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SmokeConfig {
    pub scans: usize,
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig {
            scans: 5,
            phantom: PhantomConfig::default(),
            model: toy_dynamic_config(),
            train: TrainConfig {
                sample_size: 5,
                epochs_per_iteration: 5,
                iterations: 8,
                schedule: LrSchedule::new(vec![(6, 3e-3), (2, 3e-4)]).expect("static schedule"),
                loss: LossKind::Dice,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

/// Small Dynamic-variant network for desk-scale runs: no stem, narrow
/// levels, one recurrent layer per unit.
pub fn toy_dynamic_config() -> ModelConfig {
    ModelConfig {
        filters: [8, 8, 8, 8],
        stem_stages: 0,
        layers_per_unit: 1,
        se_reduction: 2,
        ..ModelConfig::dynamic_preset()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmokeReport {
    pub baseline_soft_dsc: f64,
    pub final_soft_dsc: f64,
    pub steps: usize,
    pub seconds: f64,
}

pub fn overfit_smoke(cfg: &SmokeConfig) -> Result<SmokeReport> {
    let start = Instant::now();
    let scans = phantom_set(cfg.scans, &cfg.phantom, cfg.seed);
    let model = Model::<f32>::build(&cfg.model, cfg.seed)?;
    let baseline = evaluate(&model, &scans, 0.5)?.mean_soft_dsc().unwrap_or(0.0);
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let (model, log) = train(model, &scans, &train_cfg)?;
    let final_ = evaluate(&model, &scans, 0.5)?.mean_soft_dsc().unwrap_or(0.0);
    Ok(SmokeReport {
        baseline_soft_dsc: baseline,
        final_soft_dsc: final_,
        steps: log.total_steps(),
        seconds: start.elapsed().as_secs_f64(),
    })
}
