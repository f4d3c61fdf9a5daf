//! Training loop, optimizer, checkpoints and the experiment runner.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, ParamStore, Tape, Var};
use crate::causal::{pool_for_queue, ConfounderQueue, QueueInit, QueueStrategy, Selector};
use crate::data::{augment, category_specs, Category, derive_seed, AugmentConfig, Dataset, Sample, NUM_CATEGORIES};
use crate::distill::{kd_loss, MockTeacher, Teacher, TeacherConfig};
use crate::error::{Error, Result};
use crate::geometry::{yaw_of, Mat3, Pose, Vec3};
use crate::losses::{align_to_symmetry, inlier_indices, l_div, l_nocs, l_ocd, l_pose, LossComponents, LossOptions, LossVars, LossWeights};
use crate::metrics::{evaluate, js_divergence, yaw_histogram, EvalConfig, EvalReport};
use crate::posenet::{BatchInput, ModelConfig, PoseNet};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const STREAM_MODEL: u64 = 11;
const STREAM_QUEUE: u64 = 12;
const STREAM_ITERATION: u64 = 13;
const STREAM_EVAL: u64 = 14;

/// Triangular cyclical rate whose peak halves every full cycle.
pub fn triangular2_lr(iteration: usize, base_lr: f64, max_lr: f64, cycle_length: usize) -> f64 {
    let cycle = iteration / cycle_length;
    let phase = (iteration % cycle_length) as f64 / cycle_length as f64;
    let wave = (1.0 - (2.0 * phase - 1.0).abs()).max(0.0);
    base_lr + (max_lr - base_lr) * wave / 2f64.powi(cycle.min(1023) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Mat]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.dim())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Parameters without a gradient keep their values and moments.
    pub fn update(&mut self, params: &mut [Mat], grads: &[Option<&Mat>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            ndarray::Zip::from(p).and(*g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub strategy: QueueStrategy,
    pub init: QueueInit,
    pub selector: Selector,
    /// Features kept per category (`N_q`); memory banks hold the whole split.
    pub length: usize,
    /// Features drawn per step (`N_s`).
    pub samples: usize,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { strategy: QueueStrategy::QueueFifo, init: QueueInit::Teacher, selector: Selector::Random, length: 80, samples: 12 }
    }
}

/// Every knob of a run. Missing JSON keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Defaults to a quarter of the run.
    pub cycle_length: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub queue: QueueConfig,
    pub weights: LossWeights,
    pub loss: LossOptions,
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
    pub queue_teacher: TeacherConfig,
    pub kd_teacher: TeacherConfig,
    pub eval: EvalConfig,
    pub eval_batch: usize,
    pub histogram_bins: usize,
    /// Write `latest.ckpt` every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            model,
            total_iterations: 5000,
            batch_size: 24,
            base_lr: 2e-5,
            max_lr: 2e-3,
            cycle_length: None,
            seed: 1,
            adam: AdamConfig::default(),
            queue: QueueConfig::default(),
            weights: LossWeights::desk(),
            loss: LossOptions::default(),
            augment_enabled: false,
            augment: AugmentConfig::default(),
            queue_teacher: TeacherConfig { seed: 0x9e7e, dim: model.channels() },
            kd_teacher: TeacherConfig { seed: 0x7ea0, dim: model.c3 },
            eval: EvalConfig::default(),
            eval_batch: 64,
            histogram_bins: 36,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults around a given model, with teacher widths matched to it.
    pub fn for_model(model: ModelConfig) -> Self {
        let mut c = Self { model, ..Self::default() };
        c.queue_teacher.dim = model.channels();
        c.kd_teacher.dim = model.c3;
        c
    }

    /// Full-scale reference schedule, loss weights and augmentation.
    pub fn paper() -> Self {
        Self {
            total_iterations: 120_000,
            max_lr: 5e-4,
            weights: LossWeights::default(),
            augment_enabled: true,
            ..Self::for_model(ModelConfig::paper())
        }
    }

    pub fn cycle(&self) -> usize {
        self.cycle_length.unwrap_or((self.total_iterations / 4).max(2))
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        triangular2_lr(iteration, self.base_lr, self.max_lr, self.cycle())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return bad(format!("need 0 < base_lr <= max_lr, got {} / {}", self.base_lr, self.max_lr));
        }
        if self.cycle() < 2 {
            return bad(format!("cycle length {} < 2", self.cycle()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.histogram_bins == 0 {
            return bad("batch sizes and histogram bins must be positive".into());
        }
        if self.model.causal_enabled && (self.queue.length == 0 || self.queue.samples == 0) {
            return bad("queue length and sample count must be positive".into());
        }
        if self.model.causal_enabled && self.queue_teacher.dim != self.model.channels() {
            return bad(format!("queue teacher width {} != {} channels", self.queue_teacher.dim, self.model.channels()));
        }
        if self.model.kd_enabled && self.kd_teacher.dim != self.model.c3 {
            return bad(format!("kd teacher width {} != c3 {}", self.kd_teacher.dim, self.model.c3));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub lr: f64,
    pub components: LossComponents,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,lr,l_pose,l_div,l_ocd,l_nocs,l_kd,total";

impl LossRow {
    pub fn to_csv(&self) -> String {
        let c = &self.components;
        format!("{},{},{},{},{},{},{},{}", self.iteration, self.lr, c.pose, c.div, c.ocd, c.nocs, c.kd, self.total)
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        let x = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            iteration: f[0].parse().ok()?,
            lr: x(1)?,
            components: LossComponents { pose: x(2)?, div: x(3)?, ocd: x(4)?, nocs: x(5)?, kd: x(6)? },
            total: x(7)?,
        })
    }
}

/// Model, optimizer, queue and log of one run.
pub struct Trainer {
    config: TrainConfig,
    store: ParamStore,
    net: PoseNet,
    adam: Adam,
    queue: Option<ConfounderQueue>,
    kd_teacher: MockTeacher,
    iteration: usize,
    log: Vec<LossRow>,
    inliers: Vec<Vec<usize>>,
}

fn build_network(config: &TrainConfig) -> Result<(ParamStore, PoseNet)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_MODEL, 0));
    let net = PoseNet::new(&mut store, config.model, &mut rng)?;
    Ok((store, net))
}

fn check_data(config: &TrainConfig, train: &[Sample]) -> Result<()> {
    if train.len() < config.batch_size {
        return Err(Error::InvalidConfig(format!("{} training samples for batch size {}", train.len(), config.batch_size)));
    }
    if let Some(s) = train.iter().find(|s| s.cloud.len() != config.model.n_points) {
        return Err(Error::WrongPointCount { expected: config.model.n_points, got: s.cloud.len() });
    }
    Ok(())
}

fn outlier_cache(config: &TrainConfig, train: &[Sample]) -> Vec<Vec<usize>> {
    let o = &config.loss;
    train
        .iter()
        .map(|s| {
            if o.outlier_filter {
                inlier_indices(&s.cloud.points, o.outlier_k, o.outlier_sigma)
            } else {
                (0..s.cloud.len()).collect()
            }
        })
        .collect()
}

/// Teacher-initialized or random confounder queue.
fn init_queue(config: &TrainConfig, train: &[Sample]) -> Result<ConfounderQueue> {
    let q = &config.queue;
    let mut per_category: Vec<Vec<usize>> = vec![Vec::new(); NUM_CATEGORIES];
    for (i, s) in train.iter().enumerate() {
        if s.category >= NUM_CATEGORIES {
            return Err(Error::UnknownCategory(s.category));
        }
        per_category[s.category].push(i);
    }
    let length = if q.strategy.is_memory_bank() {
        per_category.iter().map(Vec::len).min().unwrap_or(0)
    } else {
        q.length
    };
    if let Some(c) = per_category.iter().position(|v| v.len() < length.max(1)) {
        return Err(Error::InsufficientFeatures { category: c, got: per_category[c].len(), needed: length.max(1) });
    }
    let dim = config.model.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_QUEUE, 0));
    let features = match q.init {
        QueueInit::Teacher => {
            let teacher = MockTeacher::new(config.queue_teacher);
            per_category
                .iter()
                .map(|idx| {
                    let rows = idx.iter().map(|&i| teacher.encode(&train[i].cloud.points)).collect::<Result<Vec<_>>>()?;
                    Ok(Mat::from_shape_fn((rows.len(), dim), |(r, c)| rows[r][c]))
                })
                .collect::<Result<Vec<_>>>()?
        }
        QueueInit::Random => Vec::new(),
    };
    ConfounderQueue::init(&features, NUM_CATEGORIES, length, dim, q.init, q.strategy, &mut rng)
}

impl Trainer {
    pub fn new(config: TrainConfig, train: &[Sample]) -> Result<Self> {
        config.validate()?;
        check_data(&config, train)?;
        let (store, net) = build_network(&config)?;
        let adam = Adam::new(config.adam, store.values());
        let queue = if config.model.causal_enabled { Some(init_queue(&config, train)?) } else { None };
        Ok(Self {
            kd_teacher: MockTeacher::new(config.kd_teacher),
            inliers: outlier_cache(&config, train),
            config,
            store,
            net,
            adam,
            queue,
            iteration: 0,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> &PoseNet {
        &self.net
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn queue(&self) -> Option<&ConfounderQueue> {
        self.queue.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[LossRow] {
        &self.log
    }

    pub fn kd_teacher(&self) -> &MockTeacher {
        &self.kd_teacher
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    fn iteration_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_ITERATION, self.iteration as u64))
    }

    /// One step on a batch drawn from the iteration's own random stream.
    pub fn step(&mut self, train: &[Sample]) -> Result<LossRow> {
        let mut rng = self.iteration_rng();
        let idx = sample_indices(&mut rng, train.len(), self.config.batch_size).into_vec();
        self.step_on(train, &idx, self.config.augment_enabled, &mut rng)
    }

    /// One step on fixed training indices.
    pub fn step_with(&mut self, train: &[Sample], indices: &[usize], augmented: bool) -> Result<LossRow> {
        let mut rng = self.iteration_rng();
        self.step_on(train, indices, augmented, &mut rng)
    }

    fn step_on(&mut self, train: &[Sample], indices: &[usize], augmented: bool, rng: &mut ChaCha8Rng) -> Result<LossRow> {
        if indices.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if self.inliers.len() != train.len() {
            return Err(Error::ShapeMismatch(format!("trainer prepared for {} samples, got {}", self.inliers.len(), train.len())));
        }
        let batch: Vec<Sample> = indices
            .iter()
            .map(|&i| if augmented { augment(&train[i], rng.gen(), &self.config.augment) } else { train[i].clone() })
            .collect();
        let f_samp = match &self.queue {
            Some(q) => Some(q.sample(self.config.queue.samples, self.config.queue.selector, rng)?),
            None => None,
        };
        let clouds: Vec<_> = batch.iter().map(|s| &s.cloud).collect();
        let input = BatchInput::from_clouds(&clouds, self.config.model.n_points)?;
        let gts: Vec<Pose> = batch.iter().map(|s| s.gt).collect();
        let filtered: Vec<Vec<Vec3>> =
            indices.iter().zip(&batch).map(|(&i, s)| self.inliers[i].iter().map(|&k| s.cloud.points[k]).collect()).collect();

        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, true);
        let out = self.net.forward(&mut tape, &bound, &input, f_samp.as_ref())?;
        let groups = batch.len();
        let opts = &self.config.loss;
        let gts = if opts.symmetry_aware { symmetry_aligned(&tape, out.rotation, &batch, gts) } else { gts };
        let losses = LossVars {
            pose: l_pose(&mut tape, out.rotation, out.translation, out.size, &gts, opts.pose_l1),
            div: l_div(&mut tape, out.keypoints.coords, groups, self.config.weights.div_margin),
            ocd: l_ocd(&mut tape, out.keypoints.coords, &filtered),
            nocs: l_nocs(&mut tape, out.nocs, out.keypoints.coords, &gts, opts.smooth_l1_beta, opts.nocs_rotation_transpose),
            kd: match out.kd_projection {
                Some(proj) => {
                    let rows =
                        batch.iter().map(|s| self.kd_teacher.encode(&s.cloud.points)).collect::<Result<Vec<_>>>()?;
                    let target = Mat::from_shape_fn((groups, self.kd_teacher.dim()), |(r, c)| rows[r][c]);
                    Some(kd_loss(&mut tape, proj, &target, opts.kd_squared)?)
                }
                None => None,
            },
        };
        let total = losses.total(&mut tape, &self.config.weights);
        let row = LossRow {
            iteration: self.iteration,
            lr: self.config.lr(self.iteration),
            components: losses.values(&tape),
            total: tape.scalar(total),
        };
        if !row.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.iteration, detail: format!("{:?}", row.components) });
        }
        let grads = tape.backward(total);
        let param_grads: Vec<Option<&Mat>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
        if let Some(k) = param_grads.iter().position(|g| g.is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("non-finite gradient in {}", self.store.names()[k]),
            });
        }
        self.adam.update(self.store.values_mut(), &param_grads, row.lr);
        if let Some(q) = &mut self.queue {
            let pooled = pool_for_queue(tape.value(out.f_f), groups);
            q.update(batch.iter().enumerate().map(|(g, s)| (s.category, pooled.row(g))))?;
        }
        self.iteration += 1;
        self.log.push(row);
        Ok(row)
    }

    /// Raises the iteration budget of a resumed run, keeping the current
    /// learning-rate cycle.
    pub fn extend_to(&mut self, total_iterations: usize) -> Result<()> {
        if total_iterations < self.iteration {
            return Err(Error::InvalidConfig(format!(
                "cannot shorten a run at iteration {} to {total_iterations}",
                self.iteration
            )));
        }
        self.config.cycle_length = Some(self.config.cycle());
        self.config.total_iterations = total_iterations;
        Ok(())
    }

    /// Steps until `iteration` reaches `target` (capped at the configured total).
    pub fn train_until(&mut self, train: &[Sample], target: usize) -> Result<()> {
        let target = target.min(self.config.total_iterations);
        while self.iteration < target {
            let row = self.step(train)?;
            if row.iteration % 500 == 0 {
                log::info!("iteration {} lr {:.3e} total {:.5}", row.iteration, row.lr, row.total);
            }
        }
        Ok(())
    }

    /// Poses for each sample, predicted in parallel batches.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<Pose>> {
        let chunks: Vec<(usize, &[Sample])> = samples.chunks(self.config.eval_batch).enumerate().collect();
        let per_chunk = chunks
            .par_iter()
            .map(|&(k, chunk)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_EVAL, k as u64));
                let f_samp = match &self.queue {
                    Some(q) => Some(q.sample(self.config.queue.samples, self.config.queue.selector, &mut rng)?),
                    None => None,
                };
                let clouds: Vec<_> = chunk.iter().map(|s| &s.cloud).collect();
                let input = BatchInput::from_clouds(&clouds, self.config.model.n_points)?;
                let mut tape = Tape::new();
                let bound = self.store.bind(&mut tape, false);
                let out = self.net.forward(&mut tape, &bound, &input, f_samp.as_ref())?;
                Ok(out.poses(&tape))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(per_chunk.into_iter().flatten().collect())
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<(EvalReport, Vec<Pose>)> {
        let poses = self.predict(samples)?;
        let preds: Vec<(usize, Pose)> = samples.iter().zip(&poses).map(|(s, p)| (s.category, *p)).collect();
        let gts: Vec<Pose> = samples.iter().map(|s| s.gt).collect();
        Ok((evaluate(&preds, &gts, &category_specs(), &self.config.eval)?, poses))
    }
}

const CKPT_MAGIC: &[u8; 4] = b"CPCK";
/// Targets of symmetric-category samples spun to the predicted rotations.
fn symmetry_aligned(tape: &Tape, rotation: Var, batch: &[Sample], gts: Vec<Pose>) -> Vec<Pose> {
    let rows = tape.value(rotation);
    batch
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(g, (s, gt))| match Category::from_id(s.category) {
            Ok(c) if c.symmetric() => {
                let pred = Mat3::from_fn(|i, j| rows[[g, j * 3 + i]]);
                align_to_symmetry(&pred, &gt)
            }
            _ => gt,
        })
        .collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueueMeta {
    strategy: QueueStrategy,
    categories: usize,
    length: usize,
    dim: usize,
    cursor: Vec<usize>,
    fill_count: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    tool_version: String,
    config: TrainConfig,
    iteration: usize,
    adam_step: u64,
    params: Vec<(String, usize, usize)>,
    queue: Option<QueueMeta>,
    log_rows: usize,
    /// Per-iteration generators are reseeded from the run seed and the
    /// iteration counter, so these two values are the whole RNG state.
    rng_seed: u64,
    rng_stream: u64,
    teacher_checksum: String,
}

fn put_mats(buf: &mut Vec<u8>, mats: &[Mat]) {
    for m in mats {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_shape_vec((rows, cols), data).expect("shape matches length"))
    }
}

/// Writes `bytes` next to `path` and renames over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Trainer {
    /// Serialized state: header, JSON metadata, then little-endian f64 blocks
    /// (parameters, both Adam moments, queue storage, loss log) and a
    /// trailing SHA-256 of everything before it.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            tool_version: TOOL_VERSION.into(),
            config: self.config.clone(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            params: self.store.names().iter().zip(self.store.values()).map(|(n, v)| (n.clone(), v.nrows(), v.ncols())).collect(),
            queue: self.queue.as_ref().map(|q| QueueMeta {
                strategy: q.strategy(),
                categories: q.categories(),
                length: q.length(),
                dim: q.dim(),
                cursor: q.cursor().to_vec(),
                fill_count: q.fill_count().to_vec(),
            }),
            log_rows: self.log.len(),
            rng_seed: self.config.seed,
            rng_stream: STREAM_ITERATION,
            teacher_checksum: self.kd_teacher.checksum(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        put_mats(&mut buf, self.store.values());
        put_mats(&mut buf, &self.adam.m);
        put_mats(&mut buf, &self.adam.v);
        if let Some(q) = &self.queue {
            put_mats(&mut buf, q.storage());
        }
        for r in &self.log {
            let c = &r.components;
            for v in [r.iteration as f64, r.lr, c.pose, c.div, c.ocd, c.nocs, c.kd, r.total] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.checkpoint_bytes())
    }

    /// Restores a run. `train` must be the split the run was started on.
    pub fn from_checkpoint_bytes(bytes: &[u8], train: &[Sample]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.into());
        if bytes.len() < 16 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let config = meta.config;
        config.validate()?;
        check_data(&config, train)?;
        let (mut store, net) = build_network(&config)?;
        let shapes: Vec<(String, usize, usize)> =
            store.names().iter().zip(store.values()).map(|(n, v)| (n.clone(), v.nrows(), v.ncols())).collect();
        if shapes != meta.params {
            return Err(corrupt("parameter layout does not match the configured model"));
        }
        let read_all = |r: &mut Reader| shapes.iter().map(|(_, a, b)| r.mat(*a, *b)).collect::<Result<Vec<_>>>();
        let values = read_all(&mut r)?;
        for (dst, src) in store.values_mut().iter_mut().zip(values) {
            *dst = src;
        }
        let m = read_all(&mut r)?;
        let v = read_all(&mut r)?;
        let adam = Adam { config: config.adam, step: meta.adam_step, m, v };
        let queue = match (&meta.queue, config.model.causal_enabled) {
            (Some(q), true) => {
                let storage = (0..q.categories).map(|_| r.mat(q.length, q.dim)).collect::<Result<Vec<_>>>()?;
                let mut queue = ConfounderQueue::from_storage(storage, q.strategy)?;
                queue.set_state(q.cursor.clone(), q.fill_count.clone())?;
                Some(queue)
            }
            (None, false) => None,
            _ => return Err(corrupt("queue presence does not match the causal flag")),
        };
        let mut log = Vec::with_capacity(meta.log_rows);
        for _ in 0..meta.log_rows {
            let mut x = [0.0; 8];
            for slot in &mut x {
                *slot = r.f64()?;
            }
            log.push(LossRow {
                iteration: x[0] as usize,
                lr: x[1],
                components: LossComponents { pose: x[2], div: x[3], ocd: x[4], nocs: x[5], kd: x[6] },
                total: x[7],
            });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let kd_teacher = MockTeacher::new(config.kd_teacher);
        if kd_teacher.checksum() != meta.teacher_checksum {
            return Err(corrupt("teacher weights differ from the recorded checksum"));
        }
        Ok(Self { inliers: outlier_cache(&config, train), kd_teacher, config, store, net, adam, queue, iteration: meta.iteration, log })
    }

    pub fn load_checkpoint(path: &Path, train: &[Sample]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, train)
    }
}

/// Raw yaw angles of the non-symmetric categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YawSamples {
    pub train_gt: Vec<f64>,
    pub test_gt: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl YawSamples {
    pub fn collect(train: &[Sample], test: &[Sample], predicted: &[Pose]) -> Self {
        let specs = category_specs();
        let asym = |s: &Sample| !specs[s.category].symmetric;
        Self {
            train_gt: train.iter().filter(|s| asym(s)).map(|s| yaw_of(&s.gt.r)).collect(),
            test_gt: test.iter().filter(|s| asym(s)).map(|s| yaw_of(&s.gt.r)).collect(),
            predicted: test.iter().zip(predicted).filter(|(s, _)| asym(s)).map(|(_, p)| yaw_of(&p.r)).collect(),
        }
    }
}

/// Normalized yaw histograms over `[-pi, pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YawHistograms {
    pub bins: usize,
    pub train_gt: Vec<f64>,
    pub test_gt: Vec<f64>,
    pub predicted: Vec<f64>,
}

impl YawHistograms {
    pub fn from_samples(samples: &YawSamples, bins: usize) -> Self {
        Self {
            bins,
            train_gt: yaw_histogram(&samples.train_gt, bins),
            test_gt: yaw_histogram(&samples.test_gt, bins),
            predicted: yaw_histogram(&samples.predicted, bins),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center_deg,train_gt,test_gt,predicted,uniform\n");
        let width = 360.0 / self.bins as f64;
        for b in 0..self.bins {
            let center = -180.0 + (b as f64 + 0.5) * width;
            out += &format!("{center},{},{},{},{}\n", self.train_gt[b], self.test_gt[b], self.predicted[b], 1.0 / self.bins as f64);
        }
        out
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub dataset_bias: crate::data::BiasConfig,
    pub dataset_seed: u64,
    pub param_checksum: String,
    pub teacher_checksum: String,
    pub histograms: YawHistograms,
    /// Jensen-Shannon divergence between predicted and test ground-truth yaw.
    pub yaw_divergence: f64,
    /// Same against the exact uniform histogram.
    pub yaw_divergence_uniform: f64,
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub eval: Option<EvalReport>,
    #[serde(skip)]
    pub loss_log: Vec<LossRow>,
    #[serde(skip)]
    pub yaw_samples: Option<YawSamples>,
}

pub const RECORD_FILE: &str = "record.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_TABLE_FILE: &str = "eval.txt";
pub const HISTOGRAM_FILE: &str = "yaw_histograms.csv";
pub const YAW_SAMPLES_FILE: &str = "yaw_samples.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(path, contents.as_ref())
}

fn to_json_string<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("record serializes") + "\n"
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out += &r.to_csv();
        out.push('\n');
    }
    out
}

impl RunRecord {
    pub fn eval(&self) -> &EvalReport {
        self.eval.as_ref().expect("record carries an evaluation")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(CONFIG_FILE), to_json_string(&self.config))?;
        write_file(&dir.join(LOSS_FILE), loss_csv(&self.loss_log))?;
        if let Some(ev) = &self.eval {
            let mut json = ev.to_json();
            json["tool_version"] = self.tool_version.clone().into();
            json["config_hash"] = self.config_hash.clone().into();
            write_file(&dir.join(EVAL_FILE), to_json_string(&json))?;
            write_file(&dir.join(EVAL_TABLE_FILE), ev.to_table())?;
        }
        write_file(&dir.join(HISTOGRAM_FILE), self.histograms.to_csv())?;
        if let Some(y) = &self.yaw_samples {
            write_file(&dir.join(YAW_SAMPLES_FILE), to_json_string(y))?;
        }
        write_file(&dir.join(RECORD_FILE), to_json_string(self))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let bad = |name: &str, reason: String| Error::CorruptManifest { path: dir.join(name), reason };
        let mut record: RunRecord = serde_json::from_str(&read(RECORD_FILE)?).map_err(|e| bad(RECORD_FILE, e.to_string()))?;
        let eval: serde_json::Value = serde_json::from_str(&read(EVAL_FILE)?).map_err(|e| bad(EVAL_FILE, e.to_string()))?;
        record.eval = Some(EvalReport::from_json(&eval, &category_specs())?);
        if dir.join(YAW_SAMPLES_FILE).exists() {
            let y = read(YAW_SAMPLES_FILE)?;
            record.yaw_samples = Some(serde_json::from_str(&y).map_err(|e| bad(YAW_SAMPLES_FILE, e.to_string()))?);
        }
        let csv = read(LOSS_FILE)?;
        record.loss_log = csv
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| LossRow::from_csv(l).ok_or_else(|| bad(LOSS_FILE, format!("bad row {l:?}"))))
            .collect::<Result<_>>()?;
        Ok(record)
    }
}

/// Evaluates a trainer on the test split and assembles its record.
pub fn finish_run(trainer: &Trainer, data: &Dataset, wall_clock_secs: f64) -> Result<RunRecord> {
    let (report, poses) = trainer.evaluate(&data.test)?;
    let yaw_samples = YawSamples::collect(&data.train, &data.test, &poses);
    let histograms = YawHistograms::from_samples(&yaw_samples, trainer.config().histogram_bins);
    let uniform = vec![1.0 / histograms.bins as f64; histograms.bins];
    Ok(RunRecord {
        tool_version: TOOL_VERSION.into(),
        config_hash: trainer.config().hash(),
        config: trainer.config().clone(),
        dataset_bias: data.bias,
        dataset_seed: data.seed,
        param_checksum: trainer.checksum(),
        teacher_checksum: trainer.kd_teacher().checksum(),
        yaw_divergence: js_divergence(&histograms.predicted, &histograms.test_gt),
        yaw_divergence_uniform: js_divergence(&histograms.predicted, &uniform),
        histograms,
        wall_clock_secs,
        eval: Some(report),
        loss_log: trainer.log().to_vec(),
        yaw_samples: Some(yaw_samples),
    })
}

/// Trains `trainer` to completion, checkpointing into `out` when given.
pub fn run_trainer(mut trainer: Trainer, data: &Dataset, out: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    let teacher_before = trainer.kd_teacher().checksum();
    let total = trainer.config().total_iterations;
    let every = trainer.config().checkpoint_every;
    while trainer.iteration() < total {
        let target = if every > 0 { ((trainer.iteration() / every) + 1) * every } else { total };
        if let Err(err) = trainer.train_until(&data.train, target) {
            if let (Error::NonFiniteLoss { .. }, Some(dir)) = (&err, out) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                trainer.save_checkpoint(&dir.join(ABORT_CHECKPOINT))?;
                write_file(&dir.join(LOSS_FILE), loss_csv(trainer.log()))?;
            }
            return Err(err);
        }
        if let (Some(dir), true) = (out, every > 0 && trainer.iteration() < total) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            trainer.save_checkpoint(&dir.join(LATEST_CHECKPOINT))?;
        }
    }
    if trainer.kd_teacher().checksum() != teacher_before {
        return Err(Error::InvalidConfig("teacher weights changed during training".into()));
    }
    let record = finish_run(&trainer, data, start.elapsed().as_secs_f64())?;
    if let Some(dir) = out {
        record.write(dir)?;
        trainer.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(record)
}

/// Fresh run of `config` on `data`.
pub fn run_experiment(config: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<RunRecord> {
    run_trainer(Trainer::new(config.clone(), &data.train)?, data, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BiasConfig;
    use proptest::prelude::*;

    fn tiny_data() -> Dataset {
        let bias = BiasConfig { train_samples: 60, test_samples: 12, n_points: 64, ..BiasConfig::default() };
        Dataset::generate(bias, 3).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::for_model(ModelConfig::tiny());
        c.batch_size = 4;
        c.total_iterations = 40;
        c.queue.length = 6;
        c.queue.samples = 4;
        c.eval_batch = 8;
        c.eval.resolution = 16;
        c.eval.yaw_steps = 8;
        c
    }

    #[test]
    fn lr_schedule_hits_endpoints() {
        let (b, m) = (2e-5, 5e-4);
        assert!((triangular2_lr(0, b, m, 1000) - 2e-5).abs() < 1e-12);
        assert!((triangular2_lr(500, b, m, 1000) - 5e-4).abs() < 1e-12);
        assert!((triangular2_lr(1500, b, m, 1000) - 2.6e-4).abs() < 1e-12);
        assert!((triangular2_lr(2500, b, m, 1000) - 1.4e-4).abs() < 1e-12);
        assert!((triangular2_lr(1000, b, m, 1000) - b).abs() < 1e-12);
        assert!((triangular2_lr(250, b, m, 1000) - (b + m) / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lr_stays_in_range(it in 0usize..100_000, half in 1usize..500, base in 1e-6f64..1e-3, extra in 0.0f64..1e-2) {
            let lr = triangular2_lr(it, base, base + extra, 2 * half);
            prop_assert!(lr >= base && lr <= base + extra + 1e-18);
        }

        #[test]
        fn peaks_halve_each_cycle(n in 0usize..12, half in 1usize..300) {
            let (b, m) = (2e-5, 5e-4);
            let peak = triangular2_lr(n * 2 * half + half, b, m, 2 * half);
            prop_assert_eq!(peak, b + (m - b) / 2f64.powi(n as i32));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = vec![Mat::from_elem((1, 2), 1.0), Mat::from_elem((1, 1), 3.0)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let g = Mat::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap();
        adam.update(&mut params, &[Some(&g), None], 0.1);
        // bias-corrected moments equal g and g^2 on the first step
        assert!((params[0][[0, 0]] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((params[0][[0, 1]] - (1.0 + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(params[1][[0, 0]], 3.0);
        assert_eq!(adam.m[1][[0, 0]], 0.0);
    }

    #[test]
    fn adam_second_step_matches_hand_computation() {
        let mut params = vec![Mat::from_elem((1, 1), 0.0)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let g1 = Mat::from_elem((1, 1), 1.0);
        let g2 = Mat::from_elem((1, 1), -3.0);
        adam.update(&mut params, &[Some(&g1)], 0.01);
        adam.update(&mut params, &[Some(&g2)], 0.01);
        let m = 0.9 * 0.1 + 0.1 * -3.0;
        let v = 0.999 * 0.001 + 0.001 * 9.0;
        let step2 = 0.01 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        let step1 = 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((params[0][[0, 0]] - (-step1 - step2)).abs() < 1e-15);
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let c = tiny_config();
        let json = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial: TrainConfig = serde_json::from_str(r#"{"total_iterations": 7}"#).unwrap();
        assert_eq!(partial.total_iterations, 7);
        assert_eq!(partial.queue.length, 80);
        assert_eq!(partial.queue.samples, 12);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        assert_eq!(TrainConfig::default().cycle(), 1250);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_config();
        c.base_lr = 1e-3;
        c.max_lr = 1e-4;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = tiny_config();
        c.cycle_length = Some(1);
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.queue_teacher.dim = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_row_csv_round_trip() {
        let row = LossRow {
            iteration: 12,
            lr: 2.0000000000000002e-5,
            components: LossComponents { pose: 0.1, div: 1.0 / 3.0, ocd: 1e-300, nocs: 7.0, kd: 0.0 },
            total: std::f64::consts::PI,
        };
        assert_eq!(LossRow::from_csv(&row.to_csv()), Some(row));
        assert_eq!(LOSS_CSV_HEADER.split(',').count(), 8);
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = tiny_data();
        let run = || {
            let mut t = Trainer::new(tiny_config(), &data.train).unwrap();
            t.train_until(&data.train, 15).unwrap();
            (t.checksum(), t.log().to_vec(), t.queue().unwrap().storage().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let mut other = tiny_config();
        other.seed = 2;
        let mut t = Trainer::new(other, &data.train).unwrap();
        t.train_until(&data.train, 15).unwrap();
        assert_ne!(t.checksum(), a.0);
    }

    #[test]
    fn kd_disabled_leaves_head_untouched() {
        let data = tiny_data();
        let mut c = tiny_config();
        c.model.kd_enabled = false;
        let mut t = Trainer::new(c, &data.train).unwrap();
        let head = t.params().checksum_prefix("kd.");
        let before = t.checksum();
        t.train_until(&data.train, 10).unwrap();
        assert!(t.log().iter().all(|r| r.components.kd == 0.0));
        assert_eq!(t.params().checksum_prefix("kd."), head);
        assert_ne!(t.checksum(), before);
    }

    #[test]
    fn kd_enabled_trains_head_and_logs_term() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(), &data.train).unwrap();
        let head = t.params().checksum_prefix("kd.");
        t.train_until(&data.train, 5).unwrap();
        assert!(t.log().iter().all(|r| r.components.kd > 0.0));
        assert_ne!(t.params().checksum_prefix("kd."), head);
    }

    #[test]
    fn baseline_has_no_queue_and_freezes_causal_block() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config_baseline(), &data.train).unwrap();
        assert!(t.queue().is_none());
        let fd = t.params().checksum_prefix("front_door");
        t.train_until(&data.train, 5).unwrap();
        assert_eq!(t.params().checksum_prefix("front_door"), fd);
    }

    fn tiny_config_baseline() -> TrainConfig {
        let mut c = tiny_config();
        c.model = c.model.baseline();
        c
    }

    #[test]
    fn paper_preset_keeps_reference_values() {
        let c = TrainConfig::paper();
        assert_eq!((c.base_lr, c.max_lr, c.batch_size, c.total_iterations), (2e-5, 5e-4, 24, 120_000));
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.model, ModelConfig::paper());
        assert!(c.augment_enabled);
        c.validate().unwrap();
    }

    #[test]
    fn logged_total_matches_weighted_components() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(), &data.train).unwrap();
        t.train_until(&data.train, 3).unwrap();
        let w = t.config().weights;
        for r in t.log() {
            let c = &r.components;
            let expect = w.ocd * c.ocd + w.div * c.div + w.nocs * c.nocs + w.pose * c.pose + w.kd * c.kd;
            assert_eq!(r.total, expect);
            assert_eq!(r.lr, t.config().lr(r.iteration));
        }
    }

    #[test]
    fn checkpoint_resume_matches_straight_run() {
        let data = tiny_data();
        let mut straight = Trainer::new(tiny_config(), &data.train).unwrap();
        straight.train_until(&data.train, 16).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = Trainer::new(tiny_config(), &data.train).unwrap();
        first.train_until(&data.train, 8).unwrap();
        first.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::load_checkpoint(&path, &data.train).unwrap();
        assert_eq!(resumed.checksum(), first.checksum());
        assert_eq!(resumed.adam(), first.adam());
        assert_eq!(resumed.queue(), first.queue());
        assert_eq!(resumed.checkpoint_bytes(), first.checkpoint_bytes());
        resumed.train_until(&data.train, 16).unwrap();
        assert_eq!(resumed.checksum(), straight.checksum());
        assert_eq!(resumed.log(), straight.log());
        assert_eq!(resumed.checkpoint_bytes(), straight.checkpoint_bytes());
    }

    #[test]
    fn damaged_checkpoints_rejected() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(), &data.train).unwrap();
        t.train_until(&data.train, 2).unwrap();
        let bytes = t.checkpoint_bytes();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            let r = Trainer::from_checkpoint_bytes(&bytes[..cut], &data.train);
            assert!(matches!(r, Err(Error::CorruptCheckpoint(_))), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 3] ^= 0x10;
        assert!(matches!(Trainer::from_checkpoint_bytes(&flipped, &data.train), Err(Error::CorruptCheckpoint(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Trainer::load_checkpoint(&dir.path().join("none.ckpt"), &data.train), Err(Error::Io { .. })));
    }

    #[test]
    fn non_finite_loss_aborts_and_dumps_state() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(), &data.train).unwrap();
        let id = t.params().id("pose_mlp.0.weight").unwrap();
        t.params_mut().get_mut(id).fill(f64::NAN);
        let dir = tempfile::tempdir().unwrap();
        let err = run_trainer(t, &data, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iteration: 0, .. }));
        assert!(dir.path().join(ABORT_CHECKPOINT).exists());
    }

    #[test]
    fn single_batch_overfits() {
        let data = tiny_data();
        let mut c = tiny_config();
        c.total_iterations = 500;
        c.base_lr = 3e-3;
        c.max_lr = 3e-3;
        let mut t = Trainer::new(c, &data.train).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        for _ in 0..500 {
            t.step_with(&data.train, &idx, false).unwrap();
        }
        let first = t.log()[10].total;
        let last = t.log().last().unwrap().total;
        assert!(last <= 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn record_round_trips_through_directory() {
        let data = tiny_data();
        let mut c = tiny_config();
        c.total_iterations = 6;
        c.checkpoint_every = 4;
        let dir = tempfile::tempdir().unwrap();
        let rec = run_experiment(&c, &data, Some(dir.path())).unwrap();
        for f in [CONFIG_FILE, LOSS_FILE, EVAL_FILE, EVAL_TABLE_FILE, HISTOGRAM_FILE, YAW_SAMPLES_FILE, RECORD_FILE, FINAL_CHECKPOINT, LATEST_CHECKPOINT] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = RunRecord::load(dir.path()).unwrap();
        assert_eq!(back.loss_log, rec.loss_log);
        assert_eq!(back.eval, rec.eval);
        assert_eq!(back.yaw_samples, rec.yaw_samples);
        assert_eq!(back.param_checksum, rec.param_checksum);
        assert_eq!(back.config.hash(), rec.config_hash);
        assert_eq!(rec.loss_log.len(), 6);
        let replay = run_experiment(&back.config, &data, None).unwrap();
        assert_eq!(replay.param_checksum, rec.param_checksum);
        let h = &rec.histograms;
        for hist in [&h.train_gt, &h.test_gt, &h.predicted] {
            assert_eq!(hist.len(), c.histogram_bins);
            assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(rec.yaw_divergence >= 0.0 && rec.yaw_divergence <= std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn memory_bank_holds_whole_category() {
        let data = tiny_data();
        let mut c = tiny_config();
        c.queue.strategy = QueueStrategy::MembankNone;
        let mut t = Trainer::new(c, &data.train).unwrap();
        assert_eq!(t.queue().unwrap().length(), 10);
        let before = t.queue().unwrap().clone();
        t.train_until(&data.train, 3).unwrap();
        assert_eq!(t.queue().unwrap(), &before);
    }

    #[test]
    fn fifo_queue_receives_pooled_features() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(), &data.train).unwrap();
        t.step(&data.train).unwrap();
        let written: usize = t.queue().unwrap().cursor().iter().sum();
        assert_eq!(written, 4);
    }

    #[test]
    fn predictions_are_valid_poses() {
        let data = tiny_data();
        let t = Trainer::new(tiny_config(), &data.train).unwrap();
        let poses = t.predict(&data.test).unwrap();
        assert_eq!(poses.len(), data.test.len());
        assert!(poses.iter().all(|p| p.validate().is_ok()));
        assert_eq!(poses, t.predict(&data.test).unwrap());
    }
}
