//! End-to-end pose network: point and appearance encoders, attention
//! keypoint detector, the front-door block with fusion, NOCS and pose heads,
//! and the distillation branch.
//!
//! All tensors are batched by stacking `groups` samples along rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Bound, GradCheck, GradCheckReport, Init, Mat, Mlp, ParamId, ParamStore, Tape, Var};
use crate::causal::{AdaptiveFusion, FrontDoorBlock};
use crate::distill::{ResidualHead, DEFAULT_MU};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, Pose, Vec3};

/// Multiplier applied to centered coordinates (meters) before encoding.
pub const INPUT_SCALE: f64 = 4.0;
/// Extra gain on neighbourhood offsets, which are much smaller than the cloud.
const LOCAL_GAIN: f64 = 5.0;
/// Multiplier on keypoint attention logits.
const KEYPOINT_SHARPNESS: f64 = 8.0;
/// Size outputs are `SIZE_UNIT * softplus(.)` meters.
pub const SIZE_UNIT: f64 = 0.25;
/// Translation residual outputs are scaled by this many meters.
const TRANSLATION_UNIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_points: usize,
    pub n_kpt: usize,
    pub c1: usize,
    pub c2: usize,
    pub heads: usize,
    /// Teacher embedding width.
    pub c3: usize,
    pub knn: usize,
    pub causal_enabled: bool,
    pub fusion_enabled: bool,
    pub kd_enabled: bool,
    pub appearance_enabled: bool,
    pub mu: f64,
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.c1 + self.c2
    }

    /// Full-size network.
    pub fn paper() -> Self {
        Self {
            n_points: 1024,
            n_kpt: 96,
            c1: 128,
            c2: 128,
            heads: 4,
            c3: 768,
            knn: 16,
            causal_enabled: true,
            fusion_enabled: true,
            kd_enabled: true,
            appearance_enabled: true,
            mu: DEFAULT_MU,
        }
    }

    /// Single-core training preset.
    pub fn desk() -> Self {
        Self { n_points: 128, n_kpt: 16, c1: 32, c2: 32, heads: 4, c3: 64, ..Self::paper() }
    }

    /// Smallest preset, used by gradient checks and overfit runs.
    pub fn tiny() -> Self {
        Self { n_points: 64, n_kpt: 8, c1: 16, c2: 16, heads: 2, c3: 16, knn: 8, ..Self::paper() }
    }

    /// Causal block and distillation off, the reference baseline.
    pub fn baseline(mut self) -> Self {
        self.causal_enabled = false;
        self.fusion_enabled = false;
        self.kd_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 || self.n_kpt == 0 || self.c1 == 0 || self.c2 == 0 || self.c3 == 0 {
            return Err(Error::InvalidConfig(format!("degenerate model sizes {self:?}")));
        }
        if self.knn == 0 || self.knn >= self.n_points {
            return Err(Error::InvalidConfig(format!("knn {} must lie in [1, {})", self.knn, self.n_points)));
        }
        if self.heads == 0 || self.channels() % self.heads != 0 {
            return Err(Error::InvalidHeads { channels: self.channels(), heads: self.heads });
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Stacked network input for `groups` clouds of `n_points` each.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub points: Mat,
    pub appearance: Mat,
    pub groups: usize,
}

impl BatchInput {
    pub fn from_clouds(clouds: &[&PointCloud], n_points: usize) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let rows = clouds.len() * n_points;
        let mut points = Mat::zeros((rows, 3));
        let mut appearance = Mat::zeros((rows, 3));
        for (g, cloud) in clouds.iter().enumerate() {
            if cloud.len() != n_points {
                return Err(Error::WrongPointCount { expected: n_points, got: cloud.len() });
            }
            for (i, p) in cloud.points.iter().enumerate() {
                for c in 0..3 {
                    points[[g * n_points + i, c]] = p[c];
                }
            }
            if let Some(app) = &cloud.appearance {
                if app.len() != n_points {
                    return Err(Error::ShapeMismatch(format!("{} appearance rows for {n_points} points", app.len())));
                }
                for (i, a) in app.iter().enumerate() {
                    for c in 0..3 {
                        appearance[[g * n_points + i, c]] = a[c];
                    }
                }
            }
        }
        Ok(Self { points, appearance, groups: clouds.len() })
    }
}

/// Every parameter handle of the network. Construction order is fixed so
/// equal seeds give equal weights whatever the flags.
#[derive(Debug, Clone)]
pub struct PoseNet {
    pub config: ModelConfig,
    pub point_mlp: Mlp,
    pub appearance_mlp: Mlp,
    pub queries: ParamId,
    pub keypoint_mlp: Mlp,
    pub front_door: FrontDoorBlock,
    pub fusion: AdaptiveFusion,
    pub nocs_mlp: Mlp,
    pub pose_mlp: Mlp,
    /// Learned per-keypoint canonical offsets correlated against the layout.
    pub template: ParamId,
    pub kd_head: ResidualHead,
}

/// Keypoint detector output as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct KeypointVars {
    /// `(B*N_kpt) x 3`, world coordinates.
    pub coords: Var,
    /// `(B*N_kpt) x C`.
    pub feats: Var,
    /// `(B*N_kpt) x N`, rows sum to one.
    pub attention: Var,
}

/// Every tensor a forward pass hands to the loss stack.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `B x 9`, rotation columns stacked `[R[:,0], R[:,1], R[:,2]]`.
    pub rotation: Var,
    pub translation: Var,
    pub size: Var,
    pub keypoints: KeypointVars,
    pub nocs: Var,
    pub f_f: Var,
    /// `(B*N) x C1` point features.
    pub f_p: Var,
    /// `B x C3` distillation projection, present when distillation is enabled.
    pub kd_projection: Option<Var>,
}

impl ForwardOutput {
    pub fn poses(&self, tape: &Tape) -> Vec<Pose> {
        let (r, t, s) = (tape.value(self.rotation), tape.value(self.translation), tape.value(self.size));
        (0..r.nrows())
            .map(|b| {
                let rot = Mat3::from_fn(|i, j| r[[b, j * 3 + i]]);
                Pose::new(rot, Vec3::new(t[[b, 0]], t[[b, 1]], t[[b, 2]]), Vec3::new(s[[b, 0]], s[[b, 1]], s[[b, 2]]))
            })
            .collect()
    }
}

fn per_sample_knn(points: &Mat, groups: usize, k: usize) -> Vec<usize> {
    let n = points.nrows() / groups;
    let mut idx = Vec::with_capacity(points.nrows() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for g in 0..groups {
        let base = g * n;
        for i in 0..n {
            order.clear();
            let (xi, yi, zi) = (points[[base + i, 0]], points[[base + i, 1]], points[[base + i, 2]]);
            for j in 0..n {
                if j != i {
                    let (dx, dy, dz) = (points[[base + j, 0]] - xi, points[[base + j, 1]] - yi, points[[base + j, 2]] - zi);
                    order.push((dx * dx + dy * dy + dz * dz, j));
                }
            }
            order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut near: Vec<_> = order[..k].to_vec();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            idx.extend(near.iter().map(|&(_, j)| base + j));
        }
    }
    idx
}

/// Row-wise dot product of two `R x C` nodes as `R x 1`.
fn row_dot(tape: &mut Tape, a: Var, b: Var) -> Var {
    let cols = tape.shape(a).1;
    let prod = tape.mul(a, b);
    let ones = tape.constant(Mat::ones((cols, 1)));
    tape.matmul(prod, ones)
}

fn unit_rows(tape: &mut Tape, x: Var) -> Var {
    let n = tape.row_norm(x);
    let inv = tape.recip(n);
    tape.mul_col(x, inv)
}

/// Differentiable 6D-to-rotation map on `B x 6` rows; returns `B x 9`
/// column-stacked rotations.
pub fn rotation_from_6d_rows(tape: &mut Tape, six: Var) -> Var {
    let a1 = tape.slice_cols(six, 0, 3);
    let a2 = tape.slice_cols(six, 3, 3);
    let b1 = unit_rows(tape, a1);
    let d = row_dot(tape, b1, a2);
    let proj = tape.mul_col(b1, d);
    let u2 = tape.sub(a2, proj);
    let b2 = unit_rows(tape, u2);
    let b3 = tape.cross3(b1, b2);
    tape.concat_cols(&[b1, b2, b3])
}

impl PoseNet {
    pub fn new<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels();
        let point_mlp = Mlp::new(store, "point_mlp", &[9, config.c1, config.c1], Activation::Gelu, rng);
        let appearance_mlp = Mlp::new(store, "appearance_mlp", &[3, config.c2, config.c2], Activation::Gelu, rng);
        let queries = store.add("keypoint.queries", (config.n_kpt, c), Init::Normal { std: 1.0 }, rng);
        let keypoint_mlp = Mlp::new(store, "keypoint.mlp", &[c, c, c], Activation::Gelu, rng);
        let front_door = FrontDoorBlock::new(store, "front_door", c, config.heads, rng)?;
        let fusion = AdaptiveFusion::new(store, "fusion", c, rng);
        let nocs_mlp = Mlp::new(store, "nocs_mlp", &[c, c, 3], Activation::Gelu, rng);
        let pose_mlp = Mlp::new(store, "pose_mlp", &[c + 24 + 6 * config.n_kpt, c, c, 12], Activation::Gelu, rng);
        let template = store.add("pose.template", (config.n_kpt, 3), Init::Normal { std: 1.0 }, rng);
        let kd_head = ResidualHead::new(store, "kd", config.c1, config.c3, config.mu, rng);
        Ok(Self { config, point_mlp, appearance_mlp, queries, keypoint_mlp, front_door, fusion, nocs_mlp, pose_mlp, template, kd_head })
    }

    /// Per-point features from centered coordinates and neighbourhood
    /// statistics: `(B*N) x 3 -> (B*N) x C1`.
    pub fn encode_points(&self, tape: &mut Tape, params: &Bound, points: Var, groups: usize) -> Result<Var> {
        let (rows, cols) = tape.shape(points);
        if cols != 3 || groups == 0 || rows != groups * self.config.n_points {
            return Err(Error::WrongPointCount { expected: groups * self.config.n_points, got: rows });
        }
        let k = self.config.knn;
        let centroid = tape.mean_rows_grouped(points, groups);
        let centroid = tape.repeat_rows_grouped(centroid, self.config.n_points);
        let centered = tape.sub(points, centroid);
        let centered = tape.scale(centered, INPUT_SCALE);
        let idx = per_sample_knn(tape.value(points), groups, k);
        let neighbours = tape.gather_rows(centered, idx);
        let own = tape.repeat_rows_grouped(centered, k);
        let offsets = tape.sub(neighbours, own);
        let offsets = tape.scale(offsets, LOCAL_GAIN);
        let mean_offset = tape.mean_rows_grouped(offsets, rows);
        let sq = tape.mul(offsets, offsets);
        let spread = tape.mean_rows_grouped(sq, rows);
        let input = tape.concat_cols(&[centered, mean_offset, spread]);
        self.point_mlp.forward(tape, params, input)
    }

    pub fn encode_appearance(&self, tape: &mut Tape, params: &Bound, appearance: Var) -> Result<Var> {
        if tape.shape(appearance).1 != 3 {
            return Err(Error::ShapeMismatch(format!("appearance needs 3 channels, got {}", tape.shape(appearance).1)));
        }
        self.appearance_mlp.forward(tape, params, appearance)
    }

    /// Learned queries attend over `F_obj`; keypoints are the attention-weighted
    /// points and their features pass through a per-keypoint MLP.
    pub fn detect_keypoints(&self, tape: &mut Tape, params: &Bound, f_obj: Var, points: Var, groups: usize) -> Result<KeypointVars> {
        let c = self.config.channels();
        if tape.shape(f_obj) != (tape.shape(points).0, c) {
            return Err(Error::ShapeMismatch(format!("F_obj {:?} vs {} points", tape.shape(f_obj), tape.shape(points).0)));
        }
        let q = tape.tile(params.get(self.queries), groups);
        let logits = tape.group_matmul_nt(q, f_obj, groups);
        let logits = tape.scale(logits, KEYPOINT_SHARPNESS / (c as f64).sqrt());
        let attention = tape.softmax_rows(logits);
        let coords = tape.group_matmul(attention, points, groups);
        let pooled = tape.group_matmul(attention, f_obj, groups);
        let feats = self.keypoint_mlp.forward(tape, params, pooled)?;
        Ok(KeypointVars { coords, feats, attention })
    }

    pub fn predict_nocs(&self, tape: &mut Tape, params: &Bound, f_f: Var) -> Result<Var> {
        self.nocs_mlp.forward(tape, params, f_f)
    }

    /// Pools keypoint features, positions, NOCS and the first-order moments
    /// of the centered layout against the predicted NOCS and a learned
    /// template, appends the per-keypoint layout (centered positions and NOCS
    /// in query order), then regresses a 6D rotation, a translation residual
    /// from the keypoint centroid and a softplus size.
    ///
    /// Returns `(rotation B x 9, translation B x 3, size B x 3)`.
    pub fn pose_head(&self, tape: &mut Tape, params: &Bound, f_f: Var, coords: Var, nocs: Var, origin: Var, groups: usize) -> Result<(Var, Var, Var)> {
        let k = self.config.n_kpt;
        let kpt_center = tape.mean_rows_grouped(coords, groups);
        let rep = tape.repeat_rows_grouped(kpt_center, k);
        let local = tape.sub(coords, rep);
        let local = tape.scale(local, INPUT_SCALE);
        let mut moment_cols = Vec::with_capacity(3);
        for i in 0..3 {
            let n_i = tape.slice_cols(nocs, i, 1);
            moment_cols.push(tape.mul_col(local, n_i));
        }
        let moments = tape.concat_cols(&moment_cols);
        let moments = tape.mean_rows_grouped(moments, groups);
        let template = tape.tile(params.get(self.template), groups);
        let mut template_cols = Vec::with_capacity(3);
        for i in 0..3 {
            let t_i = tape.slice_cols(template, i, 1);
            template_cols.push(tape.mul_col(local, t_i));
        }
        let alignment = tape.concat_cols(&template_cols);
        let alignment = tape.mean_rows_grouped(alignment, groups);
        let f_mean = tape.mean_rows_grouped(f_f, groups);
        let nocs_mean = tape.mean_rows_grouped(nocs, groups);
        let offset = tape.sub(kpt_center, origin);
        let offset = tape.scale(offset, INPUT_SCALE);
        let layout = tape.flatten_groups(local, groups);
        let nocs_layout = tape.flatten_groups(nocs, groups);
        let pooled = tape.concat_cols(&[f_mean, offset, nocs_mean, moments, alignment, layout, nocs_layout]);
        let out = self.pose_mlp.forward(tape, params, pooled)?;
        let six = tape.slice_cols(out, 0, 6);
        let rotation = rotation_from_6d_rows(tape, six);
        let dt = tape.slice_cols(out, 6, 3);
        let dt = tape.scale(dt, TRANSLATION_UNIT);
        let translation = tape.add(kpt_center, dt);
        let raw_size = tape.slice_cols(out, 9, 3);
        let size = tape.softplus(raw_size);
        let size = tape.scale(size, SIZE_UNIT);
        Ok((rotation, translation, size))
    }

    /// Full pass. `f_samp` is the `N_s x C` confounder sample, required when
    /// the causal block is enabled.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, input: &BatchInput, f_samp: Option<&Mat>) -> Result<ForwardOutput> {
        let groups = input.groups;
        if input.points.nrows() != groups * self.config.n_points {
            return Err(Error::WrongPointCount { expected: groups * self.config.n_points, got: input.points.nrows() });
        }
        let points = tape.constant(input.points.clone());
        let f_p = self.encode_points(tape, params, points, groups)?;
        let appearance = if self.config.appearance_enabled {
            input.appearance.clone()
        } else {
            Mat::zeros(input.appearance.dim())
        };
        let appearance = tape.constant(appearance);
        let f_i = self.encode_appearance(tape, params, appearance)?;
        let f_obj = tape.concat_cols(&[f_p, f_i]);
        let keypoints = self.detect_keypoints(tape, params, f_obj, points, groups)?;
        let f_f = if self.config.causal_enabled {
            let samp = f_samp.ok_or_else(|| Error::QueueNotReady("causal block needs a confounder sample".into()))?;
            let samp = tape.constant(samp.clone());
            let causal = self.front_door.forward(tape, params, keypoints.feats, samp, groups)?;
            self.fusion.forward(tape, params, causal, keypoints.feats, !self.config.fusion_enabled)?
        } else {
            keypoints.feats
        };
        let nocs = self.predict_nocs(tape, params, f_f)?;
        let origin = tape.mean_rows_grouped(points, groups);
        let (rotation, translation, size) = self.pose_head(tape, params, f_f, keypoints.coords, nocs, origin, groups)?;
        let kd_projection = if self.config.kd_enabled {
            let f_avg = tape.mean_rows_grouped(f_p, groups);
            let refined = self.kd_head.forward(tape, params, f_avg)?;
            Some(self.kd_head.project(tape, params, refined)?)
        } else {
            None
        };
        Ok(ForwardOutput { rotation, translation, size, keypoints, nocs, f_f, f_p, kd_projection })
    }
}

/// Central-difference check of a full forward pass with respect to every
/// parameter, on a random two-sample batch. The scalar probes rotation,
/// translation, size, NOCS and the distillation projection.
pub fn forward_gradient_check(config: ModelConfig, seed: u64, max_coords: usize) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = PoseNet::new(&mut store, config, &mut rng)?;
    let mut randn = |shape: (usize, usize), scale: f64| {
        Mat::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
    };
    let n = config.n_points;
    let points = randn((2 * n, 3), 0.1);
    let appearance = randn((2 * n, 3), 0.3);
    let samp = randn((4, config.channels()), 1.0);
    let weights = randn((2, 15), 1.0);
    let kd_weights = randn((2, config.c3), 1.0);
    let input = BatchInput { points, appearance, groups: 2 };
    GradCheck::default().max_coords(max_coords).run(store.values(), |tape, v| {
        let params = Bound::from_vars(v.to_vec());
        let out = net.forward(tape, &params, &input, Some(&samp)).expect("shapes are consistent");
        let all = tape.concat_cols(&[out.rotation, out.translation, out.size]);
        let w = tape.constant(weights.clone());
        let weighted = tape.mul(all, w);
        let mut total = tape.sum(weighted);
        let nsq = tape.mul(out.nocs, out.nocs);
        let nsq = tape.sum(nsq);
        total = tape.add(total, nsq);
        if let Some(proj) = out.kd_projection {
            let kw = tape.constant(kd_weights.clone());
            let kd = tape.mul(proj, kw);
            let kd = tape.sum(kd);
            total = tape.add(total, kd);
        }
        total
    })
}
