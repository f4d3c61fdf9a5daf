//! Synthetic category-level benchmark with a tunable yaw bias, training
//! augmentation, and the on-disk dataset format.
//!
//! Canonical frames are y-up. Clouds are centered on their bounding box
//! and scaled to unit diagonal, so a pose's size `s` holds the metric box
//! extents and `|s|` is the object's metric diagonal.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CategorySpec;
use crate::geometry::{axis_angle, rot_x, rot_y, rot_z, Mat3, PointCloud, Pose, Vec3};

pub const NUM_CATEGORIES: usize = 6;
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CPDS";
/// Metric diagonal of an object at unit scale factor.
pub const BASE_DIAGONAL: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Box,
    Can,
    Bottle,
    Bowl,
    Laptop,
    Mug,
}

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] =
        [Category::Box, Category::Can, Category::Bottle, Category::Bowl, Category::Laptop, Category::Mug];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::UnknownCategory(id))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::Can => "can",
            Category::Bottle => "bottle",
            Category::Bowl => "bowl",
            Category::Laptop => "laptop",
            Category::Mug => "mug",
        }
    }

    /// Rotationally symmetric about the canonical +y axis.
    pub fn symmetric(self) -> bool {
        matches!(self, Category::Can | Category::Bottle | Category::Bowl)
    }

    pub fn symmetry_axis(self) -> Option<Vec3> {
        self.symmetric().then(Vec3::y)
    }

    pub fn spec(self) -> CategorySpec {
        CategorySpec::new(self.id(), self.name(), self.symmetric())
    }
}

pub fn category_specs() -> Vec<CategorySpec> {
    Category::ALL.iter().map(|c| c.spec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub category: usize,
    pub instance: usize,
    pub gt: Pose,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    /// Von Mises concentration of training yaw; 0 is uniform.
    pub yaw_concentration: f64,
    pub train_instances_per_category: usize,
    pub test_instances_per_category: usize,
    pub noise_sigma: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub n_points: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            yaw_concentration: 0.0,
            train_instances_per_category: 8,
            test_instances_per_category: 4,
            noise_sigma: 0.002,
            train_samples: 3000,
            test_samples: 600,
            n_points: 128,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw_concentration >= 0.0) || !self.yaw_concentration.is_finite() {
            return Err(Error::InvalidConfig(format!("yaw concentration {} must be finite and >= 0", self.yaw_concentration)));
        }
        if self.train_instances_per_category == 0 || self.test_instances_per_category == 0 {
            return Err(Error::InvalidConfig("each split needs at least one instance per category".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.n_points < 16 {
            return Err(Error::InvalidConfig(format!("{} points per cloud is below the minimum of 16", self.n_points)));
        }
        Ok(())
    }

    /// Instance ids available to a split; the two pools are disjoint.
    pub fn instance_pool(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_instances_per_category,
            Split::Test => {
                let start = self.train_instances_per_category;
                start..start + self.test_instances_per_category
            }
        }
    }

    fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Test => self.test_samples,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one item of a stream, a pure function of its coordinates.
pub fn derive_seed(global: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(global) ^ stream) ^ index)
}

const INSTANCE_STREAM: u64 = 0x5eed_0001;
const CATEGORY_STREAM: u64 = 0x5eed_0002;

/// One surface patch of a parametric shape.
#[derive(Debug, Clone)]
enum Patch {
    /// `center + a*u + b*v` for `a, b` in `[-1, 1]`.
    Rect { center: Vec3, u: Vec3, v: Vec3 },
    /// Open frustum around +y between `(y0, r0)` and `(y1, r1)`.
    Frustum { y0: f64, r0: f64, y1: f64, r1: f64 },
    /// Disk of radius `r` at height `y`, normal along y.
    Disk { y: f64, r: f64 },
    /// Lower half of an ellipsoid of revolution, open at `y = 0`.
    Hemisphere { r: f64, depth: f64 },
    /// Tube of radius `a` around a circular arc of radius `big` in the
    /// xy-plane centered at `center`, spanning angles `[lo, hi]`.
    Handle { center: Vec3, big: f64, a: f64, lo: f64, hi: f64 },
}

impl Patch {
    fn area(&self) -> f64 {
        match *self {
            Patch::Rect { u, v, .. } => 4.0 * u.cross(&v).norm(),
            Patch::Frustum { y0, r0, y1, r1 } => PI * (r0 + r1) * ((y1 - y0).powi(2) + (r1 - r0).powi(2)).sqrt(),
            Patch::Disk { r, .. } => PI * r * r,
            // flattened hemisphere, approximate is fine for apportioning samples
            Patch::Hemisphere { r, depth } => PI * r * (r + depth),
            Patch::Handle { big, a, lo, hi, .. } => 2.0 * PI * a * big * (hi - lo),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Patch::Rect { center, u, v } => center + u * rng.gen_range(-1.0..=1.0) + v * rng.gen_range(-1.0..=1.0),
            Patch::Frustum { y0, r0, y1, r1 } => {
                let rmax = r0.max(r1);
                loop {
                    let s: f64 = rng.gen();
                    let r = r0 + (r1 - r0) * s;
                    if rng.gen::<f64>() * rmax <= r {
                        let th = rng.gen_range(0.0..2.0 * PI);
                        break Vec3::new(r * th.cos(), y0 + (y1 - y0) * s, r * th.sin());
                    }
                }
            }
            Patch::Disk { y, r } => {
                let rad = r * rng.gen::<f64>().sqrt();
                let th = rng.gen_range(0.0..2.0 * PI);
                Vec3::new(rad * th.cos(), y, rad * th.sin())
            }
            Patch::Hemisphere { r, depth } => {
                // uniform on the unit sphere's lower half, then flattened
                let y = -rng.gen::<f64>();
                let rho = (1.0 - y * y).max(0.0).sqrt();
                let th = rng.gen_range(0.0..2.0 * PI);
                Vec3::new(r * rho * th.cos(), depth * y, r * rho * th.sin())
            }
            Patch::Handle { center, big, a, lo, hi } => loop {
                let phi = rng.gen_range(lo..hi);
                let psi = rng.gen_range(0.0..2.0 * PI);
                if rng.gen::<f64>() * (big + a) <= big + a * psi.cos() {
                    let rr = big + a * psi.cos();
                    break center + Vec3::new(rr * phi.cos(), rr * phi.sin(), a * psi.sin());
                }
            },
        }
    }
}

fn box_patches(center: Vec3, axes: [Vec3; 3]) -> Vec<Patch> {
    let mut out = Vec::with_capacity(6);
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        for sign in [-1.0, 1.0] {
            out.push(Patch::Rect { center: center + axes[i] * sign, u: axes[j], v: axes[k] });
        }
    }
    out
}

/// Smooth color field `0.5 + 0.35 sin(w . x + phase)` per channel. Symmetric
/// categories use `(radius, height)` in place of `x` so the field shares the
/// shape's symmetry.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ColorField {
    freq: [Vec3; 3],
    phase: [f64; 3],
    radial: bool,
}

impl ColorField {
    fn eval(&self, p: &Vec3) -> Vec3 {
        let x = if self.radial { Vec3::new((p.x * p.x + p.z * p.z).sqrt(), p.y, 0.0) } else { *p };
        Vec3::from_fn(|c, _| 0.5 + 0.35 * (self.freq[c].dot(&x) + self.phase[c]).sin())
    }
}

/// Parametric instance of a category: patches plus its color field.
#[derive(Debug, Clone)]
pub struct InstanceShape {
    pub category: Category,
    pub instance: usize,
    patches: Vec<Patch>,
    cumulative: Vec<f64>,
    color: ColorField,
}

impl InstanceShape {
    pub fn new(category: Category, instance: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(category.id() as u64, INSTANCE_STREAM, instance as u64));
        let mut j = |x: f64| x * rng.gen_range(0.8..1.2);
        let patches = match category {
            Category::Box => {
                let (w, h, d) = (j(0.8), j(0.5), j(0.6));
                box_patches(Vec3::zeros(), [Vec3::x() * w / 2.0, Vec3::y() * h / 2.0, Vec3::z() * d / 2.0])
            }
            Category::Can => {
                let (r, h) = (j(0.3), j(0.9));
                vec![Patch::Frustum { y0: 0.0, r0: r, y1: h, r1: r }, Patch::Disk { y: 0.0, r }, Patch::Disk { y: h, r }]
            }
            Category::Bottle => {
                let (rb, hb, sh, rn, hn) = (j(0.3), j(0.8), j(0.25), j(0.1), j(0.25));
                vec![
                    Patch::Disk { y: 0.0, r: rb },
                    Patch::Frustum { y0: 0.0, r0: rb, y1: hb, r1: rb },
                    Patch::Frustum { y0: hb, r0: rb, y1: hb + sh, r1: rn },
                    Patch::Frustum { y0: hb + sh, r0: rn, y1: hb + sh + hn, r1: rn },
                ]
            }
            Category::Bowl => vec![Patch::Hemisphere { r: j(0.5), depth: j(0.3) }],
            Category::Laptop => {
                let (w, d, ds) = (j(1.0), j(0.7), j(0.65));
                let angle = (rng.gen_range(100.0..125.0) as f64).to_radians();
                let (tb, ts) = (0.03, 0.02);
                let mut p = box_patches(Vec3::new(0.0, tb / 2.0, 0.0), [Vec3::x() * w / 2.0, Vec3::y() * tb / 2.0, Vec3::z() * d / 2.0]);
                // screen hinged at the back edge (z = -d/2), opened by `angle`
                let dir = Vec3::new(0.0, angle.sin(), angle.cos());
                let normal = Vec3::x().cross(&dir).normalize();
                let hinge = Vec3::new(0.0, tb, -d / 2.0);
                let center = hinge + dir * (ds / 2.0);
                p.extend(box_patches(center, [Vec3::x() * w / 2.0, dir * (ds / 2.0), normal * (ts / 2.0)]));
                p
            }
            Category::Mug => {
                let (r, h) = (j(0.3), j(0.8));
                let big = j(0.18);
                vec![
                    Patch::Frustum { y0: 0.0, r0: r, y1: h, r1: r },
                    Patch::Disk { y: 0.0, r },
                    Patch::Handle { center: Vec3::new(r, h / 2.0, 0.0), big, a: 0.04, lo: -PI / 2.0, hi: PI / 2.0 },
                ]
            }
        };
        let mut total = 0.0;
        let cumulative = patches
            .iter()
            .map(|p| {
                total += p.area();
                total
            })
            .collect();
        let color = Self::color_field(category, &mut rng);
        Self { category, instance, patches, cumulative, color }
    }

    /// Category-wide field with a small per-instance perturbation.
    fn color_field<R: Rng>(category: Category, instance_rng: &mut R) -> ColorField {
        let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(category.id() as u64, CATEGORY_STREAM, 0));
        let freq = std::array::from_fn(|_| {
            let dir: [f64; 3] = UnitSphere.sample(&mut crng);
            Vec3::from(dir) * crng.gen_range(2.5..4.5) * instance_rng.gen_range(0.9..1.1)
        });
        let phase = std::array::from_fn(|_| crng.gen_range(0.0..2.0 * PI) + instance_rng.gen_range(-0.3..0.3));
        ColorField { freq, phase, radial: category.symmetric() }
    }

    /// `n` area-uniform surface points, centered on their bounding box and
    /// scaled to unit diagonal, with colors.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> PointCloud {
        let total = *self.cumulative.last().expect("shape has patches");
        let raw: Vec<Vec3> = (0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * total;
                let k = self.cumulative.partition_point(|&c| c < u).min(self.patches.len() - 1);
                self.patches[k].sample(rng)
            })
            .collect();
        let appearance = raw.iter().map(|p| self.color.eval(p)).collect();
        let (lo, hi) = bounds(&raw);
        let center = (lo + hi) / 2.0;
        let diag = (hi - lo).norm();
        let points = raw.iter().map(|p| (p - center) / diag).collect();
        PointCloud::with_appearance(points, appearance)
    }
}

fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Per-axis bounding-box extents.
pub fn extents(points: &[Vec3]) -> Vec3 {
    let (lo, hi) = bounds(points);
    hi - lo
}

/// Canonical cloud of an instance, seeded by `(category, instance)` only.
pub fn gen_instance(category: usize, instance: usize, n: usize) -> Result<PointCloud> {
    let category = Category::from_id(category)?;
    let shape = InstanceShape::new(category, instance);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(category.id() as u64, INSTANCE_STREAM ^ 0xff, instance as u64));
    Ok(shape.sample(n, &mut rng))
}

/// Von Mises draw around `mu` (Best and Fisher's rejection sampler);
/// `kappa = 0` is uniform. Result wrapped to `[-pi, pi)`.
pub fn von_mises<R: Rng>(rng: &mut R, mu: f64, kappa: f64) -> f64 {
    if kappa < 1e-8 {
        return wrap_angle(mu + rng.gen_range(-PI..PI));
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let sign = if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 };
            return wrap_angle(mu + sign * f.clamp(-1.0, 1.0).acos());
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// `1 - |mean resultant|`.
pub fn circular_variance(angles: &[f64]) -> f64 {
    1.0 - mean_resultant_length(angles)
}

/// `sqrt(-2 ln |mean resultant|)` in radians.
pub fn circular_std(angles: &[f64]) -> f64 {
    (-2.0 * mean_resultant_length(angles).ln()).sqrt()
}

fn mean_resultant_length(angles: &[f64]) -> f64 {
    let n = angles.len() as f64;
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    ((s / n).powi(2) + (c / n).powi(2)).sqrt()
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize_pose(p: &Pose) -> Pose {
    Pose::new(p.r.map(q), p.t.map(q), p.s.map(q))
}

/// Canonical-to-camera rotation from yaw about +y and small tilts.
pub fn yaw_pitch_roll(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    rot_y(yaw) * rot_x(pitch) * rot_z(roll)
}

/// Generates one sample. All stored values are exactly representable as
/// 32-bit floats.
fn gen_sample(bias: &BiasConfig, split: Split, seed: u64, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split.code(), index as u64));
    let category = Category::ALL[index % NUM_CATEGORIES];
    let pool = bias.instance_pool(split);
    let instance = rng.gen_range(pool);
    let shape = InstanceShape::new(category, instance);
    let canonical = shape.sample(bias.n_points, &mut rng);
    let yaw = match split {
        Split::Train => von_mises(&mut rng, 0.0, bias.yaw_concentration),
        Split::Test => rng.gen_range(-PI..PI),
    };
    let tilt = 10f64.to_radians();
    let r = yaw_pitch_roll(yaw, rng.gen_range(-tilt..tilt), rng.gen_range(-tilt..tilt));
    let t = Vec3::from_fn(|_, _| rng.gen_range(-0.3..0.3));
    let scale = BASE_DIAGONAL * rng.gen_range(0.8..1.2);
    let gt = quantize_pose(&Pose::new(r, t, extents(&canonical.points) * scale));
    let noise = Normal::new(0.0, bias.noise_sigma.max(0.0)).expect("finite sigma");
    let points = canonical
        .points
        .iter()
        .map(|p| {
            let world = gt.apply(&(p * scale));
            world.map(|v| q(v + if bias.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }))
        })
        .collect();
    let appearance = canonical.appearance.expect("shapes carry color").iter().map(|a| a.map(q)).collect();
    Sample { cloud: PointCloud::with_appearance(points, appearance), category: category.id(), instance, gt, split }
}

/// All samples of one split; a pure function of `(bias, split, seed)`.
pub fn gen_split(bias: &BiasConfig, split: Split, seed: u64) -> Result<Vec<Sample>> {
    bias.validate()?;
    Ok((0..bias.samples(split)).map(|i| gen_sample(bias, split, seed, i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Range of the multiplicative scale factor before clamping.
    pub scale_range: (f64, f64),
    pub min_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rotation_deg: 20.0, max_translation: 0.02, scale_range: (-0.18, 1.2), min_scale: 0.05 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { max_rotation_deg: 0.0, max_translation: 0.0, scale_range: (1.0, 1.0), min_scale: 0.05 }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Random-axis rotation, translation offset and uniform scaling about the
/// object center, with the ground truth updated to match.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis: [f64; 3] = UnitSphere.sample(&mut rng);
    let angle = uniform(&mut rng, 0.0, cfg.max_rotation_deg).to_radians();
    let r_aug = axis_angle(&Vec3::from(axis), angle);
    let dt = Vec3::from_fn(|_, _| uniform(&mut rng, -cfg.max_translation, cfg.max_translation));
    let f = uniform(&mut rng, cfg.scale_range.0, cfg.scale_range.1).max(cfg.min_scale);
    let gt = &sample.gt;
    let points = sample.cloud.points.iter().map(|p| r_aug * (p - gt.t) * f + gt.t + dt).collect();
    let new_gt = Pose::new(r_aug * gt.r, gt.t + dt, gt.s * f);
    Sample {
        cloud: PointCloud { points, appearance: sample.cloud.appearance.clone() },
        gt: new_gt,
        ..sample.clone()
    }
}

/// Angle of the augmentation rotation drawn for `seed`, in degrees.
pub fn augment_angle_deg(seed: u64, cfg: &AugmentConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _: [f64; 3] = UnitSphere.sample(&mut rng);
    uniform(&mut rng, 0.0, cfg.max_rotation_deg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub field: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool_version: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub n_points: usize,
    pub categories: Vec<CategorySpec>,
    pub bias: BiasConfig,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
}

/// Both splits of a generated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bias: BiasConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn generate(bias: BiasConfig, seed: u64) -> Result<Self> {
        Ok(Self { bias, seed, train: gen_split(&bias, Split::Train, seed)?, test: gen_split(&bias, Split::Test, seed)? })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let samples: Vec<&Sample> = self.train.iter().chain(&self.test).collect();
        save_dataset(&samples, &self.bias, self.seed, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_dataset(dir)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a CPDS array: magic, version (u32), rank (u32), dims (u64 each),
/// then row-major little-endian f32 values.
pub fn write_array(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), values.len(), "array dims and length disagree");
    let mut buf = Vec::with_capacity(12 + 8 * dims.len() + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a CPDS array, returning its dims and values.
pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |expected: usize| Error::TruncatedArray { path: path.to_path_buf(), expected, found: bytes.len() };
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::CorruptManifest { path: path.to_path_buf(), reason: "bad array magic".into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, supported: FORMAT_VERSION });
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + 4 * count;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    let values = bytes[header..expected].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((dims, values))
}

const POSE_WIDTH: usize = 15;

pub fn save_dataset(samples: &[&Sample], bias: &BiasConfig, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = samples.len();
    let n = bias.n_points;
    let mut points = Vec::with_capacity(s * n * 3);
    let mut appearance = Vec::with_capacity(s * n * 3);
    let mut poses = Vec::with_capacity(s * POSE_WIDTH);
    let mut labels = Vec::with_capacity(s * 3);
    for sample in samples {
        if sample.cloud.len() != n {
            return Err(Error::WrongPointCount { expected: n, got: sample.cloud.len() });
        }
        points.extend(sample.cloud.points.iter().flat_map(|p| p.iter().map(|&v| v as f32)));
        match &sample.cloud.appearance {
            Some(a) => appearance.extend(a.iter().flat_map(|p| p.iter().map(|&v| v as f32))),
            None => appearance.extend(std::iter::repeat(0.0f32).take(n * 3)),
        }
        let g = &sample.gt;
        poses.extend((0..3).flat_map(|i| (0..3).map(move |j| g.r[(i, j)] as f32)));
        poses.extend(g.t.iter().chain(g.s.iter()).map(|&v| v as f32));
        labels.extend([sample.category as f32, sample.instance as f32, sample.split.code() as f32]);
    }
    let arrays = vec![
        ("points", vec![s, n, 3], points),
        ("appearance", vec![s, n, 3], appearance),
        ("poses", vec![s, POSE_WIDTH], poses),
        ("labels", vec![s, 3], labels),
    ];
    let mut entries = Vec::new();
    for (field, dims, values) in &arrays {
        let file = format!("{field}.cpds");
        write_array(&dir.join(&file), dims, values)?;
        entries.push(ArrayEntry { field: field.to_string(), file, shape: dims.clone() });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        train_samples: samples.iter().filter(|x| x.split == Split::Train).count(),
        test_samples: samples.iter().filter(|x| x.split == Split::Test).count(),
        n_points: n,
        categories: category_specs(),
        bias: *bias,
        seed,
        arrays: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest { path: path.clone(), reason: e.to_string() })?;
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch { found: v as u32, supported: FORMAT_VERSION });
        }
    }
    serde_json::from_value(raw).map_err(|e| Error::CorruptManifest { path, reason: e.to_string() })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let corrupt = |reason: String| Error::CorruptManifest { path: dir.join(MANIFEST_FILE), reason };
    let total = manifest.train_samples + manifest.test_samples;
    let n = manifest.n_points;
    let mut fields = std::collections::HashMap::new();
    for entry in &manifest.arrays {
        let path: PathBuf = dir.join(&entry.file);
        let (dims, values) = read_array(&path)?;
        if dims != entry.shape {
            return Err(corrupt(format!("{} has shape {dims:?}, manifest says {:?}", entry.file, entry.shape)));
        }
        fields.insert(entry.field.clone(), (dims, values));
    }
    let mut get = |field: &str, width: usize| -> Result<Vec<f32>> {
        let (dims, values) = fields.remove(field).ok_or_else(|| corrupt(format!("missing array {field}")))?;
        if dims.first() != Some(&total) || values.len() != total * width {
            return Err(corrupt(format!("{field} holds {dims:?}, expected {total} rows of {width}")));
        }
        Ok(values)
    };
    let points = get("points", n * 3)?;
    let appearance = get("appearance", n * 3)?;
    let poses = get("poses", POSE_WIDTH)?;
    let labels = get("labels", 3)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..total {
        let vec3s = |buf: &[f32]| -> Vec<Vec3> {
            (0..n).map(|k| Vec3::from_fn(|c, _| buf[(i * n + k) * 3 + c] as f64)).collect()
        };
        let p = &poses[i * POSE_WIDTH..(i + 1) * POSE_WIDTH];
        let gt = Pose::new(
            Mat3::from_fn(|r, c| p[r * 3 + c] as f64),
            Vec3::new(p[9] as f64, p[10] as f64, p[11] as f64),
            Vec3::new(p[12] as f64, p[13] as f64, p[14] as f64),
        );
        let l = &labels[i * 3..i * 3 + 3];
        let category = l[0] as usize;
        Category::from_id(category)?;
        let split = match l[2] as u32 {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(corrupt(format!("sample {i} has split code {other}"))),
        };
        let sample = Sample {
            cloud: PointCloud::with_appearance(vec3s(&points), vec3s(&appearance)),
            category,
            instance: l[1] as usize,
            gt,
            split,
        };
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    if train.len() != manifest.train_samples || test.len() != manifest.test_samples {
        return Err(corrupt("split counts disagree with labels".into()));
    }
    Ok(Dataset { bias: manifest.bias, seed: manifest.seed, train, test })
}
