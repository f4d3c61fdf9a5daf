//! Residual knowledge distillation from a frozen, pose-invariant teacher.

use nalgebra::SymmetricEigen;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::checksum_of;
use crate::autodiff::{Activation, Bound, Linear, Mat, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{centroid, Mat3, Vec3};

pub const RADIAL_BINS: usize = 16;
pub const HEIGHT_BINS: usize = 8;
pub const DESCRIPTOR_DIM: usize = 3 + RADIAL_BINS + HEIGHT_BINS;
const RADIAL_RANGE: f64 = 2.5;
const HEIGHT_RANGE: f64 = 2.0;

/// Anything that maps an object cloud to a fixed-width embedding.
///
/// Implementations must be deterministic and must not change during training.
pub trait Teacher: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, points: &[Vec3]) -> Result<Array1<f64>>;
    /// Digest of the teacher's frozen state.
    fn checksum(&self) -> String;
}

/// Settings recorded in run configs so embeddings reproduce across machines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub seed: u64,
    pub dim: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { seed: 0x7ea0, dim: 64 }
    }
}

/// Shape-descriptor teacher followed by a frozen random projection.
///
/// The descriptor is built from rigid invariants only: sorted covariance
/// spectrum, a radial-distance histogram about the centroid, and a histogram
/// of heights along the most isolated principal axis. Histograms use linear
/// (tent) binning so the embedding varies continuously with the points.
#[derive(Debug, Clone)]
pub struct MockTeacher {
    config: TeacherConfig,
    projection: Mat,
}

impl MockTeacher {
    pub fn new(config: TeacherConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (DESCRIPTOR_DIM as f64).sqrt();
        let projection = Mat::from_shape_simple_fn((DESCRIPTOR_DIM, config.dim), || scale * rng.sample::<f64, _>(StandardNormal));
        Self { config, projection }
    }

    pub fn config(&self) -> TeacherConfig {
        self.config
    }
}

fn tent_bin(hist: &mut [f64], value: f64, range: f64) {
    let bins = hist.len();
    let x = (value / range * bins as f64 - 0.5).clamp(0.0, (bins - 1) as f64);
    let lo = x.floor() as usize;
    let frac = x - lo as f64;
    hist[lo] += 1.0 - frac;
    if lo + 1 < bins {
        hist[lo + 1] += frac;
    }
}

/// Rigid-invariant shape descriptor of width [`DESCRIPTOR_DIM`].
pub fn shape_descriptor(points: &[Vec3]) -> Result<Array1<f64>> {
    if points.len() < 16 {
        return Err(Error::TooFewPoints { needed: 16, got: points.len() });
    }
    let n = points.len() as f64;
    let c = centroid(points);
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let rms = lambda.iter().sum::<f64>().sqrt();
    if !(rms > 0.0) {
        return Err(Error::DegenerateInput("teacher input has zero spread".into()));
    }
    // the axis whose eigenvalue is farthest from the other two is well defined
    // even for rotationally symmetric shapes
    let gap = |k: usize| {
        let others: Vec<f64> = (0..3).filter(|&j| j != k).map(|j| lambda[j]).collect();
        others.iter().map(|o| (lambda[k] - o).abs()).fold(f64::INFINITY, f64::min)
    };
    let axis_rank = (0..3).max_by(|&a, &b| gap(a).total_cmp(&gap(b))).unwrap_or(0);
    let axis: Vec3 = eig.eigenvectors.column(order[axis_rank]).into();

    let mut radial = [0.0; RADIAL_BINS];
    let mut height = [0.0; HEIGHT_BINS];
    for p in points {
        let d = p - c;
        tent_bin(&mut radial, d.norm() / rms, RADIAL_RANGE);
        tent_bin(&mut height, d.dot(&axis).abs() / rms, HEIGHT_RANGE);
    }
    let mut out = Vec::with_capacity(DESCRIPTOR_DIM);
    out.extend(lambda.iter().map(|l| l.sqrt() / rms - 1.0 / 3f64.sqrt()));
    out.extend(radial.iter().map(|h| RADIAL_BINS as f64 * h / n - 1.0));
    out.extend(height.iter().map(|h| HEIGHT_BINS as f64 * h / n - 1.0));
    Ok(Array1::from(out))
}

impl Teacher for MockTeacher {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, points: &[Vec3]) -> Result<Array1<f64>> {
        let d = shape_descriptor(points)?;
        Ok(self.projection.t().dot(&d))
    }

    fn checksum(&self) -> String {
        checksum_of(std::iter::once(("teacher.projection", &self.projection)))
    }
}

/// Mean over points: `N x C1 -> C1`.
pub fn pool_point_features(f_p: &Mat) -> Array1<f64> {
    f_p.mean_axis(ndarray::Axis(0)).expect("pooling needs at least one point")
}

pub const DEFAULT_MU: f64 = 0.1;

/// `F + mu * K2(GeLU(K1(F)))` with a zero-initialized `K2`, plus the
/// projection `psi` into the teacher's embedding space.
#[derive(Debug, Clone)]
pub struct ResidualHead {
    pub k1: Linear,
    pub k2: Linear,
    pub psi: Linear,
    pub mu: f64,
}

impl ResidualHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c1: usize, c3: usize, mu: f64, rng: &mut R) -> Self {
        Self {
            k1: Linear::new(store, &format!("{name}.k1"), c1, c1, true, rng),
            k2: Linear::zeros(store, &format!("{name}.k2"), c1, c1, true, rng),
            psi: Linear::new(store, &format!("{name}.psi"), c1, c3, false, rng),
            mu,
        }
    }

    /// Applies the residual refinement to `B x C1` pooled features.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, f_avg: Var) -> Result<Var> {
        let h = self.k1.forward(tape, params, f_avg)?;
        let h = Activation::Gelu.apply(tape, h);
        let h = self.k2.forward(tape, params, h)?;
        let h = tape.scale(h, self.mu);
        Ok(tape.add(f_avg, h))
    }

    pub fn project(&self, tape: &mut Tape, params: &Bound, head_out: Var) -> Result<Var> {
        self.psi.forward(tape, params, head_out)
    }
}

/// Batch-mean distance between teacher embeddings and projected features.
///
/// `squared` switches to squared Euclidean distances.
pub fn kd_loss(tape: &mut Tape, projected: Var, teacher: &Mat, squared: bool) -> Result<Var> {
    let (b, c3) = tape.shape(projected);
    if teacher.dim() != (b, c3) || b == 0 {
        return Err(Error::ShapeMismatch(format!("kd loss: projected {:?} vs teacher {:?}", (b, c3), teacher.dim())));
    }
    let t = tape.constant(teacher.clone());
    let diff = tape.sub(t, projected);
    let per_sample = if squared {
        let sq = tape.mul(diff, diff);
        tape.sum(sq)
    } else {
        let norms = tape.row_norm(diff);
        tape.sum(norms)
    };
    Ok(tape.scale(per_sample, 1.0 / b as f64))
}
