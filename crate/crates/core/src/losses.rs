//! Training objective: pose, keypoint diversity, object-aware chamfer,
//! NOCS and distillation terms.
//!
//! Batched losses take `groups` stacked samples and average per-sample
//! values over the batch.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::geometry::{Pose, Vec3};

/// Weights of the combined objective and the diversity margin (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ocd: f64,
    pub div: f64,
    pub nocs: f64,
    pub pose: f64,
    pub kd: f64,
    pub div_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ocd: 1.0, div: 5.0, nocs: 1.0, pose: 0.3, kd: 0.01, div_margin: 0.01 }
    }
}

impl LossWeights {
    /// Reweighting used by the desk-scale training defaults.
    pub fn desk() -> Self {
        Self { div: 1.0, pose: 3.0, ..Self::default() }
    }
}

/// Variants and knobs of individual loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Element-wise absolute pose terms instead of Euclidean/Frobenius norms.
    pub pose_l1: bool,
    /// Squared distances in the distillation loss.
    pub kd_squared: bool,
    pub smooth_l1_beta: f64,
    pub nocs_rotation_transpose: bool,
    pub outlier_filter: bool,
    pub outlier_k: usize,
    pub outlier_sigma: f64,
    /// Spin symmetric-category targets about their axis to match the prediction.
    #[serde(default = "enabled")]
    pub symmetry_aware: bool,
}

fn enabled() -> bool {
    true
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            pose_l1: false,
            kd_squared: false,
            smooth_l1_beta: 1.0,
            nocs_rotation_transpose: false,
            outlier_filter: true,
            outlier_k: 8,
            outlier_sigma: 2.5,
            symmetry_aware: true,
        }
    }
}

/// Scalar values of each loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pose: f64,
    pub div: f64,
    pub ocd: f64,
    pub nocs: f64,
    pub kd: f64,
}

/// Weighted sum, accumulated in the order ocd, div, nocs, pose, kd.
pub fn total_loss(c: &LossComponents, w: &LossWeights, kd_enabled: bool) -> f64 {
    let mut total = w.ocd * c.ocd + w.div * c.div + w.nocs * c.nocs + w.pose * c.pose;
    if kd_enabled {
        total += w.kd * c.kd;
    }
    total
}

/// Tape handles of each term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pose: Var,
    pub div: Var,
    pub ocd: Var,
    pub nocs: Var,
    pub kd: Option<Var>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            pose: tape.scalar(self.pose),
            div: tape.scalar(self.div),
            ocd: tape.scalar(self.ocd),
            nocs: tape.scalar(self.nocs),
            kd: self.kd.map_or(0.0, |k| tape.scalar(k)),
        }
    }

    /// Differentiable weighted total; the kd term is dropped when absent.
    pub fn total(&self, tape: &mut Tape, w: &LossWeights) -> Var {
        let mut acc = tape.scale(self.ocd, w.ocd);
        for (v, wt) in [(self.div, w.div), (self.nocs, w.nocs), (self.pose, w.pose)] {
            let term = tape.scale(v, wt);
            acc = tape.add(acc, term);
        }
        if let Some(kd) = self.kd {
            let term = tape.scale(kd, w.kd);
            acc = tape.add(acc, term);
        }
        acc
    }
}

/// Column-major flattening `[R[:,0], R[:,1], R[:,2]]`, matching the pose head layout.
pub fn rotation_columns(r: &crate::geometry::Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for j in 0..3 {
        for i in 0..3 {
            out[j * 3 + i] = r[(i, j)];
        }
    }
    out
}

/// `gt` spun about its canonical +y axis to the angle closest (in Frobenius
/// norm) to `pred`, for targets of rotationally symmetric categories.
pub fn align_to_symmetry(pred: &crate::geometry::Mat3, gt: &Pose) -> Pose {
    let m = pred.transpose() * gt.r;
    let angle = (m[(2, 0)] - m[(0, 2)]).atan2(m[(0, 0)] + m[(2, 2)]);
    Pose::new(gt.r * crate::geometry::rot_y(angle), gt.t, gt.s)
}

/// Batch-mean pose loss. `rot` is `B x 9` column-major, `t` and `s` are `B x 3`.
pub fn l_pose(tape: &mut Tape, rot: Var, t: Var, s: Var, gt: &[Pose], l1: bool) -> Var {
    let b = gt.len();
    let gt_rot = Mat::from_shape_fn((b, 9), |(i, k)| rotation_columns(&gt[i].r)[k]);
    let gt_t = Mat::from_shape_fn((b, 3), |(i, k)| gt[i].t[k]);
    let gt_s = Mat::from_shape_fn((b, 3), |(i, k)| gt[i].s[k]);
    let mut terms = Vec::with_capacity(3);
    for (pred, target) in [(rot, gt_rot), (t, gt_t), (s, gt_s)] {
        let target = tape.constant(target);
        let diff = tape.sub(target, pred);
        let per_row = if l1 { tape.abs(diff) } else { tape.row_norm(diff) };
        terms.push(tape.sum(per_row));
    }
    let a = tape.add(terms[0], terms[1]);
    let total = tape.add(a, terms[2]);
    tape.scale(total, 1.0 / b as f64)
}

/// Sum over ordered keypoint pairs of `max(margin - |p_i - p_j|, 0)`, batch-averaged.
pub fn l_div(tape: &mut Tape, coords: Var, groups: usize, margin: f64) -> Var {
    let k = tape.shape(coords).0 / groups;
    let d = tape.pairwise_dist_grouped(coords, groups);
    let gap = tape.affine(d, -1.0, margin);
    let hinge = tape.relu(gap);
    let mask = tape.constant(Array2::from_shape_fn((groups * k, k), |(r, j)| if r % k == j { 0.0 } else { 1.0 }));
    let off_diag = tape.mul(hinge, mask);
    let s = tape.sum(off_diag);
    tape.scale(s, 1.0 / groups as f64)
}

/// Mean distance from each keypoint to its nearest point of the sample's
/// (filtered) object cloud, batch-averaged.
pub fn l_ocd(tape: &mut Tape, coords: Var, clouds: &[Vec<Vec3>]) -> Var {
    let groups = clouds.len();
    let rows = tape.shape(coords).0;
    let k = rows / groups;
    let values = tape.value(coords);
    let mut nearest = Mat::zeros((rows, 3));
    for (g, cloud) in clouds.iter().enumerate() {
        assert!(!cloud.is_empty(), "chamfer target cloud is empty");
        for i in 0..k {
            let r = g * k + i;
            let p = Vec3::new(values[[r, 0]], values[[r, 1]], values[[r, 2]]);
            let best = cloud
                .iter()
                .min_by(|a, b| (*a - p).norm_squared().total_cmp(&(*b - p).norm_squared()))
                .expect("non-empty cloud");
            for c in 0..3 {
                nearest[[r, c]] = best[c];
            }
        }
    }
    let target = tape.constant(nearest);
    let diff = tape.sub(coords, target);
    let norms = tape.row_norm(diff);
    let s = tape.sum(norms);
    tape.scale(s, 1.0 / rows as f64)
}

/// Smooth-L1 between predicted keypoint NOCS and the projection of the
/// keypoints by the ground-truth pose, mean-reduced over all coordinates.
pub fn l_nocs(tape: &mut Tape, nocs_pred: Var, coords: Var, gt: &[Pose], beta: f64, transpose: bool) -> Var {
    let groups = gt.len();
    let rows = tape.shape(coords).0;
    let k = rows / groups;
    let t_rep = Mat::from_shape_fn((rows, 3), |(r, c)| gt[r / k].t[c]);
    let rot = Mat::from_shape_fn((groups * 3, 3), |(r, c)| {
        let m = &gt[r / 3].r;
        if transpose {
            m[(c, r % 3)]
        } else {
            m[(r % 3, c)]
        }
    });
    let inv_norm = Mat::from_shape_fn((rows, 1), |(r, _)| 1.0 / gt[r / k].s.norm());
    let t_rep = tape.constant(t_rep);
    let rot = tape.constant(rot);
    let inv_norm = tape.constant(inv_norm);
    let centered = tape.sub(coords, t_rep);
    let rotated = tape.group_matmul(centered, rot, groups);
    let target = tape.mul_col(rotated, inv_norm);
    let diff = tape.sub(nocs_pred, target);
    let sl = tape.smooth_l1(diff, beta);
    tape.mean(sl)
}

/// Drops points whose mean k-NN distance exceeds `mean + n_sigma * std`
/// over the cloud. The threshold never drops below `MIN_OUTLIER_RATIO * mean`
/// so that evenly sampled clouds, whose spread is tiny, pass untouched.
pub const MIN_OUTLIER_RATIO: f64 = 2.0;

pub fn filter_outliers(points: &[Vec3], k: usize, n_sigma: f64) -> Vec<Vec3> {
    inlier_indices(points, k, n_sigma).into_iter().map(|i| points[i]).collect()
}

/// Indices kept by [`filter_outliers`], in input order.
pub fn inlier_indices(points: &[Vec3], k: usize, n_sigma: f64) -> Vec<usize> {
    let n = points.len();
    if n_sigma.is_infinite() || n <= k || k == 0 {
        return (0..n).collect();
    }
    let mut mean_knn = Vec::with_capacity(n);
    let mut dists = vec![0.0; n];
    for p in points {
        for (d, q) in dists.iter_mut().zip(points) {
            *d = (p - q).norm();
        }
        // the point itself sits at index 0 after partitioning
        dists.select_nth_unstable_by(k, f64::total_cmp);
        let near = &dists[..=k];
        mean_knn.push(near.iter().sum::<f64>() / k as f64);
    }
    let mu = mean_knn.iter().sum::<f64>() / n as f64;
    let sd = (mean_knn.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n as f64).sqrt();
    let limit = (mu + n_sigma * sd).max(MIN_OUTLIER_RATIO * mu);
    mean_knn.iter().enumerate().filter(|(_, &d)| d <= limit).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use crate::geometry::{axis_angle, nocs_project, rot_x};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            axis_angle(&Vec3::new(rng.gen(), rng.gen(), rng.gen()), rng.gen_range(-3.0..3.0)),
            Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
            Vec3::new(rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)),
        )
    }

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng, scale: f64) -> Mat {
        Mat::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
    }

    fn pose_loss_value(pred: &Pose, gt: &Pose, l1: bool) -> f64 {
        let mut tape = Tape::new();
        let r = tape.constant(Mat::from_shape_vec((1, 9), rotation_columns(&pred.r).to_vec()).unwrap());
        let t = tape.constant(Mat::from_shape_vec((1, 3), pred.t.iter().copied().collect()).unwrap());
        let s = tape.constant(Mat::from_shape_vec((1, 3), pred.s.iter().copied().collect()).unwrap());
        let l = l_pose(&mut tape, r, t, s, &[*gt], l1);
        tape.scalar(l)
    }

    #[test]
    fn pose_loss_examples() {
        let gt = Pose::new(rot_x(0.4), Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.2, 0.1, 0.3));
        assert_eq!(pose_loss_value(&gt, &gt, false), 0.0);
        let shifted = Pose { t: gt.t + Vec3::new(0.0, 3.0, 4.0), ..gt };
        assert!((pose_loss_value(&shifted, &gt, false) - 5.0).abs() < 1e-12);
        assert!((pose_loss_value(&shifted, &gt, true) - 7.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (rand_pose(&mut rng), rand_pose(&mut rng));
        let expected = (b.r - a.r).norm() + (b.t - a.t).norm() + (b.s - a.s).norm();
        assert!((pose_loss_value(&a, &b, false) - expected).abs() < 1e-10);
        let expected_l1: f64 = (b.r - a.r).abs().sum() + (b.t - a.t).abs().sum() + (b.s - a.s).abs().sum();
        assert!((pose_loss_value(&a, &b, true) - expected_l1).abs() < 1e-10);
    }

    fn div_value(coords: &Mat, groups: usize) -> f64 {
        let mut tape = Tape::new();
        let c = tape.constant(coords.clone());
        let l = l_div(&mut tape, c, groups, 0.01);
        tape.scalar(l)
    }

    #[test]
    fn div_loss_examples() {
        let spread = Mat::from_shape_fn((4, 3), |(i, j)| if i == j { 0.05 } else { 0.0 });
        assert_eq!(div_value(&spread, 1), 0.0);
        let pair = ndarray::array![[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]];
        assert!((div_value(&pair, 1) - 0.02).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cluster = randn((2 * 6, 3), &mut rng, 0.006);
        let mut brute = 0.0;
        for g in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    if i != j {
                        let d = (0..3).map(|c| (cluster[[g * 6 + i, c]] - cluster[[g * 6 + j, c]]).powi(2)).sum::<f64>().sqrt();
                        brute += (0.01 - d).max(0.0);
                    }
                }
            }
        }
        assert!((div_value(&cluster, 2) - brute / 2.0).abs() < 1e-10);
        // permutation of keypoints within a sample
        let perm = cluster.select(ndarray::Axis(0), &[3, 1, 0, 5, 4, 2, 6, 8, 7, 11, 10, 9]);
        assert!((div_value(&perm, 2) - div_value(&cluster, 2)).abs() < 1e-15);
    }

    fn ocd_value(coords: &Mat, clouds: &[Vec<Vec3>]) -> f64 {
        let mut tape = Tape::new();
        let c = tape.constant(coords.clone());
        let l = l_ocd(&mut tape, c, clouds);
        tape.scalar(l)
    }

    #[test]
    fn ocd_loss_examples() {
        let cloud = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)];
        let on = ndarray::array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(ocd_value(&on, &[cloud.clone()]), 0.0);
        let mut off = on.clone();
        off[[2, 2]] = 0.3;
        assert!((ocd_value(&off, &[cloud.clone()]) - 0.3 / 4.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords = randn((2 * 5, 3), &mut rng, 1.0);
        let clouds: Vec<Vec<Vec3>> = (0..2)
            .map(|_| (0..20).map(|_| Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))).collect())
            .collect();
        let mut brute = 0.0;
        for g in 0..2 {
            for i in 0..5 {
                let p = Vec3::new(coords[[g * 5 + i, 0]], coords[[g * 5 + i, 1]], coords[[g * 5 + i, 2]]);
                brute += clouds[g].iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            }
        }
        assert!((ocd_value(&coords, &clouds) - brute / 10.0).abs() < 1e-10);
        let mut shuffled = clouds.clone();
        shuffled[0].reverse();
        shuffled[1].rotate_left(7);
        let perm = coords.select(ndarray::Axis(0), &[4, 3, 2, 1, 0, 9, 5, 6, 8, 7]);
        assert!((ocd_value(&perm, &shuffled) - ocd_value(&coords, &clouds)).abs() < 1e-12);
    }

    fn nocs_value(pred: &Mat, coords: &Mat, gt: &[Pose]) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let c = tape.constant(coords.clone());
        let l = l_nocs(&mut tape, p, c, gt, 1.0, false);
        tape.scalar(l)
    }

    #[test]
    fn nocs_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = rand_pose(&mut rng);
        let k = 6;
        let coords = randn((k, 3), &mut rng, 0.1);
        let pts: Vec<Vec3> = coords.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
        let target = nocs_project(&pts, &gt, false);
        let exact = Mat::from_shape_fn((k, 3), |(i, c)| target[i][c]);
        assert!(nocs_value(&exact, &coords, &[gt]) < 1e-30);
        let mut small = exact.clone();
        small[[2, 1]] += 0.5;
        assert!((nocs_value(&small, &coords, &[gt]) - 0.125 / (3.0 * k as f64)).abs() < 1e-12);
        let mut big = exact.clone();
        big[[4, 0]] -= 2.0;
        assert!((nocs_value(&big, &coords, &[gt]) - 1.5 / (3.0 * k as f64)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w, true), 0.0);
        let unit = LossComponents { pose: 1.0, div: 1.0, ocd: 1.0, nocs: 1.0, kd: 1.0 };
        assert_eq!(total_loss(&unit, &w, true), 7.31);
        assert_eq!(total_loss(&unit, &w, false), 7.30);
    }

    #[test]
    fn total_loss_superposition() {
        let w = LossWeights::default();
        let a = LossComponents { pose: 0.5, div: 0.25, ocd: 2.0, nocs: 0.125, kd: 4.0 };
        let b = LossComponents { pose: 1.5, div: 0.75, ocd: 1.0, nocs: 0.375, kd: 2.0 };
        let sum = LossComponents { pose: 2.0, div: 1.0, ocd: 3.0, nocs: 0.5, kd: 6.0 };
        let lhs = total_loss(&sum, &w, true);
        let rhs = total_loss(&a, &w, true) + total_loss(&b, &w, true);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let gts: Vec<Pose> = (0..2).map(|_| rand_pose(&mut rng)).collect();
            let check = GradCheck::default();

            // pose, both norm variants, with inputs away from exact agreement
            let rot = randn((2, 9), &mut rng, 1.0);
            let t = randn((2, 3), &mut rng, 0.2);
            let s = randn((2, 3), &mut rng, 0.2);
            for l1 in [false, true] {
                let r = check.run(&[rot.clone(), t.clone(), s.clone()], |tape, v| l_pose(tape, v[0], v[1], v[2], &gts, l1)).unwrap();
                assert!(r.passed, "pose {r:?}");
            }

            // diversity on a tight cluster so hinges are active, away from d = margin
            let cluster = randn((2 * 5, 3), &mut rng, 0.004);
            let r = check.run(&[cluster], |tape, v| l_div(tape, v[0], 2, 0.01)).unwrap();
            assert!(r.passed, "div {r:?}");

            // chamfer with unique nearest neighbours
            let coords = randn((2 * 4, 3), &mut rng, 1.0);
            let clouds: Vec<Vec<Vec3>> = (0..2)
                .map(|_| (0..15).map(|_| Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))).collect())
                .collect();
            let r = check.run(&[coords.clone()], |tape, v| l_ocd(tape, v[0], &clouds)).unwrap();
            assert!(r.passed, "ocd {r:?}");

            // nocs, gradients through both prediction and keypoints
            let pred = randn((2 * 4, 3), &mut rng, 1.0);
            let kp = randn((2 * 4, 3), &mut rng, 0.2);
            for transpose in [false, true] {
                let r = check.run(&[pred.clone(), kp.clone()], |tape, v| l_nocs(tape, v[0], v[1], &gts, 1.0, transpose)).unwrap();
                assert!(r.passed, "nocs {r:?}");
            }
        }
    }

    fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                Vec3::new(r * th.cos(), y, r * th.sin())
            })
            .collect()
    }

    #[test]
    fn outlier_filter_examples() {
        let sphere = fibonacci_sphere(512);
        assert_eq!(filter_outliers(&sphere, 8, 2.5).len(), 512);
        let mut with_outlier = sphere.clone();
        with_outlier.push(Vec3::new(100.0, 0.0, 0.0));
        let kept = filter_outliers(&with_outlier, 8, 2.5);
        assert_eq!(kept, sphere);
        assert_eq!(filter_outliers(&with_outlier, 8, f64::INFINITY), with_outlier);
    }

    #[test]
    fn outlier_filter_keeps_random_spheres() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..512)
                .map(|_| Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)).normalize())
                .collect();
            assert_eq!(filter_outliers(&pts, 8, 2.5).len(), 512, "seed {seed}");
        }
    }
}
