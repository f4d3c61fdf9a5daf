//! Pose accuracy metrics: oriented-box IoU, symmetry-aware rotation and
//! translation thresholds, and per-category report tables.
//!
//! Each sample holds one object, so per-sample accuracy stands in for the
//! detection-style average precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, rotation_error_deg, Pose, Vec3};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_YAW_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    pub name: String,
    pub symmetric: bool,
    /// Canonical-frame axis, unit norm; ignored unless `symmetric`.
    pub symmetry_axis: Vec3,
}

impl CategorySpec {
    pub fn new(id: usize, name: impl Into<String>, symmetric: bool) -> Self {
        Self { id, name: name.into(), symmetric, symmetry_axis: Vec3::y() }
    }

    fn axis(&self) -> Option<&Vec3> {
        self.symmetric.then_some(&self.symmetry_axis)
    }
}

/// Lattice estimate of the IoU of two oriented boxes.
///
/// The smaller box `a` is covered by a `resolution x resolution` grid of
/// lines along its local z axis; each line is clipped exactly against the
/// other box `b`, and the covered fraction of `a` gives the intersection
/// volume.
pub fn box_iou_3d(a: &Pose, b: &Pose, resolution: usize) -> f64 {
    let res = resolution.max(1);
    let (a, b) = if b.s.product() < a.s.product() { (b, a) } else { (a, b) };
    let va = a.s.product();
    let vb = b.s.product();
    if !(va > 0.0) || !(vb > 0.0) {
        return 0.0;
    }
    // a's local frame expressed in b's local frame
    let rot = b.r.transpose() * a.r;
    let origin = b.r.transpose() * (a.t - b.t);
    let half_b = b.s / 2.0;
    let dir = rot * Vec3::z() * a.s.z;
    let mut covered = 0.0;
    for i in 0..res {
        let u = (i as f64 + 0.5) / res as f64 - 0.5;
        for j in 0..res {
            let v = (j as f64 + 0.5) / res as f64 - 0.5;
            // line p(w) = base + w * dir for w in [-1/2, 1/2]
            let base = origin + rot * Vec3::new(u * a.s.x, v * a.s.y, 0.0);
            let (mut lo, mut hi) = (-0.5f64, 0.5f64);
            for k in 0..3 {
                if dir[k].abs() < 1e-15 {
                    if base[k].abs() > half_b[k] {
                        hi = lo - 1.0;
                        break;
                    }
                } else {
                    let w0 = (-half_b[k] - base[k]) / dir[k];
                    let w1 = (half_b[k] - base[k]) / dir[k];
                    lo = lo.max(w0.min(w1));
                    hi = hi.min(w0.max(w1));
                }
            }
            if hi > lo {
                covered += hi - lo;
            }
        }
    }
    let inter = va * (covered / (res * res) as f64).min(1.0);
    (inter / (va + vb - inter)).clamp(0.0, 1.0)
}

/// IoU maximized over `yaw_steps` evenly spaced rotations of `pred` about the
/// ground truth's symmetry axis (angles `2 pi k / yaw_steps`, `k = 0..`).
pub fn symmetry_aware_iou(pred: &Pose, gt: &Pose, spec: &CategorySpec, yaw_steps: usize, resolution: usize) -> f64 {
    let Some(axis) = spec.axis() else {
        return box_iou_3d(pred, gt, resolution);
    };
    let world_axis = gt.r * axis;
    (0..yaw_steps.max(1))
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / yaw_steps.max(1) as f64;
            let swept = Pose { r: axis_angle(&world_axis, theta) * pred.r, ..*pred };
            box_iou_3d(&swept, gt, resolution)
        })
        .fold(0.0, f64::max)
}

/// Rotation error below `deg_th` degrees and translation error below
/// `cm_th` centimeters.
pub fn pose_correct(pred: &Pose, gt: &Pose, spec: &CategorySpec, deg_th: f64, cm_th: f64) -> bool {
    let rot = rotation_error_deg(&pred.r, &gt.r, spec.axis());
    let trans = (pred.t - gt.t).norm();
    rot < deg_th && trans < cm_th / 100.0
}

pub const METRIC_NAMES: [&str; 7] = ["IoU25", "IoU50", "IoU75", "5deg2cm", "5deg5cm", "10deg2cm", "10deg5cm"];
const METRIC_LABELS: [&str; 7] = ["IoU25", "IoU50", "IoU75", "5°2cm", "5°5cm", "10°2cm", "10°5cm"];
const IOU_THRESHOLDS: [f64; 3] = [0.25, 0.50, 0.75];
const POSE_THRESHOLDS: [(f64, f64); 4] = [(5.0, 2.0), (5.0, 5.0), (10.0, 2.0), (10.0, 5.0)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub resolution: usize,
    pub yaw_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { resolution: DEFAULT_RESOLUTION, yaw_steps: DEFAULT_YAW_STEPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub id: usize,
    pub name: String,
    pub count: usize,
    /// Accuracies in [`METRIC_NAMES`] order.
    pub values: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryResult>,
    /// Categories with a spec but no samples; excluded from the mean.
    pub absent: Vec<String>,
    pub mean: [f64; 7],
}

impl EvalReport {
    pub fn value(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&m| m == metric).map(|k| self.mean[k])
    }

    /// Average of the two 5-degree accuracies.
    pub fn mean_5deg(&self) -> f64 {
        (self.mean[3] + self.mean[4]) / 2.0
    }

    /// Checks IoU75 <= IoU50 <= IoU25 and the n-degree m-cm lattice order
    /// for every category and the mean.
    pub fn check_monotone(&self) -> std::result::Result<(), String> {
        let rows = self.categories.iter().map(|c| (c.name.as_str(), &c.values)).chain(std::iter::once(("mean", &self.mean)));
        for (name, v) in rows {
            let ok = v[2] <= v[1]
                && v[1] <= v[0]
                && v[3] <= v[4].min(v[5])
                && v[4].min(v[5]) <= v[4].max(v[5])
                && v[4].max(v[5]) <= v[6]
                && v.iter().all(|x| (0.0..=1.0).contains(x));
            if !ok {
                return Err(format!("{name}: {v:?}"));
            }
        }
        Ok(())
    }

    /// `{metric: {category: value, ..., "mean": value}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut out = serde_json::Map::new();
        for (k, metric) in METRIC_NAMES.iter().enumerate() {
            let mut per: BTreeMap<String, serde_json::Value> = BTreeMap::new();
            for c in &self.categories {
                per.insert(c.name.clone(), serde_json::json!(c.values[k]));
            }
            per.insert("mean".into(), serde_json::json!(self.mean[k]));
            out.insert(metric.to_string(), serde_json::to_value(per).expect("map serializes"));
        }
        let counts: BTreeMap<String, usize> = self.categories.iter().map(|c| (c.name.clone(), c.count)).collect();
        out.insert("count".into(), serde_json::json!(counts));
        if !self.absent.is_empty() {
            out.insert("absent".into(), serde_json::json!(self.absent));
        }
        serde_json::Value::Object(out)
    }

    /// Inverse of [`EvalReport::to_json`] given the category order.
    pub fn from_json(value: &serde_json::Value, specs: &[CategorySpec]) -> Result<Self> {
        let bad = |m: String| Error::InvalidConfig(format!("malformed report: {m}"));
        let get = |metric: &str, key: &str| -> Option<f64> { value.get(metric)?.get(key)?.as_f64() };
        let mut mean = [0.0; 7];
        for (k, m) in METRIC_NAMES.iter().enumerate() {
            mean[k] = get(m, "mean").ok_or_else(|| bad(format!("missing {m}.mean")))?;
        }
        let absent: Vec<String> = value
            .get("absent")
            .and_then(|a| a.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let mut categories = Vec::new();
        for spec in specs {
            if get(METRIC_NAMES[0], &spec.name).is_none() {
                continue;
            }
            let mut values = [0.0; 7];
            for (k, m) in METRIC_NAMES.iter().enumerate() {
                values[k] = get(m, &spec.name).ok_or_else(|| bad(format!("missing {m}.{}", spec.name)))?;
            }
            let count = value.get("count").and_then(|c| c.get(&spec.name)).and_then(|c| c.as_u64()).unwrap_or(0) as usize;
            categories.push(CategoryResult { id: spec.id, name: spec.name.clone(), count, values });
        }
        Ok(Self { categories, absent, mean })
    }

    /// Fixed-width table, one row per category then the mean, values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# accuracy per sample (one object per sample)");
        let _ = write!(s, "{:<10}", "category");
        for l in METRIC_LABELS {
            let _ = write!(s, "{l:>9}");
        }
        s.push('\n');
        let rows = self.categories.iter().map(|c| (c.name.as_str(), &c.values)).chain(std::iter::once(("mean", &self.mean)));
        for (name, v) in rows {
            let _ = write!(s, "{name:<10}");
            for x in v {
                let _ = write!(s, "{:>9.1}", 100.0 * x);
            }
            s.push('\n');
        }
        for a in &self.absent {
            let _ = writeln!(s, "{a:<10}   (no samples)");
        }
        s
    }
}

fn sample_scores(pred: &Pose, gt: &Pose, spec: &CategorySpec, cfg: &EvalConfig) -> [bool; 7] {
    let iou = symmetry_aware_iou(pred, gt, spec, cfg.yaw_steps, cfg.resolution);
    let mut out = [false; 7];
    for (k, th) in IOU_THRESHOLDS.iter().enumerate() {
        out[k] = iou > *th;
    }
    for (k, (deg, cm)) in POSE_THRESHOLDS.iter().enumerate() {
        out[3 + k] = pose_correct(pred, gt, spec, *deg, *cm);
    }
    out
}

/// Per-category accuracies and their unweighted mean over categories that
/// have samples. Categories without samples are listed as absent with a
/// warning.
pub fn evaluate(predictions: &[(usize, Pose)], ground_truths: &[Pose], specs: &[CategorySpec], cfg: &EvalConfig) -> Result<EvalReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} ground truths", predictions.len(), ground_truths.len())));
    }
    if predictions.is_empty() {
        return Err(Error::DegenerateInput("nothing to evaluate".into()));
    }
    if let Some(&(c, _)) = predictions.iter().find(|(c, _)| !specs.iter().any(|s| s.id == *c)) {
        return Err(Error::UnknownCategory(c));
    }
    let scores: Vec<[bool; 7]> = predictions
        .par_iter()
        .zip(ground_truths.par_iter())
        .map(|((c, pred), gt)| {
            let spec = specs.iter().find(|s| s.id == *c).expect("checked above");
            sample_scores(pred, gt, spec, cfg)
        })
        .collect();
    let mut categories = Vec::new();
    let mut absent = Vec::new();
    for spec in specs {
        let hits: Vec<&[bool; 7]> = predictions.iter().zip(&scores).filter(|((c, _), _)| *c == spec.id).map(|(_, s)| s).collect();
        if hits.is_empty() {
            log::warn!("{}", Error::EmptyCategory(spec.id));
            absent.push(spec.name.clone());
            continue;
        }
        let n = hits.len() as f64;
        let values = std::array::from_fn(|k| hits.iter().filter(|s| s[k]).count() as f64 / n);
        categories.push(CategoryResult { id: spec.id, name: spec.name.clone(), count: hits.len(), values });
    }
    let m = categories.len() as f64;
    let mean = std::array::from_fn(|k| categories.iter().map(|c| c.values[k]).sum::<f64>() / m);
    Ok(EvalReport { categories, absent, mean })
}

/// Normalized histogram of angles over `[-pi, pi)`.
pub fn yaw_histogram(angles: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if angles.is_empty() {
        return h;
    }
    let pi = std::f64::consts::PI;
    for a in angles {
        let x = (a + pi).rem_euclid(2.0 * pi) / (2.0 * pi);
        h[((x * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let n = angles.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Jensen-Shannon divergence in nats, bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "histograms must share bins");
    let kl = |a: &[f64], m: &[f64]| -> f64 { a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum() };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_y, Mat3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(t: Vec3, s: Vec3) -> Pose {
        Pose::new(Mat3::identity(), t, s)
    }

    fn axis_aligned_iou(a: &Pose, b: &Pose) -> f64 {
        let mut inter = 1.0;
        for k in 0..3 {
            let lo = (a.t[k] - a.s[k] / 2.0).max(b.t[k] - b.s[k] / 2.0);
            let hi = (a.t[k] + a.s[k] / 2.0).min(b.t[k] + b.s[k] / 2.0);
            inter *= (hi - lo).max(0.0);
        }
        inter / (a.s.product() + b.s.product() - inter)
    }

    fn monte_carlo_iou(a: &Pose, b: &Pose, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let inside = |p: &Pose, x: &Vec3| {
            let q = p.r.transpose() * (x - p.t);
            (0..3).all(|k| q[k].abs() <= p.s[k] / 2.0)
        };
        let corners: Vec<Vec3> = crate::geometry::box_corners(a).into_iter().chain(crate::geometry::box_corners(b)).collect();
        let lo = corners.iter().fold(Vec3::repeat(f64::INFINITY), |m, c| m.inf(c));
        let hi = corners.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c));
        let (mut both, mut either) = (0usize, 0usize);
        for _ in 0..n {
            let x = Vec3::from_fn(|k, _| rng.gen_range(lo[k]..hi[k]));
            let (ia, ib) = (inside(a, &x), inside(b, &x));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
        both as f64 / either as f64
    }

    #[test]
    fn iou_examples() {
        let a = cube(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.3, 0.2, 0.1));
        assert_eq!(box_iou_3d(&a, &a, 64), 1.0);
        let far = cube(Vec3::new(10.0, 0.0, 0.0), Vec3::repeat(1.0));
        assert_eq!(box_iou_3d(&cube(Vec3::zeros(), Vec3::repeat(1.0)), &far, 64), 0.0);
        let shifted = cube(Vec3::new(0.5, 0.0, 0.0), Vec3::repeat(1.0));
        assert!((box_iou_3d(&cube(Vec3::zeros(), Vec3::repeat(1.0)), &shifted, 64) - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn iou_matches_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = cube(Vec3::from_fn(|_, _| rng.gen_range(-0.1..0.1)), Vec3::from_fn(|_, _| rng.gen_range(0.05..0.3)));
            let b = cube(Vec3::from_fn(|_, _| rng.gen_range(-0.1..0.1)), Vec3::from_fn(|_, _| rng.gen_range(0.05..0.3)));
            let est = box_iou_3d(&a, &b, 64);
            assert!((est - axis_aligned_iou(&a, &b)).abs() < 0.01);
            assert!((est - box_iou_3d(&b, &a, 64)).abs() < 0.01);
        }
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng| {
                let axis = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                Pose::new(
                    axis_angle(&axis, rng.gen_range(-3.0..3.0)),
                    Vec3::from_fn(|_, _| rng.gen_range(-0.05..0.05)),
                    Vec3::from_fn(|_, _| rng.gen_range(0.1..0.3)),
                )
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let mc = monte_carlo_iou(&a, &b, 200_000, &mut rng);
            assert!((box_iou_3d(&a, &b, 64) - mc).abs() < 0.02);
        }
    }

    fn can() -> CategorySpec {
        CategorySpec::new(1, "can", true)
    }

    fn laptop() -> CategorySpec {
        CategorySpec::new(4, "laptop", false)
    }

    #[test]
    fn symmetric_sweep_recovers_alignment() {
        let gt = Pose::new(rot_y(0.3), Vec3::new(0.0, 0.1, 0.5), Vec3::new(0.12, 0.2, 0.08));
        let pred = Pose { r: rot_y(37f64.to_radians()) * gt.r, ..gt };
        assert!(symmetry_aware_iou(&pred, &gt, &can(), 360, 64) >= 0.99);
        assert_eq!(symmetry_aware_iou(&pred, &gt, &laptop(), 360, 64), box_iou_3d(&pred, &gt, 64));
        // coaxial square-section boxes: the doubled box contains gt at every yaw
        let square = Pose { s: Vec3::new(0.1, 0.2, 0.1), ..gt };
        let doubled = Pose { s: square.s * 2.0, ..square };
        let swept = symmetry_aware_iou(&doubled, &square, &can(), 100, 64);
        assert!((swept - 1.0 / 8.0).abs() < 0.01);
        assert!((swept - box_iou_3d(&doubled, &square, 64)).abs() < 0.01);
    }

    #[test]
    fn sweep_is_monotone_under_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = Pose::new(rot_y(rng.gen_range(-3.0..3.0)), Vec3::zeros(), Vec3::new(0.1, 0.2, 0.15));
            let pred = Pose::new(
                axis_angle(&Vec3::new(rng.gen(), rng.gen(), rng.gen()), rng.gen_range(-1.0..1.0)) * gt.r,
                Vec3::from_fn(|_, _| rng.gen_range(-0.03..0.03)),
                gt.s.map(|v| v * rng.gen_range(0.8..1.2)),
            );
            let mut last = 0.0;
            for steps in [1, 2, 4, 8, 16, 32, 64] {
                let v = symmetry_aware_iou(&pred, &gt, &can(), steps, 32);
                assert!(v >= last);
                last = v;
            }
        }
    }

    #[test]
    fn pose_thresholds() {
        let gt = Pose::new(rot_y(0.2), Vec3::new(0.1, 0.0, 0.4), Vec3::repeat(0.1));
        for (d, c) in POSE_THRESHOLDS {
            assert!(pose_correct(&gt, &gt, &laptop(), d, c));
        }
        let tilted = Pose {
            r: axis_angle(&Vec3::x(), 6f64.to_radians()) * gt.r,
            t: gt.t + Vec3::new(0.01, 0.0, 0.0),
            ..gt
        };
        assert!(!pose_correct(&tilted, &gt, &laptop(), 5.0, 2.0));
        assert!(pose_correct(&tilted, &gt, &laptop(), 10.0, 2.0));
        let spun = Pose { r: gt.r * rot_y(std::f64::consts::FRAC_PI_2), ..gt };
        assert!(pose_correct(&spun, &gt, &can(), 5.0, 2.0));
        assert!(!pose_correct(&spun, &gt, &laptop(), 5.0, 2.0));
    }

    fn specs() -> Vec<CategorySpec> {
        vec![CategorySpec::new(0, "box", false), can(), laptop()]
    }

    fn gt_pose(i: usize) -> Pose {
        Pose::new(rot_y(i as f64 * 0.7), Vec3::new(0.01 * i as f64, 0.0, 0.5), Vec3::new(0.1, 0.15, 0.12))
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts: Vec<Pose> = (0..12).map(gt_pose).collect();
        let preds: Vec<(usize, Pose)> = gts.iter().enumerate().map(|(i, g)| ([0, 1, 4][i % 3], *g)).collect();
        let report = evaluate(&preds, &gts, &specs(), &EvalConfig::default()).unwrap();
        assert!(report.categories.iter().all(|c| c.values == [1.0; 7]));
        assert_eq!(report.mean, [1.0; 7]);
        assert!(report.absent.is_empty());
    }

    #[test]
    fn half_wrong_scores_half() {
        let gts: Vec<Pose> = (0..10).map(gt_pose).collect();
        let preds: Vec<(usize, Pose)> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| (4, if i % 2 == 0 { *g } else { Pose { t: g.t + Vec3::new(1.0, 0.0, 0.0), ..*g } }))
            .collect();
        let report = evaluate(&preds, &gts, &specs(), &EvalConfig::default()).unwrap();
        assert_eq!(report.categories.len(), 1);
        assert_eq!(report.categories[0].values, [0.5; 7]);
        assert_eq!(report.absent, vec!["box".to_string(), "can".to_string()]);
        assert_eq!(report.mean, [0.5; 7]);
    }

    #[test]
    fn mean_is_unweighted_over_categories() {
        let gts: Vec<Pose> = (0..15).map(gt_pose).collect();
        let miss = |g: &Pose| Pose { t: g.t + Vec3::new(0.5, 0.0, 0.0), ..*g };
        // box: 1 of 5 correct; laptop: 8 of 10 correct
        let mut preds = Vec::new();
        for (i, g) in gts.iter().enumerate() {
            if i < 5 {
                preds.push((0, if i == 0 { *g } else { miss(g) }));
            } else {
                preds.push((4, if i < 13 { *g } else { miss(g) }));
            }
        }
        let report = evaluate(&preds, &gts, &specs(), &EvalConfig::default()).unwrap();
        assert!((report.mean[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        let gts: Vec<Pose> = (0..2).map(gt_pose).collect();
        assert!(evaluate(&[(0, gts[0])], &gts, &specs(), &EvalConfig::default()).is_err());
        assert!(matches!(evaluate(&[(9, gts[0])], &gts[..1], &specs(), &EvalConfig::default()), Err(Error::UnknownCategory(9))));
    }

    #[test]
    fn json_round_trip_and_table() {
        let gts: Vec<Pose> = (0..6).map(gt_pose).collect();
        let preds: Vec<(usize, Pose)> = gts.iter().enumerate().map(|(i, g)| ([0, 4][i % 2], *g)).collect();
        let report = evaluate(&preds, &gts, &specs(), &EvalConfig::default()).unwrap();
        let json = report.to_json();
        assert_eq!(json["5deg2cm"]["mean"], serde_json::json!(1.0));
        assert_eq!(json["IoU50"]["laptop"], serde_json::json!(1.0));
        let back = EvalReport::from_json(&json, &specs()).unwrap();
        assert_eq!(back.mean, report.mean);
        assert_eq!(back.absent, report.absent);
        let table = report.to_table();
        assert!(table.contains("mean") && table.contains("10°5cm") && table.contains("(no samples)"));
    }

    #[test]
    fn js_divergence_bounds() {
        let u = vec![0.25; 4];
        assert_eq!(js_divergence(&u, &u), 0.0);
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0, 1.0];
        assert!((js_divergence(&a, &b) - std::f64::consts::LN_2).abs() < 1e-12);
        let h = yaw_histogram(&[0.0, 3.0, -3.0, std::f64::consts::PI], 4);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reports_are_monotone_and_order_free(seed in 0u64..1000, n in 6usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<Pose> = (0..n).map(gt_pose).collect();
            let preds: Vec<(usize, Pose)> = gts
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let noise = axis_angle(&Vec3::new(rng.gen(), rng.gen(), rng.gen()), rng.gen_range(0.0..0.3));
                    let p = Pose {
                        r: noise * g.r,
                        t: g.t + Vec3::from_fn(|_, _| rng.gen_range(-0.06..0.06)),
                        s: g.s.map(|v| v * rng.gen_range(0.6..1.4)),
                    };
                    ([0, 1, 4][i % 3], p)
                })
                .collect();
            let cfg = EvalConfig { resolution: 24, yaw_steps: 12 };
            let report = evaluate(&preds, &gts, &specs(), &cfg).unwrap();
            prop_assert!(report.check_monotone().is_ok());
            let mut order: Vec<usize> = (0..n).collect();
            order.reverse();
            let p2: Vec<_> = order.iter().map(|&i| preds[i]).collect();
            let g2: Vec<_> = order.iter().map(|&i| gts[i]).collect();
            prop_assert_eq!(evaluate(&p2, &g2, &specs(), &cfg).unwrap(), report);
        }
    }
}
