//! Dynamic confounder queue and the front-door adjustment block.
//!
//! The block estimates `E_{x'}[x'] + E_{m|x}[m]` with two attention
//! queries: self-attention over the keypoint (mediator) features and
//! cross-attention from keypoints into features sampled from a
//! per-category queue of past outputs.

use ndarray::{s, Array1, ArrayView1, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Init, KeyLayout, LayerNorm, Mat, MultiHeadAttention, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Update policy for stored confounder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueStrategy {
    QueueFifo,
    QueueSimilarity,
    QueueNone,
    MembankSimilarity,
    MembankNone,
}

impl QueueStrategy {
    pub fn is_memory_bank(self) -> bool {
        matches!(self, QueueStrategy::MembankSimilarity | QueueStrategy::MembankNone)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueInit {
    Teacher,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Random,
    Kmeans,
}

/// Lloyd iterations used by the k-means selector.
pub const KMEANS_ITERATIONS: usize = 20;

/// `N_c x N_q x C` store of detached features with per-category write cursors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderQueue {
    storage: Vec<Mat>,
    cursor: Vec<usize>,
    fill_count: Vec<usize>,
    strategy: QueueStrategy,
}

impl ConfounderQueue {
    /// Fills every category's slots.
    ///
    /// In teacher mode each category must supply at least `length` features;
    /// when more are given, `length` of them are drawn at random. Random
    /// mode draws standard-normal features of width `dim`.
    pub fn init<R: Rng>(
        per_category: &[Mat],
        categories: usize,
        length: usize,
        dim: usize,
        mode: QueueInit,
        strategy: QueueStrategy,
        rng: &mut R,
    ) -> Result<Self> {
        if length == 0 || categories == 0 || dim == 0 {
            return Err(Error::InvalidConfig("queue dimensions must be positive".into()));
        }
        let storage = match mode {
            QueueInit::Teacher => {
                if per_category.len() != categories {
                    return Err(Error::ShapeMismatch(format!(
                        "{} feature lists for {categories} categories",
                        per_category.len()
                    )));
                }
                per_category
                    .iter()
                    .enumerate()
                    .map(|(c, feats)| {
                        if feats.nrows() < length {
                            return Err(Error::InsufficientFeatures { category: c, got: feats.nrows(), needed: length });
                        }
                        if feats.ncols() != dim {
                            return Err(Error::ShapeMismatch(format!("category {c} features have width {}", feats.ncols())));
                        }
                        let mut picked = if feats.nrows() == length {
                            (0..length).collect::<Vec<_>>()
                        } else {
                            sample_indices(rng, feats.nrows(), length).into_vec()
                        };
                        picked.sort_unstable();
                        Ok(feats.select(Axis(0), &picked))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            QueueInit::Random => (0..categories)
                .map(|_| Mat::from_shape_simple_fn((length, dim), || rng.sample(StandardNormal)))
                .collect(),
        };
        Ok(Self { storage, cursor: vec![0; categories], fill_count: vec![length; categories], strategy })
    }

    /// Builds a queue from explicit storage; every slot counts as filled.
    pub fn from_storage(storage: Vec<Mat>, strategy: QueueStrategy) -> Result<Self> {
        let first = storage.first().ok_or_else(|| Error::InvalidConfig("queue with no categories".into()))?;
        let shape = first.dim();
        if shape.0 == 0 || storage.iter().any(|m| m.dim() != shape) {
            return Err(Error::ShapeMismatch("queue categories must share a non-empty shape".into()));
        }
        let n = storage.len();
        Ok(Self { storage, cursor: vec![0; n], fill_count: vec![shape.0; n], strategy })
    }

    pub fn categories(&self) -> usize {
        self.storage.len()
    }

    pub fn length(&self) -> usize {
        self.storage[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.storage[0].ncols()
    }

    pub fn strategy(&self) -> QueueStrategy {
        self.strategy
    }

    pub fn cursor(&self) -> &[usize] {
        &self.cursor
    }

    pub fn fill_count(&self) -> &[usize] {
        &self.fill_count
    }

    pub fn storage(&self) -> &[Mat] {
        &self.storage
    }

    /// Restores cursors and fill counts, e.g. from a checkpoint.
    pub fn set_state(&mut self, cursor: Vec<usize>, fill_count: Vec<usize>) -> Result<()> {
        let (n, len) = (self.categories(), self.length());
        if cursor.len() != n || fill_count.len() != n || cursor.iter().any(|&c| c >= len) || fill_count.iter().any(|&f| f > len) {
            return Err(Error::CorruptCheckpoint("queue cursor state out of range".into()));
        }
        self.cursor = cursor;
        self.fill_count = fill_count;
        Ok(())
    }

    /// Category rows from oldest to newest write.
    pub fn rows_in_order(&self, category: usize) -> Vec<Array1<f64>> {
        let len = self.length();
        (0..len).map(|k| self.storage[category].row((self.cursor[category] + k) % len).to_owned()).collect()
    }

    fn pooled_rows(&self) -> Vec<(usize, usize)> {
        self.storage
            .iter()
            .enumerate()
            .flat_map(|(c, _)| (0..self.fill_count[c]).map(move |i| (c, i)))
            .collect()
    }

    /// Draws `n` features pooled over all categories.
    pub fn sample<R: Rng>(&self, n: usize, selector: Selector, rng: &mut R) -> Result<Mat> {
        if let Some(c) = self.fill_count.iter().position(|&f| f < self.length()) {
            return Err(Error::QueueNotReady(format!("category {c} holds {} of {} features", self.fill_count[c], self.length())));
        }
        let slots = self.pooled_rows();
        if n == 0 || n > slots.len() {
            return Err(Error::InvalidConfig(format!("cannot sample {n} of {} queued features", slots.len())));
        }
        let dim = self.dim();
        let row = |k: usize| {
            let (c, i) = slots[k];
            self.storage[c].row(i)
        };
        let chosen: Vec<usize> = match selector {
            Selector::Random => sample_indices(rng, slots.len(), n).into_vec(),
            Selector::Kmeans => {
                let data = Mat::from_shape_fn((slots.len(), dim), |(k, j)| row(k)[j]);
                kmeans_representatives(&data, n, KMEANS_ITERATIONS, rng)
            }
        };
        let mut out = Mat::zeros((n, dim));
        for (r, &k) in chosen.iter().enumerate() {
            out.row_mut(r).assign(&row(k));
        }
        Ok(out)
    }

    /// Applies detached per-sample features according to the strategy.
    pub fn update<'a, I>(&mut self, batch: I) -> Result<()>
    where
        I: IntoIterator<Item = (usize, ArrayView1<'a, f64>)>,
    {
        for (category, feature) in batch {
            if category >= self.categories() {
                return Err(Error::UnknownCategory(category));
            }
            if feature.len() != self.dim() {
                return Err(Error::ShapeMismatch(format!("queue feature width {} != {}", feature.len(), self.dim())));
            }
            match self.strategy {
                QueueStrategy::QueueFifo => {
                    let slot = self.cursor[category];
                    self.storage[category].row_mut(slot).assign(&feature);
                    self.cursor[category] = (slot + 1) % self.length();
                    self.fill_count[category] = (self.fill_count[category] + 1).min(self.length());
                }
                QueueStrategy::QueueSimilarity | QueueStrategy::MembankSimilarity => {
                    let slot = most_similar_row(&self.storage[category], feature);
                    self.storage[category].row_mut(slot).assign(&feature);
                }
                QueueStrategy::QueueNone | QueueStrategy::MembankNone => {}
            }
        }
        Ok(())
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Row index with the highest cosine similarity (first on ties).
fn most_similar_row(rows: &Mat, v: ArrayView1<f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in rows.rows().into_iter().enumerate() {
        let c = cosine(r, v);
        if c > best.1 {
            best = (i, c);
        }
    }
    best.0
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd clustering into `k` clusters; returns the member nearest each centroid.
fn kmeans_representatives<R: Rng>(data: &Mat, k: usize, iterations: usize, rng: &mut R) -> Vec<usize> {
    let n = data.nrows();
    let mut centroids = data.select(Axis(0), &sample_indices(rng, n, k).into_vec());
    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        for (i, x) in data.rows().into_iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, cen) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(x, cen);
                if d < best.1 {
                    best = (c, d);
                }
            }
            assign[i] = best.0;
        }
        let mut sums = Mat::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &data.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.row(c).mapv(|v| v / counts[c] as f64);
                centroids.row_mut(c).assign(&mean);
            }
        }
    }
    centroids
        .rows()
        .into_iter()
        .map(|cen| {
            let mut best = (0, f64::INFINITY);
            for (i, x) in data.rows().into_iter().enumerate() {
                let d = sq_dist(x, cen);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect()
}

/// Softmax-weighted average of `bank` rows under query `g`.
pub fn expectation_query(g: ArrayView1<f64>, bank: &Mat) -> Result<Array1<f64>> {
    if bank.nrows() == 0 {
        return Err(Error::ShapeMismatch("expectation over an empty bank".into()));
    }
    if bank.ncols() != g.len() {
        return Err(Error::ShapeMismatch(format!("query width {} vs bank width {}", g.len(), bank.ncols())));
    }
    let logits = bank.dot(&g);
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let w = logits.mapv(|v| (v - m).exp());
    let w = &w / w.sum();
    Ok(bank.t().dot(&w))
}

/// Parameters of the front-door block: the two attention queries and the
/// layer norm over their sum.
#[derive(Debug, Clone)]
pub struct FrontDoorBlock {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl FrontDoorBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.sa"), dim, heads, rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.ca"), dim, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim, rng),
            dim,
        })
    }

    /// `LN(SA(F_kpt) + CA(F_kpt, F_samp))` for `groups` stacked samples.
    ///
    /// `f_samp` is shared by every sample and should be a constant node.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, f_kpt: Var, f_samp: Var, groups: usize) -> Result<Var> {
        let (kr, kc) = tape.shape(f_kpt);
        let sc = tape.shape(f_samp).1;
        if kc != self.dim || sc != self.dim {
            return Err(Error::ShapeMismatch(format!("front-door block over {} channels, got {kc} / {sc}", self.dim)));
        }
        if groups == 0 || kr % groups != 0 {
            return Err(Error::ShapeMismatch(format!("{kr} keypoint rows do not split into {groups} samples")));
        }
        let f_s = self.self_attn.forward(tape, params, f_kpt, f_kpt, KeyLayout::Grouped(groups))?.out;
        let f_c = self.cross_attn.forward(tape, params, f_kpt, f_samp, KeyLayout::Shared)?.out;
        let sum = tape.add(f_s, f_c);
        self.norm.forward(tape, params, sum)
    }
}

/// Sigmoid gate mixing causal and original keypoint features.
#[derive(Debug, Clone)]
pub struct AdaptiveFusion {
    pub w_f: ParamId,
    pub w_k: ParamId,
    pub dim: usize,
}

impl AdaptiveFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let init = Init::FanInUniform { fan_in: dim };
        Self {
            w_f: store.add(format!("{name}.w_f"), (dim, 1), init, rng),
            w_k: store.add(format!("{name}.w_k"), (dim, 1), init, rng),
            dim,
        }
    }

    /// `w ⊙ F_f + (1 - w) ⊙ F_kpt` with `w = sigmoid(F_f W_f + F_kpt W_k)`;
    /// `bypass` returns `F_f` unchanged.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, f_f: Var, f_kpt: Var, bypass: bool) -> Result<Var> {
        if tape.shape(f_f) != tape.shape(f_kpt) || tape.shape(f_f).1 != self.dim {
            return Err(Error::ShapeMismatch("fusion inputs must share an N x C shape".into()));
        }
        if bypass {
            return Ok(f_f);
        }
        let a = tape.matmul(f_f, params.get(self.w_f));
        let b = tape.matmul(f_kpt, params.get(self.w_k));
        let logits = tape.add(a, b);
        let w = tape.sigmoid(logits);
        let keep = tape.affine(w, -1.0, 1.0);
        let x = tape.mul_col(f_f, w);
        let y = tape.mul_col(f_kpt, keep);
        Ok(tape.add(x, y))
    }
}

/// Mean over keypoints of each sample: `(B*N_kpt) x C -> B x C`.
pub fn pool_for_queue(f_f: &Mat, groups: usize) -> Mat {
    let r = f_f.nrows() / groups;
    let mut out = Mat::zeros((groups, f_f.ncols()));
    for g in 0..groups {
        out.row_mut(g).assign(&f_f.slice(s![g * r..(g + 1) * r, ..]).mean_axis(Axis(0)).expect("non-empty"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
    }

    fn teacher_feats(n_c: usize, n: usize, dim: usize, seed: u64) -> Vec<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_c).map(|_| randn((n, dim), &mut rng)).collect()
    }

    #[test]
    fn init_teacher_fills_every_category() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = teacher_feats(3, 100, 8, 1);
        let q = ConfounderQueue::init(&feats, 3, 80, 8, QueueInit::Teacher, QueueStrategy::QueueFifo, &mut rng).unwrap();
        assert_eq!(q.fill_count(), &[80, 80, 80]);
        assert_eq!(q.cursor(), &[0, 0, 0]);
    }

    #[test]
    fn init_random_is_deterministic() {
        let a = ConfounderQueue::init(&[], 3, 10, 4, QueueInit::Random, QueueStrategy::QueueFifo, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = ConfounderQueue::init(&[], 3, 10, 4, QueueInit::Random, QueueStrategy::QueueFifo, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_insufficient_features() {
        let mut feats = teacher_feats(3, 80, 4, 2);
        feats[1] = feats[1].slice(s![..79, ..]).to_owned();
        let err = ConfounderQueue::init(&feats, 3, 80, 4, QueueInit::Teacher, QueueStrategy::QueueFifo, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::InsufficientFeatures { category: 1, got: 79, needed: 80 })));
    }

    #[test]
    fn sample_distinct_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = ConfounderQueue::init(&teacher_feats(6, 80, 8, 4), 6, 80, 8, QueueInit::Teacher, QueueStrategy::QueueFifo, &mut rng).unwrap();
        let s = q.sample(12, Selector::Random, &mut rng).unwrap();
        assert_eq!(s.dim(), (12, 8));
        for i in 0..12 {
            for j in 0..i {
                assert_ne!(s.row(i), s.row(j));
            }
        }
    }

    #[test]
    fn sample_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = ConfounderQueue::init(&teacher_feats(2, 5, 3, 4), 2, 5, 3, QueueInit::Teacher, QueueStrategy::QueueFifo, &mut rng).unwrap();
        let s = q.sample(10, Selector::Random, &mut rng).unwrap();
        let mut got: Vec<Vec<u64>> = s.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = q.storage().iter().flat_map(|m| m.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert!(q.sample(11, Selector::Random, &mut rng).is_err());
    }

    #[test]
    fn kmeans_on_identical_rows() {
        let v = array![[0.5, -1.0, 2.0]];
        let storage = vec![Array2::from_shape_fn((7, 3), |(_, j)| v[[0, j]]); 2];
        let q = ConfounderQueue::from_storage(storage, QueueStrategy::QueueFifo).unwrap();
        let s = q.sample(4, Selector::Kmeans, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for r in s.rows() {
            assert_eq!(r, v.row(0));
        }
    }

    #[test]
    fn kmeans_picks_one_member_per_cluster() {
        // three tight, well separated clusters
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = [[10.0, 0.0], [0.0, 10.0], [-10.0, -10.0]];
        let storage = vec![Array2::from_shape_fn((30, 2), |(i, j)| centers[i % 3][j] + 0.01 * rng.sample::<f64, _>(StandardNormal))];
        let q = ConfounderQueue::from_storage(storage, QueueStrategy::QueueFifo).unwrap();
        let s = q.sample(3, Selector::Kmeans, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut hit = [false; 3];
        for r in s.rows() {
            let c = centers.iter().position(|c| (r[0] - c[0]).abs() < 1.0 && (r[1] - c[1]).abs() < 1.0).unwrap();
            hit[c] = true;
        }
        assert_eq!(hit, [true; 3]);
    }

    #[test]
    fn fifo_ring_buffer() {
        let n_q = 5;
        let mut q = ConfounderQueue::from_storage(vec![Mat::zeros((n_q, 2)); 2], QueueStrategy::QueueFifo).unwrap();
        let other = q.storage()[1].clone();
        let pushes: Vec<Array1<f64>> = (0..n_q + 3).map(|i| array![i as f64 + 1.0, 0.0]).collect();
        q.update(pushes.iter().map(|v| (0, v.view()))).unwrap();
        let order: Vec<f64> = q.rows_in_order(0).iter().map(|r| r[0]).collect();
        assert_eq!(order, vec![4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(q.storage()[1], other);
    }

    #[test]
    fn similarity_replaces_argmax() {
        let basis = Mat::eye(4);
        let mut q = ConfounderQueue::from_storage(vec![basis.clone()], QueueStrategy::QueueSimilarity).unwrap();
        let incoming = array![0.0, 0.0, 1.1, 0.0];
        q.update([(0, incoming.view())]).unwrap();
        for i in 0..4 {
            if i == 2 {
                assert_eq!(q.storage()[0].row(i), incoming.view());
            } else {
                assert_eq!(q.storage()[0].row(i), basis.row(i));
            }
        }
    }

    #[test]
    fn none_strategies_are_no_ops() {
        for strategy in [QueueStrategy::QueueNone, QueueStrategy::MembankNone] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut q = ConfounderQueue::init(&[], 2, 4, 3, QueueInit::Random, strategy, &mut rng).unwrap();
            let before = q.clone();
            q.update([(1, array![1.0, 2.0, 3.0].view())]).unwrap();
            assert_eq!(q, before);
        }
    }

    #[test]
    fn unknown_category() {
        let mut q = ConfounderQueue::from_storage(vec![Mat::zeros((2, 2))], QueueStrategy::QueueFifo).unwrap();
        assert!(matches!(q.update([(3, array![1.0, 1.0].view())]), Err(Error::UnknownCategory(3))));
    }

    #[test]
    fn not_ready_when_partially_filled() {
        let mut q = ConfounderQueue::from_storage(vec![Mat::zeros((4, 2)); 2], QueueStrategy::QueueFifo).unwrap();
        q.set_state(vec![0, 0], vec![4, 2]).unwrap();
        assert!(matches!(q.sample(2, Selector::Random, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::QueueNotReady(_))));
    }

    #[test]
    fn expectation_examples() {
        let v = array![[1.0, -2.0, 3.0]];
        let bank = Array2::from_shape_fn((4, 3), |(_, j)| v[[0, j]]);
        let g = array![0.3, 0.1, -0.7];
        assert_eq!(expectation_query(g.view(), &bank).unwrap(), v.row(0));

        let bank = Mat::eye(3);
        let g = array![0.0, 1e4, 0.0];
        let e = expectation_query(g.view(), &bank).unwrap();
        assert!((&e - &array![0.0, 1.0, 0.0]).iter().all(|d| d.abs() < 1e-4));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = randn((5, 3), &mut rng);
        let e = expectation_query(Array1::zeros(3).view(), &bank).unwrap();
        let mean = bank.mean_axis(Axis(0)).unwrap();
        assert!((&e - &mean).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn expectation_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let bank = randn((6, 4), &mut rng);
            let g = randn((1, 4), &mut rng).mapv(|v| 3.0 * v);
            let e = expectation_query(g.row(0), &bank).unwrap();
            for j in 0..4 {
                let col = bank.column(j);
                let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
                let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                assert!(e[j] >= lo - 1e-12 && e[j] <= hi + 1e-12);
            }
        }
    }

    fn block_setup(dim: usize, heads: usize, seed: u64) -> (ParamStore, FrontDoorBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = FrontDoorBlock::new(&mut store, "fd", dim, heads, &mut rng).unwrap();
        (store, block)
    }

    fn run_block(store: &ParamStore, block: &FrontDoorBlock, f_kpt: &Mat, f_samp: &Mat, groups: usize) -> Mat {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let k = tape.constant(f_kpt.clone());
        let s = tape.constant(f_samp.clone());
        let out = block.forward(&mut tape, &bound, k, s, groups).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn front_door_output_shape() {
        let (store, block) = block_setup(256, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = run_block(&store, &block, &randn((96, 256), &mut rng), &randn((12, 256), &mut rng), 1);
        assert_eq!(out.dim(), (96, 256));
    }

    #[test]
    fn front_door_sample_order_invariance_and_sensitivity() {
        let (store, block) = block_setup(16, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_kpt = randn((2 * 6, 16), &mut rng);
        let f_samp = randn((5, 16), &mut rng);
        let base = run_block(&store, &block, &f_kpt, &f_samp, 2);
        let permuted = f_samp.select(Axis(0), &[3, 0, 4, 1, 2]);
        let other = run_block(&store, &block, &f_kpt, &permuted, 2);
        assert!((&base - &other).iter().all(|d| d.abs() <= 1e-6));
        let mut perturbed = f_samp.clone();
        perturbed[[1, 2]] += 0.5;
        let changed = run_block(&store, &block, &f_kpt, &perturbed, 2);
        assert!((&base - &changed).iter().any(|d| d.abs() > 0.0));
    }

    #[test]
    fn front_door_gradients() {
        for seed in 0..3 {
            let (store, block) = block_setup(8, 2, 30 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let f_kpt = randn((2 * 4, 8), &mut rng);
            let f_samp = randn((3, 8), &mut rng);
            let weights = randn((8, 8), &mut rng);
            let mut inputs = vec![f_kpt];
            inputs.extend(store.values().iter().cloned());
            let report = GradCheck::default()
                .run(&inputs, |tape, vars| {
                    let bound = Bound::from_vars(vars[1..].to_vec());
                    let s = tape.constant(f_samp.clone());
                    let out = block.forward(tape, &bound, vars[0], s, 2).unwrap();
                    let w = tape.constant(weights.clone());
                    let p = tape.mul(out, w);
                    tape.sum(p)
                })
                .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    fn fuse(store: &ParamStore, fusion: &AdaptiveFusion, f_f: &Mat, f_kpt: &Mat) -> Mat {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let a = tape.constant(f_f.clone());
        let b = tape.constant(f_kpt.clone());
        let out = fusion.forward(&mut tape, &bound, a, b, false).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let fusion = AdaptiveFusion::new(&mut store, "fuse", 6, &mut rng);
        let f_f = randn((4, 6), &mut rng);
        let f_kpt = randn((4, 6), &mut rng);

        // equal inputs: output equals them for any gate
        let same = fuse(&store, &fusion, &f_f, &f_f);
        assert!((&same - &f_f).iter().all(|d| d.abs() < 1e-12));

        // betweenness per channel
        let out = fuse(&store, &fusion, &f_f, &f_kpt);
        for ((o, a), b) in out.iter().zip(f_f.iter()).zip(f_kpt.iter()) {
            assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
        }

        // zero gate weights: exact mean
        let mut zeroed = store.clone();
        zeroed.get_mut(fusion.w_f).fill(0.0);
        zeroed.get_mut(fusion.w_k).fill(0.0);
        let out = fuse(&zeroed, &fusion, &f_f, &f_kpt);
        assert_eq!(out, (&f_f + &f_kpt) / 2.0);

        // saturated gate: output approaches F_f
        let mut sat = store.clone();
        sat.get_mut(fusion.w_f).fill(1e4);
        sat.get_mut(fusion.w_k).fill(0.0);
        let pos = f_f.mapv(f64::abs);
        let out = fuse(&sat, &fusion, &pos, &f_kpt);
        assert!((&out - &pos).iter().all(|d| d.abs() < 1e-4));

        // bypass
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let a = tape.constant(f_f.clone());
        let b = tape.constant(f_kpt.clone());
        let out = fusion.forward(&mut tape, &bound, a, b, true).unwrap();
        assert_eq!(tape.value(out), &f_f);
    }

    #[test]
    fn fusion_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let mut store = ParamStore::new();
            let fusion = AdaptiveFusion::new(&mut store, "fuse", 5, &mut rng);
            let mut inputs = vec![randn((3, 5), &mut rng), randn((3, 5), &mut rng)];
            inputs.extend(store.values().iter().cloned());
            let weights = randn((3, 5), &mut rng);
            let report = GradCheck::default()
                .run(&inputs, |tape, v| {
                    let bound = Bound::from_vars(v[2..].to_vec());
                    let out = fusion.forward(tape, &bound, v[0], v[1], false).unwrap();
                    let w = tape.constant(weights.clone());
                    let p = tape.mul(out, w);
                    tape.sum(p)
                })
                .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }
}
