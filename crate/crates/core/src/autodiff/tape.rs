//! Reverse-mode tape over dense row-major matrices.
//!
//! Every value is a 2D `f64` matrix. Batched per-sample computations are
//! expressed by stacking equal-sized row blocks ("groups") and using the
//! grouped operators, which act block-wise.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    GroupMatMul(Var, Var, usize),
    GroupMatMulNT(Var, Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Recip(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRowsGrouped(Var, usize),
    RepeatRowsGrouped(Var, usize),
    Tile(Var, usize),
    FlattenGroups(Var),
    GatherRows(Var, Vec<usize>),
    RowNorm(Var),
    Cross3(Var, Var),
    Sum(Var),
    SmoothL1(Var, f64),
    PairwiseDistGrouped(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records operations for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn group_rows(rows: usize, groups: usize, what: &str) -> usize {
    assert!(groups > 0 && rows % groups == 0, "{what}: {rows} rows do not split into {groups} groups");
    rows / groups
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Mat {
    let mut out = Mat::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

fn group_matmul(a: &Mat, b: &Mat, groups: usize, transpose_b: bool) -> Mat {
    let ra = group_rows(a.nrows(), groups, "group_matmul lhs");
    let rb = group_rows(b.nrows(), groups, "group_matmul rhs");
    let cols = if transpose_b { rb } else { b.ncols() };
    let mut out = Mat::zeros((a.nrows(), cols));
    for g in 0..groups {
        let ag = a.slice(s![g * ra..(g + 1) * ra, ..]);
        let bg = b.slice(s![g * rb..(g + 1) * rb, ..]);
        let mut og = out.slice_mut(s![g * ra..(g + 1) * ra, ..]);
        if transpose_b {
            general_mat_mul(1.0, &ag, &bg.t(), 0.0, &mut og);
        } else {
            general_mat_mul(1.0, &ag, &bg, 0.0, &mut og);
        }
    }
    out
}

fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn normalize_rows(x: &Mat) -> Mat {
    let c = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / c;
        row -= mean;
        let var = row.fold(0.0, |a, v| a + v * v) / c;
        let sd = var.max(LN_VAR_FLOOR).sqrt();
        row /= sd;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let out = matmul(&va.view(), &vb.view());
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt inner dimensions");
        let out = matmul(&va.view(), &vb.t());
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    /// Block-wise `a_g * b_g` over `groups` equal row blocks of each operand.
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize) -> Var {
        let out = group_matmul(self.value(a), self.value(b), groups, false);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::GroupMatMul(a, b, groups), ng)
    }

    /// Block-wise `a_g * b_g^T`.
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, groups: usize) -> Var {
        let out = group_matmul(self.value(a), self.value(b), groups, true);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::GroupMatMulNT(a, b, groups), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == vx.ncols(), "add_row shapes");
        let out = vx + vr;
        let ng = self.needs(x) || self.needs(row);
        self.push(out, Op::AddRow(x, row), ng)
    }

    /// Multiplies every row of `x` by a `1 x C` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert!(vr.nrows() == 1 && vr.ncols() == vx.ncols(), "mul_row shapes");
        let out = vx * vr;
        let ng = self.needs(x) || self.needs(row);
        self.push(out, Op::MulRow(x, row), ng)
    }

    /// Multiplies row `i` of `x` by `col[i, 0]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (vx, vc) = (self.value(x), self.value(col));
        assert!(vc.ncols() == 1 && vc.nrows() == vx.nrows(), "mul_col shapes");
        let out = vx * vc;
        let ng = self.needs(x) || self.needs(col);
        self.push(out, Op::MulCol(x, col), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).mapv(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(softplus);
        let ng = self.needs(x);
        self.push(out, Op::Softplus(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::abs);
        let ng = self.needs(x);
        self.push(out, Op::Abs(x), ng)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::recip);
        let ng = self.needs(x);
        self.push(out, Op::Recip(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Per-row zero mean and unit variance (variance floored at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let out = normalize_rows(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::NormalizeRows(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts must agree");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    /// Mean over the rows of each of `groups` row blocks: `(G*R) x C -> G x C`.
    pub fn mean_rows_grouped(&mut self, x: Var, groups: usize) -> Var {
        let v = self.value(x);
        let r = group_rows(v.nrows(), groups, "mean_rows_grouped");
        let mut out = Mat::zeros((groups, v.ncols()));
        for g in 0..groups {
            let block = v.slice(s![g * r..(g + 1) * r, ..]);
            out.row_mut(g).assign(&block.mean_axis(Axis(0)).expect("non-empty group"));
        }
        let ng = self.needs(x);
        self.push(out, Op::MeanRowsGrouped(x, groups), ng)
    }

    /// Repeats each row `reps` times consecutively: `G x C -> (G*reps) x C`.
    pub fn repeat_rows_grouped(&mut self, x: Var, reps: usize) -> Var {
        let v = self.value(x);
        let mut out = Mat::zeros((v.nrows() * reps, v.ncols()));
        for (g, row) in v.rows().into_iter().enumerate() {
            for k in 0..reps {
                out.row_mut(g * reps + k).assign(&row);
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::RepeatRowsGrouped(x, reps), ng)
    }

    /// Stacks `reps` copies of `x` vertically.
    pub fn tile(&mut self, x: Var, reps: usize) -> Var {
        let v = self.value(x);
        let views: Vec<_> = (0..reps).map(|_| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("tile");
        let ng = self.needs(x);
        self.push(out, Op::Tile(x, reps), ng)
    }

    /// Lays each group's rows side by side: `(G*r) x C -> G x (r*C)`.
    pub fn flatten_groups(&mut self, x: Var, groups: usize) -> Var {
        let v = self.value(x);
        let r = group_rows(v.nrows(), groups, "flatten_groups");
        let out = v.as_standard_layout().into_owned().into_shape_with_order((groups, r * v.ncols())).expect("flatten");
        let ng = self.needs(x);
        self.push(out, Op::FlattenGroups(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let out = self.value(x).select(Axis(0), &idx);
        let ng = self.needs(x);
        self.push(out, Op::GatherRows(x, idx), ng)
    }

    /// Euclidean norm of each row: `R x C -> R x 1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Mat::from_shape_fn((v.nrows(), 1), |(i, _)| v.row(i).dot(&v.row(i)).sqrt());
        let ng = self.needs(x);
        self.push(out, Op::RowNorm(x), ng)
    }

    /// Row-wise cross product of two `R x 3` matrices.
    pub fn cross3(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.ncols() == 3 && va.dim() == vb.dim(), "cross3 shapes");
        let out = Mat::from_shape_fn(va.dim(), |(i, j)| {
            let (p, q) = ((j + 1) % 3, (j + 2) % 3);
            va[[i, p]] * vb[[i, q]] - va[[i, q]] * vb[[i, p]]
        });
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Cross3(a, b), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Element-wise smooth-L1 with transition point `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        let out = self.value(x).mapv(|v| smooth_l1(v, beta));
        let ng = self.needs(x);
        self.push(out, Op::SmoothL1(x, beta), ng)
    }

    /// Pairwise Euclidean distances inside each row block: `(G*R) x D -> (G*R) x R`.
    pub fn pairwise_dist_grouped(&mut self, x: Var, groups: usize) -> Var {
        let v = self.value(x);
        let r = group_rows(v.nrows(), groups, "pairwise_dist_grouped");
        let mut out = Mat::zeros((v.nrows(), r));
        for g in 0..groups {
            for i in 0..r {
                for j in 0..r {
                    let d = &v.row(g * r + i) - &v.row(g * r + j);
                    out[[g * r + i, j]] = d.dot(&d).sqrt();
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::PairwiseDistGrouped(x, groups), ng)
    }

    /// Reverse pass from a scalar (`1 x 1`) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, delta: Mat| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, matmul(&g.view(), &val(*b).t()));
                }
                if self.needs(*b) {
                    send(*b, matmul(&val(*a).t(), &g.view()));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    send(*a, matmul(&g.view(), &val(*b).view()));
                }
                if self.needs(*b) {
                    send(*b, matmul(&g.t(), &val(*a).view()));
                }
            }
            Op::GroupMatMul(a, b, groups) => {
                let (va, vb) = (val(*a), val(*b));
                let ra = va.nrows() / groups;
                let rb = vb.nrows() / groups;
                if self.needs(*a) {
                    let mut da = Mat::zeros(va.dim());
                    for k in 0..*groups {
                        let gg = g.slice(s![k * ra..(k + 1) * ra, ..]);
                        let bg = vb.slice(s![k * rb..(k + 1) * rb, ..]);
                        let mut out = da.slice_mut(s![k * ra..(k + 1) * ra, ..]);
                        general_mat_mul(1.0, &gg, &bg.t(), 0.0, &mut out);
                    }
                    send(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Mat::zeros(vb.dim());
                    for k in 0..*groups {
                        let gg = g.slice(s![k * ra..(k + 1) * ra, ..]);
                        let ag = va.slice(s![k * ra..(k + 1) * ra, ..]);
                        let mut out = db.slice_mut(s![k * rb..(k + 1) * rb, ..]);
                        general_mat_mul(1.0, &ag.t(), &gg, 0.0, &mut out);
                    }
                    send(*b, db);
                }
            }
            Op::GroupMatMulNT(a, b, groups) => {
                let (va, vb) = (val(*a), val(*b));
                let ra = va.nrows() / groups;
                let rb = vb.nrows() / groups;
                if self.needs(*a) {
                    let mut da = Mat::zeros(va.dim());
                    for k in 0..*groups {
                        let gg = g.slice(s![k * ra..(k + 1) * ra, ..]);
                        let bg = vb.slice(s![k * rb..(k + 1) * rb, ..]);
                        let mut out = da.slice_mut(s![k * ra..(k + 1) * ra, ..]);
                        general_mat_mul(1.0, &gg, &bg, 0.0, &mut out);
                    }
                    send(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Mat::zeros(vb.dim());
                    for k in 0..*groups {
                        let gg = g.slice(s![k * ra..(k + 1) * ra, ..]);
                        let ag = va.slice(s![k * ra..(k + 1) * ra, ..]);
                        let mut out = db.slice_mut(s![k * rb..(k + 1) * rb, ..]);
                        general_mat_mul(1.0, &gg.t(), &ag, 0.0, &mut out);
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, g * val(*b));
                }
                if self.needs(*b) {
                    send(*b, g * val(*a));
                }
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                if self.needs(*row) {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if self.needs(*x) {
                    send(*x, g * val(*row));
                }
                if self.needs(*row) {
                    send(*row, (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(x, col) => {
                if self.needs(*x) {
                    send(*x, g * val(*col));
                }
                if self.needs(*col) {
                    send(*col, (g * val(*x)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Affine(x, scale) => send(*x, g * *scale),
            Op::Gelu(x) => {
                let mut d = val(*x).mapv(gelu_grad);
                d *= g;
                send(*x, d);
            }
            Op::Relu(x) => {
                let mut d = val(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                d *= g;
                send(*x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = y.mapv(|s| s * (1.0 - s));
                d *= g;
                send(*x, d);
            }
            Op::Softplus(x) => {
                let mut d = val(*x).mapv(sigmoid);
                d *= g;
                send(*x, d);
            }
            Op::Abs(x) => {
                let mut d = val(*x).mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                d *= g;
                send(*x, d);
            }
            Op::Recip(x) => {
                let mut d = y.mapv(|r| -r * r);
                d *= g;
                send(*x, d);
            }
            Op::SoftmaxRows(x) => {
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1)).insert_axis(Axis(1));
                Zip::from(&mut d).and(y).and_broadcast(&dots).for_each(|d, &yv, &dot| {
                    *d -= yv * dot;
                });
                send(*x, d);
            }
            Op::NormalizeRows(x) => {
                let vx = val(*x);
                let c = vx.ncols() as f64;
                let mut d = Mat::zeros(vx.dim());
                for i in 0..vx.nrows() {
                    let xr = vx.row(i);
                    let mean = xr.sum() / c;
                    let var = xr.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / c;
                    let floored = var < LN_VAR_FLOOR;
                    let sd = var.max(LN_VAR_FLOOR).sqrt();
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let g_mean = gr.sum() / c;
                    let gy_mean = if floored { 0.0 } else { gr.dot(&yr) / c };
                    let mut dr = d.row_mut(i);
                    for j in 0..vx.ncols() {
                        dr[j] = (gr[j] - g_mean - yr[j] * gy_mean) / sd;
                    }
                }
                send(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if self.needs(p) {
                        send(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let mut d = Mat::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(*x, d);
            }
            Op::MeanRowsGrouped(x, groups) => {
                let vx = val(*x);
                let r = vx.nrows() / groups;
                let mut d = Mat::zeros(vx.dim());
                for k in 0..*groups {
                    let row = g.row(k).mapv(|v| v / r as f64);
                    for i in 0..r {
                        d.row_mut(k * r + i).assign(&row);
                    }
                }
                send(*x, d);
            }
            Op::RepeatRowsGrouped(x, reps) => {
                let vx = val(*x);
                let mut d = Mat::zeros(vx.dim());
                for k in 0..vx.nrows() {
                    let block = g.slice(s![k * reps..(k + 1) * reps, ..]);
                    d.row_mut(k).assign(&block.sum_axis(Axis(0)));
                }
                send(*x, d);
            }
            Op::Tile(x, reps) => {
                let r = val(*x).nrows();
                let mut d = Mat::zeros(val(*x).dim());
                for k in 0..*reps {
                    d += &g.slice(s![k * r..(k + 1) * r, ..]);
                }
                send(*x, d);
            }
            Op::FlattenGroups(x) => {
                let d = g.as_standard_layout().into_owned().into_shape_with_order(val(*x).dim()).expect("unflatten");
                send(*x, d);
            }
            Op::GatherRows(x, idx) => {
                let mut d = Mat::zeros(val(*x).dim());
                for (out_row, &src) in idx.iter().enumerate() {
                    let mut target = d.row_mut(src);
                    target += &g.row(out_row);
                }
                send(*x, d);
            }
            Op::RowNorm(x) => {
                let vx = val(*x);
                let mut d = vx.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let n = y[[i, 0]];
                    if n > 0.0 {
                        row *= g[[i, 0]] / n;
                    } else {
                        row.fill(0.0);
                    }
                }
                send(*x, d);
            }
            Op::Cross3(a, b) => {
                // d(a x b) = da x b + a x db, so grad_a = b x g and grad_b = g x a
                let (va, vb) = (val(*a), val(*b));
                let cross = |u: &Mat, v: &Mat| {
                    Mat::from_shape_fn(u.dim(), |(i, j)| {
                        let (p, q) = ((j + 1) % 3, (j + 2) % 3);
                        u[[i, p]] * v[[i, q]] - u[[i, q]] * v[[i, p]]
                    })
                };
                if self.needs(*a) {
                    send(*a, cross(vb, g));
                }
                if self.needs(*b) {
                    send(*b, cross(g, va));
                }
            }
            Op::Sum(x) => {
                send(*x, Mat::from_elem(val(*x).dim(), g[[0, 0]]));
            }
            Op::SmoothL1(x, beta) => {
                let mut d = val(*x).mapv(|v| smooth_l1_grad(v, *beta));
                d *= g;
                send(*x, d);
            }
            Op::PairwiseDistGrouped(x, groups) => {
                let vx = val(*x);
                let r = vx.nrows() / groups;
                let mut d = Mat::zeros(vx.dim());
                for k in 0..*groups {
                    for i in 0..r {
                        for j in 0..r {
                            let dist = y[[k * r + i, j]];
                            let gij = g[[k * r + i, j]];
                            if dist <= 0.0 || gij == 0.0 {
                                continue;
                            }
                            let diff = (&vx.row(k * r + i) - &vx.row(k * r + j)) * (gij / dist);
                            let mut di = d.row_mut(k * r + i);
                            di += &diff;
                            let mut dj = d.row_mut(k * r + j);
                            dj -= &diff;
                        }
                    }
                }
                send(*x, d);
            }
        }
    }
}
