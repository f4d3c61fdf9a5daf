//! Layers built from tape operators: affine maps, MLPs, layer norm and
//! multi-head attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, Init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    None,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
            Activation::None => x,
        }
    }
}

/// `x W + b` with `W: d_in x d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let init = Init::FanInUniform { fan_in: d_in };
        let weight = store.add(format!("{name}.weight"), (d_in, d_out), init, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), (1, d_out), init, rng));
        Self { weight, bias, d_in, d_out }
    }

    /// Same layout with every entry zero.
    pub fn zeros<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), (d_in, d_out), Init::Zeros, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), (1, d_out), Init::Zeros, rng));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let cols = tape.shape(x).1;
        if cols != self.d_in {
            return Err(Error::ShapeMismatch(format!("linear expects {} inputs, got {cols}", self.d_in)));
        }
        let h = tape.matmul(x, params.get(self.weight));
        Ok(match self.bias {
            Some(b) => tape.add_row(h, params.get(b)),
            None => h,
        })
    }
}

/// Chain of affine layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [d_in, h1, ..., d_out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h)?;
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Learned affine after row normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let gamma = store.add(format!("{name}.gamma"), (1, dim), Init::Ones, rng);
        let beta = store.add(format!("{name}.beta"), (1, dim), Init::Zeros, rng);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let cols = tape.shape(x).1;
        if cols != self.dim {
            return Err(Error::ShapeMismatch(format!("layer norm over {} channels, got {cols}", self.dim)));
        }
        let n = tape.normalize_rows(x);
        let scaled = tape.mul_row(n, params.get(self.gamma));
        Ok(tape.add_row(scaled, params.get(self.beta)))
    }
}

/// How keys relate to the stacked query rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyLayout {
    /// One key set shared by every query row.
    Shared,
    /// Queries and keys split into this many aligned row blocks.
    Grouped(usize),
}

/// Output of an attention call, with the per-head weight matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidHeads { channels: dim, heads });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, q_in: Var, kv_in: Var, layout: KeyLayout) -> Result<AttentionOutput> {
        let (qc, kc) = (tape.shape(q_in).1, tape.shape(kv_in).1);
        if qc != self.dim || kc != self.dim {
            return Err(Error::ShapeMismatch(format!("attention over {} channels, got q {qc} / kv {kc}", self.dim)));
        }
        if let KeyLayout::Grouped(g) = layout {
            let (qr, kr) = (tape.shape(q_in).0, tape.shape(kv_in).0);
            if g == 0 || qr % g != 0 || kr % g != 0 {
                return Err(Error::ShapeMismatch(format!("{qr} query / {kr} key rows do not split into {g} groups")));
            }
        }
        let q = self.query.forward(tape, params, q_in)?;
        let k = self.key.forward(tape, params, kv_in)?;
        let v = self.value.forward(tape, params, kv_in)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * hd, hd), tape.slice_cols(k, h * hd, hd), tape.slice_cols(v, h * hd, hd))
            };
            let logits = match layout {
                KeyLayout::Shared => tape.matmul_nt(qh, kh),
                KeyLayout::Grouped(g) => tape.group_matmul_nt(qh, kh, g),
            };
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits);
            let out = match layout {
                KeyLayout::Shared => tape.matmul(attn, vh),
                KeyLayout::Grouped(g) => tape.group_matmul(attn, vh, g),
            };
            weights.push(attn);
            head_outs.push(out);
        }
        let merged = if head_outs.len() == 1 { head_outs[0] } else { tape.concat_cols(&head_outs) };
        let out = self.output.forward(tape, params, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::GradCheck;
    use crate::autodiff::tape::Mat;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Mat {
        Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    /// Fixed random linear functional used to reduce outputs to a scalar.
    fn reduce(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = randn(tape.shape(x), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(x, w);
        tape.sum(p)
    }

    /// Gradient check against every parameter and every input at once.
    fn check_with_params(
        store: &ParamStore,
        inputs: Vec<Mat>,
        f: impl Fn(&mut Tape, &Bound, &[Var]) -> Var,
    ) -> crate::autodiff::gradcheck::GradCheckReport {
        let n_in = inputs.len();
        let mut all = inputs;
        all.extend(store.values().iter().cloned());
        GradCheck::default()
            .run(&all, |tape, vars| {
                let bound = Bound::from_vars(vars[n_in..].to_vec());
                f(tape, &bound, &vars[..n_in])
            })
            .unwrap()
    }

    #[test]
    fn mlp_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 3], Activation::Gelu, &mut rng);
        for v in store.values_mut() {
            v.fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(randn((5, 4), &mut rng));
        let y = mlp.forward(&mut tape, &bound, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let mut store = ParamStore::new();
        let lin = Mlp::new(&mut store, "id", &[3, 3], Activation::None, &mut rng);
        *store.get_mut(lin.layers[0].weight) = Mat::eye(3);
        store.get_mut(lin.layers[0].bias.unwrap()).fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = randn((4, 3), &mut rng);
        let x = tape.constant(xv.clone());
        let y = lin.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn mlp_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 2], Activation::Relu, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Mat::zeros((2, 5)));
        assert!(matches!(mlp.forward(&mut tape, &bound, x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mlp_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "m", &[5, 7, 4], Activation::Gelu, &mut rng);
            let x = randn((6, 5), &mut rng);
            let report = check_with_params(&store, vec![x], |tape, bound, v| {
                let y = mlp.forward(tape, bound, v[0]).unwrap();
                reduce(tape, y, seed + 100)
            });
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn attention_invalid_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng),
            Err(Error::InvalidHeads { .. })
        ));
    }

    #[test]
    fn attention_single_key_replicates_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let q = tape.constant(randn((5, 8), &mut rng));
        let kv = tape.constant(randn((1, 8), &mut rng));
        let out = mha.forward(&mut tape, &bound, q, kv, KeyLayout::Shared).unwrap();
        let o = tape.value(out.out);
        for i in 1..5 {
            for j in 0..8 {
                assert!((o[[i, j]] - o[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_uniform_values_ignore_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 4, &mut rng).unwrap();
        let row = randn((1, 8), &mut rng);
        let kv_val = ndarray::concatenate(ndarray::Axis(0), &[row.view(); 6]).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let q1 = tape.constant(randn((3, 8), &mut rng));
        let q2 = tape.constant(randn((3, 8), &mut rng));
        let kv = tape.constant(kv_val);
        let a = mha.forward(&mut tape, &bound, q1, kv, KeyLayout::Shared).unwrap().out;
        let b = mha.forward(&mut tape, &bound, q2, kv, KeyLayout::Shared).unwrap().out;
        let diff = (tape.value(a) - tape.value(b)).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(diff < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 16, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let q = tape.constant(randn((2 * 5, 16), &mut rng).mapv(|v| 3.0 * v));
        let kv = tape.constant(randn((2 * 7, 16), &mut rng));
        let out = mha.forward(&mut tape, &bound, q, kv, KeyLayout::Grouped(2)).unwrap();
        assert_eq!(out.weights.len(), 4);
        for w in out.weights {
            assert_eq!(tape.shape(w), (10, 7));
            for row in tape.value(w).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn attention_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let mut store = ParamStore::new();
            let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
            let q = randn((2 * 3, 8), &mut rng);
            let kv = randn((2 * 4, 8), &mut rng);
            let grouped = check_with_params(&store, vec![q.clone(), kv], |tape, bound, v| {
                let out = mha.forward(tape, bound, v[0], v[1], KeyLayout::Grouped(2)).unwrap().out;
                reduce(tape, out, seed)
            });
            assert!(grouped.passed, "{grouped:?}");
            let shared_kv = randn((5, 8), &mut rng);
            let shared = check_with_params(&store, vec![q, shared_kv], |tape, bound, v| {
                let out = mha.forward(tape, bound, v[0], v[1], KeyLayout::Shared).unwrap().out;
                reduce(tape, out, seed)
            });
            assert!(shared.passed, "{shared:?}");
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let c = tape.constant(Mat::from_elem((2, 4), 3.5));
        let y = ln.forward(&mut tape, &bound, c).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let normed = ndarray::array![[1.0, -1.0, 1.0, -1.0]];
        let x = tape.constant(normed.clone());
        let y = ln.forward(&mut tape, &bound, x).unwrap();
        let diff = (tape.value(y) - &normed).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(diff < 1e-6);
    }

    #[test]
    fn layer_norm_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let mut store = ParamStore::new();
            let ln = LayerNorm::new(&mut store, "ln", 6, &mut rng);
            for v in store.values_mut() {
                *v += &randn(v.dim(), &mut rng).mapv(|x| 0.3 * x);
            }
            let x = randn((4, 6), &mut rng);
            let report = check_with_params(&store, vec![x], |tape, bound, v| {
                let y = ln.forward(tape, bound, v[0]).unwrap();
                reduce(tape, y, seed)
            });
            assert!(report.passed, "{report:?}");
        }
    }
}
