//! Central-difference gradient checking.

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub coordinates_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Settings for [`GradCheck::run`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Caps the coordinates probed per input (evenly strided); `None` probes all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-6, tol: 1e-4, max_coords: None }
    }
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self { eps, tol, max_coords: None }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    /// Checks a function built on a [`Tape`].
    ///
    /// `build` receives one gradient-tracking leaf per input and must return
    /// a `1 x 1` node.
    pub fn run<F>(&self, inputs: &[Mat], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let value = |xs: &[Mat]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            tape.scalar(out)
        };
        let grad = |xs: &[Mat]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            let grads = tape.backward(out);
            vars.iter().zip(xs).map(|(&v, x)| grads.get_or_zeros(v, x.dim())).collect()
        };
        self.run_with(inputs, value, grad)
    }

    /// Checks an explicit `(value, gradient)` pair.
    pub fn run_with<V, G>(&self, inputs: &[Mat], value: V, gradient: G) -> Result<GradCheckReport>
    where
        V: Fn(&[Mat]) -> f64,
        G: Fn(&[Mat]) -> Vec<Mat>,
    {
        if !(1e-7..=1e-3).contains(&self.eps) {
            return Err(Error::InvalidConfig(format!("grad_check eps {} outside [1e-7, 1e-3]", self.eps)));
        }
        let analytic = gradient(inputs);
        if analytic.len() != inputs.len() {
            return Err(Error::ShapeMismatch("gradient count differs from input count".into()));
        }
        let mut probes = Vec::new();
        let mut offset = 0;
        for (k, (x, g)) in inputs.iter().zip(&analytic).enumerate() {
            if x.dim() != g.dim() {
                return Err(Error::ShapeMismatch(format!("gradient {k} has shape {:?}, input {:?}", g.dim(), x.dim())));
            }
            let n = x.len();
            let stride = match self.max_coords {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            let mut work: Vec<Mat> = inputs.to_vec();
            for c in (0..n).step_by(stride) {
                let a = g.as_slice().expect("standard layout")[c];
                if !a.is_finite() {
                    return Err(Error::NonFiniteGradient(offset + c));
                }
                let orig = x.as_slice().expect("standard layout")[c];
                work[k].as_slice_mut().expect("standard layout")[c] = orig + self.eps;
                let plus = value(&work);
                work[k].as_slice_mut().expect("standard layout")[c] = orig - self.eps;
                let minus = value(&work);
                work[k].as_slice_mut().expect("standard layout")[c] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                if !numeric.is_finite() {
                    return Err(Error::NonFiniteGradient(offset + c));
                }
                probes.push(((k, c), a, numeric));
            }
            offset += n;
        }
        Ok(summarize(&probes, self.tol))
    }
}

/// Per-coordinate relative error with a floor of 1e-3 of the largest
/// gradient magnitude, so coordinates with vanishing gradients are judged
/// on an absolute scale.
fn summarize(probes: &[((usize, usize), f64, f64)], tol: f64) -> GradCheckReport {
    let scale = probes.iter().fold(0.0f64, |m, &(_, a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    let mut worst = (0, 0);
    let mut max_rel = 0.0;
    for &(at, a, n) in probes {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
            worst = at;
        }
    }
    GradCheckReport { max_rel_error: max_rel, worst, coordinates_checked: probes.len(), tol, passed: max_rel <= tol }
}
