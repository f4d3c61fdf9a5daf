use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::{Mat, Tape, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter was initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
    Normal { std: f64 },
}

/// Named, trainable parameter matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    inits: Vec<Init>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: impl Into<String>, shape: (usize, usize), init: Init, rng: &mut R) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        let value = match init {
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Mat::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
            }
            Init::Zeros => Mat::zeros(shape),
            Init::Ones => Mat::ones(shape),
            Init::Normal { std } => {
                Mat::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            }
        };
        self.names.push(name);
        self.values.push(value);
        self.inits.push(init);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn init(&self, id: ParamId) -> Init {
        self.inits[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect() }
    }

    /// SHA-256 over names and little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        checksum_of(self.names.iter().map(String::as_str).zip(self.values.iter()))
    }

    /// Checksum restricted to parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        checksum_of(
            self.names
                .iter()
                .map(String::as_str)
                .zip(self.values.iter())
                .filter(|(n, _)| n.starts_with(prefix)),
        )
    }
}

pub(crate) fn checksum_of<'a>(items: impl Iterator<Item = (&'a str, &'a Mat)>) -> String {
    let mut h = Sha256::new();
    for (name, value) in items {
        h.update(name.as_bytes());
        for v in value.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape handles of a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Bound {
    /// Wraps tape handles ordered like the store's parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}
