//! Differentiable scorers with hand-derived parameter gradients.
//!
//! One `ScorerModel` type backs the pointwise teacher, the listwise policy
//! scores and the reward head. Parameters live in a single flat vector so
//! trainers can treat every model uniformly.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{ListFeatures, LIST_FEATURE_DIM};

pub const MODEL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 16;
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dimension mismatch: model expects {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("parameter vector has length {got}, architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("unsupported model schema version {0}")]
    Schema(u32),
    #[error("non-finite parameters")]
    NonFinite,
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Linear,
    /// One hidden tanh layer.
    Mlp { hidden: usize },
}

impl Arch {
    pub fn param_count(self, input: usize) -> usize {
        match self {
            Arch::Linear => input + 1,
            Arch::Mlp { hidden } => hidden * input + 2 * hidden + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    arch: Arch,
    input_dim: usize,
    params: Vec<f64>,
}

impl ScorerModel {
    pub fn from_params(arch: Arch, input_dim: usize, params: Vec<f64>) -> Result<Self, ModelError> {
        let expected = arch.param_count(input_dim);
        if params.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(Self {
            arch,
            input_dim,
            params,
        })
    }

    pub fn zeros(arch: Arch, input_dim: usize) -> Self {
        Self {
            arch,
            input_dim,
            params: vec![0.0; arch.param_count(input_dim)],
        }
    }

    /// Parameters drawn uniformly from [-0.1, 0.1].
    pub fn random<R: Rng + ?Sized>(arch: Arch, input_dim: usize, rng: &mut R) -> Self {
        let params = (0..arch.param_count(input_dim))
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        Self {
            arch,
            input_dim,
            params,
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() == self.input_dim {
            Ok(())
        } else {
            Err(ModelError::Dimension {
                expected: self.input_dim,
                got: x.len(),
            })
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check(x)?;
        Ok(self.forward_unchecked(x))
    }

    /// Scores every row.
    pub fn forward_batch<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<Vec<f64>, ModelError> {
        xs.iter().map(|x| self.forward(x.as_ref())).collect()
    }

    fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let n = self.input_dim;
        let p = &self.params;
        match self.arch {
            Arch::Linear => crate::math::dot(&p[..n], x) + p[n],
            Arch::Mlp { hidden } => {
                let (w, rest) = p.split_at(hidden * n);
                let (b1, rest) = rest.split_at(hidden);
                let (v, b2) = rest.split_at(hidden);
                let mut out = b2[0];
                for h in 0..hidden {
                    let a = crate::math::dot(&w[h * n..(h + 1) * n], x) + b1[h];
                    out += v[h] * a.tanh();
                }
                out
            }
        }
    }

    /// Adds `upstream · ∂forward(x)/∂θ` into `out`.
    pub fn accumulate_grad(&self, x: &[f64], upstream: f64, out: &mut [f64]) -> Result<(), ModelError> {
        self.check(x)?;
        if out.len() != self.params.len() {
            return Err(ModelError::ParamCount {
                expected: self.params.len(),
                got: out.len(),
            });
        }
        if upstream == 0.0 {
            return Ok(());
        }
        let n = self.input_dim;
        match self.arch {
            Arch::Linear => {
                for (o, xi) in out[..n].iter_mut().zip(x) {
                    *o += upstream * xi;
                }
                out[n] += upstream;
            }
            Arch::Mlp { hidden } => {
                let p = &self.params;
                let (w, rest) = p.split_at(hidden * n);
                let (b1, rest) = rest.split_at(hidden);
                let v = &rest[..hidden];
                let (gw, grest) = out.split_at_mut(hidden * n);
                let (gb1, grest) = grest.split_at_mut(hidden);
                let (gv, gb2) = grest.split_at_mut(hidden);
                for h in 0..hidden {
                    let t = (crate::math::dot(&w[h * n..(h + 1) * n], x) + b1[h]).tanh();
                    gv[h] += upstream * t;
                    let da = upstream * v[h] * (1.0 - t * t);
                    gb1[h] += da;
                    for (g, xi) in gw[h * n..(h + 1) * n].iter_mut().zip(x) {
                        *g += da * xi;
                    }
                }
                gb2[0] += upstream;
            }
        }
        Ok(())
    }

    pub fn grad_params(&self, x: &[f64], upstream: f64) -> Result<Vec<f64>, ModelError> {
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_grad(x, upstream, &mut g)?;
        Ok(g)
    }

    /// `θ ← θ − lr · grad`.
    pub fn apply_step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            arch: self.arch,
            dims: Dims {
                input: self.input_dim,
                hidden: match self.arch {
                    Arch::Linear => None,
                    Arch::Mlp { hidden } => Some(hidden),
                },
            },
            params: self.params.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self, ModelError> {
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(ModelError::Schema(file.schema_version));
        }
        Self::from_params(file.arch, file.dims.input, file.params)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        Self::from_file(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

/// On-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub arch: Arch,
    pub dims: Dims,
    pub params: Vec<f64>,
}

/// Scalar reward over list features.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel(pub ScorerModel);

impl RewardModel {
    pub fn new(model: ScorerModel) -> Result<Self, ModelError> {
        if model.input_dim() != LIST_FEATURE_DIM {
            return Err(ModelError::Dimension {
                expected: LIST_FEATURE_DIM,
                got: model.input_dim(),
            });
        }
        Ok(Self(model))
    }

    pub fn random<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        Self(ScorerModel::random(arch, LIST_FEATURE_DIM, rng))
    }

    pub fn reward(&self, list: &ListFeatures) -> f64 {
        self.0.forward_unchecked(list.as_slice())
    }

    pub fn model(&self) -> &ScorerModel {
        &self.0
    }
}
