use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalSet;
use crate::model::EmbeddingVector;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolationSpec {
    pub alphas: Vec<f64>,
    /// Number of random anchor pairs `(x1, x2)`.
    pub n_pairs: usize,
}

impl Default for InterpolationSpec {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 0.75, 1.0, 1.5, 2.0],
            n_pairs: 16,
        }
    }
}

impl InterpolationSpec {
    /// Convex grid `0, 0.2, ..., 1`.
    pub fn convex(n_pairs: usize) -> Self {
        Self {
            alphas: (0..=5).map(|i| i as f64 / 5.0).collect(),
            n_pairs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.n_pairs == 0 {
            return Err(Error::Config("interpolation needs at least one alpha and one pair".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !a.is_finite()) {
            return Err(Error::Config(format!("alpha {a} is not finite")));
        }
        if !self.alphas.contains(&1.0) {
            return Err(Error::Config("alphas must include the anchor condition 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub etas: Vec<f64>,
    /// Number of anchor sentences; each gets one noise direction shared by all etas.
    pub n_anchors: usize,
    /// Per-dimension standard deviation of the eval embeddings.
    #[serde(skip)]
    pub sigma: Vec<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 0.5, 1.0, 2.0, 3.0],
            n_anchors: 16,
            sigma: Vec::new(),
        }
    }
}

impl NoiseSpec {
    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() || self.n_anchors == 0 {
            return Err(Error::Config("noise needs at least one eta and one anchor".into()));
        }
        if let Some(e) = self.etas.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::Config(format!("eta {e} must be finite and >= 0")));
        }
        if !self.etas.contains(&0.0) {
            return Err(Error::Config("etas must include the anchor condition 0".into()));
        }
        if let Some(s) = self.sigma.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::Config(format!("sigma entry {s} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// Where a probe embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Interpolation { x1: usize, x2: usize, alpha: f64 },
    Noise { anchor: usize, eta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacePoint {
    pub embedding: EmbeddingVector,
    pub provenance: Provenance,
}

/// `α E(x1) + (1 - α) E(x2)` over random distinct pairs, every alpha per pair.
/// `α = 1` returns `E(x1)` and `α = 0` returns `E(x2)` bit for bit.
pub fn build_interpolation_space(eval: &EvalSet, spec: &InterpolationSpec, rng: &mut Rng) -> Result<Vec<SpacePoint>> {
    spec.validate()?;
    let n = eval.len();
    if n < 2 {
        return Err(Error::Data(format!("interpolation needs at least 2 eval sentences, got {n}")));
    }
    let mut out = Vec::with_capacity(spec.n_pairs * spec.alphas.len());
    for _ in 0..spec.n_pairs {
        let pick = sample_indices(rng, n, 2);
        let (x1, x2) = (pick.index(0), pick.index(1));
        let (e1, e2) = (&eval.embeddings[x1], &eval.embeddings[x2]);
        for &alpha in &spec.alphas {
            let embedding = if alpha == 1.0 {
                e1.clone()
            } else if alpha == 0.0 {
                e2.clone()
            } else {
                EmbeddingVector(e1.values().iter().zip(e2.values()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect())
            };
            out.push(SpacePoint {
                embedding,
                provenance: Provenance::Interpolation { x1, x2, alpha },
            });
        }
    }
    Ok(out)
}

/// `E(x) + η σ ⊙ u / ‖u‖` with `u ~ N(0, I)` and `σ` the per-dimension std.
/// `η = 0` returns `E(x)` bit for bit.
pub fn build_noise_space(eval: &EvalSet, spec: &NoiseSpec, rng: &mut Rng) -> Result<Vec<SpacePoint>> {
    spec.validate()?;
    let n = eval.len();
    if n == 0 {
        return Err(Error::Data("noise space needs eval sentences".into()));
    }
    let d = eval.embeddings[0].dim();
    let sigma = &spec.sigma;
    if sigma.len() != d {
        return Err(Error::Shape(format!("sigma has {} entries, embeddings have {d}", sigma.len())));
    }
    let mut out = Vec::with_capacity(spec.n_anchors * spec.etas.len());
    for _ in 0..spec.n_anchors {
        let anchor = rng.random_range(0..n);
        let u = unit_direction(d, rng);
        let e = &eval.embeddings[anchor];
        for &eta in &spec.etas {
            let embedding = if eta == 0.0 {
                e.clone()
            } else {
                EmbeddingVector(
                    e.values()
                        .iter()
                        .zip(sigma.iter().zip(&u))
                        .map(|(x, (s, ui))| x + eta * s * ui)
                        .collect(),
                )
            };
            out.push(SpacePoint {
                embedding,
                provenance: Provenance::Noise { anchor, eta },
            });
        }
    }
    Ok(out)
}

pub(crate) fn unit_direction(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return u.into_iter().map(|x| x / norm).collect();
        }
    }
}
