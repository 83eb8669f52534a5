//! Adaptive knowledge-enhanced Bayesian layer: a gated knowledge offset,
//! a unit-covariance Gaussian prior around the offset knowledge vector, a
//! softmax likelihood over support samples, and MAP class vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{sigmoid, Params, Tape, Var};
use crate::tensor::{dot, log_softmax, softmax, Tensor};

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// `λ = sigmoid([s; s − k; k] W + b)` with `W` of shape `3d x d`.
pub fn gate(s: &[f64], k: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    same_len(s, k)?;
    let d = s.len();
    if w.shape() != (3 * d, d) {
        return Err(Error::DimensionMismatch { expected: 3 * d, got: w.rows() });
    }
    if b.shape() != (1, d) {
        return Err(Error::DimensionMismatch { expected: d, got: b.cols() });
    }
    let mut input = Vec::with_capacity(3 * d);
    input.extend_from_slice(s);
    input.extend(s.iter().zip(k).map(|(s, k)| s - k));
    input.extend_from_slice(k);
    let pre = Tensor::row_vector(input).matmul(w);
    Ok(pre.row(0).iter().zip(b.row(0)).map(|(z, b)| sigmoid(z + b)).collect())
}

/// `Δh = λ ⊙ (s − k)`.
pub fn offset(s: &[f64], k: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    same_len(s, k)?;
    same_len(s, lambda)?;
    Ok(s.iter().zip(k).zip(lambda).map(|((s, k), l)| l * (s - k)).collect())
}

/// `log N(v | k + Δh, I)`.
pub fn prior_logdensity(v: &[f64], k: &[f64], delta: &[f64]) -> f64 {
    let d = v.len() as f64;
    let sq: f64 = v
        .iter()
        .zip(k)
        .zip(delta)
        .map(|((v, k), h)| (v - (k + h)).powi(2))
        .sum();
    -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq
}

/// Class vectors `v_t` for the support type set, together with the frames
/// that back their priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVectorSet {
    pub classes: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub frames: Vec<String>,
}

impl ClassVectorSet {
    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn vector(&self, class: &str) -> Option<&[f64]> {
        self.index_of(class).map(|i| self.vectors[i].as_slice())
    }
}

/// `log softmax_t(x · v_t)` evaluated at `label`.
pub fn likelihood_logprob(x: &[f64], label: &str, set: &ClassVectorSet) -> Result<f64> {
    let y = set.index_of(label).ok_or_else(|| Error::UnknownClass(label.to_string()))?;
    let scores: Vec<f64> = set.vectors.iter().map(|v| dot(x, v)).collect();
    Ok(log_softmax(&scores)[y])
}

/// Prior for one class: knowledge vector `k_t` and offset `Δh_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub class: String,
    pub frame_id: String,
    pub knowledge: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ClassPrior {
    pub fn mean(&self) -> Vec<f64> {
        self.knowledge.iter().zip(&self.offset).map(|(k, h)| k + h).collect()
    }
}

/// Log posterior up to a constant: support log-likelihood plus log prior.
pub fn map_objective(vectors: &[Vec<f64>], support: &[(Vec<f64>, usize)], priors: &[ClassPrior]) -> f64 {
    let mut total = 0.0;
    for (x, y) in support {
        let scores: Vec<f64> = vectors.iter().map(|v| dot(x, v)).collect();
        total += log_softmax(&scores)[*y];
    }
    for (v, p) in vectors.iter().zip(priors) {
        total += prior_logdensity(v, &p.knowledge, &p.offset);
    }
    total
}

/// Gradient of [`map_objective`] with respect to each class vector.
pub fn map_gradient(vectors: &[Vec<f64>], support: &[(Vec<f64>, usize)], priors: &[ClassPrior]) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = vectors
        .iter()
        .zip(priors)
        .map(|(v, p)| v.iter().zip(p.mean()).map(|(v, m)| m - v).collect())
        .collect();
    for (x, y) in support {
        let scores: Vec<f64> = vectors.iter().map(|v| dot(x, v)).collect();
        let probs = softmax(&scores);
        for (t, g) in grads.iter_mut().enumerate() {
            let coeff = if t == *y { 1.0 } else { 0.0 } - probs[t];
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += coeff * xi;
            }
        }
    }
    grads
}

/// MAP class vectors by gradient ascent from the prior means. A step that
/// would decrease the objective is retried with half the step size, so the
/// objective never decreases across iterations.
pub fn posterior_map(
    support: &[(Vec<f64>, String)],
    priors: &[ClassPrior],
    steps: usize,
    step_size: f64,
) -> Result<ClassVectorSet> {
    let classes: Vec<String> = priors.iter().map(|p| p.class.clone()).collect();
    let indexed: Vec<(Vec<f64>, usize)> = support
        .iter()
        .map(|(x, label)| {
            classes
                .iter()
                .position(|c| c == label)
                .map(|i| (x.clone(), i))
                .ok_or_else(|| Error::UnknownClass(label.clone()))
        })
        .collect::<Result<_>>()?;
    let mut vectors: Vec<Vec<f64>> = priors.iter().map(ClassPrior::mean).collect();
    if !indexed.is_empty() {
        let mut eta = step_size;
        let mut current = map_objective(&vectors, &indexed, priors);
        for _ in 0..steps {
            let grads = map_gradient(&vectors, &indexed, priors);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient("posterior_map"));
            }
            let mut accepted = false;
            for _ in 0..40 {
                let proposal: Vec<Vec<f64>> = vectors
                    .iter()
                    .zip(&grads)
                    .map(|(v, g)| v.iter().zip(g).map(|(v, g)| v + eta * g).collect())
                    .collect();
                let value = map_objective(&proposal, &indexed, priors);
                if value >= current {
                    vectors = proposal;
                    current = value;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                break;
            }
        }
    }
    Ok(ClassVectorSet {
        classes,
        vectors,
        frames: priors.iter().map(|p| p.frame_id.clone()).collect(),
    })
}

/// Gate and offset on the tape, reading `gate.w` and `gate.b`.
pub fn offset_on_tape(tape: &mut Tape, params: &Params, s: Var, k: Var) -> (Var, Var) {
    let diff = tape.sub(s, k);
    let joined = tape.concat_cols(&[s, diff, k]);
    let w = tape.param("gate.w", params);
    let b = tape.param("gate.b", params);
    let pre = tape.affine(joined, w, b);
    let lambda = tape.sigmoid(pre);
    let delta = tape.mul(lambda, diff);
    (lambda, delta)
}
