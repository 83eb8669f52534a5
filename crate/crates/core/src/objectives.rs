//! Hybrid distillation objective: cross-entropy on the training multiset,
//! cosine feature distillation against the previous round's model, and
//! temperature-softened prediction distillation over the old classes.
//!
//! Each term exists twice: as a plain function over `f64` slices (the
//! reference used for reporting and tests) and as a tape expression (used
//! for training). The two are checked against each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, log_softmax, norm, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
}

impl LossWeights {
    pub const DEFAULT_TEMPERATURE: f64 = 2.0;

    pub fn ifsed_k() -> Self {
        Self { alpha: 0.1, beta: 0.1, gamma: 0.5, temperature: Self::DEFAULT_TEMPERATURE }
    }

    pub fn ifsed_kp() -> Self {
        Self { alpha: 0.1, beta: 0.5, gamma: 0.7, temperature: Self::DEFAULT_TEMPERATURE }
    }

    pub fn finetune() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 1.0, temperature: Self::DEFAULT_TEMPERATURE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.temperature.is_nan() || self.temperature < 1.0 {
            return Err(Error::Config(format!("temperature {} must be >= 1", self.temperature)));
        }
        Ok(())
    }
}

/// Outputs of the frozen previous-round model on the training multiset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotOutputs {
    /// Unit-norm features, one row per sample.
    pub features: Tensor,
    /// Logits over the `m` old classes, one row per sample.
    pub old_logits: Tensor,
}

impl SnapshotOutputs {
    pub fn new(features: &Tensor, old_logits: Tensor) -> Result<Self> {
        let mut normalized = features.clone();
        for i in 0..features.rows() {
            let n = norm(features.row(i));
            if n < 1e-12 {
                return Err(Error::ZeroVector(i));
            }
            normalized.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { features: normalized, old_logits })
    }

    pub fn old_classes(&self) -> usize {
        self.old_logits.cols()
    }
}

/// `-(1/N) Σ log p[y]` over probability rows.
pub fn ce_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    assert_eq!(probs.len(), labels.len(), "one label per row");
    let mut total = 0.0;
    for (row, (p, &y)) in probs.iter().zip(labels).enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || p.iter().any(|v| *v < -1e-5 || *v > 1.0 + 1e-5) {
            return Err(Error::NonProbabilityInput { row, sum });
        }
        total -= p[y].ln();
    }
    Ok(total / probs.len().max(1) as f64)
}

/// `(1/N) Σ (1 − cos(f, f'))`.
pub fn feature_distill(current: &[Vec<f64>], snapshot: &[Vec<f64>]) -> Result<f64> {
    assert_eq!(current.len(), snapshot.len(), "one snapshot row per sample");
    let mut total = 0.0;
    for (row, (f, g)) in current.iter().zip(snapshot).enumerate() {
        if f.len() != g.len() {
            return Err(Error::DimensionMismatch { expected: g.len(), got: f.len() });
        }
        let (nf, ng) = (norm(f), norm(g));
        if nf < 1e-12 || ng < 1e-12 {
            return Err(Error::ZeroVector(row));
        }
        total += 1.0 - dot(f, g) / (nf * ng);
    }
    Ok(total / current.len().max(1) as f64)
}

/// `-(1/N) Σ Σ_i softmax(o'/T)_i log softmax(o/T)_i` over the old classes.
pub fn prediction_distill(current: &[Vec<f64>], snapshot: &[Vec<f64>], temperature: f64) -> Result<f64> {
    assert_eq!(current.len(), snapshot.len(), "one snapshot row per sample");
    let mut total = 0.0;
    for (o, o_prev) in current.iter().zip(snapshot) {
        if o.is_empty() {
            return Err(Error::EmptyOldClassSet);
        }
        if o.len() != o_prev.len() {
            return Err(Error::DimensionMismatch { expected: o_prev.len(), got: o.len() });
        }
        let target = softmax(&o_prev.iter().map(|v| v / temperature).collect::<Vec<_>>());
        let log_pred = log_softmax(&o.iter().map(|v| v / temperature).collect::<Vec<_>>());
        total -= dot(&target, &log_pred);
    }
    Ok(total / current.len().max(1) as f64)
}

pub fn total_loss(fd: f64, pd: f64, ce: f64, w: &LossWeights) -> f64 {
    w.alpha * fd + w.beta * pd + w.gamma * ce
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn ce_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let (n, c) = tape.value(logits).shape();
    let mut onehot = Tensor::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        onehot.set(i, y, 1.0);
    }
    let mask = tape.constant(onehot);
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.mul(lsm, mask);
    let sum = tape.sum_all(picked);
    tape.scale(sum, -1.0 / n as f64)
}

pub fn feature_distill_on_tape(tape: &mut Tape, features: Var, snapshot: &Tensor) -> Var {
    let n = snapshot.rows();
    let unit = tape.l2_normalize_rows(features);
    let target = tape.constant(snapshot.clone());
    let prod = tape.mul(unit, target);
    let cos = tape.sum_all(prod);
    let mean_cos = tape.scale(cos, 1.0 / n as f64);
    let one = tape.constant(Tensor::filled(1, 1, 1.0));
    tape.sub(one, mean_cos)
}

pub fn prediction_distill_on_tape(tape: &mut Tape, old_logits: Var, snapshot_logits: &Tensor, temperature: f64) -> Var {
    let n = snapshot_logits.rows();
    let mut target = Tensor::zeros(n, snapshot_logits.cols());
    for i in 0..n {
        let scaled: Vec<f64> = snapshot_logits.row(i).iter().map(|v| v / temperature).collect();
        target.row_mut(i).copy_from_slice(&softmax(&scaled));
    }
    let target = tape.constant(target);
    let scaled = tape.scale(old_logits, 1.0 / temperature);
    let lsm = tape.log_softmax_rows(scaled);
    let prod = tape.mul(lsm, target);
    let sum = tape.sum_all(prod);
    tape.scale(sum, -1.0 / n as f64)
}

/// The three loss terms of one batch, as tape nodes. Distillation terms are
/// absent when there is no snapshot (first round) or it has no old classes.
pub struct LossTerms {
    pub ce: Var,
    pub fd: Option<Var>,
    pub pd: Option<Var>,
    pub total: Var,
}

/// `α L_fd + β L_pd + γ L_ce`. `logits` columns are ordered with the `m` old
/// classes first. With `mixture` off only `γ L_ce` is formed.
pub fn hybrid_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    features: Var,
    snapshot: Option<&SnapshotOutputs>,
    weights: &LossWeights,
    mixture: bool,
) -> LossTerms {
    let ce = ce_on_tape(tape, logits, labels);
    let mut total = tape.scale(ce, weights.gamma);
    let mut fd = None;
    let mut pd = None;
    if let (true, Some(snap)) = (mixture, snapshot) {
        let f = feature_distill_on_tape(tape, features, &snap.features);
        let weighted = tape.scale(f, weights.alpha);
        total = tape.add(total, weighted);
        fd = Some(f);
        let m = snap.old_classes();
        if m > 0 {
            let old = tape.slice_cols(logits, 0, m);
            let p = prediction_distill_on_tape(tape, old, &snap.old_logits, weights.temperature);
            let weighted = tape.scale(p, weights.beta);
            total = tape.add(total, weighted);
            pd = Some(p);
        }
    }
    LossTerms { ce, fd, pd, total }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn ce_cases() {
        assert_eq!(ce_loss(&[vec![0.0, 1.0, 0.0]], &[1]).unwrap(), 0.0);
        let c = 7;
        let uniform = vec![vec![1.0 / c as f64; c]; 3];
        assert!((ce_loss(&uniform, &[0, 3, 6]).unwrap() - (c as f64).ln()).abs() < 1e-12);
        assert!(matches!(ce_loss(&[vec![0.5, 0.6]], &[0]), Err(Error::NonProbabilityInput { row: 0, .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs: Vec<Vec<f64>> = rand_rows(&mut rng, 5, 4).iter().map(|r| softmax(r)).collect();
        let labels = [0, 1, 2, 3, 1];
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                let y = if labels[i] == j { 1.0 } else { 0.0 };
                oracle += -y * probs[i][j].ln();
            }
        }
        oracle /= 5.0;
        assert!((ce_loss(&probs, &labels).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn feature_distill_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_rows(&mut rng, 4, 6);
        assert!(feature_distill(&f, &f).unwrap().abs() < 1e-12);
        let neg: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        assert!((feature_distill(&f, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(feature_distill(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]]), Err(Error::ZeroVector(0))));

        let g = rand_rows(&mut rng, 4, 6);
        let unit = |r: &Vec<f64>| -> Vec<f64> {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        };
        let oracle: f64 = f
            .iter()
            .zip(&g)
            .map(|(a, b)| 1.0 - unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert!((feature_distill(&f, &g).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn prediction_distill_cases() {
        let o = vec![vec![1.0, -0.5, 2.0]];
        let t = 2.0;
        let p = softmax(&[0.5, -0.25, 1.0]);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((prediction_distill(&o, &o, t).unwrap() - entropy).abs() < 1e-12);
        assert_eq!(prediction_distill(&[vec![3.0]], &[vec![-9.0]], t).unwrap(), 0.0);
        let big = prediction_distill(&[vec![1.0, 5.0, -3.0, 0.0]], &[vec![-2.0, 0.5, 4.0, 1.0]], 1e4).unwrap();
        assert!((big - 4f64.ln()).abs() < 1e-3);
        assert!(matches!(prediction_distill(&[vec![]], &[vec![]], t), Err(Error::EmptyOldClassSet)));
    }

    #[test]
    fn prediction_distill_minimized_at_matching_distribution() {
        // Gradient descent on a free logit vector converges to the target
        // distribution, and the minimum equals the target entropy.
        let target = vec![vec![0.3, -1.2, 2.0, 0.1]];
        let t = 2.0;
        let mut o = vec![vec![0.0; 4]];
        for _ in 0..5000 {
            let mut tape = Tape::new();
            let mut params = crate::tape::Params::new();
            params.insert("o".into(), Tensor::from_rows(&o));
            let ov = tape.param("o", &params);
            let loss = prediction_distill_on_tape(&mut tape, ov, &Tensor::from_rows(&target), t);
            let g = tape.backward(loss);
            for (v, gv) in o[0].iter_mut().zip(g["o"].data()) {
                *v -= 2.0 * gv;
            }
        }
        let scaled = |r: &[f64]| softmax(&r.iter().map(|v| v / t).collect::<Vec<_>>());
        for (a, b) in scaled(&o[0]).iter().zip(scaled(&target[0])) {
            assert!((a - b).abs() < 1e-6);
        }
        let p = scaled(&target[0]);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((prediction_distill(&o, &target, t).unwrap() - entropy).abs() < 1e-9);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.3, 0.7, 1.25, &LossWeights::finetune()), 1.25);
        assert_eq!(LossWeights::ifsed_k(), LossWeights { alpha: 0.1, beta: 0.1, gamma: 0.5, temperature: 2.0 });
        assert_eq!(LossWeights::ifsed_kp(), LossWeights { alpha: 0.1, beta: 0.5, gamma: 0.7, temperature: 2.0 });
        let w = LossWeights::ifsed_k();
        let scaled = LossWeights { alpha: 3.0 * w.alpha, beta: 3.0 * w.beta, gamma: 3.0 * w.gamma, ..w };
        let base = total_loss(0.2, 0.4, 0.9, &w);
        assert!((total_loss(0.2, 0.4, 0.9, &scaled) - 3.0 * base).abs() < 1e-12);
        assert!(total_loss(0.3, 0.4, 0.9, &w) >= base);
        assert!(LossWeights { temperature: 0.5, ..w }.validate().is_err());
    }

    #[test]
    fn tape_terms_match_plain_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, c, m, d) = (5, 6, 3, 7);
        let logits = rand_rows(&mut rng, n, c);
        let feats = rand_rows(&mut rng, n, d);
        let snap_feats = rand_rows(&mut rng, n, d);
        let snap_logits = rand_rows(&mut rng, n, m);
        let labels = [0, 5, 2, 3, 4];
        let snap = SnapshotOutputs::new(&Tensor::from_rows(&snap_feats), Tensor::from_rows(&snap_logits)).unwrap();
        let w = LossWeights::ifsed_k();

        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::from_rows(&logits));
        let fv = tape.constant(Tensor::from_rows(&feats));
        let terms = hybrid_on_tape(&mut tape, lv, &labels, fv, Some(&snap), &w, true);

        let probs: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r)).collect();
        let ce = ce_loss(&probs, &labels).unwrap();
        let fd = feature_distill(&feats, &snap_feats).unwrap();
        let old: Vec<Vec<f64>> = logits.iter().map(|r| r[..m].to_vec()).collect();
        let pd = prediction_distill(&old, &snap_logits, w.temperature).unwrap();
        assert!((tape.scalar(terms.ce) - ce).abs() < 1e-12);
        assert!((tape.scalar(terms.fd.unwrap()) - fd).abs() < 1e-12);
        assert!((tape.scalar(terms.pd.unwrap()) - pd).abs() < 1e-12);
        assert!((tape.scalar(terms.total) - total_loss(fd, pd, ce, &w)).abs() < 1e-12);

        let mut tape = Tape::new();
        let lv = tape.constant(Tensor::from_rows(&logits));
        let fv = tape.constant(Tensor::from_rows(&feats));
        let first_round = hybrid_on_tape(&mut tape, lv, &labels, fv, None, &w, true);
        assert!(first_round.fd.is_none() && first_round.pd.is_none());
        assert!((tape.scalar(first_round.total) - w.gamma * ce).abs() < 1e-12);
    }
}
