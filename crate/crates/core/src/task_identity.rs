//! Task signatures, identity prediction and logit scaling.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dual_lora::{relevance, LayerMemory};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

pub const DEFAULT_LAMBDA: f64 = 2.0;

/// `π_t = (ω₁, …, ω_t)` of the mean final-layer feature against every stored
/// residual basis. The flag is set when every `Ψ` is empty and `π` is zero.
pub fn compute_signature(mean_feature: &[f64], last_layer: &LayerMemory) -> (Vec<f64>, bool) {
    let pi: Vec<f64> = last_layer.psi.iter().map(|p| relevance(p, mean_feature)).collect();
    let degenerate = last_layer.psi.iter().all(|p| p.is_empty());
    (pi, degenerate)
}

/// Stored signatures `Π_t`, one per finished task, plus the confidence
/// scale `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureSet {
    signatures: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl SignatureSet {
    pub fn new(lambda: f64) -> Self {
        Self { signatures: Vec::new(), lambda }
    }

    pub fn push(&mut self, pi: Vec<f64>) {
        self.signatures.push(pi);
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<&[f64]> {
        self.signatures.get(t).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.signatures.iter().map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Zero-based task index `k̂`.
    pub task: usize,
    /// Confidence `δ̂ ≥ 0`.
    pub confidence: f64,
    /// Cosine similarity of the winner.
    pub similarity: f64,
}

/// `|a·b| / (‖a‖‖b‖)` with the shorter vector zero-extended.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(&a[..n], &b[..n]).abs() / (na * nb)
}

/// `k̂ = argmax_τ g(π_τ, π*)` and `δ̂ = λ(g_k̂ − max_{τ≠k̂} g_τ)`; the runner-up
/// of a single stored task counts as 0. `None` for a zero `π*`. Ties resolve
/// to the earliest task.
pub fn predict_task(pi_star: &[f64], signatures: &SignatureSet) -> Result<Option<Prediction>> {
    if signatures.is_empty() {
        return Err(Error::State("no stored signatures".into()));
    }
    if norm(pi_star) == 0.0 {
        return Ok(None);
    }
    let g: Vec<f64> = signatures.iter().map(|p| cosine(p, pi_star)).collect();
    let mut best = 0;
    for (i, &v) in g.iter().enumerate() {
        if v > g[best] {
            best = i;
        }
    }
    let runner_up = g
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    Ok(Some(Prediction {
        task: best,
        confidence: signatures.lambda * (g[best] - runner_up),
        similarity: g[best],
    }))
}

/// Multiplies the logits of head `k̂` by `1 + δ̂`; the rest are untouched.
pub fn scale_logits(logits: &mut [f64], ranges: &[Range<usize>], task: usize, confidence: f64) -> Result<()> {
    let range = ranges
        .get(task)
        .ok_or_else(|| Error::Parameter(format!("no head {task}")))?
        .clone();
    if range.end > logits.len() {
        return Err(Error::Dimension(format!("head range ends at {} of {}", range.end, logits.len())));
    }
    let f = 1.0 + confidence;
    for v in &mut logits[range] {
        *v *= f;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(sigs: &[&[f64]], lambda: f64) -> SignatureSet {
        let mut s = SignatureSet::new(lambda);
        for p in sigs {
            s.push(p.to_vec());
        }
        s
    }

    #[test]
    fn exact_match_wins() {
        let s = set(&[&[1.0], &[0.2, 0.9]], 2.0);
        let p = predict_task(&[0.2, 0.9], &s).unwrap().unwrap();
        assert_eq!(p.task, 1);
        assert!((p.similarity - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_task_confidence_is_lambda_g() {
        let s = set(&[&[0.5]], 2.0);
        let p = predict_task(&[0.3, 0.4], &s).unwrap().unwrap();
        assert_eq!(p.task, 0);
        assert!((p.confidence - 2.0 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn hand_cosines() {
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0]], 2.0);
        let p = predict_task(&[0.9, 0.1], &s).unwrap().unwrap();
        let n = (0.82f64).sqrt();
        let (g1, g2) = (0.9 / n, 0.1 / n);
        assert_eq!(p.task, 0);
        assert!((g1 - 0.99388).abs() < 1e-5 && (g2 - 0.11043).abs() < 1e-5);
        assert!((p.confidence - 1.76690).abs() < 1e-5);
    }

    #[test]
    fn zero_query_gives_no_prediction() {
        let s = set(&[&[1.0]], 2.0);
        assert!(predict_task(&[0.0, 0.0], &s).unwrap().is_none());
    }

    #[test]
    fn scaling_touches_only_the_head() {
        let mut l = vec![1.0; 4];
        scale_logits(&mut l, &[0..2, 2..4], 1, 1.0).unwrap();
        assert_eq!(l, vec![1.0, 1.0, 2.0, 2.0]);
        let mut l = vec![0.3, -1.0, 2.0];
        scale_logits(&mut l, &[0..1, 1..3], 0, 0.0).unwrap();
        assert_eq!(l, vec![0.3, -1.0, 2.0]);
    }
}
