//! Temperature-softened distillation objective.

use crate::error::{config_err, Error, Result};

/// `softmax(logits / tau)`.
pub fn soften(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let ls = log_softmax(&scaled);
    Ok(ls.into_iter().map(f64::exp).collect())
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `-sum p log q`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| -pi * qi.ln())
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    cross_entropy(p, p)
}

/// `sum p (log p - log q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KdWeights {
    pub tau: f64,
    pub lambda: f64,
}

impl Default for KdWeights {
    fn default() -> Self {
        Self { tau: 3.0, lambda: 0.5 }
    }
}

impl KdWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(config_err!("temperature must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err!("distillation mix must lie in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

/// Batch-mean loss, its gradient wrt the student logits, and the mean
/// hard-label cross-entropy component.
#[derive(Clone, Debug, PartialEq)]
pub struct KdValue {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub ce: f64,
}

/// `lambda CE(y, softmax(s)) + (1 - lambda) tau^2 KL(softmax(t/tau) || softmax(s/tau))`,
/// averaged over rows of the `[B, C]` logit matrices.
pub fn kd_loss(student: &[f64], teacher: &[f64], labels: &[usize], n_classes: usize, w: KdWeights) -> Result<KdValue> {
    w.validate()?;
    let b = labels.len();
    if student.len() != b * n_classes || teacher.len() != student.len() {
        return Err(config_err!(
            "logit shapes disagree: student {}, teacher {}, expected {b} x {n_classes}",
            student.len(),
            teacher.len()
        ));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Data(format!("label {y} outside [0, {n_classes})")));
    }
    let inv_b = 1.0 / b.max(1) as f64;
    let (tau, lam) = (w.tau, w.lambda);
    let mut loss = 0.0;
    let mut ce_total = 0.0;
    let mut grad = vec![0.0; student.len()];
    for (row, &y) in labels.iter().enumerate() {
        let s = &student[row * n_classes..(row + 1) * n_classes];
        let t = &teacher[row * n_classes..(row + 1) * n_classes];
        let ls = log_softmax(s);
        let ce = -ls[y];
        let lst = log_softmax(&s.iter().map(|v| v / tau).collect::<Vec<_>>());
        let ltt = log_softmax(&t.iter().map(|v| v / tau).collect::<Vec<_>>());
        let kl: f64 = ltt.iter().zip(&lst).map(|(lt, ls)| lt.exp() * (lt - ls)).sum();
        loss += lam * ce + (1.0 - lam) * tau * tau * kl;
        ce_total += ce;
        let g = &mut grad[row * n_classes..(row + 1) * n_classes];
        for c in 0..n_classes {
            let hard = ls[c].exp() - if c == y { 1.0 } else { 0.0 };
            let soft = lst[c].exp() - ltt[c].exp();
            g[c] = inv_b * (lam * hard + (1.0 - lam) * tau * soft);
        }
    }
    Ok(KdValue { loss: loss * inv_b, grad, ce: ce_total * inv_b })
}

/// Mean hard-label cross-entropy and accuracy of a `[B, C]` logit matrix.
pub fn ce_and_accuracy(logits: &[f64], labels: &[usize], n_classes: usize) -> (f64, f64) {
    let mut ce = 0.0;
    let mut hits = 0usize;
    for (row, &y) in labels.iter().enumerate() {
        let s = &logits[row * n_classes..(row + 1) * n_classes];
        ce -= log_softmax(s)[y];
        if argmax(s) == y {
            hits += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    (ce / n, hits as f64 / n)
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soften_examples() {
        assert!(soften(&[2.0; 4], 3.0).unwrap().iter().all(|p| (p - 0.25).abs() < 1e-15));
        let p = soften(&[1.0, 0.0], 100.0).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 0.003));
        let q = soften(&[1.0, 0.0], 1.0).unwrap();
        assert!((q[0] - 1.0f64.exp() / (1.0 + 1.0f64.exp())).abs() < 1e-15);
        assert!(matches!(soften(&[1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn two_class_kl() {
        let v = kd_loss(&[0.0, 1.0], &[1.0, 0.0], &[0], 2, KdWeights { tau: 1.0, lambda: 0.0 }).unwrap();
        assert!((v.loss - 0.5f64.tanh()).abs() < 1e-6);
    }

    #[test]
    fn endpoints() {
        let s = [0.3, -1.2, 2.0, 0.1, 0.0, -0.5];
        let t = [1.0, 0.2, -0.3, 0.4, 0.4, 2.0];
        let hard = kd_loss(&s, &t, &[2, 0], 3, KdWeights { tau: 3.0, lambda: 1.0 }).unwrap();
        assert!((hard.loss - hard.ce).abs() < 1e-12);
        let same = kd_loss(&s, &s, &[2, 0], 3, KdWeights { tau: 3.0, lambda: 0.0 }).unwrap();
        assert!(same.loss.abs() < 1e-12);
        assert!(matches!(
            kd_loss(&s, &t, &[3, 0], 3, KdWeights::default()),
            Err(Error::Data(_))
        ));
    }
}
