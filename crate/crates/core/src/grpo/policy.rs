//! Log-linear softmax policy over sparse binary context features.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub actions: usize,
}

/// Parameters are laid out head by head, then feature by feature, then
/// action by action. The logit of action `a` under head `h` is the sum of
/// `theta[h][f][a]` over the active features `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    heads: Vec<HeadSpec>,
    features: usize,
    offsets: Vec<usize>,
    theta: Vec<f64>,
}

impl ToyPolicy {
    pub fn zeros(heads: Vec<HeadSpec>, features: usize) -> Self {
        assert!(heads.iter().all(|h| h.actions >= 1), "every head needs an action");
        let mut offsets = Vec::with_capacity(heads.len());
        let mut n = 0;
        for h in &heads {
            offsets.push(n);
            n += features * h.actions;
        }
        ToyPolicy {
            heads,
            features,
            offsets,
            theta: vec![0.0; n],
        }
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn actions(&self, head: usize) -> usize {
        self.heads[head].actions
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn index(&self, head: usize, feature: usize, action: usize) -> usize {
        debug_assert!(feature < self.features && action < self.heads[head].actions);
        self.offsets[head] + feature * self.heads[head].actions + action
    }

    pub fn get(&self, head: usize, feature: usize, action: usize) -> f64 {
        self.theta[self.index(head, feature, action)]
    }

    pub fn set(&mut self, head: usize, feature: usize, action: usize, v: f64) {
        let i = self.index(head, feature, action);
        self.theta[i] = v;
    }

    pub fn add(&mut self, head: usize, feature: usize, action: usize, v: f64) {
        let i = self.index(head, feature, action);
        self.theta[i] += v;
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    pub fn logits(&self, head: usize, active: &[u32]) -> Vec<f64> {
        let n = self.heads[head].actions;
        let mut z = vec![0.0; n];
        for &f in active {
            let base = self.offsets[head] + f as usize * n;
            for (zi, t) in z.iter_mut().zip(&self.theta[base..base + n]) {
                *zi += t;
            }
        }
        z
    }

    /// Log-probabilities of every action.
    pub fn log_probs(&self, head: usize, active: &[u32]) -> Vec<f64> {
        log_softmax(&self.logits(head, active))
    }

    pub fn log_prob(&self, head: usize, active: &[u32], action: usize) -> f64 {
        self.log_probs(head, active)[action]
    }

    pub fn sample<R: Rng + ?Sized>(&self, head: usize, active: &[u32], rng: &mut R) -> (usize, f64) {
        let lp = self.log_probs(head, active);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return (a, *l);
            }
        }
        let last = lp.len() - 1;
        (last, lp[last])
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy() -> ToyPolicy {
        let mut p = ToyPolicy::zeros(
            vec![
                HeadSpec { name: "a".into(), actions: 3 },
                HeadSpec { name: "b".into(), actions: 2 },
            ],
            4,
        );
        for (i, v) in p.params_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        p
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = policy();
        for h in 0..2 {
            let s: f64 = p.log_probs(h, &[0, 2, 3]).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_sum_active_rows() {
        let p = policy();
        let z = p.logits(1, &[1, 3]);
        assert_eq!(z[0], p.get(1, 1, 0) + p.get(1, 3, 0));
        assert_eq!(z[1], p.get(1, 1, 1) + p.get(1, 3, 1));
    }

    #[test]
    fn sampling_matches_probabilities() {
        let p = policy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs: Vec<f64> = p.log_probs(0, &[0, 1]).iter().map(|l| l.exp()).collect();
        let n = 40_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[p.sample(0, &[0, 1], &mut rng).0] += 1;
        }
        for a in 0..3 {
            assert!((counts[a] as f64 / n as f64 - probs[a]).abs() < 0.01);
        }
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        let a = log_softmax(&[1.0, 2.0, 3.0]);
        let b = log_softmax(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
