//! Clipped surrogate objective and its analytic gradient.

use serde::{Deserialize, Serialize};

use super::policy::ToyPolicy;

/// One sampled action with the context it was sampled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub head: u16,
    pub features: Vec<u32>,
    pub action: u16,
    /// Log-probability under the sampling snapshot.
    pub old_logp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub decisions: Vec<Decision>,
    pub advantage: f64,
}

/// How per-decision log-probabilities enter the importance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogProbNorm {
    /// One ratio per decision; the clipped terms are averaged over every
    /// decision in the batch, so no sequence is up- or down-weighted by its
    /// length.
    #[default]
    PerTokenMean,
    /// One ratio per sequence from the summed log-probabilities.
    SequenceSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    pub clip: f64,
    pub kl: f64,
    pub norm: LogProbNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub objective: f64,
    /// Gradient of `objective` with respect to the policy parameters.
    pub grad: Vec<f64>,
    /// Fraction of ratios whose clipped branch was selected.
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

/// `min(r * a, clip(r, 1 - eps, 1 + eps) * a)` and its derivative in `r`.
fn clipped(ratio: f64, adv: f64, eps: f64) -> (f64, f64, bool) {
    let unclipped = ratio * adv;
    let bounded = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= bounded {
        (unclipped, adv, false)
    } else {
        (bounded, 0.0, true)
    }
}

/// Adds `scale * dz` to the gradient rows of every active feature.
fn scatter(grad: &mut [f64], policy: &ToyPolicy, d: &Decision, dz: &[f64], scale: f64) {
    if scale == 0.0 {
        return;
    }
    let head = d.head as usize;
    for &f in &d.features {
        let base = policy.index(head, f as usize, 0);
        for (g, v) in grad[base..base + dz.len()].iter_mut().zip(dz) {
            *g += scale * v;
        }
    }
}

/// Objective averaged over trajectories, minus `kl` times the exact
/// per-decision KL(new || old).
pub fn surrogate(
    policy: &ToyPolicy,
    old: &ToyPolicy,
    trajs: &[Trajectory],
    cfg: &SurrogateConfig,
) -> Surrogate {
    let mut grad = vec![0.0; policy.params().len()];
    let mut objective = 0.0;
    let mut clipped_n = 0usize;
    let mut ratio_n = 0usize;
    let mut kl_sum = 0.0;
    let mut kl_n = 0usize;
    let n = trajs.len().max(1) as f64;
    let total = trajs.iter().map(|t| t.decisions.len()).sum::<usize>().max(1) as f64;

    for tr in trajs {
        if tr.decisions.is_empty() {
            continue;
        }
        // Per-decision quantities under the current parameters.
        let mut dlogp = Vec::with_capacity(tr.decisions.len());
        let mut logp_delta = Vec::with_capacity(tr.decisions.len());
        for d in &tr.decisions {
            let head = d.head as usize;
            let lp = policy.log_probs(head, &d.features);
            let a = d.action as usize;
            logp_delta.push(lp[a] - d.old_logp);
            let mut dz: Vec<f64> = lp.iter().map(|l| -l.exp()).collect();
            dz[a] += 1.0;
            dlogp.push(dz);

            if cfg.kl != 0.0 {
                let lo = old.log_probs(head, &d.features);
                let kl: f64 = lp.iter().zip(&lo).map(|(p, q)| p.exp() * (p - q)).sum();
                let dkl: Vec<f64> = lp
                    .iter()
                    .zip(&lo)
                    .map(|(p, q)| p.exp() * (p - q - kl))
                    .collect();
                let w = match cfg.norm {
                    LogProbNorm::PerTokenMean => 1.0 / total,
                    LogProbNorm::SequenceSum => 1.0 / n,
                };
                objective -= cfg.kl * w * kl;
                scatter(&mut grad, policy, d, &dkl, -cfg.kl * w);
                kl_sum += kl;
                kl_n += 1;
            }
        }

        match cfg.norm {
            LogProbNorm::PerTokenMean => {
                let w = 1.0 / total;
                for ((d, dz), delta) in tr.decisions.iter().zip(&dlogp).zip(&logp_delta) {
                    let ratio = delta.exp();
                    let (v, dv, c) = clipped(ratio, tr.advantage, cfg.clip);
                    objective += w * v;
                    ratio_n += 1;
                    clipped_n += c as usize;
                    scatter(&mut grad, policy, d, dz, w * dv * ratio);
                }
            }
            LogProbNorm::SequenceSum => {
                let ratio = logp_delta.iter().sum::<f64>().exp();
                let (v, dv, c) = clipped(ratio, tr.advantage, cfg.clip);
                objective += v / n;
                ratio_n += 1;
                clipped_n += c as usize;
                for (d, dz) in tr.decisions.iter().zip(&dlogp) {
                    scatter(&mut grad, policy, d, dz, dv * ratio / n);
                }
            }
        }
    }

    Surrogate {
        objective,
        grad,
        clip_fraction: if ratio_n == 0 { 0.0 } else { clipped_n as f64 / ratio_n as f64 },
        mean_kl: if kl_n == 0 { 0.0 } else { kl_sum / kl_n as f64 },
    }
}
