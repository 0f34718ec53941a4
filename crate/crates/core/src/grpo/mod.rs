//! Group-relative policy optimization on the synthetic grounding task.
//!
//! Each step samples a group of responses per task, scores them with the
//! reward engine, standardizes rewards within the group and takes one
//! clipped-surrogate ascent step (more with `epochs > 1`).

pub mod env;
pub mod policy;
pub mod surrogate;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use env::{generate, pretrained_policy, toy_tasks, Sample, ToyTask};
pub use policy::{HeadSpec, ToyPolicy};
pub use surrogate::{surrogate, Decision, LogProbNorm, Surrogate, SurrogateConfig, Trajectory};

use crate::parser::{SectionKind, SectionOrder, StructuredResponse};
use crate::reward::{RewardBreakdown, RewardConfig, RewardEngine, RewardError};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("non-finite gradient at step {step}; offending group: {dump}")]
    NonFiniteGradient { step: usize, dump: String },
    #[error("advantage invariant violated at step {step}, group {group}: {detail}")]
    AdvantageInvariant {
        step: usize,
        group: usize,
        detail: String,
    },
    #[error("run log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrevitySchedule {
    Never,
    Always,
    /// Each group gets the brevity request with probability
    /// `brevity_fraction`.
    #[default]
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain gradient ascent.
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub clip: f64,
    pub kl: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Section order of training rollouts. Evaluation drops the detailed
    /// rationale from it.
    pub order: SectionOrder,
    pub tasks_per_step: usize,
    pub epochs: usize,
    pub logprob_norm: LogProbNorm,
    pub brevity: BrevitySchedule,
    pub brevity_fraction: f64,
    /// Final evaluation samples per task.
    pub eval_samples: usize,
    pub adv_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            clip: 0.2,
            kl: 0.0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            steps: 500,
            seed: 0,
            order: SectionOrder::training(),
            tasks_per_step: 8,
            epochs: 1,
            logprob_norm: LogProbNorm::PerTokenMean,
            brevity: BrevitySchedule::Mixed,
            brevity_fraction: 0.5,
            eval_samples: 128,
            adv_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad("clip must be positive");
        }
        if !(self.kl >= 0.0 && self.kl.is_finite()) {
            return bad("kl must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.tasks_per_step == 0 {
            return bad("tasks_per_step must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.brevity_fraction) {
            return bad("brevity_fraction must be in [0, 1]");
        }
        if !(self.adv_eps > 0.0) {
            return bad("adv_eps must be positive");
        }
        Ok(())
    }

    fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig {
            clip: self.clip,
            kl: self.kl,
            norm: self.logprob_norm,
        }
    }
}

/// `(r - mean) / max(std, eps)` with the population standard deviation.
/// A group of identical rewards gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let (mean, std) = mean_std(rewards);
    let scale = std.max(eps);
    rewards.iter().map(|r| (r - mean) / scale).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// splitmix64 over the parts, for per-rollout seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const TAG_ROLLOUT: u64 = 1;
const TAG_BREVITY: u64 = 2;
const TAG_EVAL: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub task: usize,
    pub brevity: bool,
    pub samples: Vec<Sample>,
    pub responses: Vec<StructuredResponse>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    pub fn trajectories(&self) -> impl Iterator<Item = Trajectory> + '_ {
        self.samples
            .iter()
            .zip(&self.advantages)
            .map(|(s, &a)| Trajectory {
                decisions: s.decisions.clone(),
                advantage: a,
            })
    }
}

fn score(
    engine: &RewardEngine,
    task: &ToyTask,
    sample: &Sample,
    required: &SectionOrder,
) -> (StructuredResponse, RewardBreakdown) {
    // Rendering toy tokens cannot produce tags, so compose only fails on a
    // broken order, which scores like any malformed rollout.
    let resp = sample
        .render()
        .unwrap_or_else(|_| crate::parser::parse(""));
    let b = engine.total_reward(&resp, &task.gt, Some(task.image()), required);
    (resp, b)
}

/// Samples `group_size` responses for one task in the configured order and
/// scores them. Rollout `i` draws from its own stream seeded by
/// `(seed, i)`.
pub fn rollout_group(
    policy: &ToyPolicy,
    task: &ToyTask,
    cfg: &TrainConfig,
    engine: &RewardEngine,
    brevity: bool,
    seed: u64,
) -> GroupRollout {
    let scored: Vec<(Sample, StructuredResponse, RewardBreakdown)> = (0..cfg.group_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
            let s = generate(policy, task, &cfg.order, brevity, None, &mut rng);
            let (resp, b) = score(engine, task, &s, &cfg.order);
            (s, resp, b)
        })
        .collect();
    let rewards: Vec<f64> = scored.iter().map(|(_, _, b)| b.r_train).collect();
    let advantages = compute_advantages(&rewards, cfg.adv_eps);
    let mut samples = Vec::with_capacity(scored.len());
    let mut responses = Vec::with_capacity(scored.len());
    let mut breakdowns = Vec::with_capacity(scored.len());
    for (s, r, b) in scored {
        samples.push(s);
        responses.push(r);
        breakdowns.push(b);
    }
    GroupRollout {
        task: task.id,
        brevity,
        samples,
        responses,
        rewards: breakdowns,
        advantages,
    }
}

/// Gradient ascent, plain or with Adam moments.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: usize, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params, lr)),
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += *lr * g;
                }
            }
            Optimizer::Adam(a) => a.ascend(params, grad),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            if *m != 0.0 {
                *p += self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepUpdate {
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

fn dump_group(g: &GroupRollout) -> String {
    let raws: Vec<&str> = g.responses.iter().map(|r| r.raw.as_str()).collect();
    serde_json::json!({
        "task": g.task,
        "brevity": g.brevity,
        "responses": raws,
        "r_train": g.rewards.iter().map(|b| b.r_train).collect::<Vec<_>>(),
        "advantages": g.advantages,
    })
    .to_string()
}

/// One optimizer update from a batch sampled by the current policy.
pub fn grpo_step(
    policy: &mut ToyPolicy,
    opt: &mut Optimizer,
    batch: &[GroupRollout],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepUpdate, GrpoError> {
    let old = policy.clone();
    let trajs: Vec<Trajectory> = batch.iter().flat_map(|g| g.trajectories()).collect();
    let scfg = cfg.surrogate_config();
    let mut clip = 0.0;
    let mut kl = 0.0;
    for _ in 0..cfg.epochs {
        let s = surrogate(policy, &old, &trajs, &scfg);
        if !s.grad.iter().all(|g| g.is_finite()) {
            let offending = batch
                .iter()
                .find(|g| {
                    let t: Vec<Trajectory> = g.trajectories().collect();
                    !surrogate(policy, &old, &t, &scfg).grad.iter().all(|v| v.is_finite())
                })
                .or(batch.first());
            return Err(GrpoError::NonFiniteGradient {
                step,
                dump: offending.map(dump_group).unwrap_or_default(),
            });
        }
        opt.ascend(policy.params_mut(), &s.grad);
        clip += s.clip_fraction;
        kl += s.mean_kl;
    }
    if !policy.is_finite() {
        return Err(GrpoError::NonFiniteGradient {
            step,
            dump: batch.first().map(dump_group).unwrap_or_default(),
        });
    }
    Ok(StepUpdate {
        clip_fraction: clip / cfg.epochs as f64,
        mean_kl: kl / cfg.epochs as f64,
    })
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mean_r_task: f64,
    pub mean_r_train: f64,
    pub mean_len_c: f64,
    pub mean_len_d: f64,
    pub success_rate: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub samples: usize,
    pub mean_len_c: f64,
    pub mean_len_d: f64,
    pub success_rate: f64,
    pub mean_r_task: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    /// Training order and prompt, brevity off.
    pub training: EvalStats,
    /// Detailed rationale dropped, brevity off.
    pub inference: EvalStats,
    /// Detailed rationale dropped, brevity on.
    pub inference_brevity: EvalStats,
}

/// Worst advantage-normalization error seen over the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageAudit {
    pub groups: usize,
    pub zero_variance_groups: usize,
    pub max_abs_mean: f64,
    pub max_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepStats>,
    pub final_eval: FinalEval,
    pub advantages: AdvantageAudit,
}

impl RunReport {
    pub fn write_run_log(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, s)?;
            f.write_all(b"\n")?;
        }
        f.flush()
    }
}

fn summarize<'a>(
    step: usize,
    breakdowns: impl Iterator<Item = &'a RewardBreakdown>,
    update: StepUpdate,
) -> StepStats {
    let mut n = 0.0;
    let (mut rt, mut rr, mut lc, mut ld, mut ok) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for b in breakdowns {
        n += 1.0;
        rt += b.r_task;
        rr += b.r_train;
        lc += b.len_concise as f64;
        ld += b.len_detailed as f64;
        ok += b.iou_binary as f64;
    }
    StepStats {
        step,
        mean_r_task: rt / n,
        mean_r_train: rr / n,
        mean_len_c: lc / n,
        mean_len_d: ld / n,
        success_rate: ok / n,
        clip_fraction: update.clip_fraction,
    }
}

/// Samples `per_task` responses per task from `policy` in `order`.
pub fn evaluate(
    policy: &ToyPolicy,
    tasks: &[ToyTask],
    order: &SectionOrder,
    brevity: bool,
    per_task: usize,
    engine: &RewardEngine,
    seed: u64,
) -> EvalStats {
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..per_task).map(move |i| (t, i)))
        .collect();
    let scored: Vec<RewardBreakdown> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_EVAL, t as u64, i as u64]));
            let s = generate(policy, &tasks[t], order, brevity, None, &mut rng);
            score(engine, &tasks[t], &s, order).1
        })
        .collect();
    let st = summarize(0, scored.iter(), StepUpdate { clip_fraction: 0.0, mean_kl: 0.0 });
    EvalStats {
        samples: scored.len(),
        mean_len_c: st.mean_len_c,
        mean_len_d: st.mean_len_d,
        success_rate: st.success_rate,
        mean_r_task: st.mean_r_task,
    }
}

fn audit(
    audit: &mut AdvantageAudit,
    g: &GroupRollout,
    eps: f64,
    step: usize,
    group: usize,
) -> Result<(), GrpoError> {
    let rewards: Vec<f64> = g.rewards.iter().map(|b| b.r_train).collect();
    let (_, rstd) = mean_std(&rewards);
    audit.groups += 1;
    let fail = |detail: String| GrpoError::AdvantageInvariant { step, group, detail };
    if rstd > eps {
        let (m, s) = mean_std(&g.advantages);
        audit.max_abs_mean = audit.max_abs_mean.max(m.abs());
        audit.max_std_error = audit.max_std_error.max((s - 1.0).abs());
        if m.abs() > 1e-9 || (s - 1.0).abs() > 1e-9 {
            return Err(fail(format!("mean {m:e}, std {s}")));
        }
    } else {
        audit.zero_variance_groups += 1;
        if rewards.iter().all(|r| *r == rewards[0]) && g.advantages.iter().any(|a| *a != 0.0) {
            return Err(fail("identical rewards with nonzero advantages".into()));
        }
    }
    Ok(())
}

/// Trains the pretrained toy policy and evaluates it. Deterministic for a
/// fixed configuration regardless of thread count.
pub fn run_experiment(cfg: &TrainConfig, reward: &RewardConfig) -> Result<RunReport, GrpoError> {
    run_experiment_with(cfg, reward, |_| {})
}

/// [`run_experiment`] with a callback after every step.
pub fn run_experiment_with(
    cfg: &TrainConfig,
    reward: &RewardConfig,
    mut on_step: impl FnMut(&StepStats),
) -> Result<RunReport, GrpoError> {
    cfg.validate()?;
    if !cfg.order.contains(SectionKind::Concise) {
        return Err(GrpoError::InvalidConfig("order must contain a concise rationale".into()));
    }
    let engine = RewardEngine::from_config(reward.clone())?;
    let tasks = toy_tasks();
    let mut policy = pretrained_policy(&tasks, cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, policy.params().len(), cfg.learning_rate);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut adv = AdvantageAudit {
        groups: 0,
        zero_variance_groups: 0,
        max_abs_mean: 0.0,
        max_std_error: 0.0,
    };

    for step in 0..cfg.steps {
        let plan: Vec<(usize, bool)> = (0..cfg.tasks_per_step)
            .map(|g| {
                let task = (step * cfg.tasks_per_step + g) % tasks.len();
                let brevity = match cfg.brevity {
                    BrevitySchedule::Never => false,
                    BrevitySchedule::Always => true,
                    BrevitySchedule::Mixed => {
                        let mut r = ChaCha8Rng::seed_from_u64(mix_seed(&[
                            cfg.seed,
                            TAG_BREVITY,
                            step as u64,
                            g as u64,
                        ]));
                        r.random::<f64>() < cfg.brevity_fraction
                    }
                };
                (task, brevity)
            })
            .collect();
        let batch: Vec<GroupRollout> = plan
            .par_iter()
            .enumerate()
            .map(|(g, &(task, brevity))| {
                let seed = mix_seed(&[cfg.seed, TAG_ROLLOUT, step as u64, g as u64]);
                rollout_group(&policy, &tasks[task], cfg, &engine, brevity, seed)
            })
            .collect();
        for (g, group) in batch.iter().enumerate() {
            audit(&mut adv, group, cfg.adv_eps, step, g)?;
        }
        let update = grpo_step(&mut policy, &mut opt, &batch, cfg, step)?;
        let stats = summarize(step, batch.iter().flat_map(|g| &g.rewards), update);
        on_step(&stats);
        steps.push(stats);
    }

    let infer_order = cfg
        .order
        .without(SectionKind::Detailed)
        .map_err(|e| GrpoError::InvalidConfig(e.to_string()))?;
    let n = cfg.eval_samples;
    let final_eval = FinalEval {
        training: evaluate(&policy, &tasks, &cfg.order, false, n, &engine, cfg.seed),
        inference: evaluate(&policy, &tasks, &infer_order, false, n, &engine, cfg.seed),
        inference_brevity: evaluate(&policy, &tasks, &infer_order, true, n, &engine, cfg.seed),
    };
    Ok(RunReport {
        steps,
        final_eval,
        advantages: adv,
    })
}
