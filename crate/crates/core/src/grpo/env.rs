//! Synthetic grounding environment for the toy policy.
//!
//! Eight tasks share four instructions in pairs. The two tasks of a pair
//! differ only in a hidden key token and in their target box, so the answer
//! heads, which see the instruction and the tokens already emitted but not
//! the task itself, can only resolve the pair when an earlier rationale
//! mentions the key token. Rationale token heads do see the task, standing
//! in for the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{HeadSpec, ToyPolicy};
use super::surrogate::Decision;
use crate::geometry::{BoundingBox, GeometricAnswer, ImageSize};
use crate::parser::{render_answer, ParseError, SectionKind, SectionOrder, StructuredResponse};

pub const GRID: u32 = 64;
pub const BINS: usize = 8;
const BIN_PX: f64 = GRID as f64 / BINS as f64;
pub const MAX_CONCISE: usize = 40;
pub const MAX_DETAILED: usize = 80;

pub const VOCAB: [&str; 24] = [
    // key tokens, one per task
    "left", "right", "top", "bottom", "red", "blue", "large", "small",
    // objects
    "mug", "cup", "dog", "cat", "car", "bike", "lamp", "book",
    // filler
    "the", "a", "of", "is", "there", "which", "near", "image",
];
const OBJECTS: usize = 8;
const TASKS: usize = 8;
const INSTRUCTIONS: usize = 4;

pub const HEAD_STOP_C: usize = 0;
pub const HEAD_TOKEN_C: usize = 1;
pub const HEAD_STOP_D: usize = 2;
pub const HEAD_TOKEN_D: usize = 3;
pub const HEAD_X1: usize = 4;
pub const STOP: usize = 1;

pub const F_BIAS: u32 = 0;
pub const F_MODE_TRAIN: u32 = 1;
pub const F_MODE_INFER: u32 = 2;
pub const F_BREVITY: u32 = 3;
pub const F_TASK: u32 = 4;
pub const F_INSTR: u32 = F_TASK + TASKS as u32;
pub const F_POS: u32 = F_INSTR + INSTRUCTIONS as u32;
pub const F_CUR: u32 = F_POS + 8;
pub const F_PRIOR: u32 = F_CUR + VOCAB.len() as u32;
pub const F_D_PRESENT: u32 = F_PRIOR + VOCAB.len() as u32;
pub const F_D_LEN: u32 = F_D_PRESENT + 1;
pub const F_C_PRESENT: u32 = F_D_LEN + 4;
pub const F_A_PRESENT: u32 = F_C_PRESENT + 1;
pub const FEATURES: usize = F_A_PRESENT as usize + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub id: usize,
    pub instruction: usize,
    pub key_token: usize,
    /// Tokens a good rationale for this task talks about.
    pub relevant: Vec<usize>,
    pub bins: [usize; 4],
    pub gt: GeometricAnswer,
}

impl ToyTask {
    pub fn image(&self) -> ImageSize {
        ImageSize { width: GRID, height: GRID }
    }
}

fn bins_to_answer(bins: [usize; 4]) -> GeometricAnswer {
    let lo = |b: usize| b as f64 * BIN_PX;
    let hi = |b: usize| (b + 1) as f64 * BIN_PX;
    let bbox = BoundingBox::new(lo(bins[0]), lo(bins[1]), hi(bins[2]), hi(bins[3]))
        .expect("bin coordinates are finite");
    GeometricAnswer::from_box(bbox)
}

/// The fixed task set. Paired boxes overlap by less than half.
pub fn toy_tasks() -> Vec<ToyTask> {
    let boxes: [[usize; 4]; TASKS] = [
        [0, 2, 2, 5],
        [5, 2, 7, 5],
        [2, 0, 5, 2],
        [2, 5, 5, 7],
        [0, 0, 3, 3],
        [4, 4, 7, 7],
        [1, 1, 6, 6],
        [3, 3, 4, 4],
    ];
    (0..TASKS)
        .map(|t| {
            let instruction = t / 2;
            ToyTask {
                id: t,
                instruction,
                key_token: t,
                relevant: vec![t, OBJECTS + instruction, OBJECTS + instruction + 4],
                bins: boxes[t],
                gt: bins_to_answer(boxes[t]),
            }
        })
        .collect()
}

pub fn policy_heads() -> Vec<HeadSpec> {
    let mut heads = vec![
        HeadSpec { name: "stop_c".into(), actions: 2 },
        HeadSpec { name: "token_c".into(), actions: VOCAB.len() },
        HeadSpec { name: "stop_d".into(), actions: 2 },
        HeadSpec { name: "token_d".into(), actions: VOCAB.len() },
    ];
    for c in ["x1", "y1", "x2", "y2"] {
        heads.push(HeadSpec { name: c.into(), actions: BINS });
    }
    heads
}

/// A policy with the behaviour of an instruction-tuned starting point:
/// rationales lean towards relevant tokens, the detailed rationale echoes
/// earlier mentions, the answer heads read key tokens, and a brevity
/// request nudges the concise rationale to stop.
pub fn pretrained_policy(tasks: &[ToyTask], seed: u64) -> ToyPolicy {
    let mut p = ToyPolicy::zeros(policy_heads(), FEATURES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f1a_57);
    for v in p.params_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    // Filler is cheap and attributes the task does not have are rare.
    for head in [HEAD_TOKEN_C, HEAD_TOKEN_D] {
        for v in 0..VOCAB.len() {
            let w = if v < OBJECTS { -2.0 } else if v >= 2 * OBJECTS { 1.0 } else { 0.0 };
            p.add(head, F_BIAS as usize, v, w);
        }
    }
    // geometric lengths with means of about 12 and 25 tokens
    p.add(HEAD_STOP_C, F_BIAS as usize, STOP, -(11.0f64).ln());
    p.add(HEAD_STOP_D, F_BIAS as usize, STOP, -(24.0f64).ln());
    p.add(HEAD_STOP_C, F_BREVITY as usize, STOP, 1.0);
    for v in 0..VOCAB.len() {
        p.add(HEAD_TOKEN_D, (F_PRIOR as usize) + v, v, 1.5);
    }
    for t in tasks {
        for &v in &t.relevant {
            // lifts the task's own key from -2 to +1
            let w = if v == t.key_token { 3.0 } else { 1.0 };
            p.add(HEAD_TOKEN_C, F_TASK as usize + t.id, v, w);
            p.add(HEAD_TOKEN_D, F_TASK as usize + t.id, v, w);
        }
        for (c, &b) in t.bins.iter().enumerate() {
            p.add(HEAD_X1 + c, F_PRIOR as usize + t.key_token, b, 3.0);
            p.add(HEAD_X1 + c, F_INSTR as usize + t.instruction, b, 1.0);
        }
    }
    p
}

fn pos_bucket(pos: usize) -> u32 {
    debug_assert!(pos >= 1);
    (usize::BITS - (pos - 1).leading_zeros()).min(7)
}

fn len_bucket(len: usize) -> u32 {
    match len {
        0..=9 => 0,
        10..=19 => 1,
        20..=39 => 2,
        _ => 3,
    }
}

fn push_mask(out: &mut Vec<u32>, base: u32, mask: u32) {
    let mut m = mask;
    while m != 0 {
        let v = m.trailing_zeros();
        out.push(base + v);
        m &= m - 1;
    }
}

/// What a head can see while generating.
#[derive(Debug, Clone, Copy)]
struct Context<'a> {
    task: &'a ToyTask,
    train_mode: bool,
    brevity: bool,
    /// Tokens emitted in earlier sections.
    prior: u32,
    /// Number of tokens generated before the current section.
    offset: usize,
    detailed_len: Option<usize>,
    concise_done: bool,
    answer_done: bool,
}

impl Context<'_> {
    fn mode(&self) -> u32 {
        if self.train_mode {
            F_MODE_TRAIN
        } else {
            F_MODE_INFER
        }
    }

    fn token_features(&self) -> Vec<u32> {
        let mut f = vec![F_BIAS, self.mode(), F_TASK + self.task.id as u32];
        f.push(F_INSTR + self.task.instruction as u32);
        push_mask(&mut f, F_PRIOR, self.prior);
        f
    }

    fn stop_features(&self, pos: usize, current: u32) -> Vec<u32> {
        let mut f = vec![F_BIAS, self.mode()];
        if self.brevity {
            f.push(F_BREVITY);
        }
        f.push(F_INSTR + self.task.instruction as u32);
        f.push(F_POS + pos_bucket(self.offset + pos));
        push_mask(&mut f, F_CUR, current);
        push_mask(&mut f, F_PRIOR, self.prior);
        if let Some(n) = self.detailed_len {
            f.push(F_D_PRESENT);
            f.push(F_D_LEN + len_bucket(n));
        }
        if self.concise_done {
            f.push(F_C_PRESENT);
        }
        if self.answer_done {
            f.push(F_A_PRESENT);
        }
        f
    }

    fn answer_features(&self) -> Vec<u32> {
        let mut f = vec![F_BIAS, F_INSTR + self.task.instruction as u32];
        push_mask(&mut f, F_PRIOR, self.prior);
        f
    }
}

/// A generated response before rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub order: SectionOrder,
    pub concise: Option<Vec<usize>>,
    pub answer_bins: [usize; 4],
    pub detailed: Option<Vec<usize>>,
    pub decisions: Vec<Decision>,
}

impl Sample {
    pub fn answer(&self) -> GeometricAnswer {
        bins_to_answer(self.answer_bins)
    }

    pub fn render(&self) -> Result<StructuredResponse, ParseError> {
        let words = |t: &Vec<usize>| t.iter().map(|&v| VOCAB[v]).collect::<Vec<_>>().join(" ");
        let concise = self.concise.as_ref().map(words);
        let detailed = self.detailed.as_ref().map(words);
        StructuredResponse::compose(
            &self.order,
            concise.as_deref(),
            &render_answer(&self.answer()),
            detailed.as_deref(),
        )
    }
}

fn mask_of(tokens: &[usize]) -> u32 {
    tokens.iter().fold(0, |m, &v| m | 1 << v)
}

#[allow(clippy::too_many_arguments)]
fn section<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    ctx: &Context,
    stop_head: usize,
    token_head: usize,
    cap: usize,
    rng: &mut R,
    out: &mut Vec<Decision>,
) -> Vec<usize> {
    let token_f = ctx.token_features();
    let mut tokens = Vec::new();
    let mut current = 0u32;
    while tokens.len() < cap {
        if !tokens.is_empty() {
            let f = ctx.stop_features(tokens.len(), current);
            let (a, lp) = policy.sample(stop_head, &f, rng);
            out.push(Decision { head: stop_head as u16, features: f, action: a as u16, old_logp: lp });
            if a == STOP {
                break;
            }
        }
        let (v, lp) = policy.sample(token_head, &token_f, rng);
        out.push(Decision {
            head: token_head as u16,
            features: token_f.clone(),
            action: v as u16,
            old_logp: lp,
        });
        tokens.push(v);
        current |= 1 << v;
    }
    tokens
}

/// Generates the sections of `order` in sequence. The prompt asks for a
/// detailed rationale exactly when the order contains one. A forced concise
/// rationale is inserted verbatim and contributes no decisions.
pub fn generate<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    task: &ToyTask,
    order: &SectionOrder,
    brevity: bool,
    forced_concise: Option<&[usize]>,
    rng: &mut R,
) -> Sample {
    let mut ctx = Context {
        task,
        train_mode: order.contains(SectionKind::Detailed),
        brevity,
        prior: 0,
        offset: 0,
        detailed_len: None,
        concise_done: false,
        answer_done: false,
    };
    let mut decisions = Vec::new();
    let mut concise = None;
    let mut detailed = None;
    let mut answer_bins = [0; 4];
    for &kind in order.kinds() {
        match kind {
            SectionKind::Concise => {
                let toks = match forced_concise {
                    Some(f) => f.to_vec(),
                    None => section(policy, &ctx, HEAD_STOP_C, HEAD_TOKEN_C, MAX_CONCISE, rng, &mut decisions),
                };
                ctx.prior |= mask_of(&toks);
                ctx.offset += toks.len();
                ctx.concise_done = true;
                concise = Some(toks);
            }
            SectionKind::Detailed => {
                let toks = section(policy, &ctx, HEAD_STOP_D, HEAD_TOKEN_D, MAX_DETAILED, rng, &mut decisions);
                ctx.prior |= mask_of(&toks);
                ctx.offset += toks.len();
                ctx.detailed_len = Some(toks.len());
                detailed = Some(toks);
            }
            SectionKind::Answer => {
                let f = ctx.answer_features();
                for (c, bin) in answer_bins.iter_mut().enumerate() {
                    let (b, lp) = policy.sample(HEAD_X1 + c, &f, rng);
                    decisions.push(Decision {
                        head: (HEAD_X1 + c) as u16,
                        features: f.clone(),
                        action: b as u16,
                        old_logp: lp,
                    });
                    *bin = b;
                }
                ctx.offset += answer_bins.len();
                ctx.answer_done = true;
            }
        }
    }
    Sample {
        order: order.clone(),
        concise,
        answer_bins,
        detailed,
        decisions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_iou;
    use crate::parser::parse;

    #[test]
    fn tasks_are_well_formed() {
        let tasks = toy_tasks();
        for t in &tasks {
            let b = t.gt.bbox;
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= GRID as f64 && b.y2 <= GRID as f64);
            assert!(b.area() > 0.0);
        }
        for pair in tasks.chunks(2) {
            assert_eq!(pair[0].instruction, pair[1].instruction);
            assert!(box_iou(&pair[0].gt.bbox, &pair[1].gt.bbox).unwrap() < 0.5);
        }
    }

    #[test]
    fn feature_indices_are_disjoint_and_bounded() {
        assert_eq!(pos_bucket(1), 0);
        assert_eq!(pos_bucket(2), 1);
        assert_eq!(pos_bucket(3), 2);
        assert_eq!(pos_bucket(200), 7);
        assert!(F_A_PRESENT < FEATURES as u32);
    }

    #[test]
    fn samples_render_and_parse() {
        let tasks = toy_tasks();
        let p = pretrained_policy(&tasks, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for code in ["cAd", "Acd", "dcA", "cdA", "cA"] {
            let order: SectionOrder = code.parse().unwrap();
            let s = generate(&p, &tasks[1], &order, false, None, &mut rng);
            let r = s.render().unwrap();
            let back = parse(&r.raw);
            assert_eq!(back.order, order.kinds());
            assert!(back.diagnostics.is_empty(), "{:?}", back.diagnostics);
            assert_eq!(back.answer, Some(s.answer()));
            let c = s.concise.as_ref().unwrap();
            assert!(!c.is_empty() && c.len() <= MAX_CONCISE);
        }
    }

    #[test]
    fn decisions_replay_to_their_log_probs() {
        let tasks = toy_tasks();
        let p = pretrained_policy(&tasks, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = generate(&p, &tasks[4], &SectionOrder::training(), true, None, &mut rng);
        for d in &s.decisions {
            let lp = p.log_prob(d.head as usize, &d.features, d.action as usize);
            assert_eq!(lp, d.old_logp);
        }
    }
}
