//! Group-relative policy optimization with a spatial-consistency weight.
//!
//! For every query, `G` rollouts are sampled and scored with the composite reward.
//! Rewards are standardized within the group to give advantages. The group's IoU
//! channel yields `w = clip(exp(lambda_m * (1 - mean) + lambda_v * var), w_min, w_max)`,
//! which multiplies every per-token clipped-surrogate-plus-KL loss of that group.

use crate::geometry::BBox;
use crate::policy::{self, Adam, PolicyError, PolicyParams, Rollout, NUM_TOKENS};
use crate::position_reward::{shaped_reward, KernelParams, RewardError, RewardWeights, Shaping};
use crate::scenes::Scene;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("non-finite importance ratio for rollout {rollout} of query {query}")]
    NonFiniteRatio { query: u64, rollout: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid settings: {field} {reason}")]
    Settings { field: &'static str, reason: String },
    #[error("log-probabilities for {got} rollouts, group has {expected}")]
    Misaligned { expected: usize, got: usize },
}

/// Reward/loss configuration of a training arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// Format + IoU, unweighted loss.
    IouOnly,
    /// Format + IoU + beta * positional, unweighted loss.
    Pos,
    /// Format + IoU + beta * positional, consistency-weighted loss.
    PosSc,
    /// Format + IoU, consistency-weighted loss.
    ScOnly,
    /// Format + IoU + beta * GIoU.
    Giou,
    /// Format + IoU + beta * DIoU.
    Diou,
    /// Format + IoU + beta * center-distance reward.
    Center,
}

impl RewardMode {
    pub const ALL: [RewardMode; 7] = [
        RewardMode::IouOnly,
        RewardMode::Pos,
        RewardMode::PosSc,
        RewardMode::ScOnly,
        RewardMode::Giou,
        RewardMode::Diou,
        RewardMode::Center,
    ];

    pub fn shaping(self) -> Shaping {
        match self {
            RewardMode::IouOnly | RewardMode::ScOnly => Shaping::None,
            RewardMode::Pos | RewardMode::PosSc => Shaping::Positional,
            RewardMode::Giou => Shaping::Giou,
            RewardMode::Diou => Shaping::Diou,
            RewardMode::Center => Shaping::CenterDistance,
        }
    }

    pub fn uses_consistency_weight(self) -> bool {
        matches!(self, RewardMode::PosSc | RewardMode::ScOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardMode::IouOnly => "iou-only",
            RewardMode::Pos => "pos",
            RewardMode::PosSc => "pos-sc",
            RewardMode::ScOnly => "sc-only",
            RewardMode::Giou => "giou",
            RewardMode::Diou => "diou",
            RewardMode::Center => "center",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSettings {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub lambda_m: f64,
    pub lambda_v: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub beta: f64,
    pub alpha: f64,
    /// Groups whose reward std does not exceed this get zero advantages.
    pub adv_eps: f64,
    pub reward_mode: RewardMode,
    pub lr: f64,
    /// Optimizer updates per sampled batch. 1 is on-policy.
    pub inner_epochs: usize,
    pub batch_queries: usize,
    pub temperature: f64,
}

impl Default for GrpoSettings {
    fn default() -> Self {
        GrpoSettings {
            group_size: 8,
            clip_eps: 0.2,
            kl_coeff: 0.04,
            lambda_m: 1.2,
            lambda_v: 1.0,
            w_min: 0.5,
            w_max: 3.0,
            beta: 0.1,
            alpha: 2.5,
            adv_eps: 0.0,
            reward_mode: RewardMode::PosSc,
            lr: 1e-3,
            inner_epochs: 1,
            batch_queries: 16,
            temperature: 1.0,
        }
    }
}

impl GrpoSettings {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |field: &'static str, reason: &str| {
            Err(GrpoError::Settings {
                field,
                reason: reason.to_string(),
            })
        };
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.group_size < 2 {
            return bad("group_size", "must be at least 2");
        }
        if !nonneg(self.clip_eps) {
            return bad("clip_eps", "must be finite and non-negative");
        }
        if !nonneg(self.kl_coeff) {
            return bad("kl_coeff", "must be finite and non-negative");
        }
        if !nonneg(self.lambda_m) {
            return bad("lambda_m", "must be finite and non-negative");
        }
        if !nonneg(self.lambda_v) {
            return bad("lambda_v", "must be finite and non-negative");
        }
        if !(nonneg(self.w_min) && self.w_min <= 1.0) {
            return bad("w_min", "must lie in [0, 1]");
        }
        if !(self.w_max.is_finite() && self.w_max >= 1.0) {
            return bad("w_max", "must be finite and at least 1");
        }
        if !nonneg(self.beta) {
            return bad("beta", "must be finite and non-negative");
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha", "must be positive");
        }
        if !nonneg(self.adv_eps) {
            return bad("adv_eps", "must be finite and non-negative");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", "must be finite and non-negative");
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs", "must be at least 1");
        }
        if self.batch_queries == 0 {
            return bad("batch_queries", "must be at least 1");
        }
        if !nonneg(self.temperature) || self.temperature == 0.0 {
            return bad("temperature", "must be positive");
        }
        Ok(())
    }

    pub fn reward_weights(&self) -> RewardWeights {
        RewardWeights {
            beta: self.beta,
            format_weight: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Group statistics
// ---------------------------------------------------------------------------

/// Population mean and variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Standardize rewards within a group: `(r - mean) / std` with population std.
///
/// Groups whose rewards are all identical, or whose std is at most `adv_eps`,
/// get all-zero advantages. Deviations are re-centred once so the advantages
/// sum to zero to rounding even when the rewards share a large common offset.
pub fn group_advantages(rewards: &[f64], adv_eps: f64) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let mut dev: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let residual = dev.iter().sum::<f64>() / n as f64;
    for d in &mut dev {
        *d -= residual;
    }
    let std = (dev.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    if std.is_nan() || std <= adv_eps {
        return vec![0.0; n];
    }
    dev.iter().map(|d| d / std).collect()
}

/// `clip(exp(lambda_m * (1 - mean) + lambda_v * var), w_min, w_max)` over IoU rewards.
pub fn consistency_weight(iou_rewards: &[f64], s: &GrpoSettings) -> f64 {
    let (m, var) = mean_var(iou_rewards);
    (s.lambda_m * (1.0 - m) + s.lambda_v * var)
        .exp()
        .clamp(s.w_min, s.w_max)
}

/// One query's rollouts with their rewards and group statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub query_id: u64,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub mean_iou: f64,
    pub var_iou: f64,
    pub advantages: Vec<f64>,
    pub sc_weight: f64,
}

impl GroupBatch {
    /// Build group statistics from already-scored rollouts.
    pub fn from_scored(query_id: u64, rollouts: Vec<Rollout>, s: &GrpoSettings) -> GroupBatch {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.rewards.total).collect();
        let ious: Vec<f64> = rollouts.iter().map(|r| r.rewards.iou).collect();
        let (reward_mean, reward_var) = mean_var(&rewards);
        let (mean_iou, var_iou) = mean_var(&ious);
        let sc_weight = if s.reward_mode.uses_consistency_weight() {
            consistency_weight(&ious, s)
        } else {
            1.0
        };
        GroupBatch {
            query_id,
            advantages: group_advantages(&rewards, s.adv_eps),
            rollouts,
            rewards,
            reward_mean,
            reward_std: reward_var.sqrt(),
            mean_iou,
            var_iou,
            sc_weight,
        }
    }
}

/// A box is well formed for the toy policy when it decodes to a valid in-image box.
pub fn rollout_format_ok(r: &Rollout, image_w: f64, image_h: f64) -> bool {
    !r.degenerate && r.decoded_box.is_valid() && r.decoded_box.is_within(image_w, image_h)
}

pub fn score_rollouts(rollouts: &mut [Rollout], kernel: &KernelParams, s: &GrpoSettings) {
    let weights = s.reward_weights();
    for r in rollouts {
        let ok = rollout_format_ok(r, kernel.image_w, kernel.image_h);
        r.rewards = shaped_reward(r.prediction(), ok, &weights, kernel, s.reward_mode.shaping());
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLoss {
    /// `w * mean over tokens and rollouts of (surrogate + kl_coeff * kl)`.
    pub loss: f64,
    pub surrogate: Vec<[f64; NUM_TOKENS]>,
    pub kl: Vec<[f64; NUM_TOKENS]>,
    pub ratios: Vec<[f64; NUM_TOKENS]>,
    /// d loss / d new log-probability, per token.
    pub dloss_dlogp: Vec<[f64; NUM_TOKENS]>,
    pub clipped_fraction: f64,
}

/// Clipped-surrogate plus KL loss of one group, scaled by its consistency weight.
pub fn grpo_token_loss(
    group: &GroupBatch,
    new_logprobs: &[[f64; NUM_TOKENS]],
    ref_logprobs: &[[f64; NUM_TOKENS]],
    s: &GrpoSettings,
) -> Result<TokenLoss, GrpoError> {
    let g = group.rollouts.len();
    for got in [new_logprobs.len(), ref_logprobs.len(), group.advantages.len()] {
        if got != g {
            return Err(GrpoError::Misaligned { expected: g, got });
        }
    }
    let n_tokens = (g * NUM_TOKENS) as f64;
    let w = group.sc_weight;
    let mut out = TokenLoss {
        loss: 0.0,
        surrogate: vec![[0.0; NUM_TOKENS]; g],
        kl: vec![[0.0; NUM_TOKENS]; g],
        ratios: vec![[0.0; NUM_TOKENS]; g],
        dloss_dlogp: vec![[0.0; NUM_TOKENS]; g],
        clipped_fraction: 0.0,
    };
    let mut clipped = 0usize;
    let mut total = 0.0;
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let adv = group.advantages[i];
        for t in 0..NUM_TOKENS {
            let new = new_logprobs[i][t];
            let ratio = (new - rollout.old_logprobs[t]).exp();
            if !ratio.is_finite() {
                return Err(GrpoError::NonFiniteRatio {
                    query: group.query_id,
                    rollout: i,
                });
            }
            let clamped = ratio.clamp(1.0 - s.clip_eps, 1.0 + s.clip_eps);
            let unclipped_obj = ratio * adv;
            let clipped_obj = clamped * adv;
            let (surrogate, dsurr) = if unclipped_obj <= clipped_obj {
                (-unclipped_obj, -unclipped_obj)
            } else {
                clipped += 1;
                (-clipped_obj, 0.0)
            };
            let diff = ref_logprobs[i][t] - new;
            let kl = diff.exp() - diff - 1.0;
            let dkl = 1.0 - diff.exp();

            total += surrogate + s.kl_coeff * kl;
            out.surrogate[i][t] = surrogate;
            out.kl[i][t] = kl;
            out.ratios[i][t] = ratio;
            out.dloss_dlogp[i][t] = w * (dsurr + s.kl_coeff * dkl) / n_tokens;
        }
    }
    out.loss = w * total / n_tokens;
    out.clipped_fraction = clipped as f64 / n_tokens;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// A scene prepared for training: features plus the reward kernel of its target.
#[derive(Debug, Clone)]
pub struct Query {
    pub id: u64,
    pub features: Vec<f64>,
    pub gt: BBox,
    pub kernel: KernelParams,
    pub image_w: f64,
    pub image_h: f64,
}

impl Query {
    pub fn from_scene(scene: &Scene, max_objects: usize, alpha: f64) -> Result<Query, GrpoError> {
        let gt = scene.target_box();
        Ok(Query {
            id: scene.id,
            features: policy::featurize(scene, max_objects).values,
            gt,
            kernel: KernelParams::from_gt(&gt, alpha, scene.image_w, scene.image_h)?,
            image_w: scene.image_w,
            image_h: scene.image_h,
        })
    }
}

/// Per-group statistics kept in memory for invariant checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub query_id: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub mean_iou: f64,
    pub var_iou: f64,
    pub weight: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub mean_iou: f64,
    pub var_iou: f64,
    pub mean_w: f64,
    pub loss: f64,
    pub acc05: f64,
    #[serde(skip)]
    pub groups: Vec<GroupStats>,
}

impl StepLog {
    pub const CSV_HEADER: [&'static str; 8] = [
        "step",
        "mean_reward",
        "reward_std",
        "mean_iou",
        "var_iou",
        "mean_w",
        "loss",
        "acc05",
    ];

    pub fn csv_record(&self) -> [String; 8] {
        [
            self.step.to_string(),
            self.mean_reward.to_string(),
            self.reward_std.to_string(),
            self.mean_iou.to_string(),
            self.var_iou.to_string(),
            self.mean_w.to_string(),
            self.loss.to_string(),
            self.acc05.to_string(),
        ]
    }
}

/// Write step logs as CSV with the header row.
pub fn write_step_logs<W: Write>(out: W, logs: &[StepLog]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(StepLog::CSV_HEADER)?;
    for l in logs {
        w.write_record(l.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_step_logs<R: std::io::Read>(input: R) -> csv::Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
        out.push(StepLog {
            step: rec.get(0).and_then(|v| v.parse().ok()).unwrap_or(0),
            mean_reward: f(1),
            reward_std: f(2),
            mean_iou: f(3),
            var_iou: f(4),
            mean_w: f(5),
            loss: f(6),
            acc05: f(7),
            groups: Vec::new(),
        });
    }
    Ok(out)
}

/// Stateless 64-bit mixer for deriving child seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

struct GroupWork {
    batch: GroupBatch,
    ref_logprobs: Vec<[f64; NUM_TOKENS]>,
    greedy_hit: bool,
}

fn sample_group(
    params: &PolicyParams,
    reference: &PolicyParams,
    q: &Query,
    s: &GrpoSettings,
    seed: u64,
) -> Result<GroupWork, GrpoError> {
    let mut rollouts = policy::sample_rollouts(params, &q.features, s.group_size, seed, s.temperature)?;
    score_rollouts(&mut rollouts, &q.kernel, s);
    let ref_logprobs = rollouts
        .iter()
        .map(|r| policy::token_logprobs(reference, &q.features, &r.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let greedy = policy::greedy(params, &q.features)?;
    let greedy_hit = greedy
        .prediction()
        .is_some_and(|b| crate::geometry::iou(b, &q.gt).unwrap_or(0.0) > 0.5);
    Ok(GroupWork {
        batch: GroupBatch::from_scored(q.id, rollouts, s),
        ref_logprobs,
        greedy_hit,
    })
}

/// Loss of one group under `params` and its gradient with respect to every
/// parameter, each scaled by `scale`.
pub fn group_loss_and_grad(
    params: &PolicyParams,
    features: &[f64],
    batch: &GroupBatch,
    ref_logprobs: &[[f64; NUM_TOKENS]],
    s: &GrpoSettings,
    scale: f64,
) -> Result<(TokenLoss, Vec<f64>), GrpoError> {
    let new_logprobs = batch
        .rollouts
        .iter()
        .map(|r| policy::token_logprobs(params, features, &r.tokens))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = grpo_token_loss(batch, &new_logprobs, ref_logprobs, s)?;
    let items: Vec<_> = batch
        .rollouts
        .iter()
        .zip(&loss.dloss_dlogp)
        .map(|(r, d)| (r.tokens, d.map(|v| v * scale)))
        .collect();
    let mut grad = params.zeros_like();
    policy::accumulate_logprob_grad(params, features, &items, &mut grad)?;
    Ok((loss, grad))
}

fn group_gradient(
    params: &PolicyParams,
    q: &Query,
    work: &GroupWork,
    s: &GrpoSettings,
    n_groups: usize,
) -> Result<(TokenLoss, Vec<f64>), GrpoError> {
    group_loss_and_grad(params, &q.features, &work.batch, &work.ref_logprobs, s, 1.0 / n_groups as f64)
}

/// Sample, score, and apply `inner_epochs` optimizer updates on the mean
/// consistency-weighted loss over `queries`. Work is spread over the rayon pool;
/// each query has its own derived seed and gradients are summed in query order,
/// so results do not depend on the number of workers.
pub fn train_step(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    opt: &mut Adam,
    queries: &[&Query],
    s: &GrpoSettings,
    seed: u64,
    step: u64,
) -> Result<StepLog, GrpoError> {
    s.validate()?;
    let n = queries.len();
    let works: Vec<GroupWork> = {
        let snapshot = &*params;
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| sample_group(snapshot, reference, q, s, derive_seed(&[seed, step, i as u64])))
            .collect::<Result<_, _>>()?
    };

    let mut first_losses = Vec::new();
    for epoch in 0..s.inner_epochs {
        let snapshot = &*params;
        let results: Vec<(TokenLoss, Vec<f64>)> = queries
            .par_iter()
            .zip(works.par_iter())
            .map(|(q, w)| group_gradient(snapshot, q, w, s, n))
            .collect::<Result<_, _>>()?;
        let mut grad = params.zeros_like();
        let mut losses = Vec::with_capacity(n);
        for (loss, g) in results {
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
            losses.push(loss.loss);
        }
        if losses.iter().any(|l| !l.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
            return Err(GrpoError::NonFiniteLoss { step });
        }
        if epoch == 0 {
            first_losses = losses;
        }
        opt.lr = s.lr;
        opt.update(&mut params.data, &grad);
    }

    let groups: Vec<GroupStats> = works
        .iter()
        .zip(&first_losses)
        .map(|(w, &loss)| {
            let (adv_mean, adv_var) = mean_var(&w.batch.advantages);
            GroupStats {
                query_id: w.batch.query_id,
                reward_mean: w.batch.reward_mean,
                reward_std: w.batch.reward_std,
                adv_mean,
                adv_std: adv_var.sqrt(),
                mean_iou: w.batch.mean_iou,
                var_iou: w.batch.var_iou,
                weight: w.batch.sc_weight,
                loss,
            }
        })
        .collect();
    let nf = n.max(1) as f64;
    let avg = |f: fn(&GroupStats) -> f64| groups.iter().map(f).sum::<f64>() / nf;
    Ok(StepLog {
        step,
        mean_reward: avg(|g| g.reward_mean),
        reward_std: avg(|g| g.reward_std),
        mean_iou: avg(|g| g.mean_iou),
        var_iou: avg(|g| g.var_iou),
        mean_w: avg(|g| g.weight),
        loss: avg(|g| g.loss),
        acc05: works.iter().filter(|w| w.greedy_hit).count() as f64 / nf,
        groups,
    })
}

/// Policy, frozen reference, optimizer, and query pool for a training run.
pub struct Trainer {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub opt: Adam,
    pub settings: GrpoSettings,
    pub queries: Vec<Query>,
    pub seed: u64,
    pub step: u64,
}

impl Trainer {
    pub fn new(
        params: PolicyParams,
        settings: GrpoSettings,
        queries: Vec<Query>,
        seed: u64,
    ) -> Result<Self, GrpoError> {
        settings.validate()?;
        if queries.is_empty() {
            return Err(GrpoError::Settings {
                field: "corpus",
                reason: "no training queries".into(),
            });
        }
        let opt = Adam::new(params.len(), settings.lr);
        Ok(Trainer {
            reference: params.clone(),
            params,
            opt,
            settings,
            queries,
            seed,
            step: 0,
        })
    }

    /// Indices of the queries used at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.queries.len();
        let k = self.settings.batch_queries.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, step, u64::MAX]));
        index::sample(&mut rng, n, k).into_vec()
    }

    pub fn step(&mut self) -> Result<StepLog, GrpoError> {
        self.step += 1;
        let idx = self.batch_indices(self.step);
        let batch: Vec<&Query> = idx.iter().map(|&i| &self.queries[i]).collect();
        train_step(
            &mut self.params,
            &self.reference,
            &mut self.opt,
            &batch,
            &self.settings,
            self.seed,
            self.step,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0], 1e-6), vec![0.0; 3]);
        let a = group_advantages(&[1.0, 2.0, 3.0], 0.0);
        let k = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + k).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - k).abs() < 1e-12);
        assert!((k - 1.2247).abs() < 1e-4);
        let shifted = group_advantages(&[101.0, 102.0, 103.0], 0.0);
        for (x, y) in a.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_are_standardized_for_tiny_spreads() {
        let rewards = [1.0 + 3e-9, 1.0, 1.0 + 1e-9, 1.0 - 2e-9];
        let a = group_advantages(&rewards, 0.0);
        let (m, v) = mean_var(&a);
        assert!(m.abs() < 1e-9, "{m}");
        assert!((v.sqrt() - 1.0).abs() < 1e-6, "{}", v.sqrt());
        assert_eq!(group_advantages(&rewards, 1e-6), vec![0.0; 4]);
    }

    #[test]
    fn weight_examples() {
        let s = GrpoSettings::default();
        assert_eq!(consistency_weight(&[1.0; 8], &s), 1.0);
        assert_eq!(consistency_weight(&[0.0; 4], &s), 3.0);
        assert!(((1.2f64).exp() - 3.3201).abs() < 1e-4);
        let w = consistency_weight(&[0.0, 1.0], &s);
        assert!((w - (0.85f64).exp()).abs() < 1e-12);
        assert!((w - 2.3396).abs() < 1e-4);
    }

    fn group(advantages: Vec<f64>, w: f64, old: [f64; NUM_TOKENS]) -> GroupBatch {
        let n = advantages.len();
        let r = Rollout {
            tokens: [0; NUM_TOKENS],
            token_logprobs: old,
            decoded_box: BBox::new(0.0, 0.0, 1.0, 1.0),
            degenerate: false,
            rewards: Default::default(),
            old_logprobs: old,
        };
        GroupBatch {
            query_id: 0,
            rollouts: vec![r; n],
            rewards: vec![0.0; n],
            reward_mean: 0.0,
            reward_std: 0.0,
            mean_iou: 0.0,
            var_iou: 0.0,
            advantages,
            sc_weight: w,
        }
    }

    #[test]
    fn loss_is_zero_at_rest() {
        let lp = [-1.0, -2.0, -0.5, -3.0];
        let g = group(vec![0.0; 3], 1.7, lp);
        let l = grpo_token_loss(&g, &[lp; 3], &[lp; 3], &GrpoSettings::default()).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn loss_is_linear_in_weight() {
        let old = [-1.0, -2.0, -0.5, -3.0];
        let new = [[-0.9, -2.1, -0.4, -3.3], [-1.2, -1.8, -0.6, -2.9]];
        let refs = [[-1.1, -2.0, -0.5, -3.1]; 2];
        let s = GrpoSettings::default();
        let a = grpo_token_loss(&group(vec![1.0, -1.0], 1.0, old), &new, &refs, &s).unwrap();
        let b = grpo_token_loss(&group(vec![1.0, -1.0], 2.0, old), &new, &refs, &s).unwrap();
        assert_eq!(b.loss, 2.0 * a.loss);
    }

    #[test]
    fn clipped_surrogate_arithmetic() {
        let s = GrpoSettings {
            kl_coeff: 0.0,
            ..Default::default()
        };
        let old = [-1.0; NUM_TOKENS];
        let new = [old.map(|o| o + 1.5f64.ln())];
        let l = grpo_token_loss(&group(vec![1.0], 1.0, old), &new, &new, &s).unwrap();
        for t in 0..NUM_TOKENS {
            assert!((l.ratios[0][t] - 1.5).abs() < 1e-12);
            assert!((l.surrogate[0][t] + 1.2).abs() < 1e-12);
            assert_eq!(l.dloss_dlogp[0][t], 0.0);
        }
        assert!((l.loss + 1.2).abs() < 1e-12);
        assert_eq!(l.clipped_fraction, 1.0);
    }

    #[test]
    fn zero_advantage_groups_carry_only_kl() {
        let old = [-1.0; NUM_TOKENS];
        let new = [[-1.2, -0.8, -1.0, -1.1]];
        let refs = [[-1.0; NUM_TOKENS]];
        let s = GrpoSettings::default();
        let l = grpo_token_loss(&group(vec![0.0], 1.0, old), &new, &refs, &s).unwrap();
        let kl: f64 = new[0].iter().map(|n| (-1.0 - n).exp() - (-1.0 - n) - 1.0).sum::<f64>() / 4.0;
        assert!((l.loss - s.kl_coeff * kl).abs() < 1e-15);
    }

    #[test]
    fn non_finite_ratio_is_reported() {
        let old = [-1.0; NUM_TOKENS];
        let new = [[f64::INFINITY, -1.0, -1.0, -1.0]];
        let err = grpo_token_loss(&group(vec![1.0], 1.0, old), &new, &new, &GrpoSettings::default());
        assert!(matches!(err, Err(GrpoError::NonFiniteRatio { rollout: 0, .. })));
    }

    #[test]
    fn settings_validation() {
        assert!(GrpoSettings::default().validate().is_ok());
        let bad = GrpoSettings {
            group_size: 1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(GrpoError::Settings { field: "group_size", .. })));
        let bad = GrpoSettings {
            w_min: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reward_mode_names_roundtrip() {
        for m in RewardMode::ALL {
            assert_eq!(RewardMode::parse(m.name()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 3, 2]));
        assert_eq!(derive_seed(&[7, 8]), derive_seed(&[7, 8]));
    }
}
