//! Helpers shared by the oracle and acceptance targets.

#![allow(dead_code)]

use groundrl::grpo::{group_loss_and_grad, score_rollouts, GroupBatch, GrpoSettings, Query};
use groundrl::policy::{self, featurize, logprob_and_grad, token_logprobs, InitKind, PolicyParams, PolicySettings};
use groundrl::scenes::{generate_scenes, Difficulty};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Parameters drawn i.i.d. from `N(0, scale^2)`.
pub fn random_params(scale: f64, seed: u64) -> PolicyParams {
    let settings = PolicySettings {
        init: InitKind::Uniform,
        ..PolicySettings::default()
    };
    let base = PolicyParams::init(&settings, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let normal = Normal::new(0.0, scale).unwrap();
    let data = (0..base.len()).map(|_| normal.sample(&mut rng)).collect();
    PolicyParams::from_data(settings, data).unwrap()
}

pub fn scene_features(seed: u64) -> Vec<f64> {
    let scene = &generate_scenes(seed, 1, &Difficulty::default()).unwrap()[0];
    featurize(scene, 12).values
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Largest relative error between `analytic` and Richardson-extrapolated central
/// differences over 20 random coordinates whose gradient is large enough to
/// resolve in f64.
pub fn gradient_error(
    params: &PolicyParams,
    analytic: &[f64],
    objective: impl Fn(&PolicyParams) -> f64,
    rng: &mut impl Rng,
) -> f64 {
    let live: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > 1e-4).collect();
    assert!(live.len() > 100, "only {} resolvable coordinates", live.len());
    let central = |i: usize, h: f64| {
        let mut p = params.clone();
        p.data[i] += h;
        let up = objective(&p);
        p.data[i] -= 2.0 * h;
        (up - objective(&p)) / (2.0 * h)
    };
    (0..20)
        .map(|_| {
            let i = live[rng.random_range(0..live.len())];
            let h = 1e-3 * params.data[i].abs().max(1.0);
            let numeric = (4.0 * central(i, h / 2.0) - central(i, h)) / 3.0;
            relative_error(analytic[i], numeric)
        })
        .fold(0.0, f64::max)
}

pub const SCALES: [f64; 3] = [0.05, 0.3, 1.0];

/// Worst finite-difference error of the sequence log-likelihood gradient at one scale.
pub fn likelihood_gradient_error(scale: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feat = scene_features(3);
    let params = random_params(scale, seed + 100);
    let tokens = [0; 4].map(|_| rng.random_range(0..params.settings.bins));
    let (_, grad) = logprob_and_grad(&params, &feat, &tokens).unwrap();
    let f = |p: &PolicyParams| token_logprobs(p, &feat, &tokens).unwrap().iter().sum::<f64>();
    gradient_error(&params, &grad, f, &mut rng)
}

/// Worst finite-difference error of the clipped-surrogate-plus-KL group loss
/// gradient at one scale. Behaviour log-probs are perturbed so some ratios
/// leave the clip range, and advantages are jittered so no group is flat.
pub fn grpo_gradient_error(scale: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = &generate_scenes(9, 1, &Difficulty::default()).unwrap()[0];
    let settings = GrpoSettings::default();
    let q = Query::from_scene(scene, 12, settings.alpha).unwrap();
    let params = random_params(scale, seed + 200);
    let reference = random_params(scale, seed + 300);
    let mut rollouts = policy::sample_rollouts(&params, &q.features, 8, seed, 1.0).unwrap();
    for r in &mut rollouts {
        for lp in &mut r.old_logprobs {
            *lp += rng.random_range(-0.3..0.3);
        }
    }
    score_rollouts(&mut rollouts, &q.kernel, &settings);
    let mut batch = GroupBatch::from_scored(q.id, rollouts, &settings);
    for a in &mut batch.advantages {
        *a += rng.random_range(-1.0..1.0);
    }
    let ref_lp: Vec<_> = batch
        .rollouts
        .iter()
        .map(|r| token_logprobs(&reference, &q.features, &r.tokens).unwrap())
        .collect();
    let (_, grad) = group_loss_and_grad(&params, &q.features, &batch, &ref_lp, &settings, 1.0).unwrap();
    let f = |p: &PolicyParams| group_loss_and_grad(p, &q.features, &batch, &ref_lp, &settings, 1.0).unwrap().0.loss;
    gradient_error(&params, &grad, f, &mut rng)
}
