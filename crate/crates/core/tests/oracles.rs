//! Independent numerical oracles: Monte-Carlo areas, finite differences, sampling
//! frequencies, and a hand-derived score-function gradient.

mod common;

use common::{random_params, scene_features};
use groundrl::geometry::{giou, iou, BBox};
use groundrl::grpo::{group_loss_and_grad, train_step, GroupBatch, GrpoSettings, Query, RewardMode};
use groundrl::policy::{self, head_probabilities, logprob_and_grad, Adam, PolicyParams, PolicySettings, NUM_TOKENS};
use groundrl::scenes::{generate_scenes, Difficulty};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut impl Rng) -> BBox {
    let x = rng.random_range(0.0..80.0);
    let y = rng.random_range(0.0..80.0);
    BBox::new(x, y, x + rng.random_range(2.0..60.0), y + rng.random_range(2.0..60.0))
}

/// Jittered-grid estimate of the fractions of the enclosing box covered by
/// both boxes and by either box, from `side * side` samples.
fn coverage(a: &BBox, b: &BBox, side: usize, rng: &mut impl Rng) -> (f64, f64) {
    let c = a.enclosing(b);
    let (cw, ch) = (c.width() / side as f64, c.height() / side as f64);
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let x = c.x1 + (i as f64 + rng.random::<f64>()) * cw;
            let y = c.y1 + (j as f64 + rng.random::<f64>()) * ch;
            let (ia, ib) = (a.contains_point(x, y), b.contains_point(x, y));
            both += (ia && ib) as u64;
            either += (ia || ib) as u64;
        }
    }
    let n = (side * side) as f64;
    (both as f64 / n, either as f64 / n)
}

#[test]
fn iou_and_giou_match_monte_carlo_areas() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 50 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (both, either) = coverage(&a, &b, 1000, &mut rng);
        let mc_iou = both / either;
        let mc_giou = mc_iou - (1.0 - either);
        let exact = iou(&a, &b).unwrap();
        assert!((mc_iou - exact).abs() < 2e-3, "iou {a} {b}: {mc_iou} vs {exact}");
        let exact_g = giou(&a, &b).unwrap();
        assert!((mc_giou - exact_g).abs() < 2e-3, "giou {a} {b}: {mc_giou} vs {exact_g}");
        checked += 1;
    }
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    for (k, scale) in common::SCALES.into_iter().enumerate() {
        let err = common::likelihood_gradient_error(scale, k as u64);
        assert!(err < 1e-5, "scale {scale}: relative error {err}");
    }
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    for (k, scale) in common::SCALES.into_iter().enumerate() {
        let err = common::grpo_gradient_error(scale, k as u64);
        assert!(err < 1e-5, "scale {scale}: relative error {err}");
    }
}

#[test]
fn sampled_frequencies_match_softmax() {
    let params = random_params(0.3, 42);
    let feat = scene_features(4);
    let n = 100_000;
    let rollouts = policy::sample_rollouts(&params, &feat, n, 7, 1.0).unwrap();
    let b = params.settings.bins;

    let first = head_probabilities(&params, &feat, &[0; NUM_TOKENS], 1.0).unwrap();
    let mut counts = vec![0usize; b];
    for r in &rollouts {
        counts[r.tokens[0]] += 1;
    }
    // Across 64 bins a handful of 3-sigma excursions is expected, so each head is
    // held to a chi-square bound, a 5-sigma cap per bin, and at most two bins
    // past 3 sigma.
    let check = |counts: &[usize], probs: &[f64], n: usize, head: usize| {
        let (mut chi2, mut over3) = (0.0, 0);
        for (k, (&c, &p)) in counts.iter().zip(probs).enumerate() {
            let f = c as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() <= 5.0 * sigma + 1e-12, "head {head} bin {k}: freq {f} prob {p} sigma {sigma}");
            over3 += ((f - p).abs() > 3.0 * sigma) as usize;
            chi2 += (c as f64 - p * n as f64).powi(2) / (p * n as f64);
        }
        let df = (probs.len() - 1) as f64;
        assert!(over3 <= 2, "head {head}: {over3} bins past 3 sigma");
        assert!(chi2 < df + 5.0 * (2.0 * df).sqrt(), "head {head}: chi2 {chi2} on {df} dof");
    };
    check(&counts, &first[0], n, 0);

    // Second head, conditioned on the most frequent first token.
    let mode = (0..b).max_by_key(|&k| counts[k]).unwrap();
    let cond = head_probabilities(&params, &feat, &[mode, 0, 0, 0], 1.0).unwrap();
    let mut counts1 = vec![0usize; b];
    let mut m = 0;
    for r in rollouts.iter().filter(|r| r.tokens[0] == mode) {
        counts1[r.tokens[1]] += 1;
        m += 1;
    }
    check(&counts1, &cond[1], m, 1);
}

/// With ratios at 1 and no KL term, the GRPO gradient reduces to the
/// score-function estimator `-(1 / 4G) * sum_g A_g * grad log pi(y_g)`.
#[test]
fn two_rollout_group_gradient_is_the_score_function() {
    let params = random_params(0.3, 3);
    let feat = scene_features(8);
    let settings = GrpoSettings {
        group_size: 2,
        kl_coeff: 0.0,
        reward_mode: RewardMode::Pos,
        ..GrpoSettings::default()
    };
    let mut rollouts = policy::sample_rollouts(&params, &feat, 2, 1, 1.0).unwrap();
    rollouts[0].rewards.total = 2.0;
    rollouts[1].rewards.total = 1.0;
    let batch = GroupBatch::from_scored(0, rollouts, &settings);
    assert_eq!(batch.advantages, vec![1.0, -1.0]);
    let ref_lp: Vec<_> = batch.rollouts.iter().map(|r| r.old_logprobs).collect();
    let (loss, grad) = group_loss_and_grad(&params, &feat, &batch, &ref_lp, &settings, 1.0).unwrap();
    assert!(loss.loss.abs() < 1e-12);

    let (_, g0) = logprob_and_grad(&params, &feat, &batch.rollouts[0].tokens).unwrap();
    let (_, g1) = logprob_and_grad(&params, &feat, &batch.rollouts[1].tokens).unwrap();
    for i in 0..grad.len() {
        let expected = -(g0[i] - g1[i]) / 8.0;
        assert!((grad[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "param {i}");
    }
}

#[test]
fn zero_lambdas_reproduce_the_unweighted_step_exactly() {
    let scenes = generate_scenes(5, 6, &Difficulty::far_init()).unwrap();
    let settings = PolicySettings::default();
    let queries: Vec<Query> = scenes.iter().map(|s| Query::from_scene(s, 12, 2.5).unwrap()).collect();
    let refs: Vec<&Query> = queries.iter().collect();
    let init = PolicyParams::init(&settings, 1).unwrap();

    let run = |s: &GrpoSettings| {
        let mut p = init.clone();
        let mut opt = Adam::new(p.len(), s.lr);
        let logs: Vec<_> = (1..=3).map(|step| train_step(&mut p, &init, &mut opt, &refs, s, 9, step).unwrap()).collect();
        (p, logs)
    };
    let weighted = GrpoSettings {
        reward_mode: RewardMode::PosSc,
        lambda_m: 0.0,
        lambda_v: 0.0,
        ..GrpoSettings::default()
    };
    let plain = GrpoSettings {
        reward_mode: RewardMode::Pos,
        ..GrpoSettings::default()
    };
    let (pa, la) = run(&weighted);
    let (pb, lb) = run(&plain);
    assert_eq!(pa.data, pb.data);
    assert_eq!(la, lb);
}
