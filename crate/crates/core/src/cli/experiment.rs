//! Training runs and multi-seed, multi-arm ablations.

use super::config::RunConfig;
use super::CliError;
use crate::evalmetrics::{self, EvalReport, ThresholdMode};
use crate::grpo::{derive_seed, GrpoSettings, Query, RewardMode, StepLog, Trainer};
use crate::policy::PolicyParams;
use crate::scenes::{generate_scenes, Scene};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// A named reward mode with optional SC-coefficient overrides, written
/// `mode[:lambda_m=X,lambda_v=Y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub mode: RewardMode,
    pub lambda_m: Option<f64>,
    pub lambda_v: Option<f64>,
}

impl ArmSpec {
    pub fn new(mode: RewardMode) -> Self {
        ArmSpec {
            mode,
            lambda_m: None,
            lambda_v: None,
        }
    }

    pub fn with_lambdas(mode: RewardMode, lambda_m: f64, lambda_v: f64) -> Self {
        ArmSpec {
            mode,
            lambda_m: Some(lambda_m),
            lambda_v: Some(lambda_v),
        }
    }

    pub fn settings(&self, base: &GrpoSettings) -> GrpoSettings {
        GrpoSettings {
            reward_mode: self.mode,
            lambda_m: self.lambda_m.unwrap_or(base.lambda_m),
            lambda_v: self.lambda_v.unwrap_or(base.lambda_v),
            ..base.clone()
        }
    }
}

impl fmt::Display for ArmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mode.name())?;
        let mut parts = Vec::new();
        if let Some(v) = self.lambda_m {
            parts.push(format!("lambda_m={v}"));
        }
        if let Some(v) = self.lambda_v {
            parts.push(format!("lambda_v={v}"));
        }
        if !parts.is_empty() {
            write!(f, ":{}", parts.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for ArmSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (mode, rest) = s.split_once(':').unwrap_or((s, ""));
        let mode = RewardMode::parse(mode.trim()).ok_or_else(|| format!("unknown reward mode {mode:?}"))?;
        let mut arm = ArmSpec::new(mode);
        for kv in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
            let v: f64 = v.trim().parse().map_err(|_| format!("bad number in {kv:?}"))?;
            match k.trim() {
                "lambda_m" => arm.lambda_m = Some(v),
                "lambda_v" => arm.lambda_v = Some(v),
                other => return Err(format!("unknown arm key {other:?}")),
            }
        }
        Ok(arm)
    }
}

/// Greedy metrics at one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub acc_at_05: f64,
    pub acc_at_07: f64,
    pub miou: f64,
}

impl EvalPoint {
    pub const CSV_HEADER: [&'static str; 4] = ["step", "acc_at_05", "acc_at_07", "miou"];

    pub fn csv_record(&self) -> [String; 4] {
        [
            self.step.to_string(),
            self.acc_at_05.to_string(),
            self.acc_at_07.to_string(),
            self.miou.to_string(),
        ]
    }
}

pub fn evaluate(params: &PolicyParams, scenes: &[Scene]) -> Result<EvalReport, CliError> {
    let pairs = evalmetrics::predict_scenes(params, scenes)?;
    Ok(evalmetrics::evaluate_pairs(&pairs, ThresholdMode::Strict)?)
}

/// What the training loop reports after each step.
pub enum Progress<'a> {
    Step(&'a StepLog, &'a Trainer),
    Eval(&'a EvalPoint, &'a Trainer),
}

/// Train from `init` on `train` for `cfg.train.steps` steps, evaluating on `eval`
/// every `cfg.train.eval_every` steps and after the last one.
pub fn run_training(
    cfg: &RunConfig,
    settings: &GrpoSettings,
    init: PolicyParams,
    train: &[Scene],
    eval: &[Scene],
    mut progress: impl FnMut(Progress<'_>) -> Result<(), CliError>,
) -> Result<(Trainer, Vec<StepLog>, Vec<EvalPoint>), CliError> {
    let queries = train
        .iter()
        .map(|s| Query::from_scene(s, init.settings.max_objects, settings.alpha))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trainer = Trainer::new(init, settings.clone(), queries, cfg.seed)?;
    let mut logs = Vec::with_capacity(cfg.train.steps as usize);
    let mut evals = Vec::new();
    for _ in 0..cfg.train.steps {
        let log = trainer.step()?;
        progress(Progress::Step(&log, &trainer))?;
        logs.push(log);
        let step = trainer.step;
        let periodic = cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0;
        if !eval.is_empty() && (periodic || step == cfg.train.steps) {
            let r = evaluate(&trainer.params, eval)?;
            let point = EvalPoint {
                step,
                acc_at_05: r.acc_at_05,
                acc_at_07: r.acc_at_07,
                miou: r.miou,
            };
            progress(Progress::Eval(&point, &trainer))?;
            evals.push(point);
        }
    }
    Ok((trainer, logs, evals))
}

/// Training pool and held-out set for one ablation seed.
pub fn seed_corpora(cfg: &RunConfig, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>), CliError> {
    let train = generate_scenes(derive_seed(&[seed, 1]), cfg.train.pool_size, &cfg.scenes)?;
    let eval = generate_scenes(derive_seed(&[seed, 2]), cfg.train.eval_size, &cfg.scenes)?;
    Ok((train, eval))
}

/// Outcome of one (arm, seed) run.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: ArmSpec,
    pub seed: u64,
    pub logs: Vec<StepLog>,
    pub evals: Vec<EvalPoint>,
    pub final_eval: EvalPoint,
}

impl ArmRun {
    /// Mean of the per-step reward std over the final quarter of the run.
    pub fn tail_reward_std(&self) -> f64 {
        tail_mean(&self.logs, |l| l.reward_std)
    }

    pub fn tail_mean_iou(&self) -> f64 {
        tail_mean(&self.logs, |l| l.mean_iou)
    }
}

fn tail_mean(logs: &[StepLog], f: impl Fn(&StepLog) -> f64) -> f64 {
    let start = logs.len() - logs.len() / 4;
    let tail = &logs[start.min(logs.len().saturating_sub(1))..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Cold-start run of `arm` for one seed: the policy, the scene pools, and the
/// sampling streams all derive from `seed`, so arms sharing a seed differ only in
/// their reward settings.
pub fn run_arm(cfg: &RunConfig, arm: &ArmSpec, seed: u64) -> Result<ArmRun, CliError> {
    let (train, eval) = seed_corpora(cfg, seed)?;
    let run_cfg = RunConfig {
        seed,
        ..cfg.clone()
    };
    let init = PolicyParams::init(&cfg.policy, seed)?;
    let settings = arm.settings(&cfg.grpo);
    let (_, logs, evals) = run_training(&run_cfg, &settings, init, &train, &eval, |_| Ok(()))?;
    let final_eval = evals.last().cloned().ok_or_else(|| CliError::Invalid {
        field: "train.steps".into(),
        reason: "must be at least 1".into(),
    })?;
    Ok(ArmRun {
        arm: arm.clone(),
        seed,
        logs,
        evals,
        final_eval,
    })
}

/// One row of the ablation summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub seed: u64,
    pub acc_at_05: f64,
    pub acc_at_07: f64,
    pub miou: f64,
    pub tail_reward_std: f64,
    pub tail_mean_iou: f64,
}

impl From<&ArmRun> for SummaryRow {
    fn from(r: &ArmRun) -> Self {
        SummaryRow {
            arm: r.arm.to_string(),
            seed: r.seed,
            acc_at_05: r.final_eval.acc_at_05,
            acc_at_07: r.final_eval.acc_at_07,
            miou: r.final_eval.miou,
            tail_reward_std: r.tail_reward_std(),
            tail_mean_iou: r.tail_mean_iou(),
        }
    }
}

/// Plain-text table of summary rows followed by per-arm seed means.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>6} {:>8} {:>8} {:>8} {:>10}",
        "arm", "seed", "Acc@0.5", "Acc@0.7", "mIoU", "tail std"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>10.5}",
            r.arm, r.seed, r.acc_at_05, r.acc_at_07, r.miou, r.tail_reward_std
        );
    }
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    for arm in arms {
        let sel: Vec<_> = rows.iter().filter(|r| r.arm == arm).collect();
        let n = sel.len() as f64;
        let mean = |f: fn(&SummaryRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>10.5}",
            arm,
            "mean",
            mean(|r| r.acc_at_05),
            mean(|r| r.acc_at_07),
            mean(|r| r.miou),
            mean(|r| r.tail_reward_std)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_spec_round_trip() {
        for text in ["iou-only", "pos", "pos-sc:lambda_m=1.2,lambda_v=0", "pos-sc:lambda_v=1"] {
            let arm: ArmSpec = text.parse().unwrap();
            assert_eq!(arm.to_string(), text);
        }
        assert!("pos:gamma=1".parse::<ArmSpec>().is_err());
        assert!("nope".parse::<ArmSpec>().is_err());
        let s = "pos-sc:lambda_m=0".parse::<ArmSpec>().unwrap().settings(&GrpoSettings::default());
        assert_eq!((s.lambda_m, s.lambda_v), (0.0, 1.0));
    }

    #[test]
    fn short_runs_are_reproducible() {
        let mut cfg = RunConfig {
            scenes: crate::scenes::Difficulty::far_init(),
            ..RunConfig::default()
        };
        cfg.policy.hidden = 8;
        cfg.train.steps = 3;
        cfg.train.pool_size = 8;
        cfg.train.eval_size = 4;
        cfg.grpo.batch_queries = 2;
        let arm = ArmSpec::new(RewardMode::PosSc);
        let a = run_arm(&cfg, &arm, 3).unwrap();
        let b = run_arm(&cfg, &arm, 3).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.evals.len(), 1);
    }
}
