//! Tiny autoregressive box policy.
//!
//! A scene is featurized into a fixed-width vector, passed through one tanh hidden
//! layer, and decoded into four coordinate tokens `(x1, y1, x2, y2)`, each a bin
//! index over its image axis. Head `t` sees the hidden state plus a learned
//! embedding of every earlier token, so the joint distribution factorizes
//! autoregressively. Gradients are computed in closed form.

use crate::geometry::BBox;
use crate::scenes::{Category, ExpressionKind, Extreme, Relation, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const NUM_TOKENS: usize = 4;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite logits in head {head}")]
    NonFinite { head: usize },
    #[error("token {token} out of range for head {head} with {bins} bins")]
    TokenOutOfRange { head: usize, token: usize, bins: usize },
    #[error("feature width {got} does not match policy width {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("invalid policy settings: {0}")]
    Settings(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

const EXPR_WIDTH: usize = 4 + 12 + 9 + 4 + 12 + 4;
const OBJECT_WIDTH: usize = 12 + 4;

pub fn feature_width(max_objects: usize) -> usize {
    EXPR_WIDTH + max_objects * OBJECT_WIDTH
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub values: Vec<f64>,
    /// Set when the scene had more objects than descriptor slots.
    pub truncated: bool,
}

/// Expression one-hots (kind, category, region, relation, anchor, ordinal) followed
/// by up to `max_objects` object descriptors sorted by `(center_y, center_x)`.
pub fn featurize(scene: &Scene, max_objects: usize) -> Features {
    let mut v = vec![0.0; feature_width(max_objects)];
    let e = &scene.expression;
    let mut off = 0;
    v[off + e.kind.index()] = 1.0;
    off += ExpressionKind::ALL.len();
    v[off + e.category.index()] = 1.0;
    off += Category::ALL.len();
    if let Some(r) = e.region {
        v[off + r.index()] = 1.0;
    }
    off += 9;
    if let Some(r) = e.relation {
        v[off + r.index()] = 1.0;
    }
    off += Relation::ALL.len();
    if let Some(a) = e.anchor_category {
        v[off + a.index()] = 1.0;
    }
    off += Category::ALL.len();
    if let Some(o) = e.ordinal {
        v[off + o.index()] = 1.0;
    }
    off += Extreme::ALL.len();
    debug_assert_eq!(off, EXPR_WIDTH);

    let mut objs: Vec<(f64, f64, usize)> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let (cx, cy) = o.bbox.center();
            (cy, cx, i)
        })
        .collect();
    objs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for (slot, &(cy, cx, i)) in objs.iter().take(max_objects).enumerate() {
        let o = &scene.objects[i];
        let base = EXPR_WIDTH + slot * OBJECT_WIDTH;
        v[base + o.category.index()] = 1.0;
        v[base + 12] = cx / scene.image_w;
        v[base + 13] = cy / scene.image_h;
        v[base + 14] = o.bbox.width() / scene.image_w;
        v[base + 15] = o.bbox.height() / scene.image_h;
    }
    Features {
        values: v,
        truncated: objs.len() > max_objects,
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// All output logits start at zero.
    Uniform,
    /// Output biases form a Gaussian bump over the central bins.
    CentralPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub hidden: usize,
    pub bins: usize,
    pub max_objects: usize,
    pub image_w: f64,
    pub image_h: f64,
    pub init: InitKind,
    /// Scale of the input-layer initialization relative to `1/sqrt(F)`.
    pub init_scale: f64,
    /// Width of the central prior, in bins.
    pub prior_std_bins: f64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            hidden: 128,
            bins: 64,
            max_objects: 12,
            image_w: 256.0,
            image_h: 256.0,
            init: InitKind::CentralPrior,
            init_scale: 1.0,
            prior_std_bins: 4.0,
        }
    }
}

impl PolicySettings {
    pub fn feature_width(&self) -> usize {
        feature_width(self.max_objects)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let err = |m: &str| Err(PolicyError::Settings(m.to_string()));
        if self.hidden == 0 {
            return err("hidden must be positive");
        }
        if self.bins < 2 {
            return err("bins must be at least 2");
        }
        if self.max_objects == 0 {
            return err("max_objects must be positive");
        }
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return err("image dimensions must be positive");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return err("init_scale must be finite and non-negative");
        }
        if !(self.prior_std_bins.is_finite() && self.prior_std_bins > 0.0) {
            return err("prior_std_bins must be positive");
        }
        Ok(())
    }

    pub fn bin_width_x(&self) -> f64 {
        self.image_w / self.bins as f64
    }

    pub fn bin_width_y(&self) -> f64 {
        self.image_h / self.bins as f64
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    f: usize,
    h: usize,
    b: usize,
    w1: usize,
    b1: usize,
    heads: usize,
    embed: usize,
    len: usize,
}

/// Number of (later head, earlier token) embedding tables.
const EMBED_PAIRS: usize = NUM_TOKENS * (NUM_TOKENS - 1) / 2;

impl Layout {
    fn new(s: &PolicySettings) -> Self {
        let (f, h, b) = (s.feature_width(), s.hidden, s.bins);
        let w1 = 0;
        let b1 = w1 + h * f;
        let heads = b1 + h;
        let embed = heads + NUM_TOKENS * (b * h + b);
        let len = embed + EMBED_PAIRS * b * b;
        Layout {
            f,
            h,
            b,
            w1,
            b1,
            heads,
            embed,
            len,
        }
    }

    fn head_w(&self, t: usize) -> usize {
        self.heads + t * (self.b * self.h + self.b)
    }

    fn head_b(&self, t: usize) -> usize {
        self.head_w(t) + self.b * self.h
    }

    /// Table mapping the value of token `s` to a logit offset for head `t > s`.
    fn embed_table(&self, t: usize, s: usize) -> usize {
        debug_assert!(s < t);
        self.embed + (t * (t - 1) / 2 + s) * self.b * self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub settings: PolicySettings,
    pub data: Vec<f64>,
    layout: Layout,
}

impl PolicyParams {
    pub fn init(settings: &PolicySettings, seed: u64) -> Result<Self, PolicyError> {
        settings.validate()?;
        let layout = Layout::new(settings);
        let mut data = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = settings.init_scale / (layout.f as f64).sqrt();
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut data[layout.w1..layout.b1] {
                *w = normal.sample(&mut rng);
            }
        }
        if settings.init == InitKind::CentralPrior {
            let mid = (layout.b as f64 - 1.0) / 2.0;
            let s2 = 2.0 * settings.prior_std_bins * settings.prior_std_bins;
            for t in 0..NUM_TOKENS {
                let off = layout.head_b(t);
                for k in 0..layout.b {
                    data[off + k] = -((k as f64 - mid).powi(2)) / s2;
                }
            }
        }
        Ok(PolicyParams {
            settings: settings.clone(),
            data,
            layout,
        })
    }

    pub fn from_data(settings: PolicySettings, data: Vec<f64>) -> Result<Self, PolicyError> {
        settings.validate()?;
        let layout = Layout::new(&settings);
        if data.len() != layout.len {
            return Err(PolicyError::Settings(format!(
                "expected {} parameters, got {}",
                layout.len,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Settings("non-finite parameter".into()));
        }
        Ok(PolicyParams {
            settings,
            data,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    fn check_features(&self, feat: &[f64]) -> Result<(), PolicyError> {
        if feat.len() != self.layout.f {
            return Err(PolicyError::FeatureWidth {
                expected: self.layout.f,
                got: feat.len(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize; NUM_TOKENS]) -> Result<(), PolicyError> {
        for (head, &token) in tokens.iter().enumerate() {
            if token >= self.layout.b {
                return Err(PolicyError::TokenOutOfRange {
                    head,
                    token,
                    bins: self.layout.b,
                });
            }
        }
        Ok(())
    }

    /// Hidden state and the token-independent part of every head's logits.
    fn trunk(&self, feat: &[f64]) -> Trunk {
        let l = &self.layout;
        let mut hidden = vec![0.0; l.h];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let row = &self.data[l.w1 + j * l.f..l.w1 + (j + 1) * l.f];
            let z: f64 = row.iter().zip(feat).map(|(w, x)| w * x).sum();
            *hj = (z + self.data[l.b1 + j]).tanh();
        }
        let mut base = Vec::with_capacity(NUM_TOKENS);
        for t in 0..NUM_TOKENS {
            let w = l.head_w(t);
            let bias = l.head_b(t);
            let logits: Vec<f64> = (0..l.b)
                .map(|k| {
                    let row = &self.data[w + k * l.h..w + (k + 1) * l.h];
                    let dot: f64 = row.iter().zip(&hidden).map(|(a, b)| a * b).sum();
                    dot + self.data[bias + k]
                })
                .collect();
            base.push(logits);
        }
        Trunk { hidden, base }
    }

    /// Logits of head `t` given the earlier tokens.
    fn head_logits(&self, trunk: &Trunk, t: usize, prev: &[usize]) -> Vec<f64> {
        let l = &self.layout;
        let mut logits = trunk.base[t].clone();
        for (s, &tok) in prev.iter().enumerate().take(t) {
            let row = l.embed_table(t, s) + tok * l.b;
            for (z, e) in logits.iter_mut().zip(&self.data[row..row + l.b]) {
                *z += e;
            }
        }
        logits
    }
}

struct Trunk {
    hidden: Vec<f64>,
    base: Vec<Vec<f64>>,
}

/// Log-softmax of `logits / temperature`.
fn log_softmax(logits: &[f64], temperature: f64, head: usize) -> Result<Vec<f64>, PolicyError> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(PolicyError::NonFinite { head });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|z| (z - max) / temperature).collect();
    let lse = scaled.iter().map(|z| z.exp()).sum::<f64>().ln();
    Ok(scaled.iter().map(|z| z - lse).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Decoding and sampling
// ---------------------------------------------------------------------------

/// Decode tokens to a box using bin left edges. Corners are order-normalized by
/// swapping; equal bins on an axis leave a zero-extent (degenerate) box.
pub fn decode_tokens(tokens: &[usize; NUM_TOKENS], s: &PolicySettings) -> BBox {
    let (bx, by) = (s.bin_width_x(), s.bin_width_y());
    let (xa, xb) = (tokens[0].min(tokens[2]), tokens[0].max(tokens[2]));
    let (ya, yb) = (tokens[1].min(tokens[3]), tokens[1].max(tokens[3]));
    BBox::new(xa as f64 * bx, ya as f64 * by, xb as f64 * bx, yb as f64 * by)
        .clamp_to(s.image_w, s.image_h)
}

/// Nearest-bin encoding of a box's corners.
pub fn encode_box(b: &BBox, s: &PolicySettings) -> [usize; NUM_TOKENS] {
    let max = (s.bins - 1) as f64;
    let q = |v: f64, w: f64| (v / w).round().clamp(0.0, max) as usize;
    let (bx, by) = (s.bin_width_x(), s.bin_width_y());
    [q(b.x1, bx), q(b.y1, by), q(b.x2, bx), q(b.y2, by)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: [usize; NUM_TOKENS],
    pub token_logprobs: [f64; NUM_TOKENS],
    pub decoded_box: BBox,
    pub degenerate: bool,
    pub rewards: crate::position_reward::RewardBreakdown,
    /// Log-probabilities under the sampling snapshot, used for ratios.
    pub old_logprobs: [f64; NUM_TOKENS],
}

impl Rollout {
    fn new(tokens: [usize; NUM_TOKENS], logprobs: [f64; NUM_TOKENS], s: &PolicySettings) -> Self {
        let decoded_box = decode_tokens(&tokens, s);
        Rollout {
            tokens,
            token_logprobs: logprobs,
            decoded_box,
            degenerate: !decoded_box.is_valid(),
            rewards: Default::default(),
            old_logprobs: logprobs,
        }
    }

    /// Decoded box if it is scoreable.
    pub fn prediction(&self) -> Option<&BBox> {
        (!self.degenerate).then_some(&self.decoded_box)
    }
}

fn sample_index<R: Rng>(rng: &mut R, logp: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    logp.len() - 1
}

/// Draw `g` rollouts. `temperature == 0` decodes greedily.
pub fn sample_rollouts_with<R: Rng>(
    params: &PolicyParams,
    feat: &[f64],
    g: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Rollout>, PolicyError> {
    params.check_features(feat)?;
    let trunk = params.trunk(feat);
    let mut out = Vec::with_capacity(g);
    for _ in 0..g {
        let mut tokens = [0usize; NUM_TOKENS];
        let mut lps = [0.0; NUM_TOKENS];
        for t in 0..NUM_TOKENS {
            let logits = params.head_logits(&trunk, t, &tokens[..t]);
            let (tok, lp) = if temperature <= 0.0 {
                let logp = log_softmax(&logits, 1.0, t)?;
                let k = argmax(&logits);
                (k, logp[k])
            } else {
                let logp = log_softmax(&logits, temperature, t)?;
                let k = sample_index(rng, &logp);
                (k, logp[k])
            };
            tokens[t] = tok;
            lps[t] = lp;
        }
        out.push(Rollout::new(tokens, lps, &params.settings));
    }
    Ok(out)
}

pub fn sample_rollouts(
    params: &PolicyParams,
    feat: &[f64],
    g: usize,
    seed: u64,
    temperature: f64,
) -> Result<Vec<Rollout>, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rollouts_with(params, feat, g, temperature, &mut rng)
}

pub fn greedy(params: &PolicyParams, feat: &[f64]) -> Result<Rollout, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(sample_rollouts_with(params, feat, 1, 0.0, &mut rng)?.remove(0))
}

/// Per-head probabilities along a fixed token prefix, for diagnostics and tests.
pub fn head_probabilities(
    params: &PolicyParams,
    feat: &[f64],
    tokens: &[usize; NUM_TOKENS],
    temperature: f64,
) -> Result<Vec<Vec<f64>>, PolicyError> {
    params.check_features(feat)?;
    let trunk = params.trunk(feat);
    (0..NUM_TOKENS)
        .map(|t| {
            let logits = params.head_logits(&trunk, t, &tokens[..t]);
            Ok(log_softmax(&logits, temperature, t)?.iter().map(|l| l.exp()).collect())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Log-likelihood and gradients
// ---------------------------------------------------------------------------

/// Per-token log-probabilities of `tokens` at temperature 1.
pub fn token_logprobs(
    params: &PolicyParams,
    feat: &[f64],
    tokens: &[usize; NUM_TOKENS],
) -> Result<[f64; NUM_TOKENS], PolicyError> {
    params.check_features(feat)?;
    params.check_tokens(tokens)?;
    let trunk = params.trunk(feat);
    let mut out = [0.0; NUM_TOKENS];
    for t in 0..NUM_TOKENS {
        let logits = params.head_logits(&trunk, t, &tokens[..t]);
        out[t] = log_softmax(&logits, 1.0, t)?[tokens[t]];
    }
    Ok(out)
}

/// Add `sum_i sum_t coeffs_i[t] * d log p(tokens_i[t]) / d params` into `grad` for
/// several token sequences sharing one feature vector. Returns the per-sequence,
/// per-token log-probabilities.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    feat: &[f64],
    items: &[([usize; NUM_TOKENS], [f64; NUM_TOKENS])],
    grad: &mut [f64],
) -> Result<Vec<[f64; NUM_TOKENS]>, PolicyError> {
    params.check_features(feat)?;
    assert_eq!(grad.len(), params.len(), "gradient buffer size");
    let l = params.layout;
    let trunk = params.trunk(feat);
    let mut dbase = vec![vec![0.0; l.b]; NUM_TOKENS];
    let mut logprobs = Vec::with_capacity(items.len());
    for (tokens, coeffs) in items {
        params.check_tokens(tokens)?;
        let mut lps = [0.0; NUM_TOKENS];
        for t in 0..NUM_TOKENS {
            let logits = params.head_logits(&trunk, t, &tokens[..t]);
            let logp = log_softmax(&logits, 1.0, t)?;
            lps[t] = logp[tokens[t]];
            let c = coeffs[t];
            if c == 0.0 {
                continue;
            }
            // d log p_y / d z_k = [k == y] - p_k
            for (k, lp) in logp.iter().enumerate() {
                let d = c * (f64::from(u8::from(k == tokens[t])) - lp.exp());
                dbase[t][k] += d;
                for (s, &prev) in tokens.iter().enumerate().take(t) {
                    grad[l.embed_table(t, s) + prev * l.b + k] += d;
                }
            }
        }
        logprobs.push(lps);
    }

    let mut dhidden = vec![0.0; l.h];
    for (t, db) in dbase.iter().enumerate() {
        let w = l.head_w(t);
        let bias = l.head_b(t);
        for (k, &d) in db.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[bias + k] += d;
            let row = w + k * l.h;
            for j in 0..l.h {
                grad[row + j] += d * trunk.hidden[j];
                dhidden[j] += d * params.data[row + j];
            }
        }
    }
    for j in 0..l.h {
        let dz = dhidden[j] * (1.0 - trunk.hidden[j] * trunk.hidden[j]);
        if dz == 0.0 {
            continue;
        }
        grad[l.b1 + j] += dz;
        let row = l.w1 + j * l.f;
        for (g, x) in grad[row..row + l.f].iter_mut().zip(feat) {
            *g += dz * x;
        }
    }
    Ok(logprobs)
}

/// Summed log-likelihood of `tokens` and its exact gradient.
pub fn logprob_and_grad(
    params: &PolicyParams,
    feat: &[f64],
    tokens: &[usize; NUM_TOKENS],
) -> Result<(f64, Vec<f64>), PolicyError> {
    let mut grad = params.zeros_like();
    let lps = accumulate_logprob_grad(params, feat, &[(*tokens, [1.0; NUM_TOKENS])], &mut grad)?;
    Ok((lps[0].iter().sum(), grad))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Descend along `grad` (the gradient of a loss to minimize).
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One supervised example: features and ground-truth tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub features: Vec<f64>,
    pub tokens: [usize; NUM_TOKENS],
}

/// One Adam step on the mean negative log-likelihood of `batch`. Returns the mean
/// NLL measured before the step.
pub fn sft_step(params: &mut PolicyParams, opt: &mut Adam, batch: &[SftExample]) -> Result<f64, PolicyError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let scale = -1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut nll = 0.0;
    for ex in batch {
        let lps = accumulate_logprob_grad(params, &ex.features, &[(ex.tokens, [scale; NUM_TOKENS])], &mut grad)?;
        nll -= lps[0].iter().sum::<f64>();
    }
    let nll = nll / batch.len() as f64;
    if !nll.is_finite() {
        return Err(PolicyError::NonFiniteLoss(nll));
    }
    if opt.lr != 0.0 {
        opt.update(&mut params.data, &grad);
    }
    Ok(nll)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "groundrl-policy-checkpoint";

/// Self-describing checkpoint: settings, parameters, seed, and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Optimizer steps taken so far by the stage that wrote the checkpoint.
    pub step: u64,
    pub stage: String,
    pub settings: PolicySettings,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, seed: u64, step: u64, stage: &str, optimizer: Option<&Adam>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            seed,
            step,
            stage: stage.to_string(),
            settings: params.settings.clone(),
            params: params.data.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn policy(&self) -> Result<PolicyParams, PolicyError> {
        PolicyParams::from_data(self.settings.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let io = |source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer(&mut w, self).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let file = File::open(path).map_err(|source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| PolicyError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(PolicyError::Checkpoint {
                path: path.to_path_buf(),
                message: format!("unknown format tag {:?}", ck.format),
            });
        }
        ck.policy().map_err(|e| PolicyError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate_scene, Difficulty};

    fn small() -> PolicySettings {
        PolicySettings {
            hidden: 16,
            bins: 8,
            max_objects: 3,
            image_w: 64.0,
            image_h: 64.0,
            init: InitKind::Uniform,
            ..Default::default()
        }
    }

    fn feat_for(s: &PolicySettings, seed: u64) -> Vec<f64> {
        let scene = generate_scene(seed, &Difficulty::default()).unwrap();
        featurize(&scene, s.max_objects).values
    }

    #[test]
    fn uniform_init_logprob() {
        let s = PolicySettings {
            init: InitKind::Uniform,
            ..Default::default()
        };
        let p = PolicyParams::init(&s, 1).unwrap();
        let f = feat_for(&s, 3);
        let (lp, _) = logprob_and_grad(&p, &f, &[1, 2, 3, 4]).unwrap();
        assert!((lp - 4.0 * (1.0 / 64.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let s = small();
        let mut p = PolicyParams::init(&s, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in &mut p.data {
            *v += rng.random_range(-1.0..1.0);
        }
        let f = feat_for(&s, 1);
        for probs in head_probabilities(&p, &f, &[3, 1, 6, 2], 1.0).unwrap() {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let s = small();
        let p = PolicyParams::init(&s, 2).unwrap();
        let f = feat_for(&s, 1);
        let a = sample_rollouts(&p, &f, 8, 11, 1.0).unwrap();
        let b = sample_rollouts(&p, &f, 8, 11, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.token_logprobs.iter().all(|&l| l <= 0.0)));
    }

    #[test]
    fn cold_temperature_is_greedy() {
        let s = PolicySettings {
            init: InitKind::CentralPrior,
            ..small()
        };
        let mut p = PolicyParams::init(&s, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in &mut p.data {
            *v += rng.random_range(-0.5..0.5);
        }
        let f = feat_for(&s, 2);
        let g = greedy(&p, &f).unwrap();
        for r in sample_rollouts(&p, &f, 16, 3, 1e-4).unwrap() {
            assert_eq!(r.tokens, g.tokens);
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let s = small();
        let mut p = PolicyParams::init(&s, 2).unwrap();
        let f = feat_for(&s, 1);
        let tokens = [1, 2, 3, 4];
        let before = token_logprobs(&p, &f, &tokens).unwrap();
        let off = p.layout.head_b(2);
        for k in 0..s.bins {
            p.data[off + k] += 3.7;
        }
        let after = token_logprobs(&p, &f, &tokens).unwrap();
        assert!((before[2] - after[2]).abs() < 1e-12);
    }

    #[test]
    fn token_range_and_width_errors() {
        let s = small();
        let p = PolicyParams::init(&s, 2).unwrap();
        let f = feat_for(&s, 1);
        assert!(matches!(
            logprob_and_grad(&p, &f, &[0, 0, 8, 0]),
            Err(PolicyError::TokenOutOfRange { head: 2, token: 8, .. })
        ));
        assert!(matches!(logprob_and_grad(&p, &f[1..], &[0; 4]), Err(PolicyError::FeatureWidth { .. })));
    }

    #[test]
    fn non_finite_logits_name_the_head() {
        let s = small();
        let mut p = PolicyParams::init(&s, 2).unwrap();
        let off = p.layout.head_b(1);
        p.data[off] = f64::NAN;
        let f = feat_for(&s, 1);
        assert!(matches!(sample_rollouts(&p, &f, 2, 0, 1.0), Err(PolicyError::NonFinite { head: 1 })));
    }

    #[test]
    fn decode_swaps_and_flags() {
        let s = PolicySettings::default();
        let b = decode_tokens(&[10, 20, 5, 30], &s);
        assert_eq!(b, BBox::new(20.0, 80.0, 40.0, 120.0));
        assert!(!decode_tokens(&[7, 1, 7, 9], &s).is_valid());
        let gt = BBox::new(40.0, 41.0, 89.0, 256.0);
        assert_eq!(encode_box(&gt, &s), [10, 10, 22, 63]);
    }

    #[test]
    fn featurize_padding_and_order() {
        let scene = generate_scene(7, &Difficulty { min_objects: 3, max_objects: 3, ..Default::default() }).unwrap();
        let f = featurize(&scene, 12);
        assert!(!f.truncated);
        assert!(f.values[EXPR_WIDTH + 3 * OBJECT_WIDTH..].iter().all(|&v| v == 0.0));
        let mut shuffled = scene.clone();
        shuffled.objects.reverse();
        shuffled.target = scene.objects.len() - 1 - scene.target;
        assert_eq!(featurize(&shuffled, 12).values, f.values);
        assert!(featurize(&scene, 2).truncated);
    }

    #[test]
    fn sft_lr_zero_leaves_params() {
        let s = small();
        let mut p = PolicyParams::init(&s, 2).unwrap();
        let before = p.data.clone();
        let mut opt = Adam::new(p.len(), 0.0);
        let ex = SftExample {
            features: feat_for(&s, 1),
            tokens: [1, 2, 3, 4],
        };
        let nll = sft_step(&mut p, &mut opt, &[ex]).unwrap();
        assert!((nll - 4.0 * (8.0f64).ln()).abs() < 1e-12);
        assert_eq!(p.data, before);
    }

    #[test]
    fn sft_drives_nll_down() {
        let s = small();
        let mut p = PolicyParams::init(&s, 2).unwrap();
        let mut opt = Adam::new(p.len(), 1e-2);
        let ex = [SftExample {
            features: feat_for(&s, 1),
            tokens: [1, 2, 5, 6],
        }];
        let mut prev = f64::INFINITY;
        let mut last = 0.0;
        for _ in 0..400 {
            last = sft_step(&mut p, &mut opt, &ex).unwrap();
            assert!(last < prev, "{last} >= {prev}");
            prev = last;
            if last < 0.01 {
                break;
            }
        }
        assert!(last < 0.01, "final nll {last}");
    }
}
