//! Nucleus sampling, bar-framed generation, style transfer and
//! sliding-window generation for long inputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::N_CLASSES;
use crate::autodiff::ParamStore;
use crate::remi::{bar_slices, BAR, BOS, EOS, PAD};
use crate::transformer::{Decoder, ModelError};
use crate::vae::StyleModel;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad attribute override: {0}")]
    BadOverrides(String),
    #[error("invalid sampling configuration: {0}")]
    Sampling(String),
    #[error("source has no bars")]
    EmptySource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Nucleus mass.
    pub p: f64,
    /// Softmax temperature.
    pub tau: f64,
    pub seed: u64,
    pub max_tokens_per_bar: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            p: 0.9,
            tau: 1.2,
            seed: 0,
            max_tokens_per_bar: 160,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(DecodeError::Sampling(format!("p = {} outside (0, 1]", self.p)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DecodeError::Sampling(format!("tau = {} must be positive", self.tau)));
        }
        if self.max_tokens_per_bar < 2 {
            return Err(DecodeError::Sampling("max_tokens_per_bar must be at least 2".into()));
        }
        Ok(())
    }
}

/// `softmax(logits / tau)`; `-inf` logits get probability 0.
pub fn tempered_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

/// Smallest set of highest-probability tokens whose mass reaches `p`;
/// equal probabilities are ordered by token id.
pub fn nucleus_set(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut mass = 0.0;
    let mut keep = Vec::new();
    for i in order {
        if probs[i] <= 0.0 {
            break;
        }
        keep.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    keep
}

/// Renormalised nucleus distribution (zero outside the nucleus).
pub fn nucleus_distribution(logits: &[f64], p: f64, tau: f64) -> Vec<f64> {
    let probs = tempered_softmax(logits, tau);
    let keep = nucleus_set(&probs, p);
    let mass: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for i in keep {
        out[i] = probs[i] / mass;
    }
    out
}

pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplingConfig, rng: &mut R) -> u32 {
    let dist = nucleus_distribution(logits, cfg.p, cfg.tau);
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in dist.iter().enumerate() {
        if q > 0.0 {
            acc += q;
            last = i;
            if u < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Generated tokens plus, per bar, whether the token cap cut it short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub tokens: Vec<u32>,
    pub truncated: Vec<bool>,
}

impl Generated {
    pub fn n_bars(&self) -> usize {
        self.truncated.len()
    }
}

/// Decodes bars `context_bars..conditions.len()` one at a time after
/// feeding the frozen `context` (which covers bars `0..context_bars`).
///
/// Every bar starts with an injected Bar token and ends when the model
/// predicts Bar or EOS, or when the per-bar cap is reached. Bars are also
/// cut short when the decoder would otherwise run out of positions before
/// every remaining bar got its Bar token.
pub fn generate_bars<R: Rng + ?Sized>(
    decoder: &Decoder,
    store: &ParamStore,
    conditions: Vec<Vec<f64>>,
    context: &[u32],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Generated, DecodeError> {
    cfg.validate()?;
    let total = conditions.len();
    let ctx_spans = bar_slices(context);
    if ctx_spans.len() > total {
        return Err(DecodeError::Model(ModelError::BadPartition(format!(
            "{} context bars but {total} conditions",
            ctx_spans.len()
        ))));
    }
    let mut state = decoder.start(store, conditions);
    let max_len = state.max_len();
    if context.len() + total - ctx_spans.len() > max_len {
        return Err(DecodeError::Model(ModelError::TooLong {
            len: context.len() + total - ctx_spans.len(),
            max: max_len,
        }));
    }
    let mut out = Vec::new();
    for (k, span) in ctx_spans.iter().enumerate() {
        for &t in &context[span.clone()] {
            state.step(t, k)?;
        }
    }
    let mut truncated = Vec::with_capacity(total - ctx_spans.len());
    for k in ctx_spans.len()..total {
        let mut logits = state.step(BAR, k)?;
        out.push(BAR);
        let budget = max_len - (total - k - 1);
        let mut len = 1;
        let mut cut = true;
        while len < cfg.max_tokens_per_bar && state.position() < budget {
            for banned in [PAD, BOS] {
                if let Some(l) = logits.get_mut(banned as usize) {
                    *l = f64::NEG_INFINITY;
                }
            }
            let next = nucleus_sample(&logits, cfg, rng);
            if next == BAR || next == EOS {
                cut = false;
                break;
            }
            out.push(next);
            len += 1;
            logits = state.step(next, k)?;
        }
        if cut {
            log::debug!("bar {k} cut at {len} tokens");
        }
        truncated.push(cut);
    }
    Ok(Generated { tokens: out, truncated })
}

/// Generates one bar per row of `conditions` in overlapping windows of
/// `k_w` bars with stride `k_w / 2`. Each window after the first keeps the
/// already generated overlap bars as frozen context. `k_w = 0` decodes all
/// bars in a single pass.
pub fn generate_windowed<R: Rng + ?Sized>(
    decoder: &Decoder,
    store: &ParamStore,
    conditions: Vec<Vec<f64>>,
    k_w: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Generated, DecodeError> {
    let k = conditions.len();
    if k_w == 0 || k <= k_w {
        return generate_bars(decoder, store, conditions, &[], cfg, rng);
    }
    if k_w < 2 {
        return Err(DecodeError::Sampling("window must span at least 2 bars".into()));
    }
    let mut tokens: Vec<u32> = Vec::new();
    let mut truncated: Vec<bool> = Vec::new();
    for s in window_starts(k, k_w) {
        let end = (s + k_w).min(k);
        let spans = bar_slices(&tokens);
        let context: Vec<u32> = if s < truncated.len() {
            tokens[spans[s].start..].to_vec()
        } else {
            Vec::new()
        };
        let gen = generate_bars(decoder, store, conditions[s..end].to_vec(), &context, cfg, rng)?;
        tokens.extend(gen.tokens);
        truncated.extend(gen.truncated);
    }
    Ok(Generated { tokens, truncated })
}

/// Absolute class or a signed shift applied to the source class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributeOverride {
    Set(u8),
    Shift(i32),
}

impl AttributeOverride {
    pub fn apply(self, source: u8) -> u8 {
        let top = N_CLASSES as i32 - 1;
        match self {
            AttributeOverride::Set(c) => (c as i32).clamp(0, top) as u8,
            AttributeOverride::Shift(d) => (source as i32 + d).clamp(0, top) as u8,
        }
    }
}

impl FromStr for AttributeOverride {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || DecodeError::BadOverrides(format!("{s:?} (use +n, -n or =n)"));
        if let Some(rest) = s.strip_prefix('=') {
            return rest.parse::<u8>().map(AttributeOverride::Set).map_err(|_| bad());
        }
        if s.starts_with('+') || s.starts_with('-') {
            return s.parse::<i32>().map(AttributeOverride::Shift).map_err(|_| bad());
        }
        s.parse::<u8>().map(AttributeOverride::Set).map_err(|_| bad())
    }
}

impl fmt::Display for AttributeOverride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeOverride::Set(c) => write!(f, "={c}"),
            AttributeOverride::Shift(d) => write!(f, "{d:+}"),
        }
    }
}

/// Either one override for every bar or one per bar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverrideSpec {
    Uniform(AttributeOverride),
    PerBar(Vec<AttributeOverride>),
}

impl Default for OverrideSpec {
    fn default() -> Self {
        OverrideSpec::Uniform(AttributeOverride::Shift(0))
    }
}

impl FromStr for OverrideSpec {
    type Err = DecodeError;
    /// `"+2"` applies to every bar; `"=1,=3,+0"` lists one entry per bar.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        match parts.len() {
            0 => Err(DecodeError::BadOverrides("empty override".into())),
            1 => Ok(OverrideSpec::Uniform(parts[0].parse()?)),
            _ => Ok(OverrideSpec::PerBar(
                parts.iter().map(|p| p.parse()).collect::<Result<_, _>>()?,
            )),
        }
    }
}

impl OverrideSpec {
    pub fn resolve(&self, source: &[u8]) -> Result<Vec<u8>, DecodeError> {
        match self {
            OverrideSpec::Uniform(o) => Ok(source.iter().map(|&c| o.apply(c)).collect()),
            OverrideSpec::PerBar(list) => {
                if list.len() != source.len() {
                    return Err(DecodeError::BadOverrides(format!(
                        "{} overrides for {} bars",
                        list.len(),
                        source.len()
                    )));
                }
                Ok(list.iter().zip(source).map(|(o, &c)| o.apply(c)).collect())
            }
        }
    }
}

/// Re-generates `source` bar by bar with `z_k = mu_k` and the requested
/// attribute classes.
pub fn style_transfer<R: Rng + ?Sized>(
    model: &StyleModel,
    store: &ParamStore,
    source: &[u32],
    rhym: &[u8],
    poly: &[u8],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Generated, DecodeError> {
    let (mu, _) = model.posterior(store, source).map_err(|e| match e {
        ModelError::EmptyBar => DecodeError::EmptySource,
        e => e.into(),
    })?;
    check_lengths(mu.len(), rhym, poly)?;
    let conditions = model.condition_rows(store, &mu, rhym, poly);
    generate_bars(&model.decoder, store, conditions, &[], cfg, rng)
}

fn check_lengths(k: usize, rhym: &[u8], poly: &[u8]) -> Result<(), DecodeError> {
    if rhym.len() != k || poly.len() != k {
        return Err(DecodeError::BadOverrides(format!(
            "{k} bars but {} rhythm and {} polyphony classes",
            rhym.len(),
            poly.len()
        )));
    }
    Ok(())
}

/// Window start bars for `k` bars, window `k_w`, stride `k_w / 2`.
pub fn window_starts(k: usize, k_w: usize) -> Vec<usize> {
    if k <= k_w {
        return vec![0];
    }
    let stride = (k_w / 2).max(1);
    let mut starts = vec![0];
    let mut covered = k_w;
    while covered < k {
        let s = starts.last().unwrap() + stride;
        starts.push(s);
        covered = (s + k_w).min(k);
    }
    starts
}

/// Style transfer for inputs longer than `k_w` bars. Source bars are
/// encoded once, then decoded with [`generate_windowed`].
pub fn sliding_window_transfer<R: Rng + ?Sized>(
    model: &StyleModel,
    store: &ParamStore,
    source: &[u32],
    rhym: &[u8],
    poly: &[u8],
    k_w: usize,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Generated, DecodeError> {
    if k_w < 2 {
        return Err(DecodeError::Sampling("window must span at least 2 bars".into()));
    }
    let (mu, _) = model.posterior(store, source).map_err(|e| match e {
        ModelError::EmptyBar => DecodeError::EmptySource,
        e => e.into(),
    })?;
    check_lengths(mu.len(), rhym, poly)?;
    let all = model.condition_rows(store, &mu, rhym, poly);
    generate_windowed(&model.decoder, store, all, k_w, cfg, rng)
}
