//! Training configuration, augmentation and the optimisation loop.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{adam_step, lr_schedule, AdamState, Gradients, Graph, LrSchedule, ParamStore};
use crate::config::{ConfigError, KeyValues};
use crate::midi::fold_pitch;
use crate::remi::{Token, Vocab};
use crate::transformer::ModelError;
use crate::vae::{beta_schedule, BetaSchedule, Example, Objective};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sequence of {len} tokens exceeds t_max = {t_max}")]
    OomGuard { len: usize, t_max: usize },
    #[error("empty training set")]
    EmptyCorpus,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training log: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimisation and regularisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: BetaSchedule,
    /// Free-bits floor per latent dimension.
    pub free_bits: f64,
    pub k_crop: usize,
    pub t_max: usize,
    pub batch_size: usize,
    /// Keys are shifted uniformly in `-transpose..=transpose` semitones.
    pub transpose: i32,
    pub lr: LrSchedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: BetaSchedule::default(),
            free_bits: 0.25,
            k_crop: 16,
            t_max: 1280,
            batch_size: 4,
            transpose: 6,
            lr: LrSchedule::default(),
            grad_clip: 1.0,
            steps: 200_000,
            seed: 0,
            log_every: 100,
            checkpoint_every: 5000,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "beta_max",
    "beta_constant",
    "cycle_length",
    "kl_free_steps",
    "free_bits",
    "k_crop",
    "t_max",
    "batch_size",
    "transpose",
    "lr_peak",
    "lr_warmup",
    "lr_decay_steps",
    "lr_floor",
    "grad_clip",
    "steps",
    "seed",
    "log_every",
    "checkpoint_every",
];

impl TrainConfig {
    /// Overrides defaults with `train.*` keys.
    pub fn from_kv(kv: &KeyValues, base: TrainConfig) -> Result<Self, ConfigError> {
        kv.check_known("train.", TRAIN_KEYS)?;
        let mut c = base;
        kv.set("train.beta_max", &mut c.beta.beta_max)?;
        kv.set("train.beta_constant", &mut c.beta.constant)?;
        kv.set("train.cycle_length", &mut c.beta.cycle_length)?;
        kv.set("train.kl_free_steps", &mut c.beta.kl_free_steps)?;
        kv.set("train.free_bits", &mut c.free_bits)?;
        kv.set("train.k_crop", &mut c.k_crop)?;
        kv.set("train.t_max", &mut c.t_max)?;
        kv.set("train.batch_size", &mut c.batch_size)?;
        kv.set("train.transpose", &mut c.transpose)?;
        kv.set("train.lr_peak", &mut c.lr.peak)?;
        kv.set("train.lr_warmup", &mut c.lr.warmup_steps)?;
        kv.set("train.lr_decay_steps", &mut c.lr.decay_steps)?;
        kv.set("train.lr_floor", &mut c.lr.floor)?;
        kv.set("train.grad_clip", &mut c.grad_clip)?;
        kv.set("train.steps", &mut c.steps)?;
        kv.set("train.seed", &mut c.seed)?;
        kv.set("train.log_every", &mut c.log_every)?;
        kv.set("train.checkpoint_every", &mut c.checkpoint_every)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.insert("train.beta_max", self.beta.beta_max);
        kv.insert("train.beta_constant", self.beta.constant);
        kv.insert("train.cycle_length", self.beta.cycle_length);
        kv.insert("train.kl_free_steps", self.beta.kl_free_steps);
        kv.insert("train.free_bits", self.free_bits);
        kv.insert("train.k_crop", self.k_crop);
        kv.insert("train.t_max", self.t_max);
        kv.insert("train.batch_size", self.batch_size);
        kv.insert("train.transpose", self.transpose);
        kv.insert("train.lr_peak", self.lr.peak);
        kv.insert("train.lr_warmup", self.lr.warmup_steps);
        kv.insert("train.lr_decay_steps", self.lr.decay_steps);
        kv.insert("train.lr_floor", self.lr.floor);
        kv.insert("train.grad_clip", self.grad_clip);
        kv.insert("train.steps", self.steps);
        kv.insert("train.seed", self.seed);
        kv.insert("train.log_every", self.log_every);
        kv.insert("train.checkpoint_every", self.checkpoint_every);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.beta.beta_max >= 0.0 && self.beta.beta_max <= 1.0) {
            return bad("train.beta_max", "must lie in [0, 1]");
        }
        if !(self.free_bits >= 0.0) {
            return bad("train.free_bits", "must be non-negative");
        }
        if self.k_crop == 0 || self.batch_size == 0 || self.t_max == 0 {
            return bad("train.k_crop", "crop, batch and t_max must be positive");
        }
        if self.transpose < 0 {
            return bad("train.transpose", "must be non-negative");
        }
        Ok(())
    }
}

/// Shifts every Pitch (and Chord root) token by `semitones`, folding
/// pitches that leave the range by octaves.
pub fn transpose_tokens(tokens: &[u32], vocab: &Vocab, semitones: i32) -> Vec<u32> {
    if semitones == 0 {
        return tokens.to_vec();
    }
    tokens
        .iter()
        .map(|&t| match vocab.token(t) {
            Some(Token::Pitch(p)) => vocab
                .id(Token::Pitch(fold_pitch(p as i32 + semitones)))
                .unwrap_or(t),
            Some(Token::Chord(c)) if c > 0 => {
                let (root, quality) = ((c - 1) / 11, (c - 1) % 11);
                let r = (root as i32 + semitones).rem_euclid(12) as u8;
                vocab.id(Token::Chord(1 + r * 11 + quality)).unwrap_or(t)
            }
            _ => t,
        })
        .collect()
}

/// Statistics of one optimisation step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub beta: f64,
    pub nll: f64,
    pub kl_raw: f64,
    pub kl_clamped: f64,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step,lr,beta,nll,kl_raw,kl_clamped,grad_norm";

impl StepStats {
    pub fn log_line(&self) -> String {
        format!(
            "{},{:.6e},{:.4},{:.6},{:.6},{:.6},{:.4}",
            self.step, self.lr, self.beta, self.nll, self.kl_raw, self.kl_clamped, self.grad_norm
        )
    }
}

/// Owns parameters and optimiser state for one training run.
pub struct Trainer<M: Objective> {
    pub model: M,
    pub store: ParamStore,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub step: u64,
    pub vocab: Vocab,
    rng: ChaCha8Rng,
}

impl<M: Objective> Trainer<M> {
    pub fn new(model: M, store: ParamStore, cfg: TrainConfig, vocab: Vocab) -> Self {
        let adam = AdamState::new(&store);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
        Trainer {
            model,
            store,
            adam,
            cfg,
            step: 0,
            vocab,
            rng,
        }
    }

    /// Continues from saved optimiser state.
    pub fn resume(model: M, store: ParamStore, adam: AdamState, step: u64, cfg: TrainConfig, vocab: Vocab) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e ^ step);
        Trainer {
            model,
            store,
            adam,
            cfg,
            step,
            vocab,
            rng,
        }
    }

    /// Draws a batch of random crops from `corpus`.
    pub fn sample_batch(&mut self, corpus: &[Example]) -> Result<Vec<Example>, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let ex = &corpus[self.rng.gen_range(0..corpus.len())];
            let mut crop = ex.random_crop(self.cfg.k_crop, &mut self.rng);
            while crop.tokens.len() > self.cfg.t_max && crop.n_bars() > 1 {
                let k = crop.n_bars();
                crop = crop.crop(0, k - 1);
            }
            batch.push(crop);
        }
        Ok(batch)
    }

    /// Teacher-forced forward and backward over `batch`, then one Adam
    /// update. Each example is transposed by a random key shift.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepStats, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        for ex in batch {
            if ex.tokens.len() > self.cfg.t_max {
                return Err(TrainError::OomGuard {
                    len: ex.tokens.len(),
                    t_max: self.cfg.t_max,
                });
            }
        }
        let beta = beta_schedule(self.step, &self.cfg.beta);
        let lr = lr_schedule(self.step, &self.cfg.lr);
        let mut total = Gradients::zeros_like(&self.store);
        let (mut nll, mut kl_raw, mut kl_clamped) = (0.0, 0.0, 0.0);
        for ex in batch {
            let shift = if self.cfg.transpose > 0 {
                self.rng.gen_range(-self.cfg.transpose..=self.cfg.transpose)
            } else {
                0
            };
            let shifted = Example {
                tokens: transpose_tokens(&ex.tokens, &self.vocab, shift),
                ..ex.clone()
            };
            let mut g = Graph::new(&self.store);
            let parts = self
                .model
                .loss(&mut g, &shifted, beta, self.cfg.free_bits, &mut self.rng)?;
            let grads = g.backward(parts.loss).map_err(ModelError::from)?;
            total.accumulate(&grads);
            nll += parts.nll;
            kl_raw += parts.kl_raw;
            kl_clamped += parts.kl_clamped;
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n);
        let grad_norm = if self.cfg.grad_clip > 0.0 {
            total.clip_global_norm(self.cfg.grad_clip)
        } else {
            total.global_norm()
        };
        adam_step(&mut self.store, &total, &mut self.adam, lr);
        let stats = StepStats {
            step: self.step,
            lr,
            beta,
            nll: nll / n,
            kl_raw: kl_raw / n,
            kl_clamped: kl_clamped / n,
            grad_norm,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Token-weighted mean NLL over `examples`, with `z = mu`.
    pub fn evaluate(&self, examples: &[Example]) -> Result<f64, TrainError> {
        evaluate_nll(&self.model, &self.store, examples)
    }

    /// Runs until `cfg.steps`, appending a record every `log_every` steps.
    /// `on_checkpoint` is called every `checkpoint_every` steps and at the end.
    pub fn fit<W: Write>(
        &mut self,
        corpus: &[Example],
        mut log: Option<&mut W>,
        mut on_checkpoint: impl FnMut(&Self) -> Result<(), TrainError>,
    ) -> Result<Vec<StepStats>, TrainError> {
        let mut history = Vec::new();
        if let Some(w) = log.as_deref_mut() {
            if self.step == 0 {
                writeln!(w, "{LOG_HEADER}")?;
            }
        }
        while self.step < self.cfg.steps {
            let batch = self.sample_batch(corpus)?;
            let stats = self.train_step(&batch)?;
            if self.cfg.log_every > 0 && (stats.step % self.cfg.log_every == 0 || self.step == self.cfg.steps) {
                log::info!("{}", stats.log_line());
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", stats.log_line())?;
                }
                history.push(stats);
            }
            if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                on_checkpoint(self)?;
            }
        }
        on_checkpoint(self)?;
        Ok(history)
    }
}

pub fn evaluate_nll<M: Objective>(model: &M, store: &ParamStore, examples: &[Example]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in examples {
        let mut g = Graph::new(store);
        let parts = model.eval_loss(&mut g, ex)?;
        sum += parts.nll * parts.n_tokens as f64;
        count += parts.n_tokens;
    }
    Ok(sum / count as f64)
}
