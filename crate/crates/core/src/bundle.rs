//! Checkpoints that carry everything needed to run a model: parameters,
//! model configuration, vocabulary resolution and attribute bins.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::attributes::AttributeBins;
use crate::autodiff::{AdamState, ParamStore};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, KeyValues};
use crate::remi::Vocab;
use crate::transformer::{ConditioningMode, Decoder, ModelConfig, ModelError};
use crate::vae::{ConditionedLm, StyleModel};

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: ModelKind, found: ModelKind },
    #[error("bad checkpoint metadata {key}: {msg}")]
    Meta { key: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Encoder, posterior heads, attribute embeddings and conditioned decoder.
    Style,
    /// A plain decoder, unconditional or with external conditions.
    Lm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Style => "style",
            ModelKind::Lm => "lm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "style" => Ok(ModelKind::Style),
            "lm" => Ok(ModelKind::Lm),
            _ => Err(format!("unknown model kind {s:?}")),
        }
    }
}

/// Decoder parameter prefix shared by both kinds.
pub const DECODER_PREFIX: &str = "dec";

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    pub bins: AttributeBins,
    pub sub_beats_per_bar: u16,
    pub step: u64,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
    /// Extra metadata, e.g. the training configuration.
    pub extra: KeyValues,
}

fn join(c: &[f64; 7]) -> String {
    c.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split7(key: &str, s: &str) -> Result<[f64; 7], BundleError> {
    let bad = |msg: String| BundleError::Meta { key: key.into(), msg };
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| bad(format!("{} cut-offs, expected 7", v.len())))
}

impl ModelBundle {
    /// Fresh parameters for a model of `kind`.
    pub fn init<R: Rng>(
        kind: ModelKind,
        cfg: ModelConfig,
        bins: AttributeBins,
        sub_beats_per_bar: u16,
        rng: &mut R,
    ) -> Result<Self, BundleError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        match kind {
            ModelKind::Style => {
                StyleModel::new(&mut store, &cfg, rng)?;
            }
            ModelKind::Lm => {
                Decoder::new(&mut store, DECODER_PREFIX, &cfg, rng)?;
            }
        }
        Ok(ModelBundle {
            kind,
            cfg,
            bins,
            sub_beats_per_bar,
            step: 0,
            store,
            adam: None,
            extra: KeyValues::default(),
        })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.sub_beats_per_bar)
    }

    pub fn style_model(&self) -> Result<StyleModel, BundleError> {
        self.expect(ModelKind::Style)?;
        Ok(StyleModel::lookup(&self.store, &self.cfg)?)
    }

    pub fn lm(&self) -> Result<ConditionedLm, BundleError> {
        self.expect(ModelKind::Lm)?;
        Ok(ConditionedLm {
            decoder: Decoder::lookup(&self.store, DECODER_PREFIX, &self.cfg)?,
        })
    }

    fn expect(&self, kind: ModelKind) -> Result<(), BundleError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BundleError::WrongKind {
                expected: kind,
                found: self.kind,
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), BundleError> {
        let mut kv = KeyValues::default();
        kv.insert("kind", self.kind);
        kv.insert("sub_beats_per_bar", self.sub_beats_per_bar);
        kv.insert("bins.rhym", join(&self.bins.rhym_cutoffs));
        kv.insert("bins.poly", join(&self.bins.poly_cutoffs));
        self.cfg.to_kv(&mut kv);
        for (k, v) in self.extra.iter() {
            kv.insert(k, v);
        }
        let meta: BTreeMap<String, String> = kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Checkpoint::new(self.step, meta, self.store.clone(), self.adam.clone()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BundleError> {
        let ckpt = Checkpoint::load(path)?;
        let mut kv = KeyValues::default();
        let mut extra = KeyValues::default();
        for (k, v) in &ckpt.meta {
            kv.insert(k.as_str(), v);
            if !k.starts_with("model.")
                && !k.starts_with("bins.")
                && !matches!(k.as_str(), "kind" | "sub_beats_per_bar" | "adam.step")
            {
                extra.insert(k.as_str(), v);
            }
        }
        let meta = |key: &str| -> Result<&str, BundleError> { Ok(ckpt.meta_value(key)?) };
        let kind: ModelKind = meta("kind")?.parse().map_err(|msg| BundleError::Meta {
            key: "kind".into(),
            msg,
        })?;
        let sub_beats_per_bar: u16 = meta("sub_beats_per_bar")?.parse().map_err(|_| BundleError::Meta {
            key: "sub_beats_per_bar".into(),
            msg: "not an integer".into(),
        })?;
        let bins = AttributeBins {
            rhym_cutoffs: split7("bins.rhym", meta("bins.rhym")?)?,
            poly_cutoffs: split7("bins.poly", meta("bins.poly")?)?,
        };
        let vocab = Vocab::new(sub_beats_per_bar).len();
        let cfg = ModelConfig::from_kv(&kv, ModelConfig::tiny(vocab, ConditioningMode::InAttention))?;
        cfg.validate()?;
        let bundle = ModelBundle {
            kind,
            cfg,
            bins,
            sub_beats_per_bar,
            step: ckpt.step,
            store: ckpt.params,
            adam: ckpt.adam,
            extra,
        };
        match kind {
            ModelKind::Style => {
                bundle.style_model()?;
            }
            ModelKind::Lm => {
                bundle.lm()?;
            }
        }
        Ok(bundle)
    }
}
