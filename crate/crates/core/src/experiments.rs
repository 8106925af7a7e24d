//! Evaluation protocols and the two toy-scale experiments: bar-embedding
//! re-creation with segment-level conditioning, and attribute-controlled
//! style transfer.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{compute_attributes, score_bars, AttributeBins, N_CLASSES};
use crate::autodiff::{LrSchedule, ParamStore, Tensor};
use crate::bundle::{BundleError, ModelBundle, ModelKind, DECODER_PREFIX};
use crate::corpus::{generate_synthetic, Corpus, CorpusError, Piece, Split};
use crate::decode::{generate_windowed, sliding_window_transfer, style_transfer, DecodeError, Generated, SamplingConfig};
use crate::metrics::{
    bar_fidelity, chroma_vector, grooving_vector, lm_perplexity, sim_chr, sim_grv, spearman, MetricsError, Summary,
};
use crate::midi::QuantizedScore;
use crate::remi::{detokenize, RemiError, Vocab};
use crate::train::{evaluate_nll, transpose_tokens, TrainConfig, TrainError, Trainer};
use crate::transformer::{extract_bar_embedding, ConditioningMode, Decoder, ModelConfig, ModelError};
use crate::vae::{BetaSchedule, ConditionedLm, Example, StyleModel};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Remi(#[from] RemiError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("{0}")]
    Setup(String),
}

/// A fixed-length excerpt of a corpus piece.
#[derive(Debug, Clone)]
pub struct Excerpt {
    pub id: String,
    pub tokens: Vec<u32>,
    pub score: QuantizedScore,
}

/// `n` excerpts of `bars` bars drawn from the test split, then validation,
/// then training pieces. Pieces are reused when the corpus is small.
pub fn select_excerpts(corpus: &Corpus, n: usize, bars: usize, seed: u64) -> Result<Vec<Excerpt>, ExperimentError> {
    let vocab = corpus.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<&Piece> = Vec::new();
    for split in [Split::Test, Split::Val, Split::Train] {
        let mut ps: Vec<&Piece> = corpus.split(split).filter(|p| p.entry.n_bars > 0).collect();
        ps.shuffle(&mut rng);
        pool.extend(ps);
    }
    if pool.is_empty() {
        return Err(ExperimentError::Setup("corpus has no non-empty pieces".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let piece = pool[i % pool.len()];
        let ex = piece.example();
        let k = ex.n_bars();
        let len = bars.min(k);
        let start = if k > len { rng.gen_range(0..=k - len) } else { 0 };
        let tokens = ex.crop(start, len).tokens;
        let score = detokenize(&tokens, &vocab)?.score;
        out.push(Excerpt {
            id: format!("{}@{start}", piece.entry.id),
            tokens,
            score,
        });
    }
    Ok(out)
}

/// Parameters of the attribute-control protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Largest absolute class shift drawn per attribute and attribute set.
    pub max_shift: i32,
    /// Decoding window in bars; 0 decodes each excerpt in one pass.
    pub window: usize,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            max_shift: 3,
            window: 0,
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

fn transfer<R: Rng>(
    model: &StyleModel,
    store: &ParamStore,
    source: &[u32],
    rhym: &[u8],
    poly: &[u8],
    cfg: &ProtocolConfig,
    rng: &mut R,
) -> Result<Generated, DecodeError> {
    if cfg.window == 0 {
        style_transfer(model, store, source, rhym, poly, &cfg.sampling, rng)
    } else {
        sliding_window_transfer(model, store, source, rhym, poly, cfg.window, &cfg.sampling, rng)
    }
}

fn shifted(classes: &[u8], delta: i32) -> Vec<u8> {
    classes
        .iter()
        .map(|&c| (c as i32 + delta).clamp(0, N_CLASSES as i32 - 1) as u8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting1Report {
    pub excerpts: usize,
    pub attr_sets: usize,
    pub samples: usize,
    pub bars: usize,
    pub truncated: usize,
    pub rho_rhym: f64,
    pub rho_poly: f64,
    /// Requested rhythm class against achieved polyphony.
    pub rho_poly_given_rhym: f64,
    /// Requested polyphony class against achieved rhythm.
    pub rho_rhym_given_poly: f64,
    pub sim_chr: Summary,
    pub sim_grv: Summary,
    pub ppl: Option<Summary>,
}

impl fmt::Display for Setting1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[setting 1]")?;
        writeln!(f, "excerpts {}", self.excerpts)?;
        writeln!(f, "attr_sets {}", self.attr_sets)?;
        writeln!(f, "samples {}", self.samples)?;
        writeln!(f, "bars {}", self.bars)?;
        writeln!(f, "truncated_bars {}", self.truncated)?;
        writeln!(f, "rho_rhym {:.4}", self.rho_rhym)?;
        writeln!(f, "rho_poly {:.4}", self.rho_poly)?;
        writeln!(f, "rho_poly|rhym {:.4}", self.rho_poly_given_rhym)?;
        writeln!(f, "rho_rhym|poly {:.4}", self.rho_rhym_given_poly)?;
        writeln!(f, "sim_chr {}", self.sim_chr)?;
        writeln!(f, "sim_grv {}", self.sim_grv)?;
        match &self.ppl {
            Some(p) => writeln!(f, "ppl {p}"),
            None => writeln!(f, "ppl n/a"),
        }
    }
}

/// Transfers each excerpt under `attr_sets` random attribute shifts and
/// correlates requested classes with achieved raw scores, bar by bar.
pub fn evaluate_setting1(
    model: &StyleModel,
    store: &ParamStore,
    bins: &AttributeBins,
    excerpts: &[Excerpt],
    attr_sets: usize,
    cfg: &ProtocolConfig,
    fluency_lm: Option<(&Decoder, &ParamStore)>,
) -> Result<Setting1Report, ExperimentError> {
    if excerpts.is_empty() || attr_sets == 0 {
        return Err(ExperimentError::Setup("setting 1 needs at least one excerpt and attribute set".into()));
    }
    let vocab = Vocab::new(excerpts[0].score.sub_beats_per_bar);
    let (mut req_r, mut req_p, mut got_r, mut got_p) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut chr, mut grv, mut ppl) = (Vec::new(), Vec::new(), Vec::new());
    let mut truncated = 0;
    for (i, ex) in excerpts.iter().enumerate() {
        let attrs = compute_attributes(&ex.score, bins);
        let src_r: Vec<u8> = attrs.iter().map(|a| a.a_rhym).collect();
        let src_p: Vec<u8> = attrs.iter().map(|a| a.a_poly).collect();
        for j in 0..attr_sets {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((i as u64) << 32) ^ (j as u64 + 1));
            let dr = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
            let dp = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
            let (rr, rp) = (shifted(&src_r, dr), shifted(&src_p, dp));
            let gen = transfer(model, store, &ex.tokens, &rr, &rp, cfg, &mut rng)?;
            truncated += gen.truncated.iter().filter(|&&t| t).count();
            let out = detokenize(&gen.tokens, &vocab)?.score;
            for ((r, p), (sr, sp)) in rr.iter().zip(&rp).zip(score_bars(&out)) {
                req_r.push(*r as f64);
                req_p.push(*p as f64);
                got_r.push(sr);
                got_p.push(sp);
            }
            let (c, g) = bar_fidelity(&ex.score, &out)?;
            chr.push(c);
            grv.push(g);
            if let Some((lm, lm_store)) = fluency_lm {
                ppl.push(lm_perplexity(lm, lm_store, &gen.tokens)?);
            }
        }
    }
    let rho = |a: &[f64], s: &[f64]| spearman(a, s).unwrap_or(0.0);
    Ok(Setting1Report {
        excerpts: excerpts.len(),
        attr_sets,
        samples: excerpts.len() * attr_sets,
        bars: req_r.len(),
        truncated,
        rho_rhym: rho(&req_r, &got_r),
        rho_poly: rho(&req_p, &got_p),
        rho_poly_given_rhym: rho(&req_r, &got_p),
        rho_rhym_given_poly: rho(&req_p, &got_r),
        sim_chr: Summary::of(&chr),
        sim_grv: Summary::of(&grv),
        ppl: fluency_lm.map(|_| Summary::of(&ppl)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting2Report {
    pub excerpts: usize,
    pub repeats: usize,
    pub pairs: usize,
    /// Fidelity of each generation to its source.
    pub sim_chr: Summary,
    pub sim_grv: Summary,
    /// Similarity between generations of the same excerpt; lower is more diverse.
    pub div_chr: Summary,
    pub div_grv: Summary,
}

impl fmt::Display for Setting2Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[setting 2]")?;
        writeln!(f, "excerpts {}", self.excerpts)?;
        writeln!(f, "repeats {}", self.repeats)?;
        writeln!(f, "pairs {}", self.pairs)?;
        writeln!(f, "sim_chr {}", self.sim_chr)?;
        writeln!(f, "sim_grv {}", self.sim_grv)?;
        writeln!(f, "div_chr {}", self.div_chr)?;
        writeln!(f, "div_grv {}", self.div_grv)
    }
}

/// Samples `repeats` transfers per excerpt under one random attribute
/// shift and compares every pair of them.
pub fn evaluate_setting2(
    model: &StyleModel,
    store: &ParamStore,
    bins: &AttributeBins,
    excerpts: &[Excerpt],
    repeats: usize,
    cfg: &ProtocolConfig,
) -> Result<Setting2Report, ExperimentError> {
    if excerpts.is_empty() || repeats < 2 {
        return Err(ExperimentError::Setup("setting 2 needs at least one excerpt and two repeats".into()));
    }
    let vocab = Vocab::new(excerpts[0].score.sub_beats_per_bar);
    let (mut chr, mut grv, mut dchr, mut dgrv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, ex) in excerpts.iter().enumerate() {
        let attrs = compute_attributes(&ex.score, bins);
        let src_r: Vec<u8> = attrs.iter().map(|a| a.a_rhym).collect();
        let src_p: Vec<u8> = attrs.iter().map(|a| a.a_poly).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((i as u64) << 32));
        let dr = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        let dp = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
        let (rr, rp) = (shifted(&src_r, dr), shifted(&src_p, dp));
        let mut outs = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let gen = transfer(model, store, &ex.tokens, &rr, &rp, cfg, &mut rng)?;
            let out = detokenize(&gen.tokens, &vocab)?.score;
            let (c, g) = bar_fidelity(&ex.score, &out)?;
            chr.push(c);
            grv.push(g);
            outs.push(out);
        }
        for a in 0..repeats {
            for b in a + 1..repeats {
                let (c, g) = bar_fidelity(&outs[a], &outs[b])?;
                dchr.push(c);
                dgrv.push(g);
            }
        }
    }
    Ok(Setting2Report {
        excerpts: excerpts.len(),
        repeats,
        pairs: dchr.len(),
        sim_chr: Summary::of(&chr),
        sim_grv: Summary::of(&grv),
        div_chr: Summary::of(&dchr),
        div_grv: Summary::of(&dgrv),
    })
}

fn desk_lr(steps: u64, peak: f64) -> LrSchedule {
    LrSchedule {
        warmup_steps: (steps / 40).max(1),
        peak,
        decay_steps: steps,
        floor: peak / 20.0,
    }
}

/// Settings of the bar-embedding re-creation experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentExperimentConfig {
    pub n_pieces: usize,
    pub bars_per_piece: usize,
    pub seed: u64,
    /// Decoder size shared by the extractor and both compared models.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Extractor layer whose mean-pooled states become bar embeddings.
    pub embed_layer: usize,
    /// Decoding window for re-creation; 0 decodes each piece in one pass.
    pub window: usize,
    /// Training pieces are added in every key shift up to this many
    /// semitones, each with its own bar embeddings.
    pub transpose: i32,
    pub sampling: SamplingConfig,
}

impl SegmentExperimentConfig {
    pub fn toy(seed: u64) -> Self {
        let vocab = Vocab::new(16).len();
        let mut model = ModelConfig::tiny(vocab, ConditioningMode::Unconditional);
        model.max_bars = 64;
        let steps = 8000;
        SegmentExperimentConfig {
            n_pieces: 200,
            bars_per_piece: 16,
            seed,
            model,
            train: TrainConfig {
                beta: BetaSchedule {
                    beta_max: 0.0,
                    constant: true,
                    ..BetaSchedule::default()
                },
                k_crop: 4,
                batch_size: 4,
                transpose: 0,
                lr: desk_lr(steps, 1e-3),
                steps,
                seed,
                log_every: 500,
                checkpoint_every: 0,
                ..TrainConfig::default()
            },
            embed_layer: 1,
            window: 4,
            transpose: 6,
            sampling: SamplingConfig {
                seed,
                ..SamplingConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub val_nll_unconditional: f64,
    pub val_nll_in_attention: f64,
    pub recreated_bars: usize,
    pub recreation_chr: Summary,
    pub recreation_grv: Summary,
    pub random_chr: Summary,
    pub random_grv: Summary,
    pub seconds: f64,
}

impl fmt::Display for SegmentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[bar-embedding re-creation]")?;
        writeln!(f, "val_nll_unconditional {:.4}", self.val_nll_unconditional)?;
        writeln!(f, "val_nll_in_attention {:.4}", self.val_nll_in_attention)?;
        writeln!(f, "recreated_bars {}", self.recreated_bars)?;
        writeln!(f, "recreation_sim_chr {}", self.recreation_chr)?;
        writeln!(f, "recreation_sim_grv {}", self.recreation_grv)?;
        writeln!(f, "random_pairs_sim_chr {}", self.random_chr)?;
        writeln!(f, "random_pairs_sim_grv {}", self.random_grv)?;
        writeln!(f, "seconds {:.1}", self.seconds)
    }
}

fn embed_example(
    lm: &Decoder,
    store: &ParamStore,
    ex: &Example,
    layer: usize,
) -> Result<Example, ModelError> {
    let spans = crate::remi::bar_slices(&ex.tokens);
    let mut data = Vec::with_capacity(spans.len() * lm.d_model);
    for s in &spans {
        data.extend(extract_bar_embedding(lm, store, &ex.tokens[s.clone()], layer)?);
    }
    Ok(Example {
        conditions: Some(Tensor::matrix(spans.len(), lm.d_model, data)),
        ..ex.clone()
    })
}

fn split_examples(corpus: &Corpus, split: Split) -> Vec<Example> {
    corpus.split(split).filter(|p| p.entry.n_bars > 0).map(Piece::example).collect()
}

/// Trains an unconditional decoder, uses it as the frozen bar-embedding
/// extractor, trains an in-attention decoder on those embeddings, then
/// compares held-out NLL over training-length chunks and re-creates
/// held-out pieces from their embeddings alone.
pub fn run_segment_experiment(cfg: &SegmentExperimentConfig) -> Result<SegmentReport, ExperimentError> {
    let t0 = Instant::now();
    let corpus = generate_synthetic(cfg.n_pieces, cfg.bars_per_piece, cfg.seed)?;
    let vocab = corpus.vocab();
    let base = split_examples(&corpus, Split::Train);
    let mut train = Vec::with_capacity(base.len() * (2 * cfg.transpose.max(0) as usize + 1));
    for shift in -cfg.transpose.max(0)..=cfg.transpose.max(0) {
        train.extend(base.iter().map(|e| Example {
            tokens: transpose_tokens(&e.tokens, &vocab, shift),
            ..e.clone()
        }));
    }
    let mut held: Vec<Example> = split_examples(&corpus, Split::Val);
    held.extend(split_examples(&corpus, Split::Test));
    if train.is_empty() || held.is_empty() {
        return Err(ExperimentError::Setup("corpus too small for train and held-out splits".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ucfg = cfg.model.clone();
    ucfg.mode = ConditioningMode::Unconditional;
    ucfg.vocab_size = vocab.len();
    let mut ustore = ParamStore::new();
    let udec = Decoder::new(&mut ustore, DECODER_PREFIX, &ucfg, &mut rng)?;
    let mut ut = Trainer::new(ConditionedLm { decoder: udec }, ustore, cfg.train.clone(), vocab);
    log::info!("training unconditional decoder");
    ut.fit::<std::io::Sink>(&train, None, |_| Ok(()))?;
    let k_eval = cfg.train.k_crop;
    let chunked = |exs: &[Example]| -> Vec<Example> { exs.iter().flat_map(|e| e.chunks(k_eval)).collect() };
    let val_u = ut.evaluate(&chunked(&held))?;

    let embed = |exs: &[Example]| -> Result<Vec<Example>, ModelError> {
        exs.iter()
            .map(|e| embed_example(&ut.model.decoder, &ut.store, e, cfg.embed_layer))
            .collect()
    };
    let train_c = embed(&train)?;
    let held_c = embed(&held)?;

    let mut icfg = ucfg.clone();
    icfg.mode = ConditioningMode::InAttention;
    icfg.d_cond = ucfg.d_model;
    let mut istore = ParamStore::new();
    let idec = Decoder::new(&mut istore, DECODER_PREFIX, &icfg, &mut rng)?;
    let mut it = Trainer::new(ConditionedLm { decoder: idec }, istore, cfg.train.clone(), vocab);
    log::info!("training in-attention decoder");
    it.fit::<std::io::Sink>(&train_c, None, |_| Ok(()))?;
    let val_i = evaluate_nll(&it.model, &it.store, &chunked(&held_c))?;

    let (mut chr, mut grv) = (Vec::new(), Vec::new());
    let mut sources = Vec::new();
    for (n, ex) in held_c.iter().enumerate() {
        let cond = ex.conditions.as_ref().expect("embedded");
        let rows: Vec<Vec<f64>> = (0..cond.rows()).map(|r| cond.row(r).to_vec()).collect();
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.sampling.seed ^ n as u64);
        let gen = generate_windowed(&it.model.decoder, &it.store, rows, cfg.window, &cfg.sampling, &mut srng)?;
        let src = detokenize(&ex.tokens, &vocab)?.score;
        let out = detokenize(&gen.tokens, &vocab)?.score;
        let b = src.sub_beats_per_bar;
        for (x, y) in src.bars.iter().zip(&out.bars) {
            chr.push(sim_chr(&chroma_vector(x), &chroma_vector(y)));
            grv.push(sim_grv(&grooving_vector(x, b), &grooving_vector(y, b)));
        }
        sources.push(src);
    }

    let (mut rchr, mut rgrv) = (Vec::new(), Vec::new());
    let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    if sources.len() > 1 {
        for _ in 0..chr.len() {
            let a = prng.gen_range(0..sources.len());
            let mut b = prng.gen_range(0..sources.len() - 1);
            if b >= a {
                b += 1;
            }
            let (sa, sb) = (&sources[a], &sources[b]);
            let (x, y) = (
                &sa.bars[prng.gen_range(0..sa.bars.len())],
                &sb.bars[prng.gen_range(0..sb.bars.len())],
            );
            rchr.push(sim_chr(&chroma_vector(x), &chroma_vector(y)));
            rgrv.push(sim_grv(
                &grooving_vector(x, sa.sub_beats_per_bar),
                &grooving_vector(y, sb.sub_beats_per_bar),
            ));
        }
    }

    Ok(SegmentReport {
        val_nll_unconditional: val_u,
        val_nll_in_attention: val_i,
        recreated_bars: chr.len(),
        recreation_chr: Summary::of(&chr),
        recreation_grv: Summary::of(&grv),
        random_chr: Summary::of(&rchr),
        random_grv: Summary::of(&rgrv),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Settings of the attribute-control experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleExperimentConfig {
    pub n_pieces: usize,
    pub bars_per_piece: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub excerpts: usize,
    pub attr_sets: usize,
    pub excerpt_bars: usize,
    pub protocol: ProtocolConfig,
}

impl StyleExperimentConfig {
    pub fn toy(seed: u64) -> Self {
        let vocab = Vocab::new(16).len();
        let mut model = ModelConfig::tiny(vocab, ConditioningMode::InAttention);
        model.max_bars = 128;
        let steps = 20_000;
        StyleExperimentConfig {
            n_pieces: 200,
            bars_per_piece: 16,
            seed,
            model,
            train: TrainConfig {
                k_crop: 4,
                batch_size: 2,
                lr: desk_lr(steps, 1e-3),
                steps,
                seed,
                log_every: 1000,
                checkpoint_every: 0,
                ..TrainConfig::default()
            },
            excerpts: 10,
            attr_sets: 3,
            excerpt_bars: 16,
            protocol: ProtocolConfig {
                seed,
                sampling: SamplingConfig {
                    seed,
                    ..SamplingConfig::default()
                },
                window: 4,
                ..ProtocolConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct StyleExperiment {
    pub bundle: ModelBundle,
    pub corpus: Corpus,
    pub val_nll: f64,
    pub setting1: Setting1Report,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Trains a style model on a synthetic corpus and runs setting 1.
pub fn run_style_experiment(cfg: &StyleExperimentConfig) -> Result<StyleExperiment, ExperimentError> {
    let t0 = Instant::now();
    let corpus = generate_synthetic(cfg.n_pieces, cfg.bars_per_piece, cfg.seed)?;
    let bundle = train_style_model(&corpus, cfg.model.clone(), cfg.train.clone())?;
    let model = bundle.style_model()?;
    let mut held = split_examples(&corpus, Split::Val);
    if held.is_empty() {
        held = split_examples(&corpus, Split::Train);
    }
    let held: Vec<Example> = held.iter().flat_map(|e| e.chunks(cfg.train.k_crop)).collect();
    let val_nll = evaluate_nll(&model, &bundle.store, &held)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let excerpts = select_excerpts(&corpus, cfg.excerpts, cfg.excerpt_bars, cfg.seed)?;
    let setting1 = evaluate_setting1(
        &model,
        &bundle.store,
        &bundle.bins,
        &excerpts,
        cfg.attr_sets,
        &cfg.protocol,
        None,
    )?;
    Ok(StyleExperiment {
        bundle,
        corpus,
        val_nll,
        setting1,
        train_seconds,
        eval_seconds: t1.elapsed().as_secs_f64(),
    })
}

/// Fits a fresh style model on the training split of `corpus`.
pub fn train_style_model(
    corpus: &Corpus,
    mut model: ModelConfig,
    train: TrainConfig,
) -> Result<ModelBundle, ExperimentError> {
    let vocab = corpus.vocab();
    model.vocab_size = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let bundle = ModelBundle::init(
        ModelKind::Style,
        model,
        corpus.manifest.bins.clone(),
        corpus.manifest.sub_beats_per_bar,
        &mut rng,
    )?;
    let examples = split_examples(corpus, Split::Train);
    let sm = bundle.style_model()?;
    let mut trainer = Trainer::new(sm, bundle.store, train.clone(), vocab);
    log::info!("training style model for {} steps", train.steps);
    trainer.fit::<std::io::Sink>(&examples, None, |_| Ok(()))?;
    let mut extra = crate::config::KeyValues::default();
    train.to_kv(&mut extra);
    Ok(ModelBundle {
        step: trainer.step,
        store: trainer.store,
        adam: Some(trainer.adam),
        extra,
        ..bundle
    })
}
