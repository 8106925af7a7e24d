//! Bar-level Transformer VAE: latent posterior, KL terms, annealing and
//! the style model that ties encoder, latents, attributes and decoder
//! together.

use rand::Rng;

use crate::attributes::N_CLASSES;
use crate::autodiff::{softplus, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::remi::{bar_slices, EOS};
use crate::transformer::{BarEncoder, ConditioningMode, Decoder, ModelConfig, ModelError};

/// Closed-form `KL(N(mu, sigma^2) || N(0, 1))` per dimension.
pub fn kl_per_dim(mu: &[f64], sigma: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .collect()
}

/// `sum_i max(lambda, kl_i)`.
pub fn free_bits_kl(kl: &[f64], lambda: f64) -> f64 {
    kl.iter().map(|&k| k.max(lambda)).sum()
}

/// KL weight schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub beta_max: f64,
    pub cycle_length: u64,
    /// Steps trained without any KL term.
    pub kl_free_steps: u64,
    /// Hold `beta_max` throughout instead of cycling.
    pub constant: bool,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            beta_max: 1.0,
            cycle_length: 5000,
            kl_free_steps: 10_000,
            constant: false,
        }
    }
}

/// Zero during the KL-free warm period, then repeating cycles that ramp
/// linearly from 0 to `beta_max` over their first half and hold it for
/// the second half.
pub fn beta_schedule(step: u64, cfg: &BetaSchedule) -> f64 {
    if cfg.constant {
        return cfg.beta_max;
    }
    if step < cfg.kl_free_steps {
        return 0.0;
    }
    let cycle = cfg.cycle_length.max(1);
    let pos = (step - cfg.kl_free_steps) % cycle;
    let half = cycle as f64 / 2.0;
    cfg.beta_max * (pos as f64 / half).min(1.0)
}

/// One training or evaluation item: a run of whole bars plus their
/// attribute classes and, for externally conditioned decoders, a
/// condition row per bar.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub rhym: Vec<u8>,
    pub poly: Vec<u8>,
    pub conditions: Option<Tensor>,
}

impl Example {
    pub fn n_bars(&self) -> usize {
        bar_slices(&self.tokens).len()
    }

    /// Bars `start..start + len` with their labels.
    pub fn crop(&self, start: usize, len: usize) -> Example {
        let spans = bar_slices(&self.tokens);
        let end = (start + len).min(spans.len());
        if start >= end {
            return Example {
                tokens: Vec::new(),
                rhym: Vec::new(),
                poly: Vec::new(),
                conditions: None,
            };
        }
        let tokens = self.tokens[spans[start].start..spans[end - 1].end].to_vec();
        let conditions = self.conditions.as_ref().map(|c| {
            let w = c.cols();
            Tensor::matrix(end - start, w, c.data()[start * w..end * w].to_vec())
        });
        Example {
            tokens,
            rhym: self.rhym.get(start..end).map(<[u8]>::to_vec).unwrap_or_default(),
            poly: self.poly.get(start..end).map(<[u8]>::to_vec).unwrap_or_default(),
            conditions,
        }
    }

    /// Consecutive non-overlapping crops of `len` bars (the last may be shorter).
    pub fn chunks(&self, len: usize) -> Vec<Example> {
        let len = len.max(1);
        (0..self.n_bars()).step_by(len).map(|s| self.crop(s, len)).collect()
    }

    /// A random contiguous crop of at most `k_crop` bars.
    pub fn random_crop<R: Rng>(&self, k_crop: usize, rng: &mut R) -> Example {
        let k = self.n_bars();
        if k <= k_crop {
            return self.clone();
        }
        let start = rng.gen_range(0..=k - k_crop);
        self.crop(start, k_crop)
    }

    /// Next-token targets: the sequence shifted left and closed with EOS.
    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.tokens[1..].iter().map(|&x| x as usize).collect();
        t.push(EOS as usize);
        t
    }
}

/// Loss terms recorded for one example.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub loss: NodeId,
    /// Mean per-token negative log-likelihood.
    pub nll: f64,
    /// Mean over bars of the summed per-dimension KL.
    pub kl_raw: f64,
    /// Same with the free-bits floor applied.
    pub kl_clamped: f64,
    pub n_tokens: usize,
}

/// Anything the trainer can fit.
pub trait Objective {
    fn loss(
        &self,
        g: &mut Graph<'_>,
        ex: &Example,
        beta: f64,
        lambda: f64,
        rng: &mut dyn rand::RngCore,
    ) -> Result<LossParts, ModelError>;

    /// Same loss with the posterior mean in place of a sample.
    fn eval_loss(&self, g: &mut Graph<'_>, ex: &Example) -> Result<LossParts, ModelError>;
}

/// Encoder, posterior heads, attribute embeddings and decoder.
#[derive(Debug, Clone)]
pub struct StyleModel {
    pub cfg: ModelConfig,
    pub encoder: BarEncoder,
    pub w_mu: ParamId,
    pub w_sigma: ParamId,
    pub rhym_emb: ParamId,
    pub poly_emb: ParamId,
    pub decoder: Decoder,
}

fn check_style_config(cfg: &ModelConfig) -> Result<(), ModelError> {
    cfg.validate()?;
    if cfg.d_cond != cfg.d_z + 2 * cfg.d_attr {
        return Err(ModelError::Config(format!(
            "d_cond {} must equal d_z + 2 * d_attr = {}",
            cfg.d_cond,
            cfg.d_z + 2 * cfg.d_attr
        )));
    }
    if cfg.mode == ConditioningMode::Unconditional {
        return Err(ModelError::Config("the style model needs a conditional decoder".into()));
    }
    Ok(())
}

impl StyleModel {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        check_style_config(cfg)?;
        let s = cfg.init_std;
        let encoder = BarEncoder::new(store, "enc", cfg, rng)?;
        let w_mu = store.add("vae.w_mu", Tensor::randn(&[cfg.d_model, cfg.d_z], s, rng));
        let w_sigma = store.add("vae.w_sigma", Tensor::randn(&[cfg.d_model, cfg.d_z], s, rng));
        let rhym_emb = store.add("vae.rhym_emb", Tensor::randn(&[N_CLASSES, cfg.d_attr], s, rng));
        let poly_emb = store.add("vae.poly_emb", Tensor::randn(&[N_CLASSES, cfg.d_attr], s, rng));
        let decoder = Decoder::new(store, "dec", cfg, rng)?;
        Ok(StyleModel {
            cfg: cfg.clone(),
            encoder,
            w_mu,
            w_sigma,
            rhym_emb,
            poly_emb,
            decoder,
        })
    }

    pub fn lookup(store: &ParamStore, cfg: &ModelConfig) -> Result<Self, ModelError> {
        check_style_config(cfg)?;
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {n}")))
        };
        Ok(StyleModel {
            cfg: cfg.clone(),
            encoder: BarEncoder::lookup(store, "enc", cfg)?,
            w_mu: get("vae.w_mu")?,
            w_sigma: get("vae.w_sigma")?,
            rhym_emb: get("vae.rhym_emb")?,
            poly_emb: get("vae.poly_emb")?,
            decoder: Decoder::lookup(store, "dec", cfg)?,
        })
    }

    /// `(mu, sigma)` nodes, each `K x d_z`.
    pub fn posterior_graph(
        &self,
        g: &mut Graph<'_>,
        tokens: &[u32],
        spans: &[std::ops::Range<usize>],
    ) -> Result<(NodeId, NodeId), ModelError> {
        let states = self.encoder.encode_bars(g, tokens, spans)?;
        Ok(posterior_heads(g, states, self.w_mu, self.w_sigma)?)
    }

    /// Posterior parameters of every bar of a token sequence.
    pub fn posterior(&self, store: &ParamStore, tokens: &[u32]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
        let spans = bar_slices(tokens);
        if spans.is_empty() {
            return Err(ModelError::EmptyBar);
        }
        let mut mus = Vec::with_capacity(spans.len());
        let mut sigmas = Vec::with_capacity(spans.len());
        for s in &spans {
            let state = self.encoder.encode_bar(store, &tokens[s.clone()])?;
            let (m, sg) = posterior(&state, store.get(self.w_mu), store.get(self.w_sigma));
            mus.push(m);
            sigmas.push(sg);
        }
        Ok((mus, sigmas))
    }

    /// `c_k = [z_k; rhythm embedding; polyphony embedding]`.
    pub fn condition_rows(&self, store: &ParamStore, z: &[Vec<f64>], rhym: &[u8], poly: &[u8]) -> Vec<Vec<f64>> {
        let re = store.get(self.rhym_emb);
        let pe = store.get(self.poly_emb);
        z.iter()
            .zip(rhym.iter().zip(poly))
            .map(|(zk, (&r, &p))| {
                let mut c = zk.clone();
                c.extend_from_slice(re.row(r.min(7) as usize));
                c.extend_from_slice(pe.row(p.min(7) as usize));
                c
            })
            .collect()
    }

    fn condition_graph(&self, g: &mut Graph<'_>, z: NodeId, ex: &Example) -> Result<NodeId, ModelError> {
        let re = g.param(self.rhym_emb);
        let pe = g.param(self.poly_emb);
        let ri: Vec<usize> = ex.rhym.iter().map(|&r| r as usize).collect();
        let pi: Vec<usize> = ex.poly.iter().map(|&p| p as usize).collect();
        let r = g.embedding(re, &ri)?;
        let p = g.embedding(pe, &pi)?;
        Ok(g.concat(&[z, r, p])?)
    }

    fn loss_with(
        &self,
        g: &mut Graph<'_>,
        ex: &Example,
        beta: f64,
        lambda: f64,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<LossParts, ModelError> {
        let spans = bar_slices(&ex.tokens);
        let k = spans.len();
        if k == 0 {
            return Err(ModelError::EmptyBar);
        }
        if ex.rhym.len() != k || ex.poly.len() != k {
            return Err(ModelError::BadPartition(format!(
                "{k} bars but {} / {} attribute labels",
                ex.rhym.len(),
                ex.poly.len()
            )));
        }
        let (mu, sigma) = self.posterior_graph(g, &ex.tokens, &spans)?;
        let z = match rng {
            Some(mut rng) => g.reparameterize(mu, sigma, &mut rng)?,
            None => mu,
        };
        let c = self.condition_graph(g, z, ex)?;
        let logits = self.decoder.forward(g, &ex.tokens, Some(c), &spans, None)?;
        let nll = g.cross_entropy(logits, &ex.targets())?;
        let kl = g.gaussian_kl(mu, sigma)?;
        let kl_raw = g.value(kl).data().iter().sum::<f64>() / k as f64;
        let clamped = g.clamp_min(kl, lambda);
        let kl_sum = g.sum(clamped);
        let kl_clamped = g.value(kl_sum).item() / k as f64;
        let loss = if beta == 0.0 {
            nll
        } else {
            let term = g.affine(kl_sum, beta / k as f64, 0.0);
            g.add(nll, term)?
        };
        Ok(LossParts {
            loss,
            nll: g.value(nll).item(),
            kl_raw,
            kl_clamped,
            n_tokens: ex.tokens.len(),
        })
    }
}

impl Objective for StyleModel {
    fn loss(
        &self,
        g: &mut Graph<'_>,
        ex: &Example,
        beta: f64,
        lambda: f64,
        rng: &mut dyn rand::RngCore,
    ) -> Result<LossParts, ModelError> {
        self.loss_with(g, ex, beta, lambda, Some(rng))
    }

    fn eval_loss(&self, g: &mut Graph<'_>, ex: &Example) -> Result<LossParts, ModelError> {
        self.loss_with(g, ex, 0.0, 0.0, None)
    }
}

/// `mu = s W_mu`, `sigma = softplus(s W_sigma)` on graph nodes.
pub fn posterior_heads(
    g: &mut Graph<'_>,
    states: NodeId,
    w_mu: ParamId,
    w_sigma: ParamId,
) -> Result<(NodeId, NodeId), crate::autodiff::AutodiffError> {
    let wm = g.param(w_mu);
    let ws = g.param(w_sigma);
    let mu = g.matmul(states, wm)?;
    let pre = g.matmul(states, ws)?;
    let sigma = g.softplus(pre);
    Ok((mu, sigma))
}

/// Posterior parameters for one bar state.
pub fn posterior(state: &[f64], w_mu: &Tensor, w_sigma: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d_z = w_mu.cols();
    let mut mu = vec![0.0; d_z];
    let mut sigma = vec![0.0; d_z];
    for (i, &s) in state.iter().enumerate() {
        for j in 0..d_z {
            mu[j] += s * w_mu.row(i)[j];
            sigma[j] += s * w_sigma.row(i)[j];
        }
    }
    for v in &mut sigma {
        *v = softplus(*v);
    }
    (mu, sigma)
}

/// An externally conditioned (or unconditional) decoder trained on
/// teacher-forced next-token prediction alone.
#[derive(Debug, Clone)]
pub struct ConditionedLm {
    pub decoder: Decoder,
}

impl ConditionedLm {
    fn nll(&self, g: &mut Graph<'_>, ex: &Example) -> Result<LossParts, ModelError> {
        let spans = bar_slices(&ex.tokens);
        if spans.is_empty() {
            return Err(ModelError::EmptyBar);
        }
        let c = match (&self.decoder.mode, &ex.conditions) {
            (ConditioningMode::Unconditional, _) => None,
            (_, Some(t)) => Some(g.input(t.clone())),
            (_, None) => return Err(ModelError::Config("example lacks conditions".into())),
        };
        let logits = self.decoder.forward(g, &ex.tokens, c, &spans, None)?;
        let nll = g.cross_entropy(logits, &ex.targets())?;
        Ok(LossParts {
            loss: nll,
            nll: g.value(nll).item(),
            kl_raw: 0.0,
            kl_clamped: 0.0,
            n_tokens: ex.tokens.len(),
        })
    }
}

impl Objective for ConditionedLm {
    fn loss(
        &self,
        g: &mut Graph<'_>,
        ex: &Example,
        _beta: f64,
        _lambda: f64,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<LossParts, ModelError> {
        self.nll(g, ex)
    }

    fn eval_loss(&self, g: &mut Graph<'_>, ex: &Example) -> Result<LossParts, ModelError> {
        self.nll(g, ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_per_dim(&[0.0], &[1.0]), vec![0.0]);
        assert!((kl_per_dim(&[1.0], &[1.0])[0] - 0.5).abs() < 1e-15);
        assert!(kl_per_dim(&[0.3, -2.0], &[0.2, 3.0]).iter().all(|&k| k > 0.0));
    }

    #[test]
    fn free_bits_examples() {
        assert_eq!(free_bits_kl(&[0.0; 16], 0.25), 4.0);
        assert_eq!(free_bits_kl(&[1.0; 16], 0.25), 16.0);
    }

    #[test]
    fn beta_examples() {
        let cfg = BetaSchedule::default();
        assert_eq!(beta_schedule(3000, &cfg), 0.0);
        assert_eq!(beta_schedule(9999, &cfg), 0.0);
        assert_eq!(beta_schedule(10_000, &cfg), 0.0);
        assert_eq!(beta_schedule(11_250, &cfg), 0.5);
        assert_eq!(beta_schedule(12_500, &cfg), 1.0);
        assert_eq!(beta_schedule(14_999, &cfg), 1.0);
        assert_eq!(beta_schedule(15_000, &cfg), 0.0);
    }

    #[test]
    fn zero_state_posterior() {
        let w = Tensor::zeros(&[4, 3]);
        let (mu, sigma) = posterior(&[0.0; 4], &w, &w);
        assert_eq!(mu, vec![0.0; 3]);
        for s in sigma {
            assert!((s - 2f64.ln()).abs() < 1e-15);
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_embed: 8,
            d_ff: 8,
            d_cond: 8,
            d_z: 4,
            d_attr: 2,
            vocab_size: 16,
            max_len: 64,
            max_bars: 8,
            mode: ConditioningMode::InAttention,
            init_std: 0.1,
        }
    }

    fn example() -> Example {
        Example {
            tokens: vec![3, 4, 5, 6, 3, 7, 8],
            rhym: vec![1, 6],
            poly: vec![0, 7],
            conditions: None,
        }
    }

    #[test]
    fn beta_zero_loss_is_reconstruction_only() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = StyleModel::new(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let parts = model.loss(&mut g, &example(), 0.0, 0.25, &mut rng).unwrap();
        assert_eq!(g.value(parts.loss).item(), parts.nll);
        assert!(parts.kl_clamped >= 0.25 * 4.0 - 1e-12);
    }

    #[test]
    fn encoder_gets_gradient_through_reconstruction() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = StyleModel::new(&mut store, &tiny_cfg(), &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let parts = model.loss(&mut g, &example(), 0.0, 0.25, &mut rng).unwrap();
        let grads = g.backward(parts.loss).unwrap();
        let wq = store.id("enc.layer0.wq").unwrap();
        assert!(grads.param(wq).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn crops_keep_labels_aligned() {
        let ex = example();
        let c = ex.crop(1, 5);
        assert_eq!(c.tokens, vec![3, 7, 8]);
        assert_eq!((c.rhym, c.poly), (vec![6], vec![7]));
        assert_eq!(ex.targets(), vec![4, 5, 6, 3, 7, 8, EOS as usize]);
        let parts = ex.chunks(1);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].tokens, vec![3, 7, 8]);
    }
}
