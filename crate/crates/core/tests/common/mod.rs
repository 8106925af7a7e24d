//! Criterion checks shared by the oracle tests and the acceptance report.
#![allow(dead_code)]

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use barmorph::attributes::{classify, compute_attributes, fit_bins};
use barmorph::autodiff::{Graph, Mask, NodeId, ParamStore, Tensor};
use barmorph::bundle::ModelBundle;
use barmorph::corpus::synthetic_piece;
use barmorph::decode::{
    entropy, nucleus_distribution, nucleus_sample, nucleus_set, sliding_window_transfer, tempered_softmax, SamplingConfig,
};
use barmorph::experiments::{
    run_segment_experiment, run_style_experiment, SegmentExperimentConfig, StyleExperiment, StyleExperimentConfig,
};
use barmorph::metrics::{
    bar_fidelity, dist_ssm, kl_quality, lm_perplexity, perplexity, sim_chr, sim_grv, sim_ins, spearman, Feature,
};
use barmorph::midi::{
    parse_midi, quantize, write_midi, Bar, Note, QuantizedScore, TempoMark, MAX_DURATION_UNITS, PITCH_MAX, PITCH_MIN,
    TEMPO_CLASSES, VELOCITY_CLASSES,
};
use barmorph::remi::{detokenize, tokenize, Vocab};
use barmorph::transformer::{Conditioner, ConditioningMode, Decoder, ModelConfig};
use barmorph::vae::{beta_schedule, kl_per_dim, BetaSchedule};

/// Outcome of one criterion.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Check {
            pass,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Check::new(false, detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_score<R: Rng>(rng: &mut R) -> QuantizedScore {
    let sub_beats = if rng.gen_bool(0.2) { 32 } else { 16 };
    let n_bars = rng.gen_range(1..=8);
    let bars = (0..n_bars)
        .map(|_| Bar {
            notes: (0..rng.gen_range(0..=12))
                .map(|_| Note {
                    sub_beat: rng.gen_range(0..sub_beats),
                    pitch: rng.gen_range(PITCH_MIN..=PITCH_MAX),
                    velocity_class: rng.gen_range(0..VELOCITY_CLASSES),
                    duration_units: rng.gen_range(1..=MAX_DURATION_UNITS),
                })
                .collect(),
            tempos: (0..rng.gen_range(0..=2))
                .map(|_| TempoMark {
                    sub_beat: rng.gen_range(0..sub_beats),
                    class: rng.gen_range(0..TEMPO_CLASSES as u8),
                })
                .collect(),
        })
        .collect();
    QuantizedScore::new(sub_beats, bars)
}

pub fn tokenizer_round_trip() -> Check {
    let t = Instant::now();
    let mut r = rng(11);
    let (mut token_fail, mut midi_fail) = (0, 0);
    for _ in 0..1000 {
        let q = random_score(&mut r);
        let vocab = Vocab::new(q.sub_beats_per_bar);
        let back = tokenize(&q, &vocab).and_then(|s| detokenize(&s.tokens, &vocab));
        if !matches!(back, Ok(d) if d.score == q && d.skipped == 0) {
            token_fail += 1;
        }
        let once = parse_midi(&write_midi(&q)).ok().and_then(|raw| quantize(&raw, q.sub_beats_per_bar).ok());
        let twice = once
            .as_ref()
            .and_then(|q1| parse_midi(&write_midi(q1)).ok())
            .and_then(|raw| quantize(&raw, q.sub_beats_per_bar).ok());
        if once.is_none() || once != twice {
            midi_fail += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Check::new(
        token_fail == 0 && midi_fail == 0 && secs < 10.0,
        format!("1000 scores: {token_fail} token mismatches, {midi_fail} MIDI non-fixed points, {secs:.2}s"),
    )
}

fn linear_scan(score: f64, cutoffs: &[f64; 7]) -> u8 {
    let mut class = 0;
    for &c in cutoffs {
        if score >= c {
            class += 1;
        }
    }
    class
}

pub fn attribute_oracle() -> Check {
    let mut r = rng(12);
    let mut mismatches = 0;
    for i in 0..100_000 {
        let cutoffs = if i % 2 == 0 {
            let mut c: [f64; 7] = std::array::from_fn(|_| r.gen_range(0.0..10.0));
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c
        } else {
            [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
        };
        let s = if r.gen_bool(0.2) {
            cutoffs[r.gen_range(0..7)]
        } else {
            r.gen_range(-1.0..11.0)
        };
        if classify(s, &cutoffs) != linear_scan(s, &cutoffs) {
            mismatches += 1;
        }
    }
    let samples: Vec<f64> = (0..10_000).map(|_| r.gen_range(0.0..1.0)).collect();
    let Ok(cutoffs) = fit_bins(&samples) else {
        return Check::fail("fit_bins rejected uniform samples");
    };
    let mut counts = [0usize; 8];
    for &s in &samples {
        counts[classify(s, &cutoffs) as usize] += 1;
    }
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / samples.len() as f64).collect();
    let worst = shares.iter().map(|s| (s - 0.125).abs()).fold(0.0, f64::max);
    Check::new(
        mismatches == 0 && worst <= 0.02,
        format!("{mismatches} mismatches in 1e5; worst bin share deviation {worst:.4}"),
    )
}

type Build = dyn Fn(&mut Graph<'_>, &[NodeId]) -> NodeId;

/// Relative error between analytic and central-difference gradients of
/// `sum(w * f(params))` for a fixed random `w`.
fn grad_case(params: Vec<Tensor>, build: &Build, r: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = params
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t))
        .collect();
    let weights = {
        let mut g = Graph::new(&store);
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(&mut g, &nodes);
        let shape = g.value(out).shape().to_vec();
        Tensor::randn(&shape, 1.0, r)
    };
    let loss_of = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(store);
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(&mut g, &nodes);
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        g.value(loss).item()
    };
    let grads = {
        let mut g = Graph::new(&store);
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(&mut g, &nodes);
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap()
    };
    let h = 1e-6;
    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    for &id in &ids {
        let analytic = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = loss_of(&store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = loss_of(&store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic[k] - numeric).powi(2);
            an += analytic[k].powi(2);
            nn += numeric.powi(2);
        }
    }
    diff.sqrt() / an.sqrt().max(nn.sqrt()).max(1e-10)
}

/// Normal samples kept at least `gap` away from `kink`.
fn away_from(shape: &[usize], kink: f64, gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = r.sample(StandardNormal);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0.3..2.0)).collect()).unwrap()
}

/// One generator per differentiable op kind: parameters plus graph builder.
fn op_cases() -> Vec<(&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)>)> {
    fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
        (r.gen_range(1..=4), r.gen_range(1..=5))
    }
    vec![
        ("param", Box::new(|r| {
            let (m, n) = dims(r);
            (vec![Tensor::randn(&[m, n], 1.0, r)], Box::new(|_g: &mut Graph<'_>, p: &[NodeId]| p[0]) as Box<Build>)
        })),
        ("input", Box::new(|r| {
            let (m, n) = dims(r);
            let c = Tensor::randn(&[m, n], 1.0, r);
            (
                vec![Tensor::randn(&[m, n], 1.0, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| {
                    let x = g.input(c.clone());
                    g.mul(p[0], x).unwrap()
                }) as Box<Build>,
            )
        })),
        ("matmul", Box::new(|r| {
            let (m, k) = dims(r);
            let n = r.gen_range(1..=4);
            let trans = r.gen_bool(0.5);
            let b = if trans { [n, k] } else { [k, n] };
            (
                vec![Tensor::randn(&[m, k], 1.0, r), Tensor::randn(&b, 1.0, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.matmul_ext(p[0], p[1], trans).unwrap()) as Box<Build>,
            )
        })),
        ("add", Box::new(|r| {
            let (m, n) = dims(r);
            let b = match r.gen_range(0..4) {
                0 => vec![m, n],
                1 => vec![1, n],
                2 => vec![m, 1],
                _ => vec![1, 1],
            };
            (
                vec![Tensor::randn(&[m, n], 1.0, r), Tensor::randn(&b, 1.0, r)],
                Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.add(p[0], p[1]).unwrap()) as Box<Build>,
            )
        })),
        ("mul", Box::new(|r| {
            let (m, n) = dims(r);
            let b = match r.gen_range(0..4) {
                0 => vec![m, n],
                1 => vec![1, n],
                2 => vec![m, 1],
                _ => vec![1, 1],
            };
            (
                vec![Tensor::randn(&[m, n], 1.0, r), Tensor::randn(&b, 1.0, r)],
                Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.mul(p[0], p[1]).unwrap()) as Box<Build>,
            )
        })),
        ("affine", Box::new(|r| {
            let (m, n) = dims(r);
            let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0));
            (
                vec![Tensor::randn(&[m, n], 1.0, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.affine(p[0], a, b)) as Box<Build>,
            )
        })),
        ("concat", Box::new(|r| {
            let m = r.gen_range(1..=4);
            let parts: Vec<Tensor> = (0..r.gen_range(1..=3)).map(|_| Tensor::randn(&[m, r.gen_range(1..=3)], 1.0, r)).collect();
            (parts, Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.concat(p).unwrap()) as Box<Build>)
        })),
        ("concat_rows", Box::new(|r| {
            let n = r.gen_range(1..=4);
            let parts: Vec<Tensor> = (0..r.gen_range(1..=3)).map(|_| Tensor::randn(&[r.gen_range(1..=3), n], 1.0, r)).collect();
            (parts, Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.concat_rows(p).unwrap()) as Box<Build>)
        })),
        ("split", Box::new(|r| {
            let m = r.gen_range(1..=4);
            let n = r.gen_range(2..=6);
            let start = r.gen_range(0..n);
            let len = r.gen_range(1..=n - start);
            (
                vec![Tensor::randn(&[m, n], 1.0, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.split(p[0], start, len).unwrap()) as Box<Build>,
            )
        })),
        ("slice_rows", Box::new(|r| {
            let m = r.gen_range(2..=6);
            let n = r.gen_range(1..=4);
            let start = r.gen_range(0..m);
            let len = r.gen_range(1..=m - start);
            (
                vec![Tensor::randn(&[m, n], 1.0, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.slice_rows(p[0], start, len).unwrap()) as Box<Build>,
            )
        })),
        ("embedding", Box::new(|r| {
            let (v, d) = (r.gen_range(2..=6), r.gen_range(1..=4));
            let ids: Vec<usize> = (0..r.gen_range(1..=8)).map(|_| r.gen_range(0..v)).collect();
            (
                vec![Tensor::randn(&[v, d], 1.0, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.embedding(p[0], &ids).unwrap()) as Box<Build>,
            )
        })),
        ("softmax", Box::new(|r| {
            let n = r.gen_range(1..=5);
            let masked = r.gen_bool(0.5);
            let mask = masked.then(|| Rc::new(Mask::causal(n)));
            (
                vec![Tensor::randn(&[n, n], 1.5, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.softmax(p[0], mask.as_ref()).unwrap()) as Box<Build>,
            )
        })),
        ("layer_norm", Box::new(|r| {
            let m = r.gen_range(1..=4);
            let n = r.gen_range(2..=6);
            (
                vec![Tensor::randn(&[m, n], 1.0, r), Tensor::randn(&[n], 1.0, r), Tensor::randn(&[n], 1.0, r)],
                Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.layer_norm(p[0], p[1], p[2]).unwrap()) as Box<Build>,
            )
        })),
        ("relu", Box::new(|r| {
            let (m, n) = dims(r);
            (vec![away_from(&[m, n], 0.0, 1e-3, r)], Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.relu(p[0])) as Box<Build>)
        })),
        ("prelu", Box::new(|r| {
            let (m, n) = dims(r);
            let a = if r.gen_bool(0.5) { 1 } else { n };
            (
                vec![away_from(&[m, n], 0.0, 1e-3, r), Tensor::randn(&[a], 0.5, r)],
                Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.prelu(p[0], p[1]).unwrap()) as Box<Build>,
            )
        })),
        ("gelu", Box::new(|r| {
            let (m, n) = dims(r);
            (vec![Tensor::randn(&[m, n], 2.0, r)], Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.gelu(p[0])) as Box<Build>)
        })),
        ("sigmoid", Box::new(|r| {
            let (m, n) = dims(r);
            (vec![Tensor::randn(&[m, n], 2.0, r)], Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.sigmoid(p[0])) as Box<Build>)
        })),
        ("softplus", Box::new(|r| {
            let (m, n) = dims(r);
            (vec![Tensor::randn(&[m, n], 2.0, r)], Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.softplus(p[0])) as Box<Build>)
        })),
        ("mean", Box::new(|r| {
            let (m, n) = dims(r);
            (vec![Tensor::randn(&[m, n], 1.0, r)], Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.mean(p[0])) as Box<Build>)
        })),
        ("sum", Box::new(|r| {
            let (m, n) = dims(r);
            (vec![Tensor::randn(&[m, n], 1.0, r)], Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.sum(p[0])) as Box<Build>)
        })),
        ("cross_entropy", Box::new(|r| {
            let m = r.gen_range(1..=4);
            let v = r.gen_range(2..=6);
            let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..v)).collect();
            (
                vec![Tensor::randn(&[m, v], 1.5, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.cross_entropy(p[0], &targets).unwrap()) as Box<Build>,
            )
        })),
        ("reparameterize", Box::new(|r| {
            let (m, n) = dims(r);
            let eps: Vec<f64> = (0..m * n).map(|_| r.sample(StandardNormal)).collect();
            (
                vec![Tensor::randn(&[m, n], 1.0, r), positive(&[m, n], r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.reparameterize_with(p[0], p[1], eps.clone()).unwrap()) as Box<Build>,
            )
        })),
        ("gaussian_kl", Box::new(|r| {
            let (m, n) = dims(r);
            (
                vec![Tensor::randn(&[m, n], 1.0, r), positive(&[m, n], r)],
                Box::new(|g: &mut Graph<'_>, p: &[NodeId]| g.gaussian_kl(p[0], p[1]).unwrap()) as Box<Build>,
            )
        })),
        ("clamp_min", Box::new(|r| {
            let (m, n) = dims(r);
            let floor = r.gen_range(-0.5..0.5);
            (
                vec![away_from(&[m, n], floor, 1e-3, r)],
                Box::new(move |g: &mut Graph<'_>, p: &[NodeId]| g.clamp_min(p[0], floor)) as Box<Build>,
            )
        })),
    ]
}

pub fn gradient_checks() -> Check {
    let t = Instant::now();
    let mut r = rng(13);
    let mut worst: (f64, &str) = (0.0, "");
    let mut failures = Vec::new();
    let cases = op_cases();
    for (name, case) in &cases {
        let mut op_worst: f64 = 0.0;
        for _ in 0..100 {
            let (params, build) = case(&mut r);
            op_worst = op_worst.max(grad_case(params, build.as_ref(), &mut r));
        }
        if op_worst > 1e-4 {
            failures.push(format!("{name} {op_worst:.2e}"));
        }
        if op_worst > worst.0 {
            worst = (op_worst, name);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Check::new(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} op kinds x 100 cases; worst rel err {:.2e} ({}); {secs:.1}s{}",
            cases.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

pub fn vae_math() -> Check {
    let mut r = rng(14);
    let (mu, sigma) = ([0.7, -1.3, 0.0], [0.5, 1.4, 0.4]);
    let closed = kl_per_dim(&mu, &sigma);
    let mut worst_mc: f64 = 0.0;
    let n = 1_000_000;
    for d in 0..3 {
        let (m, s) = (mu[d], sigma[d]);
        let mut acc = 0.0;
        for _ in 0..n {
            let eps: f64 = r.sample(StandardNormal);
            let z = m + s * eps;
            // log q(z) - log p(z)
            acc += -0.5 * eps * eps - s.ln() + 0.5 * z * z;
        }
        let est = acc / n as f64;
        worst_mc = worst_mc.max((est - closed[d]).abs() / closed[d]);
    }

    let lambda = 0.25;
    let mut store = ParamStore::new();
    let mu_id = store.add("mu", Tensor::new(vec![1, 3], vec![0.1, 1.5, -0.05]).unwrap());
    let sg_id = store.add("sigma", Tensor::new(vec![1, 3], vec![0.95, 1.2, 1.02]).unwrap());
    let kl = kl_per_dim(store.get(mu_id).data(), store.get(sg_id).data());
    let mut g = Graph::new(&store);
    let (m, s) = (g.param(mu_id), g.param(sg_id));
    let k = g.gaussian_kl(m, s).unwrap();
    let c = g.clamp_min(k, lambda);
    let loss = g.sum(c);
    let grads = g.backward(loss).unwrap();
    let (gm, gs) = (grads.param(mu_id).unwrap().data(), grads.param(sg_id).unwrap().data());
    let mut free_ok = true;
    for d in 0..3 {
        let zero = gm[d] == 0.0 && gs[d] == 0.0;
        if (kl[d] < lambda) != zero {
            free_ok = false;
        }
    }

    let sched = BetaSchedule::default();
    let warm_ok = (0..10_000).all(|t| beta_schedule(t, &sched) == 0.0);
    let at = beta_schedule(12_500, &sched);
    Check::new(
        worst_mc <= 0.01 && free_ok && warm_ok && at == 1.0,
        format!(
            "MC rel err {:.4} (1e6 samples); free-bits zero gradients {}; beta 0 below 10k {}; beta(12500) = {at}",
            worst_mc,
            if free_ok { "ok" } else { "wrong" },
            warm_ok
        ),
    )
}

fn small(mode: ConditioningMode) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_embed: if mode == ConditioningMode::PreAttention { 4 } else { 8 },
        d_ff: 12,
        d_cond: 6,
        d_z: 4,
        d_attr: 1,
        vocab_size: 20,
        max_len: 32,
        max_bars: 8,
        mode,
        init_std: 0.3,
    }
}

const TOKENS: [u32; 9] = [3, 5, 7, 9, 3, 11, 4, 3, 6];

fn spans() -> Vec<std::ops::Range<usize>> {
    vec![0..4, 4..7, 7..9]
}

fn logits(dec: &Decoder, store: &ParamStore, tokens: &[u32], cond: &Tensor) -> Tensor {
    let mut g = Graph::new(store);
    let c = g.input(cond.clone());
    let out = dec.forward(&mut g, tokens, Some(c), &spans(), None).unwrap();
    g.value(out).clone()
}

pub fn conditioning_identities() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut su = ParamStore::new();
    let du = Decoder::new(&mut su, "dec", &small(ConditioningMode::Unconditional), &mut rng(1)).unwrap();
    let mut si = ParamStore::new();
    let di = Decoder::new(&mut si, "dec", &small(ConditioningMode::InAttention), &mut rng(1)).unwrap();
    for id in su.ids() {
        let target = si.id(su.name(id)).unwrap();
        *si.get_mut(target) = su.get(id).clone();
    }
    if let Conditioner::In { w_in } = di.cond {
        si.get_mut(w_in).data_mut().fill(0.0);
    }
    let cond = Tensor::randn(&[3, 6], 1.0, &mut rng(2));
    let identical = logits(&du, &su, &TOKENS, &cond).data() == logits(&di, &si, &TOKENS, &cond).data();
    ok &= identical;
    notes.push(format!("zeroed in-attention == unconditional {identical}"));

    let mut bad = small(ConditioningMode::PreAttention);
    bad.d_embed = 8;
    let rejected = Decoder::new(&mut ParamStore::new(), "d", &bad, &mut rng(3)).is_err();
    ok &= rejected;
    notes.push(format!("pre-attention d != 2 d_e rejected {rejected}"));

    let mut sm = ParamStore::new();
    let dm = Decoder::new(&mut sm, "dec", &small(ConditioningMode::Memory), &mut rng(4)).unwrap();
    let mut g = Graph::new(&sm);
    let c = g.input(cond.clone());
    let mut trace = barmorph::transformer::AttentionTrace::default();
    dm.forward(&mut g, &TOKENS, Some(c), &spans(), Some(&mut trace)).unwrap();
    let shape = g.value(trace.probs[0][0]).shape().to_vec();
    let width = shape == [TOKENS.len(), TOKENS.len() + 3];
    ok &= width;
    notes.push(format!("memory attention {shape:?}"));

    let mut leaks = Vec::new();
    for mode in ConditioningMode::all() {
        let mut s = ParamStore::new();
        let d = Decoder::new(&mut s, "dec", &small(mode), &mut rng(5)).unwrap();
        let base = logits(&d, &s, &TOKENS, &cond);
        for j in 1..TOKENS.len() {
            let mut t = TOKENS;
            t[j] = if t[j] == 12 { 13 } else { 12 };
            let other = logits(&d, &s, &t, &cond);
            if (0..j).any(|i| base.row(i) != other.row(i)) {
                leaks.push(format!("{mode:?}@{j}"));
            }
        }
    }
    ok &= leaks.is_empty();
    notes.push(if leaks.is_empty() {
        "causality holds in all 5 modes".into()
    } else {
        format!("future leaks: {}", leaks.join(" "))
    });
    Check::new(ok, notes.join("; "))
}

pub fn nucleus_sampling() -> Check {
    let mut r = rng(15);
    let logits: Vec<f64> = (0..24).map(|_| r.gen_range(-3.0..3.0)).collect();
    let cfg = SamplingConfig {
        p: 0.9,
        tau: 1.2,
        ..SamplingConfig::default()
    };
    let dist = nucleus_distribution(&logits, cfg.p, cfg.tau);
    let mut set = nucleus_set(&tempered_softmax(&logits, cfg.tau), cfg.p);
    set.sort();
    let n = 100_000;
    let mut counts = vec![0usize; logits.len()];
    for _ in 0..n {
        counts[nucleus_sample(&logits, &cfg, &mut r) as usize] += 1;
    }
    let support: Vec<usize> = (0..logits.len()).filter(|&i| counts[i] > 0).collect();
    let mut worst_z: f64 = 0.0;
    for i in 0..logits.len() {
        let q = dist[i];
        if q > 0.0 {
            let se = (q * (1.0 - q) / n as f64).sqrt();
            worst_z = worst_z.max((counts[i] as f64 / n as f64 - q).abs() / se);
        }
    }
    let taus = [0.25, 0.5, 0.8, 1.0, 1.2, 1.6, 2.5, 5.0];
    let ents: Vec<f64> = taus.iter().map(|&t| entropy(&tempered_softmax(&logits, t))).collect();
    let monotone = ents.windows(2).all(|w| w[1] > w[0]);
    Check::new(
        support == set && worst_z <= 3.0 && monotone,
        format!(
            "nucleus {} of {} tokens, sampled support {}; worst |z| {worst_z:.2} over 1e5 draws; entropy monotone in tau {monotone}",
            set.len(),
            logits.len(),
            if support == set { "matches" } else { "differs" }
        ),
    )
}

pub fn metric_identities() -> Check {
    let mut r = rng(16);
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let c: [f64; 12] = std::array::from_fn(|_| r.gen_range(0.0..3.0) + 0.01);
        let gv: Vec<f64> = (0..16).map(|_| r.gen_range(0.0..1.0) + 0.01).collect();
        let ins: Vec<bool> = (0..17).map(|i| i == 0 || r.gen_bool(0.4)).collect();
        for v in [sim_chr(&c, &c), sim_grv(&gv, &gv), sim_ins(&ins, &ins).unwrap()] {
            worst = worst.max((v - 100.0).abs());
        }
    }
    ok &= worst < 1e-9;
    let q = synthetic_piece(8, &mut r);
    let ssm = dist_ssm(&q, &q).unwrap();
    ok &= ssm == 0.0;
    let set: Vec<QuantizedScore> = (0..4).map(|_| synthetic_piece(8, &mut r)).collect();
    let kls: Vec<f64> = [Feature::Chr, Feature::Grv, Feature::Ins]
        .iter()
        .map(|&f| kl_quality(&set, &set, f).unwrap())
        .collect();
    ok &= kls.iter().all(|&k| k == 0.0);
    let a: Vec<f64> = (0..50).map(|_| r.gen_range(-5.0..5.0)).collect();
    let up: Vec<f64> = a.iter().map(|x| x.powi(3) + 2.0).collect();
    let down: Vec<f64> = a.iter().map(|x| -x.exp()).collect();
    let (rho_up, rho_down) = (spearman(&a, &up).unwrap(), spearman(&a, &down).unwrap());
    ok &= (rho_up - 1.0).abs() < 1e-12 && (rho_down + 1.0).abs() < 1e-12;
    let direct = perplexity(&vec![-(330f64).ln(); 64]).unwrap();
    let mut cfg = small(ConditioningMode::Unconditional);
    cfg.vocab_size = 330;
    cfg.max_len = 64;
    let mut store = ParamStore::new();
    let lm = Decoder::new(&mut store, "lm", &cfg, &mut r).unwrap();
    store.get_mut(lm.out_w).data_mut().fill(0.0);
    store.get_mut(lm.out_b).data_mut().fill(0.0);
    let tokens: Vec<u32> = std::iter::once(3).chain((0..30).map(|_| r.gen_range(4..330))).collect();
    let model_ppl = lm_perplexity(&lm, &store, &tokens).unwrap();
    ok &= (direct - 330.0).abs() < 1e-6 && (model_ppl - 330.0).abs() < 1e-6;
    Check::new(
        ok,
        format!(
            "self-similarity max |100 - sim| {worst:.1e}; dist_ssm {ssm}; kl_quality {kls:?}; spearman {rho_up}/{rho_down}; uniform ppl {direct:.9} / {model_ppl:.9}"
        ),
    )
}

pub fn segment_experiment() -> Check {
    let cfg = SegmentExperimentConfig::toy(0);
    match run_segment_experiment(&cfg) {
        Err(e) => Check::fail(format!("experiment failed: {e}")),
        Ok(r) => {
            let gap_chr = r.recreation_chr.mean - r.random_chr.mean;
            let gap_grv = r.recreation_grv.mean - r.random_grv.mean;
            Check::new(
                r.val_nll_in_attention < r.val_nll_unconditional && gap_chr >= 20.0 && gap_grv >= 20.0 && r.seconds <= 3600.0,
                format!(
                    "val NLL in-attention {:.3} vs unconditional {:.3}; sim_chr {:.1} vs random {:.1} (+{gap_chr:.1}); sim_grv {:.1} vs random {:.1} (+{gap_grv:.1}); {:.0}s",
                    r.val_nll_in_attention,
                    r.val_nll_unconditional,
                    r.recreation_chr.mean,
                    r.random_chr.mean,
                    r.recreation_grv.mean,
                    r.random_grv.mean,
                    r.seconds
                ),
            )
        }
    }
}

pub fn style_experiment() -> (Check, Option<StyleExperiment>) {
    let cfg = StyleExperimentConfig::toy(0);
    match run_style_experiment(&cfg) {
        Err(e) => (Check::fail(format!("experiment failed: {e}")), None),
        Ok(x) => {
            let s = &x.setting1;
            let secs = x.train_seconds + x.eval_seconds;
            let pass = s.rho_rhym >= 0.7
                && s.rho_poly >= 0.5
                && s.rho_poly_given_rhym.abs() <= 0.3
                && s.rho_rhym_given_poly.abs() <= 0.3
                && secs <= 3600.0;
            let detail = format!(
                "rho_rhym {:.3}, rho_poly {:.3}, |rho_poly|rhym| {:.3}, |rho_rhym|poly| {:.3} over {} samples; train {:.0}s + eval {:.0}s",
                s.rho_rhym,
                s.rho_poly,
                s.rho_poly_given_rhym.abs(),
                s.rho_rhym_given_poly.abs(),
                s.samples,
                x.train_seconds,
                x.eval_seconds
            );
            (Check::new(pass, detail), Some(x))
        }
    }
}

/// Re-creates a 96-bar piece through the sliding window and compares its
/// bar fidelity to the same bars processed as six 16-bar excerpts.
pub fn long_input(bundle: &ModelBundle) -> Check {
    let run = || -> Result<Check, Box<dyn std::error::Error>> {
        let model = bundle.style_model()?;
        let vocab = bundle.vocab();
        let window = bundle.extra.get::<usize>("train.k_crop")?.unwrap_or(16).max(2);
        let piece = synthetic_piece(96, &mut rng(17));
        let cfg = SamplingConfig {
            seed: 0,
            ..SamplingConfig::default()
        };
        let recreate = |q: &QuantizedScore, seed: u64| -> Result<(usize, f64, f64), Box<dyn std::error::Error>> {
            let tokens = tokenize(q, &vocab)?.tokens;
            let attrs = compute_attributes(q, &bundle.bins);
            let rhym: Vec<u8> = attrs.iter().map(|a| a.a_rhym).collect();
            let poly: Vec<u8> = attrs.iter().map(|a| a.a_poly).collect();
            let out = sliding_window_transfer(&model, &bundle.store, &tokens, &rhym, &poly, window, &cfg, &mut rng(seed))?;
            let score = detokenize(&out.tokens, &vocab)?.score;
            let bars = out.n_bars();
            let mut padded = score.clone();
            padded.bars.resize(q.n_bars(), Bar::default());
            let (chr, grv) = bar_fidelity(q, &padded)?;
            Ok((bars, chr, grv))
        };
        let (bars, chr96, grv96) = recreate(&piece, 1)?;
        let (mut chr16, mut grv16) = (0.0, 0.0);
        for (i, chunk) in piece.bars.chunks(16).enumerate() {
            let q = QuantizedScore::new(piece.sub_beats_per_bar, chunk.to_vec());
            let (_, c, g) = recreate(&q, 2 + i as u64)?;
            chr16 += c / 6.0;
            grv16 += g / 6.0;
        }
        let drop_chr = (chr16 - chr96) / chr16;
        let drop_grv = (grv16 - grv96) / grv16;
        Ok(Check::new(
            bars == 96 && drop_chr <= 0.2 && drop_grv <= 0.2,
            format!(
                "{bars} bars out; sim_chr {chr96:.1} vs {chr16:.1} at 16 bars ({:+.1}%); sim_grv {grv96:.1} vs {grv16:.1} ({:+.1}%)",
                -100.0 * drop_chr,
                -100.0 * drop_grv
            ),
        ))
    };
    run().unwrap_or_else(|e| Check::fail(format!("error: {e}")))
}
