//! Fidelity, quality, control, fluency and diversity metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::midi::{Bar, QuantizedScore};
use crate::remi::EOS;
use crate::transformer::{Decoder, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input set")]
    EmptySet,
    #[error("constant input; rank correlation undefined")]
    DegenerateInput,
    #[error("model assigned zero probability at step {0}")]
    ZeroProbability(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Onset counts per pitch class.
pub fn chroma_vector(bar: &Bar) -> [f64; 12] {
    let mut r = [0.0; 12];
    for n in &bar.notes {
        r[(n.pitch % 12) as usize] += 1.0;
    }
    r
}

/// Onset counts per sub-beat.
pub fn grooving_vector(bar: &Bar, sub_beats: u16) -> Vec<f64> {
    let mut g = vec![0.0; sub_beats as usize];
    for n in &bar.notes {
        if let Some(v) = g.get_mut(n.sub_beat as usize) {
            *v += 1.0;
        }
    }
    g
}

/// `100 * cos(a, b)`; two zero vectors count as identical, one zero
/// vector as unrelated.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>();
    let nb = b.iter().map(|v| v * v).sum::<f64>();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 100.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (100.0 * (dot / (na * nb).sqrt())).clamp(0.0, 100.0)
        }
    }
}

pub fn sim_chr(a: &[f64; 12], b: &[f64; 12]) -> f64 {
    cosine_similarity(a, b)
}

pub fn sim_grv(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity(a, b)
}

/// `100 * (1 - Hamming / n_tracks)`.
pub fn sim_ins(a: &[bool], b: &[bool]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(100.0);
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(100.0 * (1.0 - diff as f64 / a.len() as f64))
}

/// Which tracks sound in a bar. Scores here are single-track, so the
/// vector has one entry.
pub fn track_presence(bar: &Bar) -> Vec<bool> {
    vec![!bar.notes.is_empty()]
}

/// Bar-wise chroma and grooving similarity between two pieces, averaged
/// over aligned bars.
pub fn bar_fidelity(a: &QuantizedScore, b: &QuantizedScore) -> Result<(f64, f64), MetricsError> {
    if a.n_bars() != b.n_bars() {
        return Err(MetricsError::LengthMismatch(a.n_bars(), b.n_bars()));
    }
    if a.n_bars() == 0 {
        return Err(MetricsError::EmptySet);
    }
    let (mut chr, mut grv) = (0.0, 0.0);
    for (x, y) in a.bars.iter().zip(&b.bars) {
        chr += sim_chr(&chroma_vector(x), &chroma_vector(y));
        grv += sim_grv(
            &grooving_vector(x, a.sub_beats_per_bar),
            &grooving_vector(y, b.sub_beats_per_bar),
        );
    }
    let k = a.n_bars() as f64;
    Ok((chr / k, grv / k))
}

/// Chroma of the notes sounding in each half-beat (eight per bar).
pub fn half_beat_chroma(q: &QuantizedScore) -> Vec<[f64; 12]> {
    let b = q.sub_beats_per_bar as usize;
    let frame = (b / 8).max(1);
    let per_unit = q.sub_beats_per_unit() as usize;
    let n_frames = q.n_bars() * 8;
    let mut frames = vec![[0.0; 12]; n_frames];
    for (k, bar) in q.bars.iter().enumerate() {
        for n in &bar.notes {
            let start = k * b + n.sub_beat as usize;
            let end = start + n.duration_units as usize * per_unit;
            let first = start / frame;
            let last = (end - 1) / frame;
            for f in first..=last.min(n_frames.saturating_sub(1)) {
                frames[f][(n.pitch % 12) as usize] += 1.0;
            }
        }
    }
    frames
}

/// Cosine self-similarity of half-beat chroma frames in `[0, 1]`;
/// entries involving a silent frame are 0.
pub fn self_similarity(q: &QuantizedScore) -> Vec<Vec<f64>> {
    let frames = half_beat_chroma(q);
    let norms: Vec<f64> = frames.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>()).collect();
    let n = frames.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = frames[i].iter().zip(&frames[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j]).sqrt()).clamp(0.0, 1.0)
            };
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

/// `100 * mean |S_a - S_b|`.
pub fn ssm_distance(sa: &[Vec<f64>], sb: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if sa.len() != sb.len() {
        return Err(MetricsError::LengthMismatch(sa.len(), sb.len()));
    }
    if sa.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (ra, rb) in sa.iter().zip(sb) {
        for (x, y) in ra.iter().zip(rb) {
            total += (x - y).abs();
        }
    }
    Ok(100.0 * total / (sa.len() * sa.len()) as f64)
}

pub fn dist_ssm(a: &QuantizedScore, b: &QuantizedScore) -> Result<f64, MetricsError> {
    if a.n_bars() != b.n_bars() {
        return Err(MetricsError::LengthMismatch(a.n_bars(), b.n_bars()));
    }
    ssm_distance(&self_similarity(a), &self_similarity(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Chr,
    Grv,
    Ins,
}

impl Feature {
    pub fn n_bins(self) -> usize {
        match self {
            Feature::Ins => 18,
            _ => 50,
        }
    }
}

pub const KL_EPSILON: f64 = 1e-6;

/// Similarities of all bar pairs `i < j` within one piece.
pub fn pairwise_similarities(q: &QuantizedScore, feature: Feature) -> Vec<f64> {
    let bars = &q.bars;
    let mut out = Vec::with_capacity(bars.len() * bars.len().saturating_sub(1) / 2);
    for i in 0..bars.len() {
        for j in i + 1..bars.len() {
            let v = match feature {
                Feature::Chr => sim_chr(&chroma_vector(&bars[i]), &chroma_vector(&bars[j])),
                Feature::Grv => sim_grv(
                    &grooving_vector(&bars[i], q.sub_beats_per_bar),
                    &grooving_vector(&bars[j], q.sub_beats_per_bar),
                ),
                Feature::Ins => sim_ins(&track_presence(&bars[i]), &track_presence(&bars[j])).unwrap_or(0.0),
            };
            out.push(v);
        }
    }
    out
}

/// Evenly spaced bins over `[0, 100]`, normalised to a distribution.
pub fn histogram(values: &[f64], n_bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; n_bins];
    if values.is_empty() {
        return h;
    }
    let width = 100.0 / n_bins as f64;
    for &v in values {
        let idx = ((v / width).floor() as isize).clamp(0, n_bins as isize - 1) as usize;
        h[idx] += 1.0;
    }
    for x in &mut h {
        *x /= values.len() as f64;
    }
    h
}

/// `KL(p || q)`, skipping terms with `p_i = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

fn smooth(h: &[f64]) -> Vec<f64> {
    let total: f64 = h.iter().map(|v| v + KL_EPSILON).sum();
    h.iter().map(|v| (v + KL_EPSILON) / total).collect()
}

/// KL from the real to the generated distribution of within-piece bar
/// similarities.
pub fn kl_quality(real: &[QuantizedScore], generated: &[QuantizedScore], feature: Feature) -> Result<f64, MetricsError> {
    if real.is_empty() || generated.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let collect = |set: &[QuantizedScore]| -> Vec<f64> {
        set.iter().flat_map(|q| pairwise_similarities(q, feature)).collect()
    };
    let p = smooth(&histogram(&collect(real), feature.n_bins()));
    let q = smooth(&histogram(&collect(generated), feature.n_bins()));
    Ok(kl_divergence(&p, &q).max(0.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(MetricsError::DegenerateInput);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], s: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != s.len() {
        return Err(MetricsError::LengthMismatch(a.len(), s.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::DegenerateInput);
    }
    pearson(&average_ranks(a), &average_ranks(s))
}

/// `exp(-(1/T) sum log p_t)`.
pub fn perplexity(log_probs: &[f64]) -> Result<f64, MetricsError> {
    if log_probs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if let Some(i) = log_probs.iter().position(|l| !l.is_finite()) {
        return Err(MetricsError::ZeroProbability(i));
    }
    Ok((-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp())
}

/// Log-probability of each next token (closing with EOS) under an
/// unconditional decoder.
pub fn sequence_log_probs(lm: &Decoder, store: &ParamStore, tokens: &[u32]) -> Result<Vec<f64>, MetricsError> {
    let mut state = lm.start(store, Vec::new());
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let logits = state.step(tok, 0)?;
        let target = tokens.get(t + 1).copied().unwrap_or(EOS) as usize;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        out.push(logits[target] - lse);
    }
    Ok(out)
}

pub fn lm_perplexity(lm: &Decoder, store: &ParamStore, tokens: &[u32]) -> Result<f64, MetricsError> {
    perplexity(&sequence_log_probs(lm, store, tokens)?)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
            n: values.len(),
        }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.std, self.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::Note;

    fn bar(notes: &[(u16, u8, u8)]) -> Bar {
        Bar {
            notes: notes
                .iter()
                .map(|&(s, p, d)| Note {
                    sub_beat: s,
                    pitch: p,
                    velocity_class: 10,
                    duration_units: d,
                })
                .collect(),
            tempos: vec![],
        }
    }

    #[test]
    fn cosine_examples() {
        let mut a = [0.0; 12];
        let mut b = [0.0; 12];
        a[0] = 1.0;
        a[1] = 1.0;
        b[0] = 1.0;
        assert!((sim_chr(&a, &b) - 100.0 / 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(sim_chr(&a, &a), 100.0);
        assert_eq!(sim_chr(&[0.0; 12], &[0.0; 12]), 100.0);
        assert_eq!(sim_chr(&a, &[0.0; 12]), 0.0);
        let mut c = [0.0; 12];
        c[5] = 3.0;
        assert_eq!(sim_chr(&a, &c), 0.0);
        let g: Vec<f64> = (0..16).map(|i| (i % 3) as f64).collect();
        let g2: Vec<f64> = g.iter().map(|v| v * 4.0).collect();
        assert!((sim_grv(&g, &g2) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn instrument_examples() {
        let a = vec![true; 17];
        let mut b = a.clone();
        b[3] = false;
        assert!((sim_ins(&a, &b).unwrap() - 100.0 * 16.0 / 17.0).abs() < 1e-9);
        let c: Vec<bool> = a.iter().map(|x| !x).collect();
        assert_eq!(sim_ins(&a, &c).unwrap(), 0.0);
        assert!(sim_ins(&a, &[true]).is_err());
    }

    #[test]
    fn ssm_properties() {
        let q = QuantizedScore::new(16, vec![bar(&[(0, 60, 4), (8, 64, 2)]), bar(&[(4, 67, 16)])]);
        let s = self_similarity(&q);
        assert_eq!(s.len(), 16);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(s[i][j], s[j][i]);
            }
        }
        let frames = half_beat_chroma(&q);
        for (i, f) in frames.iter().enumerate() {
            let silent = f.iter().all(|&v| v == 0.0);
            assert_eq!(s[i][i], if silent { 0.0 } else { 1.0 });
        }
        assert_eq!(dist_ssm(&q, &q).unwrap(), 0.0);
        let zeros = vec![vec![0.0; 4]; 4];
        let ones = vec![vec![1.0; 4]; 4];
        assert_eq!(ssm_distance(&zeros, &ones).unwrap(), 100.0);
    }

    #[test]
    fn kl_examples() {
        let mut p = vec![0.0; 50];
        let mut q = vec![0.0; 50];
        p[0] = 0.5;
        p[1] = 0.5;
        q[0] = 0.25;
        q[1] = 0.75;
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&p, &q) - expected).abs() < 1e-12);
        assert!((expected - 0.1438).abs() < 1e-4);
        let set = vec![QuantizedScore::new(16, vec![bar(&[(0, 60, 4)]), bar(&[(2, 62, 4)]), bar(&[(0, 60, 4)])])];
        for f in [Feature::Chr, Feature::Grv, Feature::Ins] {
            assert_eq!(kl_quality(&set, &set, f).unwrap(), 0.0);
        }
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[2.0, 5.0, 9.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&a, &[1.0; 4]), Err(MetricsError::DegenerateInput));
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 15.0]), vec![1.0, 3.5, 3.5, 2.0]);
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(&vec![-(330f64.ln()); 50]).unwrap() - 330.0).abs() < 1e-9);
        assert_eq!(perplexity(&[0.0; 10]).unwrap(), 1.0);
        assert!((perplexity(&[0.5f64.ln(); 7]).unwrap() - 2.0).abs() < 1e-12);
        assert!(perplexity(&[0.0, f64::NEG_INFINITY]).is_err());
    }
}
