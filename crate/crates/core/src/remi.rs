//! REMI-style event vocabulary and conversion between quantized scores and
//! token sequences.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::midi::{
    Bar, Note, QuantizedScore, TempoMark, MAX_DURATION_UNITS, PITCH_MAX, PITCH_MIN, TEMPO_CLASSES,
    VELOCITY_CLASSES,
};

pub const CHORD_QUALITIES: [&str; 11] = [
    "maj", "min", "dim", "aug", "dom7", "maj7", "min7", "m7b5", "dim7", "sus2", "sus4",
];
const CHORD_INTERVALS: [&[u8]; 11] = [
    &[0, 4, 7],
    &[0, 3, 7],
    &[0, 3, 6],
    &[0, 4, 8],
    &[0, 4, 7, 10],
    &[0, 4, 7, 11],
    &[0, 3, 7, 10],
    &[0, 3, 6, 10],
    &[0, 3, 6, 9],
    &[0, 2, 7],
    &[0, 5, 7],
];
const PITCH_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
/// 12 roots x 11 qualities plus "no chord".
pub const CHORD_TOKENS: usize = 12 * 11 + 1;
pub const SPECIAL_TOKENS: usize = 3;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BAR: u32 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RemiError {
    #[error("value outside the vocabulary: {0}")]
    VocabMiss(String),
    #[error("token sequence contains no Bar token")]
    NoBars,
    #[error("unknown token name {0:?} on line {1}")]
    UnknownToken(String, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Bar,
    SubBeat(u16),
    Tempo(u8),
    Pitch(u8),
    Velocity(u8),
    Duration(u8),
    /// 0 is "no chord"; otherwise `1 + root * 11 + quality`.
    Chord(u8),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::Pad => write!(f, "PAD"),
            Token::Bos => write!(f, "BOS"),
            Token::Eos => write!(f, "EOS"),
            Token::Bar => write!(f, "Bar"),
            Token::SubBeat(s) => write!(f, "SubBeat_{s}"),
            Token::Tempo(t) => write!(f, "Tempo_{t}"),
            Token::Pitch(p) => write!(f, "Pitch_{p}"),
            Token::Velocity(v) => write!(f, "Velocity_{v}"),
            Token::Duration(d) => write!(f, "Duration_{d}"),
            Token::Chord(0) => write!(f, "Chord_N_N"),
            Token::Chord(c) => {
                let c = c as usize - 1;
                write!(f, "Chord_{}_{}", PITCH_NAMES[c / 11], CHORD_QUALITIES[c % 11])
            }
        }
    }
}

/// Bijection between token ids and events for a given bar resolution.
///
/// Layout: specials, Bar, Sub-beat (B), Tempo (54), Pitch (86),
/// Velocity (24), Duration (16), Chord (133).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    sub_beats: u16,
}

impl Vocab {
    pub fn new(sub_beats_per_bar: u16) -> Self {
        Vocab {
            sub_beats: sub_beats_per_bar,
        }
    }

    pub fn sub_beats_per_bar(&self) -> u16 {
        self.sub_beats
    }

    fn sub_beat_base(&self) -> u32 {
        BAR + 1
    }
    fn tempo_base(&self) -> u32 {
        self.sub_beat_base() + self.sub_beats as u32
    }
    fn pitch_base(&self) -> u32 {
        self.tempo_base() + TEMPO_CLASSES as u32
    }
    fn velocity_base(&self) -> u32 {
        self.pitch_base() + (PITCH_MAX - PITCH_MIN + 1) as u32
    }
    fn duration_base(&self) -> u32 {
        self.velocity_base() + VELOCITY_CLASSES as u32
    }
    fn chord_base(&self) -> u32 {
        self.duration_base() + MAX_DURATION_UNITS as u32
    }

    /// Total ids including the special tokens.
    pub fn len(&self) -> usize {
        self.chord_base() as usize + CHORD_TOKENS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of musical event tokens (excludes PAD/BOS/EOS).
    pub fn content_len(&self) -> usize {
        self.len() - SPECIAL_TOKENS
    }

    pub fn id(&self, token: Token) -> Result<u32, RemiError> {
        let miss = || RemiError::VocabMiss(token.to_string());
        Ok(match token {
            Token::Pad => PAD,
            Token::Bos => BOS,
            Token::Eos => EOS,
            Token::Bar => BAR,
            Token::SubBeat(s) if s < self.sub_beats => self.sub_beat_base() + s as u32,
            Token::Tempo(t) if (t as usize) < TEMPO_CLASSES => self.tempo_base() + t as u32,
            Token::Pitch(p) if (PITCH_MIN..=PITCH_MAX).contains(&p) => {
                self.pitch_base() + (p - PITCH_MIN) as u32
            }
            Token::Velocity(v) if v < VELOCITY_CLASSES => self.velocity_base() + v as u32,
            Token::Duration(d) if (1..=MAX_DURATION_UNITS).contains(&d) => {
                self.duration_base() + (d - 1) as u32
            }
            Token::Chord(c) if (c as usize) < CHORD_TOKENS => self.chord_base() + c as u32,
            _ => return Err(miss()),
        })
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        let t = match id {
            PAD => Token::Pad,
            BOS => Token::Bos,
            EOS => Token::Eos,
            BAR => Token::Bar,
            i if i < self.tempo_base() => Token::SubBeat((i - self.sub_beat_base()) as u16),
            i if i < self.pitch_base() => Token::Tempo((i - self.tempo_base()) as u8),
            i if i < self.velocity_base() => Token::Pitch((i - self.pitch_base()) as u8 + PITCH_MIN),
            i if i < self.duration_base() => Token::Velocity((i - self.velocity_base()) as u8),
            i if i < self.chord_base() => Token::Duration((i - self.duration_base()) as u8 + 1),
            i if (i as usize) < self.len() => Token::Chord((i - self.chord_base()) as u8),
            _ => return None,
        };
        Some(t)
    }

    pub fn name(&self, id: u32) -> Option<String> {
        self.token(id).map(|t| t.to_string())
    }

    pub fn parse_name(&self, name: &str) -> Option<u32> {
        let token = match name {
            "PAD" => Token::Pad,
            "BOS" => Token::Bos,
            "EOS" => Token::Eos,
            "Bar" => Token::Bar,
            "Chord_N_N" => Token::Chord(0),
            _ => {
                let (family, value) = name.split_once('_')?;
                if family == "Chord" {
                    let (root, quality) = value.split_once('_')?;
                    let r = PITCH_NAMES.iter().position(|&n| n == root)?;
                    let q = CHORD_QUALITIES.iter().position(|&n| n == quality)?;
                    Token::Chord((1 + r * 11 + q) as u8)
                } else {
                    let v: u16 = value.parse().ok()?;
                    match family {
                        "SubBeat" => Token::SubBeat(v),
                        "Tempo" => Token::Tempo(u8::try_from(v).ok()?),
                        "Pitch" => Token::Pitch(u8::try_from(v).ok()?),
                        "Velocity" => Token::Velocity(u8::try_from(v).ok()?),
                        "Duration" => Token::Duration(u8::try_from(v).ok()?),
                        _ => return None,
                    }
                }
            }
        };
        self.id(token).ok()
    }

    pub fn is_bar(&self, id: u32) -> bool {
        id == BAR
    }
}

/// Token ids plus the half-open bar spans that partition them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub bar_spans: Vec<Range<usize>>,
}

impl TokenSeq {
    pub fn from_tokens(tokens: Vec<u32>) -> Self {
        let bar_spans = bar_slices(&tokens);
        TokenSeq { tokens, bar_spans }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_bars(&self) -> usize {
        self.bar_spans.len()
    }

    /// Bar index of every position.
    pub fn bar_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.tokens.len()];
        for (k, span) in self.bar_spans.iter().enumerate() {
            for i in span.clone() {
                idx[i] = k;
            }
        }
        idx
    }

    pub fn bar(&self, k: usize) -> &[u32] {
        &self.tokens[self.bar_spans[k].clone()]
    }

    /// Contiguous sub-sequence of bars `range`, with spans re-based.
    pub fn bars(&self, range: Range<usize>) -> TokenSeq {
        if range.is_empty() {
            return TokenSeq::from_tokens(Vec::new());
        }
        let start = self.bar_spans[range.start].start;
        let end = self.bar_spans[range.end - 1].end;
        TokenSeq::from_tokens(self.tokens[start..end].to_vec())
    }
}

/// Splits a token list at its Bar tokens. Tokens preceding the first Bar
/// are attached to the first span.
pub fn bar_slices(tokens: &[u32]) -> Vec<Range<usize>> {
    let mut starts: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == BAR)
        .map(|(i, _)| i)
        .collect();
    if starts.is_empty() {
        return if tokens.is_empty() {
            Vec::new()
        } else {
            vec![0..tokens.len()]
        };
    }
    starts[0] = 0;
    let mut spans: Vec<Range<usize>> = starts.windows(2).map(|w| w[0]..w[1]).collect();
    spans.push(*starts.last().unwrap()..tokens.len());
    spans
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenizeOptions {
    /// Emit template-matched Chord tokens at beat starts.
    pub chords: bool,
}

pub fn tokenize(q: &QuantizedScore, vocab: &Vocab) -> Result<TokenSeq, RemiError> {
    tokenize_with(q, vocab, TokenizeOptions::default())
}

pub fn tokenize_with(
    q: &QuantizedScore,
    vocab: &Vocab,
    opts: TokenizeOptions,
) -> Result<TokenSeq, RemiError> {
    if q.sub_beats_per_bar != vocab.sub_beats_per_bar() {
        return Err(RemiError::VocabMiss(format!(
            "score has {} sub-beats per bar, vocabulary {}",
            q.sub_beats_per_bar,
            vocab.sub_beats_per_bar()
        )));
    }
    let chords = if opts.chords {
        detect_chords(q)
    } else {
        vec![Vec::new(); q.bars.len()]
    };
    let mut tokens = Vec::new();
    let mut spans = Vec::with_capacity(q.bars.len());
    for (bar, bar_chords) in q.bars.iter().zip(&chords) {
        let start = tokens.len();
        tokens.push(BAR);
        let mut positions: Vec<u16> = bar
            .notes
            .iter()
            .map(|n| n.sub_beat)
            .chain(bar.tempos.iter().map(|t| t.sub_beat))
            .chain(bar_chords.iter().map(|c| c.0))
            .collect();
        positions.sort_unstable();
        positions.dedup();
        let mut notes = bar.notes.iter().peekable();
        for pos in positions {
            tokens.push(vocab.id(Token::SubBeat(pos))?);
            if let Some(t) = bar.tempos.iter().find(|t| t.sub_beat == pos) {
                tokens.push(vocab.id(Token::Tempo(t.class))?);
            }
            if let Some(c) = bar_chords.iter().find(|c| c.0 == pos) {
                tokens.push(vocab.id(Token::Chord(c.1))?);
            }
            while let Some(n) = notes.next_if(|n| n.sub_beat == pos) {
                tokens.push(vocab.id(Token::Pitch(n.pitch))?);
                tokens.push(vocab.id(Token::Velocity(n.velocity_class))?);
                tokens.push(vocab.id(Token::Duration(n.duration_units))?);
            }
        }
        spans.push(start..tokens.len());
    }
    Ok(TokenSeq {
        tokens,
        bar_spans: spans,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub score: QuantizedScore,
    /// Tokens dropped because they did not fit the grammar.
    pub skipped: usize,
}

pub fn detokenize(tokens: &[u32], vocab: &Vocab) -> Result<Detokenized, RemiError> {
    if !tokens.contains(&BAR) {
        return Err(RemiError::NoBars);
    }
    let mut bars: Vec<Bar> = Vec::new();
    let mut skipped = 0;
    let mut pos: Option<u16> = None;
    let mut i = 0;
    while i < tokens.len() {
        let tok = vocab.token(tokens[i]);
        i += 1;
        match tok {
            Some(Token::Bar) => {
                bars.push(Bar::default());
                pos = None;
            }
            _ if bars.is_empty() => skipped += 1,
            Some(Token::SubBeat(s)) => pos = Some(s),
            Some(Token::Tempo(class)) => match pos {
                Some(sub_beat) => {
                    let bar = bars.last_mut().unwrap();
                    bar.tempos.retain(|t| t.sub_beat != sub_beat);
                    bar.tempos.push(TempoMark { sub_beat, class });
                }
                None => skipped += 1,
            },
            Some(Token::Chord(_)) | Some(Token::Pad) | Some(Token::Bos) | Some(Token::Eos) => {}
            Some(Token::Pitch(pitch)) => {
                let vel = tokens.get(i).and_then(|&t| vocab.token(t));
                let dur = tokens.get(i + 1).and_then(|&t| vocab.token(t));
                match (pos, vel, dur) {
                    (Some(sub_beat), Some(Token::Velocity(v)), Some(Token::Duration(d))) => {
                        bars.last_mut().unwrap().notes.push(Note {
                            sub_beat,
                            pitch,
                            velocity_class: v,
                            duration_units: d,
                        });
                        i += 2;
                    }
                    _ => skipped += 1,
                }
            }
            Some(Token::Velocity(_)) | Some(Token::Duration(_)) | None => skipped += 1,
        }
    }
    Ok(Detokenized {
        score: QuantizedScore::new(vocab.sub_beats_per_bar(), bars),
        skipped,
    })
}

/// Template chord matcher: one label per beat, emitted only on change.
/// Returns `(sub_beat, chord_index)` per bar.
pub fn detect_chords(q: &QuantizedScore) -> Vec<Vec<(u16, u8)>> {
    let b = q.sub_beats_per_bar as usize;
    let beat = b / 4;
    let per_unit = q.sub_beats_per_unit() as usize;
    let total = q.bars.len() * b;
    // pitch-class weight per sub-beat over the whole piece
    let mut sounding = vec![[0u32; 12]; total];
    for (k, bar) in q.bars.iter().enumerate() {
        for n in &bar.notes {
            let start = k * b + n.sub_beat as usize;
            let end = (start + n.duration_units as usize * per_unit).min(total);
            for s in &mut sounding[start..end] {
                s[(n.pitch % 12) as usize] += 1;
            }
        }
    }
    let mut out = vec![Vec::new(); q.bars.len()];
    let mut last: Option<u8> = None;
    for (k, bar_out) in out.iter_mut().enumerate() {
        for beat_idx in 0..4 {
            let start = k * b + beat_idx * beat;
            let mut hist = [0u32; 12];
            for s in &sounding[start..start + beat] {
                for pc in 0..12 {
                    hist[pc] += s[pc];
                }
            }
            let label = best_chord(&hist);
            if last != Some(label) {
                bar_out.push(((beat_idx * beat) as u16, label));
                last = Some(label);
            }
        }
    }
    out
}

fn best_chord(hist: &[u32; 12]) -> u8 {
    let total: i64 = hist.iter().map(|&h| h as i64).sum();
    if total == 0 {
        return 0;
    }
    let mut best = (i64::MIN, 0u8);
    for root in 0..12 {
        for (qi, intervals) in CHORD_INTERVALS.iter().enumerate() {
            let inside: i64 = intervals
                .iter()
                .map(|&iv| hist[(root + iv as usize) % 12] as i64)
                .sum();
            // reward covered mass, penalise mass outside and unused template tones
            let missing = intervals
                .iter()
                .filter(|&&iv| hist[(root + iv as usize) % 12] == 0)
                .count() as i64;
            let score = 2 * inside - total - missing + 3 * (hist[root] > 0) as i64;
            if score > best.0 {
                best = (score, (1 + root * 11 + qi) as u8);
            }
        }
    }
    best.1
}

/// Renders tokens in the line-oriented text format.
pub fn write_token_text(tokens: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &t in tokens {
        out.push_str(&vocab.name(t).unwrap_or_else(|| format!("#unknown {t}")));
        out.push('\n');
    }
    out
}

/// Parses the text format: one token name per line, `#` comments and blank
/// lines ignored.
pub fn read_token_text(text: &str, vocab: &Vocab) -> Result<Vec<u32>, RemiError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = vocab
            .parse_name(line)
            .ok_or_else(|| RemiError::UnknownToken(line.to_string(), lineno + 1))?;
        out.push(id);
    }
    Ok(out)
}
