//! Desk-scale corpora: a synthetic pop-piano-like generator, MIDI folder
//! ingestion, splits and the on-disk layout.
//!
//! A corpus directory holds `manifest.json` plus, per piece,
//! `pieces/<id>.tokens` (one token name per line) and
//! `pieces/<id>.attrs.csv` (the attribute file).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{
    compute_attributes, read_attribute_file, score_bars, write_attribute_file, AttributeBins, AttributeError,
    BarAttributes,
};
use crate::midi::{parse_midi, quantize, Bar, MidiError, Note, QuantizedScore, TempoMark};
use crate::remi::{read_token_text, tokenize, write_token_text, RemiError, Vocab};
use crate::vae::Example;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no usable pieces")]
    EmptyCorpus,
    #[error("corpus I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corpus manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Remi(#[from] RemiError),
    #[error(transparent)]
    Attributes(#[from] AttributeError),
    #[error(transparent)]
    Midi(#[from] MidiError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceEntry {
    pub id: String,
    /// `synthetic` or the ingested file path.
    pub source: String,
    pub split: Split,
    pub n_bars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub sub_beats_per_bar: u16,
    pub fractions: [f64; 3],
    pub bins: AttributeBins,
    pub pieces: Vec<PieceEntry>,
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub entry: PieceEntry,
    pub score: QuantizedScore,
    pub tokens: Vec<u32>,
    pub attributes: Vec<BarAttributes>,
}

impl Piece {
    pub fn example(&self) -> Example {
        Example {
            tokens: self.tokens.clone(),
            rhym: self.attributes.iter().map(|a| a.a_rhym).collect(),
            poly: self.attributes.iter().map(|a| a.a_poly).collect(),
            conditions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub pieces: Vec<Piece>,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.90, 0.05, 0.05];

/// Deterministic split assignment: shuffle by `seed`, then cut.
/// Held-out sets get at least one piece each once there are three pieces.
pub fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5011_7000));
    let held = |f: f64| {
        let k = (n as f64 * f).round() as usize;
        if n >= 3 && f > 0.0 {
            k.max(1)
        } else {
            k
        }
    };
    let n_val = held(fractions[1]);
    let n_test = held(fractions[2]).min(n - n_val.min(n));
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            splits[i] = Split::Val;
        } else if rank < n_val + n_test {
            splits[i] = Split::Test;
        }
    }
    splits
}

impl Corpus {
    /// Tokenizes scores, assigns splits, fits bins on the training split
    /// and labels every bar.
    pub fn build(
        named: Vec<(String, String, QuantizedScore)>,
        skipped: Vec<SkipRecord>,
        sub_beats_per_bar: u16,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        if named.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let vocab = Vocab::new(sub_beats_per_bar);
        let splits = assign_splits(named.len(), DEFAULT_FRACTIONS, seed);
        let (mut rhym, mut poly) = (Vec::new(), Vec::new());
        for ((_, _, q), split) in named.iter().zip(&splits) {
            if *split == Split::Train {
                for (r, p) in score_bars(q) {
                    rhym.push(r);
                    poly.push(p);
                }
            }
        }
        let bins = match AttributeBins::fit(&rhym, &poly) {
            Ok(b) => b,
            Err(_) => AttributeBins::reference(),
        };
        let mut pieces = Vec::with_capacity(named.len());
        for ((id, source, score), split) in named.into_iter().zip(splits) {
            let tokens = tokenize(&score, &vocab)?.tokens;
            let attributes = compute_attributes(&score, &bins);
            pieces.push(Piece {
                entry: PieceEntry {
                    id,
                    source,
                    split,
                    n_bars: score.n_bars(),
                },
                score,
                tokens,
                attributes,
            });
        }
        Ok(Corpus {
            manifest: CorpusManifest {
                seed,
                sub_beats_per_bar,
                fractions: DEFAULT_FRACTIONS,
                bins,
                pieces: pieces.iter().map(|p| p.entry.clone()).collect(),
                skipped,
            },
            pieces,
        })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.manifest.sub_beats_per_bar)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Piece> {
        self.pieces.iter().filter(move |p| p.entry.split == split)
    }

    pub fn examples(&self, split: Split) -> Vec<Example> {
        self.split(split).map(Piece::example).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        let pieces_dir = dir.join("pieces");
        fs::create_dir_all(&pieces_dir).map_err(io_err(&pieces_dir))?;
        let vocab = self.vocab();
        for p in &self.pieces {
            let tok_path = pieces_dir.join(format!("{}.tokens", p.entry.id));
            fs::write(&tok_path, write_token_text(&p.tokens, &vocab)).map_err(io_err(&tok_path))?;
            let attr_path = pieces_dir.join(format!("{}.attrs.csv", p.entry.id));
            let f = fs::File::create(&attr_path).map_err(io_err(&attr_path))?;
            write_attribute_file(f, &p.attributes)?;
        }
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        let vocab = Vocab::new(manifest.sub_beats_per_bar);
        let mut pieces = Vec::with_capacity(manifest.pieces.len());
        for entry in &manifest.pieces {
            let tok_path = dir.join("pieces").join(format!("{}.tokens", entry.id));
            let tokens = read_token_text(&fs::read_to_string(&tok_path).map_err(io_err(&tok_path))?, &vocab)?;
            let attr_path = dir.join("pieces").join(format!("{}.attrs.csv", entry.id));
            let attributes = read_attribute_file(fs::File::open(&attr_path).map_err(io_err(&attr_path))?)?;
            let score = crate::remi::detokenize(&tokens, &vocab)?.score;
            pieces.push(Piece {
                entry: entry.clone(),
                score,
                tokens,
                attributes,
            });
        }
        Ok(Corpus { manifest, pieces })
    }
}

/// Parses every `.mid`/`.midi` file under `dir` (sorted by name);
/// unreadable files are recorded and skipped.
pub fn ingest(dir: &Path, sub_beats_per_bar: u16, seed: u64) -> Result<Corpus, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    let mut named = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let result = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| parse_midi(&bytes).map_err(|e| e.to_string()))
            .and_then(|raw| quantize(&raw, sub_beats_per_bar).map_err(|e| e.to_string()))
            .and_then(|q| {
                if q.n_bars() == 0 {
                    Err("no bars".to_string())
                } else {
                    Ok(q)
                }
            });
        match result {
            Ok(q) => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("piece");
                let id: String = stem
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                    .collect();
                let id = format!("{:04}-{id}", named.len());
                named.push((id, path.display().to_string(), q));
            }
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                skipped.push(SkipRecord {
                    path: path.display().to_string(),
                    reason,
                });
            }
        }
    }
    Corpus::build(named, skipped, sub_beats_per_bar, seed)
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Scale degrees (semitones above the tonic) of major-key triads I..vi.
const DEGREES: [(u8, bool); 6] = [(0, true), (2, false), (4, false), (5, true), (7, true), (9, false)];

const PROGRESSIONS: [[usize; 4]; 6] = [
    [0, 4, 5, 3],
    [0, 5, 3, 4],
    [5, 3, 0, 4],
    [0, 3, 4, 0],
    [1, 4, 0, 5],
    [3, 4, 2, 5],
];

/// Onset counts reachable by the rhythm envelope.
const DENSITY: [usize; 8] = [0, 2, 3, 4, 6, 8, 10, 13];

/// Onset positions in order of metrical strength.
const STRENGTH: [u16; 16] = [0, 8, 4, 12, 2, 6, 10, 14, 1, 3, 5, 7, 9, 11, 13, 15];

/// A piece-specific order in which melody onsets fill the bar: metrical
/// strength perturbed by noise of a random per-piece amount.
fn rhythm_profile<R: Rng>(rng: &mut R) -> [u16; 16] {
    let noise = rng.gen_range(0.0..12.0);
    let mut keyed: Vec<(f64, u16)> = STRENGTH
        .iter()
        .enumerate()
        .map(|(rank, &pos)| (rank as f64 + noise * rng.gen::<f64>(), pos))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = [0u16; 16];
    for (o, (_, pos)) in out.iter_mut().zip(keyed) {
        *o = pos;
    }
    out
}

/// Piece-level accompaniment patterns.
#[derive(Clone, Copy)]
enum Comping {
    /// Chord struck on each listed onset, held for the given units.
    Struck(&'static [u16], u8),
    /// Voices enter one by one on the melody's onsets and ring to the bar line.
    Broken,
}

const COMPING: [Comping; 4] = [
    Comping::Struck(&[0], 16),
    Comping::Struck(&[0, 8], 8),
    Comping::Broken,
    Comping::Broken,
];

fn envelope<R: Rng>(bars: usize, rng: &mut R) -> Vec<usize> {
    let mut level = rng.gen_range(0..8i32);
    let mut out = Vec::with_capacity(bars);
    for k in 0..bars {
        if k > 0 {
            if rng.gen_bool(0.3) {
                level = rng.gen_range(0..8);
            } else {
                level = (level + rng.gen_range(-1..=1)).clamp(0, 7);
            }
        }
        out.push(level as usize);
    }
    out
}

fn chord_pcs(tonic: u8, degree: usize) -> [u8; 3] {
    let (root, major) = DEGREES[degree];
    let r = (tonic + root) % 12;
    [r, (r + if major { 4 } else { 3 }) % 12, (r + 7) % 12]
}

fn pitch_near(pc: u8, center: u8) -> u8 {
    let base = center - center % 12 + pc;
    if base + 6 < center {
        base + 12
    } else if base > center + 6 {
        base - 12
    } else {
        base
    }
}

/// One synthetic piece of `bars` bars on a 16-sub-beat grid.
///
/// Per bar, a rhythm envelope picks how many melody onsets occur and a
/// voicing envelope picks how many sustained accompaniment voices sound;
/// the two envelopes are drawn independently.
pub fn synthetic_piece<R: Rng>(bars: usize, rng: &mut R) -> QuantizedScore {
    let tonic = rng.gen_range(0..12u8);
    let progression = PROGRESSIONS[rng.gen_range(0..PROGRESSIONS.len())];
    let tempo = rng.gen_range(10..40u8);
    let base_velocity = rng.gen_range(6..16u8);
    let rhythm = envelope(bars, rng);
    let voicing = envelope(bars, rng);
    let profile = rhythm_profile(rng);
    let comping = COMPING[rng.gen_range(0..COMPING.len())];
    let mut melody_pitch = 72u8;
    let mut out = Vec::with_capacity(bars);
    for k in 0..bars {
        let pcs = chord_pcs(tonic, progression[k % 4]);
        let mut notes = Vec::new();

        // Melody: the first `n` positions of the piece's rhythm profile,
        // occasionally with one position swapped for a later one.
        let n = match rhythm[k] {
            0 if rng.gen_bool(0.5) => 2,
            r => DENSITY[r],
        };
        let mut positions: Vec<u16> = profile[..n.min(16)].to_vec();
        if n > 1 && n < 16 && rng.gen_bool(0.3) {
            let swap = rng.gen_range(0..positions.len());
            positions[swap] = profile[rng.gen_range(n..16)];
        }
        positions.sort_unstable();
        // Accompaniment: `voices` chord tones in the piece's comping pattern.
        let (voices, block) = match voicing[k] {
            0 => (0, false),
            1 => (1, false),
            2 => (1, true),
            3 => (2, true),
            4 => (3, true),
            5 => (4, true),
            6 => (5, true),
            _ => (6, true),
        };
        let mut p = pitch_near(pcs[0], 45);
        let mut chord = Vec::with_capacity(voices);
        for v in 0..voices {
            if v > 0 {
                let next_pc = pcs[v % 3];
                p += ((next_pc + 12 - p % 12) % 12).max(3);
            }
            chord.push(p);
        }
        let velocity_class = base_velocity.saturating_sub(2);
        match comping {
            Comping::Struck(onsets, dur) => {
                for &on in onsets {
                    for &pitch in &chord {
                        notes.push(Note {
                            sub_beat: on,
                            pitch,
                            velocity_class,
                            duration_units: if block { dur } else { dur.div_ceil(2) },
                        });
                    }
                }
            }
            Comping::Broken => {
                let entries: &[u16] = if positions.is_empty() { &[0] } else { &positions };
                for (v, &pitch) in chord.iter().enumerate() {
                    let on = entries[v.min(entries.len() - 1)];
                    let ring = 16 - on as u8;
                    notes.push(Note {
                        sub_beat: on,
                        pitch,
                        velocity_class,
                        duration_units: if block { ring } else { ring.div_ceil(2) },
                    });
                }
            }
        }

        let legato = rng.gen_bool(0.7);
        for (i, &pos) in positions.iter().enumerate() {
            let next = positions.get(i + 1).copied().unwrap_or(16);
            let gap = (next - pos) as u8;
            let duration_units = if legato { gap } else { gap.div_ceil(2) }.clamp(1, 16);
            let step: i32 = rng.gen_range(-4..=4);
            let target = (melody_pitch as i32 + step).clamp(62, 86) as u8;
            let pc = if i == 0 || rng.gen_bool(0.5) {
                pcs[rng.gen_range(0..3)]
            } else {
                let scale = [0u8, 2, 4, 5, 7, 9, 11];
                (tonic + scale[rng.gen_range(0..7)]) % 12
            };
            melody_pitch = pitch_near(pc, target);
            let accent = if pos % 4 == 0 { 2 } else { 0 };
            notes.push(Note {
                sub_beat: pos,
                pitch: melody_pitch,
                velocity_class: (base_velocity + accent + rng.gen_range(0..3)).min(23),
                duration_units,
            });
        }
        let tempos = if k == 0 {
            vec![TempoMark {
                sub_beat: 0,
                class: tempo,
            }]
        } else {
            Vec::new()
        };
        out.push(Bar { notes, tempos });
    }
    QuantizedScore::new(16, out)
}

/// `n_pieces` synthetic pieces, deterministic per `seed`.
pub fn generate_synthetic(n_pieces: usize, bars_per_piece: usize, seed: u64) -> Result<Corpus, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = (0..n_pieces)
        .map(|i| {
            (
                format!("synth-{i:04}"),
                "synthetic".to_string(),
                synthetic_piece(bars_per_piece, &mut rng),
            )
        })
        .collect();
    Corpus::build(named, Vec::new(), 16, seed)
}
