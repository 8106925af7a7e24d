//! Standard MIDI File reading and writing, plus quantization onto the
//! metric grid used by the tokenizer.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

/// Lowest pitch representable after quantization.
pub const PITCH_MIN: u8 = 22;
/// Highest pitch representable after quantization.
pub const PITCH_MAX: u8 = 107;
pub const VELOCITY_CLASSES: u8 = 24;
pub const VELOCITY_MIN: u8 = 40;
pub const VELOCITY_STEP: u8 = 2;
pub const MAX_DURATION_UNITS: u8 = 16;
pub const TEMPO_CLASSES: usize = 54;

/// Ticks per quarter note used when writing files.
pub const WRITE_TPQ: u16 = 480;

const DRUM_CHANNEL: u8 = 9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI file: {0}")]
    MalformedFile(String),
    #[error("unsupported MIDI format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported meter {0}/{1}; only 4/4 is accepted")]
    UnsupportedMeter(u8, u8),
    #[error("sub-beats per bar must be 16 or 32, got {0}")]
    BadResolution(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawNote {
    pub onset_ticks: u64,
    pub duration_ticks: u64,
    pub pitch: u8,
    pub velocity: u8,
    pub channel: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTrack {
    pub notes: Vec<RawNote>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempoChange {
    pub tick: u64,
    pub bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub tick: u64,
    pub numerator: u8,
    pub denominator: u8,
}

/// A parsed MIDI file: notes in absolute ticks, tempo map and meter.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScore {
    pub tracks: Vec<RawTrack>,
    pub tempo_changes: Vec<TempoChange>,
    pub time_signatures: Vec<TimeSignature>,
    pub ticks_per_quarter: u16,
    /// Largest end-of-track tick over all tracks.
    pub end_tick: u64,
}

impl RawScore {
    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    /// The meter in effect at tick 0 (4/4 when the file carries none).
    pub fn time_signature(&self) -> (u8, u8) {
        self.time_signatures
            .first()
            .map(|ts| (ts.numerator, ts.denominator))
            .unwrap_or((4, 4))
    }
}

/// A note on the quantized grid, relative to its bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Note {
    pub sub_beat: u16,
    pub pitch: u8,
    pub velocity_class: u8,
    pub duration_units: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TempoMark {
    pub sub_beat: u16,
    pub class: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Bar {
    pub notes: Vec<Note>,
    pub tempos: Vec<TempoMark>,
}

impl Bar {
    pub fn is_empty(&self) -> bool {
        self.notes.is_empty() && self.tempos.is_empty()
    }
}

/// Notes on a 16th (or 32nd) note grid partitioned into 4/4 bars.
///
/// Durations are always counted in 16th notes regardless of the
/// onset resolution. Notes within a bar are kept sorted by
/// `(sub_beat, pitch, velocity_class, duration_units)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantizedScore {
    pub sub_beats_per_bar: u16,
    pub bars: Vec<Bar>,
}

impl QuantizedScore {
    pub fn new(sub_beats_per_bar: u16, mut bars: Vec<Bar>) -> Self {
        for bar in &mut bars {
            bar.notes.sort();
            bar.tempos.sort();
            bar.tempos.dedup_by_key(|t| t.sub_beat);
        }
        let mut score = QuantizedScore {
            sub_beats_per_bar,
            bars,
        };
        score.drop_redundant_tempos();
        score
    }

    pub fn empty(sub_beats_per_bar: u16) -> Self {
        QuantizedScore {
            sub_beats_per_bar,
            bars: Vec::new(),
        }
    }

    pub fn n_bars(&self) -> usize {
        self.bars.len()
    }

    pub fn note_count(&self) -> usize {
        self.bars.iter().map(|b| b.notes.len()).sum()
    }

    /// Sub-beats spanned by one 16th-note duration unit.
    pub fn sub_beats_per_unit(&self) -> u16 {
        self.sub_beats_per_bar / 16
    }

    /// Checks the type invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.sub_beats_per_bar != 16 && self.sub_beats_per_bar != 32 {
            return Err(format!("bad resolution {}", self.sub_beats_per_bar));
        }
        for (k, bar) in self.bars.iter().enumerate() {
            for n in &bar.notes {
                if n.sub_beat >= self.sub_beats_per_bar {
                    return Err(format!("bar {k}: sub-beat {} out of bar", n.sub_beat));
                }
                if !(PITCH_MIN..=PITCH_MAX).contains(&n.pitch) {
                    return Err(format!("bar {k}: pitch {} out of range", n.pitch));
                }
                if n.velocity_class >= VELOCITY_CLASSES {
                    return Err(format!("bar {k}: velocity class {}", n.velocity_class));
                }
                if n.duration_units == 0 || n.duration_units > MAX_DURATION_UNITS {
                    return Err(format!("bar {k}: duration {}", n.duration_units));
                }
            }
            for t in &bar.tempos {
                if t.sub_beat >= self.sub_beats_per_bar || t.class as usize >= TEMPO_CLASSES {
                    return Err(format!("bar {k}: bad tempo mark {t:?}"));
                }
            }
        }
        Ok(())
    }

    /// Removes tempo marks that repeat the tempo already in effect.
    fn drop_redundant_tempos(&mut self) {
        let mut current: Option<u8> = None;
        for bar in &mut self.bars {
            bar.tempos.retain(|t| {
                if current == Some(t.class) {
                    false
                } else {
                    current = Some(t.class);
                    true
                }
            });
        }
    }

    /// Transposes every note by `semitones`, octave-folding anything that
    /// leaves the pitch range.
    pub fn transposed(&self, semitones: i32) -> QuantizedScore {
        let bars = self
            .bars
            .iter()
            .map(|b| Bar {
                notes: b
                    .notes
                    .iter()
                    .map(|n| Note {
                        pitch: fold_pitch(n.pitch as i32 + semitones),
                        ..*n
                    })
                    .collect(),
                tempos: b.tempos.clone(),
            })
            .collect();
        QuantizedScore::new(self.sub_beats_per_bar, bars)
    }
}

/// Moves a pitch by whole octaves until it lies inside the model range.
pub fn fold_pitch(pitch: i32) -> u8 {
    let mut p = pitch;
    while p < PITCH_MIN as i32 {
        p += 12;
    }
    while p > PITCH_MAX as i32 {
        p -= 12;
    }
    p as u8
}

/// Tempo value (bpm) of each of the 54 tempo classes.
pub fn tempo_bins() -> [f64; TEMPO_CLASSES] {
    let mut bins = [0.0; TEMPO_CLASSES];
    for (i, b) in bins.iter_mut().enumerate() {
        *b = if i < 42 {
            32.0 + 3.0 * i as f64
        } else {
            158.0 + 6.0 * (i - 42) as f64
        };
    }
    bins
}

/// Nearest tempo class; ties go to the slower class.
pub fn tempo_class(bpm: f64) -> u8 {
    let bins = tempo_bins();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, &b) in bins.iter().enumerate() {
        let dist = (bpm - b).abs();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best as u8
}

pub fn tempo_bpm(class: u8) -> f64 {
    tempo_bins()[class as usize]
}

pub fn velocity_class(velocity: u8) -> u8 {
    let v = velocity.max(VELOCITY_MIN) - VELOCITY_MIN;
    (v / VELOCITY_STEP).min(VELOCITY_CLASSES - 1)
}

pub fn velocity_value(class: u8) -> u8 {
    VELOCITY_MIN + VELOCITY_STEP * class
}

/// `round(num / den)` with exact halves rounded down.
fn round_half_down(num: u64, den: u64) -> u64 {
    let q = num / den;
    let r = num % den;
    if 2 * r > den {
        q + 1
    } else {
        q
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| MidiError::MalformedFile("unexpected end of data".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::MalformedFile(format!(
                "chunk wants {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::MalformedFile("variable-length quantity too long".into()))
    }
}

struct TrackParse {
    notes: Vec<RawNote>,
    tempos: Vec<TempoChange>,
    meters: Vec<TimeSignature>,
    end_tick: u64,
}

fn parse_track(data: &[u8]) -> Result<TrackParse, MidiError> {
    let mut r = Reader::new(data);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut pending: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut out = TrackParse {
        notes: Vec::new(),
        tempos: Vec::new(),
        meters: Vec::new(),
        end_tick: 0,
    };

    fn close(out: &mut TrackParse, channel: u8, pitch: u8, start: (u64, u8), end: u64) {
        out.notes.push(RawNote {
            onset_ticks: start.0,
            duration_ticks: (end - start.0).max(1),
            pitch,
            velocity: start.1,
            channel,
        });
    }

    while r.remaining() > 0 {
        tick += r.vlq()? as u64;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            if first < 0xf0 {
                running = Some(first);
            }
            first
        } else {
            // running status: `first` is already the first data byte
            r.pos -= 1;
            running.ok_or_else(|| MidiError::MalformedFile("data byte without status".into()))?
        };
        match status {
            0x80..=0xef => {
                let channel = status & 0x0f;
                let kind = status & 0xf0;
                let a = r.u8()?;
                let b = if kind == 0xc0 || kind == 0xd0 { 0 } else { r.u8()? };
                if a > 127 || b > 127 {
                    return Err(MidiError::MalformedFile("data byte above 127".into()));
                }
                match kind {
                    0x90 if b > 0 => {
                        pending.entry((channel, a)).or_default().push_back((tick, b));
                    }
                    0x80 | 0x90 => {
                        if let Some(start) =
                            pending.get_mut(&(channel, a)).and_then(|q| q.pop_front())
                        {
                            close(&mut out, channel, a, start, tick);
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0xff => {
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let body = r.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, body[0], body[1], body[2]]);
                        if us == 0 {
                            return Err(MidiError::MalformedFile("zero tempo".into()));
                        }
                        out.tempos.push(TempoChange {
                            tick,
                            bpm: 60_000_000.0 / us as f64,
                        });
                    }
                    0x58 if len >= 2 => {
                        if body[1] > 7 {
                            return Err(MidiError::MalformedFile("bad meter denominator".into()));
                        }
                        out.meters.push(TimeSignature {
                            tick,
                            numerator: body[0],
                            denominator: 1u8 << body[1],
                        });
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            _ => {
                return Err(MidiError::MalformedFile(format!(
                    "unexpected status byte {status:#04x}"
                )))
            }
        }
    }
    out.end_tick = tick;
    // unmatched note-ons are closed at the end of the track
    let mut leftovers: Vec<_> = pending.into_iter().collect();
    leftovers.sort_by_key(|(k, _)| *k);
    for ((channel, pitch), queue) in leftovers {
        for start in queue {
            close(&mut out, channel, pitch, start, tick);
        }
    }
    Ok(out)
}

/// Parses a format 0 or format 1 Standard MIDI File.
pub fn parse_midi(bytes: &[u8]) -> Result<RawScore, MidiError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| MidiError::MalformedFile("missing header".into()))? != b"MThd" {
        return Err(MidiError::MalformedFile("missing MThd header".into()));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedFile(format!("header length {header_len}")));
    }
    let header = r.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let n_tracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat("SMF type 2".into())),
        f => return Err(MidiError::MalformedFile(format!("unknown format {f}"))),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedFile("zero ticks per quarter".into()));
    }

    let mut score = RawScore {
        tracks: Vec::new(),
        tempo_changes: Vec::new(),
        time_signatures: Vec::new(),
        ticks_per_quarter: division,
        end_tick: 0,
    };
    while score.tracks.len() < n_tracks as usize && r.remaining() > 0 {
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        if id != b"MTrk" {
            continue;
        }
        let parsed = parse_track(body)?;
        score.tempo_changes.extend(parsed.tempos);
        score.time_signatures.extend(parsed.meters);
        score.end_tick = score.end_tick.max(parsed.end_tick);
        let mut notes = parsed.notes;
        notes.sort_by_key(|n| (n.onset_ticks, n.pitch, n.channel, n.duration_ticks));
        score.tracks.push(RawTrack { notes });
    }
    if score.tracks.len() < n_tracks as usize {
        return Err(MidiError::MalformedFile(format!(
            "header announces {n_tracks} tracks, found {}",
            score.tracks.len()
        )));
    }
    score.tempo_changes.sort_by_key(|a| a.tick);
    score.time_signatures.sort_by_key(|t| t.tick);
    Ok(score)
}

// ---------------------------------------------------------------------------
// Quantization

/// Snaps a parsed file onto the bar/sub-beat grid.
pub fn quantize(raw: &RawScore, sub_beats_per_bar: u16) -> Result<QuantizedScore, MidiError> {
    if sub_beats_per_bar != 16 && sub_beats_per_bar != 32 {
        return Err(MidiError::BadResolution(sub_beats_per_bar));
    }
    for ts in &raw.time_signatures {
        if (ts.numerator, ts.denominator) != (4, 4) {
            return Err(MidiError::UnsupportedMeter(ts.numerator, ts.denominator));
        }
    }
    let tpq = raw.ticks_per_quarter as u64;
    let bar_ticks = 4 * tpq;
    let b = sub_beats_per_bar as u64;
    // position on the grid in units of 1/b bar: tick * b / bar_ticks
    let grid = |tick: u64| round_half_down(tick * b, bar_ticks);
    let unit_ticks_num = tpq; // one 16th = tpq / 4 ticks

    let mut positioned: Vec<(u64, Note)> = Vec::with_capacity(raw.note_count());
    for track in &raw.tracks {
        for n in &track.notes {
            let g = grid(n.onset_ticks);
            let units = round_half_down(n.duration_ticks * 4, unit_ticks_num)
                .clamp(1, MAX_DURATION_UNITS as u64) as u8;
            positioned.push((
                g,
                Note {
                    sub_beat: (g % b) as u16,
                    pitch: fold_pitch(n.pitch as i32),
                    velocity_class: velocity_class(n.velocity),
                    duration_units: units,
                },
            ));
        }
    }
    let mut tempos: Vec<(u64, u8)> = raw
        .tempo_changes
        .iter()
        .map(|t| (grid(t.tick), tempo_class(t.bpm)))
        .collect();
    // stable sort keeps file order among equal positions; last one wins
    tempos.sort_by_key(|t| t.0);

    let mut n_bars = (raw.end_tick / bar_ticks) as usize;
    if let Some(max_g) = positioned.iter().map(|p| p.0).max() {
        n_bars = n_bars.max((max_g / b) as usize + 1);
    }
    if let Some(last) = tempos.last() {
        n_bars = n_bars.max((last.0 / b) as usize + 1);
    }
    let mut bars = vec![Bar::default(); n_bars];
    for (g, note) in positioned {
        bars[(g / b) as usize].notes.push(note);
    }
    for (g, class) in tempos {
        let bar = &mut bars[(g / b) as usize];
        let sub_beat = (g % b) as u16;
        if let Some(existing) = bar.tempos.iter_mut().find(|t| t.sub_beat == sub_beat) {
            existing.class = class;
        } else {
            bar.tempos.push(TempoMark { sub_beat, class });
        }
    }
    Ok(QuantizedScore::new(sub_beats_per_bar, bars))
}

// ---------------------------------------------------------------------------
// Writing

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 5];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum WriteEvent {
    // order matters at equal ticks: meta first, then releases, then onsets
    Tempo(u8),
    Off { channel: u8, pitch: u8 },
    On { channel: u8, pitch: u8, velocity: u8 },
}

/// Renders a quantized score as a format-0 SMF at 480 ticks per quarter.
///
/// Overlapping notes of the same pitch are spread over distinct channels so
/// a re-parse pairs every release with the right onset.
pub fn write_midi(q: &QuantizedScore) -> Vec<u8> {
    let tpq = WRITE_TPQ as u64;
    let bar_ticks = 4 * tpq;
    let sub_ticks = bar_ticks / q.sub_beats_per_bar as u64;
    let unit_ticks = tpq / 4;

    let mut events: Vec<(u64, WriteEvent)> = Vec::new();
    // (pitch, channel) -> release tick of the note currently sounding there
    let mut busy: HashMap<(u8, u8), u64> = HashMap::new();
    let mut last_off = 0;
    for (k, bar) in q.bars.iter().enumerate() {
        let bar_start = k as u64 * bar_ticks;
        for t in &bar.tempos {
            events.push((bar_start + t.sub_beat as u64 * sub_ticks, WriteEvent::Tempo(t.class)));
        }
        for n in &bar.notes {
            let on = bar_start + n.sub_beat as u64 * sub_ticks;
            let off = on + n.duration_units as u64 * unit_ticks;
            let channel = (0u8..16)
                .filter(|&c| c != DRUM_CHANNEL)
                .find(|&c| busy.get(&(n.pitch, c)).is_none_or(|&end| end <= on))
                .unwrap_or(0);
            busy.insert((n.pitch, channel), off);
            last_off = last_off.max(off);
            events.push((
                on,
                WriteEvent::On {
                    channel,
                    pitch: n.pitch,
                    velocity: velocity_value(n.velocity_class),
                },
            ));
            events.push((off, WriteEvent::Off { channel, pitch: n.pitch }));
        }
    }
    events.sort();

    let mut track = Vec::new();
    // time signature 4/4, 24 clocks per click, 8 32nds per quarter
    track.extend_from_slice(&[0x00, 0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08]);
    let mut now = 0u64;
    for (tick, ev) in &events {
        push_vlq(&mut track, (tick - now) as u32);
        now = *tick;
        match *ev {
            WriteEvent::Tempo(class) => {
                let us = (60_000_000.0 / tempo_bpm(class)).round() as u32;
                track.extend_from_slice(&[0xff, 0x51, 0x03]);
                track.extend_from_slice(&us.to_be_bytes()[1..]);
            }
            WriteEvent::On { channel, pitch, velocity } => {
                track.extend_from_slice(&[0x90 | channel, pitch, velocity]);
            }
            WriteEvent::Off { channel, pitch } => {
                track.extend_from_slice(&[0x80 | channel, pitch, 0x40]);
            }
        }
    }
    let end = (q.bars.len() as u64 * bar_ticks).max(last_off).max(now);
    push_vlq(&mut track, (end - now) as u32);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TPQ.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled SMF: one track, C4 at tick 0 for 480 ticks.
    fn one_note_file() -> Vec<u8> {
        vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xe0, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 13, //
            0x00, 0x90, 60, 100, //
            0x83, 0x60, 0x80, 60, 64, // delta 480
            0x00, 0xff, 0x2f, 0x00,
        ]
    }

    #[test]
    fn parses_single_note() {
        let raw = parse_midi(&one_note_file()).unwrap();
        assert_eq!(raw.ticks_per_quarter, 480);
        assert_eq!(raw.note_count(), 1);
        let n = raw.tracks[0].notes[0];
        assert_eq!((n.onset_ticks, n.duration_ticks, n.pitch, n.velocity), (0, 480, 60, 100));
    }

    #[test]
    fn empty_track_has_no_notes() {
        let bytes = vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 1, 0, 1, 0x01, 0xe0, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 0,
        ];
        let raw = parse_midi(&bytes).unwrap();
        assert_eq!(raw.note_count(), 0);
    }

    #[test]
    fn zero_velocity_note_on_releases_with_running_status() {
        // 0x90 60 100, then running status "60 0" after 240 ticks
        let bytes = vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xe0, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 11, //
            0x00, 0x90, 60, 100, //
            0x81, 0x70, 60, 0, //
            0x00, 0xff, 0x2f, //
        ];
        // track length above is deliberately one byte short of the meta event body
        assert!(matches!(parse_midi(&bytes), Err(MidiError::MalformedFile(_))));
        let mut fixed = bytes.clone();
        fixed[21] = 12;
        fixed.push(0x00);
        let raw = parse_midi(&fixed).unwrap();
        assert_eq!(raw.note_count(), 1);
        assert_eq!(raw.tracks[0].notes[0].duration_ticks, 240);
    }

    #[test]
    fn unmatched_note_on_closed_at_track_end() {
        let bytes = vec![
            b'M', b'T', b'h', b'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x00, 0x60, //
            b'M', b'T', b'r', b'k', 0, 0, 0, 8, //
            0x00, 0x90, 64, 90, //
            0x60, 0xff, 0x2f, 0x00,
        ];
        let raw = parse_midi(&bytes).unwrap();
        assert_eq!(raw.tracks[0].notes[0].duration_ticks, 96);
    }

    #[test]
    fn rejects_type_two_and_garbage() {
        let mut bytes = one_note_file();
        bytes[9] = 2;
        assert!(matches!(parse_midi(&bytes), Err(MidiError::UnsupportedFormat(_))));
        assert!(matches!(parse_midi(b"RIFF...."), Err(MidiError::MalformedFile(_))));
        let mut truncated = one_note_file();
        truncated.truncate(25);
        assert!(matches!(parse_midi(&truncated), Err(MidiError::MalformedFile(_))));
    }

    fn raw_with(notes: Vec<RawNote>) -> RawScore {
        RawScore {
            tracks: vec![RawTrack { notes }],
            tempo_changes: vec![],
            time_signatures: vec![],
            ticks_per_quarter: 480,
            end_tick: 0,
        }
    }

    fn note(onset: u64, dur: u64, pitch: u8, vel: u8) -> RawNote {
        RawNote {
            onset_ticks: onset,
            duration_ticks: dur,
            pitch,
            velocity: vel,
            channel: 0,
        }
    }

    #[test]
    fn onset_snaps_to_nearest_sixteenth() {
        let q = quantize(&raw_with(vec![note(470, 480, 60, 80)]), 16).unwrap();
        assert_eq!(q.bars[0].notes[0].sub_beat, 4);
    }

    #[test]
    fn exact_half_rounds_down() {
        // 60 ticks is half a 16th at tpq 480
        let q = quantize(&raw_with(vec![note(60, 480, 60, 80)]), 16).unwrap();
        assert_eq!(q.bars[0].notes[0].sub_beat, 0);
    }

    #[test]
    fn duration_and_velocity_clamps() {
        let q = quantize(&raw_with(vec![note(0, 10, 60, 127), note(0, 100_000, 62, 1)]), 16)
            .unwrap();
        let notes = &q.bars[0].notes;
        assert_eq!(notes[0].duration_units, 1);
        assert_eq!(notes[0].velocity_class, 23);
        assert_eq!(notes[1].duration_units, 16);
        assert_eq!(notes[1].velocity_class, 0);
    }

    #[test]
    fn out_of_range_pitch_folds_by_octave() {
        let q = quantize(&raw_with(vec![note(0, 120, 10, 80), note(0, 120, 120, 80)]), 16).unwrap();
        let pitches: Vec<u8> = q.bars[0].notes.iter().map(|n| n.pitch).collect();
        assert_eq!(pitches, vec![22, 108 - 12]);
    }

    #[test]
    fn non_four_four_rejected() {
        let mut raw = raw_with(vec![note(0, 120, 60, 80)]);
        raw.time_signatures.push(TimeSignature {
            tick: 0,
            numerator: 3,
            denominator: 4,
        });
        assert_eq!(quantize(&raw, 16), Err(MidiError::UnsupportedMeter(3, 4)));
    }

    #[test]
    fn tempo_bins_cover_range() {
        let bins = tempo_bins();
        assert_eq!(bins[0], 32.0);
        assert_eq!(bins[TEMPO_CLASSES - 1], 224.0);
        assert!(bins.windows(2).all(|w| w[0] < w[1]));
        for (i, &b) in bins.iter().enumerate() {
            assert_eq!(tempo_class(b) as usize, i);
            assert_eq!(tempo_class(60_000_000.0 / (60_000_000.0 / b).round()) as usize, i);
        }
        assert_eq!(tempo_class(10.0), 0);
        assert_eq!(tempo_class(400.0) as usize, TEMPO_CLASSES - 1);
    }

    #[test]
    fn empty_score_writes_header_and_end_of_track() {
        let bytes = write_midi(&QuantizedScore::empty(16));
        assert_eq!(&bytes[..4], b"MThd");
        assert_eq!(&bytes[14..18], b"MTrk");
        assert_eq!(&bytes[bytes.len() - 3..], &[0xff, 0x2f, 0x00]);
        let raw = parse_midi(&bytes).unwrap();
        assert_eq!(raw.note_count(), 0);
        assert_eq!(quantize(&raw, 16).unwrap(), QuantizedScore::empty(16));
    }

    #[test]
    fn one_note_round_trip() {
        let q = QuantizedScore::new(
            16,
            vec![Bar {
                notes: vec![Note {
                    sub_beat: 3,
                    pitch: 67,
                    velocity_class: 9,
                    duration_units: 5,
                }],
                tempos: vec![TempoMark { sub_beat: 0, class: 29 }],
            }],
        );
        let raw = parse_midi(&write_midi(&q)).unwrap();
        assert_eq!(raw.note_count(), 1);
        assert_eq!(raw.tracks[0].notes[0].pitch, 67);
        assert_eq!(quantize(&raw, 16).unwrap(), q);
    }

    #[test]
    fn overlapping_same_pitch_notes_survive() {
        let q = QuantizedScore::new(
            16,
            vec![
                Bar {
                    notes: vec![
                        Note { sub_beat: 0, pitch: 60, velocity_class: 3, duration_units: 16 },
                        Note { sub_beat: 2, pitch: 60, velocity_class: 4, duration_units: 1 },
                        Note { sub_beat: 2, pitch: 60, velocity_class: 4, duration_units: 3 },
                    ],
                    tempos: vec![],
                },
                Bar::default(),
            ],
        );
        let back = quantize(&parse_midi(&write_midi(&q)).unwrap(), 16).unwrap();
        assert_eq!(back, q);
    }
}
