//! Bar-level rhythmic intensity and polyphony scores and their ordinal
//! classes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{Bar, QuantizedScore};

pub const N_CLASSES: usize = 8;

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("need at least 8 distinct values to fit bins, got {0}")]
    DegenerateDistribution(usize),
    #[error("attribute file: {0}")]
    Format(String),
}

impl From<csv::Error> for AttributeError {
    fn from(e: csv::Error) -> Self {
        AttributeError::Format(e.to_string())
    }
}

/// Raw scores and classes of one bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarAttributes {
    pub bar_index: usize,
    pub s_rhym: f64,
    pub s_poly: f64,
    pub a_rhym: u8,
    pub a_poly: u8,
}

/// Seven ascending cut-offs per attribute, separating eight classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeBins {
    pub rhym_cutoffs: [f64; 7],
    pub poly_cutoffs: [f64; 7],
}

impl AttributeBins {
    /// Cut-offs measured on a large pop-piano corpus.
    pub fn reference() -> Self {
        AttributeBins {
            rhym_cutoffs: [0.20, 0.25, 0.32, 0.38, 0.44, 0.50, 0.63],
            poly_cutoffs: [2.63, 3.06, 3.50, 4.00, 4.63, 5.44, 6.44],
        }
    }

    /// Fits both cut-off lists on per-bar scores of a corpus.
    pub fn fit(rhym: &[f64], poly: &[f64]) -> Result<Self, AttributeError> {
        Ok(AttributeBins {
            rhym_cutoffs: fit_bins(rhym)?,
            poly_cutoffs: fit_bins(poly)?,
        })
    }

    pub fn classify_rhym(&self, s: f64) -> u8 {
        classify(s, &self.rhym_cutoffs)
    }

    pub fn classify_poly(&self, s: f64) -> u8 {
        classify(s, &self.poly_cutoffs)
    }
}

/// Fraction of sub-beats holding at least one onset.
pub fn rhythmic_intensity(bar: &Bar, sub_beats: u16) -> f64 {
    let mut hit = vec![false; sub_beats as usize];
    for n in &bar.notes {
        if let Some(h) = hit.get_mut(n.sub_beat as usize) {
            *h = true;
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / sub_beats as f64
}

/// Mean number of notes struck or held per sub-beat, counting only notes
/// that start in this bar.
pub fn polyphony(bar: &Bar, sub_beats: u16) -> f64 {
    let per_unit = (sub_beats / 16).max(1) as usize;
    let b = sub_beats as usize;
    let mut total = 0usize;
    for n in &bar.notes {
        let len = n.duration_units as usize * per_unit;
        let end = (n.sub_beat as usize + len).min(b);
        total += end.saturating_sub(n.sub_beat as usize);
    }
    total as f64 / b as f64
}

/// Per-bar `(s_rhym, s_poly)` for a whole score; notes ringing past a bar
/// line count as holds in the bars they reach.
pub fn score_bars(q: &QuantizedScore) -> Vec<(f64, f64)> {
    let b = q.sub_beats_per_bar as usize;
    let per_unit = q.sub_beats_per_unit() as usize;
    let total = q.bars.len() * b;
    let mut sounding = vec![0usize; total];
    for (k, bar) in q.bars.iter().enumerate() {
        for n in &bar.notes {
            let start = k * b + n.sub_beat as usize;
            let end = (start + n.duration_units as usize * per_unit).min(total);
            for s in &mut sounding[start..end] {
                *s += 1;
            }
        }
    }
    q.bars
        .iter()
        .enumerate()
        .map(|(k, bar)| {
            let poly = sounding[k * b..(k + 1) * b].iter().sum::<usize>() as f64 / b as f64;
            (rhythmic_intensity(bar, q.sub_beats_per_bar), poly)
        })
        .collect()
}

pub fn compute_attributes(q: &QuantizedScore, bins: &AttributeBins) -> Vec<BarAttributes> {
    score_bars(q)
        .into_iter()
        .enumerate()
        .map(|(k, (r, p))| BarAttributes {
            bar_index: k,
            s_rhym: r,
            s_poly: p,
            a_rhym: bins.classify_rhym(r),
            a_poly: bins.classify_poly(p),
        })
        .collect()
}

/// The 1/8 .. 7/8 empirical quantiles by nearest rank on the sorted scores.
///
/// Cut-off `i` is the value at 0-based sorted index `ceil(i * n / 8)`, so
/// exactly that many samples fall below it when there are no ties. A
/// cut-off colliding with its predecessor moves up to the next distinct
/// value to keep the list strictly ascending.
pub fn fit_bins(scores: &[f64]) -> Result<[f64; 7], AttributeError> {
    let mut sorted: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < N_CLASSES {
        return Err(AttributeError::DegenerateDistribution(distinct.len()));
    }
    let n = sorted.len();
    let mut cutoffs = [0.0; 7];
    let mut prev = f64::NEG_INFINITY;
    for (i, c) in cutoffs.iter_mut().enumerate() {
        let idx = ((i + 1) * n).div_ceil(N_CLASSES).min(n - 1);
        let mut value = sorted[idx];
        if value <= prev {
            value = *distinct
                .iter()
                .find(|&&d| d > prev)
                .ok_or(AttributeError::DegenerateDistribution(distinct.len()))?;
        }
        *c = value;
        prev = value;
    }
    Ok(cutoffs)
}

/// Number of cut-offs at or below `score`: below the first is class 0,
/// at or above the last is class 7.
pub fn classify(score: f64, cutoffs: &[f64; 7]) -> u8 {
    cutoffs.partition_point(|&c| c <= score) as u8
}

pub fn write_attribute_file<W: Write>(w: W, rows: &[BarAttributes]) -> Result<(), AttributeError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| AttributeError::Format(e.to_string()))?;
    Ok(())
}

pub fn read_attribute_file<R: Read>(r: R) -> Result<Vec<BarAttributes>, AttributeError> {
    let mut rows = Vec::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    for rec in reader.deserialize() {
        let row: BarAttributes = rec?;
        if row.a_rhym as usize >= N_CLASSES || row.a_poly as usize >= N_CLASSES {
            return Err(AttributeError::Format(format!(
                "bar {}: class outside 0..7",
                row.bar_index
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}
