//! Waveforms, the `CLM1` audio file format, and autocorrelation pitch tracking.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const AUDIO_MAGIC: &[u8; 4] = b"CLM1";

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate", "must be > 0"));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::invalid(
                "samples",
                format!("sample {i} = {s} outside [-1, 1]"),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a waveform, clamping samples into [-1, 1].
    pub fn clamped(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        for s in samples.iter_mut() {
            *s = if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 };
        }
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Samples `[start, end)` as a new waveform.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.samples.len() {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {end}) outside 0..{}", self.samples.len()),
            ));
        }
        Ok(Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(AUDIO_MAGIC);
        w.u32(self.sample_rate);
        w.u32(self.samples.len() as u32);
        w.u32(0);
        w.f32s(&self.samples);
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        r.magic(AUDIO_MAGIC)?;
        let sample_rate = r.u32()?;
        let n = r.u32()? as usize;
        let _reserved = r.u32()?;
        let samples = r.f32s(n)?;
        r.finish()?;
        Self::new(samples, sample_rate).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        write_file(path, &self.to_bytes(), force)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Pitch tracker settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchParams {
    pub min_f0: f64,
    pub max_f0: f64,
    /// Analysis window in seconds.
    pub window: f64,
    /// Hop between analysis windows in seconds.
    pub hop: f64,
    /// Minimum normalized autocorrelation peak for a frame to count as voiced.
    pub voicing_threshold: f64,
    /// Frames whose RMS is below this are unvoiced.
    pub min_rms: f64,
}

impl Default for PitchParams {
    fn default() -> Self {
        Self {
            min_f0: 60.0,
            max_f0: 500.0,
            window: 0.04,
            hop: 0.01,
            voicing_threshold: 0.5,
            min_rms: 1e-3,
        }
    }
}

/// Estimates the fundamental frequency of `x` by normalized autocorrelation.
///
/// Returns `None` when the segment is silent or not periodic enough. The
/// shortest lag whose correlation is within 10% of the best one wins, which
/// suppresses octave-down errors on strongly harmonic input.
pub fn estimate_f0(x: &[f32], sample_rate: u32, params: &PitchParams) -> Option<f64> {
    let sr = sample_rate as f64;
    let min_lag = (sr / params.max_f0).floor().max(2.0) as usize;
    let max_lag = (sr / params.min_f0).ceil() as usize;
    if x.len() < max_lag + 2 || min_lag >= max_lag {
        return None;
    }
    let energy: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum();
    if (energy / x.len() as f64).sqrt() < params.min_rms {
        return None;
    }
    let corr = |lag: usize| -> f64 {
        let n = x.len() - lag;
        let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            let a = x[i] as f64;
            let b = x[i + lag] as f64;
            xy += a * b;
            xx += a * a;
            yy += b * b;
        }
        if xx <= 0.0 || yy <= 0.0 {
            0.0
        } else {
            xy / (xx * yy).sqrt()
        }
    };
    let r: Vec<f64> = (min_lag - 1..=max_lag + 1).map(corr).collect();
    // r[i] corresponds to lag min_lag - 1 + i
    let best = r[1..r.len() - 1].iter().cloned().fold(f64::MIN, f64::max);
    if best < params.voicing_threshold {
        return None;
    }
    for i in 1..r.len() - 1 {
        let is_peak = r[i] >= r[i - 1] && r[i] >= r[i + 1];
        if is_peak && r[i] >= 0.9 * best {
            let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-12 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            let lag = (min_lag - 1 + i) as f64 + shift;
            return Some(sr / lag);
        }
    }
    None
}

/// Frame-wise pitch track; `None` entries are unvoiced frames.
pub fn f0_track(w: &Waveform, params: &PitchParams) -> Vec<Option<f64>> {
    let sr = w.sample_rate() as f64;
    let win = (params.window * sr).round() as usize;
    let hop = ((params.hop * sr).round() as usize).max(1);
    let x = w.samples();
    if x.len() < win || win == 0 {
        return Vec::new();
    }
    (0..=(x.len() - win) / hop)
        .map(|i| estimate_f0(&x[i * hop..i * hop + win], w.sample_rate(), params))
        .collect()
}
