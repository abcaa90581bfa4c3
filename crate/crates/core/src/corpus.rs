//! Synthetic multi-speaker corpus.
//!
//! Each speaker is a harmonic source with its own fundamental, spectral tilt
//! and vibrato; each content symbol shapes the harmonics with a pair of
//! formant bumps. That gives every utterance a measurable speaker signature
//! (f0, timbre) and symbol-dependent content.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::Waveform;
use crate::binio::{read_file, write_file};
use crate::error::{Error, Result};
use crate::frontend::{self, PAD_ID, PHONEME_VOCAB};

/// Attack and release of the per-unit amplitude envelope, in seconds.
const ENVELOPE_RAMP: f64 = 0.010;
/// Output gain relative to the sum of harmonic amplitudes; bounds the peak.
const HEADROOM: f64 = 0.9;

/// Letters used for synthetic content. No `h` or `g`, so no two adjacent
/// symbols can form a digraph and text maps back to units one-to-one.
pub const CONTENT_ALPHABET: &str = "abdeiklmnoprstuv";

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSpec {
    pub speaker_id: u32,
    pub f0: f64,
    pub harmonic_amps: Vec<f64>,
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
}

impl SpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(Error::invalid("f0", format!("{} must be > 0", self.f0)));
        }
        if self.harmonic_amps.is_empty() {
            return Err(Error::invalid("harmonic_amps", "empty"));
        }
        if self
            .harmonic_amps
            .iter()
            .any(|a| !a.is_finite() || *a < 0.0)
        {
            return Err(Error::invalid("harmonic_amps", "negative or non-finite"));
        }
        if !self.harmonic_amps.iter().any(|a| *a > 0.0) {
            return Err(Error::invalid("harmonic_amps", "all zero"));
        }
        if !(0.0..=0.2).contains(&self.vibrato_depth) {
            return Err(Error::invalid(
                "vibrato_depth",
                format!("{} not in [0, 0.2]", self.vibrato_depth),
            ));
        }
        if !(self.vibrato_rate >= 0.0 && self.vibrato_rate.is_finite()) {
            return Err(Error::invalid("vibrato_rate", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentUnit {
    pub symbol_id: u16,
    /// Seconds.
    pub duration: f64,
    /// Semitones relative to the speaker's f0.
    pub pitch_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContentSeq {
    pub units: Vec<ContentUnit>,
}

impl ContentSeq {
    pub fn validate(&self) -> Result<()> {
        if self.units.is_empty() {
            return Err(Error::invalid("content", "no units"));
        }
        for (i, u) in self.units.iter().enumerate() {
            if !(u.duration > 0.0 && u.duration.is_finite()) {
                return Err(Error::invalid(
                    format!("content.units[{i}].duration"),
                    format!("{} must be > 0", u.duration),
                ));
            }
            if u.symbol_id == PAD_ID
                || u.symbol_id as usize >= PHONEME_VOCAB
                || frontend::symbol(u.symbol_id).is_none()
            {
                return Err(Error::invalid(
                    format!("content.units[{i}].symbol_id"),
                    format!("{} not in the phoneme vocabulary", u.symbol_id),
                ));
            }
            if !u.pitch_offset.is_finite() {
                return Err(Error::invalid(
                    format!("content.units[{i}].pitch_offset"),
                    "non-finite",
                ));
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.units.iter().map(|u| u.duration).sum()
    }

    /// Symbol string of the content.
    pub fn text(&self) -> String {
        self.units
            .iter()
            .filter_map(|u| frontend::symbol(u.symbol_id))
            .map(|s| if s == "<sp>" { " ".to_string() } else { s })
            .collect()
    }
}

/// Sample span `[start, end)` rendered for one content unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedUnit {
    pub symbol_id: u16,
    pub start: usize,
    pub end: usize,
}

/// Phoneme ids of the units overlapping samples `[start, end)`.
pub fn phonemes_in_span(alignment: &[AlignedUnit], start: usize, end: usize) -> Vec<u16> {
    let ids: Vec<u16> = alignment
        .iter()
        .filter(|u| u.end > start && u.start < end && u.end > u.start)
        .map(|u| u.symbol_id)
        .collect();
    frontend::dedup_consecutive(&ids)
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: SpeakerSpec,
    pub content: ContentSeq,
    pub waveform: Waveform,
    pub text: String,
    pub alignment: Vec<AlignedUnit>,
}

/// Relative weight of a harmonic at `freq` Hz for content `symbol`, in [0.2, 1].
fn formant_weight(symbol: u16, freq: f64) -> f64 {
    // two formants spread deterministically over the band by symbol id
    let s = symbol as f64;
    let f1 = 300.0 + (s * 137.0) % 600.0;
    let f2 = 1000.0 + (s * 311.0) % 1800.0;
    let bump = |c: f64, bw: f64| (-((freq - c) / bw).powi(2)).exp();
    0.2 + 0.8 * bump(f1, 150.0).max(bump(f2, 300.0))
}

/// Renders one utterance. Deterministic in all arguments.
pub fn generate_utterance(
    spec: &SpeakerSpec,
    content: &ContentSeq,
    sample_rate: u32,
    seed: u64,
) -> Result<Utterance> {
    spec.validate()?;
    content.validate()?;
    if sample_rate < 8000 {
        return Err(Error::invalid(
            "sample_rate",
            format!("{sample_rate} < 8000"),
        ));
    }
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harmonic_phase: Vec<f64> = spec
        .harmonic_amps
        .iter()
        .map(|_| rng.random::<f64>() * 2.0 * PI)
        .collect();
    let vibrato_phase = rng.random::<f64>() * 2.0 * PI;
    let gain = HEADROOM / spec.harmonic_amps.iter().sum::<f64>();

    let total = (content.total_duration() * sr).round() as usize;
    let mut samples = vec![0.0f32; total];
    let ramp = (ENVELOPE_RAMP * sr).round().max(1.0);
    let mut phase = 0.0f64;
    let mut elapsed = 0.0f64;
    let mut start = 0usize;
    let mut alignment = Vec::with_capacity(content.units.len());
    for unit in &content.units {
        elapsed += unit.duration;
        let end = ((elapsed * sr).round() as usize).min(total);
        let len = end.saturating_sub(start);
        let base = spec.f0 * 2f64.powf(unit.pitch_offset / 12.0);
        let weights: Vec<f64> = (1..=spec.harmonic_amps.len())
            .map(|h| formant_weight(unit.symbol_id, base * h as f64))
            .collect();
        for i in 0..len {
            let n = start + i;
            let t = n as f64 / sr;
            let f = base
                * (1.0
                    + spec.vibrato_depth
                        * (2.0 * PI * spec.vibrato_rate * t + vibrato_phase).sin());
            let mut acc = 0.0f64;
            for (h, (&amp, &w)) in spec.harmonic_amps.iter().zip(&weights).enumerate() {
                let k = (h + 1) as f64;
                if k * f >= sr / 2.0 {
                    break;
                }
                acc += amp * w * (k * phase + harmonic_phase[h]).sin();
            }
            let pos = i as f64;
            let env = (pos / ramp)
                .min((len as f64 - 1.0 - pos) / ramp)
                .clamp(0.0, 1.0);
            samples[n] = (gain * env * acc) as f32;
            phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        }
        alignment.push(AlignedUnit {
            symbol_id: unit.symbol_id,
            start,
            end: end.max(start),
        });
        start = end;
    }
    let waveform = Waveform::new(samples, sample_rate)?;
    Ok(Utterance {
        speaker: spec.clone(),
        text: content.text(),
        content: content.clone(),
        waveform,
        alignment,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub out_dir: PathBuf,
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// Utterance duration range in seconds.
    pub min_duration: f64,
    pub max_duration: f64,
    pub held_out_speakers: usize,
    pub sample_rate: u32,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Per-unit duration range in seconds.
    pub unit_min: f64,
    pub unit_max: f64,
    /// Max absolute per-unit pitch offset in semitones.
    pub pitch_jitter: f64,
    pub harmonics: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("corpus"),
            speakers: 10,
            utterances_per_speaker: 4,
            min_duration: 2.0,
            max_duration: 6.0,
            held_out_speakers: 2,
            sample_rate: 8000,
            f0_min: 90.0,
            f0_max: 260.0,
            unit_min: 0.08,
            unit_max: 0.25,
            pitch_jitter: 0.0,
            harmonics: 10,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Collects every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.speakers == 0 {
            p.push("corpus.speakers must be >= 1".into());
        }
        if self.utterances_per_speaker == 0 {
            p.push("corpus.utterances_per_speaker must be >= 1".into());
        }
        if self.held_out_speakers > self.speakers {
            p.push(format!(
                "corpus.held_out_speakers ({}) exceeds corpus.speakers ({})",
                self.held_out_speakers, self.speakers
            ));
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration) {
            p.push("corpus duration range must satisfy 0 < min_duration <= max_duration".into());
        }
        if self.sample_rate < 8000 {
            p.push("corpus.sample_rate must be >= 8000".into());
        }
        if !(self.f0_min > 0.0 && self.f0_min <= self.f0_max) {
            p.push("corpus f0 range must satisfy 0 < f0_min <= f0_max".into());
        }
        if !(self.unit_min > 0.0 && self.unit_min <= self.unit_max) {
            p.push("corpus unit range must satisfy 0 < unit_min <= unit_max".into());
        }
        if !(self.pitch_jitter >= 0.0) {
            p.push("corpus.pitch_jitter must be >= 0".into());
        }
        if self.harmonics == 0 {
            p.push("corpus.harmonics must be >= 1".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: u32,
    pub split: Split,
    pub relative_path: String,
    pub text: String,
    /// Unit timings; empty when the corpus has no alignment file.
    pub alignment: Vec<AlignedUnit>,
}

/// A corpus on disk: manifest plus speaker table.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub speakers: Vec<SpeakerSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPEAKERS_FILE: &str = "speakers.tsv";
pub const ALIGNMENTS_FILE: &str = "alignments.tsv";

fn speaker_for(cfg: &CorpusConfig, speaker_id: u32) -> SpeakerSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + speaker_id as u64);
    let f0 = if cfg.speakers > 1 {
        // spread speakers across the range, jittered within their slot
        let slot = (cfg.f0_max - cfg.f0_min) / cfg.speakers as f64;
        cfg.f0_min + slot * (speaker_id as f64 + rng.random::<f64>())
    } else {
        cfg.f0_min + (cfg.f0_max - cfg.f0_min) * rng.random::<f64>()
    };
    let tilt = rng.random_range(0.15..0.6);
    let harmonic_amps = (0..cfg.harmonics)
        .map(|h| (-tilt * h as f64).exp() * rng.random_range(0.5..1.0))
        .collect();
    SpeakerSpec {
        speaker_id,
        f0,
        harmonic_amps,
        vibrato_rate: rng.random_range(4.0..6.0),
        vibrato_depth: rng.random_range(0.0..0.01),
    }
}

fn content_for(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> ContentSeq {
    let alphabet: Vec<u16> = CONTENT_ALPHABET
        .chars()
        .map(|c| frontend::text_to_phonemes(&c.to_string()).unwrap().ids()[0])
        .collect();
    let target = if cfg.max_duration > cfg.min_duration {
        rng.random_range(cfg.min_duration..=cfg.max_duration)
    } else {
        cfg.min_duration
    };
    let mut units: Vec<ContentUnit> = Vec::new();
    let mut total = 0.0;
    while total < target - 1e-9 {
        let mut symbol_id = alphabet[rng.random_range(0..alphabet.len())];
        while units.last().map(|u| u.symbol_id) == Some(symbol_id) {
            symbol_id = alphabet[rng.random_range(0..alphabet.len())];
        }
        let dur = if cfg.unit_max > cfg.unit_min {
            rng.random_range(cfg.unit_min..=cfg.unit_max)
        } else {
            cfg.unit_min
        };
        let duration = dur.min(target - total);
        let pitch_offset = if cfg.pitch_jitter > 0.0 {
            rng.random_range(-cfg.pitch_jitter..=cfg.pitch_jitter)
        } else {
            0.0
        };
        units.push(ContentUnit {
            symbol_id,
            duration,
            pitch_offset,
        });
        total += duration;
    }
    // a sliver at the end would be inaudible; fold it into the previous unit
    if units.len() > 1 && units.last().unwrap().duration < cfg.unit_min / 2.0 {
        let last = units.pop().unwrap();
        units.last_mut().unwrap().duration += last.duration;
    }
    ContentSeq { units }
}

/// Speaker ids held out from training: evenly spaced through the id range, so
/// their fundamentals fall inside the range covered by training speakers.
pub fn held_out_speakers(speakers: usize, held_out: usize) -> BTreeSet<u32> {
    (0..held_out)
        .map(|i| ((2 * i + 1) * speakers / (2 * held_out)) as u32)
        .collect()
}

/// Generates the corpus described by `cfg` and writes it under `cfg.out_dir`.
pub fn build_corpus(cfg: &CorpusConfig, force: bool) -> Result<Corpus> {
    cfg.validate()?;
    std::fs::create_dir_all(cfg.out_dir.join("audio")).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let manifest_path = cfg.out_dir.join(MANIFEST_FILE);
    if !force && manifest_path.exists() {
        return Err(Error::Exists(manifest_path));
    }

    let speakers: Vec<SpeakerSpec> = (0..cfg.speakers as u32)
        .map(|s| speaker_for(cfg, s))
        .collect();
    let held_out = held_out_speakers(cfg.speakers, cfg.held_out_speakers);
    let jobs: Vec<(usize, usize)> = (0..cfg.speakers)
        .flat_map(|s| (0..cfg.utterances_per_speaker).map(move |u| (s, u)))
        .collect();

    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(s, u)| -> Result<ManifestEntry> {
            let job = (s * cfg.utterances_per_speaker + u) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 << 32 | job);
            let content = content_for(cfg, &mut rng);
            let utt = generate_utterance(&speakers[s], &content, cfg.sample_rate, rng.random())?;
            let utt_id = format!("spk{s:03}_utt{u:03}");
            let relative_path = format!("audio/{utt_id}.clm");
            utt.waveform
                .save(&cfg.out_dir.join(&relative_path), force)?;
            Ok(ManifestEntry {
                utt_id,
                speaker_id: s as u32,
                split: if held_out.contains(&(s as u32)) {
                    Split::Eval
                } else {
                    Split::Train
                },
                relative_path,
                text: utt.text,
                alignment: utt.alignment,
            })
        })
        .collect::<Result<_>>()?;

    let corpus = Corpus {
        root: cfg.out_dir.clone(),
        entries,
        speakers,
    };
    write_file(&manifest_path, corpus.manifest_text().as_bytes(), force)?;
    write_file(
        &cfg.out_dir.join(SPEAKERS_FILE),
        corpus.speakers_text().as_bytes(),
        force,
    )?;
    write_file(
        &cfg.out_dir.join(ALIGNMENTS_FILE),
        corpus.alignments_text().as_bytes(),
        force,
    )?;
    log::info!(
        "wrote {} utterances ({} train speakers, {} held out) to {}",
        corpus.entries.len(),
        cfg.speakers - held_out.len(),
        held_out.len(),
        cfg.out_dir.display()
    );
    Ok(corpus)
}

impl Corpus {
    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                e.utt_id,
                e.speaker_id,
                e.split.as_str(),
                e.relative_path,
                e.text
            );
        }
        s
    }

    fn alignments_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let units: Vec<String> = e
                .alignment
                .iter()
                .map(|u| format!("{}:{}:{}", u.symbol_id, u.start, u.end))
                .collect();
            let _ = writeln!(s, "{}\t{}", e.utt_id, units.join(","));
        }
        s
    }

    fn speakers_text(&self) -> String {
        let mut s = String::new();
        for sp in &self.speakers {
            let amps: Vec<String> = sp.harmonic_amps.iter().map(|a| format!("{a:.17e}")).collect();
            let _ = writeln!(
                s,
                "{}\t{:.17e}\t{:.17e}\t{:.17e}\t{}",
                sp.speaker_id,
                sp.f0,
                sp.vibrato_rate,
                sp.vibrato_depth,
                amps.join(",")
            );
        }
        s
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let text = String::from_utf8(read_file(&manifest_path)?)
            .map_err(|_| Error::format(&manifest_path, "not UTF-8"))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |why: &str| Error::format(&manifest_path, format!("line {}: {why}", n + 1));
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            entries.push(ManifestEntry {
                utt_id: f[0].to_string(),
                speaker_id: f[1].parse().map_err(|_| bad("bad speaker_id"))?,
                split: Split::parse(f[2]).ok_or_else(|| bad("bad split"))?,
                relative_path: f[3].to_string(),
                text: f[4].to_string(),
                alignment: Vec::new(),
            });
        }
        let speakers_path = root.join(SPEAKERS_FILE);
        let text = String::from_utf8(read_file(&speakers_path)?)
            .map_err(|_| Error::format(&speakers_path, "not UTF-8"))?;
        let mut speakers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::format(&speakers_path, format!("line {}: {why}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            speakers.push(SpeakerSpec {
                speaker_id: f[0].parse().map_err(|_| bad("bad speaker_id"))?,
                f0: num(f[1])?,
                vibrato_rate: num(f[2])?,
                vibrato_depth: num(f[3])?,
                harmonic_amps: f[4].split(',').map(num).collect::<Result<_>>()?,
            });
        }
        let align_path = root.join(ALIGNMENTS_FILE);
        if align_path.exists() {
            let text = String::from_utf8(read_file(&align_path)?)
                .map_err(|_| Error::format(&align_path, "not UTF-8"))?;
            for (n, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let bad = |why: &str| Error::format(&align_path, format!("line {}: {why}", n + 1));
                let (id, units) = line.split_once('\t').ok_or_else(|| bad("expected 2 tab-separated fields"))?;
                let entry = entries
                    .iter_mut()
                    .find(|e| e.utt_id == id)
                    .ok_or_else(|| bad("unknown utt_id"))?;
                entry.alignment = units
                    .split(',')
                    .filter(|u| !u.is_empty())
                    .map(|u| {
                        let f: Vec<&str> = u.split(':').collect();
                        match f.as_slice() {
                            [a, b, c] => Ok(AlignedUnit {
                                symbol_id: a.parse().map_err(|_| bad("bad symbol id"))?,
                                start: b.parse().map_err(|_| bad("bad start"))?,
                                end: c.parse().map_err(|_| bad("bad end"))?,
                            }),
                            _ => Err(bad("expected symbol:start:end")),
                        }
                    })
                    .collect::<Result<_>>()?;
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            speakers,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn speaker_ids(&self, split: Split) -> BTreeSet<u32> {
        self.split(split).map(|e| e.speaker_id).collect()
    }

    pub fn speaker(&self, id: u32) -> Option<&SpeakerSpec> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn audio(&self, entry: &ManifestEntry) -> Result<Waveform> {
        Waveform::load(&self.root.join(&entry.relative_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{estimate_f0, PitchParams};

    fn one_harmonic(f0: f64) -> SpeakerSpec {
        SpeakerSpec {
            speaker_id: 0,
            f0,
            harmonic_amps: vec![1.0],
            vibrato_rate: 0.0,
            vibrato_depth: 0.0,
        }
    }

    fn unit(symbol_id: u16, duration: f64) -> ContentUnit {
        ContentUnit {
            symbol_id,
            duration,
            pitch_offset: 0.0,
        }
    }

    /// Magnitude-peak DFT bin, evaluated directly from the definition.
    fn dft_peak_bin(x: &[f32]) -> usize {
        let n = x.len();
        (1..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (i, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += v as f64 * a.cos();
                    im += v as f64 * a.sin();
                }
                (k, re * re + im * im)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn empty_content_is_rejected() {
        let err = generate_utterance(&one_harmonic(220.0), &ContentSeq::default(), 8000, 0)
            .unwrap_err();
        assert!(err.to_string().contains("content"));
    }

    #[test]
    fn invalid_fields_are_named() {
        let c = ContentSeq {
            units: vec![unit(3, 0.5)],
        };
        let mut s = one_harmonic(220.0);
        s.f0 = 0.0;
        assert!(generate_utterance(&s, &c, 8000, 0)
            .unwrap_err()
            .to_string()
            .contains("f0"));
        let mut s = one_harmonic(220.0);
        s.vibrato_depth = 0.3;
        assert!(generate_utterance(&s, &c, 8000, 0)
            .unwrap_err()
            .to_string()
            .contains("vibrato_depth"));
        let bad = ContentSeq {
            units: vec![unit(3, 0.0)],
        };
        assert!(generate_utterance(&one_harmonic(220.0), &bad, 8000, 0)
            .unwrap_err()
            .to_string()
            .contains("duration"));
        assert!(generate_utterance(&one_harmonic(220.0), &c, 4000, 0).is_err());
    }

    #[test]
    fn single_tone_spectrum_peaks_at_f0() {
        let c = ContentSeq {
            units: vec![unit(3, 0.5)],
        };
        let u = generate_utterance(&one_harmonic(220.0), &c, 8000, 1).unwrap();
        assert_eq!(u.waveform.len(), 4000);
        // bin spacing is 8000 / 4000 = 2 Hz
        let peak = dft_peak_bin(u.waveform.samples());
        let expected = 220.0 / 2.0;
        assert!((peak as f64 - expected).abs() <= 1.0, "peak bin {peak}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SpeakerSpec {
            speaker_id: 1,
            f0: 150.0,
            harmonic_amps: vec![1.0, 0.5, 0.25],
            vibrato_rate: 5.0,
            vibrato_depth: 0.01,
        };
        let c = ContentSeq {
            units: vec![unit(1, 0.2), unit(5, 0.13)],
        };
        let a = generate_utterance(&spec, &c, 8000, 9).unwrap();
        let b = generate_utterance(&spec, &c, 8000, 9).unwrap();
        assert_eq!(a.waveform.to_bytes(), b.waveform.to_bytes());
        assert_eq!(a.text, "ae");
        let frame = 8000.0 / 80.0;
        assert!((a.waveform.duration_secs() - 0.33).abs() <= 1.0 / frame);
    }

    #[test]
    fn autocorrelation_pitch_within_two_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f0 = rng.random_range(80.0..400.0);
            let spec = SpeakerSpec {
                speaker_id: 0,
                f0,
                harmonic_amps: (0..8).map(|h| 0.7f64.powi(h)).collect(),
                vibrato_rate: 5.0,
                vibrato_depth: 0.0,
            };
            let c = ContentSeq {
                units: vec![unit(rng.random_range(1..27), 0.3)],
            };
            let u = generate_utterance(&spec, &c, 8000, rng.random()).unwrap();
            let mid = &u.waveform.samples()[800..1600];
            let est = estimate_f0(mid, 8000, &PitchParams::default()).unwrap();
            assert!((est - f0).abs() / f0 < 0.02, "f0 {f0} estimated {est}");
        }
    }

    #[test]
    fn config_rejects_bad_splits() {
        let mut c = CorpusConfig::default();
        c.utterances_per_speaker = 0;
        assert!(c.validate().is_err());
        let mut c = CorpusConfig::default();
        c.speakers = 2;
        c.held_out_speakers = 3;
        assert!(c.validate().is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn peak_never_exceeds_one(
            f0 in 60.0f64..500.0,
            amps in proptest::collection::vec(0.0f64..3.0, 1..12),
            depth in 0.0f64..0.2,
            offset in -12.0f64..12.0,
            seed in 0u64..1000,
        ) {
            let mut amps = amps;
            amps[0] += 0.1;
            let spec = SpeakerSpec { speaker_id: 0, f0, harmonic_amps: amps, vibrato_rate: 5.0, vibrato_depth: depth };
            let c = ContentSeq { units: vec![ContentUnit { symbol_id: 4, duration: 0.1, pitch_offset: offset }] };
            let u = generate_utterance(&spec, &c, 8000, seed).unwrap();
            proptest::prop_assert!(u.waveform.peak() <= 1.0);
        }
    }
}
