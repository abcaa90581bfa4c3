//! Training loops, zero-shot synthesis and evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ar::{ArModel, ArSequence};
use crate::audio::{f0_track, PitchParams, Waveform};
use crate::binio::write_file;
use crate::codec::{CodeMatrix, CodebookSet};
use crate::corpus::{phonemes_in_span, AlignedUnit, Corpus, Split};
use crate::error::{Error, Result};
use crate::frontend::{self, text_to_phonemes};
use crate::lm::optim::clip_grad_norm;
use crate::lm::{AdamW, AdamWConfig, LrSchedule, ModelConfig, ParamStore, SamplingSpec};
use crate::nar::{self, NarInput, NarModel};

/// A model together with its parameters.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Crop duration range in seconds.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Acoustic tokens per batch (at least one sequence per step).
    pub batch_tokens: usize,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// NAR prompt duration in seconds.
    pub prompt_seconds: f64,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop_min: 1.0,
            crop_max: 3.0,
            batch_tokens: 512,
            steps: 2000,
            warmup: 200,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            prompt_seconds: nar::PROMPT_SECONDS,
            seed: 0,
            checkpoint_every: 500,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.crop_min > 0.0 && self.crop_min.is_finite()) {
            p.push(format!("train.crop_min ({}) must be > 0", self.crop_min));
        }
        if !(self.crop_max >= self.crop_min && self.crop_max.is_finite()) {
            p.push(format!(
                "train.crop_max ({}) must be >= train.crop_min ({})",
                self.crop_max, self.crop_min
            ));
        }
        if self.batch_tokens == 0 {
            p.push("train.batch_tokens must be > 0".into());
        }
        if self.steps == 0 {
            p.push("train.steps must be > 0".into());
        }
        if self.warmup >= self.steps {
            p.push(format!(
                "train.warmup ({}) must be < train.steps ({})",
                self.warmup, self.steps
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            p.push(format!("train.peak_lr ({}) must be > 0", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!("train.weight_decay ({}) must be >= 0", self.weight_decay));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            p.push(format!("train.grad_clip ({}) must be >= 0", self.grad_clip));
        }
        if !(self.prompt_seconds > 0.0 && self.prompt_seconds.is_finite()) {
            p.push(format!("train.prompt_seconds ({}) must be > 0", self.prompt_seconds));
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

/// An utterance encoded by the codec, with phonemes and unit timings.
#[derive(Debug, Clone)]
pub struct TokenizedUtterance {
    pub utt_id: String,
    pub speaker_id: u32,
    pub phonemes: Vec<u16>,
    pub codes: CodeMatrix,
    pub alignment: Vec<AlignedUnit>,
    pub stride: usize,
}

impl TokenizedUtterance {
    pub fn num_frames(&self) -> usize {
        self.codes.num_frames()
    }

    /// Phonemes spoken within frames `[start, end)`; the whole transcription
    /// when the corpus has no timings.
    pub fn phonemes_for_frames(&self, start: usize, end: usize) -> Vec<u16> {
        if self.alignment.is_empty() {
            return self.phonemes.clone();
        }
        let ids = phonemes_in_span(&self.alignment, start * self.stride, end * self.stride);
        if ids.is_empty() {
            self.phonemes.clone()
        } else {
            ids
        }
    }
}

/// Encodes every utterance of `split`.
pub fn tokenize_split(corpus: &Corpus, split: Split, codec: &CodebookSet) -> Result<Vec<TokenizedUtterance>> {
    let entries: Vec<_> = corpus.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let w = corpus.audio(e)?;
            Ok(TokenizedUtterance {
                utt_id: e.utt_id.clone(),
                speaker_id: e.speaker_id,
                phonemes: text_to_phonemes(&e.text)?.ids().to_vec(),
                codes: codec.encode(&w)?,
                alignment: e.alignment.clone(),
                stride: codec.config().stride,
            })
        })
        .collect()
}

fn check_compatible(model: &ModelConfig, codec: &CodebookSet) -> Result<()> {
    let c = codec.config();
    let mut p = Vec::new();
    if model.codebook_size != c.codebook_size {
        p.push(format!(
            "model.codebook_size ({}) differs from the codec's {}",
            model.codebook_size, c.codebook_size
        ));
    }
    if model.quantizers != c.quantizers {
        p.push(format!(
            "model.quantizers ({}) differs from the codec's {}",
            model.quantizers, c.quantizers
        ));
    }
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// `step \t loss \t lr` lines.
pub fn loss_log_text(records: &[LossRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{:?}\t{:?}", r.step, r.loss, r.lr);
    }
    s
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format("loss log", format!("bad line {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub force: bool,
}

impl TrainOutput {
    fn sibling(&self, suffix: &str) -> PathBuf {
        let mut s = self.checkpoint.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    }

    pub fn loss_log(&self) -> PathBuf {
        self.sibling(".loss.tsv")
    }

    pub fn stage_log(&self) -> PathBuf {
        self.sibling(".stages.tsv")
    }

    pub fn periodic(&self, step: u64) -> PathBuf {
        self.sibling(&format!(".step{step}"))
    }
}

/// Shared optimizer loop. `step_fn` fills `grads` for one step and returns
/// its loss; `save` writes a checkpoint.
fn optimize(
    params: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    label: &str,
    mut step_fn: impl FnMut(&ParamStore<f32>, &mut ParamStore<f32>, u64) -> Result<f64>,
    mut save: impl FnMut(&ParamStore<f32>, Option<u64>) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    let schedule = LrSchedule {
        peak: cfg.peak_lr,
        warmup: cfg.warmup,
        total: cfg.steps,
    };
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(params, adam, schedule);
    let mut grads = params.zeros_like();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        grads.fill_zero();
        let loss = step_fn(params, &mut grads, step)?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.grad_clip);
        }
        let lr = opt.step(params, &grads, step)?;
        log.push(LossRecord { step, loss, lr });
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            log::info!("{label} step {step}/{}: loss {loss:.4} lr {lr:.3e}", cfg.steps);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save(params, Some(step))?;
        }
    }
    save(params, None)?;
    Ok(log)
}

/// Draws a crop of `frames` frames: `(start, len)`.
fn draw_crop(frames: usize, frame_rate: f64, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> usize {
    let secs = if cfg.crop_max > cfg.crop_min {
        rng.random_range(cfg.crop_min..=cfg.crop_max)
    } else {
        cfg.crop_min
    };
    ((secs * frame_rate).round() as usize).clamp(1, frames.max(1))
}

/// One AR training example: a random crop with the phonemes it spans.
pub fn ar_example(
    utt: &TokenizedUtterance,
    frame_rate: f64,
    max_len: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> ArSequence {
    let t = utt.num_frames();
    let mut len = draw_crop(t, frame_rate, cfg, rng);
    let start = rng.random_range(0..=t - len);
    let mut phonemes = utt.phonemes_for_frames(start, start + len);
    while phonemes.len() + 1 + len > max_len && len > 1 {
        len = max_len.saturating_sub(phonemes.len() + 1).clamp(1, len - 1);
        phonemes = utt.phonemes_for_frames(start, start + len);
    }
    ArSequence::new(phonemes, utt.codes.column(0)[start..start + len].to_vec())
}

/// Trains the AR model on the training split.
pub fn train_ar(
    corpus: &Corpus,
    codec: &CodebookSet,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<(Trained<ArModel>, Vec<LossRecord>)> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_compatible(&model_cfg, codec)?;
    let data = tokenize_split(corpus, Split::Train, codec)?;
    if data.is_empty() {
        return Err(Error::invalid("corpus", "training split is empty"));
    }
    let frame_rate = codec.config().frame_rate();
    let (model, mut params) = ArModel::init(model_cfg, cfg.seed)?;
    log::info!(
        "AR: {} parameters, {} training utterances",
        params.num_scalars(),
        data.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let dropout = model_cfg.dropout > 0.0;
    let log = optimize(
        &mut params,
        cfg,
        "ar",
        |p, g, _| {
            let mut batch = Vec::new();
            let mut tokens = 0;
            while tokens < cfg.batch_tokens {
                let utt = &data[rng.random_range(0..data.len())];
                let ex = ar_example(utt, frame_rate, model_cfg.max_len, cfg, &mut rng);
                tokens += ex.acoustic.len() + 1;
                batch.push(ex);
            }
            let seed = rng.random::<u64>();
            model.loss(p, &batch, Some(g), dropout.then_some(seed))
        },
        |p, step| match out {
            Some(o) => {
                let path = step.map_or(o.checkpoint.clone(), |s| o.periodic(s));
                model.to_checkpoint(p).save(&path, o.force || step.is_some())
            }
            None => Ok(()),
        },
    )?;
    if let Some(o) = out {
        write_file(&o.loss_log(), loss_log_text(&log).as_bytes(), o.force)?;
    }
    Ok((Trained { model, params }, log))
}

/// One NAR training item at `stage`: a prompt segment and a disjoint target
/// crop of the same utterance. Phonemes cover the prompt span followed by
/// the target span, matching the inference-time layout.
pub fn nar_example(
    utt: &TokenizedUtterance,
    stage: usize,
    prompt_len: usize,
    frame_rate: f64,
    max_len: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NarInput> {
    let t = utt.num_frames();
    let want = draw_crop(t, frame_rate, cfg, rng);
    let w = nar::training_window(t, prompt_len, want, rng)?;
    let (ps, pe) = w.prompt;
    let (ts, mut te) = w.target;
    let phon = |te: usize| {
        let a = utt.phonemes_for_frames(ps, pe);
        let b = utt.phonemes_for_frames(ts, te);
        let mut ids = a;
        ids.extend(b);
        frontend::dedup_consecutive(&ids)
    };
    let mut phonemes = phon(te);
    while phonemes.len() + 1 + prompt_len + (te - ts) > max_len && te - ts > 1 {
        let room = max_len.saturating_sub(phonemes.len() + 1 + prompt_len);
        te = ts + room.clamp(1, te - ts - 1);
        phonemes = phon(te);
    }
    Ok(NarInput {
        phonemes,
        prompt: utt.codes.rows(ps, pe),
        target: utt.codes.rows(ts, te),
        stage,
    })
}

/// Trains the NAR model; one stage is drawn per step and shared by the
/// batch. Utterances too short for a prompt plus one frame are skipped.
pub fn train_nar(
    corpus: &Corpus,
    codec: &CodebookSet,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<(Trained<NarModel>, Vec<LossRecord>, Vec<usize>)> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_compatible(&model_cfg, codec)?;
    if model_cfg.quantizers < 2 {
        return Err(Error::Config(vec!["model.quantizers must be >= 2 for the NAR model".into()]));
    }
    let frame_rate = codec.config().frame_rate();
    let prompt_len = nar::prompt_frames(cfg.prompt_seconds, frame_rate);
    let mut data = tokenize_split(corpus, Split::Train, codec)?;
    data.retain(|u| {
        let ok = u.num_frames() > prompt_len;
        if !ok {
            log::warn!(
                "skipping {}: {} frames is shorter than prompt ({prompt_len}) + 1 frame",
                u.utt_id,
                u.num_frames()
            );
        }
        ok
    });
    if data.is_empty() {
        return Err(Error::invalid(
            "corpus",
            format!("no training utterance longer than {prompt_len} frames"),
        ));
    }
    let (model, mut params) = NarModel::init(model_cfg, cfg.seed)?;
    log::info!(
        "NAR: {} parameters, {} training utterances, prompt {prompt_len} frames",
        params.num_scalars(),
        data.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let dropout = model_cfg.dropout > 0.0;
    let mut stages = Vec::with_capacity(cfg.steps as usize);
    let log = optimize(
        &mut params,
        cfg,
        "nar",
        |p, g, _| {
            let stage = nar::draw_stage(model_cfg.quantizers, &mut rng);
            stages.push(stage);
            let mut batch = Vec::new();
            let mut tokens = 0;
            while tokens < cfg.batch_tokens {
                let utt = &data[rng.random_range(0..data.len())];
                let ex = nar_example(utt, stage, prompt_len, frame_rate, model_cfg.max_len, cfg, &mut rng)?;
                tokens += ex.target.num_frames();
                batch.push(ex);
            }
            let seed = rng.random::<u64>();
            model.loss(p, &batch, Some(g), dropout.then_some(seed))
        },
        |p, step| match out {
            Some(o) => {
                let path = step.map_or(o.checkpoint.clone(), |s| o.periodic(s));
                model.to_checkpoint(p).save(&path, o.force || step.is_some())
            }
            None => Ok(()),
        },
    )?;
    if let Some(o) = out {
        write_file(&o.loss_log(), loss_log_text(&log).as_bytes(), o.force)?;
        let mut s = String::new();
        for (i, st) in stages.iter().enumerate() {
            let _ = writeln!(s, "{}\t{st}", i + 1);
        }
        write_file(&o.stage_log(), s.as_bytes(), o.force)?;
    }
    Ok((Trained { model, params }, log, stages))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Enrolled transcription + target text as phonemes; enrolled stage-1
    /// codes as the acoustic prefix.
    Standard,
    /// Target text is the whole utterance; its first seconds are the prompt.
    Continual,
}

impl PromptMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(Self::Standard),
            "continual" => Some(Self::Continual),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub mode: PromptMode,
    /// Standard mode: the enrolled recording. Continual mode: the utterance
    /// (or a longer prefix of it) whose first `prompt_seconds` are kept.
    pub enrolled: Waveform,
    /// Required in standard mode.
    pub enrolled_text: Option<String>,
    pub target_text: String,
    /// Continual mode prompt length; `None` means 3 s.
    pub prompt_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub waveform: Waveform,
    /// Codes of the generated frames only.
    pub codes: CodeMatrix,
    pub phonemes: Vec<u16>,
    /// Codes of the acoustic prompt.
    pub prompt_codes: CodeMatrix,
}

/// Phoneme prompt and enrolled audio actually used by `p`.
pub fn prompt_inputs(p: &PromptSpec, stride: usize) -> Result<(Vec<u16>, Waveform)> {
    if p.target_text.trim().is_empty() {
        return Err(Error::invalid("target_text", "is empty"));
    }
    let target = text_to_phonemes(&p.target_text)?;
    if p.enrolled.len() < stride {
        return Err(Error::invalid(
            "enrolled audio",
            format!("{} samples is shorter than one frame ({stride})", p.enrolled.len()),
        ));
    }
    match p.mode {
        PromptMode::Standard => {
            let text = p
                .enrolled_text
                .as_deref()
                .ok_or_else(|| Error::invalid("enrolled_text", "required in standard mode"))?;
            let enrolled = text_to_phonemes(text)?;
            Ok((enrolled.concat(&target).ids().to_vec(), p.enrolled.clone()))
        }
        PromptMode::Continual => {
            let secs = p.prompt_seconds.unwrap_or(nar::PROMPT_SECONDS);
            let n = (secs * p.enrolled.sample_rate() as f64).round() as usize;
            let n = n - n % stride;
            if n == 0 {
                return Err(Error::invalid("prompt_seconds", "shorter than one frame"));
            }
            if n >= p.enrolled.len() {
                return Err(Error::invalid(
                    "enrolled audio",
                    format!(
                        "continual mode needs an utterance longer than the {secs} s prompt ({} samples <= {n})",
                        p.enrolled.len()
                    ),
                ));
            }
            Ok((target.ids().to_vec(), p.enrolled.slice(0, n)?))
        }
    }
}

/// Zero-shot synthesis. The result covers only newly generated frames.
pub fn synthesize(
    p: &PromptSpec,
    ar: &Trained<ArModel>,
    nar: &Trained<NarModel>,
    codec: &CodebookSet,
    sampling: &SamplingSpec,
) -> Result<Synthesis> {
    check_compatible(&ar.model.config, codec)?;
    check_compatible(&nar.model.config, codec)?;
    let (phonemes, enrolled) = prompt_inputs(p, codec.config().stride)?;
    let prompt_codes = codec.encode(&enrolled)?;
    let prefix = prompt_codes.column(0);
    let first = ar.model.generate(&ar.params, &phonemes, &prefix, sampling)?;
    if first.is_empty() {
        return Err(Error::invalid("synthesis", "the AR model emitted EOS before any frame"));
    }
    let codes = nar.model.generate_all(&nar.params, &phonemes, &prompt_codes, &first)?;
    let waveform = codec.decode(&codes, codec.config().quantizers)?;
    Ok(Synthesis {
        waveform,
        codes,
        phonemes,
        prompt_codes,
    })
}

/// Fraction of voiced frames of `w` whose f0 is within `tolerance`
/// (relative) of `reference`; `None` if no frame is voiced.
pub fn f0_match_fraction(w: &Waveform, reference: f64, tolerance: f64, params: &PitchParams) -> Option<f64> {
    let track: Vec<f64> = f0_track(w, params).into_iter().flatten().collect();
    if track.is_empty() {
        return None;
    }
    let hits = track
        .iter()
        .filter(|&&f| ((f - reference) / reference).abs() <= tolerance)
        .count();
    Some(hits as f64 / track.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Sampling seeds for the speaker proxy, `0..seeds`.
    pub seeds: u64,
    pub prompt_seconds: f64,
    pub f0_tolerance: f64,
    pub sampling: SamplingSpec,
    /// Utterances per speaker used for the speaker proxy.
    pub proxy_utterances: usize,
    pub pitch: PitchParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            prompt_seconds: nar::PROMPT_SECONDS,
            f0_tolerance: 0.05,
            sampling: SamplingSpec::default(),
            proxy_utterances: 1,
            pitch: PitchParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub metric: String,
    pub split: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn push(&mut self, metric: impl Into<String>, split: Split, value: f64) {
        self.records.push(EvalRecord {
            metric: metric.into(),
            split: split.as_str().to_string(),
            value,
        });
    }

    pub fn get(&self, metric: &str, split: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.metric == metric && r.split == split)
            .map(|r| r.value)
    }

    /// `metric \t split \t value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}\t{}\t{:?}", r.metric, r.split, r.value);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || Error::format("eval report", format!("bad line {l:?}"));
                if f.len() != 3 || f[0].is_empty() || f[1].is_empty() {
                    return Err(bad());
                }
                Ok(EvalRecord {
                    metric: f[0].to_string(),
                    split: f[1].to_string(),
                    value: f[2].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// Teacher-forced AR accuracy over whole utterances (truncated to the
/// model's maximum length).
pub fn ar_accuracy(ar: &Trained<ArModel>, data: &[TokenizedUtterance]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = data
        .par_iter()
        .map(|u| {
            let room = ar.model.config.max_len.saturating_sub(u.phonemes.len() + 1).max(1);
            let t = u.num_frames().min(room);
            let seq = ArSequence::new(u.phonemes_for_frames(0, t), u.codes.column(0)[..t].to_vec());
            ar.model.teacher_forced_hits(&ar.params, &seq)
        })
        .collect::<Result<_>>()?;
    let (h, n) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(h as f64 / n.max(1) as f64)
}

/// NAR accuracy at `stage` given ground-truth lower stages. The prompt is
/// the first `prompt_len` frames and the target is what follows; an
/// utterance too short for that is split in half.
pub fn nar_accuracy(nar: &Trained<NarModel>, data: &[TokenizedUtterance], stage: usize, prompt_len: usize) -> Result<f64> {
    let counts: Vec<(usize, usize)> = data
        .par_iter()
        .filter(|u| u.num_frames() >= 2)
        .map(|u| {
            let t = u.num_frames();
            let lp = if t > prompt_len { prompt_len } else { t / 2 };
            let q = nar.model.config.quantizers;
            let room = nar.model.config.max_len.saturating_sub(lp + 1 + u.phonemes.len()).max(1);
            let te = t.min(lp + room);
            let mut phonemes = u.phonemes_for_frames(0, lp.max(1));
            phonemes.extend(u.phonemes_for_frames(lp, te));
            let inp = NarInput {
                phonemes: frontend::dedup_consecutive(&phonemes),
                prompt: u.codes.rows(0, lp),
                target: u.codes.rows(lp, te),
                stage: stage.min(q),
            };
            nar.model.stage_hits(&nar.params, &inp)
        })
        .collect::<Result<_>>()?;
    let (h, n) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(h as f64 / n.max(1) as f64)
}

fn ids_to_text(ids: &[u16]) -> String {
    ids.iter()
        .filter_map(|&i| frontend::symbol(i))
        .map(|s| if s == "<sp>" { " ".to_string() } else { s })
        .collect()
}

/// Zero-shot speaker proxy over `split`: each utterance's first
/// `prompt_seconds` prompt a standard-mode synthesis of another utterance's
/// text by the same speaker; scores are f0 agreement with the speaker,
/// averaged over seeds and utterances.
pub fn speaker_proxy(
    corpus: &Corpus,
    split: Split,
    ar: &Trained<ArModel>,
    nar: &Trained<NarModel>,
    codec: &CodebookSet,
    cfg: &EvalConfig,
) -> Result<f64> {
    let entries: Vec<_> = corpus.split(split).collect();
    let speakers = corpus.speaker_ids(split);
    let mut jobs = Vec::new();
    for &spk in &speakers {
        let own: Vec<_> = entries.iter().filter(|e| e.speaker_id == spk).collect();
        for (i, e) in own.iter().enumerate().take(cfg.proxy_utterances) {
            let other = own[(i + 1) % own.len()];
            for seed in 0..cfg.seeds {
                jobs.push((*e, other, spk, seed));
            }
        }
    }
    let sr = codec.config().sample_rate as f64;
    let scores: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(e, other, spk, seed)| -> Result<Option<f64>> {
            let w = corpus.audio(e)?;
            let n = ((cfg.prompt_seconds * sr).round() as usize).min(w.len());
            let enrolled = w.slice(0, n)?;
            let enrolled_text = if e.alignment.is_empty() {
                e.text.clone()
            } else {
                ids_to_text(&phonemes_in_span(&e.alignment, 0, n))
            };
            let spec = PromptSpec {
                mode: PromptMode::Standard,
                enrolled,
                enrolled_text: Some(enrolled_text),
                target_text: other.text.clone(),
                prompt_seconds: None,
            };
            let sampling = SamplingSpec { seed, ..cfg.sampling };
            let out = match synthesize(&spec, ar, nar, codec, &sampling) {
                Ok(o) => o,
                Err(Error::Invalid { field, .. }) if field == "synthesis" => return Ok(Some(0.0)),
                Err(err) => return Err(err),
            };
            let f0 = corpus
                .speaker(spk)
                .map(|s| s.f0)
                .ok_or_else(|| Error::invalid("speaker", format!("{spk} missing from speaker table")))?;
            Ok(Some(f0_match_fraction(&out.waveform, f0, cfg.f0_tolerance, &cfg.pitch).unwrap_or(0.0)))
        })
        .collect::<Result<_>>()?;
    let vals: Vec<f64> = scores.into_iter().flatten().collect();
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Codec SNR (dB) of `split` for every stage count `1..=Q`.
pub fn codec_snr(corpus: &Corpus, split: Split, codec: &CodebookSet) -> Result<Vec<f64>> {
    let q = codec.config().quantizers;
    let stride = codec.config().stride;
    let mut sig = vec![0.0f64; q];
    let mut noise = vec![0.0f64; q];
    for e in corpus.split(split) {
        let w = corpus.audio(e)?;
        let cm = codec.encode(&w)?;
        let orig = w.slice(0, cm.num_frames() * stride)?;
        for j in 1..=q {
            let rec = codec.decode(&cm, j)?;
            for (&x, &y) in orig.samples().iter().zip(rec.samples()) {
                sig[j - 1] += (x as f64).powi(2);
                noise[j - 1] += (x as f64 - y as f64).powi(2);
            }
        }
    }
    Ok(sig
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| if n == 0.0 { f64::INFINITY } else { 10.0 * (s / n).log10() })
        .collect())
}

/// Full evaluation report for `split`.
pub fn evaluate(
    corpus: &Corpus,
    split: Split,
    ar: &Trained<ArModel>,
    nar: &Trained<NarModel>,
    codec: &CodebookSet,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    check_compatible(&ar.model.config, codec)?;
    check_compatible(&nar.model.config, codec)?;
    let data = tokenize_split(corpus, split, codec)?;
    if data.is_empty() {
        return Err(Error::invalid("split", format!("{} split is empty", split.as_str())));
    }
    let mut report = EvalReport::default();
    report.push("utterances", split, data.len() as f64);
    report.push("ar_teacher_forced_accuracy", split, ar_accuracy(ar, &data)?);
    let prompt_len = nar::prompt_frames(cfg.prompt_seconds, codec.config().frame_rate());
    for stage in 2..=nar.model.config.quantizers {
        report.push(
            format!("nar_stage{stage}_accuracy"),
            split,
            nar_accuracy(nar, &data, stage, prompt_len)?,
        );
    }
    for (j, snr) in codec_snr(corpus, split, codec)?.into_iter().enumerate() {
        report.push(format!("codec_snr_db_q{}", j + 1), split, snr);
    }
    report.push("speaker_f0_match", split, speaker_proxy(corpus, split, ar, nar, codec, cfg)?);
    Ok(report)
}

/// Loads a checkpoint of either kind from `path`.
pub fn load_ar(path: &Path) -> Result<Trained<ArModel>> {
    let (model, params) = ArModel::from_checkpoint(&crate::lm::Checkpoint::load(path)?)?;
    Ok(Trained { model, params })
}

pub fn load_nar(path: &Path) -> Result<Trained<NarModel>> {
    let (model, params) = NarModel::from_checkpoint(&crate::lm::Checkpoint::load(path)?)?;
    Ok(Trained { model, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trip() {
        let mut r = EvalReport::default();
        r.push("ar_teacher_forced_accuracy", Split::Eval, 0.125);
        r.push("codec_snr_db_q1", Split::Train, f64::INFINITY);
        r.push("x", Split::Train, 1.0 / 3.0);
        let back = EvalReport::parse(&r.to_text()).unwrap();
        assert_eq!(back, r);
        assert!(EvalReport::parse("a\tb\n").is_err());
    }

    #[test]
    fn loss_log_round_trip() {
        let recs = vec![
            LossRecord { step: 1, loss: 5.5, lr: 1e-5 },
            LossRecord { step: 2, loss: 0.1 + 0.2, lr: 2e-5 },
        ];
        assert_eq!(parse_loss_log(&loss_log_text(&recs)).unwrap(), recs);
    }

    #[test]
    fn paper_crop_range_is_a_valid_config() {
        let cfg = TrainConfig {
            crop_min: 10.0,
            crop_max: 20.0,
            batch_tokens: 6000,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        let bad = TrainConfig {
            crop_min: 3.0,
            crop_max: 1.0,
            warmup: 5000,
            steps: 100,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
