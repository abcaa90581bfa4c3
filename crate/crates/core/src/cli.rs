//! Command-line front end: config files, flag parsing and the subcommands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::audio::Waveform;
use crate::binio::{file_magic, read_file, write_file};
use crate::codec::{train_codebooks, CodeMatrix, CodebookSet, CodecTrainConfig, CODES_MAGIC};
use crate::corpus::{build_corpus, Corpus, CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::lm::{Checkpoint, ModelConfig, SamplingSpec};
use crate::pipeline::{self, EvalConfig, PromptMode, PromptSpec, TrainConfig, TrainOutput};

/// Every configurable value, grouped by section.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub codec: CodecTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampling: SamplingSpec,
    pub eval: EvalConfig,
    /// `section.key` names set explicitly by a file or override.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            codec: CodecTrainConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingSpec::default(),
            eval: EvalConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

const SECTIONS: [&str; 6] = ["corpus", "codec", "model", "train", "sampling", "eval"];

fn put<T: FromStr>(slot: &mut T, name: &str, value: &str) -> std::result::Result<(), String> {
    *slot = value
        .parse()
        .map_err(|_| format!("{name}: cannot parse {value:?}"))?;
    Ok(())
}

impl RunConfig {
    /// Assigns one `section.key`; the error string names the key.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let name = format!("{section}.{key}");
        let n = name.as_str();
        let v = value;
        match (section, key) {
            ("corpus", "out_dir") => self.corpus.out_dir = PathBuf::from(v),
            ("corpus", "speakers") => put(&mut self.corpus.speakers, n, v)?,
            ("corpus", "utterances_per_speaker") => put(&mut self.corpus.utterances_per_speaker, n, v)?,
            ("corpus", "min_duration") => put(&mut self.corpus.min_duration, n, v)?,
            ("corpus", "max_duration") => put(&mut self.corpus.max_duration, n, v)?,
            ("corpus", "held_out_speakers") => put(&mut self.corpus.held_out_speakers, n, v)?,
            ("corpus", "sample_rate") => put(&mut self.corpus.sample_rate, n, v)?,
            ("corpus", "f0_min") => put(&mut self.corpus.f0_min, n, v)?,
            ("corpus", "f0_max") => put(&mut self.corpus.f0_max, n, v)?,
            ("corpus", "unit_min") => put(&mut self.corpus.unit_min, n, v)?,
            ("corpus", "unit_max") => put(&mut self.corpus.unit_max, n, v)?,
            ("corpus", "pitch_jitter") => put(&mut self.corpus.pitch_jitter, n, v)?,
            ("corpus", "harmonics") => put(&mut self.corpus.harmonics, n, v)?,
            ("corpus", "seed") => put(&mut self.corpus.seed, n, v)?,
            ("codec", "sample_rate") => put(&mut self.codec.codec.sample_rate, n, v)?,
            ("codec", "stride") => put(&mut self.codec.codec.stride, n, v)?,
            ("codec", "dim") => put(&mut self.codec.codec.dim, n, v)?,
            ("codec", "quantizers") => put(&mut self.codec.codec.quantizers, n, v)?,
            ("codec", "codebook_size") => put(&mut self.codec.codec.codebook_size, n, v)?,
            ("codec", "kmeans_iters") => put(&mut self.codec.kmeans_iters, n, v)?,
            ("codec", "seed") => put(&mut self.codec.seed, n, v)?,
            ("model", "layers") => put(&mut self.model.layers, n, v)?,
            ("model", "heads") => put(&mut self.model.heads, n, v)?,
            ("model", "embed_dim") => put(&mut self.model.embed_dim, n, v)?,
            ("model", "ffn_dim") => put(&mut self.model.ffn_dim, n, v)?,
            ("model", "dropout") => put(&mut self.model.dropout, n, v)?,
            ("model", "phoneme_vocab") => put(&mut self.model.phoneme_vocab, n, v)?,
            ("model", "codebook_size") => put(&mut self.model.codebook_size, n, v)?,
            ("model", "quantizers") => put(&mut self.model.quantizers, n, v)?,
            ("model", "max_len") => put(&mut self.model.max_len, n, v)?,
            ("train", "crop_min") => put(&mut self.train.crop_min, n, v)?,
            ("train", "crop_max") => put(&mut self.train.crop_max, n, v)?,
            ("train", "batch_tokens") => put(&mut self.train.batch_tokens, n, v)?,
            ("train", "steps") => put(&mut self.train.steps, n, v)?,
            ("train", "warmup") => put(&mut self.train.warmup, n, v)?,
            ("train", "peak_lr") => put(&mut self.train.peak_lr, n, v)?,
            ("train", "weight_decay") => put(&mut self.train.weight_decay, n, v)?,
            ("train", "grad_clip") => put(&mut self.train.grad_clip, n, v)?,
            ("train", "prompt_seconds") => put(&mut self.train.prompt_seconds, n, v)?,
            ("train", "seed") => put(&mut self.train.seed, n, v)?,
            ("train", "checkpoint_every") => put(&mut self.train.checkpoint_every, n, v)?,
            ("train", "log_every") => put(&mut self.train.log_every, n, v)?,
            ("sampling", "temperature") => put(&mut self.sampling.temperature, n, v)?,
            ("sampling", "top_p") => put(&mut self.sampling.top_p, n, v)?,
            ("sampling", "seed") => put(&mut self.sampling.seed, n, v)?,
            ("sampling", "max_new_tokens") => put(&mut self.sampling.max_new_tokens, n, v)?,
            ("eval", "seeds") => put(&mut self.eval.seeds, n, v)?,
            ("eval", "prompt_seconds") => put(&mut self.eval.prompt_seconds, n, v)?,
            ("eval", "f0_tolerance") => put(&mut self.eval.f0_tolerance, n, v)?,
            ("eval", "proxy_utterances") => put(&mut self.eval.proxy_utterances, n, v)?,
            _ if !SECTIONS.contains(&section) => return Err(format!("[{section}]: unknown section")),
            _ => return Err(format!("{name}: unknown key")),
        }
        self.explicit.insert(name);
        Ok(())
    }

    /// Applies `key = value` lines under `[section]` headers. Blank lines and
    /// `#` comments are ignored. Every bad line is reported.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut problems = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = s.trim().to_string();
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !section.is_empty() => {
                    if let Err(e) = self.set(&section, k.trim(), v.trim()) {
                        problems.push(format!("line {}: {e}", i + 1));
                    }
                }
                Some(_) => problems.push(format!("line {}: key outside a [section]", i + 1)),
                None => problems.push(format!("line {}: expected `key = value`", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut problems = Vec::new();
        for o in overrides {
            let parsed = o
                .split_once('=')
                .and_then(|(k, v)| k.split_once('.').map(|(s, k)| (s.trim(), k.trim(), v.trim())));
            match parsed {
                Some((s, k, v)) => {
                    if let Err(e) = self.set(s, k, v) {
                        problems.push(e);
                    }
                }
                None => problems.push(format!("--set {o:?}: expected section.key=value")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Sends one seed to every stochastic component.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.codec.seed = seed;
        self.train.seed = seed;
        self.sampling.seed = seed;
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.corpus.problems();
        p.extend(self.codec.codec.problems());
        if self.codec.kmeans_iters == 0 {
            p.push("codec.kmeans_iters must be >= 1".into());
        }
        p.extend(self.model.problems());
        p.extend(self.train.problems());
        p.extend(self.sampling.problems());
        if self.eval.seeds == 0 {
            p.push("eval.seeds must be >= 1".into());
        }
        if !(self.eval.f0_tolerance > 0.0) {
            p.push("eval.f0_tolerance must be > 0".into());
        }
        if !(self.eval.prompt_seconds > 0.0) {
            p.push("eval.prompt_seconds must be > 0".into());
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

    /// Model config with `K` and `Q` taken from the codec. An explicit,
    /// different value is a config error.
    pub fn model_for(&self, codec: &CodebookSet) -> Result<ModelConfig> {
        let c = codec.config();
        let mut m = self.model;
        let mut p = Vec::new();
        for (key, set, want) in [
            ("model.codebook_size", &mut m.codebook_size, c.codebook_size),
            ("model.quantizers", &mut m.quantizers, c.quantizers),
        ] {
            if self.explicit.contains(key) && *set != want {
                p.push(format!("{key} ({}) differs from the codec's {want}", *set));
            }
            *set = want;
        }
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Parser)]
#[command(name = "codec-lm", version, about = "Codec language model speech synthesis toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Config file of `[section]` / `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit codec codebooks on the training split.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoregressive model.
    TrainAr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the non-autoregressive model.
    TrainNar {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot synthesis from text and an enrolled recording.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ar: PathBuf,
        #[arg(long)]
        nar: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// `standard` or `continual`.
        #[arg(long, default_value = "standard")]
        mode: String,
        #[arg(long)]
        enrolled_audio: Option<PathBuf>,
        #[arg(long)]
        enrolled_text: Option<String>,
        #[arg(long)]
        text: String,
        /// Continual-mode prompt length in seconds.
        #[arg(long)]
        prompt_seconds: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on a corpus split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ar: PathBuf,
        #[arg(long)]
        nar: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe a CLM1, CBK1, CDM1 or CKP1 file.
    Inspect { path: PathBuf },
}

/// Loads the config file, applies overrides and `--seed`, then validates.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut problems = Vec::new();
    if let Some(path) = &common.config {
        let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
        if let Err(Error::Config(p)) = cfg.apply_text(&text) {
            problems.extend(p.into_iter().map(|e| format!("{}: {e}", path.display())));
        }
    }
    if let Err(Error::Config(p)) = cfg.apply_overrides(&common.overrides) {
        problems.extend(p);
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    problems.extend(cfg.problems());
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(problems))
    }
}

fn require_exists(path: &Path, flag: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{flag} {}: no such file", path.display())))
    }
}

fn not_clobbering(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        Err(Error::Exists(path.to_path_buf()))
    } else {
        Ok(())
    }
}

type TrainingInputs = (RunConfig, Corpus, CodebookSet, TrainOutput);

fn training_inputs(common: &Common, corpus: &Path, codec: &Path, out: PathBuf) -> Result<TrainingInputs> {
    let cfg = load_config(common)?;
    require_exists(corpus, "--corpus")?;
    require_exists(codec, "--codec")?;
    not_clobbering(&out, common.force)?;
    let corpus = Corpus::load(corpus)?;
    let codec = CodebookSet::load(codec)?;
    Ok((cfg, corpus, codec, TrainOutput { checkpoint: out, force: common.force }))
}

/// Human-readable summary of a binary artifact.
pub fn inspect(path: &Path) -> Result<String> {
    let magic = file_magic(path)?;
    let data = read_file(path)?;
    Ok(match &magic {
        b"CLM1" => {
            let w = Waveform::from_bytes(&data, path)?;
            format!(
                "CLM1 waveform sample_rate={} samples={} duration={:.3}s peak={:.4}",
                w.sample_rate(),
                w.len(),
                w.duration_secs(),
                w.peak()
            )
        }
        b"CBK1" => {
            let c = CodebookSet::from_bytes(&data, path)?;
            let cfg = c.config();
            format!(
                "CBK1 codebooks Q={} K={} D={} stride={} sample_rate={}",
                cfg.quantizers, cfg.codebook_size, cfg.dim, cfg.stride, cfg.sample_rate
            )
        }
        m if m == CODES_MAGIC => {
            let cm = CodeMatrix::from_bytes(&data, path)?;
            format!("CDM1 codes T={} Q={}", cm.num_frames(), cm.quantizers())
        }
        b"CKP1" => {
            let ck = Checkpoint::from_bytes(&data, path)?;
            let mut s = format!(
                "CKP1 checkpoint blocks={} parameters={}",
                ck.params.len(),
                ck.params.num_scalars()
            );
            for (k, v) in &ck.config {
                s.push_str(&format!("\n  {k}={v}"));
            }
            for (_, p) in ck.params.iter() {
                s.push_str(&format!("\n  {} {}x{}", p.name, p.rows, p.cols));
            }
            s
        }
        other => {
            return Err(Error::format(
                path,
                format!("unknown magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    })
}

/// Runs one parsed command. Anything meant for the user goes to the log
/// (stderr); `inspect` returns its dump for the caller to print.
pub fn run(cli: Cli) -> Result<Option<String>> {
    match cli.command {
        Command::GenCorpus { common, out } => {
            let mut cfg = load_config(&common)?;
            cfg.corpus.out_dir = out;
            let corpus = build_corpus(&cfg.corpus, common.force)?;
            log::info!("corpus: {} utterances", corpus.entries.len());
        }
        Command::TrainCodec { common, corpus, out } => {
            let cfg = load_config(&common)?;
            require_exists(&corpus, "--corpus")?;
            not_clobbering(&out, common.force)?;
            let corpus = Corpus::load(&corpus)?;
            let waves = corpus
                .split(Split::Train)
                .map(|e| corpus.audio(e))
                .collect::<Result<Vec<_>>>()?;
            let codec = train_codebooks(&waves, &cfg.codec)?;
            codec.save(&out, common.force)?;
            log::info!("wrote codebooks to {}", out.display());
        }
        Command::TrainAr { common, corpus, codec, out } => {
            let (cfg, corpus, codec, out) = training_inputs(&common, &corpus, &codec, out)?;
            let model = cfg.model_for(&codec)?;
            let (_, log) = pipeline::train_ar(&corpus, &codec, model, &cfg.train, Some(&out))?;
            log::info!("AR training done after {} steps", log.len());
        }
        Command::TrainNar { common, corpus, codec, out } => {
            let (cfg, corpus, codec, out) = training_inputs(&common, &corpus, &codec, out)?;
            let model = cfg.model_for(&codec)?;
            let (_, log, _) = pipeline::train_nar(&corpus, &codec, model, &cfg.train, Some(&out))?;
            log::info!("NAR training done after {} steps", log.len());
        }
        Command::Synthesize {
            common,
            ar,
            nar,
            codec,
            mode,
            enrolled_audio,
            enrolled_text,
            text,
            prompt_seconds,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mode = PromptMode::parse(&mode)
                .ok_or_else(|| Error::Usage(format!("--mode {mode:?}: expected standard or continual")))?;
            let enrolled_audio = enrolled_audio.ok_or_else(|| {
                Error::Usage(format!(
                    "--enrolled-audio is required in {} mode",
                    if mode == PromptMode::Continual { "continual" } else { "standard" }
                ))
            })?;
            if mode == PromptMode::Standard && enrolled_text.is_none() {
                return Err(Error::Usage("--enrolled-text is required in standard mode".into()));
            }
            for (p, flag) in [(&ar, "--ar"), (&nar, "--nar"), (&codec, "--codec"), (&enrolled_audio, "--enrolled-audio")] {
                require_exists(p, flag)?;
            }
            not_clobbering(&out, common.force)?;
            let codec = CodebookSet::load(&codec)?;
            let ar = pipeline::load_ar(&ar)?;
            let nar = pipeline::load_nar(&nar)?;
            let spec = PromptSpec {
                mode,
                enrolled: Waveform::load(&enrolled_audio)?,
                enrolled_text,
                target_text: text,
                prompt_seconds,
            };
            let s = pipeline::synthesize(&spec, &ar, &nar, &codec, &cfg.sampling)?;
            s.waveform.save(&out, common.force)?;
            log::info!(
                "wrote {} frames ({:.2} s) to {}",
                s.codes.num_frames(),
                s.waveform.duration_secs(),
                out.display()
            );
        }
        Command::Eval {
            common,
            corpus,
            ar,
            nar,
            codec,
            split,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.eval.sampling = cfg.sampling;
            let split = Split::parse(&split)
                .ok_or_else(|| Error::Usage(format!("--split {split:?}: expected train or eval")))?;
            for (p, flag) in [(&corpus, "--corpus"), (&ar, "--ar"), (&nar, "--nar"), (&codec, "--codec")] {
                require_exists(p, flag)?;
            }
            not_clobbering(&out, common.force)?;
            let corpus = Corpus::load(&corpus)?;
            let codec = CodebookSet::load(&codec)?;
            let ar = pipeline::load_ar(&ar)?;
            let nar = pipeline::load_nar(&nar)?;
            let report = pipeline::evaluate(&corpus, split, &ar, &nar, &codec, &cfg.eval)?;
            write_file(&out, report.to_text().as_bytes(), common.force)?;
            log::info!("wrote {} metrics to {}", report.records.len(), out.display());
        }
        Command::Inspect { path } => {
            require_exists(&path, "inspect")?;
            return inspect(&path).map(Some);
        }
    }
    Ok(None)
}
