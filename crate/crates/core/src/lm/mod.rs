//! Machinery shared by the AR and NAR codec language models.

pub mod checkpoint;
pub mod embed;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod tensor;
pub mod transformer;

use crate::error::{Error, Result};
use crate::frontend::PHONEME_VOCAB;

pub use checkpoint::Checkpoint;
pub use ops::{ada_layer_norm, attention, cross_entropy, sinusoidal_positions, AdaLnParams, Mask};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use sampling::SamplingSpec;
pub use tensor::{Mat, Scalar};
pub use transformer::{NormKind, StackShape, Transformer};

/// Token id layout.
///
/// Acoustic ids are `0..K` with the acoustic EOS at `K`; phoneme ids are
/// `0..V_p` in a separate table with the phoneme EOS at `V_p`.
pub mod vocab {
    pub fn acoustic_eos(codebook_size: usize) -> usize {
        codebook_size
    }

    pub fn phoneme_eos(phoneme_vocab: usize) -> usize {
        phoneme_vocab
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub phoneme_vocab: usize,
    pub codebook_size: usize,
    pub quantizers: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 128,
            ffn_dim: 512,
            dropout: 0.1,
            phoneme_vocab: PHONEME_VOCAB,
            codebook_size: 256,
            quantizers: 8,
            max_len: 2048,
        }
    }
}

impl ModelConfig {
    /// The full-size configuration: 12 layers, 16 heads, width 1024, FFN
    /// 4096, 8 quantizers of 1024 codes.
    pub fn paper_scale() -> Self {
        Self {
            layers: 12,
            heads: 16,
            embed_dim: 1024,
            ffn_dim: 4096,
            dropout: 0.1,
            phoneme_vocab: PHONEME_VOCAB,
            codebook_size: 1024,
            quantizers: 8,
            max_len: 4096,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            p.push(format!(
                "model.embed_dim ({}) must be divisible by model.heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            p.push("model.embed_dim must be even and > 0".into());
        }
        if self.ffn_dim == 0 {
            p.push("model.ffn_dim must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("model.dropout ({}) must be in [0, 1)", self.dropout));
        }
        if self.phoneme_vocab == 0 {
            p.push("model.phoneme_vocab must be > 0".into());
        }
        if self.codebook_size == 0 {
            p.push("model.codebook_size must be > 0".into());
        }
        if self.quantizers == 0 {
            p.push("model.quantizers must be >= 1".into());
        }
        if self.max_len == 0 {
            p.push("model.max_len must be > 0".into());
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

    pub fn stack_shape(&self) -> StackShape {
        StackShape {
            layers: self.layers,
            heads: self.heads,
            dim: self.embed_dim,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            quantizers: self.quantizers,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("layers".into(), self.layers.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("ffn_dim".into(), self.ffn_dim.to_string()),
            ("dropout".into(), format!("{:?}", self.dropout)),
            ("phoneme_vocab".into(), self.phoneme_vocab.to_string()),
            ("codebook_size".into(), self.codebook_size.to_string()),
            ("quantizers".into(), self.quantizers.to_string()),
            ("max_len".into(), self.max_len.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::invalid("checkpoint config", format!("missing key {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid("checkpoint config", format!("bad value for {k}")))
        };
        let cfg = Self {
            layers: int("layers")?,
            heads: int("heads")?,
            embed_dim: int("embed_dim")?,
            ffn_dim: int("ffn_dim")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::invalid("checkpoint config", "bad value for dropout"))?,
            phoneme_vocab: int("phoneme_vocab")?,
            codebook_size: int("codebook_size")?,
            quantizers: int("quantizers")?,
            max_len: int("max_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Role of a contiguous run of tokens in a model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Phoneme,
    AcousticPrompt,
    AcousticTarget,
}

/// Token ids with per-segment labels and positions that restart at 0 at
/// the start of every segment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentedSequence {
    pub tokens: Vec<usize>,
    pub segments: Vec<SegmentKind>,
    pub positions: Vec<usize>,
}

impl SegmentedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_segment(&mut self, kind: SegmentKind, tokens: &[usize]) -> &mut Self {
        for (p, &t) in tokens.iter().enumerate() {
            self.tokens.push(t);
            self.segments.push(kind);
            self.positions.push(p);
        }
        self
    }

    /// Extends the last segment (a new segment if `kind` differs).
    pub fn extend_segment(&mut self, kind: SegmentKind, tokens: &[usize]) -> &mut Self {
        let start = if self.segments.last() == Some(&kind) {
            self.positions.last().map_or(0, |p| p + 1)
        } else {
            0
        };
        for (p, &t) in tokens.iter().enumerate() {
            self.tokens.push(t);
            self.segments.push(kind);
            self.positions.push(start + p);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segment_len(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|&&s| s == kind).count()
    }
}
