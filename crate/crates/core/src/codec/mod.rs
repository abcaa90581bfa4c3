//! Residual-vector-quantization speech codec.
//!
//! Waveforms are cut into non-overlapping frames of `stride` samples and
//! mapped to `D` coefficients by a fixed orthonormal DCT-II basis. Each frame
//! is then quantized by `Q` residual stages of `K` codewords. Decoding sums
//! the selected codewords and applies the transposed basis.
//!
//! Every stage after the first reserves codeword 0 as the zero vector, so
//! adding a stage can never increase the residual norm.

mod kmeans;

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;

use crate::audio::Waveform;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub use kmeans::{kmeans, KMeansResult};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"CBK1";
pub const CODES_MAGIC: &[u8; 4] = b"CDM1";

/// Codec geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub stride: usize,
    pub dim: usize,
    pub quantizers: usize,
    pub codebook_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            stride: 80,
            dim: 80,
            quantizers: 8,
            codebook_size: 256,
        }
    }
}

impl CodecConfig {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.stride as f64
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.sample_rate == 0 {
            p.push("codec.sample_rate must be > 0".into());
        }
        if self.stride == 0 {
            p.push("codec.stride must be > 0".into());
        }
        if self.dim == 0 || self.dim > self.stride {
            p.push(format!(
                "codec.dim must be in [1, stride = {}], got {}",
                self.stride, self.dim
            ));
        }
        if self.quantizers == 0 {
            p.push("codec.quantizers must be >= 1".into());
        }
        if self.codebook_size == 0 || self.codebook_size > u16::MAX as usize + 1 {
            p.push("codec.codebook_size must be in [1, 65536]".into());
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

/// Per-frame embeddings, `T × D` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub dim: usize,
    pub frame_rate: f64,
}

impl FrameEmbeddings {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }
}

/// `T × Q` matrix of quantizer indices; column `j` holds stage `j + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    codes: Vec<u16>,
    num_frames: usize,
    quantizers: usize,
    codebook_size: usize,
}

impl CodeMatrix {
    pub fn new(
        codes: Vec<u16>,
        num_frames: usize,
        quantizers: usize,
        codebook_size: usize,
    ) -> Result<Self> {
        if quantizers == 0 {
            return Err(Error::invalid("quantizers", "must be >= 1"));
        }
        if codes.len() != num_frames * quantizers {
            return Err(Error::shape(
                "CodeMatrix",
                format!("{num_frames}x{quantizers}"),
                format!("{} codes", codes.len()),
            ));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= codebook_size) {
            return Err(Error::out_of_range(
                "code",
                c as i64,
                format!("[0, {codebook_size})"),
            ));
        }
        Ok(Self {
            codes,
            num_frames,
            quantizers,
            codebook_size,
        })
    }

    /// Builds a matrix from column vectors (one per stage).
    pub fn from_columns(columns: &[Vec<u16>], codebook_size: usize) -> Result<Self> {
        let q = columns.len();
        let t = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != t) {
            return Err(Error::invalid("columns", "ragged column lengths"));
        }
        let mut codes = Vec::with_capacity(t * q);
        for row in 0..t {
            for col in columns {
                codes.push(col[row]);
            }
        }
        Self::new(codes, t, q, codebook_size)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn quantizers(&self) -> usize {
        self.quantizers
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn row(&self, t: usize) -> &[u16] {
        &self.codes[t * self.quantizers..(t + 1) * self.quantizers]
    }

    pub fn get(&self, t: usize, stage: usize) -> u16 {
        self.codes[t * self.quantizers + stage]
    }

    /// Codes of 0-based stage `stage` over all frames.
    pub fn column(&self, stage: usize) -> Vec<u16> {
        (0..self.num_frames).map(|t| self.get(t, stage)).collect()
    }

    /// Frames `[start, end)`.
    pub fn rows(&self, start: usize, end: usize) -> CodeMatrix {
        let end = end.min(self.num_frames);
        let start = start.min(end);
        CodeMatrix {
            codes: self.codes[start * self.quantizers..end * self.quantizers].to_vec(),
            num_frames: end - start,
            quantizers: self.quantizers,
            codebook_size: self.codebook_size,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CODES_MAGIC);
        w.u32(self.num_frames as u32);
        w.u32(self.quantizers as u32);
        for &c in &self.codes {
            w.u16(c);
        }
        w.into_inner()
    }

    /// Parses a `CDM1` file. The format does not record `K`, so the matrix
    /// is tagged with the full u16 range.
    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        r.magic(CODES_MAGIC)?;
        let t = r.u32()? as usize;
        let q = r.u32()? as usize;
        let mut codes = Vec::with_capacity(t * q);
        for _ in 0..t * q {
            codes.push(r.u16()?);
        }
        r.finish()?;
        Self::new(codes, t, q, u16::MAX as usize + 1).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        write_file(path, &self.to_bytes(), force)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Trained codec parameters: frame transform plus `Q` codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    config: CodecConfig,
    /// `D × stride`.
    analysis: Vec<f32>,
    /// `stride × D`.
    synthesis: Vec<f32>,
    /// `Q` books, each `K × D`.
    books: Vec<Vec<f32>>,
}

/// Orthonormal DCT-II rows `0..dim` over `n` samples, `dim × n` row-major.
pub fn dct_basis(dim: usize, n: usize) -> Vec<f32> {
    let mut m = Vec::with_capacity(dim * n);
    for d in 0..dim {
        let scale = if d == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m.push((scale * (PI * (i as f64 + 0.5) * d as f64 / n as f64).cos()) as f32);
        }
    }
    m
}

fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

impl CodebookSet {
    /// Assembles a codebook set, enforcing the reserved zero codeword at
    /// index 0 of every stage after the first.
    pub fn from_parts(
        config: CodecConfig,
        analysis: Vec<f32>,
        synthesis: Vec<f32>,
        books: Vec<Vec<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        let (d, s, k) = (config.dim, config.stride, config.codebook_size);
        if analysis.len() != d * s {
            return Err(Error::shape("analysis matrix", d * s, analysis.len()));
        }
        if synthesis.len() != d * s {
            return Err(Error::shape("synthesis matrix", d * s, synthesis.len()));
        }
        if books.len() != config.quantizers {
            return Err(Error::shape("codebooks", config.quantizers, books.len()));
        }
        for (j, b) in books.iter().enumerate() {
            if b.len() != k * d {
                return Err(Error::shape(format!("codebook {}", j + 1), k * d, b.len()));
            }
            if j >= 1 && b[..d].iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(
                    format!("codebook {}", j + 1),
                    "entry 0 must be the zero vector",
                ));
            }
        }
        Ok(Self {
            config,
            analysis,
            synthesis,
            books,
        })
    }

    /// DCT transform with the given books.
    pub fn with_books(config: CodecConfig, books: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let analysis = dct_basis(config.dim, config.stride);
        let synthesis = transpose(&analysis, config.dim, config.stride);
        Self::from_parts(config, analysis, synthesis, books)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn analysis(&self) -> &[f32] {
        &self.analysis
    }

    pub fn synthesis(&self) -> &[f32] {
        &self.synthesis
    }

    pub fn book(&self, stage: usize) -> &[f32] {
        &self.books[stage]
    }

    pub fn codeword(&self, stage: usize, k: usize) -> &[f32] {
        let d = self.config.dim;
        &self.books[stage][k * d..(k + 1) * d]
    }

    /// Applies the analysis matrix to each whole frame of `w`.
    pub fn frame_encode(&self, w: &Waveform) -> Result<FrameEmbeddings> {
        let cfg = &self.config;
        if w.sample_rate() != cfg.sample_rate {
            return Err(Error::invalid(
                "sample_rate",
                format!("waveform is {} Hz, codec expects {}", w.sample_rate(), cfg.sample_rate),
            ));
        }
        if w.len() < cfg.stride {
            return Err(Error::invalid(
                "waveform",
                format!("{} samples is shorter than one frame ({})", w.len(), cfg.stride),
            ));
        }
        let t = w.len() / cfg.stride;
        let (d, s) = (cfg.dim, cfg.stride);
        let x = w.samples();
        let mut frames = vec![0.0f32; t * d];
        frames
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(f, out)| {
                let seg = &x[f * s..(f + 1) * s];
                for (o, row) in out.iter_mut().zip(self.analysis.chunks_exact(s)) {
                    *o = row.iter().zip(seg).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
                }
            });
        Ok(FrameEmbeddings {
            frames,
            num_frames: t,
            dim: d,
            frame_rate: cfg.frame_rate(),
        })
    }

    /// Greedy residual quantization of every frame.
    pub fn rvq_encode(&self, fe: &FrameEmbeddings) -> Result<CodeMatrix> {
        let d = self.config.dim;
        if fe.dim != d {
            return Err(Error::shape("rvq_encode frame dim", d, fe.dim));
        }
        let q = self.config.quantizers;
        let mut codes = vec![0u16; fe.num_frames * q];
        codes
            .par_chunks_mut(q)
            .enumerate()
            .for_each(|(t, out)| {
                let mut residual: Vec<f64> = fe.frame(t).iter().map(|&v| v as f64).collect();
                for (j, code) in out.iter_mut().enumerate() {
                    let mut best = (0usize, f64::INFINITY);
                    for (k, c) in self.books[j].chunks_exact(d).enumerate() {
                        let dist: f64 = residual
                            .iter()
                            .zip(c)
                            .map(|(&r, &v)| {
                                let e = r - v as f64;
                                e * e
                            })
                            .sum();
                        if dist < best.1 {
                            best = (k, dist);
                        }
                    }
                    *code = best.0 as u16;
                    for (r, &v) in residual.iter_mut().zip(self.codeword(j, best.0)) {
                        *r -= v as f64;
                    }
                }
            });
        CodeMatrix::new(codes, fe.num_frames, q, self.config.codebook_size)
    }

    /// Sums the selected codewords of the first `stages` quantizers.
    pub fn rvq_decode(&self, cm: &CodeMatrix, stages: usize) -> Result<FrameEmbeddings> {
        let q = self.config.quantizers;
        if stages == 0 || stages > q || stages > cm.quantizers() {
            return Err(Error::out_of_range(
                "stages",
                stages as i64,
                format!("[1, {}]", q.min(cm.quantizers())),
            ));
        }
        let k = self.config.codebook_size;
        if let Some(&c) = cm.codes().iter().find(|&&c| c as usize >= k) {
            return Err(Error::out_of_range("code", c as i64, format!("[0, {k})")));
        }
        let d = self.config.dim;
        let mut frames = vec![0.0f32; cm.num_frames() * d];
        for (t, out) in frames.chunks_exact_mut(d).enumerate() {
            let row = cm.row(t);
            for (j, &code) in row.iter().take(stages).enumerate() {
                for (o, &v) in out.iter_mut().zip(self.codeword(j, code as usize)) {
                    *o += v;
                }
            }
        }
        Ok(FrameEmbeddings {
            frames,
            num_frames: cm.num_frames(),
            dim: d,
            frame_rate: self.config.frame_rate(),
        })
    }

    /// Applies the synthesis matrix per frame and concatenates; samples are
    /// clamped into [-1, 1].
    pub fn frame_decode(&self, fe: &FrameEmbeddings) -> Result<Waveform> {
        let (d, s) = (self.config.dim, self.config.stride);
        if fe.dim != d {
            return Err(Error::shape("frame_decode frame dim", d, fe.dim));
        }
        let mut out = vec![0.0f32; fe.num_frames * s];
        out.par_chunks_mut(s).enumerate().for_each(|(t, seg)| {
            let frame = fe.frame(t);
            for (o, row) in seg.iter_mut().zip(self.synthesis.chunks_exact(d)) {
                *o = row.iter().zip(frame).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
            }
        });
        Waveform::clamped(out, self.config.sample_rate)
    }

    /// Waveform to codes.
    pub fn encode(&self, w: &Waveform) -> Result<CodeMatrix> {
        self.rvq_encode(&self.frame_encode(w)?)
    }

    /// Codes to waveform using the first `stages` quantizers.
    pub fn decode(&self, cm: &CodeMatrix, stages: usize) -> Result<Waveform> {
        self.frame_decode(&self.rvq_decode(cm, stages)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(CODEBOOK_MAGIC);
        w.u32(c.quantizers as u32);
        w.u32(c.codebook_size as u32);
        w.u32(c.dim as u32);
        w.u32(c.stride as u32);
        w.u32(c.sample_rate);
        w.f32s(&self.analysis);
        w.f32s(&self.synthesis);
        for b in &self.books {
            w.f32s(b);
        }
        w.into_inner()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        r.magic(CODEBOOK_MAGIC)?;
        let quantizers = r.u32()? as usize;
        let codebook_size = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let sample_rate = r.u32()?;
        let config = CodecConfig {
            sample_rate,
            stride,
            dim,
            quantizers,
            codebook_size,
        };
        config
            .validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let analysis = r.f32s(dim * stride)?;
        let synthesis = r.f32s(dim * stride)?;
        let books = (0..quantizers)
            .map(|_| r.f32s(codebook_size * dim))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_parts(config, analysis, synthesis, books)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        write_file(path, &self.to_bytes(), force)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecTrainConfig {
    pub codec: CodecConfig,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            kmeans_iters: 20,
            seed: 0,
        }
    }
}

/// Stagewise residual k-means over the frames of `dataset`.
pub fn train_codebooks(dataset: &[Waveform], cfg: &CodecTrainConfig) -> Result<CodebookSet> {
    let c = cfg.codec;
    c.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "no waveforms"));
    }
    let probe = CodebookSet::with_books(c, vec![vec![0.0; c.codebook_size * c.dim]; c.quantizers])?;
    let mut residual = Vec::new();
    for w in dataset {
        residual.extend(probe.frame_encode(w)?.frames);
    }
    let n = residual.len() / c.dim;
    log::info!("fitting {} x {} codebooks on {n} frames", c.quantizers, c.codebook_size);

    let mut books = Vec::with_capacity(c.quantizers);
    for stage in 0..c.quantizers {
        let fit = kmeans(
            &residual,
            c.dim,
            c.codebook_size,
            cfg.kmeans_iters,
            cfg.seed.wrapping_add(stage as u64),
        );
        if fit.padded {
            log::warn!(
                "stage {}: fewer distinct residuals than {} codewords; padded with zero vectors",
                stage + 1,
                c.codebook_size
            );
        }
        let mut book = fit.centroids;
        if stage >= 1 {
            book[..c.dim].iter_mut().for_each(|v| *v = 0.0);
        }
        residual
            .par_chunks_mut(c.dim)
            .for_each(|r| {
                let (k, _) = kmeans::nearest(r, &book, c.dim);
                for (x, &v) in r.iter_mut().zip(&book[k * c.dim..(k + 1) * c.dim]) {
                    *x -= v;
                }
            });
        let mse = residual.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / residual.len() as f64;
        log::debug!("stage {} residual mse {mse:.3e}", stage + 1);
        books.push(book);
    }
    CodebookSet::with_books(c, books)
}

/// `10 log10(Σx² / Σ(x − x̂)²)` in dB; `+∞` for exact reconstruction.
pub fn reconstruction_snr(original: &Waveform, reconstructed: &Waveform) -> Result<f64> {
    if original.len() != reconstructed.len() {
        return Err(Error::shape("snr length", original.len(), reconstructed.len()));
    }
    if original.sample_rate() != reconstructed.sample_rate() {
        return Err(Error::invalid(
            "sample_rate",
            format!("{} vs {}", original.sample_rate(), reconstructed.sample_rate()),
        ));
    }
    let (mut sig, mut noise) = (0.0f64, 0.0f64);
    for (&x, &y) in original.samples().iter().zip(reconstructed.samples()) {
        sig += (x as f64).powi(2);
        noise += (x as f64 - y as f64).powi(2);
    }
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (sig / noise).log10())
}
