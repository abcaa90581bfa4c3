//! Autoregressive model over first-stage codes, conditioned on phonemes.
//!
//! Input layout: `[x_1 .. x_P, <eos_p>, c_1 .. c_T]`. Phoneme positions see
//! the whole phoneme part; acoustic positions are causal. Logit rows are
//! read at `<eos_p>` and every acoustic position, predicting
//! `c_1 .. c_T, <eos_a>`. The output projection is the acoustic embedding
//! table itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lm::embed::{
    add_embedding, add_positions, embedding_backward, input_scale, tied_logits, tied_logits_backward,
};
use crate::lm::ops::cross_entropy_sum;
use crate::lm::params::Init;
use crate::lm::sampling::sample;
use crate::lm::{vocab, Checkpoint, Mask, Mat, ModelConfig, NormKind, ParamId, ParamStore, SamplingSpec, Scalar, Transformer};

pub const CHECKPOINT_KIND: &str = "ar";

/// One training or scoring example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArSequence {
    pub phonemes: Vec<u16>,
    /// First-stage codes, without the terminating EOS.
    pub acoustic: Vec<u16>,
}

impl ArSequence {
    pub fn new(phonemes: Vec<u16>, acoustic: Vec<u16>) -> Self {
        Self { phonemes, acoustic }
    }

    /// Transformer input length (the acoustic EOS is a target only).
    pub fn input_len(&self) -> usize {
        self.phonemes.len() + 1 + self.acoustic.len()
    }

    /// Prediction targets: the acoustic codes followed by the acoustic EOS.
    pub fn targets(&self, codebook_size: usize) -> Vec<usize> {
        self.acoustic
            .iter()
            .map(|&c| c as usize)
            .chain(std::iter::once(vocab::acoustic_eos(codebook_size)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ArModel {
    pub config: ModelConfig,
    /// `(V_p + 1) × d`; the last row is the phoneme EOS.
    pub phoneme_emb: ParamId,
    /// `(K + 1) × d`; also the output projection.
    pub acoustic_emb: ParamId,
    pub stack: Transformer,
}

impl ArModel {
    /// Registers the model's blocks in `store`.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let std = 1.0 / (d as f64).sqrt();
        let phoneme_emb = store.add("ar.phoneme_embedding", config.phoneme_vocab + 1, d, Init::Normal(std), false, rng);
        let acoustic_emb = store.add("ar.acoustic_embedding", config.codebook_size + 1, d, Init::Normal(std), false, rng);
        let stack = Transformer::new(store, "ar", config.stack_shape(), NormKind::Plain, rng);
        Ok(Self {
            config,
            phoneme_emb,
            acoustic_emb,
            stack,
        })
    }

    /// Fresh model and parameters from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((model, store))
    }

    pub fn to_checkpoint(&self, store: &ParamStore<f32>) -> Checkpoint {
        let mut config = vec![("kind".to_string(), CHECKPOINT_KIND.to_string())];
        config.extend(self.config.to_pairs());
        Checkpoint {
            config,
            params: store.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamStore<f32>)> {
        if ck.get("kind") != Some(CHECKPOINT_KIND) {
            return Err(Error::invalid(
                "checkpoint",
                format!("expected kind={CHECKPOINT_KIND}, found {:?}", ck.get("kind")),
            ));
        }
        let (model, mut store) = Self::init(ModelConfig::from_pairs(&ck.config)?, 0)?;
        store.load_from(&ck.params)?;
        Ok((model, store))
    }

    fn check(&self, phonemes: &[u16], acoustic: &[u16], extra: usize) -> Result<()> {
        let n = phonemes.len() + 1 + acoustic.len() + extra;
        if n > self.config.max_len {
            return Err(Error::out_of_range(
                "AR sequence length",
                n as i64,
                format!("[1, {}]", self.config.max_len),
            ));
        }
        if let Some(&p) = phonemes.iter().find(|&&p| p as usize >= self.config.phoneme_vocab) {
            return Err(Error::out_of_range("phoneme id", p as i64, format!("[0, {})", self.config.phoneme_vocab)));
        }
        if let Some(&c) = acoustic.iter().find(|&&c| c as usize >= self.config.codebook_size) {
            return Err(Error::out_of_range("acoustic code", c as i64, format!("[0, {})", self.config.codebook_size)));
        }
        Ok(())
    }

    fn phoneme_tokens(&self, phonemes: &[u16]) -> Vec<usize> {
        phonemes
            .iter()
            .map(|&p| p as usize)
            .chain(std::iter::once(vocab::phoneme_eos(self.config.phoneme_vocab)))
            .collect()
    }

    /// Embedded input rows for acoustic tokens `acoustic` at positions
    /// starting from `acoustic_pos0`, optionally preceded by the phoneme part.
    fn embed<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        phonemes: Option<&[u16]>,
        acoustic: &[u16],
        acoustic_pos0: usize,
    ) -> Result<Mat<F>> {
        let ph = phonemes.map(|p| self.phoneme_tokens(p)).unwrap_or_default();
        let ac: Vec<usize> = acoustic.iter().map(|&c| c as usize).collect();
        let mut x = Mat::zeros(ph.len() + ac.len(), self.config.embed_dim);
        let s = input_scale::<F>(self.config.embed_dim);
        add_embedding(&mut x, 0, store, self.phoneme_emb, &ph, s)?;
        add_embedding(&mut x, ph.len(), store, self.acoustic_emb, &ac, s)?;
        let positions: Vec<usize> = (0..ph.len()).chain(acoustic_pos0..acoustic_pos0 + ac.len()).collect();
        add_positions(&mut x, &positions)?;
        Ok(x)
    }

    /// `(T + 1) × (K + 1)` logits predicting `c_1 .. c_T, <eos_a>`.
    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, seq: &ArSequence) -> Result<Mat<F>> {
        self.check(&seq.phonemes, &seq.acoustic, 0)?;
        let x = self.embed(store, Some(&seq.phonemes), &seq.acoustic, 0)?;
        let p = seq.phonemes.len();
        let mask = Mask::prefix_causal(x.rows, p + 1);
        let y = self.stack.forward(store, x, &mask, None)?;
        let rows: Vec<usize> = (p..y.rows).collect();
        Ok(tied_logits(&y.gather_rows(&rows), store, self.acoustic_emb))
    }

    /// Token-averaged next-token cross-entropy over the batch. When `grads`
    /// is given, accumulates `∂loss/∂θ` into it. `dropout_seed` enables
    /// dropout; sequence `i` then uses stream `i` of that seed.
    pub fn loss<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        batch: &[ArSequence],
        grads: Option<&mut ParamStore<F>>,
        dropout_seed: Option<u64>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "must contain at least one sequence"));
        }
        for (i, s) in batch.iter().enumerate() {
            if s.acoustic.is_empty() {
                return Err(Error::invalid(format!("batch[{i}].acoustic"), "acoustic part is empty"));
            }
            self.check(&s.phonemes, &s.acoustic, 0)?;
        }
        let total: usize = batch.iter().map(|s| s.acoustic.len() + 1).sum();
        let want_grad = grads.is_some();
        let scale = F::from_f64_lossy(1.0 / total as f64);
        let parts: Vec<Result<(f64, Option<ParamStore<F>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.sequence_loss(store, s, want_grad.then_some(scale), dropout_seed, i as u64))
            .collect();
        let mut sum = 0.0;
        let mut grads = grads;
        for part in parts {
            let (l, g) = part?;
            sum += l;
            if let (Some(acc), Some(g)) = (grads.as_deref_mut(), g) {
                acc.accumulate(&g);
            }
        }
        Ok(sum / total as f64)
    }

    fn sequence_loss<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        seq: &ArSequence,
        grad_scale: Option<F>,
        dropout_seed: Option<u64>,
        stream: u64,
    ) -> Result<(f64, Option<ParamStore<F>>)> {
        let p = seq.phonemes.len();
        let x = self.embed(store, Some(&seq.phonemes), &seq.acoustic, 0)?;
        let n = x.rows;
        let mask = Mask::prefix_causal(n, p + 1);
        let mut rng = dropout_seed.map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            r.set_stream(stream);
            r
        });
        let (y, cache) = self.stack.forward_train(
            store,
            x,
            &mask,
            None,
            rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        )?;
        let rows: Vec<usize> = (p..n).collect();
        let h = y.gather_rows(&rows);
        let logits = tied_logits(&h, store, self.acoustic_emb);
        let targets = seq.targets(self.config.codebook_size);
        let all = vec![true; targets.len()];
        let (sum, _, dlogits) = cross_entropy_sum(&logits, &targets, &all, grad_scale)?;
        let Some(dlogits) = dlogits else {
            return Ok((sum, None));
        };
        let mut grads = store.zeros_like();
        let dh = tied_logits_backward(&h, &dlogits, store, &mut grads, self.acoustic_emb);
        let mut dy = Mat::zeros(n, self.config.embed_dim);
        for (r, &row) in rows.iter().enumerate() {
            dy.row_mut(row).copy_from_slice(dh.row(r));
        }
        let dx = self.stack.backward(store, &mut grads, &cache, &dy);
        let s = input_scale::<F>(self.config.embed_dim);
        embedding_backward(&mut grads, self.phoneme_emb, &self.phoneme_tokens(&seq.phonemes), &dx, 0, s);
        let ac: Vec<usize> = seq.acoustic.iter().map(|&c| c as usize).collect();
        embedding_backward(&mut grads, self.acoustic_emb, &ac, &dx, p + 1, s);
        Ok((sum, Some(grads)))
    }

    /// Teacher-forced next-token accuracy (EOS target included): `(correct,
    /// total)`.
    pub fn teacher_forced_hits<F: Scalar>(&self, store: &ParamStore<F>, seq: &ArSequence) -> Result<(usize, usize)> {
        let logits = self.forward(store, seq)?;
        let targets = seq.targets(self.config.codebook_size);
        let hits = (0..logits.rows)
            .filter(|&r| crate::lm::ops::argmax(logits.row(r)) == targets[r])
            .count();
        Ok((hits, targets.len()))
    }

    /// Samples first-stage codes after `prefix` until the acoustic EOS or
    /// `max_new_tokens`. The result excludes the prefix and the EOS. Decoding
    /// also stops when the model's maximum length is reached.
    pub fn generate<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        phonemes: &[u16],
        prefix: &[u16],
        sampling: &SamplingSpec,
    ) -> Result<Vec<u16>> {
        sampling.validate()?;
        self.check(phonemes, prefix, 0)?;
        let k = self.config.codebook_size;
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut kv = self.stack.empty_cache::<F>();
        let x = self.embed(store, Some(phonemes), prefix, 0)?;
        let n0 = x.rows;
        let mask = Mask::prefix_causal(n0, phonemes.len() + 1);
        let y = self.stack.forward_cached(store, x, &mask, None, &mut kv)?;
        let mut last = y.gather_rows(&[n0 - 1]);
        let mut out = Vec::new();
        loop {
            let logits = tied_logits(&last, store, self.acoustic_emb);
            let tok = sample(logits.row(0), sampling.temperature, sampling.top_p, &mut rng);
            // The cache holds every position so far; a new token needs one more.
            if tok == vocab::acoustic_eos(k) || kv.len() >= self.config.max_len {
                break;
            }
            out.push(tok as u16);
            if out.len() >= sampling.max_new_tokens {
                break;
            }
            let x = self.embed(store, None, &[tok as u16], prefix.len() + out.len() - 1)?;
            let mask = Mask::from_fn(1, kv.len() + 1, |_, _| true);
            last = self.stack.forward_cached(store, x, &mask, None, &mut kv)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            embed_dim: 16,
            ffn_dim: 32,
            dropout: 0.0,
            phoneme_vocab: 8,
            codebook_size: 6,
            quantizers: 3,
            max_len: 64,
        }
    }

    #[test]
    fn logits_shape_and_length_limit() {
        let (m, p) = ArModel::init(tiny(), 1).unwrap();
        let seq = ArSequence::new(vec![1, 2, 3], vec![0, 5, 2, 2]);
        let l = m.forward(&p, &seq).unwrap();
        assert_eq!((l.rows, l.cols), (5, 7));
        let long = ArSequence::new(vec![1; 40], vec![0; 30]);
        assert!(matches!(m.forward(&p, &long), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn empty_acoustic_part_is_rejected() {
        let (m, p) = ArModel::init(tiny(), 1).unwrap();
        let seq = ArSequence::new(vec![1, 2], vec![]);
        assert!(m.loss(&p, &[seq], None, None).is_err());
        assert!(m.loss(&p, &[], None, None).is_err());
    }

    #[test]
    fn zero_max_tokens_is_an_error() {
        let (m, p) = ArModel::init(tiny(), 1).unwrap();
        let spec = SamplingSpec {
            max_new_tokens: 0,
            ..SamplingSpec::default()
        };
        assert!(m.generate(&p, &[1], &[], &spec).is_err());
    }

    #[test]
    fn generation_stops_at_the_context_limit() {
        let (m, p) = ArModel::init(tiny(), 5).unwrap();
        let spec = SamplingSpec { temperature: 0.0, max_new_tokens: 1000, ..SamplingSpec::default() };
        for prefix_len in [1, 40, 58, 59] {
            let prefix = vec![1u16; prefix_len];
            let out = m.generate(&p, &[1, 2, 3, 4], &prefix, &spec).unwrap();
            assert!(4 + 1 + prefix_len + out.len() <= 64, "{prefix_len} + {}", out.len());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, p) = ArModel::init(tiny(), 3).unwrap();
        let ck = m.to_checkpoint(&p);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let (m2, p2) = ArModel::from_checkpoint(&back).unwrap();
        assert_eq!(m2.config, m.config);
        assert_eq!(p2, p);
    }
}
