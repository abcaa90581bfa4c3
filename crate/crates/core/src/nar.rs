//! Non-autoregressive model for code stages `2..=Q`.
//!
//! Input layout: `[x_1 .. x_P, <eos_p>] [prompt rows] [target rows]`, with
//! positions restarting in each bracket and full self-attention. A prompt
//! row sums the embeddings of all `Q` stages of an enrolled frame; a target
//! row sums stages `1..i` (exclusive of `i`). Every normalization site is
//! AdaLN conditioned on `i`. The prediction head for stage `i` is the
//! stage-`i` embedding table, so heads add no parameters.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::CodeMatrix;
use crate::error::{Error, Result};
use crate::lm::embed::{
    add_embedding, add_positions, embedding_backward, input_scale, tied_logits, tied_logits_backward,
};
use crate::lm::ops::{argmax, cross_entropy_sum};
use crate::lm::params::Init;
use crate::lm::{vocab, Checkpoint, Mask, Mat, ModelConfig, NormKind, ParamId, ParamStore, Scalar, Transformer};

pub const CHECKPOINT_KIND: &str = "nar";

/// Default prompt duration in training, seconds.
pub const PROMPT_SECONDS: f64 = 3.0;

/// Frames in `seconds` of audio, rounded down.
pub fn prompt_frames(seconds: f64, frame_rate: f64) -> usize {
    (seconds * frame_rate + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NarInput {
    pub phonemes: Vec<u16>,
    /// All `Q` stages of the enrolled segment (may have zero frames).
    pub prompt: CodeMatrix,
    /// Target frames; only columns `1..stage` are read.
    pub target: CodeMatrix,
    pub stage: usize,
}

#[derive(Debug, Clone)]
pub struct NarModel {
    pub config: ModelConfig,
    /// `(V_p + 1) × d`; the last row is the phoneme EOS.
    pub phoneme_emb: ParamId,
    /// One `K × d` table per stage; table `i` doubles as the stage-`i` head.
    pub acoustic_emb: Vec<ParamId>,
    pub stack: Transformer,
    calls: Arc<AtomicUsize>,
}

impl NarModel {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let std = 1.0 / (d as f64).sqrt();
        let phoneme_emb = store.add("nar.phoneme_embedding", config.phoneme_vocab + 1, d, Init::Normal(std), false, rng);
        let acoustic_emb = (1..=config.quantizers)
            .map(|j| {
                store.add(
                    format!("nar.acoustic_embedding.{j}"),
                    config.codebook_size,
                    d,
                    Init::Normal(std),
                    false,
                    rng,
                )
            })
            .collect();
        let stack = Transformer::new(store, "nar", config.stack_shape(), NormKind::Ada, rng);
        Ok(Self {
            config,
            phoneme_emb,
            acoustic_emb,
            stack,
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((model, store))
    }

    pub fn to_checkpoint(&self, store: &ParamStore<f32>) -> Checkpoint {
        let mut config = vec![("kind".to_string(), CHECKPOINT_KIND.to_string())];
        config.extend(self.config.to_pairs());
        let heads: Vec<String> = (2..=self.config.quantizers)
            .map(|i| format!("{}<-head{}", store.get(self.acoustic_emb[i - 1]).name, i - 1))
            .collect();
        config.push(("tied_heads".to_string(), heads.join(",")));
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

    /// Number of [`NarModel::forward`] calls made through this model (and its
    /// clones).
    pub fn forward_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Parameter count if each of the `Q − 1` heads had its own `K × d`
    /// matrix.
    pub fn untied_param_count<F: Scalar>(&self, store: &ParamStore<F>) -> usize {
        let c = &self.config;
        store.num_scalars() + (c.quantizers - 1) * c.codebook_size * c.embed_dim
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if !(2..=self.config.quantizers).contains(&stage) {
            return Err(Error::out_of_range("stage", stage as i64, format!("[2, {}]", self.config.quantizers)));
        }
        Ok(())
    }

    fn check_codes(&self, what: &str, m: &CodeMatrix, columns: usize) -> Result<()> {
        if m.quantizers() < columns {
            return Err(Error::invalid(
                what,
                format!("has {} columns, needs {columns}", m.quantizers()),
            ));
        }
        if let Some(&c) = m.codes().iter().find(|&&c| c as usize >= self.config.codebook_size) {
            return Err(Error::out_of_range(
                format!("{what} code"),
                c as i64,
                format!("[0, {})", self.config.codebook_size),
            ));
        }
        Ok(())
    }

    /// Adds `scale · Σ_{j < stages} W_a^{j+1}[m[t][j]]` into rows `row0..`.
    fn add_stage_sum<F: Scalar>(
        &self,
        out: &mut Mat<F>,
        row0: usize,
        store: &ParamStore<F>,
        m: &CodeMatrix,
        stages: usize,
        scale: F,
    ) -> Result<()> {
        for j in 0..stages {
            let ids: Vec<usize> = (0..m.num_frames()).map(|t| m.get(t, j) as usize).collect();
            add_embedding(out, row0, store, self.acoustic_emb[j], &ids, scale)?;
        }
        Ok(())
    }

    /// `T × d` matrix whose row `t` is `Σ_{j=1}^{stage-1} W_a^j[c_{t,j}]`.
    pub fn embed_target<F: Scalar>(&self, store: &ParamStore<F>, target: &CodeMatrix, stage: usize) -> Result<Mat<F>> {
        if stage < 2 || stage > self.config.quantizers + 1 {
            return Err(Error::out_of_range("stage", stage as i64, format!("[2, {}]", self.config.quantizers)));
        }
        self.check_codes("partial target", target, stage - 1)?;
        let mut x = Mat::zeros(target.num_frames(), self.config.embed_dim);
        self.add_stage_sum(&mut x, 0, store, target, stage - 1, F::one())?;
        Ok(x)
    }

    /// `T' × d` matrix whose row `t` is `Σ_{j=1}^{Q} W_a^j[c̃_{t,j}]`.
    pub fn embed_prompt<F: Scalar>(&self, store: &ParamStore<F>, prompt: &CodeMatrix) -> Result<Mat<F>> {
        self.check_codes("acoustic prompt", prompt, self.config.quantizers)?;
        let mut x = Mat::zeros(prompt.num_frames(), self.config.embed_dim);
        self.add_stage_sum(&mut x, 0, store, prompt, self.config.quantizers, F::one())?;
        Ok(x)
    }

    fn phoneme_tokens(&self, phonemes: &[u16]) -> Result<Vec<usize>> {
        if let Some(&p) = phonemes.iter().find(|&&p| p as usize >= self.config.phoneme_vocab) {
            return Err(Error::out_of_range("phoneme id", p as i64, format!("[0, {})", self.config.phoneme_vocab)));
        }
        Ok(phonemes
            .iter()
            .map(|&p| p as usize)
            .chain(std::iter::once(vocab::phoneme_eos(self.config.phoneme_vocab)))
            .collect())
    }

    /// Transformer input and the row where the target segment starts.
    pub fn input<F: Scalar>(&self, store: &ParamStore<F>, inp: &NarInput) -> Result<(Mat<F>, usize)> {
        self.check_stage(inp.stage)?;
        self.check_codes("acoustic prompt", &inp.prompt, self.config.quantizers)?;
        self.check_codes("partial target", &inp.target, inp.stage - 1)?;
        if inp.target.num_frames() == 0 {
            return Err(Error::invalid("partial target", "has no frames"));
        }
        let ph = self.phoneme_tokens(&inp.phonemes)?;
        let (np, nc, nt) = (ph.len(), inp.prompt.num_frames(), inp.target.num_frames());
        let n = np + nc + nt;
        if n > self.config.max_len {
            return Err(Error::out_of_range("NAR sequence length", n as i64, format!("[1, {}]", self.config.max_len)));
        }
        let s = input_scale::<F>(self.config.embed_dim);
        let mut x = Mat::zeros(n, self.config.embed_dim);
        add_embedding(&mut x, 0, store, self.phoneme_emb, &ph, s)?;
        self.add_stage_sum(&mut x, np, store, &inp.prompt, self.config.quantizers, s)?;
        self.add_stage_sum(&mut x, np + nc, store, &inp.target, inp.stage - 1, s)?;
        let positions: Vec<usize> = (0..np).chain(0..nc).chain(0..nt).collect();
        add_positions(&mut x, &positions)?;
        Ok((x, np + nc))
    }

    /// `T × K` logits for stage `inp.stage` at the target rows.
    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, inp: &NarInput) -> Result<Mat<F>> {
        let (x, t0) = self.input(store, inp)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let n = x.rows;
        let y = self.stack.forward(store, x, &Mask::full(n), Some(inp.stage))?;
        let rows: Vec<usize> = (t0..n).collect();
        Ok(tied_logits(&y.gather_rows(&rows), store, self.acoustic_emb[inp.stage - 1]))
    }

    /// Token-averaged cross-entropy on target rows of the batch; accumulates
    /// gradients into `grads` when given.
    pub fn loss<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        batch: &[NarInput],
        grads: Option<&mut ParamStore<F>>,
        dropout_seed: Option<u64>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "must contain at least one item"));
        }
        let total: usize = batch.iter().map(|b| b.target.num_frames()).sum();
        let scale = grads.is_some().then(|| F::from_f64_lossy(1.0 / total.max(1) as f64));
        let parts: Vec<Result<(f64, Option<ParamStore<F>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, inp)| self.item_loss(store, inp, scale, dropout_seed, i as u64))
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

    fn item_loss<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        inp: &NarInput,
        grad_scale: Option<F>,
        dropout_seed: Option<u64>,
        stream: u64,
    ) -> Result<(f64, Option<ParamStore<F>>)> {
        let (x, t0) = self.input(store, inp)?;
        let n = x.rows;
        let mut rng = dropout_seed.map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            r.set_stream(stream);
            r
        });
        let (y, cache) = self.stack.forward_train(
            store,
            x,
            &Mask::full(n),
            Some(inp.stage),
            rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        )?;
        let head = self.acoustic_emb[inp.stage - 1];
        let rows: Vec<usize> = (t0..n).collect();
        let h = y.gather_rows(&rows);
        let logits = tied_logits(&h, store, head);
        if inp.target.quantizers() < inp.stage {
            return Err(Error::invalid("target", format!("stage {} column missing", inp.stage)));
        }
        let targets: Vec<usize> = inp.target.column(inp.stage - 1).iter().map(|&c| c as usize).collect();
        let all = vec![true; targets.len()];
        let (sum, _, dlogits) = cross_entropy_sum(&logits, &targets, &all, grad_scale)?;
        let Some(dlogits) = dlogits else {
            return Ok((sum, None));
        };
        let mut grads = store.zeros_like();
        let dh = tied_logits_backward(&h, &dlogits, store, &mut grads, head);
        let mut dy = Mat::zeros(n, self.config.embed_dim);
        for (r, &row) in rows.iter().enumerate() {
            dy.row_mut(row).copy_from_slice(dh.row(r));
        }
        let dx = self.stack.backward(store, &mut grads, &cache, &dy);
        let s = input_scale::<F>(self.config.embed_dim);
        let ph = self.phoneme_tokens(&inp.phonemes)?;
        embedding_backward(&mut grads, self.phoneme_emb, &ph, &dx, 0, s);
        let np = ph.len();
        for (m, row0, stages) in [
            (&inp.prompt, np, self.config.quantizers),
            (&inp.target, t0, inp.stage - 1),
        ] {
            for j in 0..stages {
                let ids: Vec<usize> = (0..m.num_frames()).map(|t| m.get(t, j) as usize).collect();
                embedding_backward(&mut grads, self.acoustic_emb[j], &ids, &dx, row0, s);
            }
        }
        Ok((sum, Some(grads)))
    }

    /// Greedy accuracy of stage `inp.stage` given ground-truth lower stages:
    /// `(correct, total)`.
    pub fn stage_hits<F: Scalar>(&self, store: &ParamStore<F>, inp: &NarInput) -> Result<(usize, usize)> {
        if inp.target.quantizers() < inp.stage {
            return Err(Error::invalid("target", format!("stage {} column missing", inp.stage)));
        }
        let logits = self.forward(store, inp)?;
        let truth = inp.target.column(inp.stage - 1);
        let hits = (0..logits.rows)
            .filter(|&r| argmax(logits.row(r)) == truth[r] as usize)
            .count();
        Ok((hits, truth.len()))
    }

    /// Fills stages `2..=Q` greedily, one forward pass per stage. Column 1
    /// of the result is `first_layer`.
    pub fn generate_all<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        phonemes: &[u16],
        prompt: &CodeMatrix,
        first_layer: &[u16],
    ) -> Result<CodeMatrix> {
        if first_layer.is_empty() {
            return Err(Error::invalid("first_layer", "is empty"));
        }
        let k = self.config.codebook_size;
        let mut columns = vec![first_layer.to_vec()];
        for stage in 2..=self.config.quantizers {
            let inp = NarInput {
                phonemes: phonemes.to_vec(),
                prompt: prompt.clone(),
                target: CodeMatrix::from_columns(&columns, k)?,
                stage,
            };
            let logits = self.forward(store, &inp)?;
            columns.push((0..logits.rows).map(|r| argmax(logits.row(r)) as u16).collect());
        }
        CodeMatrix::from_columns(&columns, k)
    }
}

/// Draws the training stage uniformly from `[2, quantizers]`.
pub fn draw_stage(quantizers: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(2..=quantizers)
}

/// Target and prompt frame ranges for one training item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingWindow {
    pub prompt: (usize, usize),
    pub target: (usize, usize),
}

/// Picks a prompt of `prompt_len` frames and a disjoint target of up to
/// `target_len` frames (at least one) inside an utterance of `frames`
/// frames. The two are adjacent, in random order, at a random offset.
pub fn training_window(frames: usize, prompt_len: usize, target_len: usize, rng: &mut impl Rng) -> Result<TrainingWindow> {
    if frames < prompt_len + 1 {
        return Err(Error::invalid(
            "utterance",
            format!("{frames} frames is shorter than prompt ({prompt_len}) + 1 frame"),
        ));
    }
    let lt = target_len.clamp(1, frames - prompt_len);
    let start = rng.random_range(0..=frames - prompt_len - lt);
    Ok(if rng.random_bool(0.5) {
        TrainingWindow {
            prompt: (start, start + prompt_len),
            target: (start + prompt_len, start + prompt_len + lt),
        }
    } else {
        TrainingWindow {
            target: (start, start + lt),
            prompt: (start + lt, start + lt + prompt_len),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_disjoint_and_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let frames = rng.random_range(11..80);
            let tl = rng.random_range(1..100);
            let w = training_window(frames, 10, tl, &mut rng).unwrap();
            assert_eq!(w.prompt.1 - w.prompt.0, 10);
            assert!(w.target.1 > w.target.0);
            assert!(w.prompt.1 <= frames && w.target.1 <= frames);
            assert!(w.prompt.1 <= w.target.0 || w.target.1 <= w.prompt.0);
        }
        assert!(training_window(10, 10, 5, &mut rng).is_err());
    }

    #[test]
    fn stage_draws_cover_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 9];
        for _ in 0..200 {
            seen[draw_stage(8, &mut rng)] = true;
        }
        assert_eq!(seen, [false, false, true, true, true, true, true, true, true]);
    }

    #[test]
    fn prompt_is_three_seconds() {
        assert_eq!(prompt_frames(PROMPT_SECONDS, 75.0), 225);
        assert_eq!(prompt_frames(PROMPT_SECONDS, 100.0), 300);
        assert_eq!(prompt_frames(PROMPT_SECONDS, 33.4), 100);
    }
}
