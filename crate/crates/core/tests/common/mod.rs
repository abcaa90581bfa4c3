//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use codec_lm::ar::{ArModel, ArSequence};
use codec_lm::codec::{CodeMatrix, CodecConfig, CodebookSet, FrameEmbeddings};
use codec_lm::corpus::{build_corpus, Corpus, CorpusConfig};
use codec_lm::lm::transformer::NormIds;
use codec_lm::lm::{Mask, ModelConfig, NormKind, ParamStore, Transformer};
use codec_lm::lm::embed::tied_logits;
use codec_lm::nar::{NarInput, NarModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random books with the reserved zero row after stage 1.
pub fn random_books(cfg: &CodecConfig, rng: &mut ChaCha8Rng, scale: f32) -> Vec<Vec<f32>> {
    (0..cfg.quantizers)
        .map(|j| {
            let mut b: Vec<f32> = (0..cfg.codebook_size * cfg.dim)
                .map(|_| rng.random_range(-scale..scale) / (j + 1) as f32)
                .collect();
            if j > 0 {
                b[..cfg.dim].iter_mut().for_each(|v| *v = 0.0);
            }
            b
        })
        .collect()
}

pub fn random_codec(cfg: CodecConfig, seed: u64) -> CodebookSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let books = random_books(&cfg, &mut rng, 1.0);
    CodebookSet::with_books(cfg, books).unwrap()
}

/// Small corpus whose training utterances are all longer than `min` seconds.
pub fn small_corpus(dir: &Path, speakers: usize, per_speaker: usize, held_out: usize, min: f64, max: f64) -> Corpus {
    let cfg = CorpusConfig {
        out_dir: dir.join("corpus"),
        speakers,
        utterances_per_speaker: per_speaker,
        held_out_speakers: held_out,
        min_duration: min,
        max_duration: max,
        ..Default::default()
    };
    build_corpus(&cfg, false).unwrap()
}

/// Two layers, d = 32: the size used for gradient and property checks.
pub fn toy_model(codebook_size: usize, quantizers: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        embed_dim: 32,
        ffn_dim: 64,
        dropout: 0.0,
        codebook_size,
        quantizers,
        max_len: 256,
        ..Default::default()
    }
}

pub fn random_ids(rng: &mut ChaCha8Rng, n: usize, below: usize) -> Vec<u16> {
    (0..n).map(|_| rng.random_range(0..below) as u16).collect()
}

/// Per-stage argmin over every codeword, first index on ties.
pub fn brute_force(codec: &CodebookSet, frame: &[f32]) -> Vec<u16> {
    let c = codec.config();
    let mut r: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
    let mut out = Vec::new();
    for j in 0..c.quantizers {
        let dists: Vec<f64> = (0..c.codebook_size)
            .map(|k| {
                codec
                    .codeword(j, k)
                    .iter()
                    .zip(&r)
                    .map(|(&w, &x)| (x - w as f64).powi(2))
                    .sum()
            })
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let k = dists.iter().position(|&d| d == min).unwrap();
        out.push(k as u16);
        for (x, &w) in r.iter_mut().zip(codec.codeword(j, k)) {
            *x -= w as f64;
        }
    }
    out
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode that re-runs the full forward pass for every token.
pub fn uncached_greedy(ar: &ArModel, store: &ParamStore<f32>, phonemes: &[u16], prefix: &[u16], max_new: usize) -> Vec<u16> {
    let k = ar.config.codebook_size;
    let mut out = Vec::new();
    loop {
        let mut acoustic = prefix.to_vec();
        acoustic.extend(&out);
        let logits = ar.forward(store, &ArSequence::new(phonemes.to_vec(), acoustic)).unwrap();
        let tok = argmax(logits.row(logits.rows - 1));
        if tok == k {
            break;
        }
        out.push(tok as u16);
        if out.len() >= max_new {
            break;
        }
    }
    out
}

/// Copies every shared block into a plain-norm stack with identity gains.
pub fn plain_twin(nar: &NarModel, store: &ParamStore<f64>) -> (Transformer, ParamStore<f64>) {
    let mut plain_store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plain = Transformer::new(&mut plain_store, "nar", nar.config.stack_shape(), NormKind::Plain, &mut rng);
    let names: Vec<String> = plain_store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let id = plain_store.find(&name).unwrap();
        match store.find(&name) {
            Some(src) => plain_store.data_mut(id).copy_from_slice(store.data(src)),
            None => assert!(name.ends_with(".gain") || name.ends_with(".bias"), "{name}"),
        }
    }
    (plain, plain_store)
}

/// Scalar count of a pre-norm stack, computed from the shape alone.
pub fn stack_count(l: usize, d: usize, f: usize, norm_site: usize) -> usize {
    l * (4 * (d * d + d) + d * f + f + f * d + d + 2 * norm_site) + norm_site
}

/// Embedding-domain MSE after subtracting the first `stages` codewords in
/// the order the encoder does.
pub fn staged_mse(codec: &CodebookSet, fe: &FrameEmbeddings, cm: &CodeMatrix, stages: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..fe.num_frames {
        let mut r: Vec<f64> = fe.frame(t).iter().map(|&v| v as f64).collect();
        for j in 0..stages {
            for (x, &w) in r.iter_mut().zip(codec.codeword(j, cm.get(t, j) as usize)) {
                *x -= w as f64;
            }
        }
        total += r.iter().map(|v| v * v).sum::<f64>();
    }
    total / (fe.num_frames * fe.dim) as f64
}

/// Sets every AdaLN site to `a = 1, b = 0` whatever the stage embedding.
pub fn force_unit_modulation(nar: &NarModel, store: &mut ParamStore<f64>) {
    let sites: Vec<NormIds> = nar
        .stack
        .layers
        .iter()
        .flat_map(|l| [l.ln1, l.ln2])
        .chain([nar.stack.final_norm])
        .collect();
    for s in sites {
        let NormIds::Ada { scale_w, scale_b, shift_w, shift_b } = s else { panic!("plain norm in NAR") };
        store.data_mut(scale_w).fill(0.0);
        store.data_mut(shift_w).fill(0.0);
        store.data_mut(scale_b).fill(1.0);
        store.data_mut(shift_b).fill(0.0);
    }
}

/// Largest logit difference between the NAR and its plain-norm twin over
/// every stage, on random inputs.
pub fn adaln_plain_gap(nar: &NarModel, store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let (plain, plain_store) = plain_twin(nar, store);
    let (k, q) = (nar.config.codebook_size, nar.config.quantizers);
    let prompt = CodeMatrix::new(random_ids(rng, 5 * q, k), 5, q, k).unwrap();
    let mut worst = 0.0f64;
    for stage in 2..=q {
        let target = CodeMatrix::new(random_ids(rng, 7 * q, k), 7, q, k).unwrap();
        let inp = NarInput { phonemes: random_ids(rng, 4, 64), prompt: prompt.clone(), target, stage };
        let ada = nar.forward(store, &inp).unwrap();
        let (x, t0) = nar.input(store, &inp).unwrap();
        let n = x.rows;
        let y = plain.forward(&plain_store, x, &Mask::full(n), None).unwrap();
        let rows: Vec<usize> = (t0..n).collect();
        let reference = tied_logits(&y.gather_rows(&rows), store, nar.acoustic_emb[stage - 1]);
        for (a, b) in ada.data.iter().zip(&reference.data) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Perturbs acoustic tokens from a random cut onward; every logit row that
/// only sees earlier tokens must stay bitwise identical.
pub fn causality_trial(ar: &ArModel, store: &ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let k = ar.config.codebook_size;
    let np = rng.random_range(1..8);
    let ph = random_ids(rng, np, 64);
    let t = rng.random_range(2..30);
    let ac = random_ids(rng, t, k);
    let cut = rng.random_range(0..t);
    let mut perturbed = ac.clone();
    for c in perturbed[cut..].iter_mut() {
        *c = rng.random_range(0..k) as u16;
    }
    perturbed[cut] = ((ac[cut] as usize + 1) % k) as u16;
    let a = ar.forward(store, &ArSequence::new(ph.clone(), ac)).unwrap();
    let b = ar.forward(store, &ArSequence::new(ph, perturbed)).unwrap();
    // row r predicts c_{r+1} from c_1..c_r, so rows 0..=cut see no change
    for r in 0..=cut {
        if a.row(r).iter().zip(b.row(r)).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("row {r} changed after perturbing from {cut}"));
        }
    }
    if a.row(cut + 1) == b.row(cut + 1) {
        return Err(format!("perturbation at {cut} had no effect"));
    }
    Ok(())
}

/// AR scalar count with the output projection shared with the acoustic table.
pub fn tied_ar_count(cfg: &ModelConfig) -> usize {
    let (d, k, vp) = (cfg.embed_dim, cfg.codebook_size, cfg.phoneme_vocab);
    (vp + 1) * d + (k + 1) * d + stack_count(cfg.layers, d, cfg.ffn_dim, 2 * d)
}

/// NAR scalar count with every stage head shared with a stage table.
pub fn tied_nar_count(cfg: &ModelConfig) -> usize {
    let (d, k, q, vp) = (cfg.embed_dim, cfg.codebook_size, cfg.quantizers, cfg.phoneme_vocab);
    (vp + 1) * d + q * k * d + (q - 1) * d + stack_count(cfg.layers, d, cfg.ffn_dim, 2 * (d * d + d))
}
