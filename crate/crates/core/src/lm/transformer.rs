//! Pre-norm transformer stack with hand-written backward pass.
//!
//! Normalization sites are either plain LayerNorm with learned gain/bias or
//! AdaLN, whose scale and shift are linear projections of a stage embedding.
//! Every normalization site in the stack (two per layer plus the final one)
//! uses the same kind.

use rand::Rng;

use super::ops::{gelu, gelu_grad, layer_norm_rows, layer_norm_rows_backward, masked_softmax_row, Mask};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::{gemm, matmul, matmul_acc, Mat, Scalar, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Plain,
    Ada,
}

#[derive(Debug, Clone, Copy)]
pub enum NormIds {
    Plain {
        gain: ParamId,
        bias: ParamId,
    },
    Ada {
        scale_w: ParamId,
        scale_b: ParamId,
        shift_w: ParamId,
        shift_b: ParamId,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub ln1: NormIds,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2: NormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub layers: Vec<LayerIds>,
    pub final_norm: NormIds,
    /// `(Q - 1) × d` stage embeddings; present for AdaLN stacks.
    pub stage_table: Option<ParamId>,
    pub quantizers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

/// Dimensions of a stack.
#[derive(Debug, Clone, Copy)]
pub struct StackShape {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub quantizers: usize,
}

fn add_norm<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    kind: NormKind,
    d: usize,
    rng: &mut impl Rng,
) -> NormIds {
    match kind {
        NormKind::Plain => NormIds::Plain {
            gain: store.add(format!("{name}.gain"), 1, d, Init::Ones, false, rng),
            bias: store.add(format!("{name}.bias"), 1, d, Init::Zeros, false, rng),
        },
        NormKind::Ada => NormIds::Ada {
            scale_w: store.add(format!("{name}.scale_w"), d, d, Init::Normal(0.02), true, rng),
            scale_b: store.add(format!("{name}.scale_b"), 1, d, Init::Ones, false, rng),
            shift_w: store.add(format!("{name}.shift_w"), d, d, Init::Normal(0.02), true, rng),
            shift_b: store.add(format!("{name}.shift_b"), 1, d, Init::Zeros, false, rng),
        },
    }
}

/// Activations of one normalization site kept for backward.
struct NormCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
    scale: Vec<F>,
}

struct LayerCache<F> {
    ln1: NormCache<F>,
    h1: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    /// Per head, `n × n` attention probabilities.
    probs: Vec<Mat<F>>,
    o: Mat<F>,
    attn_drop: Option<Vec<F>>,
    ln2: NormCache<F>,
    h2: Mat<F>,
    u: Mat<F>,
    f: Mat<F>,
    ffn_drop: Option<Vec<F>>,
}

/// Activations of a training forward pass.
pub struct Cache<F> {
    layers: Vec<LayerCache<F>>,
    final_norm: NormCache<F>,
    stage: Option<usize>,
}

/// Keys and values of already-processed positions, per layer.
#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Mat<F>>,
    values: Vec<Mat<F>>,
}

impl<F: Scalar> KvCache<F> {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn linear<F: Scalar>(x: &Mat<F>, store: &ParamStore<F>, w: ParamId, b: ParamId) -> Mat<F> {
    let mut y = matmul(x.view(), store.get(w).view());
    let bias = store.data(b);
    for r in 0..y.rows {
        y.row_mut(r).iter_mut().zip(bias).for_each(|(v, &c)| *v += c);
    }
    y
}

fn col_sums_into<F: Scalar>(m: &Mat<F>, out: &mut [F]) {
    for r in 0..m.rows {
        out.iter_mut().zip(m.row(r)).for_each(|(o, &v)| *o += v);
    }
}

/// Backward of `y = x W + b`: accumulates weight and bias grads, returns `dx`.
fn linear_backward<F: Scalar>(
    x: &Mat<F>,
    dy: &Mat<F>,
    store: &ParamStore<F>,
    grads: &mut ParamStore<F>,
    w: ParamId,
    b: ParamId,
) -> Mat<F> {
    matmul_acc(x.view().t(), dy.view(), grads.data_mut(w));
    col_sums_into(dy, grads.data_mut(b));
    matmul(dy.view(), store.get(w).view().t())
}

fn dropout_mask<F: Scalar>(n: usize, p: f64, rng: &mut dyn rand::RngCore) -> Vec<F> {
    let keep = F::from_f64_lossy(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect()
}

impl Transformer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        shape: StackShape,
        norm: NormKind,
        rng: &mut impl Rng,
    ) -> Self {
        let d = shape.dim;
        let stage_table = match norm {
            NormKind::Ada => Some(store.add(
                format!("{prefix}.stage_embedding"),
                shape.quantizers.saturating_sub(1).max(1),
                d,
                Init::Normal(1.0),
                false,
                rng,
            )),
            NormKind::Plain => None,
        };
        let resid_std = 0.02 / (2.0 * shape.layers.max(1) as f64).sqrt();
        let layers = (0..shape.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                LayerIds {
                    ln1: add_norm(store, &format!("{p}.ln1"), norm, d, rng),
                    wq: store.add(format!("{p}.attn.wq"), d, d, Init::Normal(0.02), true, rng),
                    bq: store.add(format!("{p}.attn.bq"), 1, d, Init::Zeros, false, rng),
                    wk: store.add(format!("{p}.attn.wk"), d, d, Init::Normal(0.02), true, rng),
                    bk: store.add(format!("{p}.attn.bk"), 1, d, Init::Zeros, false, rng),
                    wv: store.add(format!("{p}.attn.wv"), d, d, Init::Normal(0.02), true, rng),
                    bv: store.add(format!("{p}.attn.bv"), 1, d, Init::Zeros, false, rng),
                    wo: store.add(format!("{p}.attn.wo"), d, d, Init::Normal(resid_std), true, rng),
                    bo: store.add(format!("{p}.attn.bo"), 1, d, Init::Zeros, false, rng),
                    ln2: add_norm(store, &format!("{p}.ln2"), norm, d, rng),
                    w1: store.add(format!("{p}.ffn.w1"), d, shape.ffn_dim, Init::Normal(0.02), true, rng),
                    b1: store.add(format!("{p}.ffn.b1"), 1, shape.ffn_dim, Init::Zeros, false, rng),
                    w2: store.add(format!("{p}.ffn.w2"), shape.ffn_dim, d, Init::Normal(resid_std), true, rng),
                    b2: store.add(format!("{p}.ffn.b2"), 1, d, Init::Zeros, false, rng),
                }
            })
            .collect();
        let final_norm = add_norm(store, &format!("{prefix}.final_norm"), norm, d, rng);
        Self {
            layers,
            final_norm,
            stage_table,
            quantizers: shape.quantizers,
            heads: shape.heads,
            dim: d,
            ffn_dim: shape.ffn_dim,
            dropout: shape.dropout,
        }
    }

    pub fn norm_kind(&self) -> NormKind {
        match self.final_norm {
            NormIds::Plain { .. } => NormKind::Plain,
            NormIds::Ada { .. } => NormKind::Ada,
        }
    }

    fn check_stage(&self, stage: Option<usize>) -> Result<()> {
        match (self.norm_kind(), stage) {
            (NormKind::Ada, Some(s)) if (2..=self.quantizers).contains(&s) => Ok(()),
            (NormKind::Ada, s) => Err(Error::out_of_range(
                "stage",
                s.map_or(-1, |s| s as i64),
                format!("[2, {}]", self.quantizers),
            )),
            (NormKind::Plain, _) => Ok(()),
        }
    }

    /// `(scale, shift)` vectors of one normalization site.
    fn modulation<F: Scalar>(&self, store: &ParamStore<F>, ids: NormIds, stage: Option<usize>) -> (Vec<F>, Vec<F>) {
        match ids {
            NormIds::Plain { gain, bias } => (store.data(gain).to_vec(), store.data(bias).to_vec()),
            NormIds::Ada {
                scale_w,
                scale_b,
                shift_w,
                shift_b,
            } => {
                let table = self.stage_table.expect("AdaLN stack has a stage table");
                let e = store.get(table).row(stage.expect("stage checked") - 2);
                let e = View::new(e, 1, self.dim);
                let mut a = matmul(e, store.get(scale_w).view()).data;
                let mut b = matmul(e, store.get(shift_w).view()).data;
                a.iter_mut().zip(store.data(scale_b)).for_each(|(x, &c)| *x += c);
                b.iter_mut().zip(store.data(shift_b)).for_each(|(x, &c)| *x += c);
                (a, b)
            }
        }
    }

    fn norm_forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        ids: NormIds,
        stage: Option<usize>,
        x: &Mat<F>,
    ) -> (Mat<F>, NormCache<F>) {
        let (scale, shift) = self.modulation(store, ids, stage);
        let (xhat, rstd) = layer_norm_rows(x);
        let mut y = xhat.clone();
        for r in 0..y.rows {
            for ((o, &a), &b) in y.row_mut(r).iter_mut().zip(&scale).zip(&shift) {
                *o = a * *o + b;
            }
        }
        (y, NormCache { xhat, rstd, scale })
    }

    fn norm_backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut ParamStore<F>,
        ids: NormIds,
        stage: Option<usize>,
        cache: &NormCache<F>,
        dy: &Mat<F>,
    ) -> Mat<F> {
        let d = dy.cols;
        let mut d_scale = vec![F::zero(); d];
        let mut d_shift = vec![F::zero(); d];
        let mut dxhat = Mat::zeros(dy.rows, d);
        for r in 0..dy.rows {
            let g = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                d_scale[c] += g[c] * xh[c];
                d_shift[c] += g[c];
            }
            for ((o, &gv), &s) in dxhat.row_mut(r).iter_mut().zip(g).zip(&cache.scale) {
                *o = gv * s;
            }
        }
        match ids {
            NormIds::Plain { gain, bias } => {
                grads.data_mut(gain).iter_mut().zip(&d_scale).for_each(|(a, &b)| *a += b);
                grads.data_mut(bias).iter_mut().zip(&d_shift).for_each(|(a, &b)| *a += b);
            }
            NormIds::Ada {
                scale_w,
                scale_b,
                shift_w,
                shift_b,
            } => {
                let table = self.stage_table.expect("AdaLN stack has a stage table");
                let row = stage.expect("stage checked") - 2;
                let e = store.get(table).row(row).to_vec();
                let ev = View::new(&e, d, 1);
                matmul_acc(ev, View::new(&d_scale, 1, d), grads.data_mut(scale_w));
                matmul_acc(ev, View::new(&d_shift, 1, d), grads.data_mut(shift_w));
                grads.data_mut(scale_b).iter_mut().zip(&d_scale).for_each(|(a, &b)| *a += b);
                grads.data_mut(shift_b).iter_mut().zip(&d_shift).for_each(|(a, &b)| *a += b);
                let mut de = matmul(store.get(scale_w).view(), View::new(&d_scale, d, 1));
                let de2 = matmul(store.get(shift_w).view(), View::new(&d_shift, d, 1));
                de.add_assign(&de2);
                let tg = &mut grads.data_mut(table)[row * d..(row + 1) * d];
                tg.iter_mut().zip(&de.data).for_each(|(a, &b)| *a += b);
            }
        }
        layer_norm_rows_backward(&cache.xhat, &cache.rstd, &dxhat)
    }

    /// Runs the stack over `x` (`n × d`).
    ///
    /// `mask` is `n × (past + n)` where `past` is the number of positions
    /// already in `kv` (0 without a cache). With `keep` set, activations for
    /// [`Transformer::backward`] are returned. `dropout_rng` enables dropout.
    #[allow(clippy::too_many_arguments)]
    fn run<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: Mat<F>,
        mask: &Mask,
        stage: Option<usize>,
        mut dropout_rng: Option<&mut dyn rand::RngCore>,
        mut kv: Option<&mut KvCache<F>>,
        keep: bool,
    ) -> Result<(Mat<F>, Option<Cache<F>>)> {
        self.check_stage(stage)?;
        let n = x.rows;
        let past = kv.as_ref().map_or(0, |c| c.len());
        if x.cols != self.dim {
            return Err(Error::shape("transformer input width", self.dim, x.cols));
        }
        if mask.rows != n || mask.cols != past + n {
            return Err(Error::shape(
                "attention mask",
                format!("{n}x{}", past + n),
                format!("{}x{}", mask.rows, mask.cols),
            ));
        }
        mask.check()?;
        if let Some(c) = kv.as_mut() {
            if c.keys.is_empty() {
                c.keys = vec![Mat::zeros(0, self.dim); self.layers.len()];
                c.values = vec![Mat::zeros(0, self.dim); self.layers.len()];
            }
        }
        let d = self.dim;
        let h = self.heads;
        let dh = d / h;
        let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let p_drop = if dropout_rng.is_some() { self.dropout } else { 0.0 };

        let mut x = x;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (li, l) in self.layers.iter().enumerate() {
            let (h1, ln1) = self.norm_forward(store, l.ln1, stage, &x);
            let q = linear(&h1, store, l.wq, l.bq);
            let k_new = linear(&h1, store, l.wk, l.bk);
            let v_new = linear(&h1, store, l.wv, l.bv);
            let (k, v) = match kv.as_mut() {
                Some(c) => {
                    c.keys[li].push_rows(&k_new);
                    c.values[li].push_rows(&v_new);
                    (c.keys[li].clone(), c.values[li].clone())
                }
                None => (k_new, v_new),
            };
            let total = k.rows;
            let mut o = Mat::zeros(n, d);
            let mut probs = Vec::with_capacity(if keep { h } else { 0 });
            for head in 0..h {
                let mut s = Mat::zeros(n, total);
                gemm(
                    scale,
                    q.view().cols(head * dh, dh),
                    k.view().cols(head * dh, dh).t(),
                    F::zero(),
                    s.view_mut(),
                );
                for i in 0..n {
                    masked_softmax_row(s.row_mut(i), mask.row(i));
                }
                gemm(
                    F::one(),
                    s.view(),
                    v.view().cols(head * dh, dh),
                    F::zero(),
                    o.view_mut().cols(head * dh, dh),
                );
                if keep {
                    probs.push(s);
                }
            }
            let mut a = linear(&o, store, l.wo, l.bo);
            let attn_drop = match (p_drop > 0.0, dropout_rng.as_mut()) {
                (true, Some(r)) => {
                    let m = dropout_mask::<F>(a.data.len(), p_drop, &mut **r);
                    a.data.iter_mut().zip(&m).for_each(|(v, &s)| *v *= s);
                    Some(m)
                }
                _ => None,
            };
            x.add_assign(&a);

            let (h2, ln2) = self.norm_forward(store, l.ln2, stage, &x);
            let u = linear(&h2, store, l.w1, l.b1);
            let mut f = u.clone();
            f.data.iter_mut().for_each(|v| *v = gelu(*v));
            let mut g = linear(&f, store, l.w2, l.b2);
            let ffn_drop = match (p_drop > 0.0, dropout_rng.as_mut()) {
                (true, Some(r)) => {
                    let m = dropout_mask::<F>(g.data.len(), p_drop, &mut **r);
                    g.data.iter_mut().zip(&m).for_each(|(v, &s)| *v *= s);
                    Some(m)
                }
                _ => None,
            };
            x.add_assign(&g);

            if keep {
                caches.push(LayerCache {
                    ln1,
                    h1,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    attn_drop,
                    ln2,
                    h2,
                    u,
                    f,
                    ffn_drop,
                });
            }
        }
        let (y, final_norm) = self.norm_forward(store, self.final_norm, stage, &x);
        let cache = keep.then(|| Cache {
            layers: caches,
            final_norm,
            stage,
        });
        Ok((y, cache))
    }

    /// Training forward pass; keeps activations for [`Transformer::backward`].
    pub fn forward_train<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: Mat<F>,
        mask: &Mask,
        stage: Option<usize>,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Mat<F>, Cache<F>)> {
        let (y, c) = self.run(store, x, mask, stage, dropout_rng, None, true)?;
        Ok((y, c.expect("kept")))
    }

    /// Inference forward pass over a whole sequence.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: Mat<F>,
        mask: &Mask,
        stage: Option<usize>,
    ) -> Result<Mat<F>> {
        Ok(self.run(store, x, mask, stage, None, None, false)?.0)
    }

    /// Inference forward pass over new positions, attending to (and then
    /// extending) `kv`. `mask` is `new × (past + new)`.
    pub fn forward_cached<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: Mat<F>,
        mask: &Mask,
        stage: Option<usize>,
        kv: &mut KvCache<F>,
    ) -> Result<Mat<F>> {
        Ok(self.run(store, x, mask, stage, None, Some(kv), false)?.0)
    }

    pub fn empty_cache<F: Scalar>(&self) -> KvCache<F> {
        KvCache {
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂x`.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        grads: &mut ParamStore<F>,
        cache: &Cache<F>,
        dy: &Mat<F>,
    ) -> Mat<F> {
        let stage = cache.stage;
        let d = self.dim;
        let h = self.heads;
        let dh = d / h;
        let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let n = dy.rows;

        let mut dx = self.norm_backward(store, grads, self.final_norm, stage, &cache.final_norm, dy);
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            // feed-forward branch
            let mut dg = dx.clone();
            if let Some(m) = &c.ffn_drop {
                dg.data.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
            }
            let df = linear_backward(&c.f, &dg, store, grads, l.w2, l.b2);
            let mut du = df;
            du.data
                .iter_mut()
                .zip(&c.u.data)
                .for_each(|(g, &u)| *g *= gelu_grad(u));
            let dh2 = linear_backward(&c.h2, &du, store, grads, l.w1, l.b1);
            let dres = self.norm_backward(store, grads, l.ln2, stage, &c.ln2, &dh2);
            dx.add_assign(&dres);

            // attention branch
            let mut da = dx.clone();
            if let Some(m) = &c.attn_drop {
                da.data.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
            }
            let d_o = linear_backward(&c.o, &da, store, grads, l.wo, l.bo);
            let mut dq = Mat::zeros(n, d);
            let mut dk = Mat::zeros(n, d);
            let mut dv = Mat::zeros(n, d);
            for head in 0..h {
                let p = &c.probs[head];
                let mut dp = Mat::zeros(n, n);
                gemm(
                    F::one(),
                    d_o.view().cols(head * dh, dh),
                    c.v.view().cols(head * dh, dh).t(),
                    F::zero(),
                    dp.view_mut(),
                );
                gemm(
                    F::one(),
                    p.view().t(),
                    d_o.view().cols(head * dh, dh),
                    F::zero(),
                    dv.view_mut().cols(head * dh, dh),
                );
                // softmax backward; masked entries have p = 0 and drop out
                for i in 0..n {
                    let pr = p.row(i);
                    let dpr = dp.row_mut(i);
                    let dot: F = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dpr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                gemm(
                    F::one(),
                    dp.view(),
                    c.k.view().cols(head * dh, dh),
                    F::zero(),
                    dq.view_mut().cols(head * dh, dh),
                );
                gemm(
                    F::one(),
                    dp.view().t(),
                    c.q.view().cols(head * dh, dh),
                    F::zero(),
                    dk.view_mut().cols(head * dh, dh),
                );
            }
            let mut dh1 = linear_backward(&c.h1, &dq, store, grads, l.wq, l.bq);
            dh1.add_assign(&linear_backward(&c.h1, &dk, store, grads, l.wk, l.bk));
            dh1.add_assign(&linear_backward(&c.h1, &dv, store, grads, l.wv, l.bv));
            let dres = self.norm_backward(store, grads, l.ln1, stage, &c.ln1, &dh1);
            dx.add_assign(&dres);
        }
        dx
    }
}
