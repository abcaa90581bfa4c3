//! Token embeddings, position encodings and tied output projections.

use super::ops::sinusoidal_positions;
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, matmul, Mat, Scalar};
use crate::error::{Error, Result};

/// Input embeddings are multiplied by `√d` so that table rows (initialized
/// with std `1/√d`) are on the same scale as the sinusoid rows.
pub fn input_scale<F: Scalar>(dim: usize) -> F {
    F::from_f64_lossy((dim as f64).sqrt())
}

/// Adds `scale · table[ids[r]]` into `out[row0 + r]`.
pub fn add_embedding<F: Scalar>(
    out: &mut Mat<F>,
    row0: usize,
    store: &ParamStore<F>,
    table: ParamId,
    ids: &[usize],
    scale: F,
) -> Result<()> {
    let t = store.get(table);
    for (r, &id) in ids.iter().enumerate() {
        if id >= t.rows {
            return Err(Error::out_of_range(
                format!("token id for {}", t.name),
                id as i64,
                format!("[0, {})", t.rows),
            ));
        }
        let src = t.row(id);
        out.row_mut(row0 + r)
            .iter_mut()
            .zip(src)
            .for_each(|(o, &v)| *o += scale * v);
    }
    Ok(())
}

/// Scatters `scale · dx[row0 + r]` into the gradient row `ids[r]`.
pub fn embedding_backward<F: Scalar>(
    grads: &mut ParamStore<F>,
    table: ParamId,
    ids: &[usize],
    dx: &Mat<F>,
    row0: usize,
    scale: F,
) {
    let cols = grads.get(table).cols;
    let g = grads.data_mut(table);
    for (r, &id) in ids.iter().enumerate() {
        g[id * cols..(id + 1) * cols]
            .iter_mut()
            .zip(dx.row(row0 + r))
            .for_each(|(o, &v)| *o += scale * v);
    }
}

/// Adds sinusoid rows selected by `positions` to `x`.
pub fn add_positions<F: Scalar>(x: &mut Mat<F>, positions: &[usize]) -> Result<()> {
    let len = positions.iter().max().map_or(0, |&p| p + 1);
    let table = sinusoidal_positions::<F>(len, x.cols)?;
    for (r, &p) in positions.iter().enumerate() {
        x.row_mut(r)
            .iter_mut()
            .zip(table.row(p))
            .for_each(|(o, &v)| *o += v);
    }
    Ok(())
}

/// `h · Wᵀ` where `W` is an embedding table (one logit per table row).
pub fn tied_logits<F: Scalar>(h: &Mat<F>, store: &ParamStore<F>, table: ParamId) -> Mat<F> {
    matmul(h.view(), store.get(table).view().t())
}

/// Backward of [`tied_logits`]: accumulates `dlogitsᵀ · h` into the table
/// gradient and returns `dlogits · W`.
pub fn tied_logits_backward<F: Scalar>(
    h: &Mat<F>,
    dlogits: &Mat<F>,
    store: &ParamStore<F>,
    grads: &mut ParamStore<F>,
    table: ParamId,
) -> Mat<F> {
    let p = grads.get_mut(table);
    let (rows, cols) = (p.rows, p.cols);
    gemm(
        F::one(),
        dlogits.view().t(),
        h.view(),
        F::one(),
        super::tensor::ViewMut::new(&mut p.data, rows, cols),
    );
    matmul(dlogits.view(), store.get(table).view())
}
