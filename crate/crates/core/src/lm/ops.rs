//! Stateless building blocks: positions, normalization, attention, loss.

use super::tensor::{matmul, Mat, Scalar, View};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Fixed sinusoidal table: column `2k` is `sin(p / 10000^(2k/dim))`,
/// column `2k+1` the matching cosine.
pub fn sinusoidal_positions<F: Scalar>(length: usize, dim: usize) -> Result<Mat<F>> {
    if dim % 2 != 0 {
        return Err(Error::invalid("dim", format!("{dim} must be even")));
    }
    let mut m = Mat::zeros(length, dim);
    for p in 0..length {
        for k in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            m.data[p * dim + 2 * k] = F::from_f64_lossy(angle.sin());
            m.data[p * dim + 2 * k + 1] = F::from_f64_lossy(angle.cos());
        }
    }
    Ok(m)
}

/// Which key positions each query position may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| true)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| i == j)
    }

    /// Bidirectional over the first `prefix` positions, causal after them.
    pub fn prefix_causal(n: usize, prefix: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i < prefix { j < prefix } else { j <= i })
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn check(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(Error::invalid("mask", format!("row {i} masks every position")));
            }
        }
        Ok(())
    }
}

/// In-place masked softmax of one score row. Masked entries become exactly 0.
pub(crate) fn masked_softmax_row<F: Scalar>(scores: &mut [F], allowed: &[bool]) {
    let mut max = F::neg_infinity();
    for (s, &a) in scores.iter().zip(allowed) {
        if a && *s > max {
            max = *s;
        }
    }
    let mut sum = F::zero();
    for (s, &a) in scores.iter_mut().zip(allowed) {
        *s = if a { (*s - max).exp() } else { F::zero() };
        sum += *s;
    }
    let inv = F::one() / sum;
    scores.iter_mut().for_each(|s| *s *= inv);
}

/// Single-head scaled dot-product attention, `softmax(q kᵀ / √d_k) v` over
/// allowed positions.
pub fn attention<F: Scalar>(q: &Mat<F>, k: &Mat<F>, v: &Mat<F>, mask: &Mask) -> Result<Mat<F>> {
    if q.cols != k.cols || k.rows != v.rows || mask.rows != q.rows || mask.cols != k.rows {
        return Err(Error::shape(
            "attention",
            format!("q {}x{}, k {}x{}, mask {}x{}", q.rows, q.cols, k.rows, q.cols, q.rows, k.rows),
            format!(
                "q {}x{}, k {}x{}, v {}x{}, mask {}x{}",
                q.rows, q.cols, k.rows, k.cols, v.rows, v.cols, mask.rows, mask.cols
            ),
        ));
    }
    mask.check()?;
    let scale = F::from_f64_lossy(1.0 / (q.cols as f64).sqrt());
    let mut scores = matmul(q.view(), k.view().t());
    for i in 0..scores.rows {
        let row = scores.row_mut(i);
        row.iter_mut().for_each(|s| *s *= scale);
        masked_softmax_row(row, mask.row(i));
    }
    Ok(matmul(scores.view(), v.view()))
}

/// Row-wise normalization without affine terms. Returns `(x̂, 1/σ per row)`.
pub fn layer_norm_rows<F: Scalar>(x: &Mat<F>) -> (Mat<F>, Vec<F>) {
    let d = x.cols;
    let n = F::from_f64_lossy(d as f64);
    let eps = F::from_f64_lossy(LN_EPS);
    let mut out = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (out, rstd)
}

/// Gradient of [`layer_norm_rows`] given `dx̂`.
pub fn layer_norm_rows_backward<F: Scalar>(xhat: &Mat<F>, rstd: &[F], dxhat: &Mat<F>) -> Mat<F> {
    let d = xhat.cols;
    let n = F::from_f64_lossy(d as f64);
    let mut dx = Mat::zeros(xhat.rows, d);
    for r in 0..xhat.rows {
        let xh = xhat.row(r);
        let dy = dxhat.row(r);
        let mean_dy = dy.iter().copied().sum::<F>() / n;
        let mean_dy_xh = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
        for ((o, &g), &h) in dx.row_mut(r).iter_mut().zip(dy).zip(xh) {
            *o = rstd[r] * (g - mean_dy - h * mean_dy_xh);
        }
    }
    dx
}

/// `scale ⊙ LayerNorm(h) + shift` per row.
pub fn layer_norm<F: Scalar>(h: &Mat<F>, scale: &[F], shift: &[F]) -> Mat<F> {
    let (mut y, _) = layer_norm_rows(h);
    for r in 0..y.rows {
        for ((o, &a), &b) in y.row_mut(r).iter_mut().zip(scale).zip(shift) {
            *o = a * *o + b;
        }
    }
    y
}

/// Stage-conditioned modulation parameters for one AdaLN site.
///
/// `a_i = W_a e_i + c_a` and `b_i = W_b e_i + c_b`, where `e_i` is row
/// `i - 2` of the stage embedding table.
pub struct AdaLnParams<'a, F> {
    /// `(Q - 1) × d_s`.
    pub stage_table: View<'a, F>,
    /// `d_s × d`.
    pub scale_proj: View<'a, F>,
    pub scale_bias: &'a [F],
    pub shift_proj: View<'a, F>,
    pub shift_bias: &'a [F],
    pub quantizers: usize,
}

impl<F: Scalar> AdaLnParams<'_, F> {
    /// `(a_i, b_i)` for 1-based stage `stage ∈ [2, Q]`.
    pub fn modulation(&self, stage: usize) -> Result<(Vec<F>, Vec<F>)> {
        if stage < 2 || stage > self.quantizers {
            return Err(Error::out_of_range(
                "stage",
                stage as i64,
                format!("[2, {}]", self.quantizers),
            ));
        }
        let ds = self.stage_table.cols;
        let row_start = (stage - 2) * self.stage_table.rs;
        let e = View::new(&self.stage_table.data[row_start..row_start + ds], 1, ds);
        let mut a = matmul(e, self.scale_proj).data;
        let mut b = matmul(e, self.shift_proj).data;
        a.iter_mut().zip(self.scale_bias).for_each(|(x, &c)| *x += c);
        b.iter_mut().zip(self.shift_bias).for_each(|(x, &c)| *x += c);
        Ok((a, b))
    }
}

/// `AdaLN(h, i) = a_i LayerNorm(h) + b_i`.
pub fn ada_layer_norm<F: Scalar>(h: &Mat<F>, stage: usize, params: &AdaLnParams<F>) -> Result<Mat<F>> {
    let (a, b) = params.modulation(stage)?;
    if a.len() != h.cols {
        return Err(Error::shape("ada_layer_norm width", a.len(), h.cols));
    }
    Ok(layer_norm(h, &a, &b))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, over rows where `loss_mask` is set.
pub fn cross_entropy<F: Scalar>(logits: &Mat<F>, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let (sum, count, _) = cross_entropy_sum(logits, targets, loss_mask, None)?;
    Ok(sum / count as f64)
}

/// Summed NLL, the number of counted rows, and (when `grad_scale` is given)
/// `grad_scale · ∂sum/∂logits`.
pub fn cross_entropy_sum<F: Scalar>(
    logits: &Mat<F>,
    targets: &[usize],
    loss_mask: &[bool],
    grad_scale: Option<F>,
) -> Result<(f64, usize, Option<Mat<F>>)> {
    if targets.len() != logits.rows || loss_mask.len() != logits.rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets and mask entries", logits.rows),
            format!("{} targets, {} mask entries", targets.len(), loss_mask.len()),
        ));
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("loss_mask", "every position is masked"));
    }
    let mut grad = grad_scale.map(|_| Mat::zeros(logits.rows, logits.cols));
    let mut total = 0.0f64;
    for r in 0..logits.rows {
        if !loss_mask[r] {
            continue;
        }
        let t = targets[r];
        if t >= logits.cols {
            return Err(Error::out_of_range("target", t as i64, format!("[0, {})", logits.cols)));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum_exp: f64 = row.iter().map(|&v| (v - max).to_f64_lossy().exp()).sum();
        let log_z = max.to_f64_lossy() + sum_exp.ln();
        total += log_z - row[t].to_f64_lossy();
        if let (Some(g), Some(s)) = (grad.as_mut(), grad_scale) {
            let out = g.row_mut(r);
            for (o, &v) in out.iter_mut().zip(row) {
                *o = F::from_f64_lossy((v.to_f64_lossy() - log_z).exp()) * s;
            }
            out[t] -= s;
        }
    }
    Ok((total, count, grad))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<F: PartialOrd + Copy>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn positions_rows_and_odd_dim() {
        let p = sinusoidal_positions::<f64>(3, 4).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.data[4] - 1f64.sin()).abs() < 1e-15);
        assert!((p.data[4] - 0.8415).abs() < 1e-4);
        assert_eq!(sinusoidal_positions::<f64>(0, 4).unwrap().rows, 0);
        assert!(sinusoidal_positions::<f64>(2, 3).is_err());
    }

    #[test]
    fn identity_mask_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, k, v) = (rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 2));
        let out = attention(&q, &k, &v, &Mask::identity(4)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Mat::<f64>::zeros(3, 2);
        let k = rand_mat(&mut rng, 3, 2);
        let v = rand_mat(&mut rng, 3, 2);
        let out = attention(&q, &k, &v, &Mask::full(3)).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|r| v.data[r * 2 + c]).sum::<f64>() / 3.0;
            for r in 0..3 {
                assert!((out.data[r * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_reference_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_mat(&mut rng, 3, 3), rand_mat(&mut rng, 3, 3), rand_mat(&mut rng, 3, 3));
        let out = attention(&q, &k, &v, &Mask::full(3)).unwrap();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|c| q.data[i * 3 + c] * k.data[j * 3 + c]).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..3 {
                let e: f64 = (0..3).map(|j| s[j].exp() / z * v.data[j * 3 + c]).sum();
                assert!((out.data[i * 3 + c] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let m = Mat::<f64>::zeros(2, 2);
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        assert!(attention(&m, &m, &m, &mask).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let mut row: Vec<f32> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
            let allowed: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.7)).collect();
            masked_softmax_row(&mut row, &allowed);
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_keys_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask = Mask::prefix_causal(6, 2);
        let q = rand_mat(&mut rng, 6, 4);
        let k = rand_mat(&mut rng, 6, 4);
        let v = rand_mat(&mut rng, 6, 4);
        let base = attention(&q, &k, &v, &mask).unwrap();
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for c in 0..4 {
            k2.data[5 * 4 + c] = 100.0;
            v2.data[5 * 4 + c] = -7.0;
        }
        let out = attention(&q, &k2, &v2, &mask).unwrap();
        assert_eq!(&out.data[..5 * 4], &base.data[..5 * 4]);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Mat::<f64>::zeros(3, 7);
        let l = cross_entropy(&uniform, &[0, 3, 6], &[true; 3]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);

        let mut peaked = Mat::<f64>::zeros(1, 4);
        peaked.data[2] = 1e3;
        assert!(cross_entropy(&peaked, &[2], &[true]).unwrap() < 1e-12);

        assert!(cross_entropy(&uniform, &[0, 0, 0], &[false; 3]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = rand_mat(&mut rng, 4, 5);
        let targets = [1, 4, 0, 2];
        let mask = [true, false, true, true];
        let got = cross_entropy(&logits, &targets, &mask).unwrap();
        let mut expect = 0.0;
        for r in [0, 2, 3] {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            expect += -(row[targets[r]].exp() / z).ln();
        }
        assert!((got - expect / 3.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.3, 2.0f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 2, 5);
        let w = rand_mat(&mut rng, 2, 5);
        let f = |x: &Mat<f64>| -> f64 {
            let (y, _) = layer_norm_rows(x);
            y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let (xh, rs) = layer_norm_rows(&x);
        let dx = layer_norm_rows_backward(&xh, &rs, &w);
        for i in 0..10 {
            let mut xp = x.clone();
            xp.data[i] += 1e-6;
            let mut xm = x.clone();
            xm.data[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
