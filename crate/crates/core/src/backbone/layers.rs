//! Row-major token-matrix layers with hand-written backward passes.
//!
//! Every activation is an `(tokens, features)` matrix. Backward functions
//! accumulate parameter gradients in place and return the input gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

const LN_EPS: f64 = 1e-5;

pub fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    gw: &mut Array2<f64>,
    gb: &mut Array2<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, gw);
    *gb += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&w.t())
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub fn layer_norm(
    x: &ArrayView2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *r);
    }
    let mut y = &xhat * gamma;
    y += beta;
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array2<f64>,
    dy: &Array2<f64>,
    ggamma: &mut Array2<f64>,
    gbeta: &mut Array2<f64>,
) -> Array2<f64> {
    let n = dy.ncols() as f64;
    *ggamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *gbeta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(&cache.rstd)
    {
        let mean_g = g.sum() / n;
        let mean_gx = g.dot(&xh) / n;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(x).and(dy).map_collect(|&v, &g| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let th = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
    })
}

pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(x).and(dy).map_collect(|&v, &g| {
        let s = 1.0 / (1.0 + (-v).exp());
        g * (s + v * s * (1.0 - s))
    })
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head self-attention over a packed `(tokens, 3 * dim)` QKV matrix.
///
/// Returns the concatenated head outputs and the per-head attention weights.
pub fn attention(qkv: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let dim = qkv.ncols() / 3;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((qkv.nrows(), dim));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
        let v = qkv.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
        let mut p = q.dot(&k.t());
        p *= scale;
        softmax_rows(&mut p);
        out.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&p.dot(&v));
        probs.push(p);
    }
    (out, probs)
}

pub fn attention_backward(
    qkv: &Array2<f64>,
    probs: &[Array2<f64>],
    d_out: &Array2<f64>,
) -> Array2<f64> {
    let heads = probs.len();
    let dim = qkv.ncols() / 3;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(s![.., dim + h * hd..dim + (h + 1) * hd]);
        let v = qkv.slice(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
        let dout = d_out.slice(s![.., h * hd..(h + 1) * hd]);

        let dv = p.t().dot(&dout);
        let dp = dout.dot(&v.t());
        // softmax backward, row-wise: ds = p * (dp - <dp, p>)
        let mut ds = dp;
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let inner = drow.dot(&prow);
            Zip::from(&mut drow)
                .and(&prow)
                .for_each(|d, &pv| *d = pv * (*d - inner) * scale);
        }
        let dq = ds.dot(&k);
        let dk = ds.t().dot(&q);
        dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&dq);
        dqkv.slice_mut(s![.., dim + h * hd..dim + (h + 1) * hd])
            .assign(&dk);
        dqkv.slice_mut(s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd])
            .assign(&dv);
    }
    dqkv
}

/// Sinusoidal features `[cos(x * f_k), sin(x * f_k)]` with geometric
/// frequencies `f_k = 10000^(-k / half)`.
pub fn sinusoid(x: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (x * freq).cos();
        out[half + k] = (x * freq).sin();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng))
    }

    /// Central-difference check of `<w, f(x)>` against an analytic input gradient.
    fn check_input_grad(
        x: &Array2<f64>,
        f: impl Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
        w: &Array2<f64>,
    ) {
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (x.nrows() - 1, x.ncols() - 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((&f(&xp) * w).sum() - (&f(&xm) * w).sum()) / (2.0 * h);
            let a = analytic[idx];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                "{idx:?}: fd={fd} analytic={a}"
            );
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let x = rand_mat(5, 8, 1);
        let gamma = rand_mat(1, 8, 2);
        let beta = rand_mat(1, 8, 3);
        let w = rand_mat(5, 8, 4);
        let (y, cache) = layer_norm(&x.view(), &gamma, &beta);
        assert_eq!(y.dim(), (5, 8));
        let mut gg = Array2::zeros((1, 8));
        let mut gb = Array2::zeros((1, 8));
        let dx = layer_norm_backward(&cache, &gamma, &w, &mut gg, &mut gb);
        check_input_grad(&x, |x| layer_norm(&x.view(), &gamma, &beta).0, &dx, &w);
    }

    #[test]
    fn activation_gradients() {
        let x = rand_mat(4, 6, 5);
        let w = rand_mat(4, 6, 6);
        check_input_grad(&x, gelu, &gelu_backward(&x, &w), &w);
        check_input_grad(&x, silu, &silu_backward(&x, &w), &w);
    }

    #[test]
    fn attention_gradient_and_normalization() {
        let qkv = rand_mat(7, 12, 7);
        let w = rand_mat(7, 4, 8);
        let (_, probs) = attention(&qkv, 2);
        for p in &probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let dqkv = attention_backward(&qkv, &probs, &w);
        check_input_grad(&qkv, |x| attention(x, 2).0, &dqkv, &w);
    }

    #[test]
    fn linear_gradient() {
        let x = rand_mat(3, 4, 9);
        let wt = rand_mat(4, 5, 10);
        let b = rand_mat(1, 5, 11);
        let dy = rand_mat(3, 5, 12);
        let mut gw = Array2::zeros((4, 5));
        let mut gb = Array2::zeros((1, 5));
        let dx = linear_backward(&x.view(), &wt, &dy, &mut gw, &mut gb);
        check_input_grad(&x, |x| linear(&x.view(), &wt, &b), &dx, &dy);
        assert!((gb.sum() - dy.sum()).abs() < 1e-12);
    }
}
