//! Forward and backward passes of the encoder block's building blocks.
//!
//! Every forward returns a cache holding what its backward needs; backwards
//! accumulate parameter gradients into a same-shaped gradient container and
//! return the gradient with respect to their input.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{EncoderBlock, LayerNorm, Linear};
use super::NetworkConfig;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn linear_forward(p: &Linear, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut y = x.dot(&p.weight);
    y += &p.bias;
    y
}

/// Accumulates `dW`, `db` into `grad` and returns `dx`.
pub fn linear_backward(
    p: &Linear,
    grad: &mut Linear,
    x: &ArrayView2<f64>,
    dy: &Array2<f64>,
) -> Array2<f64> {
    linear_backward_params(grad, x, dy);
    dy.dot(&p.weight.t())
}

pub fn linear_backward_params(grad: &mut Linear, x: &ArrayView2<f64>, dy: &Array2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm_forward(p: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *is;
    }
    let mut y = &xhat * &p.gain;
    y += &p.shift;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    p: &LayerNorm,
    grad: &mut LayerNorm,
    cache: &LayerNormCache,
    dy: &Array2<f64>,
) -> Array2<f64> {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.shift += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * &p.gain;
    for ((mut row, xhat), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(&cache.inv_std)
    {
        let sum = row.sum();
        let dot = row.dot(&xhat);
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = is * (*g - sum / d - xh * dot / d));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Inverted-dropout mask (entries 0 or `1/(1-rate)`), or `None` when disabled.
fn dropout_mask(
    rng: Option<&mut ChaCha8Rng>,
    rate: f64,
    shape: (usize, usize),
) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Scaled dot-product attention of pre-projected `q` (T x d) over `k`, `v` (S x d),
/// split into `n_heads` column groups. Returns the concatenated head outputs and
/// each head's attention weights.
pub fn multi_head_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        weights.push(scores);
    }
    (out, weights)
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    q_in: Array2<f64>,
    kv_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    heads: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    norm_attn: LayerNormCache,
    n1: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    norm_ffn: LayerNormCache,
}

/// Encoder block with queries from `q_in` and keys/values from `kv_in`.
///
/// Dropout (after the attention output projection and after the FFN activation)
/// is active only when `rng` is given.
pub fn block_forward(
    p: &EncoderBlock,
    cfg: &NetworkConfig,
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, BlockCache) {
    let q = linear_forward(&p.attn.query, &q_in.view());
    let k = linear_forward(&p.attn.key, &kv_in.view());
    let v = linear_forward(&p.attn.value, &kv_in.view());
    let (heads, weights) = multi_head_attention(&q, &k, &v, cfg.n_heads);
    let mut attn = linear_forward(&p.attn.output, &heads.view());
    let attn_mask = dropout_mask(rng.as_deref_mut(), cfg.dropout, attn.dim());
    apply_mask(&mut attn, &attn_mask);
    attn += q_in;
    let (n1, norm_attn) = layer_norm_forward(&p.norm_attn, &attn);

    let pre_act = linear_forward(&p.ffn.inner, &n1.view());
    let mut act = pre_act.mapv(gelu);
    let ffn_mask = dropout_mask(rng.as_deref_mut(), cfg.dropout, act.dim());
    apply_mask(&mut act, &ffn_mask);
    let mut x2 = linear_forward(&p.ffn.outer, &act.view());
    x2 += &n1;
    let (out, norm_ffn) = layer_norm_forward(&p.norm_ffn, &x2);

    let cache = BlockCache {
        q_in: q_in.clone(),
        kv_in: kv_in.clone(),
        q,
        k,
        v,
        weights,
        heads,
        attn_mask,
        norm_attn,
        n1,
        pre_act,
        act,
        ffn_mask,
        norm_ffn,
    };
    (out, cache)
}

/// Returns `(d q_in, d kv_in)` and accumulates parameter gradients into `grad`.
pub fn block_backward(
    p: &EncoderBlock,
    grad: &mut EncoderBlock,
    cfg: &NetworkConfig,
    cache: &BlockCache,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d_x2 = layer_norm_backward(&p.norm_ffn, &mut grad.norm_ffn, &cache.norm_ffn, d_out);
    let mut d_n1 = d_x2.clone();
    let mut d_act = linear_backward(&p.ffn.outer, &mut grad.ffn.outer, &cache.act.view(), &d_x2);
    apply_mask(&mut d_act, &cache.ffn_mask);
    Zip::from(&mut d_act)
        .and(&cache.pre_act)
        .for_each(|g, &x| *g *= gelu_grad(x));
    d_n1 += &linear_backward(&p.ffn.inner, &mut grad.ffn.inner, &cache.n1.view(), &d_act);

    let d_x1 = layer_norm_backward(&p.norm_attn, &mut grad.norm_attn, &cache.norm_attn, &d_n1);
    let mut d_q_in = d_x1.clone();
    let mut d_attn = d_x1;
    apply_mask(&mut d_attn, &cache.attn_mask);
    let d_heads = linear_backward(
        &p.attn.output,
        &mut grad.attn.output,
        &cache.heads.view(),
        &d_attn,
    );

    let d = cache.q.ncols();
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_q = Array2::zeros(cache.q.dim());
    let mut d_k = Array2::zeros(cache.k.dim());
    let mut d_v = Array2::zeros(cache.v.dim());
    for (h, w) in cache.weights.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_o = d_heads.slice(cols);
        let d_w = d_o.dot(&cache.v.slice(cols).t());
        d_v.slice_mut(cols).assign(&w.t().dot(&d_o));
        // softmax backward, row-wise: dS = W * (dW - rowsum(dW * W))
        let mut d_s = &d_w * w;
        let row_sums = d_s.sum_axis(Axis(1));
        Zip::from(d_s.rows_mut())
            .and(w.rows())
            .and(&row_sums)
            .for_each(|mut ds, wr, &rs| ds.scaled_add(-rs, &wr));
        d_s *= scale;
        d_q.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
        d_k.slice_mut(cols).assign(&d_s.t().dot(&cache.q.slice(cols)));
    }
    d_q_in += &linear_backward(&p.attn.query, &mut grad.attn.query, &cache.q_in.view(), &d_q);
    let mut d_kv_in = linear_backward(&p.attn.key, &mut grad.attn.key, &cache.kv_in.view(), &d_k);
    d_kv_in += &linear_backward(
        &p.attn.value,
        &mut grad.attn.value,
        &cache.kv_in.view(),
        &d_v,
    );
    (d_q_in, d_kv_in)
}
