use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    block_backward, block_forward, linear_backward, linear_backward_params, linear_forward,
    BlockCache,
};
use super::params::{EncoderBlock, Linear, ModelParams, VisualTwinParams};
use super::NetworkConfig;
use crate::{kmax_k, Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Indices of the `k` smallest values; ties go to the lower index.
pub fn bottom_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// K-max activation followed by average pooling, with `K = floor(T/16) + 1`.
/// Returns the video score and the selected snippet indices.
pub fn kmax_pool(scores: &[f64]) -> (f64, Vec<usize>) {
    let k = kmax_k(scores.len());
    let top = top_k_indices(scores, k);
    let p = top.iter().map(|&i| scores[i]).sum::<f64>() / k as f64;
    (p, top)
}

/// Per-video outputs of the audio-visual network.
#[derive(Debug, Clone)]
pub struct LogitsBundle {
    pub h_a: Array2<f64>,
    pub h_v: Array2<f64>,
    pub l_a: Array1<f64>,
    pub l_v: Array1<f64>,
    /// `l_a + l_v`.
    pub l_fused: Array1<f64>,
    /// `sigmoid(l_fused)`.
    pub snippet_scores: Array1<f64>,
    /// Mean of the top-K snippet scores.
    pub p: f64,
    pub top_k: Vec<usize>,
}

impl LogitsBundle {
    pub fn len(&self) -> usize {
        self.l_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l_a.is_empty()
    }

    /// Assembles a bundle from embeddings and unimodal logits, deriving the fused
    /// logits, snippet scores and video score.
    pub fn from_parts(
        h_a: Array2<f64>,
        h_v: Array2<f64>,
        l_a: Array1<f64>,
        l_v: Array1<f64>,
    ) -> Self {
        let l_fused = &l_a + &l_v;
        let snippet_scores = l_fused.mapv(sigmoid);
        let (p, top_k) = kmax_pool(snippet_scores.as_slice().unwrap());
        Self {
            h_a,
            h_v,
            l_a,
            l_v,
            l_fused,
            snippet_scores,
            p,
            top_k,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AvCache {
    audio: Array2<f64>,
    visual: Array2<f64>,
    audio_stream: BlockCache,
    visual_stream: BlockCache,
}

fn check_dims(what: &str, x: &Array2<f64>, dim: usize) -> Result<()> {
    if x.nrows() == 0 || x.ncols() != dim {
        return Err(Error::Contract(format!(
            "{what} input is {}x{}, expected Tx{dim} with T >= 1",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

fn head_logits(head: &Linear, h: &Array2<f64>) -> Array1<f64> {
    linear_forward(head, &h.view()).index_axis_move(Axis(1), 0)
}

/// Accumulates head gradients and returns the gradient flowing into `h`.
fn head_backward(head: &Linear, grad: &mut Linear, h: &Array2<f64>, dl: &Array1<f64>) -> Array2<f64> {
    let dy = dl.view().insert_axis(Axis(1)).to_owned();
    linear_backward(head, grad, &h.view(), &dy)
}

/// One attention block with queries from `q_in` and keys/values from `kv_in`, both
/// already projected to `d_model`. Dropout is active iff `rng` is given.
pub fn cross_attention(
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    block: &EncoderBlock,
    cfg: &NetworkConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Array2<f64>> {
    check_dims("query", q_in, cfg.d_model)?;
    check_dims("key/value", kv_in, cfg.d_model)?;
    if q_in.nrows() != kv_in.nrows() {
        return Err(Error::Contract(format!(
            "query T={} differs from key/value T={}",
            q_in.nrows(),
            kv_in.nrows()
        )));
    }
    Ok(block_forward(block, cfg, q_in, kv_in, rng).0)
}

/// Two-stream forward pass. Audio queries attend to visual keys/values and vice
/// versa through one shared attention block.
pub fn forward_av(
    audio: &Array2<f64>,
    visual: &Array2<f64>,
    params: &ModelParams,
    cfg: &NetworkConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(LogitsBundle, AvCache)> {
    check_dims("audio", audio, cfg.d_audio)?;
    check_dims("visual", visual, cfg.d_visual)?;
    if audio.nrows() != visual.nrows() {
        return Err(Error::Contract(format!(
            "snippet count mismatch: audio T={}, visual T={}",
            audio.nrows(),
            visual.nrows()
        )));
    }
    let xa = linear_forward(&params.proj_a, &audio.view());
    let xv = linear_forward(&params.proj_v, &visual.view());
    let (h_a, audio_stream) = block_forward(&params.block, cfg, &xa, &xv, rng.as_deref_mut());
    let (h_v, visual_stream) = block_forward(&params.block, cfg, &xv, &xa, rng.as_deref_mut());
    let l_a = head_logits(&params.head_a, &h_a);
    let l_v = head_logits(&params.head_v, &h_v);
    let bundle = LogitsBundle::from_parts(h_a, h_v, l_a, l_v);
    let cache = AvCache {
        audio: audio.clone(),
        visual: visual.clone(),
        audio_stream,
        visual_stream,
    };
    Ok((bundle, cache))
}

/// Backpropagates upstream gradients on the embeddings and fused logits into `grad`.
pub fn backward_av(
    params: &ModelParams,
    grad: &mut ModelParams,
    cfg: &NetworkConfig,
    cache: &AvCache,
    bundle: &LogitsBundle,
    d_h_a: &Array2<f64>,
    d_h_v: &Array2<f64>,
    d_l_fused: &Array1<f64>,
) {
    let mut d_h_a = d_h_a.clone();
    let mut d_h_v = d_h_v.clone();
    d_h_a += &head_backward(&params.head_a, &mut grad.head_a, &bundle.h_a, d_l_fused);
    d_h_v += &head_backward(&params.head_v, &mut grad.head_v, &bundle.h_v, d_l_fused);

    let (mut d_xa, mut d_xv) =
        block_backward(&params.block, &mut grad.block, cfg, &cache.audio_stream, &d_h_a);
    let (d_xv_q, d_xa_kv) =
        block_backward(&params.block, &mut grad.block, cfg, &cache.visual_stream, &d_h_v);
    d_xv += &d_xv_q;
    d_xa += &d_xa_kv;

    linear_backward_params(&mut grad.proj_a, &cache.audio.view(), &d_xa);
    linear_backward_params(&mut grad.proj_v, &cache.visual.view(), &d_xv);
}

/// Per-video outputs of the visual twin.
#[derive(Debug, Clone)]
pub struct TwinOutput {
    pub h: Array2<f64>,
    pub logits: Array1<f64>,
    pub scores: Array1<f64>,
    pub p: f64,
    pub top_k: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TwinCache {
    visual: Array2<f64>,
    stream: BlockCache,
}

/// Visual-only forward pass: the same block used as self-attention.
pub fn forward_visual(
    visual: &Array2<f64>,
    twin: &VisualTwinParams,
    cfg: &NetworkConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(TwinOutput, TwinCache)> {
    check_dims("visual", visual, cfg.d_visual)?;
    let xv = linear_forward(&twin.proj_v, &visual.view());
    let (h, stream) = block_forward(&twin.block, cfg, &xv, &xv, rng);
    let logits = head_logits(&twin.head_v, &h);
    let scores = logits.mapv(sigmoid);
    let (p, top_k) = kmax_pool(scores.as_slice().unwrap());
    let cache = TwinCache {
        visual: visual.clone(),
        stream,
    };
    Ok((
        TwinOutput {
            h,
            logits,
            scores,
            p,
            top_k,
        },
        cache,
    ))
}

pub fn backward_visual(
    twin: &VisualTwinParams,
    grad: &mut VisualTwinParams,
    cfg: &NetworkConfig,
    cache: &TwinCache,
    out: &TwinOutput,
    d_logits: &Array1<f64>,
) {
    let d_h = head_backward(&twin.head_v, &mut grad.head_v, &out.h, d_logits);
    let (mut d_x, d_kv) = block_backward(&twin.block, &mut grad.block, cfg, &cache.stream, &d_h);
    d_x += &d_kv;
    linear_backward_params(&mut grad.proj_v, &cache.visual.view(), &d_x);
}

/// Gradient of the K-max-pooled score `p` with respect to the pre-sigmoid logits,
/// scaled by `d_p`.
pub fn kmax_pool_backward(scores: &Array1<f64>, top_k: &[usize], d_p: f64) -> Array1<f64> {
    let mut d = Array1::zeros(scores.len());
    let k = top_k.len() as f64;
    for &i in top_k {
        let s = scores[i];
        d[i] = d_p * s * (1.0 - s) / k;
    }
    d
}
