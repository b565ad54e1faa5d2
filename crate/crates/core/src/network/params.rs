use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetworkConfig;

/// Named access to every trainable tensor of a model, in a fixed order.
///
/// Shapes are reported as `[rows, cols]`; vectors are `[1, n]`.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, [usize; 2], &[f64]));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites every tensor from `flat`, which must hold exactly [`Parameters::count`] values.
    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.count(), "flat parameter length");
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, _| out.push(name.to_string()));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored contiguously")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored contiguously")
}

/// Affine map `x W + b` with `W` stored input-major (`in x out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-bound..bound)
            }),
            bias: Array1::zeros(fan_out),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 2], &[f64])) {
        let (r, c) = self.weight.dim();
        f(&format!("{prefix}.weight"), [r, c], slice_of(&self.weight));
        f(&format!("{prefix}.bias"), [1, c], slice_of(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), slice_of_mut(&mut self.weight));
        f(&format!("{prefix}.bias"), slice_of_mut(&mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: Array1::zeros(dim),
            shift: Array1::zeros(dim),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 2], &[f64])) {
        let n = self.gain.len();
        f(&format!("{prefix}.gain"), [1, n], slice_of(&self.gain));
        f(&format!("{prefix}.shift"), [1, n], slice_of(&self.shift));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.gain"), slice_of_mut(&mut self.gain));
        f(&format!("{prefix}.shift"), slice_of_mut(&mut self.shift));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

/// One post-norm transformer encoder block: attention, add & norm, FFN, add & norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attn: Attention,
    pub ffn: FeedForward,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl EncoderBlock {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attn: Attention {
                query: Linear::zeros(d, d),
                key: Linear::zeros(d, d),
                value: Linear::zeros(d, d),
                output: Linear::zeros(d, d),
            },
            ffn: FeedForward {
                inner: Linear::zeros(d, cfg.ffn_dim),
                outer: Linear::zeros(cfg.ffn_dim, d),
            },
            norm_attn: LayerNorm::zeros(d),
            norm_ffn: LayerNorm::zeros(d),
        }
    }

    fn init(rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attn: Attention {
                query: Linear::init(rng, d, d),
                key: Linear::init(rng, d, d),
                value: Linear::init(rng, d, d),
                output: Linear::init(rng, d, d),
            },
            ffn: FeedForward {
                inner: Linear::init(rng, d, cfg.ffn_dim),
                outer: Linear::init(rng, cfg.ffn_dim, d),
            },
            norm_attn: LayerNorm::new(d),
            norm_ffn: LayerNorm::new(d),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 2], &[f64])) {
        self.attn.query.visit(&format!("{prefix}.attn.query"), f);
        self.attn.key.visit(&format!("{prefix}.attn.key"), f);
        self.attn.value.visit(&format!("{prefix}.attn.value"), f);
        self.attn.output.visit(&format!("{prefix}.attn.output"), f);
        self.ffn.inner.visit(&format!("{prefix}.ffn.inner"), f);
        self.ffn.outer.visit(&format!("{prefix}.ffn.outer"), f);
        self.norm_attn.visit(&format!("{prefix}.norm_attn"), f);
        self.norm_ffn.visit(&format!("{prefix}.norm_ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.attn.query.visit_mut(&format!("{prefix}.attn.query"), f);
        self.attn.key.visit_mut(&format!("{prefix}.attn.key"), f);
        self.attn.value.visit_mut(&format!("{prefix}.attn.value"), f);
        self.attn.output.visit_mut(&format!("{prefix}.attn.output"), f);
        self.ffn.inner.visit_mut(&format!("{prefix}.ffn.inner"), f);
        self.ffn.outer.visit_mut(&format!("{prefix}.ffn.outer"), f);
        self.norm_attn.visit_mut(&format!("{prefix}.norm_attn"), f);
        self.norm_ffn.visit_mut(&format!("{prefix}.norm_ffn"), f);
    }
}

/// Trainable parameters of the two-stream audio-visual network.
///
/// A single attention block is shared by both cross-attention directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub proj_a: Linear,
    pub proj_v: Linear,
    pub block: EncoderBlock,
    pub head_a: Linear,
    pub head_v: Linear,
}

impl ModelParams {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        Self {
            proj_a: Linear::zeros(cfg.d_audio, cfg.d_model),
            proj_v: Linear::zeros(cfg.d_visual, cfg.d_model),
            block: EncoderBlock::zeros(cfg),
            head_a: Linear::zeros(cfg.d_model, 1),
            head_v: Linear::zeros(cfg.d_model, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, v| v.fill(0.0));
        out
    }

    /// The shape-shared visual path as a twin parameter set.
    pub fn visual_path(&self) -> VisualTwinParams {
        VisualTwinParams {
            proj_v: self.proj_v.clone(),
            block: self.block.clone(),
            head_v: self.head_v.clone(),
        }
    }
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, [usize; 2], &[f64])) {
        self.proj_a.visit("proj_a", f);
        self.proj_v.visit("proj_v", f);
        self.block.visit("block", f);
        self.head_a.visit("head_a", f);
        self.head_v.visit("head_v", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj_a.visit_mut("proj_a", f);
        self.proj_v.visit_mut("proj_v", f);
        self.block.visit_mut("block", f);
        self.head_a.visit_mut("head_a", f);
        self.head_v.visit_mut("head_v", f);
    }
}

/// Parameters of the visual-only twin; every tensor shares its name and shape with
/// the corresponding [`ModelParams`] tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTwinParams {
    pub proj_v: Linear,
    pub block: EncoderBlock,
    pub head_v: Linear,
}

impl VisualTwinParams {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        Self {
            proj_v: Linear::zeros(cfg.d_visual, cfg.d_model),
            block: EncoderBlock::zeros(cfg),
            head_v: Linear::zeros(cfg.d_model, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, v| v.fill(0.0));
        out
    }
}

impl Parameters for VisualTwinParams {
    fn visit(&self, f: &mut dyn FnMut(&str, [usize; 2], &[f64])) {
        self.proj_v.visit("proj_v", f);
        self.block.visit("block", f);
        self.head_v.visit("head_v", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj_v.visit_mut("proj_v", f);
        self.block.visit_mut("block", f);
        self.head_v.visit_mut("head_v", f);
    }
}

/// Deterministic fan-in-scaled uniform initialization.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj_a = Linear::init(&mut rng, cfg.d_audio, cfg.d_model);
    let proj_v = Linear::init(&mut rng, cfg.d_visual, cfg.d_model);
    let block = EncoderBlock::init(&mut rng, cfg);
    let head_a = Linear::init(&mut rng, cfg.d_model, 1);
    let head_v = Linear::init(&mut rng, cfg.d_model, 1);
    ModelParams {
        proj_a,
        proj_v,
        block,
        head_a,
        head_v,
    }
}

/// Twin initialization: a copy of the AV network's visual path at the same seed.
pub fn init_twin(cfg: &NetworkConfig, seed: u64) -> VisualTwinParams {
    init_params(cfg, seed).visual_path()
}

/// Exact trainable-scalar count of a model, from its tensors.
pub fn count_parameters(params: &impl Parameters) -> usize {
    params.count()
}

/// Closed-form parameter counts `(light, full)` for a configuration.
pub fn parameter_counts(cfg: &NetworkConfig) -> (usize, usize) {
    let d = cfg.d_model;
    let linear = |i: usize, o: usize| i * o + o;
    let block = 4 * linear(d, d) + linear(d, cfg.ffn_dim) + linear(cfg.ffn_dim, d) + 4 * d;
    let twin = linear(cfg.d_visual, d) + block + linear(d, 1);
    let light = twin + linear(cfg.d_audio, d) + linear(d, 1);
    (light, light + twin)
}
