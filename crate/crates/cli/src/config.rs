//! Flat JSON run configuration with `--set key=value` and `MACIL_SEED` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use macil_core::macil::RampSchedule;
use macil_core::network::NetworkConfig;
use macil_core::synth::SynthConfig;
use macil_core::trainer::{InfusionFrequency, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "MACIL_SEED";

/// Every synthesis, network and training knob in one namespace.
///
/// `d_audio`/`d_visual` are optional: `synth` falls back to the generator's
/// defaults, `params` to 128/1024, and `train` always takes them from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_videos: usize,
    pub violent_fraction: f64,
    pub snippets: usize,
    pub d_audio: Option<usize>,
    pub d_visual: Option<usize>,
    pub events_per_violent_video: [usize; 2],
    pub events_per_normal_video: [usize; 2],
    pub event_len_snippets: [usize; 2],
    pub asynchrony_offset: [i64; 2],
    pub noise_sigma: f64,

    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr_av: f64,
    pub lr_twin: f64,
    pub ramp_growth: f64,
    pub max_v2n: f64,
    pub max_v2b: f64,
    pub temperature: f64,
    pub initial_momentum: f64,
    pub infusion: InfusionFrequency,
    pub contrastive: bool,
    pub distill: bool,

    /// Fallback for `--data` when the flag is absent.
    pub data: Option<PathBuf>,
    /// Fallback for `--out` when the flag is absent.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let n = NetworkConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            n_videos: s.n_videos,
            violent_fraction: s.violent_fraction,
            snippets: s.snippets,
            d_audio: None,
            d_visual: None,
            events_per_violent_video: s.events_per_violent_video,
            events_per_normal_video: s.events_per_normal_video,
            event_len_snippets: s.event_len_snippets,
            asynchrony_offset: s.asynchrony_offset,
            noise_sigma: s.noise_sigma,
            d_model: n.d_model,
            n_heads: n.n_heads,
            ffn_dim: n.ffn_dim,
            dropout: n.dropout,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_av: t.lr_av,
            lr_twin: t.lr_twin,
            ramp_growth: t.ramp.growth,
            max_v2n: t.ramp.max_v2n,
            max_v2b: t.ramp.max_v2b,
            temperature: t.ramp.temperature,
            initial_momentum: t.initial_momentum,
            infusion: t.infusion,
            contrastive: t.contrastive,
            distill: t.distill,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `MACIL_SEED`, then each `key=value`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                serde_json::from_str::<Value>(&text)
                    .with_context(|| format!("config {} is not valid JSON", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        let Value::Object(map) = &mut doc else {
            bail!("config must be a JSON object");
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={seed:?} is not an unsigned integer"))?;
            map.insert("seed".into(), seed.into());
        }
        for item in overrides {
            let Some((key, raw)) = item.split_once('=') else {
                bail!("--set expects key=value, got {item:?}");
            };
            // Bare words that are not JSON become strings, so `--set infusion=per-epoch` works.
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.trim().to_string(), value);
        }
        serde_json::from_value(doc).context("invalid config")
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            n_videos: self.n_videos,
            violent_fraction: self.violent_fraction,
            snippets: self.snippets,
            d_audio: self.d_audio.unwrap_or(d.d_audio),
            d_visual: self.d_visual.unwrap_or(d.d_visual),
            events_per_violent_video: self.events_per_violent_video,
            events_per_normal_video: self.events_per_normal_video,
            event_len_snippets: self.event_len_snippets,
            asynchrony_offset: self.asynchrony_offset,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn network_config(&self, d_audio: usize, d_visual: usize) -> NetworkConfig {
        NetworkConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            d_audio,
            d_visual,
        }
    }

    /// Network shape for `params`: explicit dims, else 128-d audio and 1024-d visual inputs.
    pub fn default_network(&self) -> NetworkConfig {
        let d = NetworkConfig::default();
        self.network_config(self.d_audio.unwrap_or(d.d_audio), self.d_visual.unwrap_or(d.d_visual))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_av: self.lr_av,
            lr_twin: self.lr_twin,
            ramp: RampSchedule {
                growth: self.ramp_growth,
                max_v2n: self.max_v2n,
                max_v2b: self.max_v2b,
                temperature: self.temperature,
            },
            initial_momentum: self.initial_momentum,
            infusion: self.infusion,
            contrastive: self.contrastive,
            distill: self.distill,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
