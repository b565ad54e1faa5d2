//! EMA infusion of visual-twin parameters into the audio-visual network.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::network::{ModelParams, Parameters, VisualTwinParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillState {
    /// Initial momentum `m̂`.
    pub initial_momentum: f64,
    pub total_steps: usize,
    /// `(twin tensor name, AV tensor name)` pairs.
    pub layer_map: Vec<(String, String)>,
}

impl DistillState {
    /// Maps every twin tensor onto the AV tensor of the same name: the visual
    /// projection, the encoder block and the visual head.
    pub fn new(initial_momentum: f64, total_steps: usize, twin: &VisualTwinParams) -> Self {
        let layer_map = twin.names().into_iter().map(|n| (n.clone(), n)).collect();
        Self {
            initial_momentum,
            total_steps,
            layer_map,
        }
    }

    pub fn validate(&self, av: &ModelParams, twin: &VisualTwinParams) -> Result<()> {
        if !(0.0..=1.0).contains(&self.initial_momentum) {
            return Err(Error::Config(format!(
                "initial momentum {} not in [0, 1]",
                self.initial_momentum
            )));
        }
        let shapes = |p: &dyn Parameters| {
            let mut out = HashMap::new();
            p.visit(&mut |name, shape, _| {
                out.insert(name.to_string(), shape);
            });
            out
        };
        let av_shapes = shapes(av);
        let twin_shapes = shapes(twin);
        for (from, to) in &self.layer_map {
            match (twin_shapes.get(from), av_shapes.get(to)) {
                (Some(a), Some(b)) if a == b => {}
                (Some(a), Some(b)) => {
                    return Err(Error::Contract(format!(
                        "layer map {from} -> {to}: shape {a:?} vs {b:?}"
                    )))
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "layer map {from} -> {to}: unknown tensor"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// `m(step) = 1 - (1 - m̂) (1 + cos(π step / total)) / 2`, rising from `m̂` to 1.
pub fn cosine_momentum(step: usize, state: &DistillState) -> Result<f64> {
    if step > state.total_steps {
        return Err(Error::Contract(format!(
            "momentum step {step} beyond horizon {}",
            state.total_steps
        )));
    }
    if state.total_steps == 0 {
        return Ok(state.initial_momentum);
    }
    let phase = PI * step as f64 / state.total_steps as f64;
    Ok(1.0 - (1.0 - state.initial_momentum) * (1.0 + phase.cos()) / 2.0)
}

/// `θ_av ← m θ_av + (1 - m) θ_twin` on every mapped tensor; the rest of `av` is untouched.
pub fn ema_infuse(
    av: &mut ModelParams,
    twin: &VisualTwinParams,
    m: f64,
    state: &DistillState,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("momentum {m} not in [0, 1]")));
    }
    let mut sources: HashMap<&str, Vec<f64>> = HashMap::new();
    let wanted: HashMap<&str, &str> = state
        .layer_map
        .iter()
        .map(|(from, to)| (to.as_str(), from.as_str()))
        .collect();
    let mut twin_tensors = HashMap::new();
    twin.visit(&mut |name, _, values| {
        twin_tensors.insert(name.to_string(), values.to_vec());
    });
    for (to, from) in &wanted {
        let values = twin_tensors
            .get(*from)
            .ok_or_else(|| Error::Contract(format!("twin has no tensor {from}")))?;
        sources.insert(to, values.clone());
    }
    if m == 1.0 {
        return Ok(());
    }
    let mut mismatch = None;
    av.visit_mut(&mut |name, values| {
        if let Some(src) = sources.get(name) {
            if src.len() != values.len() {
                mismatch = Some(name.to_string());
                return;
            }
            for (a, t) in values.iter_mut().zip(src) {
                *a = m * *a + (1.0 - m) * t;
            }
        }
    });
    match mismatch {
        Some(name) => Err(Error::Contract(format!("shape mismatch infusing {name}"))),
        None => Ok(()),
    }
}
