//! Joint training of the audio-visual network and its visual twin.
//!
//! Each step updates the AV network on MIL binary cross-entropy plus the ramped
//! contrastive terms, updates the twin on its own cross-entropy, then infuses the
//! twin's shape-shared tensors into the AV network with the current momentum.

mod checkpoint;
mod metrics;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{MetricsRow, METRICS_HEADER};

use crate::distill::{cosine_momentum, ema_infuse, DistillState};
use crate::features::VideoRecord;
use crate::macil::{build_semi_bags, macil_loss, macil_loss_with_grad, MacilLoss, NormGuard, RampSchedule};
use crate::network::{
    backward_av, backward_visual, forward_av, forward_visual, init_params, init_twin,
    kmax_pool_backward, LogitsBundle, ModelParams, NetworkConfig, Parameters, VisualTwinParams,
};
use crate::optim::{cosine_annealing, Adam};
use crate::{Error, Result};

/// Clamp applied to video scores inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfusionFrequency {
    PerStep,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_av: f64,
    pub lr_twin: f64,
    pub ramp: RampSchedule,
    pub initial_momentum: f64,
    pub infusion: InfusionFrequency,
    /// Enables the ramped contrastive terms.
    pub contrastive: bool,
    /// Enables twin training and EMA infusion.
    pub distill: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr_av: 4e-4,
            lr_twin: 8e-5,
            ramp: RampSchedule::default(),
            initial_momentum: 0.91,
            infusion: InfusionFrequency::PerStep,
            contrastive: true,
            distill: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if !(self.lr_av >= 0.0 && self.lr_twin >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.initial_momentum) {
            return Err(Error::Config(format!(
                "initial_momentum {} not in [0, 1]",
                self.initial_momentum
            )));
        }
        self.ramp.validate()
    }

    pub fn steps_per_epoch(&self, n_videos: usize) -> usize {
        n_videos.div_ceil(self.batch_size)
    }
}

/// Training-ready tensors of one video.
#[derive(Debug, Clone)]
pub struct TrainVideo {
    pub audio: Array2<f64>,
    pub visual: Array2<f64>,
    pub label: u8,
}

impl From<&VideoRecord> for TrainVideo {
    fn from(r: &VideoRecord) -> Self {
        Self {
            audio: r.audio.to_f64(),
            visual: r.visual.to_f64(),
            label: r.label,
        }
    }
}

/// `-[y log p + (1-y) log(1-p)]` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce_loss`] in `p`; zero where the clamp is active.
pub fn bce_grad(p: f64, y: u8) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    if y == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    /// Mean cross-entropy over the batch.
    pub bce: f64,
    pub macil: MacilLoss,
    /// Videos with `(p > 0.5) == y`.
    pub correct: usize,
    pub videos: usize,
}

impl LossComponents {
    /// `L_av`: weighted contrastive total plus mean BCE.
    pub fn total(&self) -> f64 {
        self.macil.total + self.bce
    }
}

fn correct(p: f64, y: u8) -> bool {
    (p > 0.5) == (y == 1)
}

/// The AV objective evaluated on already-computed bundles.
pub fn objective_from_bundles(
    bundles: &[LogitsBundle],
    labels: &[u8],
    sched: &RampSchedule,
    epoch: usize,
    contrastive: bool,
    guard: NormGuard,
) -> Result<LossComponents> {
    if bundles.is_empty() || bundles.len() != labels.len() {
        return Err(Error::Contract(format!(
            "objective needs a non-empty batch with one label per video ({} bundles, {} labels)",
            bundles.len(),
            labels.len()
        )));
    }
    let macil = if contrastive {
        let assign = build_semi_bags(bundles)?;
        macil_loss(&assign, bundles, sched, epoch, guard)?
    } else {
        MacilLoss::default()
    };
    let n = bundles.len();
    let bce = bundles
        .iter()
        .zip(labels)
        .map(|(b, &y)| bce_loss(b.p, y))
        .sum::<f64>()
        / n as f64;
    let correct = bundles
        .iter()
        .zip(labels)
        .filter(|(b, &y)| correct(b.p, y))
        .count();
    Ok(LossComponents {
        bce,
        macil,
        correct,
        videos: n,
    })
}

/// `L_av` for a batch with dropout off: returns the scalar and its components.
pub fn total_loss(
    params: &ModelParams,
    net: &NetworkConfig,
    batch: &[&TrainVideo],
    sched: &RampSchedule,
    epoch: usize,
    contrastive: bool,
) -> Result<(f64, LossComponents)> {
    let bundles = batch
        .iter()
        .map(|v| Ok(forward_av(&v.audio, &v.visual, params, net, None)?.0))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = batch.iter().map(|v| v.label).collect();
    let c = objective_from_bundles(&bundles, &labels, sched, epoch, contrastive, NormGuard::Epsilon)?;
    Ok((c.total(), c))
}

/// Twin loss: mean cross-entropy of its video scores, dropout off.
pub fn twin_loss(twin: &VisualTwinParams, net: &NetworkConfig, batch: &[&TrainVideo]) -> Result<f64> {
    let mut sum = 0.0;
    for v in batch {
        let (out, _) = forward_visual(&v.visual, twin, net, None)?;
        sum += bce_loss(out.p, v.label);
    }
    Ok(sum / batch.len() as f64)
}

/// Gradient of `L_av` with respect to every AV parameter. Dropout is on iff `rng` is given.
pub fn av_loss_and_grad(
    params: &ModelParams,
    net: &NetworkConfig,
    batch: &[&TrainVideo],
    sched: &RampSchedule,
    epoch: usize,
    contrastive: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossComponents, ModelParams)> {
    let mut bundles = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for v in batch {
        let (b, c) = forward_av(&v.audio, &v.visual, params, net, rng.as_deref_mut())?;
        bundles.push(b);
        caches.push(c);
    }
    let labels: Vec<u8> = batch.iter().map(|v| v.label).collect();
    let n = batch.len() as f64;
    let (macil, emb_grads) = if contrastive {
        let assign = build_semi_bags(&bundles)?;
        let (loss, grads) =
            macil_loss_with_grad(&assign, &bundles, sched, epoch, NormGuard::Epsilon)?;
        (loss, Some(grads))
    } else {
        (MacilLoss::default(), None)
    };

    let mut grad = params.zeros_like();
    let mut bce = 0.0;
    let mut n_correct = 0;
    for (i, ((b, c), &y)) in bundles.iter().zip(&caches).zip(&labels).enumerate() {
        bce += bce_loss(b.p, y);
        n_correct += usize::from(correct(b.p, y));
        let d_p = bce_grad(b.p, y) / n;
        let d_l = kmax_pool_backward(&b.snippet_scores, &b.top_k, d_p);
        let zeros;
        let (d_h_a, d_h_v) = match &emb_grads {
            Some(g) => (&g[i][0], &g[i][1]),
            None => {
                zeros = Array2::zeros(b.h_a.dim());
                (&zeros, &zeros)
            }
        };
        backward_av(params, &mut grad, net, c, b, d_h_a, d_h_v, &d_l);
    }
    Ok((
        LossComponents {
            bce: bce / n,
            macil,
            correct: n_correct,
            videos: batch.len(),
        },
        grad,
    ))
}

/// Gradient of the twin's mean cross-entropy. Dropout is on iff `rng` is given.
pub fn twin_loss_and_grad(
    twin: &VisualTwinParams,
    net: &NetworkConfig,
    batch: &[&TrainVideo],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, VisualTwinParams)> {
    let n = batch.len() as f64;
    let mut grad = twin.zeros_like();
    let mut loss = 0.0;
    for v in batch {
        let (out, cache) = forward_visual(&v.visual, twin, net, rng.as_deref_mut())?;
        loss += bce_loss(out.p, v.label);
        let d_p = bce_grad(out.p, v.label) / n;
        let d_l: Array1<f64> = kmax_pool_backward(&out.scores, &out.top_k, d_p);
        backward_visual(twin, &mut grad, net, &cache, &out, &d_l);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub global_step: usize,
    pub params: ModelParams,
    pub twin: VisualTwinParams,
    pub adam_av: Adam,
    pub adam_twin: Adam,
    pub history: Vec<MetricsRow>,
}

impl TrainState {
    pub fn init(net: &NetworkConfig, seed: u64) -> Self {
        let params = init_params(net, seed);
        let twin = init_twin(net, seed);
        let adam_av = Adam::new(params.count());
        let adam_twin = Adam::new(twin.count());
        Self {
            epoch: 0,
            global_step: 0,
            params,
            twin,
            adam_av,
            adam_twin,
            history: Vec::new(),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent RNG seeds.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-step outputs, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub av: LossComponents,
    pub twin_bce: f64,
    pub lr: f64,
    /// Momentum applied by this step's infusion, if any.
    pub momentum: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: NetworkConfig,
    pub state: TrainState,
    pub distill: DistillState,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, net: NetworkConfig, n_videos: usize) -> Result<Self> {
        let state = TrainState::init(&net, config.seed);
        Self::from_state(config, net, state, n_videos)
    }

    pub fn from_state(
        config: TrainConfig,
        net: NetworkConfig,
        state: TrainState,
        n_videos: usize,
    ) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        let steps_per_epoch = config.steps_per_epoch(n_videos);
        let horizon = match config.infusion {
            InfusionFrequency::PerStep => config.epochs * steps_per_epoch,
            InfusionFrequency::PerEpoch => config.epochs,
        };
        let distill = DistillState::new(config.initial_momentum, horizon, &state.twin);
        distill.validate(&state.params, &state.twin)?;
        Ok(Self {
            config,
            net,
            state,
            distill,
            steps_per_epoch,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn current_lr(&self) -> f64 {
        cosine_annealing(self.config.lr_av, self.state.epoch, self.config.epochs)
    }

    fn check_finite(&self, component: &'static str, value: f64) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                component,
                epoch: self.state.epoch,
                step: self.state.global_step,
            })
        }
    }

    /// Updates the AV network, then the twin, then infuses (when due) and advances the step counter.
    pub fn train_step(&mut self, batch: &[&TrainVideo]) -> Result<StepReport> {
        let cfg = &self.config;
        let epoch = self.state.epoch;
        let step = self.state.global_step as u64;
        let lr = self.current_lr();

        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step, 1));
        let (av, grad) = av_loss_and_grad(
            &self.state.params,
            &self.net,
            batch,
            &cfg.ramp,
            epoch,
            cfg.contrastive,
            Some(&mut rng),
        )?;
        self.check_finite("bce", av.bce)?;
        self.check_finite("contrastive v2n", av.macil.v2n)?;
        self.check_finite("contrastive v2b", av.macil.v2b)?;
        let mut flat = self.state.params.to_flat();
        self.state.adam_av.update(&mut flat, &grad.to_flat(), lr);

        let mut twin_bce = 0.0;
        let mut momentum = None;
        if cfg.distill {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step, 2));
            let (loss, tgrad) = twin_loss_and_grad(&self.state.twin, &self.net, batch, Some(&mut rng))?;
            self.check_finite("twin bce", loss)?;
            twin_bce = loss;
            let mut tflat = self.state.twin.to_flat();
            self.state.adam_twin.update(&mut tflat, &tgrad.to_flat(), cfg.lr_twin);
            self.state.twin.load_flat(&tflat);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "parameter update",
                epoch,
                step: self.state.global_step,
            });
        }
        self.state.params.load_flat(&flat);
        if cfg.distill && cfg.infusion == InfusionFrequency::PerStep {
            let m = cosine_momentum(self.state.global_step, &self.distill)?;
            ema_infuse(&mut self.state.params, &self.state.twin, m, &self.distill)?;
            momentum = Some(m);
        }
        self.state.global_step += 1;
        Ok(StepReport {
            av,
            twin_bce,
            lr,
            momentum,
        })
    }

    /// Runs one epoch over `videos` in a seeded shuffled order and returns its metrics row.
    pub fn run_epoch(&mut self, videos: &[TrainVideo]) -> Result<MetricsRow> {
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch as u64, 3)));

        let mut bce_sum = 0.0;
        let mut v2n_sum = 0.0;
        let mut v2b_sum = 0.0;
        let mut n_correct = 0;
        let mut batches = 0;
        let mut momentum = if self.config.distill { None } else { Some(1.0) };
        let lr = self.current_lr();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainVideo> = chunk.iter().map(|&i| &videos[i]).collect();
            let report = self.train_step(&batch)?;
            bce_sum += report.av.bce * chunk.len() as f64;
            v2n_sum += report.av.macil.lambda_v2n * report.av.macil.v2n;
            v2b_sum += report.av.macil.lambda_v2b * report.av.macil.v2b;
            n_correct += report.av.correct;
            batches += 1;
            if report.momentum.is_some() {
                momentum = report.momentum;
            }
        }
        if self.config.distill && self.config.infusion == InfusionFrequency::PerEpoch {
            let m = cosine_momentum(epoch, &self.distill)?;
            ema_infuse(&mut self.state.params, &self.state.twin, m, &self.distill)?;
            momentum = Some(m);
        }
        let batches_f = batches.max(1) as f64;
        let row = MetricsRow {
            epoch,
            bce: bce_sum / videos.len().max(1) as f64,
            ctl_v2n: v2n_sum / batches_f,
            ctl_v2b: v2b_sum / batches_f,
            lambda_v2n: self.config.ramp.lambda_v2n(epoch),
            lambda_v2b: self.config.ramp.lambda_v2b(epoch),
            acc: n_correct as f64 / videos.len().max(1) as f64,
            momentum: momentum.unwrap_or(self.config.initial_momentum),
            lr,
        };
        self.state.history.push(row.clone());
        self.state.epoch += 1;
        Ok(row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            net: self.net.clone(),
            state: self.state.clone(),
        }
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState,
    /// Metrics CSV contents, header included.
    pub metrics_csv: String,
}

/// Output locations of a training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.mck")
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Trains from scratch on `records`. With `out`, the metrics CSV and a checkpoint
/// are rewritten after every epoch, so a failed epoch leaves the last good ones.
pub fn fit(
    config: &TrainConfig,
    net: &NetworkConfig,
    records: &[VideoRecord],
    out: Option<&RunDir>,
) -> Result<FitOutcome> {
    let trainer = Trainer::new(config.clone(), net.clone(), records.len())?;
    resume(trainer, records, out)
}

/// Continues a trainer (fresh or restored from a checkpoint) up to its configured epochs.
pub fn resume(mut trainer: Trainer, records: &[VideoRecord], out: Option<&RunDir>) -> Result<FitOutcome> {
    if records.is_empty() && trainer.config.epochs > trainer.state.epoch {
        return Err(Error::Contract("training manifest is empty".to_string()));
    }
    let videos: Vec<TrainVideo> = records.iter().map(TrainVideo::from).collect();
    if let Some(out) = out {
        std::fs::create_dir_all(&out.root).map_err(|e| Error::io(&out.root, e))?;
        write_atomic(&out.metrics(), metrics::to_csv(&trainer.state.history).as_bytes())?;
    }
    while trainer.state.epoch < trainer.config.epochs {
        trainer.run_epoch(&videos)?;
        if let Some(out) = out {
            write_atomic(&out.checkpoint(), &checkpoint::encode(&trainer.checkpoint())?)?;
            write_atomic(&out.metrics(), metrics::to_csv(&trainer.state.history).as_bytes())?;
        }
    }
    let metrics_csv = metrics::to_csv(&trainer.state.history);
    Ok(FitOutcome {
        state: trainer.state,
        metrics_csv,
    })
}
