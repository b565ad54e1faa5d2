//! Modality-aware contrastive instance learning.
//!
//! Per mini-batch, each video predicted violent (`p > 0.5`) contributes a violent
//! semi-bag per modality: the embeddings of its top-K unimodal logits, averaged
//! into one representation. Videos predicted normal contribute their top-K
//! instances to a normal pool, and every video contributes its bottom-K instances
//! to a background pool. The audio and visual representations of the same violent
//! video form the positive pair; opposite-modality normal or background instances
//! are the negatives.
//!
//! The module only needs per-snippet embeddings, unimodal logits and a video
//! score, so any backbone implementing [`InstanceSource`] can use it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::network::{bottom_k_indices, top_k_indices, LogitsBundle};
use crate::{kmax_k, Error, Result};

/// Norm offset used by [`NormGuard::Epsilon`].
pub const NORM_EPS: f64 = 1e-8;

/// Videos with a score strictly above this are treated as violent.
pub const VIOLENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Audio, Modality::Visual];

    pub fn opposite(self) -> Self {
        match self {
            Modality::Audio => Modality::Visual,
            Modality::Visual => Modality::Audio,
        }
    }

    fn index(self) -> usize {
        match self {
            Modality::Audio => 0,
            Modality::Visual => 1,
        }
    }
}

/// What the contrastive objective needs from a backbone, per video.
pub trait InstanceSource {
    fn embeddings(&self, m: Modality) -> ArrayView2<'_, f64>;
    fn logits(&self, m: Modality) -> ArrayView1<'_, f64>;
    fn video_score(&self) -> f64;
}

impl InstanceSource for LogitsBundle {
    fn embeddings(&self, m: Modality) -> ArrayView2<'_, f64> {
        match m {
            Modality::Audio => self.h_a.view(),
            Modality::Visual => self.h_v.view(),
        }
    }

    fn logits(&self, m: Modality) -> ArrayView1<'_, f64> {
        match m {
            Modality::Audio => self.l_a.view(),
            Modality::Visual => self.l_v.view(),
        }
    }

    fn video_score(&self) -> f64 {
        self.p
    }
}

/// One snippet of one video in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceRef {
    pub video: usize,
    pub snippet: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolentBag {
    pub video: usize,
    pub indices: Vec<usize>,
    /// Mean of the embeddings at `indices`.
    pub representation: Array1<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModalityBags {
    pub violent: Vec<ViolentBag>,
    pub normal_pool: Vec<InstanceRef>,
    pub background_pool: Vec<InstanceRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiBagAssignment {
    pub audio: ModalityBags,
    pub visual: ModalityBags,
    /// Batch indices of videos with `p > 0.5`, in batch order.
    pub violent_videos: Vec<usize>,
}

impl SemiBagAssignment {
    pub fn bags(&self, m: Modality) -> &ModalityBags {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    /// Number of violent semi-bags per modality, the loss normalizer.
    pub fn violent_count(&self) -> usize {
        self.violent_videos.len()
    }
}

fn sorted_logits(logits: ArrayView1<'_, f64>) -> Vec<f64> {
    logits.iter().copied().collect()
}

/// Splits a batch into violent semi-bags, a normal pool and a background pool per
/// modality. Every selection uses the MIL `K = floor(T/16) + 1` of its video and
/// ranks by that modality's logits, lower snippet index first on ties.
pub fn build_semi_bags<S: InstanceSource>(batch: &[S]) -> Result<SemiBagAssignment> {
    if batch.is_empty() {
        return Err(Error::Contract("semi-bags need a non-empty batch".to_string()));
    }
    let mut per_modality = [ModalityBags::default(), ModalityBags::default()];
    let mut violent_videos = Vec::new();
    for (video, item) in batch.iter().enumerate() {
        let violent = item.video_score() > VIOLENCE_THRESHOLD;
        if violent {
            violent_videos.push(video);
        }
        for m in Modality::BOTH {
            let logits = sorted_logits(item.logits(m));
            let emb = item.embeddings(m);
            if emb.nrows() != logits.len() || logits.is_empty() {
                return Err(Error::Contract(format!(
                    "video {video}: {} embeddings for {} logits",
                    emb.nrows(),
                    logits.len()
                )));
            }
            let k = kmax_k(logits.len());
            let bags = &mut per_modality[m.index()];
            let top = top_k_indices(&logits, k);
            if violent {
                let mut representation = Array1::zeros(emb.ncols());
                for &i in &top {
                    representation += &emb.row(i);
                }
                representation /= top.len() as f64;
                bags.violent.push(ViolentBag {
                    video,
                    indices: top,
                    representation,
                });
            } else {
                bags.normal_pool
                    .extend(top.into_iter().map(|snippet| InstanceRef { video, snippet }));
            }
            bags.background_pool.extend(
                bottom_k_indices(&logits, k)
                    .into_iter()
                    .map(|snippet| InstanceRef { video, snippet }),
            );
        }
    }
    let [audio, visual] = per_modality;
    Ok(SemiBagAssignment {
        audio,
        visual,
        violent_videos,
    })
}

/// Zero-norm handling in cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGuard {
    /// Zero-norm vectors are a [`Error::Degenerate`] error.
    Strict,
    /// Norms are offset by [`NORM_EPS`].
    Epsilon,
}

impl NormGuard {
    fn norm(self, v: ArrayView1<'_, f64>, what: &str) -> Result<(f64, f64)> {
        let n = v.dot(&v).sqrt();
        match self {
            NormGuard::Strict if n == 0.0 => {
                Err(Error::Degenerate(format!("{what} has zero norm")))
            }
            NormGuard::Strict => Ok((n, n)),
            NormGuard::Epsilon => Ok((n, n + NORM_EPS)),
        }
    }
}

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, guard: NormGuard) -> Result<f64> {
    let (_, na) = guard.norm(a, "first vector")?;
    let (_, nb) = guard.norm(b, "second vector")?;
    Ok(a.dot(&b) / (na * nb))
}

/// Similarity plus its gradients with respect to both arguments.
fn cosine_with_grad(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    guard: NormGuard,
) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let (ra, na) = guard.norm(a, "anchor")?;
    let (rb, nb) = guard.norm(b, "comparand")?;
    let dot = a.dot(&b);
    let phi = dot / (na * nb);
    // d|a|/da = a/|a|, taken as 0 at a = 0
    let unit = |v: ArrayView1<'_, f64>, r: f64| {
        if r == 0.0 {
            Array1::zeros(v.len())
        } else {
            v.to_owned() / r
        }
    };
    let da = &b / (na * nb) - unit(a, ra) * (phi / na);
    let db = &a / (na * nb) - unit(b, rb) * (phi / nb);
    Ok((phi, da, db))
}

/// `-log softmax_0(z)` for logits `z = [positive, negatives...]`, evaluated as
/// `log(1 + sum exp(z_n - z_0))` without overflow.
fn nce_from_logits(pos: f64, negs: &[f64]) -> f64 {
    if negs.is_empty() {
        return 0.0;
    }
    let shift = negs.iter().fold(0.0f64, |m, &z| m.max(z - pos));
    if shift == 0.0 {
        negs.iter().map(|&z| (z - pos).exp()).sum::<f64>().ln_1p()
    } else {
        shift + ((-shift).exp() + negs.iter().map(|&z| (z - pos - shift).exp()).sum::<f64>()).ln()
    }
}

/// InfoNCE with cosine similarity at temperature `tau`:
/// `-log( e^{φ(a,p)/τ} / (e^{φ(a,p)/τ} + Σ_n e^{φ(a,n)/τ}) )`.
pub fn infonce(
    anchor: ArrayView1<'_, f64>,
    positive: ArrayView1<'_, f64>,
    negatives: &[ArrayView1<'_, f64>],
    tau: f64,
    guard: NormGuard,
) -> Result<f64> {
    let pos = cosine_similarity(anchor, positive, guard)? / tau;
    let negs = negatives
        .iter()
        .map(|n| Ok(cosine_similarity(anchor, *n, guard)? / tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(nce_from_logits(pos, &negs))
}

#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_anchor: Array1<f64>,
    pub d_positive: Array1<f64>,
    pub d_negatives: Vec<Array1<f64>>,
}

pub fn infonce_with_grad(
    anchor: ArrayView1<'_, f64>,
    positive: ArrayView1<'_, f64>,
    negatives: &[ArrayView1<'_, f64>],
    tau: f64,
    guard: NormGuard,
) -> Result<InfoNceGrad> {
    let dim = anchor.len();
    if negatives.is_empty() {
        guard.norm(anchor, "anchor")?;
        guard.norm(positive, "positive")?;
        return Ok(InfoNceGrad {
            loss: 0.0,
            d_anchor: Array1::zeros(dim),
            d_positive: Array1::zeros(dim),
            d_negatives: Vec::new(),
        });
    }
    let (phi_p, da_p, dp) = cosine_with_grad(anchor, positive, guard)?;
    let mut neg_terms = Vec::with_capacity(negatives.len());
    for n in negatives {
        neg_terms.push(cosine_with_grad(anchor, *n, guard)?);
    }
    let z0 = phi_p / tau;
    let zs: Vec<f64> = neg_terms.iter().map(|(phi, _, _)| phi / tau).collect();
    let loss = nce_from_logits(z0, &zs);
    // softmax weights of the negatives; the positive gets 1 - sum(w)
    let w: Vec<f64> = zs.iter().map(|&z| (z - z0 - loss).exp()).collect();
    let w_pos = (-loss).exp();
    let mut d_anchor = da_p * ((w_pos - 1.0) / tau);
    let d_positive = dp * ((w_pos - 1.0) / tau);
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for ((_, da_n, dn), &wn) in neg_terms.into_iter().zip(&w) {
        d_anchor.scaled_add(wn / tau, &da_n);
        d_negatives.push(dn * (wn / tau));
    }
    Ok(InfoNceGrad {
        loss,
        d_anchor,
        d_positive,
        d_negatives,
    })
}

/// Linear loss ramp and temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampSchedule {
    /// Weight growth per epoch.
    pub growth: f64,
    pub max_v2n: f64,
    pub max_v2b: f64,
    pub temperature: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self {
            growth: 0.1,
            max_v2n: 1.5,
            max_v2b: 1.5,
            temperature: 0.1,
        }
    }
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.growth > 0.0) {
            return Err(Error::Config(format!("ramp growth {} must be > 0", self.growth)));
        }
        if !(self.max_v2n >= 0.0 && self.max_v2b >= 0.0) {
            return Err(Error::Config("ramp maxima must be >= 0".to_string()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }

    /// `min(r * t, cap)` at 0-based epoch `t`.
    pub fn ramp(&self, epoch: usize, cap: f64) -> f64 {
        (self.growth * epoch as f64).min(cap)
    }

    pub fn lambda_v2n(&self, epoch: usize) -> f64 {
        self.ramp(epoch, self.max_v2n)
    }

    pub fn lambda_v2b(&self, epoch: usize) -> f64 {
        self.ramp(epoch, self.max_v2b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MacilLoss {
    /// Violent-to-normal loss, summed over anchors and divided by the violent count.
    pub v2n: f64,
    /// Violent-to-background loss, same normalization.
    pub v2b: f64,
    pub lambda_v2n: f64,
    pub lambda_v2b: f64,
    /// `lambda_v2n * v2n + lambda_v2b * v2b`.
    pub total: f64,
}

/// Gradients of the weighted total with respect to every embedding of the batch,
/// indexed `[video][modality]` (audio first).
pub type EmbeddingGrads = Vec<[Array2<f64>; 2]>;

fn pool_views<'a, S: InstanceSource>(
    batch: &'a [S],
    pool: &[InstanceRef],
    m: Modality,
) -> Vec<ArrayView1<'a, f64>> {
    pool.iter()
        .map(|r| batch[r.video].embeddings(m).index_axis_move(ndarray::Axis(0), r.snippet))
        .collect::<Vec<_>>()
}

fn macil_impl<S: InstanceSource>(
    assign: &SemiBagAssignment,
    batch: &[S],
    sched: &RampSchedule,
    epoch: usize,
    guard: NormGuard,
    mut grads: Option<&mut EmbeddingGrads>,
) -> Result<MacilLoss> {
    let lambda_v2n = sched.lambda_v2n(epoch);
    let lambda_v2b = sched.lambda_v2b(epoch);
    let k_vio = assign.violent_count();
    if k_vio == 0 {
        return Ok(MacilLoss {
            lambda_v2n,
            lambda_v2b,
            ..MacilLoss::default()
        });
    }
    let tau = sched.temperature;
    let norm = 1.0 / k_vio as f64;
    let mut sums = [0.0f64; 2];
    for anchor_m in Modality::BOTH {
        let other = anchor_m.opposite();
        let anchors = &assign.bags(anchor_m).violent;
        let positives = &assign.bags(other).violent;
        let other_bags = assign.bags(other);
        let pools = [&other_bags.normal_pool, &other_bags.background_pool];
        for (term, pool) in pools.into_iter().enumerate() {
            let negs = pool_views(batch, pool, other);
            let weight = norm * if term == 0 { lambda_v2n } else { lambda_v2b };
            for (a, p) in anchors.iter().zip(positives) {
                debug_assert_eq!(a.video, p.video);
                let Some(grads) = grads.as_deref_mut() else {
                    sums[term] += infonce(
                        a.representation.view(),
                        p.representation.view(),
                        &negs,
                        tau,
                        guard,
                    )?;
                    continue;
                };
                let g = infonce_with_grad(
                    a.representation.view(),
                    p.representation.view(),
                    &negs,
                    tau,
                    guard,
                )?;
                sums[term] += g.loss;
                if weight == 0.0 {
                    continue;
                }
                // representation = mean of its instances
                let ka = a.indices.len() as f64;
                for &i in &a.indices {
                    grads[a.video][anchor_m.index()]
                        .row_mut(i)
                        .scaled_add(weight / ka, &g.d_anchor);
                }
                let kp = p.indices.len() as f64;
                for &i in &p.indices {
                    grads[p.video][other.index()]
                        .row_mut(i)
                        .scaled_add(weight / kp, &g.d_positive);
                }
                for (r, dn) in pool.iter().zip(&g.d_negatives) {
                    grads[r.video][other.index()]
                        .row_mut(r.snippet)
                        .scaled_add(weight, dn);
                }
            }
        }
    }
    let v2n = sums[0] * norm;
    let v2b = sums[1] * norm;
    Ok(MacilLoss {
        v2n,
        v2b,
        lambda_v2n,
        lambda_v2b,
        total: lambda_v2n * v2n + lambda_v2b * v2b,
    })
}

/// Violent-to-normal and violent-to-background InfoNCE over both anchor modalities,
/// normalized by the number of violent semi-bags and weighted by the ramp at `epoch`.
/// All outputs are zero when the batch has no violent video.
pub fn macil_loss<S: InstanceSource>(
    assign: &SemiBagAssignment,
    batch: &[S],
    sched: &RampSchedule,
    epoch: usize,
    guard: NormGuard,
) -> Result<MacilLoss> {
    macil_impl(assign, batch, sched, epoch, guard, None)
}

/// [`macil_loss`] plus the gradient of its weighted total with respect to every embedding.
pub fn macil_loss_with_grad<S: InstanceSource>(
    assign: &SemiBagAssignment,
    batch: &[S],
    sched: &RampSchedule,
    epoch: usize,
    guard: NormGuard,
) -> Result<(MacilLoss, EmbeddingGrads)> {
    let mut grads: EmbeddingGrads = batch
        .iter()
        .map(|s| Modality::BOTH.map(|m| Array2::zeros(s.embeddings(m).dim())))
        .collect();
    let loss = macil_impl(assign, batch, sched, epoch, guard, Some(&mut grads))?;
    Ok((loss, grads))
}
