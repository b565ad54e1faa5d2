//! Synthetic audio-visual datasets with controllable modality asynchrony.
//!
//! Each modality has three fixed prototypes (background, violent, normal event).
//! A snippet row is its prototype plus isotropic Gaussian noise. A violent event
//! places a visual cue interval and an audio cue interval shifted by a sampled
//! offset; frame ground truth is the union of both cues.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::features::{write_records, FeatureSequence, Split, VideoRecord};
use crate::{Error, Result, FRAMES_PER_SNIPPET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub violent_fraction: f64,
    /// Snippets per video.
    pub snippets: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    /// Inclusive range of violent events per violent video.
    pub events_per_violent_video: [usize; 2],
    /// Inclusive range of normal (non-violent) events per normal video.
    pub events_per_normal_video: [usize; 2],
    /// Inclusive range of event lengths in snippets.
    pub event_len_snippets: [usize; 2],
    /// Inclusive range of the signed audio-minus-visual onset offset, in snippets.
    pub asynchrony_offset: [i64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 250,
            violent_fraction: 0.5,
            snippets: 32,
            d_audio: 16,
            d_visual: 32,
            events_per_violent_video: [1, 2],
            events_per_normal_video: [1, 2],
            event_len_snippets: [2, 6],
            asynchrony_offset: [0, 4],
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.n_videos == 0 {
            return err("n_videos", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.violent_fraction) {
            return err("violent_fraction", format!("{} not in [0, 1]", self.violent_fraction));
        }
        if self.snippets == 0 {
            return err("snippets", "must be >= 1".into());
        }
        if self.d_audio == 0 || self.d_visual == 0 {
            return err("d_audio/d_visual", "feature dims must be >= 1".into());
        }
        for (key, [lo, hi]) in [
            ("events_per_violent_video", self.events_per_violent_video),
            ("events_per_normal_video", self.events_per_normal_video),
            ("event_len_snippets", self.event_len_snippets),
        ] {
            if lo > hi {
                return err(key, format!("empty range [{lo}, {hi}]"));
            }
        }
        if self.events_per_violent_video[0] == 0 {
            return err("events_per_violent_video", "violent videos need >= 1 event".into());
        }
        let [len_lo, len_hi] = self.event_len_snippets;
        if len_lo == 0 {
            return err("event_len_snippets", "events need >= 1 snippet".into());
        }
        if len_hi > self.snippets {
            return err(
                "event_len_snippets",
                format!("event of {len_hi} snippets does not fit in T={}", self.snippets),
            );
        }
        if self.asynchrony_offset[0] > self.asynchrony_offset[1] {
            return err(
                "asynchrony_offset",
                format!("empty range {:?}", self.asynchrony_offset),
            );
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma", format!("{} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        FRAMES_PER_SNIPPET * self.snippets
    }
}

/// One event's cue intervals, inclusive snippet indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub visual: [usize; 2],
    pub audio: [usize; 2],
}

impl Event {
    /// Visual interval starting at `start` of length `len`; audio is the same interval
    /// shifted by `offset` and clipped to `[0, t - 1]`.
    pub fn place(start: usize, len: usize, offset: i64, t: usize) -> Self {
        let end = start + len - 1;
        let shift = |s: usize| (s as i64 + offset).clamp(0, t as i64 - 1) as usize;
        Self {
            visual: [start, end],
            audio: [shift(start), shift(end)],
        }
    }

    pub fn covers(&self, snippet: usize) -> bool {
        (self.visual[0]..=self.visual[1]).contains(&snippet)
            || (self.audio[0]..=self.audio[1]).contains(&snippet)
    }
}

/// Violent events of one video.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub events: Vec<Event>,
}

impl EventTimeline {
    /// Snippet-level union of every event's visual and audio cues.
    pub fn snippet_labels(&self, t: usize) -> Vec<u8> {
        (0..t)
            .map(|s| u8::from(self.events.iter().any(|e| e.covers(s))))
            .collect()
    }
}

/// Frame `f` is positive iff its covering snippet lies in some event's visual or audio cue.
pub fn timeline_to_frame_labels(timeline: &EventTimeline, t: usize, num_frames: usize) -> Vec<u8> {
    let snippets = timeline.snippet_labels(t);
    (0..num_frames)
        .map(|f| snippets[crate::features::snippet_of_frame(f, t)])
        .collect()
}

/// Maximal runs of positive frames as inclusive intervals.
pub fn frame_runs(labels: &[u8]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut start = None;
    for (f, &l) in labels.iter().enumerate() {
        match (l, start) {
            (1, None) => start = Some(f),
            (0, Some(s)) => {
                runs.push([s, f - 1]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push([s, labels.len() - 1]);
    }
    runs
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub record: VideoRecord,
    pub split: Split,
    pub timeline: EventTimeline,
    /// Non-violent event cues (normal videos only).
    pub normal_events: Vec<Event>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub videos: Vec<SynthVideo>,
}

impl SynthDataset {
    pub fn records(&self, split: Split) -> Vec<VideoRecord> {
        self.videos
            .iter()
            .filter(|v| v.split == split)
            .map(|v| v.record.clone())
            .collect()
    }

    /// Writes `features/`, `train.jsonl` and `test.jsonl` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&self.records(Split::Train), dir, dir.join("train.jsonl"))?;
        write_records(&self.records(Split::Test), dir, dir.join("test.jsonl"))?;
        Ok(())
    }
}

/// Every fifth video (index ≡ 4 mod 5) is held out for testing.
pub fn split_of_index(index: usize) -> Split {
    if index % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

struct Prototypes {
    background: Array1<f64>,
    violent: Array1<f64>,
    normal: Array1<f64>,
}

impl Prototypes {
    fn draw(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let mut draw = || Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut *rng));
        Self {
            background: draw(),
            violent: draw(),
            normal: draw(),
        }
    }
}

fn sample_events(rng: &mut ChaCha8Rng, cfg: &SynthConfig, count: [usize; 2]) -> Vec<Event> {
    let n = rng.random_range(count[0]..=count[1]);
    (0..n)
        .map(|_| {
            let len = rng.random_range(cfg.event_len_snippets[0]..=cfg.event_len_snippets[1]);
            let start = rng.random_range(0..=cfg.snippets - len);
            let offset = rng.random_range(cfg.asynchrony_offset[0]..=cfg.asynchrony_offset[1]);
            Event::place(start, len, offset, cfg.snippets)
        })
        .collect()
}

fn render(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    protos: &Prototypes,
    violent: &[[usize; 2]],
    normal: &[[usize; 2]],
) -> Array2<f64> {
    let dim = protos.background.len();
    let inside = |ivs: &[[usize; 2]], s: usize| ivs.iter().any(|iv| (iv[0]..=iv[1]).contains(&s));
    let mut out = Array2::zeros((cfg.snippets, dim));
    for (s, mut row) in out.rows_mut().into_iter().enumerate() {
        let proto = if inside(violent, s) {
            &protos.violent
        } else if inside(normal, s) {
            &protos.normal
        } else {
            &protos.background
        };
        for (x, p) in row.iter_mut().zip(proto) {
            let noise: f64 = StandardNormal.sample(&mut *rng);
            *x = p + cfg.noise_sigma * noise;
        }
    }
    out
}

/// Deterministic in `cfg` (including `cfg.seed`); each video draws from its own ChaCha stream.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let audio_protos = Prototypes::draw(&mut master, cfg.d_audio);
    let visual_protos = Prototypes::draw(&mut master, cfg.d_visual);

    let n_violent = (cfg.n_videos as f64 * cfg.violent_fraction).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_videos).collect();
    order.shuffle(&mut master);
    let mut is_violent = vec![false; cfg.n_videos];
    for &i in &order[..n_violent] {
        is_violent[i] = true;
    }

    let num_frames = cfg.num_frames();
    let mut videos = Vec::with_capacity(cfg.n_videos);
    for (index, &violent) in is_violent.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64 + 1);
        let (timeline, normal_events) = if violent {
            let events = sample_events(&mut rng, cfg, cfg.events_per_violent_video);
            (EventTimeline { events }, Vec::new())
        } else {
            let normal = sample_events(&mut rng, cfg, cfg.events_per_normal_video);
            (EventTimeline::default(), normal)
        };
        let cues = |events: &[Event], audio: bool| -> Vec<[usize; 2]> {
            events
                .iter()
                .map(|e| if audio { e.audio } else { e.visual })
                .collect()
        };
        let visual = render(
            &mut rng,
            cfg,
            &visual_protos,
            &cues(&timeline.events, false),
            &cues(&normal_events, false),
        );
        let audio = render(
            &mut rng,
            cfg,
            &audio_protos,
            &cues(&timeline.events, true),
            &cues(&normal_events, true),
        );
        let frame_labels = timeline_to_frame_labels(&timeline, cfg.snippets, num_frames);
        let record = VideoRecord {
            id: format!("synth_{index:05}"),
            audio: FeatureSequence::from_f64(&audio)?,
            visual: FeatureSequence::from_f64(&visual)?,
            label: u8::from(violent),
            num_frames,
            violent_intervals: Some(frame_runs(&frame_labels)),
        };
        debug_assert!(record.validate().is_ok());
        videos.push(SynthVideo {
            record,
            split: split_of_index(index),
            timeline,
            normal_events,
        });
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        videos,
    })
}
