//! Frame-level average precision, video accuracy and score/embedding export.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::features::{snippet_frame_range, snippet_of_frame, VideoRecord};
use crate::network::{count_parameters, forward_av, ModelParams, NetworkConfig};
use crate::{Error, Result, FRAMES_PER_SNIPPET};

/// Frame `f` takes the score of snippet `min(f / 16, T - 1)`.
pub fn snippet_to_frame_scores(snippet_scores: &[f64], num_frames: usize) -> Result<Vec<f64>> {
    let t = snippet_scores.len();
    if t == 0 || num_frames < FRAMES_PER_SNIPPET * (t - 1) + 1 {
        return Err(Error::Contract(format!(
            "{num_frames} frames cannot cover {t} snippets"
        )));
    }
    Ok((0..num_frames)
        .map(|f| snippet_scores[snippet_of_frame(f, t)])
        .collect())
}

/// Step-interpolated AP over descending unique thresholds; tied scores enter together.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive label".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            tp += usize::from(labels[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Fraction of videos with `(p > 0.5) == (y == 1)`.
pub fn video_accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > 0.5) == (y == 1))
        .count();
    hits as f64 / scores.len() as f64
}

#[derive(Debug, Clone)]
pub struct ScoreTrack {
    pub id: String,
    pub label: u8,
    pub video_score: f64,
    pub snippet_scores: Vec<f64>,
    pub frame_scores: Vec<f64>,
    pub frame_labels: Option<Vec<u8>>,
    pub h_a: Array2<f64>,
    pub h_v: Array2<f64>,
}

impl ScoreTrack {
    pub fn num_frames(&self) -> usize {
        self.frame_scores.len()
    }

    /// Snippet ground truth: positive iff any covered frame is positive.
    pub fn snippet_labels(&self) -> Option<Vec<u8>> {
        let frames = self.frame_labels.as_ref()?;
        let t = self.snippet_scores.len();
        let mut out = vec![0u8; t];
        for (f, &l) in frames.iter().enumerate() {
            if l == 1 {
                out[snippet_of_frame(f, t)] = 1;
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Dataset-level AP over concatenated frames; `None` when any video lacks
    /// frame ground truth or no frame is positive.
    pub frame_ap: Option<f64>,
    pub video_accuracy: f64,
    pub parameter_count: usize,
    pub embedding_dim: usize,
    pub tracks: Vec<ScoreTrack>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VideoSummary {
    pub id: String,
    pub label: u8,
    pub score: f64,
    pub frame_ap: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub frame_ap: Option<f64>,
    pub video_accuracy: f64,
    pub parameter_count: usize,
    pub videos: Vec<VideoSummary>,
}

impl EvalReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            frame_ap: self.frame_ap,
            video_accuracy: self.video_accuracy,
            parameter_count: self.parameter_count,
            videos: self
                .tracks
                .iter()
                .map(|t| VideoSummary {
                    id: t.id.clone(),
                    label: t.label,
                    score: t.video_score,
                    frame_ap: t
                        .frame_labels
                        .as_ref()
                        .and_then(|l| average_precision(&t.frame_scores, l).ok()),
                })
                .collect(),
        }
    }
}

/// Runs the AV network with dropout off on every record. Never touches twin parameters.
pub fn evaluate(params: &ModelParams, net: &NetworkConfig, records: &[VideoRecord]) -> Result<EvalReport> {
    let mut tracks = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let (b, _) = forward_av(&r.audio.to_f64(), &r.visual.to_f64(), params, net, None)?;
        let snippet_scores = b.snippet_scores.to_vec();
        let frame_scores = snippet_to_frame_scores(&snippet_scores, r.num_frames)?;
        tracks.push(ScoreTrack {
            id: r.id.clone(),
            label: r.label,
            video_score: b.p,
            snippet_scores,
            frame_scores,
            frame_labels: r.frame_labels(),
            h_a: b.h_a,
            h_v: b.h_v,
        });
    }
    let frame_ap = if tracks.iter().all(|t| t.frame_labels.is_some()) {
        let scores: Vec<f64> = tracks.iter().flat_map(|t| t.frame_scores.iter().copied()).collect();
        let labels: Vec<u8> = tracks
            .iter()
            .flat_map(|t| t.frame_labels.as_ref().unwrap().iter().copied())
            .collect();
        match average_precision(&scores, &labels) {
            Ok(ap) => Some(ap),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let ps: Vec<f64> = tracks.iter().map(|t| t.video_score).collect();
    let ys: Vec<u8> = tracks.iter().map(|t| t.label).collect();
    Ok(EvalReport {
        frame_ap,
        video_accuracy: video_accuracy(&ps, &ys),
        parameter_count: count_parameters(params),
        embedding_dim: net.d_model,
        tracks,
    })
}

pub const SCORES_HEADER: [&str; 6] = [
    "video_id",
    "snippet_index",
    "score",
    "frame_start",
    "frame_end",
    "gt_label",
];

/// One parsed row of a scores CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video_id: String,
    pub snippet_index: usize,
    pub score: f64,
    pub frame_start: usize,
    pub frame_end: usize,
    pub gt_label: Option<u8>,
}

pub fn score_rows(report: &EvalReport) -> Vec<ScoreRow> {
    let mut rows = Vec::new();
    for t in &report.tracks {
        let labels = t.snippet_labels();
        let n = t.snippet_scores.len();
        for (i, &score) in t.snippet_scores.iter().enumerate() {
            let [frame_start, frame_end] = snippet_frame_range(i, n, t.num_frames());
            rows.push(ScoreRow {
                video_id: t.id.clone(),
                snippet_index: i,
                score,
                frame_start,
                frame_end,
                gt_label: labels.as_ref().map(|l| l[i]),
            });
        }
    }
    rows
}

pub fn export_scores(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(SCORES_HEADER)?;
    for r in score_rows(report) {
        w.serialize(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn export_embeddings(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["video_id".to_string(), "snippet_index".into(), "modality".into()];
    header.extend((0..report.embedding_dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for t in &report.tracks {
        for (modality, h) in [("audio", &t.h_a), ("visual", &t.h_v)] {
            for (i, row) in h.rows().into_iter().enumerate() {
                let mut rec = vec![t.id.clone(), i.to_string(), modality.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One panel per video: the snippet-score polyline over shaded ground-truth snippets.
pub fn render_score_svg(rows: &[ScoreRow]) -> String {
    const WIDTH: f64 = 800.0;
    const PANEL: f64 = 90.0;
    const PLOT: f64 = 60.0;
    const MARGIN: f64 = 10.0;

    let mut videos: Vec<(&str, Vec<&ScoreRow>)> = Vec::new();
    for r in rows {
        match videos.last_mut() {
            Some((id, v)) if *id == r.video_id => v.push(r),
            _ => videos.push((&r.video_id, vec![r])),
        }
    }
    let height = PANEL * videos.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, (id, snippets)) in videos.iter().enumerate() {
        let top = k as f64 * PANEL + 20.0;
        let n = snippets.len().max(1) as f64;
        let step = (WIDTH - 2.0 * MARGIN) / n;
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{}" font-family="monospace" font-size="11">{}</text>"#,
            top - 6.0,
            escape(id)
        );
        for (i, s) in snippets.iter().enumerate() {
            if s.gt_label == Some(1) {
                let _ = writeln!(
                    svg,
                    r##"<rect x="{:.2}" y="{top:.2}" width="{step:.2}" height="{PLOT}" fill="#f4b6b6"/>"##,
                    MARGIN + i as f64 * step
                );
            }
        }
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{top:.2}" width="{:.2}" height="{PLOT}" fill="none" stroke="#999"/>"##,
            WIDTH - 2.0 * MARGIN
        );
        let points: Vec<String> = snippets
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let x = MARGIN + (i as f64 + 0.5) * step;
                let y = top + PLOT * (1.0 - s.score.clamp(0.0, 1.0));
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>"##,
            points.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSequence;
    use crate::network::{init_params, Parameters};
    use proptest::prelude::*;

    /// Brute force: for every distinct threshold, precision/recall of `score >= threshold`.
    fn sweep_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for th in thresholds {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
            let tp = sel.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let r = tp / pos;
            let p = tp / sel.len() as f64;
            ap += (r - prev_r) * p;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn frame_expansion() {
        assert_eq!(snippet_to_frame_scores(&[0.3], 16).unwrap(), vec![0.3; 16]);
        let f = snippet_to_frame_scores(&[0.2, 0.8], 40).unwrap();
        assert!(f[..16].iter().all(|&s| s == 0.2));
        assert!(f[16..].iter().all(|&s| s == 0.8));
        assert_eq!(f.len(), 40);
        assert!(snippet_to_frame_scores(&[0.2, 0.8, 0.1], 32).is_err());
        assert!(snippet_to_frame_scores(&[0.7; 5], 70).unwrap().iter().all(|&s| s == 0.7));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let ap = average_precision(&[0.5; 8], &[1, 0, 0, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(ap, 0.25);
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-15);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn accuracy_example() {
        assert_eq!(video_accuracy(&[0.9, 0.1], &[1, 0]), 1.0);
        assert_eq!(video_accuracy(&[0.5, 0.1], &[1, 0]), 0.5);
    }

    proptest! {
        #[test]
        fn ap_matches_threshold_sweep(
            data in prop::collection::vec((0u8..6, 0u8..2), 1..64)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let mut labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            labels[0] = 1;
            let got = average_precision(&scores, &labels).unwrap();
            prop_assert!((got - sweep_oracle(&scores, &labels)).abs() <= 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn ap_is_rank_invariant(
            data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..64)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| (*s * 64.0).round() / 64.0).collect();
            let mut labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            labels[0] = 1;
            let warped: Vec<f64> = scores.iter().map(|s| crate::network::sigmoid(2.0 * s - 0.3)).collect();
            let a = average_precision(&scores, &labels).unwrap();
            let b = average_precision(&warped, &labels).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    fn tiny_records() -> (NetworkConfig, Vec<VideoRecord>) {
        let net = NetworkConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            dropout: 0.1,
            d_audio: 3,
            d_visual: 4,
        };
        let rec = |id: &str, t: usize, label: u8, ivs: Vec<[usize; 2]>| VideoRecord {
            id: id.to_string(),
            audio: FeatureSequence::new(Array2::from_shape_fn((t, 3), |(i, j)| (i + j) as f32 * 0.1)).unwrap(),
            visual: FeatureSequence::new(Array2::from_shape_fn((t, 4), |(i, j)| (i * j) as f32 * 0.2)).unwrap(),
            label,
            num_frames: 16 * t,
            violent_intervals: Some(ivs),
        };
        (net, vec![rec("a", 2, 1, vec![[0, 15]]), rec("b", 3, 0, vec![])])
    }

    #[test]
    fn zero_head_model_scores_prevalence() {
        let (net, records) = tiny_records();
        let mut params = init_params(&net, 0);
        params.head_a = crate::network::Linear::zeros(8, 1);
        params.head_v = crate::network::Linear::zeros(8, 1);
        let report = evaluate(&params, &net, &records).unwrap();
        assert!(report.tracks.iter().all(|t| t.frame_scores.iter().all(|&s| s == 0.5)));
        assert_eq!(report.frame_ap, Some(16.0 / 80.0));
        assert_eq!(report.parameter_count, params.count());
    }

    #[test]
    fn evaluate_is_pure_and_idempotent() {
        let (net, records) = tiny_records();
        let params = init_params(&net, 5);
        let before = params.clone();
        let a = evaluate(&params, &net, &records).unwrap();
        let b = evaluate(&params, &net, &records).unwrap();
        assert_eq!(params, before);
        assert_eq!(a.frame_ap, b.frame_ap);
        assert_eq!(a.tracks[1].frame_scores, b.tracks[1].frame_scores);
    }

    #[test]
    fn missing_ground_truth_skips_ap() {
        let (net, mut records) = tiny_records();
        records[1].violent_intervals = None;
        let report = evaluate(&init_params(&net, 0), &net, &records).unwrap();
        assert_eq!(report.frame_ap, None);
    }

    #[test]
    fn exports() {
        let dir = tempfile::tempdir().unwrap();
        let (net, records) = tiny_records();
        let report = evaluate(&init_params(&net, 2), &net, &records[..1]).unwrap();
        let scores = dir.path().join("scores.csv");
        let emb = dir.path().join("emb.csv");
        export_scores(&report, &scores).unwrap();
        export_embeddings(&report, &emb).unwrap();

        let rows = read_scores(&scores).unwrap();
        assert_eq!(rows.len(), 2);
        for (row, &s) in rows.iter().zip(&report.tracks[0].snippet_scores) {
            assert_eq!(row.score, s);
        }
        assert_eq!(rows[0].gt_label, Some(1));
        assert_eq!(rows[1].gt_label, Some(0));
        assert_eq!((rows[1].frame_start, rows[1].frame_end), (16, 31));

        let text = std::fs::read_to_string(&emb).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0].split(',').count(), 3 + 8);

        let svg = render_score_svg(&rows);
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("#f4b6b6"));
    }

    #[test]
    fn empty_report_exports_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let (net, _) = tiny_records();
        let report = evaluate(&init_params(&net, 2), &net, &[]).unwrap();
        export_scores(&report, dir.path().join("s.csv")).unwrap();
        export_embeddings(&report, dir.path().join("e.csv")).unwrap();
        let s = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(s.lines().count(), 1);
        let e = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert_eq!(e.lines().count(), 1);
    }
}
