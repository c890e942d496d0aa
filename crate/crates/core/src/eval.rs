//! Matching, miss rate, stage recall, stride sweeps and timing.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::bbox::{iou, BoundingBox};
use crate::data::frame::FrameSource;
use crate::data::grid::grid_partition;
use crate::detect::{detect, CropScorer, DetectionRecord, FrameDetections, PipelineConfig, PipelineTrace};
use crate::error::{Error, Result};

/// Reference figures reported for the original hardware and corpus.
/// Recorded for comparison only, never asserted.
pub mod reference {
    pub const MISS_RATE: f64 = 18.11;
    pub const PHASE1_RECALL: f64 = 93.04;
    pub const FINAL_RECALL: f64 = 88.01;
    pub const SEEK_MS: f64 = 7.2;
    pub const FIND_MS: f64 = 40.7;
    pub const TOTAL_MS: f64 = 52.0;
}

/// Default minimum IoU for a hit.
pub const HIT_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatchedPair {
    pub frame: usize,
    pub detection: BoundingBox,
    pub ground_truth: BoundingBox,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: usize,
    pub ground_truth: usize,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub miss_rate: f64,
    pub recall: f64,
    pub fppi: f64,
    pub matches: Vec<MatchedPair>,
}

impl EvalReport {
    /// Single-row CSV with a header.
    pub fn to_csv(&self) -> String {
        format!(
            "frames,ground_truth,tp,fn,fp,miss_rate,recall,fppi\n{},{},{},{},{},{:.4},{:.4},{:.4}\n",
            self.frames,
            self.ground_truth,
            self.true_positives,
            self.false_negatives,
            self.false_positives,
            self.miss_rate,
            self.recall,
            self.fppi
        )
    }
}

/// Greedy matching of one frame: detections in descending score order
/// (ties by x, then y) each claim the unmatched ground-truth box of highest
/// IoU, provided it reaches `iou_min`. Returns `(gt index, det index, iou)`.
pub fn match_frame(detections: &[BoundingBox], ground_truth: &[BoundingBox], iou_min: f64) -> Vec<(usize, usize, f64)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .unwrap_or(0.0)
            .total_cmp(&da.score.unwrap_or(0.0))
            .then(da.x.cmp(&db.x))
            .then(da.y.cmp(&db.y))
            .then(da.w.cmp(&db.w))
            .then(da.h.cmp(&db.h))
    });
    let mut taken = vec![false; ground_truth.len()];
    let mut pairs = Vec::new();
    for d in order {
        let best = ground_truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, b)| (g, iou(&detections[d], b)))
            .filter(|&(_, v)| v >= iou_min)
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        if let Some((g, v)) = best {
            taken[g] = true;
            pairs.push((g, d, v));
        }
    }
    pairs
}

/// Miss rate, recall and false positives per frame over `(detections,
/// ground truth)` pairs.
pub fn match_and_score(frames: &[(Vec<BoundingBox>, Vec<BoundingBox>)], iou_min: f64) -> EvalReport {
    let mut r = EvalReport {
        frames: frames.len(),
        ..EvalReport::default()
    };
    for (fi, (dets, gts)) in frames.iter().enumerate() {
        let pairs = match_frame(dets, gts, iou_min);
        r.ground_truth += gts.len();
        r.true_positives += pairs.len();
        r.false_positives += dets.len() - pairs.len();
        r.matches.extend(pairs.iter().map(|&(g, d, v)| MatchedPair {
            frame: fi,
            detection: dets[d],
            ground_truth: gts[g],
            iou: v,
        }));
    }
    r.false_negatives = r.ground_truth - r.true_positives;
    if r.ground_truth > 0 {
        r.recall = 100.0 * r.true_positives as f64 / r.ground_truth as f64;
        r.miss_rate = 100.0 * r.false_negatives as f64 / r.ground_truth as f64;
    }
    r.fppi = r.false_positives as f64 / r.frames.max(1) as f64;
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageRecall {
    /// Ground truth whose every touched cell was retained.
    pub phase1_strict: f64,
    /// Ground truth with at least one touched cell retained.
    pub phase1_relaxed: f64,
    /// Ground truth matched by a final detection.
    pub final_recall: f64,
}

/// Per-frame input to [`stage_recall`].
pub struct StageFrame<'a> {
    pub width: u32,
    pub height: u32,
    pub retained: &'a [usize],
    pub detections: &'a [BoundingBox],
    pub ground_truth: &'a [BoundingBox],
}

pub fn stage_recall(frames: &[StageFrame<'_>], grid: usize, iou_min: f64) -> Result<StageRecall> {
    let (mut total, mut strict, mut relaxed, mut hits) = (0usize, 0usize, 0usize, 0usize);
    for f in frames {
        let cells = grid_partition(f.width, f.height, grid)?;
        for g in f.ground_truth {
            let touched: Vec<usize> = (0..cells.len()).filter(|&c| cells[c].intersects(g)).collect();
            total += 1;
            strict += touched.iter().all(|c| f.retained.contains(c)) as usize;
            relaxed += touched.iter().any(|c| f.retained.contains(c)) as usize;
        }
        hits += match_frame(f.detections, f.ground_truth, iou_min).len();
    }
    let pct = |n: usize| if total == 0 { 0.0 } else { 100.0 * n as f64 / total as f64 };
    Ok(StageRecall {
        phase1_strict: pct(strict),
        phase1_relaxed: pct(relaxed),
        final_recall: pct(hits),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TimingBreakdown {
    pub frames: usize,
    pub seek_ms: f64,
    pub find_ms: f64,
    pub nms_merge_ms: f64,
    pub total_ms: f64,
    pub find_to_seek: f64,
    pub cp_calls: f64,
    pub cp_calls_dense: f64,
    /// Mean gated scan windows over mean dense windows.
    pub gating_ratio: f64,
}

pub fn timing_breakdown(traces: &[PipelineTrace]) -> TimingBreakdown {
    let n = traces.len().max(1) as f64;
    let mean = |f: &dyn Fn(&PipelineTrace) -> f64| traces.iter().map(f).sum::<f64>() / n;
    let seek = mean(&|t| t.seek_ms);
    let find = mean(&|t| t.find_ms);
    let nm = mean(&|t| t.nms_merge_ms);
    let cp = mean(&|t| t.cp_calls as f64);
    let dense = mean(&|t| t.cp_calls_dense as f64);
    TimingBreakdown {
        frames: traces.len(),
        seek_ms: seek,
        find_ms: find,
        nms_merge_ms: nm,
        total_ms: mean(&|t| t.total_ms()),
        find_to_seek: if seek > 0.0 { find / seek } else { 0.0 },
        cp_calls: cp,
        cp_calls_dense: dense,
        gating_ratio: if dense > 0.0 { cp / dense } else { 0.0 },
    }
}

/// Detector output for a whole source.
pub struct EvalRun {
    pub report: EvalReport,
    pub stages: StageRecall,
    pub timing: TimingBreakdown,
    pub outputs: Vec<FrameDetections>,
    pub records: Vec<DetectionRecord>,
    pub ground_truth: Vec<Vec<BoundingBox>>,
    pub sizes: Vec<(u32, u32)>,
}

/// Runs [`detect`] on every frame in index order and scores the result.
pub fn evaluate(source: &dyn FrameSource, cz: &dyn CropScorer, cp: &dyn CropScorer, cfg: &PipelineConfig) -> Result<EvalRun> {
    if source.is_empty() {
        return Err(Error::Data("evaluation needs at least one frame".into()));
    }
    let mut outputs = Vec::with_capacity(source.len());
    let mut records = Vec::with_capacity(source.len());
    let mut ground_truth = Vec::with_capacity(source.len());
    let mut sizes = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let f = source.frame(i)?;
        let out = detect(&f.image, cz, cp, cfg)?;
        records.push(DetectionRecord::new(&f.id, &out, true));
        outputs.push(out);
        ground_truth.push(f.boxes);
        sizes.push((f.image.width(), f.image.height()));
    }
    let pairs: Vec<(Vec<BoundingBox>, Vec<BoundingBox>)> = outputs
        .iter()
        .zip(&ground_truth)
        .map(|(o, g)| (o.detections.iter().map(|d| d.bbox).collect(), g.clone()))
        .collect();
    let report = match_and_score(&pairs, HIT_IOU);
    let retained: Vec<Vec<usize>> = outputs.iter().map(|o| o.zones.iter().map(|z| z.index).collect()).collect();
    let stage_frames: Vec<StageFrame<'_>> = (0..outputs.len())
        .map(|i| StageFrame {
            width: sizes[i].0,
            height: sizes[i].1,
            retained: &retained[i],
            detections: &pairs[i].0,
            ground_truth: &ground_truth[i],
        })
        .collect();
    let stages = stage_recall(&stage_frames, cfg.grid, HIT_IOU)?;
    let traces: Vec<PipelineTrace> = outputs.iter().map(|o| o.trace.clone()).collect();
    Ok(EvalRun {
        report,
        stages,
        timing: timing_breakdown(&traces),
        outputs,
        records,
        ground_truth,
        sizes,
    })
}

/// Recall within one height band of the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandRecall {
    pub band: String,
    pub min_height: i32,
    pub max_height: i32,
    pub ground_truth: usize,
    pub hits: usize,
    pub recall: f64,
}

/// Splits ground truth into height terciles (far = shortest third) and
/// reports recall per band.
pub fn recall_by_height_terciles(frames: &[(Vec<BoundingBox>, Vec<BoundingBox>)], iou_min: f64) -> Vec<BandRecall> {
    let mut items: Vec<(i32, bool)> = Vec::new();
    for (dets, gts) in frames {
        let hit: Vec<usize> = match_frame(dets, gts, iou_min).into_iter().map(|(g, _, _)| g).collect();
        items.extend(gts.iter().enumerate().map(|(i, g)| (g.h, hit.contains(&i))));
    }
    items.sort_by_key(|t| t.0);
    let n = items.len();
    ["far", "medium", "near"]
        .iter()
        .enumerate()
        .filter_map(|(k, name)| {
            let band = &items[k * n / 3..(k + 1) * n / 3];
            let (first, last) = (band.first()?, band.last()?);
            let hits = band.iter().filter(|t| t.1).count();
            Some(BandRecall {
                band: name.to_string(),
                min_height: first.0,
                max_height: last.0,
                ground_truth: band.len(),
                hits,
                recall: 100.0 * hits as f64 / band.len() as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub stride: u32,
    pub miss_rate: f64,
    pub windows_per_frame: f64,
    pub ms_per_frame: f64,
    pub fps: f64,
    /// Min-max normalized to [0, 1] across the sweep.
    pub miss_rate_norm: f64,
    pub fps_norm: f64,
}

/// Runs the detector at each stride. Wall time per frame is the fastest
/// of `reps` repetitions to suppress scheduling noise.
pub fn stride_sweep(
    source: &dyn FrameSource,
    cz: &dyn CropScorer,
    cp: &dyn CropScorer,
    base: &PipelineConfig,
    strides: &[u32],
    reps: usize,
) -> Result<Vec<SweepPoint>> {
    if strides.is_empty() {
        return Err(Error::Config("stride sweep needs at least one stride".into()));
    }
    let frames: Vec<_> = (0..source.len()).map(|i| source.frame(i)).collect::<Result<_>>()?;
    let mut points = Vec::new();
    for &stride in strides {
        let cfg = PipelineConfig {
            stride,
            ..base.clone()
        };
        let mut pairs = Vec::new();
        let mut windows = 0u64;
        let mut ms = 0.0;
        for f in &frames {
            let mut best = f64::INFINITY;
            let mut last = None;
            for _ in 0..reps.max(1) {
                let t = std::time::Instant::now();
                let out = detect(&f.image, cz, cp, &cfg)?;
                best = best.min(t.elapsed().as_secs_f64() * 1e3);
                last = Some(out);
            }
            let out = last.expect("at least one repetition");
            windows += out.trace.cp_calls;
            ms += best;
            pairs.push((out.detections.iter().map(|d| d.bbox).collect(), f.boxes.clone()));
        }
        let n = frames.len().max(1) as f64;
        let report = match_and_score(&pairs, HIT_IOU);
        let ms_per_frame = ms / n;
        points.push(SweepPoint {
            stride,
            miss_rate: report.miss_rate,
            windows_per_frame: windows as f64 / n,
            ms_per_frame,
            fps: if ms_per_frame > 0.0 { 1e3 / ms_per_frame } else { 0.0 },
            miss_rate_norm: 0.0,
            fps_norm: 0.0,
        });
    }
    normalize(&mut points);
    Ok(points)
}

fn normalize(points: &mut [SweepPoint]) {
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let range = |f: &dyn Fn(&SweepPoint) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (mlo, mhi) = range(&|p| p.miss_rate);
    let (flo, fhi) = range(&|p| p.fps);
    for p in points.iter_mut() {
        p.miss_rate_norm = scale(p.miss_rate, mlo, mhi);
        p.fps_norm = scale(p.fps, flo, fhi);
    }
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("stride,miss_rate,windows_per_frame,ms_per_frame,fps,miss_rate_norm,fps_norm\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{:.4},{:.2},{:.3},{:.4},{:.4},{:.4}",
            p.stride, p.miss_rate, p.windows_per_frame, p.ms_per_frame, p.fps, p.miss_rate_norm, p.fps_norm
        );
    }
    s
}

/// Line chart of the normalized miss rate and FPS against stride.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let smin = points.iter().map(|p| p.stride).min().unwrap_or(0) as f64;
    let smax = points.iter().map(|p| p.stride).max().unwrap_or(1) as f64;
    let x = |s: u32| pad + (s as f64 - smin) / (smax - smin).max(1.0) * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let line = |f: &dyn Fn(&SweepPoint) -> f64| {
        points.iter().map(|p| format!("{:.1},{:.1}", x(p.stride), y(f(p)))).collect::<Vec<_>>().join(" ")
    };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<path d=\"M{pad},{pad} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        h - pad,
        w - pad
    );
    let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"#c0392b\" fill=\"none\" stroke-width=\"2\"/>", line(&|p| p.miss_rate_norm));
    let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"#2471a3\" fill=\"none\" stroke-width=\"2\"/>", line(&|p| p.fps_norm));
    for p in points {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>", x(p.stride), h - pad + 16.0, p.stride);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">stride</text>", w / 2.0, h - 6.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" font-size=\"12\" fill=\"#c0392b\">MR (normalized)</text>", pad);
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" font-size=\"12\" fill=\"#2471a3\">FPS (normalized)</text>", w / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman: length mismatch");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
