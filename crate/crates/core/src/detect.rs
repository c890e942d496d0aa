//! Three-phase detector: zone gating, dense window scan inside retained
//! zones, then suppression and cross-zone merging.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::Network;
use crate::data::bbox::{iou, BoundingBox};
use crate::data::grid::{edge_adjacent, grid_partition, GRID_SIZE};
use crate::data::image::{crops_to_tensor, RgbImage, CROP_SIZE};
use crate::error::{Error, Result};

/// Scores rectangular regions of a frame with a positive-class probability.
pub trait CropScorer: Send + Sync {
    fn name(&self) -> String;

    /// One probability in `[0, 1]` per rect, in input order.
    fn score(&self, image: &RgbImage, rects: &[BoundingBox]) -> Result<Vec<f64>>;
}

/// Rects are cropped, resized to the network input and scored in batches.
impl CropScorer for Network<f32> {
    fn name(&self) -> String {
        self.spec().name.clone()
    }

    fn score(&self, image: &RgbImage, rects: &[BoundingBox]) -> Result<Vec<f64>> {
        const BATCH: usize = 64;
        let mut out = Vec::with_capacity(rects.len());
        for chunk in rects.chunks(BATCH) {
            let crops: Vec<Vec<u8>> = chunk
                .par_iter()
                .map(|r| image.crop_resize(r, CROP_SIZE))
                .collect::<Result<_>>()?;
            let refs: Vec<&[u8]> = crops.iter().map(Vec::as_slice).collect();
            let logits = self.forward(&crops_to_tensor::<f32>(&refs, CROP_SIZE)?)?;
            out.extend(logits.data().chunks(2).map(|l| positive_probability(l[0] as f64, l[1] as f64)));
        }
        Ok(out)
    }
}

/// Two-class softmax probability of class 1, evaluated in `f64`.
pub fn positive_probability(l0: f64, l1: f64) -> f64 {
    1.0 / (1.0 + (l0 - l1).exp())
}

/// Scores a rect by the largest fraction of it covered by one of `targets`.
/// A geometric stand-in for a trained classifier in fixtures.
#[derive(Clone, Debug)]
pub struct CoverageScorer {
    pub targets: Vec<BoundingBox>,
}

impl CropScorer for CoverageScorer {
    fn name(&self) -> String {
        "coverage".into()
    }

    fn score(&self, _image: &RgbImage, rects: &[BoundingBox]) -> Result<Vec<f64>> {
        Ok(rects
            .iter()
            .map(|r| {
                self.targets
                    .iter()
                    .filter_map(|t| r.intersection(t))
                    .map(|i| i.area() as f64 / r.area() as f64)
                    .fold(0.0, f64::max)
            })
            .collect())
    }
}

/// Scores every rect with the same value.
#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f64);

impl CropScorer for ConstantScorer {
    fn name(&self) -> String {
        format!("constant {}", self.0)
    }

    fn score(&self, _image: &RgbImage, rects: &[BoundingBox]) -> Result<Vec<f64>> {
        Ok(vec![self.0; rects.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Zone gate threshold on the zone classifier's positive probability.
    pub tau_z: f64,
    /// Detection threshold on the pedestrian classifier's positive probability.
    pub tau_p: f64,
    pub window: u32,
    pub stride: u32,
    pub nms_iou: f64,
    pub merge_window: u32,
    pub merge_iou: f64,
    pub grid: usize,
    /// Additional window sizes scanned alongside `window`.
    pub extra_windows: Vec<u32>,
    /// Skips the cross-zone merge phase.
    pub skip_merge: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau_z: 0.5,
            tau_p: 0.5,
            window: 16,
            stride: 5,
            nms_iou: 0.5,
            merge_window: 32,
            merge_iou: 0.2,
            grid: GRID_SIZE,
            extra_windows: Vec::new(),
            skip_merge: false,
        }
    }
}

impl PipelineConfig {
    /// Thresholds may sit outside `(0, 1)` to force the gate fully open or shut.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("tau_z", self.tau_z), ("tau_p", self.tau_p)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} = {v} must be a finite non-negative threshold"));
            }
        }
        for (name, v) in [("nms_iou", self.nms_iou), ("merge_iou", self.merge_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1]"));
            }
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.window == 0 || self.merge_window == 0 || self.extra_windows.contains(&0) {
            return bad("window sizes must be positive".into());
        }
        if self.grid == 0 {
            return bad("grid must have at least one cell per side".into());
        }
        Ok(())
    }

    pub fn window_sizes(&self) -> Vec<u32> {
        let mut v = vec![self.window];
        v.extend(self.extra_windows.iter().copied().filter(|w| *w != self.window));
        v
    }
}

/// A retained grid cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PotentialZone {
    pub index: usize,
    pub row: usize,
    pub col: usize,
    pub rect: BoundingBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Zone indices that contributed to this box.
    pub zones: Vec<usize>,
    pub merged: bool,
}

impl Detection {
    pub fn score(&self) -> f64 {
        self.bbox.score.unwrap_or(0.0)
    }
}

/// Start offsets of a `window`-wide scan over `extent` at `stride`, with a
/// final position flush against the far edge. An extent smaller than the
/// window yields the single offset 0.
pub fn window_offsets(extent: u32, window: u32, stride: u32) -> Vec<u32> {
    if extent <= window {
        return vec![0];
    }
    let last = extent - window;
    let mut v: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if *v.last().expect("non-empty") != last {
        v.push(last);
    }
    v
}

/// Closed form of the number of [`window_offsets`] along one axis.
pub fn window_count_1d(extent: u32, window: u32, stride: u32) -> u64 {
    if extent <= window {
        1
    } else {
        ((extent - window).div_ceil(stride) + 1) as u64
    }
}

/// Number of window positions [`find`] visits in a `w × h` zone.
pub fn window_count(w: u32, h: u32, window: u32, stride: u32) -> u64 {
    window_count_1d(w, window, stride) * window_count_1d(h, window, stride)
}

/// Window rects covering `zone`; a dimension shorter than the window is
/// covered by the zone's own extent.
pub fn window_positions(zone: &BoundingBox, window: u32, stride: u32) -> Vec<BoundingBox> {
    let (zw, zh) = (zone.w as u32, zone.h as u32);
    let (ww, wh) = (window.min(zw), window.min(zh));
    let xs = window_offsets(zw, window, stride);
    let ys = window_offsets(zh, window, stride);
    let mut v = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            v.push(BoundingBox::new(zone.x + x as i32, zone.y + y as i32, ww as i32, wh as i32));
        }
    }
    v
}

/// Scores all grid cells and keeps those at or above `tau_z`.
/// Returns the retained zones and every cell's score.
pub fn seek(image: &RgbImage, cz: &dyn CropScorer, cfg: &PipelineConfig) -> Result<(Vec<PotentialZone>, Vec<f64>)> {
    let cells = grid_partition(image.width(), image.height(), cfg.grid)?;
    let scores = cz.score(image, &cells)?;
    let zones = cells
        .iter()
        .zip(&scores)
        .enumerate()
        .filter(|(_, (_, &s))| s >= cfg.tau_z)
        .map(|(i, (c, &s))| PotentialZone {
            index: i,
            row: i / cfg.grid,
            col: i % cfg.grid,
            rect: *c,
            confidence: s,
        })
        .collect();
    Ok((zones, scores))
}

/// Dense window scan of one zone. Returns candidates at or above `tau_p`
/// and the number of windows scored.
pub fn find(
    zone: &PotentialZone,
    image: &RgbImage,
    cp: &dyn CropScorer,
    cfg: &PipelineConfig,
) -> Result<(Vec<Detection>, u64)> {
    let rects: Vec<BoundingBox> = cfg
        .window_sizes()
        .into_iter()
        .flat_map(|w| window_positions(&zone.rect, w, cfg.stride))
        .collect();
    let scores = cp.score(image, &rects)?;
    let dets = rects
        .iter()
        .zip(scores)
        .filter(|(_, s)| *s >= cfg.tau_p)
        .map(|(r, s)| Detection {
            bbox: r.with_score(s),
            zones: vec![zone.index],
            merged: false,
        })
        .collect();
    Ok((dets, rects.len() as u64))
}

/// Processing order: score descending, then x, then y ascending.
fn rank(a: &BoundingBox, b: &BoundingBox) -> std::cmp::Ordering {
    let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
    sb.total_cmp(&sa).then(a.x.cmp(&b.x)).then(a.y.cmp(&b.y)).then(a.w.cmp(&b.w)).then(a.h.cmp(&b.h))
}

/// Greedy suppression: visit boxes best first and drop any box whose IoU
/// with an already kept box is at least `threshold`.
pub fn nms(boxes: &[BoundingBox], threshold: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| rank(&boxes[i], &boxes[j]));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou(k, &boxes[i]) < threshold) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// [`nms`] over detections, keeping their zone bookkeeping.
pub fn nms_detections(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    let mut dets = dets;
    dets.sort_by(|a, b| rank(&a.bbox, &b.bbox));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Boundary windows for one edge-adjacent zone pair: `size`-square windows
/// centred on the shared edge, slid along it at `stride`, kept in the frame.
pub fn boundary_windows(a: &BoundingBox, b: &BoundingBox, size: u32, stride: u32, fw: u32, fh: u32) -> Vec<BoundingBox> {
    let s = size as i32;
    let half = s / 2;
    let clamp_x = |x: i32| x.clamp(0, (fw as i32 - s).max(0));
    let clamp_y = |y: i32| y.clamp(0, (fh as i32 - s).max(0));
    let mut out: Vec<BoundingBox> = Vec::new();
    let horizontal_pair = a.y == b.y;
    let (edge, lo, hi) = if horizontal_pair {
        (a.x.max(b.x), a.y.max(b.y), a.bottom().min(b.bottom()))
    } else {
        (a.y.max(b.y), a.x.max(b.x), a.right().min(b.right()))
    };
    let mut c = lo;
    loop {
        let c_here = c.min(hi);
        let w = if horizontal_pair {
            BoundingBox::new(clamp_x(edge - half), clamp_y(c_here - half), s, s)
        } else {
            BoundingBox::new(clamp_x(c_here - half), clamp_y(edge - half), s, s)
        };
        if out.last() != Some(&w) {
            out.push(w);
        }
        if c_here >= hi {
            break;
        }
        c += stride as i32;
    }
    out
}

/// Unions detection pairs that sit on either side of a zone boundary when
/// a positive boundary window overlaps both. Returns the updated set and
/// the number of boundary windows scored.
pub fn merge_cross_zone(
    zones: &[PotentialZone],
    detections: Vec<Detection>,
    image: &RgbImage,
    cp: &dyn CropScorer,
    cfg: &PipelineConfig,
) -> Result<(Vec<Detection>, u64)> {
    let mut dets = detections;
    let mut calls = 0;
    for (ai, za) in zones.iter().enumerate() {
        for zb in &zones[ai + 1..] {
            if !edge_adjacent(za.index, zb.index, cfg.grid) {
                continue;
            }
            let on = |d: &Detection, z: usize| d.zones.contains(&z);
            if !dets.iter().any(|d| on(d, za.index)) || !dets.iter().any(|d| on(d, zb.index)) {
                continue;
            }
            let windows = boundary_windows(
                &za.rect,
                &zb.rect,
                cfg.merge_window,
                cfg.stride,
                image.width(),
                image.height(),
            );
            let scores = cp.score(image, &windows)?;
            calls += windows.len() as u64;
            for (w, s) in windows.iter().zip(scores) {
                if s < cfg.tau_p {
                    continue;
                }
                let best = |z: usize| {
                    dets.iter()
                        .enumerate()
                        .filter(|(_, d)| on(d, z))
                        .map(|(i, d)| (i, iou(w, &d.bbox)))
                        .filter(|&(_, v)| v >= cfg.merge_iou)
                        .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
                        .map(|(i, _)| i)
                };
                let (Some(i), Some(j)) = (best(za.index), best(zb.index)) else {
                    continue;
                };
                if i == j {
                    continue;
                }
                let (lo, hi) = (i.min(j), i.max(j));
                let b = dets.remove(hi);
                let a = dets.remove(lo);
                let mut zones_u: Vec<usize> = a.zones.iter().chain(&b.zones).copied().collect();
                zones_u.sort_unstable();
                zones_u.dedup();
                dets.insert(
                    lo,
                    Detection {
                        bbox: a.bbox.union(&b.bbox),
                        zones: zones_u,
                        merged: true,
                    },
                );
            }
        }
    }
    Ok((dets, calls))
}

/// Counters and timings for one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub seek_ms: f64,
    pub find_ms: f64,
    pub nms_merge_ms: f64,
    pub zones_evaluated: usize,
    pub zones_kept: usize,
    /// Pedestrian classifier windows scored in retained zones.
    pub cp_calls: u64,
    /// Windows the scan would score with every cell retained.
    pub cp_calls_dense: u64,
    pub merge_calls: u64,
    pub boxes_raw: usize,
    pub boxes_zone_nms: usize,
    pub boxes_merged: usize,
    pub boxes_final: usize,
}

impl PipelineTrace {
    pub fn total_ms(&self) -> f64 {
        self.seek_ms + self.find_ms + self.nms_merge_ms
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetections {
    pub zones: Vec<PotentialZone>,
    pub zone_scores: Vec<f64>,
    pub detections: Vec<Detection>,
    pub trace: PipelineTrace,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Seek, find per zone, per-zone NMS, cross-zone merge, global NMS.
pub fn detect(image: &RgbImage, cz: &dyn CropScorer, cp: &dyn CropScorer, cfg: &PipelineConfig) -> Result<FrameDetections> {
    cfg.validate()?;
    let mut trace = PipelineTrace::default();
    let t = Instant::now();
    let (zones, zone_scores) = seek(image, cz, cfg)?;
    trace.seek_ms = ms(t);
    trace.zones_evaluated = zone_scores.len();
    trace.zones_kept = zones.len();
    let cells = grid_partition(image.width(), image.height(), cfg.grid)?;
    trace.cp_calls_dense = cells
        .iter()
        .map(|c| cfg.window_sizes().iter().map(|&w| window_count(c.w as u32, c.h as u32, w, cfg.stride)).sum::<u64>())
        .sum();

    let t = Instant::now();
    let per_zone: Vec<(Vec<Detection>, u64)> = zones.par_iter().map(|z| find(z, image, cp, cfg)).collect::<Result<_>>()?;
    trace.find_ms = ms(t);

    let t = Instant::now();
    let mut after_zone = Vec::new();
    for (dets, calls) in per_zone {
        trace.cp_calls += calls;
        trace.boxes_raw += dets.len();
        after_zone.extend(nms_detections(dets, cfg.nms_iou));
    }
    trace.boxes_zone_nms = after_zone.len();
    let merged = if cfg.skip_merge {
        after_zone
    } else {
        let (m, calls) = merge_cross_zone(&zones, after_zone, image, cp, cfg)?;
        trace.merge_calls = calls;
        m
    };
    trace.boxes_merged = merged.len();
    let detections = nms_detections(merged, cfg.nms_iou);
    trace.boxes_final = detections.len();
    trace.nms_merge_ms = ms(t);
    Ok(FrameDetections {
        zones,
        zone_scores,
        detections,
        trace,
    })
}

/// One line of the detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub detections: Vec<BoundingBox>,
    pub trace: TraceRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seek_ms: f64,
    pub find_ms: f64,
    pub nms_merge_ms: f64,
    pub zones_kept: usize,
    pub cp_calls: u64,
    pub cp_calls_dense: u64,
}

impl DetectionRecord {
    /// With `timings == false` the millisecond fields are zeroed so the line
    /// is reproducible byte for byte.
    pub fn new(image: &str, out: &FrameDetections, timings: bool) -> Self {
        let t = &out.trace;
        let keep = |v: f64| if timings { v } else { 0.0 };
        DetectionRecord {
            image: image.to_string(),
            detections: out.detections.iter().map(|d| d.bbox).collect(),
            trace: TraceRecord {
                seek_ms: keep(t.seek_ms),
                find_ms: keep(t.find_ms),
                nms_merge_ms: keep(t.nms_merge_ms),
                zones_kept: t.zones_kept,
                cp_calls: t.cp_calls,
                cp_calls_dense: t.cp_calls_dense,
            },
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
