//! Labeled 64×64 crops for the zone and pedestrian classifiers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::bbox::{iou, max_iou, BoundingBox};
use crate::data::frame::FrameSource;
use crate::data::grid::{grid_partition, label_zones, GRID_SIZE};
use crate::data::image::CROP_SIZE;
use crate::error::{Error, Result};

/// Largest IoU a negative pedestrian crop may have with any ground-truth box.
pub const NEGATIVE_IOU_CEILING: f64 = 0.2;

/// Placement attempts per negative before a frame is given up.
pub const NEGATIVE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    /// Class index used by the two-way classifier heads.
    pub fn class(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub frame: String,
    pub rect: BoundingBox,
}

/// A 64×64 interleaved RGB crop with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCrop {
    pub pixels: Vec<u8>,
    pub label: Label,
    pub provenance: Provenance,
}

impl LabeledCrop {
    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }
}

/// Class balance for zone sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZoneSampling {
    pub grid: usize,
    pub max_positive: Option<usize>,
    pub max_negative: Option<usize>,
    /// Positive to negative ratio; `None` keeps every cell.
    pub ratio: Option<(usize, usize)>,
}

impl Default for ZoneSampling {
    fn default() -> Self {
        ZoneSampling {
            grid: GRID_SIZE,
            max_positive: None,
            max_negative: None,
            ratio: Some((100, 180)),
        }
    }
}

/// `k` evenly spaced picks out of `n`, in order.
fn spread(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}

/// Crops every grid cell, labels it by box overlap and subsamples each class
/// evenly across frame order to honor caps and the class ratio.
pub fn extract_zone_samples(source: &dyn FrameSource, cfg: &ZoneSampling) -> Result<Vec<LabeledCrop>> {
    if source.is_empty() {
        return Err(Error::Data("zone sampling needs at least one frame".into()));
    }
    // Pass 1: labels only.
    let labels: Vec<Vec<bool>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let f = source.frame(i)?;
            let cells = grid_partition(f.image.width(), f.image.height(), cfg.grid)?;
            Ok(label_zones(&f.boxes, &cells))
        })
        .collect::<Result<_>>()?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (fi, l) in labels.iter().enumerate() {
        for (ci, &p) in l.iter().enumerate() {
            if p { &mut pos } else { &mut neg }.push((fi, ci));
        }
    }
    let mut np = cfg.max_positive.map_or(pos.len(), |c| c.min(pos.len()));
    let mut nn = cfg.max_negative.map_or(neg.len(), |c| c.min(neg.len()));
    if let Some((rp, rn)) = cfg.ratio {
        if rp == 0 || rn == 0 {
            return Err(Error::Config(format!("class ratio {rp}:{rn} must be positive")));
        }
        let want_neg = (np * rn + rp / 2) / rp;
        if want_neg <= nn {
            nn = want_neg;
        } else {
            np = np.min((nn * rp + rn / 2) / rn);
        }
    }
    let mut picked: Vec<(usize, usize, Label)> = spread(pos.len(), np)
        .into_iter()
        .map(|i| (pos[i].0, pos[i].1, Label::Positive))
        .chain(spread(neg.len(), nn).into_iter().map(|i| (neg[i].0, neg[i].1, Label::Negative)))
        .collect();
    picked.sort_by_key(|&(f, c, _)| (f, c));
    // Pass 2: crop the picked cells frame by frame.
    let mut groups: Vec<(usize, Vec<(usize, Label)>)> = Vec::new();
    for (f, c, l) in picked {
        match groups.last_mut() {
            Some((g, v)) if *g == f => v.push((c, l)),
            _ => groups.push((f, vec![(c, l)])),
        }
    }
    let crops: Vec<Vec<LabeledCrop>> = groups
        .par_iter()
        .map(|(fi, cells_wanted)| {
            let f = source.frame(*fi)?;
            let cells = grid_partition(f.image.width(), f.image.height(), cfg.grid)?;
            cells_wanted
                .iter()
                .map(|&(ci, label)| {
                    Ok(LabeledCrop {
                        pixels: f.image.crop_resize(&cells[ci], CROP_SIZE)?,
                        label,
                        provenance: Provenance {
                            frame: f.id.clone(),
                            rect: cells[ci],
                        },
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(crops.into_iter().flatten().collect())
}

/// How pedestrian crops are framed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropPolicy {
    /// Positives are the ground-truth boxes; negatives have the size of a
    /// randomly chosen ground-truth box in the same frame.
    GroundTruth,
    /// Crops use the detector's square window. Positives are windows
    /// around each box center with up to `jitter` pixels of offset and
    /// IoU at least `min_iou`; negatives are windows of the same size.
    DetectorWindow { window: u32, jitter: i32, min_iou: f64, per_box: usize },
}

impl CropPolicy {
    /// 16-pixel windows, jitter 2, IoU at least 0.55, one positive per box.
    pub fn detector_window() -> Self {
        CropPolicy::DetectorWindow {
            window: 16,
            jitter: 2,
            min_iou: 0.55,
            per_box: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PedestrianSampling {
    pub negatives_per_frame: usize,
    pub policy: CropPolicy,
    pub seed: u64,
}

impl Default for PedestrianSampling {
    fn default() -> Self {
        PedestrianSampling {
            negatives_per_frame: 4,
            policy: CropPolicy::GroundTruth,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PedestrianSamples {
    pub crops: Vec<LabeledCrop>,
    /// Frames whose negatives could not all be placed.
    pub warnings: usize,
}

impl PedestrianSamples {
    pub fn count(&self, label: Label) -> usize {
        self.crops.iter().filter(|c| c.label == label).count()
    }
}

/// A uniformly placed `w × h` rect inside the frame whose IoU with every
/// ground-truth box is below [`NEGATIVE_IOU_CEILING`], or `None` after
/// `attempts` rejections.
pub fn sample_negative<R: Rng + ?Sized>(
    rng: &mut R,
    frame_w: u32,
    frame_h: u32,
    w: i32,
    h: i32,
    gt: &[BoundingBox],
    attempts: usize,
) -> Option<BoundingBox> {
    if w <= 0 || h <= 0 || w > frame_w as i32 || h > frame_h as i32 {
        return None;
    }
    (0..attempts).find_map(|_| {
        let r = BoundingBox::new(
            rng.gen_range(0..=frame_w as i32 - w),
            rng.gen_range(0..=frame_h as i32 - h),
            w,
            h,
        );
        (max_iou(&r, gt) < NEGATIVE_IOU_CEILING).then_some(r)
    })
}

/// Square window of side `window` centred on `b`, shifted by `(dx, dy)` and
/// kept inside the frame.
fn window_around(b: &BoundingBox, window: i32, dx: i32, dy: i32, fw: u32, fh: u32) -> BoundingBox {
    let (cx, cy) = b.center();
    let x = (cx.round() as i32 - window / 2 + dx).clamp(0, fw as i32 - window);
    let y = (cy.round() as i32 - window / 2 + dy).clamp(0, fh as i32 - window);
    BoundingBox::new(x, y, window, window)
}

/// Positive and negative pedestrian crops. Randomness is drawn from a
/// stream keyed by (seed, frame index), so results do not depend on
/// scheduling.
pub fn extract_pedestrian_samples(source: &dyn FrameSource, cfg: &PedestrianSampling) -> Result<PedestrianSamples> {
    if source.is_empty() {
        return Err(Error::Data("pedestrian sampling needs at least one frame".into()));
    }
    let per_frame: Vec<(Vec<LabeledCrop>, bool)> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let f = source.frame(i)?;
            let (fw, fh) = (f.image.width(), f.image.height());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut crops = Vec::new();
            let mut push = |rect: BoundingBox, label: Label| -> Result<()> {
                crops.push(LabeledCrop {
                    pixels: f.image.crop_resize(&rect, CROP_SIZE)?,
                    label,
                    provenance: Provenance {
                        frame: f.id.clone(),
                        rect,
                    },
                });
                Ok(())
            };
            for b in &f.boxes {
                if !b.is_valid() {
                    return Err(Error::Data(format!("frame {}: degenerate box {b:?}", f.id)));
                }
                match cfg.policy {
                    CropPolicy::GroundTruth => {
                        if let Some(r) = b.clamp_to(fw, fh) {
                            push(r, Label::Positive)?;
                        }
                    }
                    CropPolicy::DetectorWindow { window, jitter, min_iou, per_box } => {
                        let win = window as i32;
                        if win > fw as i32 || win > fh as i32 {
                            continue;
                        }
                        let mut got = 0;
                        for t in 0..per_box * 20 {
                            if got == per_box {
                                break;
                            }
                            let (dx, dy) = if t == 0 {
                                (0, 0)
                            } else {
                                (rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter))
                            };
                            let r = window_around(b, win, dx, dy, fw, fh);
                            if iou(&r, b) >= min_iou {
                                push(r, Label::Positive)?;
                                got += 1;
                            }
                        }
                    }
                }
            }
            let mut short = false;
            for _ in 0..cfg.negatives_per_frame {
                let (w, h) = match cfg.policy {
                    CropPolicy::GroundTruth => match f.boxes.len() {
                        0 => (fw.min(fh) as i32 / 4, fw.min(fh) as i32 / 4),
                        n => {
                            let b = f.boxes[rng.gen_range(0..n)];
                            (b.w.min(fw as i32), b.h.min(fh as i32))
                        }
                    },
                    CropPolicy::DetectorWindow { window, .. } => (window as i32, window as i32),
                };
                match sample_negative(&mut rng, fw, fh, w, h, &f.boxes, NEGATIVE_ATTEMPTS) {
                    Some(r) => push(r, Label::Negative)?,
                    None => {
                        short = true;
                        break;
                    }
                }
            }
            Ok((crops, short))
        })
        .collect::<Result<_>>()?;
    let warnings = per_frame.iter().filter(|(_, s)| *s).count();
    if warnings > 0 {
        log::warn!("{warnings} frame(s) could not host every requested negative");
    }
    Ok(PedestrianSamples {
        crops: per_frame.into_iter().flat_map(|(c, _)| c).collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::frame::AnnotatedFrame;
    use crate::data::image::RgbImage;

    fn frame(w: u32, h: u32, boxes: Vec<BoundingBox>) -> AnnotatedFrame {
        let mut image = RgbImage::new(w, h).unwrap();
        for (i, v) in image.pixels_mut().iter_mut().enumerate() {
            *v = (i * 7 % 251) as u8;
        }
        AnnotatedFrame {
            id: "f".into(),
            image,
            boxes,
        }
    }

    #[test]
    fn three_positive_cells() {
        // Straddles the boundary between cells 0 and 1 plus one box in cell 15.
        let f = frame(64, 64, vec![BoundingBox::new(10, 2, 10, 6), BoundingBox::new(50, 50, 5, 5)]);
        let cfg = ZoneSampling {
            ratio: None,
            ..ZoneSampling::default()
        };
        let crops = extract_zone_samples(&vec![f.clone()], &cfg).unwrap();
        assert_eq!(crops.iter().filter(|c| c.is_positive()).count(), 3);
        assert_eq!(crops.len(), 16);
        assert!(crops.iter().all(|c| c.pixels.len() == 64 * 64 * 3));
        let capped = ZoneSampling {
            max_positive: Some(2),
            ..cfg
        };
        let a = extract_zone_samples(&vec![f.clone()], &capped).unwrap();
        let b = extract_zone_samples(&vec![f], &capped).unwrap();
        assert_eq!(a.iter().filter(|c| c.is_positive()).count(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_is_honored() {
        let frames: Vec<_> = (0..10)
            .map(|i| frame(64, 64, vec![BoundingBox::new(i * 3, 20, 12, 12)]))
            .collect();
        let crops = extract_zone_samples(&frames, &ZoneSampling::default()).unwrap();
        let p = crops.iter().filter(|c| c.is_positive()).count();
        let n = crops.len() - p;
        assert!(((n as f64 / p as f64) - 1.8).abs() < 0.05, "{p} {n}");
    }

    #[test]
    fn two_boxes_four_negatives() {
        let f = frame(200, 150, vec![BoundingBox::new(10, 10, 20, 40), BoundingBox::new(120, 60, 25, 50)]);
        let s = extract_pedestrian_samples(&vec![f], &PedestrianSampling::default()).unwrap();
        assert_eq!(s.count(Label::Positive), 2);
        assert_eq!(s.count(Label::Negative), 4);
        assert_eq!(s.warnings, 0);
    }

    #[test]
    fn covered_frame_yields_warning() {
        let f = frame(10, 10, vec![BoundingBox::new(0, 0, 10, 10)]);
        let s = extract_pedestrian_samples(&vec![f], &PedestrianSampling::default()).unwrap();
        assert_eq!((s.count(Label::Positive), s.count(Label::Negative), s.warnings), (1, 0, 1));
    }

    #[test]
    fn window_policy_positives_overlap() {
        let b = BoundingBox::new(40, 30, 16, 20);
        let f = frame(120, 90, vec![b]);
        let cfg = PedestrianSampling {
            policy: CropPolicy::DetectorWindow {
                window: 16,
                jitter: 2,
                min_iou: 0.55,
                per_box: 3,
            },
            ..PedestrianSampling::default()
        };
        let s = extract_pedestrian_samples(&vec![f], &cfg).unwrap();
        assert_eq!(s.count(Label::Positive), 3);
        for c in &s.crops {
            let v = iou(&c.provenance.rect, &b);
            match c.label {
                Label::Positive => assert!(v >= 0.55),
                Label::Negative => assert!(v < NEGATIVE_IOU_CEILING),
            }
        }
    }
}
