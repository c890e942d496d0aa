//! Box size histograms and center density.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::frame::FrameSource;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges; bins are `[low, high)`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Fixed-width bins aligned to multiples of `bin_width` covering all values.
    pub fn build(values: &[f64], bin_width: f64) -> Self {
        if values.is_empty() {
            return Histogram {
                edges: vec![0.0, bin_width],
                counts: vec![0],
            };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = (lo / bin_width).floor();
        let bins = ((hi / bin_width).floor() - first) as usize + 1;
        let edges = (0..=bins).map(|i| (first + i as f64) * bin_width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            counts[((v / bin_width).floor() - first) as usize] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_low,bin_high,count` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub frames: usize,
    pub boxes: usize,
    /// Distinct `(width, height)` frame resolutions.
    pub resolutions: Vec<(u32, u32)>,
    pub width_hist: Histogram,
    pub height_hist: Histogram,
    pub grid: usize,
    /// Row-major share of box centers per cell; sums to 1 when boxes exist.
    pub density: Vec<f64>,
}

impl DatasetStats {
    /// 8-bit PGM of the density grid after `255·ln(1+v)/ln(1+v_max)`.
    pub fn density_pgm(&self) -> Vec<u8> {
        let vmax = self.density.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.grid, self.grid).into_bytes();
        out.extend(self.density.iter().map(|&v| {
            if vmax > 0.0 {
                (255.0 * (1.0 + v).ln() / (1.0 + vmax).ln()).round() as u8
            } else {
                0
            }
        }));
        out
    }

    /// Writes `width_hist.csv`, `height_hist.csv`, `center_density.pgm`
    /// and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        put("width_hist.csv", self.width_hist.to_csv().as_bytes())?;
        put("height_hist.csv", self.height_hist.to_csv().as_bytes())?;
        put("center_density.pgm", &self.density_pgm())?;
        put("summary.json", serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Frame resolution and `(width, height, cell)` per box.
type FrameBoxes = ((u32, u32), Vec<(f64, f64, usize)>);

/// Collects box statistics over every frame.
pub fn stats(source: &dyn FrameSource, bin_width: f64, grid: usize) -> Result<DatasetStats> {
    if source.is_empty() {
        return Err(Error::Data("statistics need at least one frame".into()));
    }
    if bin_width.is_nan() || bin_width <= 0.0 || grid == 0 {
        return Err(Error::Config(format!("bin width {bin_width} and grid {grid} must be positive")));
    }
    let per_frame: Vec<FrameBoxes> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let f = source.frame(i)?;
            let (fw, fh) = (f.image.width(), f.image.height());
            let items = f
                .boxes
                .iter()
                .map(|b| {
                    let (cx, cy) = b.center();
                    let col = ((cx / fw as f64 * grid as f64) as usize).min(grid - 1);
                    let row = ((cy / fh as f64 * grid as f64) as usize).min(grid - 1);
                    (b.w as f64, b.h as f64, row * grid + col)
                })
                .collect();
            Ok(((fw, fh), items))
        })
        .collect::<Result<_>>()?;
    let mut resolutions: Vec<(u32, u32)> = per_frame.iter().map(|(r, _)| *r).collect();
    resolutions.sort_unstable();
    resolutions.dedup();
    let all: Vec<_> = per_frame.into_iter().flat_map(|(_, v)| v).collect();
    let mut density = vec![0.0; grid * grid];
    for &(_, _, cell) in &all {
        density[cell] += 1.0;
    }
    if !all.is_empty() {
        density.iter_mut().for_each(|d| *d /= all.len() as f64);
    }
    let widths: Vec<f64> = all.iter().map(|t| t.0).collect();
    let heights: Vec<f64> = all.iter().map(|t| t.1).collect();
    Ok(DatasetStats {
        frames: source.len(),
        boxes: all.len(),
        resolutions,
        width_hist: Histogram::build(&widths, bin_width),
        height_hist: Histogram::build(&heights, bin_width),
        grid,
        density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bbox::BoundingBox;
    use crate::data::frame::AnnotatedFrame;
    use crate::data::image::RgbImage;

    fn frame(boxes: Vec<BoundingBox>) -> AnnotatedFrame {
        AnnotatedFrame {
            id: "f".into(),
            image: RgbImage::new(400, 400).unwrap(),
            boxes,
        }
    }

    #[test]
    fn single_box_single_bin() {
        let s = stats(&vec![frame(vec![BoundingBox::new(10, 10, 50, 100)])], 10.0, 4).unwrap();
        assert_eq!(s.width_hist.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(s.height_hist.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(s.width_hist.total(), 1);
    }

    #[test]
    fn one_cell_density() {
        let boxes = vec![BoundingBox::new(0, 0, 20, 20), BoundingBox::new(30, 40, 10, 10)];
        let s = stats(&vec![frame(boxes)], 10.0, 4).unwrap();
        assert_eq!(s.density.iter().filter(|&&v| v > 0.0).count(), 1);
        let pgm = s.density_pgm();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(*pgm.last().unwrap(), 0);
        assert_eq!(pgm[pgm.len() - 16], 255);
    }

    #[test]
    fn csv_rows() {
        let h = Histogram::build(&[5.0, 12.0, 19.0], 10.0);
        assert_eq!(h.to_csv(), "bin_low,bin_high,count\n0,10,1\n10,20,2\n");
    }
}
