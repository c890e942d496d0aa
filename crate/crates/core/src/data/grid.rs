//! Grid partition of a frame and zone labeling.

use crate::data::bbox::BoundingBox;
use crate::error::{Error, Result};

/// Default cells per side.
pub const GRID_SIZE: usize = 4;

/// `n × n` cells tiling the frame in row-major order. Division remainders
/// go to the last row and column.
pub fn grid_partition(frame_w: u32, frame_h: u32, n: usize) -> Result<Vec<BoundingBox>> {
    if n == 0 || (frame_w as usize) < n || (frame_h as usize) < n {
        return Err(Error::Config(format!(
            "cannot split a {frame_w}x{frame_h} frame into {n}x{n} cells"
        )));
    }
    let (cw, ch) = (frame_w as usize / n, frame_h as usize / n);
    let mut cells = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let w = if c == n - 1 { frame_w as usize - c * cw } else { cw };
            let h = if r == n - 1 { frame_h as usize - r * ch } else { ch };
            cells.push(BoundingBox::new((c * cw) as i32, (r * ch) as i32, w as i32, h as i32));
        }
    }
    Ok(cells)
}

/// A cell is positive iff some ground-truth box overlaps it with positive area.
pub fn label_zones(boxes: &[BoundingBox], cells: &[BoundingBox]) -> Vec<bool> {
    cells.iter().map(|c| boxes.iter().any(|b| b.intersects(c))).collect()
}

/// Row and column of cell `index` in an `n`-per-side grid.
pub fn cell_coords(index: usize, n: usize) -> (usize, usize) {
    (index / n, index % n)
}

/// Whether two cells share an edge.
pub fn edge_adjacent(a: usize, b: usize, n: usize) -> bool {
    let ((ra, ca), (rb, cb)) = (cell_coords(a, n), cell_coords(b, n));
    ra.abs_diff(rb) + ca.abs_diff(cb) == 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_split() {
        let cells = grid_partition(640, 480, 4).unwrap();
        assert_eq!(cells.len(), 16);
        assert!(cells.iter().all(|c| c.w == 160 && c.h == 120));
        let small = grid_partition(64, 64, 4).unwrap();
        assert!(small.iter().all(|c| c.w == 16 && c.h == 16));
    }

    #[test]
    fn remainder_goes_to_last_column() {
        let cells = grid_partition(641, 480, 4).unwrap();
        for (i, c) in cells.iter().enumerate() {
            assert_eq!(c.w, if i % 4 == 3 { 161 } else { 160 });
        }
        let area: i64 = cells.iter().map(|c| c.area()).sum();
        assert_eq!(area, 641 * 480);
    }

    #[test]
    fn degenerate_frame_rejected() {
        assert!(grid_partition(3, 100, 4).is_err());
    }

    #[test]
    fn single_and_straddling_boxes() {
        let cells = grid_partition(64, 64, 4).unwrap();
        let inside = label_zones(&[BoundingBox::new(2, 2, 5, 5)], &cells);
        assert_eq!(inside.iter().filter(|&&p| p).count(), 1);
        let straddle = label_zones(&[BoundingBox::new(12, 2, 8, 5)], &cells);
        assert_eq!(straddle.iter().filter(|&&p| p).count(), 2);
        let touching = label_zones(&[BoundingBox::new(16, 0, 16, 16)], &cells);
        assert_eq!(touching.iter().filter(|&&p| p).count(), 1);
    }

    #[test]
    fn eight_positive_layout() {
        // Two figures, each spanning a 2x2 block of cells.
        let cells = grid_partition(640, 480, 4).unwrap();
        let boxes = [BoundingBox::new(100, 60, 120, 120), BoundingBox::new(420, 300, 120, 120)];
        assert_eq!(label_zones(&boxes, &cells).iter().filter(|&&p| p).count(), 8);
    }

    #[test]
    fn adjacency() {
        assert!(edge_adjacent(0, 1, 4));
        assert!(edge_adjacent(1, 5, 4));
        assert!(!edge_adjacent(3, 4, 4));
        assert!(!edge_adjacent(0, 5, 4));
    }
}
