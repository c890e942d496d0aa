//! Annotated frames, frame sources and the JSON Lines annotation format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::bbox::BoundingBox;
use crate::data::image::RgbImage;
use crate::error::{Error, Result};

/// One raster with its ground-truth pedestrian boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub id: String,
    pub image: RgbImage,
    pub boxes: Vec<BoundingBox>,
}

impl AnnotatedFrame {
    /// Checks that every box is non-degenerate and touches the raster.
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if !b.is_valid() || b.clamp_to(self.image.width(), self.image.height()).is_none() {
                return Err(Error::Data(format!("frame {}: box {b:?} is degenerate or outside", self.id)));
            }
        }
        Ok(())
    }
}

/// Indexed, possibly lazy collection of frames.
pub trait FrameSource: Send + Sync {
    fn len(&self) -> usize;

    fn frame(&self, index: usize) -> Result<AnnotatedFrame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameSource for Vec<AnnotatedFrame> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn frame(&self, index: usize) -> Result<AnnotatedFrame> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("frame index {index} out of range")))
    }
}

/// A contiguous index range of another source.
pub struct Subset<'a> {
    pub source: &'a dyn FrameSource,
    pub start: usize,
    pub len: usize,
}

impl FrameSource for Subset<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn frame(&self, index: usize) -> Result<AnnotatedFrame> {
        if index >= self.len {
            return Err(Error::Data(format!("subset index {index} out of range")));
        }
        self.source.frame(self.start + index)
    }
}

/// One annotation line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub boxes: Vec<BoundingBox>,
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Frames stored as images next to an annotation file; images load on demand.
pub struct DiskDataset {
    root: PathBuf,
    records: Vec<AnnotationRecord>,
}

impl DiskDataset {
    /// Opens `annotations.jsonl`; image paths resolve relative to its directory.
    pub fn open(annotations: &Path) -> Result<Self> {
        let records = read_annotations(annotations)?;
        if records.is_empty() {
            return Err(Error::Data(format!("{} lists no frames", annotations.display())));
        }
        let root = annotations.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DiskDataset { root, records })
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }
}

impl FrameSource for DiskDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn frame(&self, index: usize) -> Result<AnnotatedFrame> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| Error::Data(format!("frame index {index} out of range")))?;
        let image = RgbImage::load(&self.root.join(&rec.image))?;
        let frame = AnnotatedFrame {
            id: rec.image.clone(),
            image,
            boxes: rec.boxes.clone(),
        };
        frame.validate()?;
        Ok(frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotations_round_trip_and_omit_scores() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let recs = vec![AnnotationRecord {
            image: "f0.png".into(),
            boxes: vec![BoundingBox::new(1, 2, 3, 4)],
        }];
        write_annotations(&p, &recs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"image\":\"f0.png\",\"boxes\":[{\"x\":1,\"y\":2,\"w\":3,\"h\":4}]}\n");
        assert_eq!(read_annotations(&p).unwrap(), recs);
    }

    #[test]
    fn malformed_line_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "{\"image\": 3}\n").unwrap();
        assert!(matches!(read_annotations(&p), Err(Error::Data(_))));
    }

    #[test]
    fn disk_dataset_loads_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(8, 6).unwrap();
        img.save(&dir.path().join("f0.ppm")).unwrap();
        let p = dir.path().join("a.jsonl");
        write_annotations(
            &p,
            &[AnnotationRecord {
                image: "f0.ppm".into(),
                boxes: vec![BoundingBox::new(1, 1, 2, 2)],
            }],
        )
        .unwrap();
        let ds = DiskDataset::open(&p).unwrap();
        assert_eq!(ds.frame(0).unwrap().image, img);
        assert!(ds.frame(1).is_err());
    }
}
