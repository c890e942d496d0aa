//! Binary weights file.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "SAYF" | version | record count | records... | CRC-32 of everything before it
//! record = index | rank | extents[rank] | f32 values (little-endian)
//! ```
//!
//! Records are the network's parameter tensors in traversal order, followed by
//! batch-norm running statistics when the network has any.

use std::fs;
use std::path::Path;

use super::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SAYF";
pub const VERSION: u32 = 1;

fn records<T: Scalar>(net: &Network<T>) -> Vec<(Vec<usize>, Vec<f32>)> {
    let mut out: Vec<_> = net
        .params()
        .iter()
        .map(|p| (p.shape().to_vec(), p.data().iter().map(|v| v.as_f64() as f32).collect()))
        .collect();
    out.extend(
        net.buffers()
            .iter()
            .map(|b| (vec![b.len()], b.iter().map(|&v| v as f32).collect())),
    );
    out
}

pub fn encode<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let recs = records(net);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (i, (shape, values)) in recs.iter().enumerate() {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_weights<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Integrity("unexpected end of records".into()))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Overwrites every parameter of `net` with the values in `bytes`.
pub fn decode_into<T: Scalar>(net: &mut Network<T>, bytes: &[u8]) -> Result<()> {
    if bytes.len() < 16 {
        return Err(Error::Integrity(format!("file is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if &body[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let expected = records(net);
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let index = r.u32()? as usize;
        if index != i {
            return Err(Error::Integrity(format!("record {i} carries index {index}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        match expected.get(i) {
            Some((want, _)) if *want == shape => {}
            Some((want, _)) => {
                return Err(Error::LayerMismatch {
                    index: i,
                    expected: want.clone(),
                    found: shape,
                })
            }
            None => {
                return Err(Error::LayerMismatch {
                    index: i,
                    expected: Vec::new(),
                    found: shape,
                })
            }
        }
        let n: usize = shape.iter().product();
        let raw = body
            .get(r.pos..r.pos + 4 * n)
            .ok_or_else(|| Error::Integrity(format!("record {i} truncated")))?;
        r.pos += 4 * n;
        values.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect::<Vec<_>>(),
        );
    }
    if count != expected.len() {
        return Err(Error::LayerMismatch {
            index: count,
            expected: expected.get(count).map(|e| e.0.clone()).unwrap_or_default(),
            found: Vec::new(),
        });
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let n_params = net.params().len();
    for (dst, src) in net.params_mut().into_iter().zip(&values) {
        for (d, s) in dst.data_mut().iter_mut().zip(src) {
            *d = T::from_f64_lossy(*s as f64);
        }
    }
    for (dst, src) in net.buffers_mut().into_iter().zip(&values[n_params..]) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *s as f64;
        }
    }
    Ok(())
}

pub fn load_weights_into<T: Scalar>(net: &mut Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_into(net, &bytes)
}

/// Builds the network described by `spec` and fills it from `path`.
pub fn load_weights(spec: &NetworkSpec, path: impl AsRef<Path>) -> Result<Network<f32>> {
    let mut net = Network::build(spec, 0)?;
    load_weights_into(&mut net, path)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{build_pedestrian_classifier, build_zone_classifier, pedestrian_classifier_spec, zone_classifier_spec, BuildOptions};

    fn same_params(a: &Network<f32>, b: &Network<f32>) -> bool {
        a.params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.sayf");
        let net = build_zone_classifier(17).unwrap();
        save_weights(&net, &path).unwrap();
        let back = load_weights(&zone_classifier_spec(&BuildOptions::default()), &path).unwrap();
        assert!(same_params(&net, &back));
    }

    #[test]
    fn truncated_file_fails_integrity() {
        let net = build_zone_classifier(1).unwrap();
        let bytes = encode(&net);
        let mut fresh = build_zone_classifier(2).unwrap();
        let err = decode_into(&mut fresh, &bytes[..bytes.len() - 100]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
        assert!(matches!(decode_into(&mut fresh, &bytes[..10]), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_and_checksum_errors_are_distinct() {
        let net = build_zone_classifier(1).unwrap();
        let mut bytes = encode(&net);
        let mut fresh = build_zone_classifier(2).unwrap();

        let mut flipped = bytes.clone();
        flipped[40] ^= 0xff;
        assert!(matches!(decode_into(&mut fresh, &flipped), Err(Error::Integrity(_))));

        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_into(&mut fresh, &bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn zone_file_into_pedestrian_names_first_bad_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.sayf");
        save_weights(&build_zone_classifier(1).unwrap(), &path).unwrap();
        let err = load_weights(&pedestrian_classifier_spec(&BuildOptions::default()), &path)
            .err()
            .unwrap();
        match err {
            // both start with a 3->32 3x3 conv; the first inception reduce differs
            Error::LayerMismatch { index, expected, found } => {
                assert_eq!(index, 2);
                assert_eq!(expected, vec![32, 32, 1, 1]);
                assert_eq!(found, vec![16, 32, 1, 1]);
            }
            other => panic!("unexpected {other}"),
        }
        let _ = build_pedestrian_classifier(0).unwrap();
    }

    #[test]
    fn bad_magic() {
        let mut fresh = build_zone_classifier(2).unwrap();
        let mut bytes = encode(&fresh);
        bytes[0] = b'X';
        assert!(matches!(decode_into(&mut fresh, &bytes), Err(Error::BadMagic)));
    }
}
