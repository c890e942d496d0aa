//! Brute-force oracles shared by the oracle tests and the acceptance suite.
//! Each check runs seeded instances and returns the number of mismatches.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saywf::data::{grid_partition, iou, label_zones, BoundingBox};
use saywf::detect::{nms, window_count, window_count_1d, window_offsets};
use saywf::ops::{conv2d, linear, maxpool2d};
use saywf::Tensor;

pub const INSTANCES: u64 = 1000;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

pub fn conv2d_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, f) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (kh, kw) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (stride, pad) = (rng.gen_range(1..=3), rng.gen_range(0..=2));
        let h = rng.gen_range(kh.max(1)..=9);
        let w = rng.gen_range(kw.max(1)..=9);
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let wt = random_tensor(&mut rng, &[f, c, kh, kw]);
        let b = random_tensor(&mut rng, &[f]);
        let y = conv2d(&x, &wt, &b, stride, pad).unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        if y.shape() != [n, f, oh, ow] {
            bad += 1;
            continue;
        }
        let (xd, wd) = (x.data(), wt.data());
        let mut want = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wd[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        want[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        bad += !close(y.data(), &want, 1e-12) as usize;
    }
    bad
}

pub fn maxpool_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (kh, kw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let stride = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..kh.min(kw));
        let h = rng.gen_range(kh..=9);
        let w = rng.gen_range(kw..=9);
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let y = maxpool2d(&x, kh, kw, stride, pad).unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        if y.shape() != [n, c, oh, ow] {
            bad += 1;
            continue;
        }
        let mut want = Vec::new();
        for plane in x.data().chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                m = m.max(plane[iy as usize * w + ix as usize]);
                            }
                        }
                    }
                    want.push(m);
                }
            }
        }
        bad += (y.data() != &want[..]) as usize;
    }
    bad
}

pub fn linear_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, k) = (rng.gen_range(1..=4), rng.gen_range(1..=12), rng.gen_range(1..=6));
        let x = random_tensor(&mut rng, &[n, d]);
        let w = random_tensor(&mut rng, &[d, k]);
        let b = random_tensor(&mut rng, &[k]);
        let y = linear(&x, &w, &b).unwrap();
        let mut want = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                want[i * k + j] = b.data()[j] + (0..d).map(|t| x.data()[i * d + t] * w.data()[t * k + j]).sum::<f64>();
            }
        }
        bad += !close(y.data(), &want, 1e-12) as usize;
    }
    bad
}

pub fn random_box(rng: &mut ChaCha8Rng, span: i32) -> BoundingBox {
    BoundingBox::new(
        rng.gen_range(-8..span),
        rng.gen_range(-8..span),
        rng.gen_range(1..=24),
        rng.gen_range(1..=24),
    )
}

/// Repeatedly take the best remaining box and discard everything it
/// suppresses.
fn nms_oracle(boxes: &[BoundingBox], thr: f64) -> Vec<BoundingBox> {
    let mut rest: Vec<BoundingBox> = boxes.to_vec();
    let mut kept = Vec::new();
    while !rest.is_empty() {
        let best = (0..rest.len())
            .min_by(|&i, &j| {
                let (a, b) = (&rest[i], &rest[j]);
                b.score
                    .unwrap()
                    .total_cmp(&a.score.unwrap())
                    .then((a.x, a.y, a.w, a.h).cmp(&(b.x, b.y, b.w, b.h)))
            })
            .unwrap();
        let top = rest.swap_remove(best);
        rest.retain(|r| iou(&top, r) < thr);
        kept.push(top);
    }
    kept
}

pub fn nms_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(0..=50);
        let thr = rng.gen_range(0.05..=1.0);
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|_| random_box(&mut rng, 60).with_score((rng.gen_range(0..20) as f64) / 20.0))
            .collect();
        let got = nms(&boxes, thr);
        let overlapping = got.iter().enumerate().any(|(i, a)| got[i + 1..].iter().any(|b| iou(a, b) >= thr));
        bad += (got != nms_oracle(&boxes, thr) || overlapping) as usize;
    }
    bad
}

pub fn label_zones_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=4);
        let fw = rng.gen_range(n as u32..=64);
        let fh = rng.gen_range(n as u32..=64);
        let boxes: Vec<BoundingBox> = (0..rng.gen_range(0..=5)).map(|_| random_box(&mut rng, 64)).collect();
        let cells = grid_partition(fw, fh, n).unwrap();
        let covered: u64 = cells.iter().map(|c| c.area() as u64).sum();

        let want: Vec<bool> = cells
            .iter()
            .map(|c| {
                (c.y..c.bottom()).any(|py| (c.x..c.right()).any(|px| boxes.iter().any(|b| b.contains_point(px, py))))
            })
            .collect();
        bad += (covered != fw as u64 * fh as u64 || label_zones(&boxes, &cells) != want) as usize;
    }
    bad
}

pub fn offsets_oracle(extent: u32, window: u32, stride: u32) -> HashSet<u32> {
    if extent <= window {
        return HashSet::from([0]);
    }
    let last = extent - window;
    (0..=last).filter(|o| o % stride == 0 || *o == last).collect()
}

/// Closed-form window counts against enumeration for zones up to 64 pixels
/// and strides up to 16.
pub fn window_count_mismatches() -> usize {
    let mut bad = 0;
    for extent in 1..=64u32 {
        for window in [8u32, 16, 32] {
            for stride in 1..=16u32 {
                let want = offsets_oracle(extent, window, stride);
                let got: HashSet<u32> = window_offsets(extent, window, stride).into_iter().collect();
                bad += (window_count_1d(extent, window, stride) != want.len() as u64 || got != want) as usize;
            }
        }
    }
    for (w, h) in [(96u32, 72u32), (64, 64), (17, 40)] {
        for stride in 1..=16 {
            let want = (offsets_oracle(w, 16, stride).len() * offsets_oracle(h, 16, stride).len()) as u64;
            bad += (window_count(w, h, 16, stride) != want) as usize;
        }
    }
    bad
}
