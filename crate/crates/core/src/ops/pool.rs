use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::out_extent;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dims4, Tensor};

/// Max-pooling window, stride and per-side padding. Padded cells act as negative infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool2dGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl Pool2dGeometry {
    pub fn new(kh: usize, kw: usize, stride: usize, padding: usize) -> Self {
        Pool2dGeometry {
            kh,
            kw,
            stride,
            pad_top: padding,
            pad_left: padding,
            pad_bottom: padding,
            pad_right: padding,
        }
    }

    /// Stride-1 pooling that keeps the spatial size; even kernels put the extra
    /// padding row/column at the bottom/right.
    pub fn same(kh: usize, kw: usize) -> Self {
        Pool2dGeometry {
            kh,
            kw,
            stride: 1,
            pad_top: (kh - 1) / 2,
            pad_left: (kw - 1) / 2,
            pad_bottom: kh / 2,
            pad_right: kw / 2,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::Config(format!("degenerate pooling geometry {self:?}")));
        }
        if self.pad_top.max(self.pad_bottom) >= self.kh || self.pad_left.max(self.pad_right) >= self.kw {
            return Err(Error::Config(format!("pooling padding must be smaller than the window: {self:?}")));
        }
        let oh = out_extent(h, self.kh, self.stride, self.pad_top, self.pad_bottom)
            .ok_or_else(|| Error::shape("maxpool2d", "height", format!(">= {}", self.kh), h))?;
        let ow = out_extent(w, self.kw, self.stride, self.pad_left, self.pad_right)
            .ok_or_else(|| Error::shape("maxpool2d", "width", format!(">= {}", self.kw), w))?;
        Ok((oh, ow))
    }
}

/// Symmetrically padded max pooling.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    maxpool2d_values(input, Pool2dGeometry::new(kh, kw, stride, padding))
}

/// Inference-only pooling without argmax bookkeeping.
pub fn maxpool2d_values<T: Scalar>(input: &Tensor<T>, g: Pool2dGeometry) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(input, "maxpool2d")?;
    let (oh, ow) = g.output_hw(h, w)?;
    let wp = w + g.pad_left + g.pad_right;
    let slide = wp + 1 - g.kw;
    let mut out = vec![T::zero(); n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(input.data().par_chunks(h * w))
        .for_each_init(
            || (vec![T::neg_infinity(); wp], vec![T::zero(); slide], vec![T::zero(); h * ow]),
            |(padded, m, rmax), (o, x)| {
                // Horizontal pass: sliding maximum over a -inf padded row,
                // then sampled at the stride.
                for yy in 0..h {
                    padded[g.pad_left..g.pad_left + w].copy_from_slice(&x[yy * w..(yy + 1) * w]);
                    m.copy_from_slice(&padded[..slide]);
                    for t in 1..g.kw {
                        for (d, &v) in m.iter_mut().zip(&padded[t..t + slide]) {
                            *d = if v > *d { v } else { *d };
                        }
                    }
                    for (ox, r) in rmax[yy * ow..(yy + 1) * ow].iter_mut().enumerate() {
                        *r = m[ox * g.stride];
                    }
                }
                for oy in 0..oh {
                    let y0 = (oy * g.stride) as isize - g.pad_top as isize;
                    let ys = y0.max(0) as usize;
                    let ye = ((y0 + g.kh as isize).min(h as isize)) as usize;
                    let ob = &mut o[oy * ow..(oy + 1) * ow];
                    ob.copy_from_slice(&rmax[ys * ow..(ys + 1) * ow]);
                    for yy in ys + 1..ye {
                        for (d, &v) in ob.iter_mut().zip(&rmax[yy * ow..(yy + 1) * ow]) {
                            *d = if v > *d { v } else { *d };
                        }
                    }
                }
            },
        );
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Forward pass returning, for every output cell, the flat in-plane index of
/// the selected input element. Ties go to the first maximum in row-major
/// window order.
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>, g: Pool2dGeometry) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = dims4(input, "maxpool2d")?;
    let (oh, ow) = g.output_hw(h, w)?;
    let planes = n * c;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .zip(input.data().par_chunks(h * w))
        .for_each_init(
            || (vec![T::zero(); h * ow], vec![0u32; h * ow]),
            |(rmax, rarg), ((o, a), x)| {
                // Horizontal pass: first maximum along each row segment.
                for yy in 0..h {
                    let src = &x[yy * w..(yy + 1) * w];
                    for ox in 0..ow {
                        let x0 = (ox * g.stride) as isize - g.pad_left as isize;
                        let xs = x0.max(0) as usize;
                        let xe = ((x0 + g.kw as isize).min(w as isize)) as usize;
                        let mut best = src[xs];
                        let mut bi = xs;
                        for (xx, &v) in src.iter().enumerate().take(xe).skip(xs + 1) {
                            let gt = v > best;
                            best = if gt { v } else { best };
                            bi = if gt { xx } else { bi };
                        }
                        rmax[yy * ow + ox] = best;
                        rarg[yy * ow + ox] = (yy * w + bi) as u32;
                    }
                }
                // Vertical pass over the row maxima keeps row-major first-tie order.
                for oy in 0..oh {
                    let y0 = (oy * g.stride) as isize - g.pad_top as isize;
                    let ys = y0.max(0) as usize;
                    let ye = ((y0 + g.kh as isize).min(h as isize)) as usize;
                    let (ob, ab) = (&mut o[oy * ow..(oy + 1) * ow], &mut a[oy * ow..(oy + 1) * ow]);
                    ob.copy_from_slice(&rmax[ys * ow..(ys + 1) * ow]);
                    ab.copy_from_slice(&rarg[ys * ow..(ys + 1) * ow]);
                    for yy in ys + 1..ye {
                        let (rm, ra) = (&rmax[yy * ow..(yy + 1) * ow], &rarg[yy * ow..(yy + 1) * ow]);
                        for ox in 0..ow {
                            let gt = rm[ox] > ob[ox];
                            ob[ox] = if gt { rm[ox] } else { ob[ox] };
                            ab[ox] = if gt { ra[ox] } else { ab[ox] };
                        }
                    }
                }
            },
        );
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, arg))
}

/// Routes each output gradient to the input element that won its window.
pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("maxpool2d_backward", "rank", 4, input_shape.len())),
    };
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool2d_backward", "grad_out", argmax.len(), grad_out.len()));
    }
    let per_out = grad_out.len() / (n * c).max(1);
    let mut dx = vec![T::zero(); n * c * h * w];
    dx.par_chunks_mut(h * w)
        .zip(argmax.par_chunks(per_out.max(1)))
        .zip(grad_out.data().par_chunks(per_out.max(1)))
        .for_each(|((d, a), g)| {
            for (&i, &gv) in a.iter().zip(g) {
                d[i as usize] = d[i as usize] + gv;
            }
        });
    Tensor::from_vec(input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_in_constant_out() {
        let x = Tensor::<f32>::full(&[1, 2, 8, 8], 3.5);
        let y = maxpool2d(&x, 4, 4, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn zone_pool_halves_extent() {
        let x = Tensor::<f32>::zeros(&[1, 32, 32, 32]);
        assert_eq!(maxpool2d(&x, 4, 4, 2, 1).unwrap().shape(), &[1, 32, 16, 16]);
    }

    #[test]
    fn two_by_two_windows() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let y = maxpool2d(&x, 2, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn same_padding_keeps_extent_for_even_window() {
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let (y, _) = maxpool2d_forward(&x, Pool2dGeometry::same(4, 4)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn ties_route_to_first_maximum() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (y, arg) = maxpool2d_forward(&x, Pool2dGeometry::new(2, 2, 2, 0)).unwrap();
        assert_eq!(arg, vec![0]);
        let dx = maxpool2d_backward(x.shape(), &arg, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padding_as_wide_as_window_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(maxpool2d(&x, 2, 2, 1, 2).is_err());
    }

    #[test]
    fn value_path_matches_argmax_path() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[2, 3, 9, 7], 1.0, &mut rng);
        for g in [Pool2dGeometry::new(4, 4, 2, 1), Pool2dGeometry::same(4, 4), Pool2dGeometry::new(3, 2, 1, 0)] {
            let (a, arg) = maxpool2d_forward(&x, g).unwrap();
            assert_eq!(maxpool2d_values(&x, g).unwrap(), a);
            let planes = x.data().chunks(63);
            for (p, (plane, idx)) in planes.zip(arg.chunks(arg.len() / 6)).enumerate() {
                for (o, &i) in idx.iter().enumerate() {
                    assert_eq!(plane[i as usize], a.data()[p * idx.len() + o]);
                }
            }
        }
    }
}
