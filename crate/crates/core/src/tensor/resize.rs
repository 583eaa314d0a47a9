//! Spatial resampling: bilinear resize and adaptive average pooling.

use super::graph::Var;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Per output index: (low source index, high source index, fraction toward high).
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Half-pixel-centre bilinear resampling of every plane.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("height", "resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    par::for_each_chunk(&mut out, out_h * out_w, |p, dst| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                // lerp form keeps constants exact
                let a = src[y0 * w + x0];
                let b = src[y0 * w + x1];
                let cc = src[y1 * w + x0];
                let d = src[y1 * w + x1];
                let top = a + fx * (b - a);
                let bot = cc + fx * (d - cc);
                dst[oy * out_w + ox] = top + fy * (bot - top);
            }
        }
    });
    Tensor::new([n, c, out_h, out_w], out)
}

fn bilinear_resize_grad<T: Element>(
    g: &Tensor<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let [_, _, out_h, out_w] = g.dims4().expect("nchw grad");
    if (out_h, out_w) == (h, w) {
        return g.clone();
    }
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let mut dx = vec![T::zero(); n * c * h * w];
    par::for_each_chunk(&mut dx, h * w, |p, dst| {
        let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let d = src[oy * out_w + ox];
                let top = d * (T::one() - fy);
                let bot = d * fy;
                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
            }
        }
    });
    Tensor::new([n, c, h, w], dx).expect("resize grad shape")
}

/// Bin `i` of `out` over `len` inputs covers `[floor(i*len/out), ceil((i+1)*len/out))`.
fn pool_bins(out: usize, len: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| (i * len / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

pub fn adaptive_avg_pool<T: Element>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::dim(
            "height",
            format!("pool target {out_h}x{out_w} must be within 1x1..={h}x{w}"),
        ));
    }
    let by = pool_bins(out_h, h);
    let bx = pool_bins(out_w, w);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    par::for_each_chunk(&mut out, out_h * out_w, |p, dst| {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut acc = T::zero();
                for row in src[y0 * w..y1 * w].chunks(w) {
                    acc = row[x0..x1].iter().fold(acc, |a, &v| a + v);
                }
                let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                dst[oy * out_w + ox] = acc / count;
            }
        }
    });
    Tensor::new([n, c, out_h, out_w], out)
}

fn adaptive_avg_pool_grad<T: Element>(
    g: &Tensor<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let [_, _, out_h, out_w] = g.dims4().expect("nchw grad");
    let by = pool_bins(out_h, h);
    let bx = pool_bins(out_w, w);
    let mut dx = vec![T::zero(); n * c * h * w];
    par::for_each_chunk(&mut dx, h * w, |p, dst| {
        let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                let d = src[oy * out_w + ox] / count;
                for y in y0..y1 {
                    for v in &mut dst[y * w + x0..y * w + x1] {
                        *v = *v + d;
                    }
                }
            }
        }
    });
    Tensor::new([n, c, h, w], dx).expect("pool grad shape")
}

impl<'g, T: Element> Var<'g, T> {
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let out = bilinear_resize(&x, out_h, out_w)?;
        Ok(self.graph().push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(bilinear_resize_grad(g, n, c, h, w))]),
        ))
    }

    pub fn adaptive_avg_pool(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let out = adaptive_avg_pool(&x, out_h, out_w)?;
        Ok(self.graph().push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(adaptive_avg_pool_grad(g, n, c, h, w))]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_upsample_of_ramp() {
        let x = Tensor::<f64>::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full([2, 3, 5, 7], 0.3);
        for (h, w) in [(1, 1), (3, 11), (10, 14), (13, 2)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.3));
            let back = bilinear_resize(&y, 5, 7).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 2, 3, 4], |i| (i as f32).sqrt());
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap(), x);
        assert_eq!(adaptive_avg_pool(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn pool_global_and_quadrants() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(adaptive_avg_pool(&x, 1, 1).unwrap().data(), &[2.5]);

        let ramp = Tensor::<f64>::from_fn([1, 1, 4, 4], |i| i as f64);
        let y = adaptive_avg_pool(&ramp, 2, 2).unwrap();
        let mut want = [0.0; 4];
        for qy in 0..2 {
            for qx in 0..2 {
                let mut s = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        s += ramp.data()[(qy * 2 + y) * 4 + qx * 2 + x];
                    }
                }
                want[qy * 2 + qx] = s / 4.0;
            }
        }
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn pool_bins_overlap_for_uneven_sizes() {
        assert_eq!(pool_bins(3, 5), vec![(0, 2), (1, 4), (3, 5)]);
        assert_eq!(
            pool_bins(6, 2),
            vec![(0, 1), (0, 1), (0, 1), (1, 2), (1, 2), (1, 2)]
        );
    }
}
