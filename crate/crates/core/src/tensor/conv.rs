//! 2-D convolution with zero padding and channel groups.
//!
//! Two kernel families: a direct per-plane kernel for depthwise convolutions
//! (one input and one output channel per group) and im2col + GEMM for
//! everything else. Work is split over `(sample, group)` output blocks, so each
//! output element is produced by exactly one task.

use super::element::gemm;
use super::graph::Var;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Convolution hyperparameters. Weights live outside, shaped
/// `out_channels x in_channels/groups x kernel_h x kernel_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Depthwise `kernel x kernel` convolution, stride 1, "same" padding.
    pub fn depthwise(channels: usize, kernel: usize) -> Result<Self> {
        Self::new(channels, channels, kernel, 1, kernel / 2, channels)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, 1, 1, 0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("conv {name} must be positive")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "conv channels {}->{} not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn is_depthwise(&self) -> bool {
        self.in_channels == self.groups && self.out_channels == self.groups
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |axis: &'static str, len: usize, k: usize| {
            let padded = len + 2 * self.padding;
            if padded < k {
                return Err(Error::dim(
                    axis,
                    format!("padded extent {padded} smaller than kernel {k}"),
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((
            extent("height", h, self.kernel_h)?,
            extent("width", w, self.kernel_w)?,
        ))
    }

    fn check(&self, x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<[usize; 6]> {
        let (n, c, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim("rank", format!("conv input {x:?} is not NCHW"))),
        };
        if c != self.in_channels {
            return Err(Error::dim(
                "channel",
                format!("conv expects {} input channels, got {c}", self.in_channels),
            ));
        }
        if w != self.weight_shape() {
            return Err(Error::dim(
                "channel",
                format!("weight {w:?}, expected {:?}", self.weight_shape()),
            ));
        }
        if let Some(b) = b {
            if b != [self.out_channels] {
                return Err(Error::dim(
                    "channel",
                    format!("bias {b:?}, expected [{}]", self.out_channels),
                ));
            }
        }
        let (ho, wo) = self.output_size(h, wd)?;
        Ok([n, c, h, wd, ho, wo])
    }
}

/// Output indices `[lo, hi)` whose tap `k` lands inside `0..in_len`.
fn valid_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    pad: usize,
    k: usize,
) -> (usize, usize) {
    let (s, p, k) = (stride as isize, pad as isize, k as isize);
    // in = out * s - p + k  must satisfy 0 <= in < in_len
    let lo = (p - k).max(0);
    let lo = (lo + s - 1) / s;
    let hi_in = in_len as isize - 1 + p - k;
    if hi_in < 0 {
        return (0, 0);
    }
    let hi = (hi_in / s + 1).min(out_len as isize);
    (lo.min(hi) as usize, hi.max(0) as usize)
}

struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn of(spec: &ConvSpec, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        Geometry {
            h,
            w,
            ho,
            wo,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            pad: spec.padding,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds `channels` input planes into a `(channels*kh*kw) x (ho*wo)` matrix.
    fn im2col<T: Element>(&self, x: &[T], channels: usize, cols: &mut [T]) {
        let plane_out = self.ho * self.wo;
        cols.fill(T::zero());
        for c in 0..channels {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = valid_range(self.ho, self.h, self.stride, self.pad, ky);
                for kx in 0..self.kw {
                    let (ox0, ox1) = valid_range(self.wo, self.w, self.stride, self.pad, kx);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        for ox in ox0..ox1 {
                            let ix = ox * self.stride + kx - self.pad;
                            dst[oy * self.wo + ox] = src[iy * self.w + ix];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back onto input planes.
    fn col2im<T: Element>(&self, cols: &[T], channels: usize, dx: &mut [T]) {
        let plane_out = self.ho * self.wo;
        for c in 0..channels {
            let dst = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = valid_range(self.ho, self.h, self.stride, self.pad, ky);
                for kx in 0..self.kw {
                    let (ox0, ox1) = valid_range(self.wo, self.w, self.stride, self.pad, kx);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane_out..(row + 1) * plane_out];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        for ox in ox0..ox1 {
                            let ix = ox * self.stride + kx - self.pad;
                            dst[iy * self.w + ix] = dst[iy * self.w + ix] + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }

    /// Single-plane correlation, accumulated into `out`.
    fn depthwise_plane<T: Element>(&self, x: &[T], k: &[T], out: &mut [T]) {
        for ky in 0..self.kh {
            let (oy0, oy1) = valid_range(self.ho, self.h, self.stride, self.pad, ky);
            for kx in 0..self.kw {
                let wv = k[ky * self.kw + kx];
                let (ox0, ox1) = valid_range(self.wo, self.w, self.stride, self.pad, kx);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * self.stride + ky - self.pad;
                    let row = &x[iy * self.w..(iy + 1) * self.w];
                    let dst = &mut out[oy * self.wo..(oy + 1) * self.wo];
                    if self.stride == 1 {
                        let shift = kx as isize - self.pad as isize;
                        let src =
                            &row[(ox0 as isize + shift) as usize..(ox1 as isize + shift) as usize];
                        for (d, &s) in dst[ox0..ox1].iter_mut().zip(src) {
                            *d = *d + wv * s;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            let ix = ox * self.stride + kx - self.pad;
                            dst[ox] = dst[ox] + wv * row[ix];
                        }
                    }
                }
            }
        }
    }

    fn depthwise_plane_input_grad<T: Element>(&self, dout: &[T], k: &[T], dx: &mut [T]) {
        for ky in 0..self.kh {
            let (oy0, oy1) = valid_range(self.ho, self.h, self.stride, self.pad, ky);
            for kx in 0..self.kw {
                let wv = k[ky * self.kw + kx];
                let (ox0, ox1) = valid_range(self.wo, self.w, self.stride, self.pad, kx);
                for oy in oy0..oy1 {
                    let iy = oy * self.stride + ky - self.pad;
                    for ox in ox0..ox1 {
                        let ix = ox * self.stride + kx - self.pad;
                        let i = iy * self.w + ix;
                        dx[i] = dx[i] + wv * dout[oy * self.wo + ox];
                    }
                }
            }
        }
    }

    fn depthwise_plane_weight_grad<T: Element>(&self, dout: &[T], x: &[T], dk: &mut [T]) {
        for ky in 0..self.kh {
            let (oy0, oy1) = valid_range(self.ho, self.h, self.stride, self.pad, ky);
            for kx in 0..self.kw {
                let (ox0, ox1) = valid_range(self.wo, self.w, self.stride, self.pad, kx);
                let mut acc = T::zero();
                for oy in oy0..oy1 {
                    let iy = oy * self.stride + ky - self.pad;
                    for ox in ox0..ox1 {
                        let ix = ox * self.stride + kx - self.pad;
                        acc = acc + dout[oy * self.wo + ox] * x[iy * self.w + ix];
                    }
                }
                let i = ky * self.kw + kx;
                dk[i] = dk[i] + acc;
            }
        }
    }
}

/// Forward convolution on plain tensors.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let [n, _, h, w, ho, wo] = spec.check(x.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let geo = Geometry::of(spec, h, w, ho, wo);
    let groups = spec.groups;
    let cg = spec.in_channels / groups;
    let cog = spec.out_channels / groups;
    let k = cg * geo.kh * geo.kw;
    let plane_in = h * w;
    let plane_out = ho * wo;
    let mut out = vec![T::zero(); n * spec.out_channels * plane_out];
    let (xd, wd) = (x.data(), weight.data());
    let bd = bias.map(|b| b.data());

    par::for_each_chunk(&mut out, cog * plane_out, |chunk, dst| {
        let (b, g) = (chunk / groups, chunk % groups);
        let src = &xd[(b * spec.in_channels + g * cg) * plane_in..][..cg * plane_in];
        let wg = &wd[g * cog * k..(g + 1) * cog * k];
        if let Some(bd) = bd {
            for (o, plane) in dst.chunks_mut(plane_out).enumerate() {
                plane.fill(bd[g * cog + o]);
            }
        }
        if spec.is_depthwise() {
            geo.depthwise_plane(src, wg, dst);
        } else if geo.is_pointwise() {
            gemm(cog, k, plane_out, wg, false, src, false, dst, true);
        } else {
            let mut cols = vec![T::zero(); k * plane_out];
            geo.im2col(src, cg, &mut cols);
            gemm(cog, k, plane_out, wg, false, &cols, false, dst, true);
        }
    });
    Tensor::new([n, spec.out_channels, ho, wo], out)
}

fn conv2d_input_grad<T: Element>(
    dout: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    geo: &Geometry,
    n: usize,
) -> Tensor<T> {
    let groups = spec.groups;
    let cg = spec.in_channels / groups;
    let cog = spec.out_channels / groups;
    let k = cg * geo.kh * geo.kw;
    let plane_in = geo.h * geo.w;
    let plane_out = geo.ho * geo.wo;
    let mut dx = vec![T::zero(); n * spec.in_channels * plane_in];
    let (dd, wd) = (dout.data(), weight.data());

    par::for_each_chunk(&mut dx, cg * plane_in, |chunk, dst| {
        let (b, g) = (chunk / groups, chunk % groups);
        let dg = &dd[(b * spec.out_channels + g * cog) * plane_out..][..cog * plane_out];
        let wg = &wd[g * cog * k..(g + 1) * cog * k];
        if spec.is_depthwise() {
            geo.depthwise_plane_input_grad(dg, wg, dst);
        } else if geo.is_pointwise() {
            gemm(k, cog, plane_out, wg, true, dg, false, dst, false);
        } else {
            let mut cols = vec![T::zero(); k * plane_out];
            gemm(k, cog, plane_out, wg, true, dg, false, &mut cols, false);
            geo.col2im(&cols, cg, dst);
        }
    });
    Tensor::new([n, spec.in_channels, geo.h, geo.w], dx).expect("input grad shape")
}

fn conv2d_weight_grad<T: Element>(
    dout: &Tensor<T>,
    x: &Tensor<T>,
    spec: &ConvSpec,
    geo: &Geometry,
    n: usize,
) -> Tensor<T> {
    let groups = spec.groups;
    let cg = spec.in_channels / groups;
    let cog = spec.out_channels / groups;
    let k = cg * geo.kh * geo.kw;
    let plane_in = geo.h * geo.w;
    let plane_out = geo.ho * geo.wo;
    let mut dw = vec![T::zero(); spec.out_channels * k];
    let (dd, xd) = (dout.data(), x.data());

    par::for_each_chunk(&mut dw, cog * k, |g, dst| {
        let mut cols = if spec.is_depthwise() || geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * plane_out]
        };
        for b in 0..n {
            let src = &xd[(b * spec.in_channels + g * cg) * plane_in..][..cg * plane_in];
            let dg = &dd[(b * spec.out_channels + g * cog) * plane_out..][..cog * plane_out];
            if spec.is_depthwise() {
                geo.depthwise_plane_weight_grad(dg, src, dst);
            } else if geo.is_pointwise() {
                gemm(cog, plane_out, k, dg, false, src, true, dst, true);
            } else {
                geo.im2col(src, cg, &mut cols);
                gemm(cog, plane_out, k, dg, false, &cols, true, dst, true);
            }
        }
    });
    Tensor::new(spec.weight_shape(), dw).expect("weight grad shape")
}

fn conv2d_bias_grad<T: Element>(dout: &Tensor<T>, n: usize, c: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (o, acc) in db.iter_mut().enumerate() {
            let s = &dout.data()[(b * c + o) * plane..][..plane];
            *acc = s.iter().fold(*acc, |a, &v| a + v);
        }
    }
    Tensor::new([c], db).expect("bias grad shape")
}

impl<'g, T: Element> Var<'g, T> {
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: &ConvSpec,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let wv = weight.value();
        let bv = bias.map(|b| b.value());
        let out = conv2d_forward(&x, &wv, bv.as_deref(), spec)?;
        let [n, _, h, w] = x.dims4()?;
        let [_, _, ho, wo] = out.dims4()?;
        let geo = Geometry::of(spec, h, w, ho, wo);
        let spec = *spec;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.graph().push_op(
            out,
            &parents,
            Box::new(move |g, need| {
                let mut grads = vec![
                    need[0].then(|| conv2d_input_grad(g, &wv, &spec, &geo, n)),
                    need[1].then(|| conv2d_weight_grad(g, &x, &spec, &geo, n)),
                ];
                if need.len() == 3 {
                    grads.push(need[2].then(|| conv2d_bias_grad(g, n, spec.out_channels, ho * wo)));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let w = Tensor::<f64>::ones([1, 1, 3, 3]);
        let spec = ConvSpec::new(1, 1, 3, 1, 1, 1).unwrap();
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let x = Tensor::<f64>::from_fn([2, 3, 5, 4], |i| (i as f64 * 0.37).sin());
        for k in [3, 5, 7] {
            let spec = ConvSpec::depthwise(3, k).unwrap();
            let mut w = Tensor::zeros(spec.weight_shape());
            for c in 0..3 {
                w.data_mut()[c * k * k + (k / 2) * k + k / 2] = 1.0;
            }
            let y = conv2d_forward(&x, &w, None, &spec).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        for k in 0..5 {
                            let (lo, hi) = valid_range(out_len, in_len, stride, pad, k);
                            let want: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * stride + k) as isize - pad as isize;
                                    i >= 0 && (i as usize) < in_len
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, want, "{out_len} {in_len} {stride} {pad} {k}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_channels_and_tiny_input() {
        let spec = ConvSpec::new(4, 8, 3, 1, 0, 2).unwrap();
        let w = Tensor::<f64>::zeros(spec.weight_shape());
        let err = conv2d_forward(&Tensor::zeros([1, 3, 5, 5]), &w, None, &spec).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                axis: "channel",
                ..
            }
        ));
        let err = conv2d_forward(&Tensor::zeros([1, 4, 2, 5]), &w, None, &spec).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "height", .. }));
        assert!(ConvSpec::new(3, 8, 3, 1, 0, 2).is_err());
    }
}
