//! Element-wise and structural differentiable operators.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::graph::Var;
use super::{check_same_shape, Element, Tensor};
use crate::error::{Error, Result};

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Standard normal CDF through the error function.
pub(crate) fn normal_cdf<T: Element>(v: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (v * T::from_f64(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn normal_pdf<T: Element>(v: T) -> T {
    T::from_f64(1.0 / (2.0 * PI).sqrt()) * (-(v * v) * T::from_f64(0.5)).exp()
}

/// `v * Phi(v)` with the exact Gaussian CDF.
pub fn gelu_scalar<T: Element>(v: T) -> T {
    v * normal_cdf(v)
}

impl<'g, T: Element> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape(a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x + y);
        Ok(self.graph().push_op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape(a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x - y);
        Ok(self.graph().push_op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape(a.shape(), b.shape())?;
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.graph().push_op(
            out,
            &[self, other],
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| zip_map(g, &b, |d, y| d * y)),
                    need[1].then(|| zip_map(g, &a, |d, x| d * x)),
                ]
            }),
        ))
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * s);
        self.graph().push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    pub fn gelu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(gelu_scalar);
        self.graph().push_op(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(zip_map(g, &x, |d, v| {
                    d * (normal_cdf(v) + v * normal_pdf(v))
                }))]
            }),
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph().push_op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_f64(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Copies channels `[start, start + len)`.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let out = x.slice_channels(start, len)?;
        Ok(self.graph().push_op(
            out,
            &[self],
            Box::new(move |g, _| {
                let plane = h * w;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    let src = &g.data()[b * len * plane..(b + 1) * len * plane];
                    let dst = (b * c + start) * plane;
                    dx.data_mut()[dst..dst + len * plane].copy_from_slice(src);
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Concatenates NCHW tensors along the channel axis, preserving block order.
pub fn concat_channels<'g, T: Element>(xs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::dim("channel", "concat of zero tensors"))?;
    let values: Vec<_> = xs.iter().map(|x| x.value()).collect();
    let [n, _, h, w] = values[0].dims4()?;
    let mut widths = Vec::with_capacity(xs.len());
    for v in &values {
        let [vn, vc, vh, vw] = v.dims4()?;
        if vn != n {
            return Err(Error::dim("batch", format!("{vn} vs {n} in concat")));
        }
        if (vh, vw) != (h, w) {
            return Err(Error::dim(
                "height",
                format!("spatial {vh}x{vw} vs {h}x{w} in concat"),
            ));
        }
        widths.push(vc);
    }
    let total: usize = widths.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (v, &c) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let out = Tensor {
        shape: vec![n, total, h, w],
        data,
    };
    Ok(first.graph().push_op(
        out,
        xs,
        Box::new(move |g, need| {
            let mut offset = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&c, &needed)| {
                    let start = offset;
                    offset += c;
                    needed.then(|| g.slice_channels(start, c).expect("in-range slice"))
                })
                .collect()
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // Phi(1) from the error function.
        let phi1 = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((gelu_scalar(1.0f64) - phi1).abs() < 1e-15);
        assert!((gelu_scalar(1.0f64) - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn concat_preserves_block_order() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([1, 2, 1, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn([1, 3, 1, 2], |i| 10.0 + i as f64));
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![1, 5, 1, 2]);
        assert_eq!(
            c.value().data(),
            &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]
        );
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 1, 3, 2]));
        assert!(concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn elementwise_shape_mismatch_is_dimension_error() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 2, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 3, 2, 2]));
        let err = a.add(b).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                axis: "channel",
                ..
            }
        ));
    }
}
