use super::graph::Var;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::par;

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl<'g, T: Element> Var<'g, T> {
    /// Channel-axis layer norm: every `(n, y, x)` position is normalised over
    /// its `C` values, then scaled by `gamma` and shifted by `beta` per channel.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let [n, c, h, w] = x.dims4()?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::dim(
                "channel",
                format!(
                    "layer norm affine {:?}/{:?} does not match {c} channels",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let plane = h * w;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_c = T::one() / T::from_f64(c as f64);

        // normalised values and per-position inverse std
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); n * plane];
        {
            let xd = x.data();
            let per_sample: Vec<(Vec<T>, Vec<T>)> = par::map_range(n, |b| {
                let src = &xd[b * c * plane..(b + 1) * c * plane];
                let mut mean = vec![T::zero(); plane];
                for ch in src.chunks(plane) {
                    for (m, &v) in mean.iter_mut().zip(ch) {
                        *m = *m + v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m * inv_c);
                let mut var = vec![T::zero(); plane];
                for ch in src.chunks(plane) {
                    for ((s, &v), &m) in var.iter_mut().zip(ch).zip(&mean) {
                        let d = v - m;
                        *s = *s + d * d;
                    }
                }
                let r: Vec<T> = var
                    .iter()
                    .map(|&s| (s * inv_c + eps).sqrt().recip())
                    .collect();
                let mut xh = vec![T::zero(); c * plane];
                for (dst, ch) in xh.chunks_mut(plane).zip(src.chunks(plane)) {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = (ch[i] - mean[i]) * r[i];
                    }
                }
                (xh, r)
            });
            for (b, (xh, r)) in per_sample.into_iter().enumerate() {
                xhat[b * c * plane..(b + 1) * c * plane].copy_from_slice(&xh);
                rstd[b * plane..(b + 1) * plane].copy_from_slice(&r);
            }
        }
        let mut out = vec![T::zero(); x.numel()];
        for (i, (o, &v)) in out.iter_mut().zip(&xhat).enumerate() {
            let ch = (i / plane) % c;
            *o = v * gv.data()[ch] + bv.data()[ch];
        }
        let out = Tensor::new([n, c, h, w], out)?;

        Ok(self.graph().push_op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, need| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in 0..plane {
                            dgamma[ch] = dgamma[ch] + gd[base + i] * xhat[base + i];
                            dbeta[ch] = dbeta[ch] + gd[base + i];
                        }
                    }
                }
                let dx = need[0].then(|| {
                    // dx = rstd * (dy*gamma - mean(dy*gamma) - xhat * mean(dy*gamma*xhat))
                    let mut dx = vec![T::zero(); n * c * plane];
                    for b in 0..n {
                        let mut m1 = vec![T::zero(); plane];
                        let mut m2 = vec![T::zero(); plane];
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let gam = gv.data()[ch];
                            for i in 0..plane {
                                let dyg = gd[base + i] * gam;
                                m1[i] = m1[i] + dyg;
                                m2[i] = m2[i] + dyg * xhat[base + i];
                            }
                        }
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let gam = gv.data()[ch];
                            for i in 0..plane {
                                let dyg = gd[base + i] * gam;
                                dx[base + i] = rstd[b * plane + i]
                                    * (dyg - m1[i] * inv_c - xhat[base + i] * m2[i] * inv_c);
                            }
                        }
                    }
                    Tensor::new([n, c, h, w], dx).expect("layer norm grad shape")
                });
                vec![
                    dx,
                    Some(Tensor::new([c], dgamma).expect("gamma grad")),
                    Some(Tensor::new([c], dbeta).expect("beta grad")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor};

    fn run(x: Tensor<f64>, gamma: f64, beta: f64) -> Tensor<f64> {
        let c = x.shape()[1];
        let g = Graph::new();
        let x = g.constant(x);
        let ga = g.constant(Tensor::full([c], gamma));
        let be = g.constant(Tensor::full([c], beta));
        (*x.layer_norm(ga, be).unwrap().value()).clone()
    }

    #[test]
    fn two_channel_position() {
        let y = run(Tensor::new([1, 2, 1, 1], vec![1.0, 3.0]).unwrap(), 1.0, 0.0);
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_channels_give_beta() {
        let y = run(Tensor::full([1, 4, 2, 3], 5.5), 2.0, 0.25);
        assert!(y.data().iter().all(|&v| v == 0.25));
    }
}
