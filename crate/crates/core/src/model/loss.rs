use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Checks that `target` matches the `N x H x W` layout of `logits` and only
/// holds class ids below `k` or `ignore_index`.
fn validate_target<T: Element>(
    logits: &Tensor<T>,
    target: &[u8],
    ignore_index: u8,
) -> Result<[usize; 4]> {
    let [n, k, h, w] = logits.dims4()?;
    if target.len() != n * h * w {
        return Err(Error::dim(
            "numel",
            format!(
                "target has {} labels, logits cover {n}x{h}x{w}",
                target.len()
            ),
        ));
    }
    if let Some((i, &t)) = target
        .iter()
        .enumerate()
        .find(|&(_, &t)| t != ignore_index && usize::from(t) >= k)
    {
        return Err(Error::Validation(format!(
            "class id {t} at pixel {i} is outside 0..{k}"
        )));
    }
    Ok([n, k, h, w])
}

/// Numerically stable softmax over the class axis of an NCHW tensor.
pub fn softmax_channels<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = logits.dims4()?;
    let plane = h * w;
    let mut out = vec![T::zero(); logits.numel()];
    let d = logits.data();
    for b in 0..n {
        for i in 0..plane {
            let at = |c: usize| (b * k + c) * plane + i;
            let max = (0..k).fold(T::neg_infinity(), |m, c| m.max(d[at(c)]));
            let mut z = T::zero();
            for c in 0..k {
                let e = (d[at(c)] - max).exp();
                out[at(c)] = e;
                z = z + e;
            }
            for c in 0..k {
                out[at(c)] = out[at(c)] / z;
            }
        }
    }
    Tensor::new([n, k, h, w], out)
}

/// Per-pixel argmax over classes; ties resolve to the lowest class id.
pub fn argmax_channels<T: Element>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + i] > d[(b * k + best) * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

impl<'g, T: Element> Var<'g, T> {
    /// Mean negative log-likelihood over pixels whose label is not
    /// `ignore_index`. Zero, with zero gradient, when every pixel is ignored.
    pub fn cross_entropy(self, target: &[u8], ignore_index: u8) -> Result<Var<'g, T>> {
        let logits = self.value();
        let [n, k, h, w] = validate_target(&logits, target, ignore_index)?;
        let probs = softmax_channels(&logits)?;
        let plane = h * w;
        let counted = target.iter().filter(|&&t| t != ignore_index).count();
        let mut total = T::zero();
        for b in 0..n {
            for i in 0..plane {
                let t = target[b * plane + i];
                if t == ignore_index {
                    continue;
                }
                let at = |c: usize| (b * k + c) * plane + i;
                // -log softmax via log-sum-exp, accurate for saturated logits
                let d = logits.data();
                let max = (0..k).fold(T::neg_infinity(), |m, c| m.max(d[at(c)]));
                let lse = (0..k)
                    .fold(T::zero(), |s, c| s + (d[at(c)] - max).exp())
                    .ln()
                    + max;
                total = total + (lse - d[at(usize::from(t))]);
            }
        }
        let scale = if counted == 0 {
            T::zero()
        } else {
            T::one() / T::from_f64(counted as f64)
        };
        let loss = Tensor::scalar(total * scale);
        let target = target.to_vec();
        Ok(self.graph().push_op(
            loss,
            &[self],
            Box::new(move |g, _| {
                let gs = g.data()[0] * scale;
                let mut dx = vec![T::zero(); n * k * plane];
                for b in 0..n {
                    for i in 0..plane {
                        let t = target[b * plane + i];
                        if t == ignore_index {
                            continue;
                        }
                        for c in 0..k {
                            let at = (b * k + c) * plane + i;
                            let onehot = if c == usize::from(t) {
                                T::one()
                            } else {
                                T::zero()
                            };
                            dx[at] = (probs.data()[at] - onehot) * gs;
                        }
                    }
                }
                vec![Some(Tensor::new([n, k, h, w], dx).expect("ce grad shape"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn uniform_logits_give_log_k() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 5, 2, 2]));
        let l = x.cross_entropy(&[0, 1, 2, 4], 255).unwrap();
        assert!((l.value().data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_class() {
        let g = Graph::<f64>::new();
        let mut t = Tensor::zeros([1, 3, 1, 1]);
        t.data_mut()[2] = 1000.0;
        let l = g.constant(t).cross_entropy(&[2], 255).unwrap();
        assert!(l.value().data()[0] < 1e-6);
    }

    #[test]
    fn all_ignored_is_zero_with_zero_grad() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([1, 3, 2, 1], |i| i as f64), true);
        let l = x.cross_entropy(&[255, 255], 255).unwrap();
        assert_eq!(l.value().data(), &[0.0]);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 3, 1, 2]));
        let err = x.cross_entropy(&[0, 3], 255).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f64>::new([1, 3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), vec![0, 1]);
    }
}
