use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords: usize,
}

/// Compares the autodiff gradient of scalar `f` at `x` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let y = f(xv)?;
        check_scalar(&y.value(), "analytic")?;
        let grads = g.backward(y)?;
        grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |probe: Tensor<f64>, coord: usize| -> Result<f64> {
        let g = Graph::new();
        let y = f(g.constant(probe))?;
        let v = y.value();
        check_scalar(&v, "probe")?;
        let v = v.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is {v} when perturbing coordinate {coord}"
            )));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        coords: x.numel(),
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "analytic gradient is {a} at coordinate {i}"
            )));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

fn check_scalar(v: &Tensor<f64>, what: &str) -> Result<()> {
    if v.numel() != 1 {
        return Err(Error::dim(
            "numel",
            format!("{what} objective must be scalar, got {:?}", v.shape()),
        ));
    }
    Ok(())
}
