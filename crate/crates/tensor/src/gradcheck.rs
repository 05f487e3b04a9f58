//! Central finite-difference gradient checker.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error `|a − b| / max(1e−6, |a| + |b|)`.
///
/// The floor keeps coordinates whose true gradient is zero (a key bias under
/// softmax, say) from reporting central-difference round-off as error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences with step `eps`.
///
/// `max_per_param` limits how many coordinates of each parameter are probed;
/// the probed coordinates are spread evenly over the tensor.
pub fn finite_difference_check<F>(
    params: &ParamStore,
    eps: f64,
    max_per_param: Option<usize>,
    loss: F,
) -> Result<FdReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = loss(&mut g, &bound)?;
    let mut grads = g.backward(out)?;
    let analytic = params.collect_grads(&bound, &mut grads);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let v = loss(&mut g, &b)?;
        g.value(v).item()
    };

    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, name) in params.names().iter().enumerate() {
        let n = params.values()[pi].len();
        let probes: Vec<usize> = match max_per_param {
            Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
            _ => (0..n).collect(),
        };
        for j in probes {
            let orig = work.values()[pi].data()[j];
            work.values_mut()[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.values_mut()[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.values_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[pi].data()[j], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with A = [[2, 1], [1, 3]]
        let mut p = ParamStore::new();
        p.insert("x", Tensor::column(&[0.7, -1.3]));
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let report = finite_difference_check(&p, 1e-5, None, |g, b| {
            let x = b.get("x")?;
            let am = g.constant(a.clone());
            let ax = g.matmul(am, x)?;
            g.dot(x, ax)
        })
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::row(&[1.0, 2.0]));
        let report = finite_difference_check(&p, 1e-5, None, |g, _| {
            Ok(g.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }
}
