//! Central-difference verification of analytic gradients (always `f64`).

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares supplied analytic gradients of `f` at `point` against central
/// differences and returns the worst relative error.
pub fn compare_gradients(
    f: impl Fn(&Tensor<f64>) -> f64,
    point: &Tensor<f64>,
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(analytic.len(), point.len());
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe);
        probe.data_mut()[i] = x - eps;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * eps)));
    }
    worst
}

/// Gradient check of a scalar function built on a graph from one input node.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
{
    let mut g = Graph::new();
    let x = g.variable(point.clone());
    let loss = f(&mut g, x);
    g.backward(loss).expect("scalar loss");
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);
    let eval = |p: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let loss = f(&mut g, x);
        g.item(loss)
    };
    compare_gradients(eval, point, &analytic, eps)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Checks every parameter of `store` against central differences of the loss
/// built by `f`. With `max_coords`, at most that many evenly spaced
/// coordinates per parameter are probed.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    store.zero_grads();
    store.accumulate(&g);

    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in coords {
            let analytic = store.grad(id).data()[i];
            let x = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x + eps;
            let up = eval(store, &f)?;
            store.value_mut(id).data_mut()[i] = x - eps;
            let down = eval(store, &f)?;
            store.value_mut(id).data_mut()[i] = x;
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * eps)));
        }
        report.per_param.push((store.name(id).to_string(), worst));
    }
    store.zero_grads();
    Ok(report)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.item(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_one() {
        let err = grad_check(|g, x| g.mul(x, x), &Tensor::scalar(1.0), 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let f = |p: &Tensor<f64>| p.data()[0] * p.data()[0];
        let point = Tensor::scalar(1.5);
        assert!(compare_gradients(f, &point, &[3.0], 1e-5) < 1e-8);
        assert!(compare_gradients(f, &point, &[3.3], 1e-5) > 1e-2);
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-3, 0.0), 1e-3);
        assert_eq!(relative_error(10.0, 11.0), 1.0 / 11.0);
    }
}
