//! Central-difference gradient oracle.
//!
//! This is the validation path for every analytic gradient in the crate; it
//! never participates in training. For each trainable entry the loss is
//! evaluated at ±epsilon and compared against the provided analytic value.

use crate::error::{Result, VoltError};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Max over all trainable entries of
/// `|analytic − central| / (|central| + 1e-8)`.
pub fn grad_check<F>(
    loss: F,
    params: &ParamStore,
    analytic: &Grads,
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(VoltError::config("grad_check: epsilon must be positive"));
    }
    let mut report = GradCheckReport::default();
    let mut work = params.clone();

    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();

    for name in &names {
        let len = params.tensor(name)?.len();
        let analytic_t = analytic
            .get(name)
            .ok_or_else(|| VoltError::shape(format!("grad_check: no analytic gradient for {name}")))?;
        if analytic_t.len() != len {
            return Err(VoltError::shape(format!(
                "grad_check: analytic gradient length mismatch for {name}"
            )));
        }
        for i in 0..len {
            let original = work.tensor(name)?.data()[i];

            work.get_mut(name)?.tensor.data_mut()[i] = original + epsilon;
            let plus = loss(&work)?;
            work.get_mut(name)?.tensor.data_mut()[i] = original - epsilon;
            let minus = loss(&work)?;
            work.get_mut(name)?.tensor.data_mut()[i] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(VoltError::numeric(format!(
                    "grad_check: non-finite loss while perturbing {name}[{i}]"
                )));
            }
            let central = (plus - minus) / (2.0 * epsilon);
            let rel = (analytic_t.data()[i] - central).abs() / (central.abs() + 1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    /// f(x) = Σ x², analytic gradient 2x; quadratics are exact for central
    /// differences up to float roundoff.
    #[test]
    fn quadratic_matches_central_difference() {
        let mut params = ParamStore::new();
        params
            .insert(
                "x",
                Tensor::new(vec![1, 4], vec![0.5, -1.5, 2.0, 0.1]).unwrap(),
                true,
            )
            .unwrap();

        let loss = |p: &ParamStore| -> crate::error::Result<f64> {
            Ok(p.tensor("x")?.data().iter().map(|v| v * v).sum())
        };
        // Analytic gradient from the graph: Σ x² = x·xᵀ.
        let mut g = Graph::new();
        let x = g.param(params.tensor("x").unwrap().clone());
        let sq = g.matmul_nt(x, x).unwrap();
        let l = g.sum_all(sq).unwrap();
        let mut grads_by_node = g.backward(l).unwrap();
        let mut analytic = Grads::new();
        analytic.insert("x", grads_by_node.take(x).unwrap());

        let report = grad_check(loss, &params, &analytic, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut params = ParamStore::new();
        params
            .insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        params
            .insert("frozen", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), false)
            .unwrap();

        let loss = |p: &ParamStore| -> crate::error::Result<f64> {
            let x = p.tensor("x")?;
            let f = p.tensor("frozen")?;
            Ok(x.data().iter().sum::<f64>() + f.data().iter().sum::<f64>())
        };
        // No analytic gradient provided for the frozen entry; the check
        // must not ask for one.
        let mut analytic = Grads::new();
        analytic.insert("x", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let report = grad_check(loss, &params, &analytic, 1e-5).unwrap();
        assert_eq!(report.entries_checked, 2);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let mut params = ParamStore::new();
        params
            .insert("x", Tensor::new(vec![1], vec![0.0]).unwrap(), true)
            .unwrap();
        // ln(x) at x = 0: the −epsilon probe lands on NaN.
        let loss =
            |p: &ParamStore| -> crate::error::Result<f64> { Ok(p.tensor("x")?.data()[0].ln()) };
        let mut analytic = Grads::new();
        analytic.insert("x", Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(grad_check(loss, &params, &analytic, 1e-5).is_err());
    }
}
