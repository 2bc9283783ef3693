//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences, coordinate by coordinate.
///
/// `f` builds the computation from the input node to a scalar output on the
/// provided graph; the numeric side only ever evaluates it forward, so the
/// comparison is independent of the backward rules it checks. Returns the
/// maximum relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }

    let mut graph = Graph::new();
    let input = graph.variable(x.clone());
    let out = f(&mut graph, input)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check requires a scalar function, got shape {:?}",
            graph.value(out).shape()
        )));
    }
    graph.backward(out)?;
    let analytic: Vec<f64> = match graph.grad(input) {
        Some(g) => g.to_vec(),
        // No contribution reached the input: the analytic gradient is zero.
        None => vec![0.0; x.numel()],
    };

    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.constant(point.clone());
        let out = f(&mut g, id)?;
        Ok(g.value(out).item())
    };

    let mut max_rel = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = x.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_near_exact() {
        let x = Tensor::new(vec![6], vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]).unwrap();
        let err = finite_diff_check(|g, x| Ok(g.sum(x)), &x, 1e-4).unwrap();
        assert!(err <= 1e-9, "linear fd error {err}");
    }

    #[test]
    fn sigmoid_sum_matches() {
        let x = Tensor::new(vec![5], vec![0.5, -0.25, 1.5, -1.0, 0.1]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "sigmoid fd error {err}");
    }

    #[test]
    fn rejects_non_scalar_function() {
        let x = Tensor::zeros(vec![3]);
        assert!(finite_diff_check(|g, x| Ok(g.relu(x)), &x, 1e-5).is_err());
    }
}
