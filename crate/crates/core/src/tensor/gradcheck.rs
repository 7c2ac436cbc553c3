use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences `(f(x+eps) − f(x−eps)) / 2eps` for every input
/// coordinate and returns the largest relative error, where the relative
/// error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "grad_check step {eps} outside (0, 1e-2]"
        )));
    }

    let mut graph = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut graph, &vars)?;
    let value = graph.value(out);
    if value.numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    if !value.data()[0].is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.numel()))
        .collect();

    let eval = |shifted: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = shifted
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let y = g.scalar_value(out);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut worst = 0.0f64;
    let mut shifted: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let x = input.data()[k];
            shifted[which].data_mut()[k] = x + eps;
            let plus = eval(&shifted)?;
            shifted[which].data_mut()[k] = x - eps;
            let minus = eval(&shifted)?;
            shifted[which].data_mut()[k] = x;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[which][k];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
