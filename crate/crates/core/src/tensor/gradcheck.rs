use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all input elements of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) where the max occurred.
    pub worst: (usize, usize),
    pub probes: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences with the given step.
///
/// `f` builds its computation on a fresh graph from the supplied input
/// leaves and returns the scalar output node.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(Error::Invalid(format!(
            "grad_check input {i} is not finite"
        )));
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        let y = scalar_of(&g, out)?;
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let y = scalar_of(&g, out)?;
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        probes: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            report.probes += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarRoot(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}
