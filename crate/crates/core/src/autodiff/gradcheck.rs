use super::{AutodiffError, Graph, Tensor, Var};

/// Outcome of comparing backward-pass gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step).map(|r| r.max_rel_error)
}

/// Checks d f / d inputs coordinate-wise. The relative error of each
/// coordinate uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            msg: format!("step must be positive, got {step}"),
        }
        .into());
    }
    let eval = |xs: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(AutodiffError::NotScalar(v.shape().to_vec()).into());
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let x0 = t.data()[j];
            probe[ti].data_mut()[j] = x0 + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[j] = x0 - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[j] = x0;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
