use super::{Binder, Graph, NumericsError, ParamSet, Tensor, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (numerically) zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Worst relative discrepancy between [`Graph::backward`] and central
/// differences of the scalar function `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let zeros = Tensor::zeros(point.shape());
    let analytic = grads.get(x).unwrap_or(&zeros);
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" });
        }
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over named parameters.
///
/// `f` builds a scalar from parameters fetched through the binder. When
/// `max_coords` is set, only that many evenly spaced coordinates of each
/// tensor are probed.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &mut Binder) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let mut binder = Binder::trainable(params);
    let y = f(&mut g, &mut binder)?;
    let mut grads = g.backward(y)?;
    let analytic = binder.collect(&mut grads);

    let eval = |p: &ParamSet| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(p);
        let y = f(&mut g, &mut b)?;
        Ok(g.value(y).item())
    };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(NumericsError::NonFinite { op: "grad_check" });
            }
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}
