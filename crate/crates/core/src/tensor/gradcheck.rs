use super::{Float, Graph, ParamStore, Result, Tensor, TensorError, Var};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).item() as f64)
}

/// Largest relative disagreement between backward and central differences.
///
/// `f` must map its input to a scalar. It is evaluated twice at `x` first
/// and rejected if the results differ.
pub fn grad_check<F>(f: F, x: &Tensor, eps: Float) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    let first = g.value(out).item() as f64;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic((first - second).abs()));
    }
    g.backward(out)?;
    let analytic: Vec<Float> = g
        .grad(v)
        .map(<[Float]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &grad) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps as f64);
        worst = worst.max(rel_err(grad as f64, numeric));
    }
    Ok(worst)
}

/// Result of checking every scalar of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// [`grad_check`] over every scalar in `store`, where `f` builds a scalar
/// loss from parameter leaves of the given graph.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: Float) -> Result<ParamCheck>
where
    F: for<'p> Fn(&mut Graph<'p>) -> Result<Var>,
{
    let loss_at = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok(g.value(out).item() as f64)
    };
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    let first = g.value(out).item() as f64;
    let second = loss_at(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic((first - second).abs()));
    }
    g.backward(out)?;
    let mut grads = super::Gradients::zeros_like(store);
    g.accumulate_param_grads(&mut grads);
    drop(g);

    let mut probe = store.clone();
    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss_at(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss_at(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps as f64);
            let err = rel_err(grads.get(id)[i] as f64, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", store.name(id));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
