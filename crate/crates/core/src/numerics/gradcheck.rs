use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Per coordinate the error is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`;
/// the maximum over every coordinate of every parameter is reported.
/// Parameter values are restored exactly afterwards.
pub fn grad_check<F>(params: &mut ParamStore<f64>, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>) -> Result<Var>,
{
    let coords: Vec<(ParamId, usize)> =
        (0..params.len()).map(ParamId).flat_map(|id| (0..params.value(id).len()).map(move |i| (id, i))).collect();
    grad_check_coords(params, h, &coords, f)
}

/// [`grad_check`] restricted to the listed `(parameter, flat index)` pairs.
pub fn grad_check_coords<F>(params: &mut ParamStore<f64>, h: f64, coords: &[(ParamId, usize)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let g = Graph::new(params);
        let loss = f(&g)?;
        g.backward(loss)?.params
    };
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new(p);
        let loss = f(&g)?;
        g.scalar(loss)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for &(id, i) in coords {
        let orig = params.value(id).data()[i];
        params.get_mut(id).value.data_mut()[i] = orig + h;
        let plus = eval(params)?;
        params.get_mut(id).value.data_mut()[i] = orig - h;
        let minus = eval(params)?;
        params.get_mut(id).value.data_mut()[i] = orig;

        let fd = (plus - minus) / (2.0 * h);
        let ad = analytic.get(id).map_or(0.0, |g| g[i]);
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        report.coordinates += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((params.get(id).name.clone(), i));
        }
    }
    Ok(report)
}
