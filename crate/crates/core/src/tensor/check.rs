//! Central-difference gradient checks for tape programs.

use super::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of [`gradcheck`] for one input.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// difference when both norms are below `1e-12`.
    pub rel_error: f64,
}

/// Compares backward gradients of the scalar built by `f` against central
/// differences with step `h`, one report per input.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            numeric.data_mut()[j] = (up - down) / (2.0 * h);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.norm().max(numeric.norm());
        let rel_error = if scale < 1e-12 { diff } else { diff / scale };
        reports.push(GradReport {
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(reports)
}

/// Largest relative error over all inputs.
pub fn max_rel_error(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}

/// Finite-difference check of parameter gradients on up to `per_param`
/// evenly spaced entries of each listed parameter. `loss` rebuilds the
/// scalar from scratch for the given store.
pub fn param_gradcheck<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    per_param: usize,
    h: f64,
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    for &id in ids {
        let grad = analytic.params().find(|&(p, _)| p == id).map(|(_, g)| g.clone());
        let numel = store.get(id).numel();
        let stride = numel.div_ceil(per_param.max(1)).max(1);
        for j in (0..numel).step_by(stride) {
            let x0 = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = x0 + h;
            let up = loss(store)?;
            store.get_mut(id).data_mut()[j] = x0 - h;
            let down = loss(store)?;
            store.get_mut(id).data_mut()[j] = x0;
            let num = (up - down) / (2.0 * h);
            let ana = grad.as_ref().map_or(0.0, |g| g.data()[j]);
            diff2 += (num - ana) * (num - ana);
            a2 += ana * ana;
            n2 += num * num;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    Ok(if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale })
}
