//! Central finite-difference validation of tape gradients.

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Worst discrepancy found for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps entries whose true
/// gradient is zero from dividing by rounding noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients against central differences with step `h` for
/// every entry of every unfrozen parameter. `loss_fn` must be deterministic.
pub fn check_gradients<F>(
    store: &ParameterStore,
    h: f64,
    tolerance: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParameterStore) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = loss_fn(&tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let tape = Tape::new();
        let loss = loss_fn(&tape, s)?;
        tape.check_finite()?;
        Ok(tape.scalar(loss))
    };

    let mut probe = store.clone();
    let mut params = Vec::new();
    for name in store.trainable_names() {
        let len = store.get(name)?.len();
        let analytic = grads
            .get(name)
            .map(|g| g.iter().copied().collect::<Vec<_>>())
            .unwrap_or_else(|| vec![0.0; len]);
        let mut check = ParamCheck {
            name: name.to_string(),
            entries: len,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (k, &grad) in analytic.iter().enumerate() {
            let original = store.get(name)?.value.as_slice().expect("standard layout")[k];
            set_entry(&mut probe, name, k, original + h)?;
            let plus = eval(&probe)?;
            set_entry(&mut probe, name, k, original - h)?;
            let minus = eval(&probe)?;
            set_entry(&mut probe, name, k, original)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad, numeric, 1e-6);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = grad;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tolerance })
}

fn set_entry(store: &mut ParameterStore, name: &str, k: usize, value: f64) -> Result<()> {
    store
        .get_mut(name)?
        .value
        .as_slice_mut()
        .expect("standard layout")[k] = value;
    Ok(())
}
