//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`; the plain
    /// absolute difference when both norms vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Below this gradient norm central differences are dominated by rounding
/// noise, so the absolute difference is reported instead.
pub const NOISE_FLOOR: f64 = 1e-7;

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = libm::sqrt(analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum());
    let na = libm::sqrt(analytic.iter().map(|a| a * a).sum());
    let nn = libm::sqrt(numeric.iter().map(|a| a * a).sum());
    let denom = na.max(nn);
    if denom < NOISE_FLOOR {
        diff
    } else {
        diff / denom
    }
}

/// Checks the gradient of a scalar `f` with respect to the parameters
/// `which` (all of them when `None`).
///
/// `f` must be deterministic: it is evaluated twice at the base point and
/// the two losses must agree bitwise.
pub fn grad_check<F>(
    store: &ParamStore,
    which: Option<&[ParamId]>,
    f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(contract("grad_check step must lie in [1e-6, 1e-4]"));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape)?;
        if tape.value(loss).numel() != 1 {
            return Err(contract("grad_check needs a scalar function"));
        }
        Ok(tape.value(loss).item())
    };

    let (base, grads) = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        (tape.value(loss).item(), tape.param_grads())
    };
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Harness(alloc::format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let ids: Vec<ParamId> = match which {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut probe = store.clone();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.value(id).numel();
        let analytic = grads
            .get(id)
            .map_or_else(|| alloc::vec![0.0; numel], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(numel);
        for k in 0..numel {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + step;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - step;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let rel_error = relative_error(&analytic, &numeric);
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            rel_error,
            analytic_norm: libm::sqrt(analytic.iter().map(|a| a * a).sum()),
            passed: rel_error < tolerance,
        });
    }
    let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_error,
        tolerance,
    })
}

/// Checks the gradient of `f` with respect to a single input tensor.
pub fn grad_check_input<F>(x: &Tensor, f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", ParamGroup::Other, x.clone());
    grad_check(
        &store,
        None,
        |tape| {
            let v = tape.param(id);
            f(tape, v)
        },
        step,
        tolerance,
    )
}
