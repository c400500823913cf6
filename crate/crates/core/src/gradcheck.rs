//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{GradStore, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element and its two gradient estimates.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
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
        self.max_rel_error() < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<28} max_rel_err={:.3e} (elem {} analytic={:.6e} numeric={:.6e})",
                p.name, p.max_rel_error, p.worst.0, p.worst.1, p.worst.2
            )?;
        }
        Ok(())
    }
}

/// Redraws the listed parameters uniformly in `[-scale, scale]`.
///
/// Checks on freshly initialised models see gradients near the noise floor of
/// central differences; larger weights keep them measurable.
pub fn redraw_uniform<R: rand::Rng + ?Sized>(
    params: &mut ParamStore,
    ids: &[ParamId],
    scale: f64,
    rng: &mut R,
) {
    for &id in ids {
        for v in params.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..=scale);
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backward gradients of the scalar built by `f` against
/// `(f(p+ε) - f(p-ε)) / 2ε` for every element of every listed parameter.
///
/// `f` must be deterministic in the parameter values; two forward passes that
/// disagree are rejected.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &mut ParamStore,
    ids: &[ParamId],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_>) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    fn eval<F>(f: &mut F, params: &ParamStore) -> Result<f64>
    where
        F: FnMut(&mut Tape<'_>) -> Result<Var>,
    {
        let mut tape = Tape::frozen(params);
        let out = f(&mut tape)?;
        Ok(tape.scalar(out))
    }

    let first = eval(&mut f, params)?;
    let second = eval(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::invalid(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let mut grads = GradStore::new(params);
    {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out)?.accumulate_into(&mut grads);
    }

    let mut report = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = params.get(id).numel();
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for i in 0..n {
            let original = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = original + epsilon;
            let plus = eval(&mut f, params);
            params.get_mut(id).data_mut()[i] = original - epsilon;
            let minus = eval(&mut f, params);
            params.get_mut(id).data_mut()[i] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let analytic = grads.get(id).data()[i];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = (i, analytic, numeric);
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance,
    })
}
