use super::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape)?;
    let loss = f(&tape, &bound)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NumericDomain(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of a scalar objective against central finite
/// differences over every trainable coordinate of `store`.
///
/// Returns `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
/// The floor keeps coordinates whose gradient is below finite-difference
/// resolution from dominating the maximum.
/// The store is restored to its original values before returning.
pub fn grad_check<F>(store: &mut ParamStore, epsilon: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&Tape, &Bound) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }

    let tape = Tape::new();
    let bound = store.bind(&tape)?;
    let loss = f(&tape, &bound)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NumericDomain("objective is not finite".into()));
    }
    let grads = tape.backward(loss)?;

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, _, t)| t.requires_grad)
        .map(|(id, _, t)| (id, t.len()))
        .collect();

    let mut worst = 0.0_f64;
    for (id, len) in ids {
        let analytic = grads
            .get(bound[id])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).values()[k];
            store.get_mut(id).values_mut()[k] = orig + epsilon;
            let plus = eval(store, &mut f);
            store.get_mut(id).values_mut()[k] = orig - epsilon;
            let minus = eval(store, &mut f);
            store.get_mut(id).values_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
