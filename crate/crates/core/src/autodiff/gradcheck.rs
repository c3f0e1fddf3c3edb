use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Compares analytic gradients against central finite differences.
///
/// `f` builds a scalar loss on a fresh tape. Returns the maximum over all
/// coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, store: &mut ParamStore, ids: &[ParamId], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };
    let base = eval(store)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::ContractViolation(
            "grad_check needs a deterministic function; two evaluations differ".into(),
        ));
    }

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| {
            store
                .grad(*id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.value(*id).len()])
        })
        .collect();
    store.zero_grad();

    let mut worst: f64 = 0.0;
    for (id, grad) in ids.iter().zip(&analytic) {
        for (i, &g) in grad.iter().enumerate() {
            let orig = store.value(*id).data()[i];
            store.value_mut(*id).data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(*id).data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(*id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = g.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((g - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
