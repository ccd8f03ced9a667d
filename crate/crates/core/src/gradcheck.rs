//! Central finite-difference check of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;

fn evaluate<F>(store: &ParamStore, forward: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::Shape {
            shape: v.shape().to_vec(),
            reason: "grad_check needs a scalar-valued forward".into(),
        });
    }
    Ok(v.item())
}

/// Compares tape gradients of `forward` against central differences over every
/// entry of every parameter in `store`.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|, |numeric|)`. Parameter
/// values are restored and gradients left holding the analytic result.
pub fn grad_check<F>(store: &mut ParamStore, forward: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let first = evaluate(store, &forward)?;
    let second = evaluate(store, &forward)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    tape.backward(loss, store)?;
    drop(tape);

    let mut worst = 0.0f64;
    let mut worst_at = (String::new(), 0usize);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value().numel();
        for i in 0..n {
            let analytic = store.get(id).grad().data()[i];
            let orig = store.get(id).value().data()[i];
            store.get_mut(id).value_mut()[i] = orig + eps;
            let plus = evaluate(store, &forward);
            store.get_mut(id).value_mut()[i] = orig - eps;
            let minus = evaluate(store, &forward);
            store.get_mut(id).value_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            if rel > worst || rel.is_nan() {
                worst = rel;
                worst_at = (store.get(id).name().to_string(), i);
            }
        }
    }
    log::debug!(
        "grad_check worst {worst:e} at {}[{}]",
        worst_at.0,
        worst_at.1
    );
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn exact_for_linear() {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
        let err = grad_check(
            &mut store,
            |tape, s| {
                let p = tape.param(s, id);
                Ok(tape.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic_at_one() {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::ones([4]).unwrap());
        let err = grad_check(
            &mut store,
            |tape, s| {
                let p = tape.param(s, id);
                let sq = tape.hadamard(p, p)?;
                Ok(tape.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
        assert_eq!(store.get(id).grad().data(), &[2.0; 4]);
        assert_eq!(store.get(id).value().data(), &[1.0; 4]);
    }

    #[test]
    fn detects_non_determinism() {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::ones([1]).unwrap());
        let calls = Cell::new(0.0);
        let res = grad_check(
            &mut store,
            |tape, s| {
                calls.set(calls.get() + 1.0);
                let p = tape.param(s, id);
                Ok(tape.add_scalar(p, calls.get()))
            },
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::ones([1]).unwrap());
        let res = grad_check(&mut store, |tape, s| Ok(tape.param(s, id)), 1e-2);
        assert!(matches!(res, Err(Error::Config(_))));
    }
}
