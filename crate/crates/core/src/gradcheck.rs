//! Independent finite-difference verification of reverse-mode gradients.

use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::NumericError;

/// Relative error metric: |a - b| / max(|a|, |b|, 1e-8).
pub fn relative_error<S: Scalar>(a: S, b: S) -> S {
    let floor = S::from_f64_lit(1e-8);
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry<S> {
    pub name: String,
    pub max_rel_err: S,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<S> {
    pub entries: Vec<GradCheckEntry<S>>,
    pub tolerance: S,
}

impl<S: Scalar> GradCheckReport<S> {
    pub fn max_rel_err(&self) -> S {
        self.entries.iter().fold(S::zero(), |m, e| m.max(e.max_rel_err))
    }

    pub fn all_within(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }
}

/// Compare the reverse-mode gradient of `loss_and_grad` against central
/// finite differences of `loss` with step `step`, per parameter entry.
///
/// `loss_and_grad` must accumulate gradients into the store (which is zeroed
/// first); `loss` must be the same deterministic function evaluated without
/// gradient tracking. Frozen parameters are checked for an exactly-zero
/// reverse-mode gradient instead of a finite-difference match.
pub fn grad_check<S: Scalar>(
    loss: impl Fn(&ParameterStore<S>) -> Result<S, NumericError>,
    loss_and_grad: impl Fn(&mut ParameterStore<S>) -> Result<S, NumericError>,
    params: &mut ParameterStore<S>,
    step: S,
    tolerance: S,
) -> Result<GradCheckReport<S>, NumericError> {
    assert!(step > S::zero(), "finite-difference step must be positive");
    params.zero_grads();
    loss_and_grad(params)?;

    let names: Vec<String> = params.names().map(String::from).collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let analytic = params.grad(&name)?.clone();
        if params.is_frozen(&name) {
            let zero = analytic.data().iter().all(|&g| g == S::zero());
            entries.push(GradCheckEntry {
                name,
                max_rel_err: if zero { S::zero() } else { S::infinity() },
                flagged: !zero,
            });
            continue;
        }
        let mut max_err = S::zero();
        for i in 0..analytic.len() {
            let original = params.value(&name)?.data()[i];
            let mut bumped = params.value(&name)?.clone();
            bumped.data_mut()[i] = original + step;
            params.set_value(&name, bumped.clone())?;
            let hi = loss(params)?;
            bumped.data_mut()[i] = original - step;
            params.set_value(&name, bumped.clone())?;
            let lo = loss(params)?;
            bumped.data_mut()[i] = original;
            params.set_value(&name, bumped)?;
            let fd = (hi - lo) / (S::from_f64_lit(2.0) * step);
            max_err = max_err.max(relative_error(analytic.data()[i], fd));
        }
        let flagged = max_err > tolerance;
        entries.push(GradCheckEntry { name, max_rel_err: max_err, flagged });
    }
    // restore the analytic gradients the caller may want to inspect
    params.zero_grads();
    loss_and_grad(params)?;
    Ok(GradCheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Op, Tape};
    use crate::tensor::TensorBase;

    type T = TensorBase<f64>;

    fn quadratic(store: &ParameterStore<f64>) -> Result<(Tape<f64>, crate::graph::NodeId), NumericError> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = binding.id("x")?;
        let sq = tape.apply(Op::Square, &[x])?;
        let loss = tape.apply(Op::Sum, &[sq])?;
        Ok((tape, loss))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParameterStore::new();
        store.insert("x", T::vector(vec![1.5, -0.7, 3.2]));
        let report = grad_check(
            |p| quadratic(p).map(|(t, l)| t.value(l).item()),
            |p| {
                let mut tape = Tape::new();
                let b = p.bind(&mut tape);
                let sq = tape.apply(Op::Square, &[b.id("x")?])?;
                let loss = tape.apply(Op::Sum, &[sq])?;
                let grads = tape.backward(loss)?;
                p.accumulate_from(&tape, &b, &grads)?;
                Ok(tape.value(loss).item())
            },
            &mut store,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.all_within(), "max err {}", report.max_rel_err());
    }

    #[test]
    fn frozen_entry_reports_zero() {
        let mut store = ParameterStore::new();
        store.insert("x", T::vector(vec![2.0]));
        store.insert("c", T::vector(vec![5.0]));
        store.set_frozen("c", true).unwrap();
        let eval = |p: &ParameterStore<f64>| -> Result<f64, NumericError> {
            Ok(p.value("x")?.data()[0].powi(2))
        };
        let report = grad_check(
            eval,
            |p| {
                let mut tape = Tape::new();
                let b = p.bind(&mut tape);
                let sq = tape.apply(Op::Square, &[b.id("x")?])?;
                let loss = tape.apply(Op::Sum, &[sq])?;
                let grads = tape.backward(loss)?;
                p.accumulate_from(&tape, &b, &grads)?;
                Ok(tape.value(loss).item())
            },
            &mut store,
            1e-5,
            1e-8,
        )
        .unwrap();
        let frozen = report.entries.iter().find(|e| e.name == "c").unwrap();
        assert_eq!(frozen.max_rel_err, 0.0);
        assert!(!frozen.flagged);
    }
}
