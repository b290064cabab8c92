use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Evaluates a scalar loss on a fresh tape given leaf variables for each parameter.
pub trait LossFn: Fn(&Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&Tape, &[Var]) -> Result<Var>> LossFn for F {}

fn evaluate(loss_fn: &impl LossFn, point: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars = point
        .iter()
        .map(|p| tape.leaf(p.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&tape, &vars)?;
    Ok(tape.scalar_value(loss))
}

/// Analytic gradients of `loss_fn` at `point`, one tensor per parameter.
pub fn analytic_gradients(loss_fn: &impl LossFn, point: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = point
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&tape, &vars)?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

/// Largest `|analytic - central difference| / max(1, |central difference|)` over
/// every scalar entry of every parameter.
pub fn grad_check(loss_fn: impl LossFn, point: &[Tensor], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Check(format!("eps must be positive, got {eps}")));
    }
    let first = evaluate(&loss_fn, point)?;
    let second = evaluate(&loss_fn, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Check(format!(
            "loss is not deterministic: {first} then {second}"
        )));
    }

    let (_, analytic) = analytic_gradients(&loss_fn, point)?;
    let mut probe: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..point[p].len() {
            let original = point[p].data()[i];
            probe[p].data_mut()[i] = original + eps;
            let plus = evaluate(&loss_fn, &probe)?;
            probe[p].data_mut()[i] = original - eps;
            let minus = evaluate(&loss_fn, &probe)?;
            probe[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
