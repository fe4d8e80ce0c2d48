use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing backprop against central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_error: f32,
    pub coordinates: usize,
    /// Coordinates whose `±epsilon` probe crossed a relu or pooling branch
    /// and were therefore not compared.
    pub skipped: usize,
}

fn evaluate<F>(forward: &mut F, params: &ParamSet) -> Result<(f32, u64)>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::InvalidShape("gradient check needs a scalar loss".into()));
    }
    Ok((value.data()[0], tape.branch_pattern()))
}

/// Checks the gradient of the scalar built by `forward` w.r.t. parameter
/// `index` of `params`.
///
/// Coordinates are visited in an order shuffled by `seed` until
/// `max_coordinates` have been compared. A probe whose `±epsilon` evaluations
/// change the tape's branch pattern straddles a kink and is skipped.
/// `forward` is run twice at the unperturbed point first; if the two losses
/// differ the check is refused.
pub fn grad_check<F>(
    params: &mut ParamSet,
    index: usize,
    epsilon: f32,
    max_coordinates: usize,
    seed: u64,
    mut forward: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} outside [1e-4, 1e-2]"
        )));
    }
    if index >= params.len() {
        return Err(Error::Config(format!("no parameter at index {index}")));
    }
    if !params.get(index).trainable() {
        return Err(Error::Config(format!(
            "parameter `{}` is frozen; nothing to check",
            params.get(index).name()
        )));
    }

    let mut tape = Tape::new();
    let loss = forward(&mut tape, params)?;
    let base = tape.value(loss).data()[0];
    let pattern = tape.branch_pattern();
    let (again, _) = evaluate(&mut forward, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::CheckUnreliable(format!(
            "forward returned {base} then {again} at the same point"
        )));
    }
    let grads = tape.backward(loss)?;
    let param = params.get(index);
    let len = param.value().len();
    let analytic: Vec<f32> = match grads.for_param(param) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; len],
    };

    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut max_error = 0.0f32;
    let (mut checked, mut skipped) = (0, 0);
    for &c in &order {
        if checked == max_coordinates {
            break;
        }
        let original = params.get(index).value().data()[c];
        let plus = original + epsilon;
        let minus = original - epsilon;
        params.get_mut(index).value_mut().data_mut()[c] = plus;
        let (up, up_pattern) = evaluate(&mut forward, params)?;
        params.get_mut(index).value_mut().data_mut()[c] = minus;
        let (down, down_pattern) = evaluate(&mut forward, params)?;
        params.get_mut(index).value_mut().data_mut()[c] = original;
        if up_pattern != pattern || down_pattern != pattern {
            skipped += 1;
            continue;
        }

        let numeric = ((up as f64 - down as f64) / (plus as f64 - minus as f64)) as f32;
        let a = analytic[c];
        let err = (a - numeric).abs() / 1f32.max(a.abs()).max(numeric.abs());
        max_error = max_error.max(err);
        checked += 1;
    }
    Ok(GradCheck {
        max_error,
        coordinates: checked,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::tensor::{Parameter, Tensor};

    fn linear_set(seed: u64) -> ParamSet {
        let mut set = ParamSet::new();
        set.push(Parameter::new("w", Tensor::random_normal(&[3, 4], seed, 1.0).unwrap()))
            .unwrap();
        set.push(Parameter::new("b", Tensor::random_normal(&[3], seed + 1, 1.0).unwrap()))
            .unwrap();
        set
    }

    #[test]
    fn linear_layer_passes() {
        let x = Tensor::random_normal(&[4], 9, 1.0).unwrap();
        let w_out = Tensor::random_normal(&[3], 10, 1.0).unwrap();
        let mut set = linear_set(1);
        for index in 0..2 {
            let r = grad_check(&mut set, index, 1e-3, 100, 0, |tape, p| {
                let xv = tape.constant(x.clone());
                let (w, b) = (tape.param(p.get(0)), tape.param(p.get(1)));
                let y = tape.linear(xv, w, b)?;
                tape.weighted_sum(y, &w_out)
            })
            .unwrap();
            assert!(r.max_error < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn softmax_cross_entropy_head_passes() {
        let mut set = ParamSet::new();
        set.push(Parameter::new("z", Tensor::random_normal(&[6], 3, 1.0).unwrap()))
            .unwrap();
        let mut target = vec![0.0; 6];
        target[2] = 1.0;
        let target = Tensor::from_vec(target);
        let r = grad_check(&mut set, 0, 1e-3, 100, 0, |tape, p| {
            let z = tape.param(p.get(0));
            let probs = tape.softmax(z)?;
            tape.cross_entropy(probs, &target)
        })
        .unwrap();
        assert!(r.max_error < 1e-3, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut set = ParamSet::new();
        set.push(Parameter::new("x", Tensor::random_normal(&[5], 4, 1.0).unwrap()))
            .unwrap();
        let r = grad_check(&mut set, 0, 1e-3, 100, 0, |tape, p| {
            let x = tape.param(p.get(0));
            // Forward is x^3 but the backward rule claims 2x.
            let y = tape.custom(
                x,
                |t| t.map(|v| v * v * v),
                |input, _out, g| {
                    Tensor::new(
                        input.shape(),
                        input.data().iter().zip(g.data()).map(|(v, g)| 2.0 * v * g).collect(),
                    )
                    .unwrap()
                },
            );
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(r.max_error > 1e-1, "{r:?}");
    }

    #[test]
    fn nondeterministic_forward_is_refused() {
        let mut set = linear_set(2);
        let calls = Cell::new(0u32);
        let r = grad_check(&mut set, 0, 1e-3, 10, 0, |tape, p| {
            calls.set(calls.get() + 1);
            let w = tape.param(p.get(0));
            let s = tape.sum(w);
            Ok(tape.affine(s, 1.0, calls.get() as f32))
        });
        assert!(matches!(r, Err(Error::CheckUnreliable(_))));
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let mut set = linear_set(3);
        let f = |tape: &mut Tape, p: &ParamSet| {
            let w = tape.param(p.get(0));
            Ok(tape.sum(w))
        };
        assert!(grad_check(&mut set, 0, 1e-5, 10, 0, f).is_err());
        assert!(grad_check(&mut set, 0, 0.1, 10, 0, f).is_err());
    }

    #[test]
    fn probes_across_a_relu_kink_are_skipped() {
        let mut set = ParamSet::new();
        set.push(Parameter::new("x", Tensor::from_vec(vec![0.001, 0.5]))).unwrap();
        let r = grad_check(&mut set, 0, 1e-2, 10, 0, |tape, p| {
            let x = tape.param(p.get(0));
            let y = tape.relu(x);
            Ok(tape.sum(y))
        })
        .unwrap();
        assert_eq!((r.coordinates, r.skipped), (1, 1));
        assert!(r.max_error < 1e-4);
    }
}
