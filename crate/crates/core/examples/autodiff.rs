//! Record a tiny network on the tape, backpropagate, and compare one
//! gradient entry with a central difference.
//!
//! cargo run --example autodiff

use vizgen::tensor::{ParamSet, Parameter, Tape};
use vizgen::Tensor;

fn loss(params: &ParamSet, x: &Tensor) -> vizgen::Result<(Tape, vizgen::tensor::Var)> {
    let mut tape = Tape::new();
    let w = tape.param(params.get(0));
    let b = tape.param(params.get(1));
    let x = tape.constant(x.clone());
    let h = tape.linear(x, w, b)?;
    let h = tape.tanh(h);
    let p = tape.softmax(h)?;
    let out = tape.cross_entropy(p, &Tensor::from_vec(vec![0.0, 1.0, 0.0]))?;
    Ok((tape, out))
}

fn main() -> vizgen::Result<()> {
    let mut params = ParamSet::new();
    params.push(Parameter::new("w", Tensor::random_normal(&[3, 4], 1, 0.5)?))?;
    params.push(Parameter::new("b", Tensor::zeros(&[3])?))?;
    let x = Tensor::random_normal(&[4], 2, 1.0)?;

    let (mut tape, out) = loss(&params, &x)?;
    let grads = tape.backward(out)?;
    params.accumulate(&grads);
    let analytic = params.get(0).grad().data()[5];

    let h = 1e-3;
    let shifted = |delta: f32| -> vizgen::Result<f32> {
        let mut p = params.clone();
        p.get_mut(0).value_mut().data_mut()[5] += delta;
        let (tape, out) = loss(&p, &x)?;
        Ok(tape.value(out).data()[0])
    };
    let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
    println!("loss {:.6}", tape.value(out).data()[0]);
    println!("dL/dw[1,1]: tape {analytic:.6}, central difference {numeric:.6}");
    Ok(())
}
