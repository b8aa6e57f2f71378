//! The reverse-mode tape: build a small graph, backpropagate and check the
//! gradients against central differences.

use colorproxy::tensor::gradcheck::check_scalar;
use colorproxy::tensor::{Tape, Tensor};

fn main() -> colorproxy::Result<()> {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([2, 3], &[0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    let w = tape.leaf(Tensor::from_f64([3, 4], &(0..12).map(|i| (i as f64 - 6.0) / 10.0).collect::<Vec<_>>())?);
    let b = tape.leaf(Tensor::zeros([4]));
    let loss = x.affine(w, b)?.relu()?.softmax_cross_entropy(&[1, 3])?;
    let grads = tape.backward(loss)?;
    println!("loss {:.5}", loss.value().item());
    println!("dL/dW = {:?}", grads.get(&w).unwrap().data());

    let inputs = [x.value().as_ref().clone(), w.value().as_ref().clone(), b.value().as_ref().clone()];
    let report = check_scalar(
        |_, v| v[0].affine(v[1], v[2])?.relu()?.softmax_cross_entropy(&[1, 3]),
        &inputs,
        1e-6,
    )?;
    println!("{} partials checked, max relative error {:.2e}", report.checked, report.max_rel_error);
    Ok(())
}
