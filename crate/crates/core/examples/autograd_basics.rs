//! Builds a tiny computation on the gradient tape, runs the backward pass and
//! shows the straight-through primitive.

use diffrate::autograd::{Tape, Tensor};

fn main() -> diffrate::Result<()> {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?)?;
    let w = tape.param(Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6])?)?;

    let y = tape.matmul(x, w)?;
    let p = tape.row_softmax(y)?;
    let loss = tape.sum(p)?;
    let sq = tape.square(y)?;
    let reg = tape.mean(sq)?;
    let total = tape.add(loss, reg)?;

    let grads = tape.backward(total)?;
    println!("loss = {:.6}", tape.item(total));
    println!("dL/dx = {:?}", grads.get(x).unwrap().data());
    println!("dL/dw = {:?}", grads.get(w).unwrap().data());

    // Forward value of `hard`, gradient of `soft`.
    let mut tape = Tape::new();
    let s = tape.param(Tensor::scalar(0.3))?;
    let soft = tape.scale(s, 2.0)?;
    let hard = tape.constant(Tensor::scalar(1.0))?;
    let out = tape.ste(hard, soft)?;
    let g = tape.backward(out)?;
    println!("ste value = {}, d/ds = {}", tape.item(out), g.get(s).unwrap().data()[0]);
    Ok(())
}
