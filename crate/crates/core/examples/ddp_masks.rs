//! Rate logits to expected rate, token-level probabilities, a hard keep mask
//! and the attention mask, with gradients flowing back to the logits.

use diffrate::autograd::Tape;
use diffrate::ddp::{attention_mask, candidates, BoundRate};

fn main() -> diffrate::Result<()> {
    let n = 8;
    println!("candidate rates {:?}", candidates(n));

    // Logits favouring a rate of 3/8.
    let logits: Vec<f64> = (0..n).map(|k| -((k as f64 - 3.0).powi(2)) / 2.0).collect();
    let mut tape = Tape::new();
    let r = BoundRate::bind(&mut tape, &logits, true)?;

    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    println!("rho   {}", fmt(tape.value(r.rho).data()));
    println!("alpha {:.4}", tape.item(r.alpha));
    println!("pi    {}", fmt(tape.value(r.pi).data()));
    println!("mask  {}  ({} kept)", fmt(tape.value(r.mask).data()), r.kept);

    let att = attention_mask(&mut tape, r.mask)?;
    let m = tape.value(att);
    println!("attention mask:");
    for i in 0..n {
        println!("  {}", fmt(&m.data()[i * n..(i + 1) * n]));
    }

    // Raising a small-rate logit keeps more tokens, a large-rate one fewer.
    let kept = tape.sum(r.mask)?;
    let g = tape.backward(kept)?;
    println!("d(kept)/d(logits) {}", fmt(g.get(r.logits).unwrap().data()));
    Ok(())
}
