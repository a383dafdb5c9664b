use dagan::nets::*;
use dagan::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let spec = GeneratorSpec::default();
    let g = build_generator::<f32>(&spec, 1).unwrap();
    let x = Tensor::from_fn([1, 3, 32, 32], |i| ((i as f32) * 0.01).sin());
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let mut tape = Tape::new();
        let b = g.bind(&mut tape, true);
        let xv = tape.leaf(x.clone(), false);
        let y = generator_forward_on(&mut tape, &spec, &b, xv).unwrap();
        let l = tape.l1_loss(y, xv).unwrap();
        tape.backward(l).unwrap();
    }
    println!("gen fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
