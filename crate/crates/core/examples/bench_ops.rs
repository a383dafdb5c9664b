use dagan::tensor::*;
use std::time::Instant;

fn t<F: FnMut()>(name: &str, n: usize, mut f: F) {
    let s = Instant::now();
    for _ in 0..n { f(); }
    println!("{name}: {:.3} ms", s.elapsed().as_secs_f64() * 1000.0 / n as f64);
}

fn main() {
    let x = |c, s| Tensor::<f32>::from_fn([1, c, s, s], |i| ((i as f32) * 0.37).sin());
    for (name, cin, cout, s, k, stride, pad) in [
        ("stem 3->16 7x7 @32", 3, 16, 32, 7, 1, Padding::Reflect(3)),
        ("down 16->32 @32 s2", 16, 32, 32, 3, 2, Padding::Zero(1)),
        ("res 64->64 @8", 64, 64, 8, 3, 1, Padding::Reflect(1)),
        ("out 16->3 7x7 @32", 16, 3, 32, 7, 1, Padding::Reflect(3)),
    ] {
        let xi = x(cin, s);
        let w = Tensor::<f32>::from_fn([cout, cin, k, k], |i| ((i as f32) * 0.11).cos() * 0.02);
        let b = Tensor::<f32>::zeros([cout]);
        t(&format!("{name} fwd"), 200, || {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(xi.clone(), false), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
            tape.conv2d(xv, wv, bv, Conv2d::new(stride, pad)).unwrap();
        });
        t(&format!("{name} fwd+bwd"), 200, || {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(xi.clone(), true), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
            let y = tape.conv2d(xv, wv, bv, Conv2d::new(stride, pad)).unwrap();
            let l = tape.mean(y).unwrap();
            tape.backward(l).unwrap();
        });
    }
    let xi = x(64, 8);
    let g = Tensor::<f32>::full([64], 1.0);
    let bb = Tensor::<f32>::zeros([64]);
    t("in 64@8 fwd+bwd", 200, || {
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(xi.clone(), true), tape.leaf(g.clone(), true), tape.leaf(bb.clone(), true));
        let y = tape.instance_norm(xv, gv, bv, 1e-5).unwrap();
        let y = tape.relu(y).unwrap();
        let l = tape.mean(y).unwrap();
        tape.backward(l).unwrap();
    });
    let xi = x(16, 16);
    let w = Tensor::<f32>::from_fn([32, 16, 4, 4], |i| ((i as f32) * 0.11).cos() * 0.02);
    let b = Tensor::<f32>::zeros([16]);
    t("convT 32->16 @16->32 fwd+bwd", 200, || {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x(32, 16), true), tape.leaf(w.clone(), true), tape.leaf(b.clone(), true));
        let y = tape.conv2d_transpose(xv, wv, bv, ConvTranspose2d { stride: 2, padding: 1 }).unwrap();
        let l = tape.mean(y).unwrap();
        tape.backward(l).unwrap();
    });
    let _ = xi;
}
