//! Rough single-thread throughput of the conv kernels.
//!
//! `cargo run --release -p posexfer-tensor --example conv_bench`

use std::sync::Arc;
use std::time::Instant;

use posexfer_tensor::{Tape, Tensor};
use rand::SeedableRng;

fn main() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    for &(cin, cout, size, batch, stride) in &[
        (256, 256, 64, 1, 1),
        (32, 32, 64, 4, 1),
        (64, 64, 32, 4, 1),
        (1024, 2048, 4, 8, 2),
    ] {
        let x = Arc::new(Tensor::<f32>::randn(&[batch, cin, size, size], 1.0, &mut rng));
        let w = Arc::new(Tensor::<f32>::randn(&[cout, cin, 3, 3], 0.05, &mut rng));
        let tape = Tape::new();
        let xv = tape.param(x);
        let wv = tape.param(w);
        let t = Instant::now();
        let y = xv.conv2d(&wv, stride, 1);
        let fwd = t.elapsed();
        let loss = y.mean_all();
        let t = Instant::now();
        let _ = tape.backward(loss);
        let bwd = t.elapsed();
        let out = size / stride;
        let flops = 2.0 * (cin * cout * 9 * out * out * batch) as f64;
        println!(
            "{cin}->{cout} @{size} x{batch} s{stride}: fwd {:?} ({:.1} GFLOP/s), bwd {:?}",
            fwd,
            flops / fwd.as_secs_f64() / 1e9,
            bwd
        );
    }
}
