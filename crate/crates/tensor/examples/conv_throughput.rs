//! Rough forward+backward timing of a 3×3 convolution.

use std::time::Instant;

use lesion_tensor::{ops, Tape, Tensor};
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for &(n, c, h, w) in &[(8usize, 32usize, 8usize, 16usize), (8, 64, 16, 32), (16, 32, 32, 32), (8, 16, 64, 64)] {
        let x = Tensor::randn(&[n, c, h, w], &mut rng);
        let k = Tensor::randn(&[c, c, 3, 3], &mut rng);
        let reps = 5;
        let start = Instant::now();
        for _ in 0..reps {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let kv = tape.param(k.clone());
            let y = ops::conv2d(xv, kv, None, 1, 1).unwrap();
            tape.backward(ops::sum_all(y)).unwrap();
        }
        let secs = start.elapsed().as_secs_f64() / reps as f64;
        let flops = 3.0 * 2.0 * (n * c * c * 9 * h * w) as f64;
        println!("n={n} c={c} {h}x{w}: {:.1} ms, {:.2} GFLOP/s", secs * 1e3, flops / secs / 1e9);
    }
}
