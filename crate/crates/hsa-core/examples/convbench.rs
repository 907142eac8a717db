//! Rough conv2d throughput probe used to size desk-scale configs.

use std::time::Instant;

use hsa_core::numeric::kernels::{conv2d_backward, conv2d_forward};
use hsa_core::numeric::Tensor;

fn bench(b: usize, ci: usize, co: usize, h: usize, w: usize, stride: usize, iters: usize) {
    let x = Tensor::<f32>::full(&[b, ci, h, w], 0.5);
    let wt = Tensor::<f32>::full(&[co, ci, 3, 3], 0.01);
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let y = conv2d_forward(&x, &wt, stride);
        sink += y.data()[0];
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    let y = conv2d_forward(&x, &wt, stride);
    let t1 = Instant::now();
    for _ in 0..iters {
        let (dx, dw) = conv2d_backward(&x, &wt, stride, &y);
        sink += dx.data()[0] + dw.data()[0];
    }
    let bwd = t1.elapsed().as_secs_f64() / iters as f64;
    let ho = h / stride;
    let macs = (b * co * ci * ho * ho * 9) as f64;
    println!(
        "b{b} {ci}->{co} {h}x{w} s{stride}: fwd {:.2} GMAC/s  bwd {:.2} GMAC/s  ({:.1} ms / {:.1} ms)  [{sink}]",
        macs / fwd / 1e9,
        2.0 * macs / bwd / 1e9,
        fwd * 1e3,
        bwd * 1e3
    );
}

fn main() {
    bench(128, 8, 8, 32, 32, 1, 6);
    bench(128, 16, 16, 16, 16, 1, 10);
    bench(128, 32, 32, 8, 8, 1, 10);
    bench(128, 4, 4, 32, 32, 1, 10);
    bench(128, 8, 16, 16, 16, 2, 10);
    bench(128, 3, 8, 32, 32, 1, 10);
}
