use maskdiff::compute::kernels;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..iters {
        kernels::matmul(&a, &b, &mut c, m, k, n);
    }
    let el = t0.elapsed().as_secs_f64();
    let gf = (2.0 * m as f64 * k as f64 * n as f64 * iters as f64) / el / 1e9;
    println!("{m}x{k}x{n}: {gf:.1} GFLOP/s");
    std::hint::black_box(&c);
}

fn main() {
    bench(1024, 64, 192, 500);
    bench(1024, 64, 128, 500);
    bench(1024, 128, 64, 500);
    bench(1040, 64, 64, 500);
    bench(3, 16, 3, 200000);
}
