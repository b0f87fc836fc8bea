use faust_core::tensor::{matmul, matmul_bt, DenseMatrix};
use std::time::Instant;

fn bench(name: &str, f: &dyn Fn() -> DenseMatrix, flops: f64) {
    for _ in 0..3 { let _ = f(); }
    let t0 = Instant::now();
    let mut reps = 0;
    while t0.elapsed().as_secs_f64() < 1.0 { let _ = f(); reps += 1; }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{name}: {:.2} ms, {:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);
}

fn main() {
    let a = DenseMatrix::from_vec(266, 784, vec![0.5; 266 * 784]).unwrap();
    let b = DenseMatrix::from_vec(500, 784, vec![0.1; 500 * 784]).unwrap();
    bench("bt 266x784x500", &|| matmul_bt(&a, &b).unwrap(), 2.0 * 266.0 * 784.0 * 500.0);

    // small, cache-resident
    let sa = DenseMatrix::from_vec(8, 784, vec![0.5; 8 * 784]).unwrap();
    let sb = DenseMatrix::from_vec(64, 784, vec![0.1; 64 * 784]).unwrap();
    bench("bt 8x784x64 (cache)", &|| matmul_bt(&sa, &sb).unwrap(), 2.0 * 8.0 * 784.0 * 64.0);

    // plain kernel, forward-sized
    let c = DenseMatrix::from_vec(266, 500, vec![0.5; 266 * 500]).unwrap();
    let d = DenseMatrix::from_vec(500, 500, vec![0.1; 500 * 500]).unwrap();
    bench("plain 266x500x500", &|| matmul(&c, &d).unwrap(), 2.0 * 266.0 * 500.0 * 500.0);
}
