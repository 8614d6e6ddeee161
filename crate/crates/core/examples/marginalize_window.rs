//! Eliminating variables with the Schur complement keeps the minimizer of
//! the remaining ones: a linear-Gaussian chain of poses with odometry and
//! one absolute measurement.

use nalgebra::{DMatrix, DVector};
use surfloc::window_optimizer::schur_marginalize;
use surfloc::Result;

fn main() -> Result<()> {
    // scalar positions x0..x9; x0 measured at 0, neighbours 1 apart
    let n = 10;
    let mut h = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    h[(0, 0)] += 1.0;
    for i in 0..n - 1 {
        let measured = 1.0 + 0.01 * i as f64;
        // residual x_{i+1} - x_i - measured, Jacobian [-1, 1]
        h[(i, i)] += 1.0;
        h[(i + 1, i + 1)] += 1.0;
        h[(i, i + 1)] -= 1.0;
        h[(i + 1, i)] -= 1.0;
        b[i] += measured;
        b[i + 1] -= measured;
    }
    let full = -h.clone().cholesky().expect("positive definite").solve(&b);

    let marg = [0, 1, 2];
    let keep: Vec<usize> = (3..n).collect();
    let (hk, bk) = schur_marginalize(&h, &b, &keep, &marg)?;
    let reduced = -hk.cholesky().expect("positive definite").solve(&bk);
    for (i, &k) in keep.iter().enumerate() {
        println!("x{k}: full {:.6}  after marginalizing x0..x2 {:.6}", full[k], reduced[i]);
    }
    Ok(())
}
