//! A matrix normal `MN(M, A, B)` is a Gaussian on `vec(X)` with covariance `B ⊗ A`.

use mvgp_cbf::mvg::MatrixNormal;
use mvgp_cbf::linalg::{rel_err, vectorize};
use nalgebra::{DMatrix, DVector};

fn main() -> mvgp_cbf::Result<()> {
    let mean = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let b = DMatrix::from_row_slice(2, 2, &[2.0, -0.4, -0.4, 1.0]);
    let mn = MatrixNormal::new(mean.clone(), a.clone(), b.clone())?;
    let v = mn.vectorize();
    println!("cov(vec X) = B ⊗ A:\n{:.3}", v.cov);

    let n = 50_000;
    let draws: Vec<DVector<f64>> = mn.sample(1, n)?.iter().map(vectorize).collect();
    let m = draws.iter().fold(DVector::zeros(4), |acc, d| acc + d) / n as f64;
    let c = draws.iter().fold(DMatrix::zeros(4, 4), |acc, d| {
        let e = d - &m;
        acc + &e * e.transpose()
    }) / (n - 1) as f64;
    println!("{n} draws: mean error {:.3e}, covariance relative error {:.3e}", (&m - vectorize(&mean)).amax(), rel_err(&c, &v.cov));

    // X ↦ C X D stays matrix normal.
    let c_left = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
    let d_right = DMatrix::from_column_slice(2, 1, &[1.0, 0.5]);
    let (t, _) = mn.linear_transform(Some(&c_left), Some(&d_right))?;
    println!("C X D ~ N({:.3}, {:.3})", t.mean[(0, 0)], t.row_cov[(0, 0)] * t.col_cov[(0, 0)]);
    println!("log density at the mean: {:.4}", mn.logpdf(&mean)?);
    Ok(())
}
