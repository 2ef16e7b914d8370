//! Squared-exponential kernel value, gradient and cross Hessian, checked
//! against central differences.

use mvgp_cbf::kernels::{DerivativeOrder, ScalarKernel};
use mvgp_cbf::oracles::kernel_derivative_errors;
use nalgebra::dvector;

fn main() -> mvgp_cbf::Result<()> {
    let k = ScalarKernel::squared_exponential(vec![0.8, 1.5], 2.0)?;
    let (x, xp) = (dvector![0.3, -0.4], dvector![-0.1, 0.6]);
    let e = k.eval(&x, &xp, DerivativeOrder::Hessian)?;
    println!("k(x, x') = {:.6}", e.value);
    println!("grad_x k = {:?}", e.grad_x.as_ref().map(|g| g.as_slice().to_vec()));
    println!("d2k/dx dx'^T = {:.6}", e.hessian_xx.unwrap());

    let (eg, eh) = kernel_derivative_errors(&k, &x, &xp);
    println!("finite-difference relative errors: grad {eg:.2e}, cross Hessian {eh:.2e}");

    let pts = vec![x.clone(), xp.clone(), dvector![1.0, 1.0]];
    println!("Gram matrix:\n{:.4}", k.gram_matrix(&pts, &pts)?);
    Ok(())
}
