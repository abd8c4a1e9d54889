//! Central finite differences.

use nalgebra::{DMatrix, DVector};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Central-difference Jacobian of a vector map (rows = outputs).
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, z: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let mut zp = z.clone();
    let mut cols = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        zp[j] = z[j] + step;
        let fp = f(&zp);
        zp[j] = z[j] - step;
        let fm = f(&zp);
        zp[j] = z[j];
        cols.push((fp - fm) / (2.0 * step));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(z).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Central-difference gradient of a scalar map.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, z: &DVector<f64>, step: f64) -> DVector<f64> {
    let mut zp = z.clone();
    DVector::from_iterator(
        z.len(),
        (0..z.len()).map(|j| {
            zp[j] = z[j] + step;
            let fp = f(&zp);
            zp[j] = z[j] - step;
            let fm = f(&zp);
            zp[j] = z[j];
            (fp - fm) / (2.0 * step)
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn square_derivative() {
        let g = fd_gradient(|z| z[0] * z[0], &dvector![3.0], FD_STEP);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = fd_gradient(|_| 4.2, &dvector![1.0, -2.0], FD_STEP);
        assert_eq!(g, dvector![0.0, 0.0]);
    }

    #[test]
    fn quadratic_jacobian_is_exact() {
        let f = |z: &DVector<f64>| dvector![z[0] * z[1], z[0] * z[0] - 3.0 * z[1], 2.0 * z[1] * z[1]];
        let z = dvector![1.5, -0.5];
        let j = fd_jacobian(f, &z, FD_STEP);
        let exact = nalgebra::dmatrix![-0.5, 1.5; 3.0, -3.0; 0.0, -2.0];
        assert!((j - exact).amax() < 1e-8);
    }
}
