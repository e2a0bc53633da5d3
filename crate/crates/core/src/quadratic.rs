//! Quadratic test model: L(theta) = 1/2 theta'A theta + b'theta + c.
//!
//! The Hessian is the constant matrix A, so gradient-descent stability is
//! exactly characterized by the spectrum: GD at rate eta converges iff every
//! eigenvalue is below 2/eta. This makes the model the oracle for the
//! stability threshold tests.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fmath;
use crate::param::ParamVector;

#[derive(Debug, Clone)]
pub struct QuadraticModel {
    /// Symmetric d x d matrix, row-major.
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
    dim: usize,
}

impl QuadraticModel {
    /// Builds the model, checking A for symmetry to machine tolerance.
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: f64) -> Result<Self> {
        let dim = b.len();
        if a.len() != dim * dim {
            return Err(Error::DimMismatch {
                context: "quadratic A",
                expected: dim * dim,
                got: a.len(),
            });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let diff = fmath::abs(a[i * dim + j] - a[j * dim + i]);
                let scale = fmath::abs(a[i * dim + j]).max(1.0);
                if diff > 1e-12 * scale {
                    return Err(Error::InvalidConfig {
                        what: "quadratic A",
                        why: "matrix not symmetric",
                    });
                }
            }
        }
        Ok(Self { a, b, c, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn loss(&self, theta: &ParamVector) -> f64 {
        let t = theta.as_slice();
        let mut quad = 0.0;
        for i in 0..self.dim {
            let mut row = 0.0;
            for j in 0..self.dim {
                row += self.a[i * self.dim + j] * t[j];
            }
            quad += t[i] * row;
        }
        let lin: f64 = self.b.iter().zip(t).map(|(bi, ti)| bi * ti).sum();
        0.5 * quad + lin + self.c
    }

    pub fn grad(&self, theta: &ParamVector) -> ParamVector {
        let mut g = self.matvec(theta.as_slice());
        for (gi, bi) in g.iter_mut().zip(&self.b) {
            *gi += bi;
        }
        ParamVector::from_vec(g)
    }

    /// H v = A v for any theta: the Hessian is constant.
    pub fn hvp(&self, v: &ParamVector) -> Result<ParamVector> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                context: "quadratic hvp",
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(ParamVector::from_vec(self.matvec(v.as_slice())))
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut acc = 0.0;
            for j in 0..self.dim {
                acc += self.a[i * self.dim + j] * v[j];
            }
            out[i] = acc;
        }
        out
    }
}

/// Random SPD matrix Q diag(eigs) Q' with a prescribed spectrum.
///
/// Q comes from Gram-Schmidt on a random Gaussian matrix, with one
/// reorthogonalization pass; fine at the d <= 32 sizes used in tests.
pub fn random_spd<R: Rng>(eigs: &[f64], rng: &mut R) -> Vec<f64> {
    let d = eigs.len();
    let mut q = vec![0.0; d * d];
    for col in 0..d {
        let mut v: Vec<f64> = (0..d)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                // Box-Muller keeps this independent of distribution crates.
                fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
            })
            .collect();
        for _pass in 0..2 {
            for prev in 0..col {
                let dot: f64 = (0..d).map(|i| v[i] * q[i * d + prev]).sum();
                for i in 0..d {
                    v[i] -= dot * q[i * d + prev];
                }
            }
        }
        let norm = fmath::sqrt(v.iter().map(|x| x * x).sum());
        for i in 0..d {
            q[i * d + col] = v[i] / norm;
        }
    }
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += q[i * d + k] * eigs[k] * q[j * d + k];
            }
            a[i * d + j] = acc;
        }
    }
    // Exact symmetry despite rounding in the triple product.
    for i in 0..d {
        for j in (i + 1)..d {
            let m = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = m;
            a[j * d + i] = m;
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    #[test]
    fn closed_forms_match_definitions() {
        // A = [[2, 1], [1, 3]], b = [1, -1], c = 0.5 evaluated by hand at
        // theta = [1, 2]: quad = 0.5*(2 + 2 + 2 + 12) = 9, lin = -1.
        let m = QuadraticModel::new(vec![2.0, 1.0, 1.0, 3.0], vec![1.0, -1.0], 0.5).unwrap();
        let theta = ParamVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(m.loss(&theta), 9.0 - 1.0 + 0.5);
        assert_eq!(m.grad(&theta).as_slice(), &[2.0 + 2.0 + 1.0, 1.0 + 6.0 - 1.0]);
        let v = ParamVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(m.hvp(&v).unwrap().as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let err = QuadraticModel::new(vec![1.0, 2.0, 0.0, 1.0], vec![0.0, 0.0], 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn random_spd_has_prescribed_trace() {
        let eigs = [5.0, 1.0, 0.5];
        let mut rng = stream(11, Domain::Probe);
        let a = random_spd(&eigs, &mut rng);
        let trace: f64 = (0..3).map(|i| a[i * 3 + i]).sum();
        assert!((trace - 6.5).abs() < 1e-9, "trace {trace}");
        // Symmetry is exact by construction.
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a[i * 3 + j], a[j * 3 + i]);
            }
        }
    }
}
