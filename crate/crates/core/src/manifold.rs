//! Constant-curvature geometry kernels in the kappa-stereographic chart.
//!
//! One chart covers all three curvature signs: hyperbolic (`kappa < 0`),
//! Euclidean (`kappa = 0`), hyperspherical (`kappa > 0`). All maps are
//! anchored at the origin, where the chart identifies tangent vectors and
//! points with plain `d`-vectors:
//!
//! ```text
//! exp0(v) = tan_k(s |v|) / s * v / |v|,   s = sqrt(|kappa|),
//! ```
//!
//! with `tan_k = tanh` for negative curvature and `tan` for positive
//! curvature; `kappa = 0` is the exact identity. Under this convention
//! `dist0(exp0(v)) = |v|` holds exactly, and `log0` is the exact inverse
//! of `exp0`.
//!
//! For `kappa < 0` the valid point domain is the open ball of radius
//! `1/s`; for `kappa >= 0` every point of `R^d` is valid (the positive
//! chart covers the sphere minus the antipode). Tangent vectors feeding
//! `exp0` with `kappa > 0` must satisfy `s |v| < pi/2 - eps`.

use crate::tensor::l2_norm;
use crate::{RgfmError, Result};

/// A constant-curvature manifold with a numerical boundary guard.
#[derive(Debug, Clone, Copy)]
pub struct Manifold {
    kappa: f64,
    eps: f64,
}

impl Manifold {
    pub fn new(kappa: f64) -> Self {
        Manifold { kappa, eps: 1e-7 }
    }

    pub fn with_eps(kappa: f64, eps: f64) -> Self {
        Manifold { kappa, eps }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn sqrt_abs_kappa(&self) -> f64 {
        self.kappa.abs().sqrt()
    }

    /// Exponential map at the origin.
    pub fn exp0(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.kappa == 0.0 {
            return Ok(v.to_vec());
        }
        let s = self.sqrt_abs_kappa();
        let u = s * l2_norm(v);
        if self.kappa > 0.0 && u >= std::f64::consts::FRAC_PI_2 - self.eps {
            return Err(RgfmError::ManifoldDomain(format!(
                "exp0 tangent norm {u:.6} reaches the positive-curvature chart boundary"
            )));
        }
        let q = tan_k_over_u(self.kappa, u);
        Ok(v.iter().map(|x| q * x).collect())
    }

    /// Logarithmic map at the origin; exact inverse of [`Manifold::exp0`].
    pub fn log0(&self, p: &[f64]) -> Result<Vec<f64>> {
        if self.kappa == 0.0 {
            return Ok(p.to_vec());
        }
        let s = self.sqrt_abs_kappa();
        let u = s * l2_norm(p);
        if self.kappa < 0.0 && u >= 1.0 {
            return Err(RgfmError::ManifoldDomain(format!(
                "log0 point norm {:.6} at/over the ball boundary {:.6}",
                l2_norm(p),
                1.0 / s
            )));
        }
        let q = atan_k_over_u(self.kappa, u);
        Ok(p.iter().map(|x| q * x).collect())
    }

    /// Geodesic distance from the origin.
    pub fn dist0(&self, p: &[f64]) -> Result<f64> {
        if self.kappa == 0.0 {
            return Ok(l2_norm(p));
        }
        let s = self.sqrt_abs_kappa();
        let r = l2_norm(p);
        let u = s * r;
        if self.kappa < 0.0 && u >= 1.0 {
            return Err(RgfmError::ManifoldDomain(format!(
                "dist0 point norm {r:.6} at/over the ball boundary {:.6}",
                1.0 / s
            )));
        }
        Ok(atan_k_over_u(self.kappa, u) * r)
    }

    /// Radial clamp into the valid domain. Identity for `kappa >= 0` and
    /// for in-domain points; idempotent.
    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        if self.kappa >= 0.0 {
            return p.to_vec();
        }
        let s = self.sqrt_abs_kappa();
        let max_norm = (1.0 - self.eps) / s;
        let r = l2_norm(p);
        if r <= max_norm {
            p.to_vec()
        } else {
            let f = max_norm / r;
            p.iter().map(|x| f * x).collect()
        }
    }

    /// Weighted aggregation through the origin tangent space:
    /// `exp0(sum_i w_i log0(p_i))`. Weights must be a convex combination.
    pub fn tangent_aggregate(&self, points: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(points.len(), weights.len(), "points/weights length mismatch");
        assert!(!points.is_empty(), "tangent_aggregate of nothing");
        debug_assert!(
            weights.iter().all(|w| *w >= -1e-12)
                && (weights.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "tangent_aggregate weights must be convex"
        );
        let d = points[0].len();
        let mut acc = vec![0.0; d];
        for (p, &w) in points.iter().zip(weights) {
            let t = self.log0(p)?;
            for (a, x) in acc.iter_mut().zip(&t) {
                *a += w * x;
            }
        }
        self.exp0(&acc)
    }

    /// Adjoint of `exp0` at `v` applied to the upstream gradient `g`.
    pub(crate) fn exp0_backward(&self, v: &[f64], g: &[f64]) -> Vec<f64> {
        if self.kappa == 0.0 {
            return g.to_vec();
        }
        let s = self.sqrt_abs_kappa();
        let r = l2_norm(v);
        let u = s * r;
        let q = tan_k_over_u(self.kappa, u);
        let h = tan_k_radial(self.kappa, u); // q'(u)/u
        let gv = crate::tensor::dot(g, v);
        let radial = s * s * h * gv;
        g.iter().zip(v).map(|(gi, vi)| q * gi + radial * vi).collect()
    }

    /// Adjoint of `log0` at `p` applied to the upstream gradient `g`.
    pub(crate) fn log0_backward(&self, p: &[f64], g: &[f64]) -> Vec<f64> {
        if self.kappa == 0.0 {
            return g.to_vec();
        }
        let s = self.sqrt_abs_kappa();
        let r = l2_norm(p);
        let u = s * r;
        let q = atan_k_over_u(self.kappa, u);
        let h = atan_k_radial(self.kappa, u);
        let gp = crate::tensor::dot(g, p);
        let radial = s * s * h * gp;
        g.iter().zip(p).map(|(gi, pi)| q * gi + radial * pi).collect()
    }
}

const SERIES_CUTOFF: f64 = 1e-3;

/// `tan_k(u) / u` with the sign-matched series near zero.
fn tan_k_over_u(kappa: f64, u: f64) -> f64 {
    if u < SERIES_CUTOFF {
        let u2 = u * u;
        if kappa < 0.0 {
            1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0
        } else {
            1.0 + u2 / 3.0 + 2.0 * u2 * u2 / 15.0
        }
    } else if kappa < 0.0 {
        u.tanh() / u
    } else {
        u.tan() / u
    }
}

/// `(d/du)[tan_k(u)/u] / u`, the radial factor of the exp0 Jacobian.
fn tan_k_radial(kappa: f64, u: f64) -> f64 {
    if u < SERIES_CUTOFF {
        let u2 = u * u;
        if kappa < 0.0 {
            -2.0 / 3.0 + 8.0 * u2 / 15.0
        } else {
            2.0 / 3.0 + 8.0 * u2 / 15.0
        }
    } else if kappa < 0.0 {
        let t = u.tanh();
        ((1.0 - t * t) * u - t) / (u * u * u)
    } else {
        let t = u.tan();
        ((1.0 + t * t) * u - t) / (u * u * u)
    }
}

/// `atan_k(u) / u` (artanh for negative curvature, arctan for positive).
fn atan_k_over_u(kappa: f64, u: f64) -> f64 {
    if u < SERIES_CUTOFF {
        let u2 = u * u;
        if kappa < 0.0 {
            1.0 + u2 / 3.0 + u2 * u2 / 5.0
        } else {
            1.0 - u2 / 3.0 + u2 * u2 / 5.0
        }
    } else if kappa < 0.0 {
        u.atanh() / u
    } else {
        u.atan() / u
    }
}

/// `(d/du)[atan_k(u)/u] / u`, the radial factor of the log0 Jacobian.
fn atan_k_radial(kappa: f64, u: f64) -> f64 {
    if u < SERIES_CUTOFF {
        let u2 = u * u;
        if kappa < 0.0 {
            2.0 / 3.0 + 4.0 * u2 / 5.0
        } else {
            -2.0 / 3.0 + 4.0 * u2 / 5.0
        }
    } else if kappa < 0.0 {
        (u / (1.0 - u * u) - u.atanh()) / (u * u * u)
    } else {
        (u / (1.0 + u * u) - u.atan()) / (u * u * u)
    }
}
