//! Poincaré-ball arithmetic.
//!
//! Points live in the open ball `{x : c‖x‖² < 1}` whose sectional curvature is
//! `-c`. Every ball-valued result is clipped to norm `(1 - EPS_BALL)/√c` so that
//! `atanh` and the conformal factor stay finite.
//!
//! Two layers are exposed: typed wrappers ([`BallPoint`], [`TangentVector`],
//! [`Curvature`]) that check dimensions and curvature, and the [`raw`] slice
//! functions that the tape and the training loop call on hot paths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Radial margin kept between any stored point and the ball boundary.
pub const EPS_BALL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BallError {
    #[error("curvature must be positive and finite, got {0}")]
    InvalidCurvature(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },
    #[error("point is not strictly inside the ball (sqrt(c)*|x| = {0})")]
    OutsideBall(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Magnitude `c > 0` of the negative curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self, BallError> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(BallError::InvalidCurvature(c))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest Euclidean norm a stored point may have.
    pub fn max_norm(self) -> f64 {
        (1.0 - EPS_BALL) / self.0.sqrt()
    }
}

impl TryFrom<f64> for Curvature {
    type Error = BallError;
    fn try_from(c: f64) -> Result<Self, Self::Error> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// A point strictly inside the Poincaré ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    /// Wraps `coords` without clipping; rejects points on or outside the boundary.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self, BallError> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(BallError::NonFinite);
        }
        let scaled = curvature.sqrt() * raw::norm(&coords);
        if scaled >= 1.0 {
            return Err(BallError::OutsideBall(scaled));
        }
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self { coords: vec![0.0; dim], curvature }
    }

    fn from_clipped(mut coords: Vec<f64>, curvature: Curvature) -> Self {
        raw::project(curvature.get(), &mut coords);
        Self { coords, curvature }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        raw::norm(&self.coords)
    }

    /// Additive inverse `-x`, which is also the gyrogroup inverse.
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }

    fn check_compatible(&self, other: &BallPoint) -> Result<(), BallError> {
        if self.dim() != other.dim() {
            return Err(BallError::DimensionMismatch { left: self.dim(), right: other.dim() });
        }
        if self.curvature != other.curvature {
            return Err(BallError::CurvatureMismatch {
                left: self.curvature.get(),
                right: other.curvature.get(),
            });
        }
        Ok(())
    }
}

/// Element of the tangent space at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector(pub Vec<f64>);

impl TangentVector {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

/// `x ⊕_c y`, clipped into the safe ball.
pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint, BallError> {
    x.check_compatible(y)?;
    let c = x.curvature;
    Ok(BallPoint::from_clipped(raw::mobius_add(c.get(), &x.coords, &y.coords), c))
}

/// `r ⊗_c x`.
pub fn mobius_scalar_mul(r: f64, x: &BallPoint) -> BallPoint {
    let c = x.curvature;
    BallPoint::from_clipped(raw::mobius_scalar_mul(c.get(), r, &x.coords), c)
}

/// Geodesic distance. Uses the closed arccosh form at `c = 1` and the
/// Möbius form `(2/√c)·atanh(√c‖(-x) ⊕ y‖)` otherwise.
pub fn dist(x: &BallPoint, y: &BallPoint) -> Result<f64, BallError> {
    x.check_compatible(y)?;
    Ok(raw::dist(x.curvature.get(), &x.coords, &y.coords))
}

pub fn dist_to_origin(x: &BallPoint) -> f64 {
    raw::dist_to_origin(x.curvature.get(), &x.coords)
}

pub fn exp0(v: &TangentVector, c: Curvature) -> BallPoint {
    BallPoint::from_clipped(raw::exp0(c.get(), &v.0), c)
}

pub fn log0(y: &BallPoint) -> TangentVector {
    // BallPoint guarantees sqrt(c)|y| < 1, so the raw map cannot fail here.
    TangentVector(raw::log0(y.curvature.get(), &y.coords).expect("ball invariant"))
}

/// `λ_x^c = 2 / (1 - c‖x‖²)`.
pub fn conformal_factor(x: &BallPoint) -> f64 {
    raw::conformal_factor(x.curvature.get(), &x.coords)
}

/// Rescales `x` onto the safe ball if it lies beyond `(1 - EPS_BALL)/√c`.
pub fn project_to_ball(x: &[f64], c: Curvature) -> Result<BallPoint, BallError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BallError::NonFinite);
    }
    Ok(BallPoint::from_clipped(x.to_vec(), c))
}

/// Slice-level kernels. Curvature is passed as a plain `f64` and assumed valid.
pub mod raw {
    use super::{BallError, EPS_BALL};

    #[inline]
    pub fn dot(x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| a * b).sum()
    }

    #[inline]
    pub fn norm_sq(x: &[f64]) -> f64 {
        dot(x, x)
    }

    #[inline]
    pub fn norm(x: &[f64]) -> f64 {
        norm_sq(x).sqrt()
    }

    /// `acosh(1 + z)` without the cancellation of `acosh` near 1.
    #[inline]
    pub fn acosh1p(z: f64) -> f64 {
        (z + (z * (z + 2.0)).sqrt()).ln_1p()
    }

    /// Clips `x` in place onto norm `(1 - EPS_BALL)/√c`; returns whether it moved.
    pub fn project(c: f64, x: &mut [f64]) -> bool {
        let max = (1.0 - EPS_BALL) / c.sqrt();
        let n = norm(x);
        if n > max {
            let s = max / n;
            x.iter_mut().for_each(|v| *v *= s);
            true
        } else {
            false
        }
    }

    /// Unclipped Möbius addition.
    pub fn mobius_add(c: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
        let xy = dot(x, y);
        let nx = norm_sq(x);
        let ny = norm_sq(y);
        let a = 1.0 + 2.0 * c * xy + c * ny;
        let b = 1.0 - c * nx;
        let den = 1.0 + 2.0 * c * xy + c * c * nx * ny;
        x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect()
    }

    pub fn mobius_scalar_mul(c: f64, r: f64, x: &[f64]) -> Vec<f64> {
        let n = norm(x);
        if n == 0.0 {
            return vec![0.0; x.len()];
        }
        let sc = c.sqrt();
        let arg = (sc * n).min(1.0 - 1e-16);
        let scale = (r * arg.atanh()).tanh() / (sc * n);
        x.iter().map(|v| v * scale).collect()
    }

    pub fn exp0(c: f64, v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        if n == 0.0 {
            return vec![0.0; v.len()];
        }
        let sc = c.sqrt();
        let scale = (sc * n).tanh() / (sc * n);
        v.iter().map(|x| x * scale).collect()
    }

    pub fn log0(c: f64, y: &[f64]) -> Result<Vec<f64>, BallError> {
        let n = norm(y);
        let sc = c.sqrt();
        if !(sc * n < 1.0) {
            return Err(BallError::OutsideBall(sc * n));
        }
        if n == 0.0 {
            return Ok(vec![0.0; y.len()]);
        }
        let scale = (sc * n).atanh() / (sc * n);
        Ok(y.iter().map(|x| x * scale).collect())
    }

    pub fn conformal_factor(c: f64, x: &[f64]) -> f64 {
        2.0 / (1.0 - c * norm_sq(x))
    }

    pub fn dist_to_origin(c: f64, x: &[f64]) -> f64 {
        let sc = c.sqrt();
        2.0 / sc * (sc * norm(x)).min(1.0 - 1e-16).atanh()
    }

    /// `acosh(1 + 2‖x-y‖²/((1-‖x‖²)(1-‖y‖²)))`; the unit-curvature closed form.
    pub fn dist_unit_acosh(x: &[f64], y: &[f64]) -> f64 {
        let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let z = 2.0 * diff / ((1.0 - norm_sq(x)) * (1.0 - norm_sq(y)));
        acosh1p(z)
    }

    /// `(2/√c)·atanh(√c‖(-x) ⊕ y‖)` with the inner sum left unclipped.
    pub fn dist_mobius(c: f64, x: &[f64], y: &[f64]) -> f64 {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let m = mobius_add(c, &neg, y);
        let sc = c.sqrt();
        2.0 / sc * (sc * norm(&m)).min(1.0 - 1e-16).atanh()
    }

    /// Curvature-aware arccosh form; numerically the most stable near the boundary.
    pub fn dist_acosh(c: f64, x: &[f64], y: &[f64]) -> f64 {
        let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let z = 2.0 * c * diff / ((1.0 - c * norm_sq(x)) * (1.0 - c * norm_sq(y)));
        acosh1p(z) / c.sqrt()
    }

    pub fn dist(c: f64, x: &[f64], y: &[f64]) -> f64 {
        if c == 1.0 {
            dist_unit_acosh(x, y)
        } else {
            dist_mobius(c, x, y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1() -> Curvature {
        Curvature::new(1.0).unwrap()
    }

    fn pt(v: &[f64]) -> BallPoint {
        BallPoint::new(v.to_vec(), c1()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn mobius_add_examples() {
        let r = mobius_add(&pt(&[0.0, 0.0]), &pt(&[0.3, 0.1])).unwrap();
        assert!(close(r.coords(), &[0.3, 0.1], 1e-15));
        let r = mobius_add(&pt(&[0.4, 0.0]), &pt(&[-0.4, 0.0])).unwrap();
        assert!(close(r.coords(), &[0.0, 0.0], 1e-15));
        let r = mobius_add(&pt(&[0.5, 0.0]), &pt(&[0.5, 0.0])).unwrap();
        assert!(close(r.coords(), &[0.8, 0.0], 1e-15));
    }

    #[test]
    fn mobius_add_rejects_mismatch() {
        let a = pt(&[0.1, 0.2]);
        let b = pt(&[0.1, 0.2, 0.3]);
        assert!(matches!(mobius_add(&a, &b), Err(BallError::DimensionMismatch { .. })));
        let c2 = BallPoint::new(vec![0.1, 0.2], Curvature::new(2.0).unwrap()).unwrap();
        assert!(matches!(mobius_add(&a, &c2), Err(BallError::CurvatureMismatch { .. })));
    }

    #[test]
    fn scalar_mul_examples() {
        let x = pt(&[0.6, 0.0]);
        assert!(close(mobius_scalar_mul(1.0, &x).coords(), &[0.6, 0.0], 1e-15));
        assert!(close(mobius_scalar_mul(0.0, &x).coords(), &[0.0, 0.0], 0.0));
        let y = mobius_scalar_mul(2.0, &pt(&[0.5, 0.0]));
        assert!(close(y.coords(), &[0.8, 0.0], 1e-15));
        let z = mobius_scalar_mul(3.0, &pt(&[0.0, 0.0]));
        assert_eq!(z.coords(), &[0.0, 0.0]);
        let neg = mobius_scalar_mul(-1.0, &x);
        assert!(close(neg.coords(), &[-0.6, 0.0], 1e-15));
    }

    #[test]
    fn dist_examples() {
        let a = pt(&[0.2, 0.7]);
        assert_eq!(dist(&a, &a).unwrap(), 0.0);
        let d = dist(&pt(&[0.0, 0.0]), &pt(&[0.6, 0.0])).unwrap();
        assert!((d - 4f64.ln()).abs() < 1e-12);
        assert!((dist_to_origin(&pt(&[0.6, 0.0])) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(dist_to_origin(&pt(&[0.0, 0.0])), 0.0);
    }

    #[test]
    fn dist_to_origin_monotone() {
        let mut prev = -1.0;
        for i in 0..100 {
            let r = i as f64 / 101.0;
            let d = dist_to_origin(&pt(&[r, 0.0]));
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn exp_log_examples() {
        let c = c1();
        assert_eq!(exp0(&TangentVector(vec![0.0, 0.0]), c).coords(), &[0.0, 0.0]);
        let y = exp0(&TangentVector(vec![0.5f64.atanh(), 0.0]), c);
        assert!(close(y.coords(), &[0.5, 0.0], 1e-15));
        let v = log0(&pt(&[0.5, 0.0]));
        assert!(close(v.coords(), &[0.5f64.atanh(), 0.0], 1e-15));
        assert_eq!(log0(&pt(&[0.0, 0.0])).coords(), &[0.0, 0.0]);
        let big = exp0(&TangentVector(vec![100.0, 0.0]), c);
        assert!(big.norm() < 1.0);
    }

    #[test]
    fn log0_raw_rejects_boundary() {
        assert!(raw::log0(1.0, &[1.0, 0.0]).is_err());
        assert!(raw::log0(4.0, &[0.6, 0.0]).is_err());
        assert!(BallPoint::new(vec![1.0, 0.0], c1()).is_err());
    }

    #[test]
    fn conformal_factor_examples() {
        assert_eq!(conformal_factor(&pt(&[0.0, 0.0])), 2.0);
        assert!((conformal_factor(&pt(&[0.5, 0.0])) - 2.0 / 0.75).abs() < 1e-12);
        let l = conformal_factor(&pt(&[0.99, 0.0]));
        assert!((l - 2.0 / (1.0 - 0.9801)).abs() < 1e-9);
        assert!(l > 100.0);
    }

    #[test]
    fn project_examples() {
        let c = c1();
        assert_eq!(project_to_ball(&[0.1, 0.1], c).unwrap().coords(), &[0.1, 0.1]);
        let p = project_to_ball(&[2.0, 0.0], c).unwrap();
        assert!(close(p.coords(), &[0.99999, 0.0], 1e-15));
        assert_eq!(project_to_ball(&[0.0, 0.0], c).unwrap().coords(), &[0.0, 0.0]);
        assert!(project_to_ball(&[f64::NAN, 0.0], c).is_err());
    }

    #[test]
    fn curvature_validation() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(-1.0).is_err());
        assert!(Curvature::new(f64::INFINITY).is_err());
        assert!((Curvature::new(4.0).unwrap().max_norm() - 0.499995).abs() < 1e-15);
    }

    #[test]
    fn non_associative_witness() {
        let x = pt(&[0.5, 0.1]);
        let y = pt(&[-0.2, 0.6]);
        let z = pt(&[0.3, -0.4]);
        let left = mobius_add(&mobius_add(&x, &y).unwrap(), &z).unwrap();
        let right = mobius_add(&x, &mobius_add(&y, &z).unwrap()).unwrap();
        let gap: f64 = left
            .coords()
            .iter()
            .zip(right.coords())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(gap > 1e-3, "gap = {gap}");
    }
}
