//! Point model shared by every stage of the engine.
//!
//! Frame convention: x forward, y left, z up, origin at the optical center.
//! Azimuth θ is measured counterclockwise from +x, elevation φ from the
//! horizontal plane. Angles are carried in degrees at the API surface and
//! converted to radians only for trigonometry.

use serde::{Deserialize, Serialize};

/// Segmentation state of a single range return.
///
/// `Change`, `ChangeFollow`, `Uncertain` and `Unlabeled` are transient and
/// only exist between the coarse and fine ground passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroundLabel {
    Invalid,
    Unlabeled,
    Ground,
    Change,
    ChangeFollow,
    Uncertain,
    Obstacle,
}

impl GroundLabel {
    pub fn is_final(self) -> bool {
        matches!(self, GroundLabel::Invalid | GroundLabel::Ground | GroundLabel::Obstacle)
    }
}

/// Cartesian projection of a spherical return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cartesian {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rho_xy: f64,
}

/// Converts a range measure at elevation `phi` and azimuth `theta` (degrees)
/// into sensor-frame coordinates plus the horizontal range.
pub fn to_cartesian(rho: f64, phi: f64, theta: f64) -> Cartesian {
    let (sin_phi, cos_phi) = phi.to_radians().sin_cos();
    let (sin_theta, cos_theta) = theta.to_radians().sin_cos();
    let rho_xy = rho * cos_phi;
    Cartesian {
        x: rho_xy * cos_theta,
        y: rho_xy * sin_theta,
        z: rho * sin_phi,
        rho_xy,
    }
}

/// Normalizes an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(theta: f64) -> f64 {
    let t = theta.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if t >= 360.0 {
        0.0
    } else {
        t
    }
}

/// One cell of the range image: a return (or the absence of one) at beam
/// row `row` (0-based, ascending elevation) and scan column `col`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    pub rho: f64,
    pub phi: f64,
    pub theta: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rho_xy: f64,
    pub row: u16,
    pub col: u32,
    pub label: GroundLabel,
}

impl SphericalPoint {
    /// Builds a point and its derived Cartesian fields. A range of zero is a
    /// no-return and is labeled `Invalid`.
    pub fn new(rho: f64, phi: f64, theta: f64, row: u16, col: u32) -> Self {
        let theta = wrap_degrees(theta);
        if rho <= 0.0 {
            return Self::no_return(phi, theta, row, col);
        }
        let c = to_cartesian(rho, phi, theta);
        Self {
            rho,
            phi,
            theta,
            x: c.x,
            y: c.y,
            z: c.z,
            rho_xy: c.rho_xy,
            row,
            col,
            label: GroundLabel::Unlabeled,
        }
    }

    pub fn no_return(phi: f64, theta: f64, row: u16, col: u32) -> Self {
        Self {
            rho: 0.0,
            phi,
            theta: wrap_degrees(theta),
            x: 0.0,
            y: 0.0,
            z: 0.0,
            rho_xy: 0.0,
            row,
            col,
            label: GroundLabel::Invalid,
        }
    }

    #[inline]
    pub fn is_valid(&self) -> bool {
        self.label != GroundLabel::Invalid
    }

    #[inline]
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn distance_sq(&self, other: &SphericalPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn axis_aligned() {
        let c = to_cartesian(10.0, 0.0, 0.0);
        assert!(close(c.x, 10.0, 1e-12));
        assert!(close(c.y, 0.0, 1e-12));
        assert!(close(c.z, 0.0, 1e-12));
        assert!(close(c.rho_xy, 10.0, 1e-12));
    }

    #[test]
    fn zenith() {
        for theta in [0.0, 37.0, 180.0, 359.0] {
            let c = to_cartesian(10.0, 90.0, theta);
            assert!(close(c.x, 0.0, 1e-9));
            assert!(close(c.y, 0.0, 1e-9));
            assert!(close(c.z, 10.0, 1e-12));
            assert!(close(c.rho_xy, 0.0, 1e-9));
        }
    }

    #[test]
    fn tilted_down_quarter_turn() {
        // 5·cos(30°) = 4.330127..., 5·sin(-30°) = -2.5
        let c = to_cartesian(5.0, -30.0, 90.0);
        assert!(close(c.x, 0.0, 1e-9));
        assert!(close(c.y, 4.330127018922193, 1e-9));
        assert!(close(c.z, -2.5, 1e-12));
        assert!(close(c.rho_xy, 4.330127018922193, 1e-9));
    }

    #[test]
    fn zero_range_is_invalid() {
        let p = SphericalPoint::new(0.0, -10.0, 12.0, 3, 4);
        assert_eq!(p.label, GroundLabel::Invalid);
        assert!(!p.is_valid());
    }

    #[test]
    fn wrap_negative_azimuth() {
        assert!(close(wrap_degrees(-1.4), 358.6, 1e-9));
        assert_eq!(wrap_degrees(360.0), 0.0);
        assert_eq!(wrap_degrees(-1e-300), 0.0);
    }

    proptest! {
        #[test]
        fn norm_is_preserved(rho in 1e-3f64..300.0, phi in -90.0f64..90.0, theta in 0.0f64..360.0) {
            let c = to_cartesian(rho, phi, theta);
            let norm = (c.x * c.x + c.y * c.y + c.z * c.z).sqrt();
            prop_assert!((norm - rho).abs() <= 1e-9 * rho);
        }

        #[test]
        fn derived_fields_are_consistent(rho in 1e-3f64..300.0, phi in -90.0f64..90.0, theta in -720.0f64..720.0) {
            let p = SphericalPoint::new(rho, phi, theta, 0, 0);
            prop_assert!((p.rho_xy * p.rho_xy + p.z * p.z - rho * rho).abs() <= 1e-6);
            prop_assert!((p.x * p.x + p.y * p.y - p.rho_xy * p.rho_xy).abs() <= 1e-6);
            prop_assert!(p.theta >= 0.0 && p.theta < 360.0);
        }
    }
}
