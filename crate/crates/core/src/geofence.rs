//! Axis-aligned box geofence: barrier value, approach speed toward the binding
//! face, and the push-back velocity used by the backup controller.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Relative tolerance for deciding that two face terms tie for the minimum.
const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeofenceBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

impl GeofenceBox {
    pub fn new(center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self, ConfigError> {
        let b = Self {
            center,
            half_extents,
        };
        b.validate()?;
        Ok(b)
    }

    /// Box spanning `[lo, hi]` on every axis.
    pub fn from_bounds(lo: Vector3<f64>, hi: Vector3<f64>) -> Result<Self, ConfigError> {
        Self::new((lo + hi) * 0.5, (hi - lo) * 0.5)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(ConfigError::invalid("geofence", "center must be finite"));
        }
        if !self.half_extents.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(ConfigError::invalid(
                "geofence",
                "half extents must be positive",
            ));
        }
        Ok(())
    }

    /// Shrink every face inward by `margin` meters.
    pub fn inflated(&self, margin: f64) -> Result<Self, ConfigError> {
        if !(margin >= 0.0) || self.half_extents.iter().any(|r| *r <= margin) {
            return Err(ConfigError::invalid(
                "geofence",
                format!("inflation margin {margin} must be below every half extent"),
            ));
        }
        Ok(Self {
            center: self.center,
            half_extents: self.half_extents.add_scalar(-margin),
        })
    }

    /// Per-axis terms `r_i² - (p_i - c_i)²`.
    #[inline]
    pub fn axis_terms(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center;
        self.half_extents.component_mul(&self.half_extents) - d.component_mul(&d)
    }

    /// Barrier value in m²; positive strictly inside.
    #[inline]
    pub fn h(&self, p: &Vector3<f64>) -> f64 {
        self.axis_terms(p).min()
    }

    /// Axes whose term attains the minimum (within a relative tolerance).
    pub fn active_axes(&self, p: &Vector3<f64>) -> [bool; 3] {
        let terms = self.axis_terms(p);
        let min = terms.min();
        let scale = self.half_extents.amax().powi(2);
        let mut out = [false; 3];
        for (i, t) in terms.iter().enumerate() {
            out[i] = *t - min <= TIE_TOL * scale;
        }
        out
    }

    /// Signed distance in meters from `p` to the nearest face of the axis that
    /// binds `h`. Negative outside the box.
    pub fn face_distance(&self, p: &Vector3<f64>) -> f64 {
        let active = self.active_axes(p);
        let d = p - self.center;
        (0..3)
            .filter(|&i| active[i])
            .map(|i| self.half_extents[i] - d[i].abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Signed distance to the nearest face over all axes.
    pub fn min_face_distance(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.center;
        (self.half_extents - d.abs()).min()
    }
}

/// `min_i r_i² - (p_i - c_i)²`.
#[inline]
pub fn geofence_h(p: &Vector3<f64>, fence: &GeofenceBox) -> f64 {
    fence.h(p)
}

/// Backup-set barrier `ε - |v|` in m/s.
#[inline]
pub fn backup_set_h(v: &Vector3<f64>, epsilon: f64) -> f64 {
    epsilon - v.norm()
}

/// Speed toward the face that binds `h`, floored at zero. With tied faces the
/// largest approach speed wins.
pub fn v_perp(p: &Vector3<f64>, v: &Vector3<f64>, fence: &GeofenceBox) -> f64 {
    let active = fence.active_axes(p);
    let d = p - fence.center;
    let mut best = 0.0f64;
    for i in 0..3 {
        if !active[i] {
            continue;
        }
        let approach = if d[i] > 0.0 {
            v[i]
        } else if d[i] < 0.0 {
            -v[i]
        } else {
            v[i].abs()
        };
        best = best.max(approach);
    }
    best
}

/// Desired velocity that pushes the vehicle back once an axis term falls
/// below `delta` (in m², the units of `h`). Each component is saturated at
/// `max_speed`.
#[inline]
pub fn backup_desired_velocity(
    p: &Vector3<f64>,
    fence: &GeofenceBox,
    delta: f64,
    max_speed: f64,
) -> Vector3<f64> {
    let terms = fence.axis_terms(p);
    let d = p - fence.center;
    Vector3::from_fn(|i, _| {
        if terms[i] >= delta {
            0.0
        } else {
            let magnitude = (delta - terms[i]).min(max_speed);
            -d[i].signum() * magnitude
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cube(center: Vector3<f64>, r: f64) -> GeofenceBox {
        GeofenceBox::new(center, Vector3::repeat(r)).unwrap()
    }

    #[test]
    fn barrier_values() {
        let b = cube(Vector3::new(0.0, 0.0, 10.0), 10.0);
        assert_eq!(b.h(&b.center), 100.0);
        assert_eq!(b.h(&Vector3::new(10.0, 0.0, 10.0)), 0.0);
        assert_eq!(geofence_h(&Vector3::new(9.0, 0.0, 10.0), &b), 19.0);
        assert!(b.h(&Vector3::new(0.0, 0.0, -0.5)) < 0.0);
    }

    #[test]
    fn backup_set_values() {
        assert_relative_eq!(backup_set_h(&Vector3::zeros(), 0.1), 0.1);
        assert_relative_eq!(backup_set_h(&Vector3::new(0.1, 0.0, 0.0), 0.1), 0.0);
        assert_relative_eq!(backup_set_h(&Vector3::new(3.0, 4.0, 0.0), 0.1), -4.9);
    }

    #[test]
    fn push_back_velocity() {
        let b = cube(Vector3::zeros(), 10.0);
        let inside = backup_desired_velocity(&Vector3::new(1.0, -2.0, 3.0), &b, 1.0, 2.0);
        assert_eq!(inside, Vector3::zeros());
        let on_pos = backup_desired_velocity(&Vector3::new(10.0, 0.0, 0.0), &b, 1.0, 2.0);
        assert_eq!(on_pos, Vector3::new(-1.0, 0.0, 0.0));
        let on_neg = backup_desired_velocity(&Vector3::new(-10.0, 0.0, 0.0), &b, 1.0, 2.0);
        assert_eq!(on_neg, Vector3::new(1.0, 0.0, 0.0));
        let outside = backup_desired_velocity(&Vector3::new(0.0, 12.0, 0.0), &b, 1.0, 2.0);
        assert_eq!(outside, Vector3::new(0.0, -2.0, 0.0), "saturated");
    }

    #[test]
    fn approach_speed() {
        let b = cube(Vector3::zeros(), 10.0);
        let p = Vector3::new(8.0, 0.0, 0.0);
        assert_eq!(v_perp(&p, &Vector3::new(-3.0, 0.0, 0.0), &b), 0.0);
        assert_eq!(v_perp(&p, &Vector3::new(10.0, 0.0, 0.0), &b), 10.0);
        let corner = Vector3::new(9.0, 9.0, 0.0);
        assert_eq!(v_perp(&corner, &Vector3::new(3.0, 4.0, 0.0), &b), 4.0);
    }

    #[test]
    fn inflation() {
        let b = cube(Vector3::zeros(), 10.0);
        let s = b.inflated(0.2).unwrap();
        assert_relative_eq!(s.half_extents.x, 9.8);
        assert!(b.inflated(10.0).is_err());
        assert!(GeofenceBox::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn face_distances() {
        let b = GeofenceBox::from_bounds(
            Vector3::new(-50.0, -50.0, 0.5),
            Vector3::new(50.0, 50.0, 100.5),
        )
        .unwrap();
        assert_relative_eq!(
            b.face_distance(&Vector3::new(0.0, 0.0, 1.7)),
            1.2,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            b.min_face_distance(&Vector3::new(49.0, 0.0, 50.0)),
            1.0,
            epsilon = 1e-12
        );
        assert!(b.face_distance(&Vector3::new(51.0, 0.0, 50.0)) < 0.0);
    }
}
