//! Coordinate records, great-circle distance, and the Equal Earth forward
//! projection used to standardize GPS before Fourier encoding.
//!
//! Degrees at the API boundary, radians internally; distances in kilometers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Equal Earth polynomial coefficients.
const A1: f64 = 1.340264;
const A2: f64 = -0.081106;
const A3: f64 = 0.000893;
const A4: f64 = 0.003796;

/// A latitude/longitude pair in degrees. The universal coordinate record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GpsPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::invalid(format!(
                "GPS coordinates must be finite, got ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(format!(
                "latitude {lat} outside [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!(
                "longitude {lon} outside [-180, 180]"
            )));
        }
        Ok(GpsPoint { lat, lon })
    }

    /// Clamps arbitrary finite coordinates into the valid GPS domain.
    pub fn clamped(lat: f64, lon: f64) -> Self {
        GpsPoint {
            lat: lat.clamp(-90.0, 90.0),
            lon: lon.clamp(-180.0, 180.0),
        }
    }
}

/// Equal Earth projected point (dimensionless plane units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EepPoint {
    pub x: f64,
    pub y: f64,
}

/// Great-circle distance between two points on the mean-radius sphere.
pub fn haversine_km(a: GpsPoint, b: GpsPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let s = (dphi / 2.0).sin().powi(2)
        + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// Fallible wrapper over [`haversine_km`] for untrusted inputs.
pub fn haversine_km_checked(a: GpsPoint, b: GpsPoint) -> Result<f64> {
    for p in [a, b] {
        if !p.lat.is_finite() || !p.lon.is_finite() {
            return Err(Error::invalid("haversine: non-finite coordinate"));
        }
    }
    Ok(haversine_km(a, b))
}

/// Equal Earth forward projection.
///
/// θ = asin((√3/2)·sin φ), then
/// x = 2√3·λ·cos θ / (3·(A1 + 3A2θ² + θ⁶(7A3 + 9A4θ²))),
/// y = θ·(A1 + A2θ² + A3θ⁶ + A4θ⁸).
pub fn equal_earth_forward(p: GpsPoint) -> EepPoint {
    let phi = p.lat.to_radians();
    let lambda = p.lon.to_radians();
    let theta = ((3.0f64.sqrt() / 2.0) * phi.sin()).asin();
    let t2 = theta * theta;
    let t6 = t2 * t2 * t2;
    let denom = 3.0 * (A1 + 3.0 * A2 * t2 + t6 * (7.0 * A3 + 9.0 * A4 * t2));
    let x = 2.0 * 3.0f64.sqrt() * lambda * theta.cos() / denom;
    let y = theta * (A1 + A2 * t2 + A3 * t6 + A4 * t6 * t2);
    EepPoint { x, y }
}

/// Maximum |x| of the projection, attained at (0°, ±180°).
pub fn eep_max_x() -> f64 {
    equal_earth_forward(GpsPoint {
        lat: 0.0,
        lon: 180.0,
    })
    .x
}

/// Maximum |y| of the projection, attained at the poles.
pub fn eep_max_y() -> f64 {
    equal_earth_forward(GpsPoint {
        lat: 90.0,
        lon: 0.0,
    })
    .y
}

/// Scales a projected point by the global extrema of each axis so that
/// both components land in [-1, 1]. Bounded inputs keep the downstream
/// Fourier features well conditioned.
pub fn standardize_eep(p: EepPoint) -> [f64; 2] {
    [p.x / eep_max_x(), p.y / eep_max_y()]
}

/// Projection + standardization in one step.
pub fn standardized_coords(p: GpsPoint) -> [f64; 2] {
    standardize_eep(equal_earth_forward(p))
}
