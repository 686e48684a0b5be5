//! Uniform planar arrays, element positions and near-field phase analysis.
//!
//! Arrays lie in a plane parallel to the y–z plane. Element `n` is laid out
//! z-major: `n = iz * cols + iy`, with centered (possibly half-integer)
//! indices along each axis. All angles are radians.

use std::f64::consts::PI;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn wavelength(carrier_hz: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_hz
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3 {
    pub const ORIGIN: Position3 = Position3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: Position3) -> f64 {
        (self - other).norm()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Position3 {
    type Output = Position3;
    fn add(self, o: Position3) -> Position3 {
        Position3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Position3 {
    type Output = Position3;
    fn sub(self, o: Position3) -> Position3 {
        Position3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// A uniform planar array with absolute element coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Element count along z.
    pub rows: usize,
    /// Element count along y.
    pub cols: usize,
    pub spacing: f64,
    pub center: Position3,
    pub elements: Vec<Position3>,
}

impl ArrayGeometry {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Mean element position, accumulated as offsets from the first element
    /// so the rounding error scales with the aperture, not the distance.
    pub fn centroid(&self) -> Position3 {
        let Some(&p0) = self.elements.first() else {
            return self.center;
        };
        let n = self.elements.len() as f64;
        let sum = self.elements.iter().fold(Position3::ORIGIN, |acc, &p| acc + (p - p0));
        p0 + sum.scale(1.0 / n)
    }
}

/// Builds a `rows x cols` UPA centered on `center`.
pub fn build_upa(rows: usize, cols: usize, spacing: f64, center: Position3) -> Result<ArrayGeometry> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("array dimensions must be positive, got {rows}x{cols}")));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(invalid(format!("element spacing must be positive, got {spacing}")));
    }
    if !center.is_finite() {
        return Err(invalid("array center must be finite"));
    }
    let z_off = (rows as f64 - 1.0) / 2.0;
    let y_off = (cols as f64 - 1.0) / 2.0;
    let mut elements = Vec::with_capacity(rows * cols);
    for iz in 0..rows {
        let nz = iz as f64 - z_off;
        for iy in 0..cols {
            let ny = iy as f64 - y_off;
            elements.push(Position3::new(center.x, center.y + ny * spacing, center.z + nz * spacing));
        }
    }
    Ok(ArrayGeometry { rows, cols, spacing, center, elements })
}

/// Largest pairwise element distance, i.e. the planar diagonal.
pub fn aperture(g: &ArrayGeometry) -> f64 {
    let dy = (g.cols as f64 - 1.0) * g.spacing;
    let dz = (g.rows as f64 - 1.0) * g.spacing;
    dy.hypot(dz)
}

pub fn rayleigh_distance(aperture_m: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("wavelength must be positive, got {lambda}")));
    }
    if aperture_m < 0.0 {
        return Err(invalid(format!("aperture must be non-negative, got {aperture_m}")));
    }
    Ok(2.0 * aperture_m * aperture_m / lambda)
}

/// Exact spherical-wave phase of an element at aperture offset `q`, relative
/// to the array reference point.
pub fn spherical_phase(r: f64, theta: f64, q: f64, lambda: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(invalid(format!("radial distance must be positive, got {r}")));
    }
    let radicand = r * r + q * q - 2.0 * r * q * theta.sin();
    if radicand < 0.0 {
        return Err(Error::NumericDomain(format!("negative radicand {radicand}")));
    }
    Ok(2.0 * PI / lambda * (radicand.sqrt() - r))
}

pub fn planar_phase(theta: f64, q: f64, lambda: f64) -> f64 {
    2.0 * PI / lambda * q * theta.sin()
}

/// Second-order (Fresnel) phase discrepancy between spherical and planar
/// wavefronts.
pub fn phase_error_approx(q: f64, theta: f64, r: f64, lambda: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(invalid(format!("radial distance must be positive, got {r}")));
    }
    let c = theta.cos();
    Ok(PI * q * q * c * c / (lambda * r))
}

/// Per-element `(distance, elevation, azimuth)` triples seen from one UE.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricFeatures {
    pub rows: Vec<[f64; 3]>,
}

impl GeometricFeatures {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn geometric_features(g: &ArrayGeometry, ue: Position3) -> Result<GeometricFeatures> {
    let mut rows = Vec::with_capacity(g.len());
    for (n, &p) in g.elements.iter().enumerate() {
        let d = ue.distance(p);
        if !(d > 0.0) {
            return Err(invalid(format!("UE coincides with array element {n}")));
        }
        let elevation = ((ue.z - p.z) / d).clamp(-1.0, 1.0).asin();
        let azimuth = (ue.y - p.y).atan2(ue.x - p.x);
        rows.push([d, elevation, azimuth]);
    }
    Ok(GeometricFeatures { rows })
}
