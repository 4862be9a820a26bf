//! Geometry, positional encoding and the volume-rendering quadrature shared
//! by the baker, the renderer and the fine-tuner.
//!
//! Conventions: right-handed world with +z up, cameras look down their local
//! −z axis, image rows grow downwards and rays pass through pixel centres.

use glam::{DMat3, DVec3, DVec4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;

/// Axis-aligned box, `min < max` on every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: DVec3,
    pub max: DVec3,
}

impl Aabb {
    pub fn new(min: DVec3, max: DVec3) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min.cmpge(max).any() {
            return Err(Error::invalid(format!(
                "degenerate box: min {min} must be strictly below max {max}"
            )));
        }
        Ok(Self { min, max })
    }

    /// The `[-h, h]^3` cube.
    pub fn cube(half_extent: f64) -> Self {
        Self {
            min: DVec3::splat(-half_extent),
            max: DVec3::splat(half_extent),
        }
    }

    pub fn extent(&self) -> DVec3 {
        self.max - self.min
    }

    pub fn center(&self) -> DVec3 {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, p: DVec3) -> bool {
        p.cmpge(self.min).all() && p.cmple(self.max).all()
    }

    /// Slab-method intersection; see [`ray_box_intersect`].
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            let o = ray.origin[axis];
            let d = ray.direction[axis];
            let (lo, hi) = (self.min[axis], self.max[axis]);
            if d == 0.0 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((lo - o) * inv, (hi - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t_near = t_near.max(a);
            t_far = t_far.min(b);
            if t_near > t_far {
                return None;
            }
        }
        if t_far < 0.0 {
            return None;
        }
        Some((t_near.max(0.0), t_far))
    }
}

/// `r(t) = origin + t * direction` with a unit-length direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: DVec3,
    pub direction: DVec3,
}

impl Ray {
    pub fn new(origin: DVec3, direction: DVec3) -> Result<Self> {
        if !origin.is_finite() || !direction.is_finite() {
            return Err(Error::invalid("ray origin and direction must be finite"));
        }
        if (direction.length() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::invalid(format!(
                "ray direction {direction} is not unit length"
            )));
        }
        Ok(Self { origin, direction })
    }

    /// Builds a ray towards `target`, normalizing the direction.
    pub fn towards(origin: DVec3, target: DVec3) -> Result<Self> {
        let d = target - origin;
        if d.length_squared() == 0.0 {
            return Err(Error::invalid("ray target coincides with origin"));
        }
        Self::new(origin, d.normalize())
    }

    pub fn at(&self, t: f64) -> DVec3 {
        self.origin + t * self.direction
    }
}

/// Pinhole camera. `rotation` is camera-to-world (columns are the camera's
/// right, up and backward axes in world space).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub rotation: DMat3,
    pub position: DVec3,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(rotation: DMat3, position: DVec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::invalid(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be at least 1x1"));
        }
        if !position.is_finite() {
            return Err(Error::invalid("camera position must be finite"));
        }
        let gram = rotation.transpose() * rotation;
        if !gram.abs_diff_eq(DMat3::IDENTITY, UNIT_TOLERANCE)
            || (rotation.determinant() - 1.0).abs() > UNIT_TOLERANCE
        {
            return Err(Error::invalid("camera rotation is not a proper orthonormal matrix"));
        }
        Ok(Self {
            rotation,
            position,
            focal,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate
    /// vertical.
    pub fn look_at(eye: DVec3, target: DVec3, up: DVec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        let forward = (target - eye).try_normalize().ok_or_else(|| Error::invalid("eye coincides with target"))?;
        let mut right = forward.cross(up);
        if right.length_squared() < 1e-12 {
            // Looking straight along `up`; any perpendicular will do.
            right = forward.any_orthonormal_vector();
        }
        let right = right.normalize();
        let true_up = right.cross(forward);
        Self::new(DMat3::from_cols(right, true_up, -forward), eye, focal, width, height)
    }

    /// Orbit pose around `target` with +z as the world up axis. Angles are
    /// in radians; azimuth 0 sits on the +x axis.
    pub fn orbit(
        azimuth: f64,
        elevation: f64,
        radius: f64,
        target: DVec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("orbit radius must be positive"));
        }
        let dir = DVec3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        );
        Self::look_at(target + radius * dir, target, DVec3::Z, focal, width, height)
    }

    /// Focal length in pixels for a horizontal field of view in degrees.
    pub fn focal_from_fov(fov_degrees: f64, width: u32) -> f64 {
        0.5 * width as f64 / (0.5 * fov_degrees.to_radians()).tan()
    }

    /// Ray through the centre of pixel `(row, col)`.
    pub fn generate_ray(&self, row: u32, col: u32) -> Result<Ray> {
        if row >= self.height || col >= self.width {
            return Err(Error::invalid(format!(
                "pixel ({row}, {col}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.ray_unchecked(row, col))
    }

    pub(crate) fn ray_unchecked(&self, row: u32, col: u32) -> Ray {
        let x = (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = -(row as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        let dir = (self.rotation * DVec3::new(x, y, -1.0)).normalize();
        Ray {
            origin: self.position,
            direction: dir,
        }
    }
}

/// What the scene function reports at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleValue {
    pub density: f64,
    pub diffuse: DVec3,
    pub feature: DVec4,
}

impl SampleValue {
    pub const EMPTY: SampleValue = SampleValue {
        density: 0.0,
        diffuse: DVec3::ZERO,
        feature: DVec4::ZERO,
    };
}

/// Front-to-back accumulated diffuse colour, features and opacity of one ray.
/// Colour and features are premultiplied by the compositing weights.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RayAccumulation {
    pub diffuse: DVec3,
    pub feature: DVec4,
    pub alpha: f64,
}

/// Incremental front-to-back compositor. Holds the remaining transmittance
/// directly so callers can stop once it drops below a threshold.
#[derive(Clone, Copy, Debug)]
pub struct Compositor {
    diffuse: DVec3,
    feature: DVec4,
    transmittance: f64,
}

impl Default for Compositor {
    fn default() -> Self {
        Self::new()
    }
}

impl Compositor {
    pub fn new() -> Self {
        Self {
            diffuse: DVec3::ZERO,
            feature: DVec4::ZERO,
            transmittance: 1.0,
        }
    }

    pub fn transmittance(&self) -> f64 {
        self.transmittance
    }

    /// Adds a sample of optical depth `sigma * delta`.
    #[inline]
    pub fn push_optical_depth(&mut self, depth: f64, diffuse: DVec3, feature: DVec4) {
        let weight = self.transmittance * -(-depth).exp_m1();
        self.diffuse += weight * diffuse;
        self.feature += weight * feature;
        self.transmittance *= (-depth).exp();
    }

    /// Adds a sample with per-step opacity `alpha`.
    #[inline]
    pub fn push_alpha(&mut self, alpha: f64, diffuse: DVec3, feature: DVec4) {
        let weight = self.transmittance * alpha;
        self.diffuse += weight * diffuse;
        self.feature += weight * feature;
        self.transmittance *= 1.0 - alpha;
    }

    pub fn finish(&self) -> RayAccumulation {
        RayAccumulation {
            diffuse: self.diffuse,
            feature: self.feature,
            alpha: 1.0 - self.transmittance,
        }
    }
}

/// `1 - exp(-x)` for nonnegative `x`.
pub fn decay(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::invalid(format!("decay needs a nonnegative argument, got {x}")));
    }
    Ok(-(-x).exp_m1())
}

/// Numerical quadrature of the volume-rendering integral over an ordered
/// list of samples with segment lengths `deltas`.
pub fn composite(samples: &[SampleValue], deltas: &[f64]) -> Result<RayAccumulation> {
    if samples.len() != deltas.len() {
        return Err(Error::invalid(format!(
            "{} samples but {} segment lengths",
            samples.len(),
            deltas.len()
        )));
    }
    let mut acc = Compositor::new();
    for (s, &delta) in samples.iter().zip(deltas) {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("segment length must be positive, got {delta}")));
        }
        if !(s.density >= 0.0) {
            return Err(Error::invalid(format!("density must be nonnegative, got {}", s.density)));
        }
        acc.push_optical_depth(s.density * delta, s.diffuse, s.feature);
    }
    Ok(acc.finish())
}

/// `[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]`,
/// each term applied componentwise.
pub fn positional_encode(v: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * (1 + 2 * bands));
    encode_into(v, bands, &mut out);
    out
}

pub(crate) fn encode_into(v: &[f64], bands: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(v);
    let mut freq = std::f64::consts::PI;
    for _ in 0..bands {
        out.extend(v.iter().map(|x| (freq * x).sin()));
        out.extend(v.iter().map(|x| (freq * x).cos()));
        freq *= 2.0;
    }
}

/// Entry and exit parameters of `ray` through the box, or `None` on a miss.
/// Rays starting inside get `t_near = 0`.
pub fn ray_box_intersect(ray: &Ray, box_min: DVec3, box_max: DVec3) -> Result<Option<(f64, f64)>> {
    Ok(Aabb::new(box_min, box_max)?.intersect(ray))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{LN_2, PI};

    fn sample(density: f64, diffuse: [f64; 3], feature: [f64; 4]) -> SampleValue {
        SampleValue {
            density,
            diffuse: DVec3::from_array(diffuse),
            feature: DVec4::from_array(feature),
        }
    }

    #[test]
    fn decay_values() {
        assert_eq!(decay(0.0).unwrap(), 0.0);
        assert!((decay(1e9).unwrap() - 1.0).abs() < 1e-12);
        assert!((decay(LN_2).unwrap() - 0.5).abs() < 1e-15);
        assert!(decay(-1e-3).is_err());
        assert!(decay(f64::NAN).is_err());
    }

    #[test]
    fn composite_edge_cases() {
        let empty = composite(&[], &[]).unwrap();
        assert_eq!(empty, RayAccumulation::default());

        let opaque = composite(&[sample(1e9, [1.0, 0.5, 0.0], [0.0; 4])], &[1.0]).unwrap();
        assert!((opaque.diffuse - DVec3::new(1.0, 0.5, 0.0)).abs().max_element() < 1e-12);
        assert!((opaque.alpha - 1.0).abs() < 1e-12);

        assert!(composite(&[SampleValue::EMPTY], &[]).is_err());
        assert!(composite(&[SampleValue::EMPTY], &[0.0]).is_err());
        assert!(composite(&[sample(-1.0, [0.0; 3], [0.0; 4])], &[1.0]).is_err());
    }

    #[test]
    fn composite_two_half_opaque_samples() {
        // Each sample has optical depth ln 2: weights 1/2 then 1/4.
        let a = sample(LN_2, [1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.5]);
        let b = sample(LN_2, [0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.5]);
        let acc = composite(&[a, b], &[1.0, 1.0]).unwrap();
        let expect_diffuse = DVec3::new(0.5, 0.25, 0.0);
        let expect_feature = DVec4::new(0.5, 0.25, 0.0, 0.375);
        assert!((acc.diffuse - expect_diffuse).abs().max_element() < 1e-15);
        assert!((acc.feature - expect_feature).abs().max_element() < 1e-15);
        assert!((acc.alpha - 0.75).abs() < 1e-15);
    }

    #[test]
    fn encoding_examples() {
        let zeros = positional_encode(&[0.0; 3], 4);
        assert_eq!(zeros.len(), 3 + 6 * 4);
        assert!(zeros[..3].iter().all(|&x| x == 0.0));
        for band in 0..4 {
            let base = 3 + 6 * band;
            assert!(zeros[base..base + 3].iter().all(|&x| x == 0.0));
            assert!(zeros[base + 3..base + 6].iter().all(|&x| x == 1.0));
        }

        assert_eq!(positional_encode(&[0.3, -0.7], 0), vec![0.3, -0.7]);

        let half = positional_encode(&[0.5], 2);
        let expect = [0.5, 1.0, 0.0, 0.0, -1.0];
        for (got, want) in half.iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{half:?}");
        }
        assert!(((2.0 * PI * 0.5).cos() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn box_intersection_examples() {
        let unit = (DVec3::splat(-0.5), DVec3::splat(0.5));
        let ray = Ray::new(DVec3::new(-2.0, 0.0, 0.0), DVec3::X).unwrap();
        let (t0, t1) = ray_box_intersect(&ray, unit.0, unit.1).unwrap().unwrap();
        assert!((t0 - 1.5).abs() < 1e-15 && (t1 - 2.5).abs() < 1e-15);

        let inside = Ray::new(DVec3::new(0.1, 0.2, 0.0), DVec3::Y).unwrap();
        let (t0, t1) = ray_box_intersect(&inside, unit.0, unit.1).unwrap().unwrap();
        assert_eq!(t0, 0.0);
        assert!((t1 - 0.3).abs() < 1e-15);

        let parallel = Ray::new(DVec3::new(-2.0, 0.7, 0.0), DVec3::X).unwrap();
        assert_eq!(ray_box_intersect(&parallel, unit.0, unit.1).unwrap(), None);

        let behind = Ray::new(DVec3::new(2.0, 0.0, 0.0), DVec3::X).unwrap();
        assert_eq!(ray_box_intersect(&behind, unit.0, unit.1).unwrap(), None);

        assert!(ray_box_intersect(&ray, DVec3::ZERO, DVec3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn ray_rejects_non_unit_direction() {
        assert!(Ray::new(DVec3::ZERO, DVec3::new(1.0, 1.0, 0.0)).is_err());
        assert!(Ray::towards(DVec3::ZERO, DVec3::new(3.0, 4.0, 0.0)).is_ok());
    }

    #[test]
    fn principal_ray_looks_down_negative_z() {
        let cam = Camera::new(DMat3::IDENTITY, DVec3::ZERO, 100.0, 101, 101).unwrap();
        let ray = cam.generate_ray(50, 50).unwrap();
        assert!((ray.direction - DVec3::NEG_Z).length() < 1e-6);
    }

    #[test]
    fn corner_rays_are_symmetric() {
        let cam = Camera::new(DMat3::IDENTITY, DVec3::ZERO, 64.0, 32, 32).unwrap();
        let tl = cam.generate_ray(0, 0).unwrap().direction;
        let br = cam.generate_ray(31, 31).unwrap().direction;
        let tr = cam.generate_ray(0, 31).unwrap().direction;
        assert!((tl.x + br.x).abs() < 1e-12 && (tl.y + br.y).abs() < 1e-12);
        assert!((tl.z - br.z).abs() < 1e-12);
        assert!((tl.x + tr.x).abs() < 1e-12 && (tl.y - tr.y).abs() < 1e-12);
        assert!(tl.x < 0.0 && tl.y > 0.0);
    }

    #[test]
    fn edge_pixel_offset() {
        // Last column of an 800-wide image: centre offset 399.5 px at focal 800.
        let cam = Camera::new(DMat3::IDENTITY, DVec3::ZERO, 800.0, 800, 800).unwrap();
        let d = cam.generate_ray(400, 799).unwrap().direction;
        assert!((d.x / d.z.abs() - 0.499375).abs() < 1e-12);
        assert!(cam.generate_ray(400, 800).is_err());
        assert!(cam.generate_ray(800, 0).is_err());
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(DMat3::IDENTITY, DVec3::ZERO, 0.0, 4, 4).is_err());
        assert!(Camera::new(DMat3::IDENTITY, DVec3::ZERO, 1.0, 0, 4).is_err());
        assert!(Camera::new(DMat3::from_diagonal(DVec3::new(1.0, 1.0, 2.0)), DVec3::ZERO, 1.0, 4, 4).is_err());
        assert!(Camera::new(DMat3::from_diagonal(DVec3::new(1.0, 1.0, -1.0)), DVec3::ZERO, 1.0, 4, 4).is_err());
    }

    #[test]
    fn orbit_camera_points_at_target() {
        let cam = Camera::orbit(0.7, 0.4, 3.0, DVec3::new(0.1, 0.0, -0.2), 50.0, 33, 33).unwrap();
        let ray = cam.generate_ray(16, 16).unwrap();
        let to_target = (DVec3::new(0.1, 0.0, -0.2) - cam.position).normalize();
        assert!((ray.direction - to_target).length() < 1e-9);
        assert!((cam.position - DVec3::new(0.1, 0.0, -0.2)).length() - 3.0 < 1e-12);
        // Straight down still yields a valid frame.
        assert!(Camera::orbit(0.0, std::f64::consts::FRAC_PI_2, 2.0, DVec3::ZERO, 10.0, 4, 4).is_ok());
    }
}
