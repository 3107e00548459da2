//! Sinusoidal positional encoding and pinhole camera geometry.
//!
//! Camera frame: +x right, +y down, +z forward (image rows grow along +y).
//! Head poses rotate the camera intrinsically: pitch about x, then yaw about
//! the new y, then roll about the new z, i.e. `R = Rx(pitch) * Ry(yaw) * Rz(roll)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_bands: usize,
    #[serde(default)]
    pub include_input: bool,
}

impl EncodingConfig {
    pub fn new(num_bands: usize) -> Self {
        Self {
            num_bands,
            include_input: false,
        }
    }

    /// Default for 3D positions.
    pub fn positions() -> Self {
        Self::new(10)
    }

    /// Default for unit view directions.
    pub fn directions() -> Self {
        Self::new(4)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        let per = 2 * self.num_bands + usize::from(self.include_input);
        per * input_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bands == 0 {
            return Err(Error::invalid("num_bands", "must be positive"));
        }
        Ok(())
    }
}

/// Encodes each component independently as
/// `[p?, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]`
/// and concatenates the per-component blocks.
pub fn positional_encode(p: &[f64], cfg: &EncodingConfig) -> Result<Vec<f64>> {
    ensure_finite("positional_encode.input", p)?;
    let mut out = Vec::with_capacity(cfg.output_dim(p.len()));
    encode_into(p, cfg, &mut out);
    Ok(out)
}

/// Unchecked variant used on hot paths where inputs are already validated.
pub(crate) fn encode_into(p: &[f64], cfg: &EncodingConfig, out: &mut Vec<f64>) {
    for &x in p {
        if cfg.include_input {
            out.push(x);
        }
        let mut freq = PI;
        for _ in 0..cfg.num_bands {
            let (s, c) = (freq * x).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    /// (pitch, yaw, roll) in radians.
    pub euler: [f64; 3],
    pub translation: [f64; 3],
}

impl HeadPose {
    pub fn new(euler: [f64; 3], translation: [f64; 3]) -> Result<Self> {
        let pose = Self { euler, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("pose.euler", &self.euler)?;
        ensure_finite("pose.translation", &self.translation)?;
        for (i, &a) in self.euler.iter().enumerate() {
            if !(a > -PI && a <= PI) {
                return Err(Error::invalid(
                    format!("pose.euler[{i}]"),
                    format!("{a} outside (-pi, pi]"),
                ));
            }
        }
        Ok(())
    }

    /// The 6-vector `euler ++ translation` conditioning the torso field.
    pub fn et(&self) -> [f64; 6] {
        let [a, b, c] = self.euler;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn from_et(et: &[f64]) -> Self {
        Self {
            euler: [wrap_angle(et[0]), wrap_angle(et[1]), wrap_angle(et[2])],
            translation: [et[3], et[4], et[5]],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_unchecked(self.euler)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a.rem_euclid(two_pi);
    if r > PI {
        r -= two_pi;
    }
    if r <= -PI {
        r += two_pi;
    }
    r
}

pub fn euler_to_rotation(euler: [f64; 3]) -> Result<Matrix3<f64>> {
    ensure_finite("euler", &euler)?;
    Ok(rotation_unchecked(euler))
}

fn rotation_unchecked([pitch, yaw, roll]: [f64; 3]) -> Matrix3<f64> {
    let (sx, cx) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sz, cz) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub principal_point: [f64; 2],
}

impl CameraIntrinsics {
    /// Pinhole camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            focal,
            width,
            height,
            principal_point: [width as f64 / 2.0, height as f64 / 2.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::invalid("focal", "must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("resolution", "width and height must be >= 1"));
        }
        ensure_finite("principal_point", &self.principal_point)
    }

    /// Unnormalized camera-frame direction through continuous pixel (u, v).
    pub fn camera_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.principal_point[0]) / self.focal,
            (v - self.principal_point[1]) / self.focal,
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        ensure_finite("ray.origin", origin.as_slice())?;
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::invalid("ray.direction", "zero or non-finite"));
        }
        if !(t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
            return Err(Error::invalid(
                "ray.bounds",
                format!("need 0 <= t_near < t_far, got ({t_near}, {t_far})"),
            ));
        }
        Ok(Self {
            origin,
            direction: direction / norm,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Ray through continuous pixel coordinates `(u, v)`; pixel centers sit at
/// `(i + 0.5, j + 0.5)`.
pub fn generate_ray(
    pixel: (f64, f64),
    pose: &HeadPose,
    intr: &CameraIntrinsics,
    bounds: (f64, f64),
) -> Result<Ray> {
    let (u, v) = pixel;
    if !(u >= 0.0 && u < intr.width as f64) {
        return Err(Error::invalid("pixel.u", format!("{u} outside [0, {})", intr.width)));
    }
    if !(v >= 0.0 && v < intr.height as f64) {
        return Err(Error::invalid("pixel.v", format!("{v} outside [0, {})", intr.height)));
    }
    ensure_finite("pose", &pose.et())?;
    let dir = pose.rotation() * intr.camera_direction(u, v);
    Ray::new(Vector3::from(pose.translation), dir, bounds.0, bounds.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn encode_zero_two_bands() {
        let out = positional_encode(&[0.0], &EncodingConfig::new(2)).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_half_one_band() {
        let out = positional_encode(&[0.5], &EncodingConfig::new(1)).unwrap();
        assert!(close(out[0], 1.0, 1e-15));
        assert!(close(out[1], 0.0, 1e-15));
    }

    #[test]
    fn encode_output_length() {
        let cfg = EncodingConfig::new(10);
        assert_eq!(positional_encode(&[0.1, 0.2, 0.3], &cfg).unwrap().len(), 60);
        let cfg = EncodingConfig {
            num_bands: 10,
            include_input: true,
        };
        assert_eq!(positional_encode(&[0.1, 0.2, 0.3], &cfg).unwrap().len(), 63);
    }

    #[test]
    fn encode_rejects_nan() {
        let err = positional_encode(&[0.0, f64::NAN], &EncodingConfig::new(2)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn identity_rotation() {
        let r = euler_to_rotation([0.0; 3]).unwrap();
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn pitch_pi_squared_is_identity() {
        let r = euler_to_rotation([PI, 0.0, 0.0]).unwrap();
        assert!(((r * r) - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn principal_ray_is_forward() {
        let intr = CameraIntrinsics::centered(10.0, 16, 16);
        let pose = HeadPose::new([0.0; 3], [0.0, 0.0, -2.0]).unwrap();
        let ray = generate_ray((8.0, 8.0), &pose, &intr, (0.5, 4.0)).unwrap();
        assert_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.origin, Vector3::new(0.0, 0.0, -2.0));
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let intr = CameraIntrinsics::centered(10.0, 16, 16);
        let pose = HeadPose::new([0.0; 3], [0.0; 3]).unwrap();
        assert!(generate_ray((16.0, 0.0), &pose, &intr, (0.5, 4.0)).is_err());
        assert!(generate_ray((0.0, -0.1), &pose, &intr, (0.5, 4.0)).is_err());
    }

    #[test]
    fn rotated_ray_matches_direct_construction() {
        // Independent construction: rotate the camera basis vectors one at a
        // time using Rodrigues' formula about the successive local axes.
        fn rodrigues(axis: Vector3<f64>, angle: f64, v: Vector3<f64>) -> Vector3<f64> {
            let k = axis.normalize();
            v * angle.cos() + k.cross(&v) * angle.sin() + k * k.dot(&v) * (1.0 - angle.cos())
        }
        let euler = [0.3, -0.7, 1.1];
        // Intrinsic x, y', z'': rotate the frame axes in sequence.
        let (mut ex, mut ey, mut ez) = (Vector3::x(), Vector3::y(), Vector3::z());
        ey = rodrigues(ex, euler[0], ey);
        ez = rodrigues(ex, euler[0], ez);
        ex = rodrigues(ey, euler[1], ex);
        ez = rodrigues(ey, euler[1], ez);
        ex = rodrigues(ez, euler[2], ex);
        ey = rodrigues(ez, euler[2], ey);

        let intr = CameraIntrinsics::centered(12.0, 20, 14);
        let pose = HeadPose::new(euler, [0.1, 0.2, 0.3]).unwrap();
        let zero = HeadPose::new([0.0; 3], [0.1, 0.2, 0.3]).unwrap();
        for &(u, v) in &[(0.5, 0.5), (19.5, 3.5), (7.25, 13.9), (10.0, 7.0)] {
            let rotated = generate_ray((u, v), &pose, &intr, (0.1, 5.0)).unwrap();
            let base = generate_ray((u, v), &zero, &intr, (0.1, 5.0)).unwrap().direction;
            let direct = ex * base.x + ey * base.y + ez * base.z;
            assert!((rotated.direction - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!(close(wrap_angle(3.0 * PI), PI, 1e-12));
        assert!(close(wrap_angle(-PI), PI, 1e-12));
        assert!(close(wrap_angle(0.25), 0.25, 0.0));
        assert!(close(wrap_angle(-2.0 * PI - 0.5), -0.5, 1e-12));
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(a in -PI..PI, b in -PI..PI, c in -PI..PI) {
            let r = euler_to_rotation([a, b, c]).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn encoding_is_concatenation(p in proptest::collection::vec(-4.0f64..4.0, 1..6), bands in 1usize..8, inc in any::<bool>()) {
            let cfg = EncodingConfig { num_bands: bands, include_input: inc };
            let whole = positional_encode(&p, &cfg).unwrap();
            let parts: Vec<f64> = p.iter().flat_map(|&x| positional_encode(&[x], &cfg).unwrap()).collect();
            prop_assert_eq!(&whole, &parts);
            if !inc {
                prop_assert!(whole.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn ray_directions_unit_and_forward(u in 0.0f64..32.0, v in 0.0f64..24.0, a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0) {
            let intr = CameraIntrinsics::centered(20.0, 32, 24);
            let pose = HeadPose::new([a, b, c], [0.0, 0.0, -3.0]).unwrap();
            let ray = generate_ray((u, v), &pose, &intr, (0.5, 5.0)).unwrap();
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-6);
            let back = pose.rotation().transpose() * ray.direction;
            prop_assert!(back.z > 0.0);
        }
    }
}
