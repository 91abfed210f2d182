//! The unit sphere S² with its z-axis isotropy group.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diff::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SphereError {
    #[error("latitude {lat} / longitude {lon} outside [-90, 90] x [-180, 180]")]
    LatLonRange { lat: f64, lon: f64 },
    #[error("cannot normalize a zero or non-finite vector")]
    Degenerate,
    #[error("step direction is not tangent (|v·p| = {0:e})")]
    NotTangent(f64),
}

/// Unit vector in ℝ³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint {
    v: [f64; 3],
}

impl SpherePoint {
    /// Normalizing constructor.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, SphereError> {
        let n = (x * x + y * y + z * z).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(SphereError::Degenerate);
        }
        Ok(Self { v: [x / n, y / n, z / n] })
    }

    pub fn north() -> Self {
        Self { v: [0.0, 0.0, 1.0] }
    }

    pub fn coords(&self) -> [f64; 3] {
        self.v
    }

    pub fn z(&self) -> f64 {
        self.v[2]
    }
}

pub fn dot<S: Real>(a: &[S; 3], b: &[S; 3]) -> S {
    S::sum_prod(&[(1.0, a[0], b[0]), (1.0, a[1], b[1]), (1.0, a[2], b[2])])
}

pub fn cross<S: Real>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
    [
        S::sum_prod(&[(1.0, a[1], b[2]), (-1.0, a[2], b[1])]),
        S::sum_prod(&[(1.0, a[2], b[0]), (-1.0, a[0], b[2])]),
        S::sum_prod(&[(1.0, a[0], b[1]), (-1.0, a[1], b[0])]),
    ]
}

/// Uniform point: a normalized standard Gaussian vector.
pub fn uniform_sample<R: Rng + ?Sized>(rng: &mut R) -> SpherePoint {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if let Ok(p) = SpherePoint::new(x, y, z) {
            return p;
        }
    }
}

/// Orthonormal tangent frame at `p` for any scalar carrier, rotated by
/// `gauge` radians inside the tangent plane.
///
/// `e₁` is Gram–Schmidt of the ambient axis least aligned with `p`, and
/// `e₂ = p × e₁`. Axis selection is taken on primal values.
pub fn frame_generic<S: Real>(p: &[S; 3], gauge: f64) -> [[S; 3]; 2] {
    let a = [p[0].value().abs(), p[1].value().abs(), p[2].value().abs()];
    let k = if a[0] <= a[1] && a[0] <= a[2] {
        0
    } else if a[1] <= a[2] {
        1
    } else {
        2
    };
    let proj = p[k];
    let mut e1 = [-(proj * p[0]), -(proj * p[1]), -(proj * p[2])];
    e1[k] = e1[k] + 1.0;
    let norm = dot(&e1, &e1).sqrt().recip();
    let e1 = e1.map(|x| x * norm);
    let e2 = cross(p, &e1);
    if gauge == 0.0 {
        return [e1, e2];
    }
    let (s, c) = gauge.sin_cos();
    let rot = |a: &[S; 3], b: &[S; 3], ca: f64, cb: f64| {
        [0, 1, 2].map(|i| S::lin_comb(&[(ca, a[i]), (cb, b[i])]))
    };
    [rot(&e1, &e2, c, s), rot(&e1, &e2, -s, c)]
}

pub fn tangent_frame(p: &SpherePoint) -> [[f64; 3]; 2] {
    frame_generic(&p.v, 0.0)
}

/// Great-circle step `cos(h‖v‖)p + sin(h‖v‖)v/‖v‖`.
pub fn geodesic_step(p: &SpherePoint, v: &[f64; 3], h: f64) -> Result<SpherePoint, SphereError> {
    let dev = dot(&p.v, v).abs();
    if dev > 1e-8 {
        return Err(SphereError::NotTangent(dev));
    }
    let speed = dot(v, v).sqrt();
    if speed == 0.0 || h == 0.0 {
        return Ok(*p);
    }
    let (s, c) = (h * speed).sin_cos();
    let q = [0, 1, 2].map(|i| c * p.v[i] + s * v[i] / speed);
    SpherePoint::new(q[0], q[1], q[2])
}

/// Rotation by `angle` about the z axis.
pub fn rotate_z(p: &SpherePoint, angle: f64) -> SpherePoint {
    SpherePoint { v: rotate_z_vec(&p.v, angle) }
}

pub fn rotate_z_vec(v: &[f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// `exp(ω̂)·p` by the Rodrigues formula, for any scalar carrier.
pub fn rotate_generic<S: Real>(p: &[S; 3], omega: &[S; 3]) -> [S; 3] {
    let t2 = dot(omega, omega);
    let x = t2.value();
    let (a, b) = if x < 1e-8 {
        let a = S::one() - t2 * (1.0 / 6.0) + t2 * t2 * (1.0 / 120.0);
        let b = S::cst(0.5) - t2 * (1.0 / 24.0) + t2 * t2 * (1.0 / 720.0);
        (a, b)
    } else {
        let t = t2.sqrt();
        let r = t.recip();
        (t.sin() * r, (S::one() - t.cos()) * (r * r))
    };
    let wp = cross(omega, p);
    let wwp = cross(omega, &wp);
    [0, 1, 2].map(|i| S::sum_prod(&[(1.0, a, wp[i]), (1.0, b, wwp[i])]) + p[i])
}

/// Geographic embedding: latitude from the equator, longitude east-positive.
pub fn from_latlon(lat: f64, lon: f64) -> Result<SpherePoint, SphereError> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(SphereError::LatLonRange { lat, lon });
    }
    let (phi, lam) = (lat.to_radians(), lon.to_radians());
    let (sp, cp) = phi.sin_cos();
    let (sl, cl) = lam.sin_cos();
    SpherePoint::new(cp * cl, cp * sl, sp)
}

/// Inverse of [`from_latlon`] in degrees.
pub fn to_latlon(p: &SpherePoint) -> (f64, f64) {
    let [x, y, z] = p.v;
    let lat = z.clamp(-1.0, 1.0).asin();
    let lon = y.atan2(x);
    (lat * 180.0 / PI, lon * 180.0 / PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64; 3], b: &[f64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() <= tol)
    }

    #[test]
    fn latlon_examples() {
        assert!(close(&from_latlon(90.0, 37.0).unwrap().coords(), &[0.0, 0.0, 1.0], 1e-15));
        assert!(close(&from_latlon(0.0, 0.0).unwrap().coords(), &[1.0, 0.0, 0.0], 1e-15));
        assert!(close(&from_latlon(0.0, 90.0).unwrap().coords(), &[0.0, 1.0, 0.0], 1e-15));
        assert!(from_latlon(100.0, 0.0).is_err());
        let p = from_latlon(-33.3, 151.2).unwrap();
        let (la, lo) = to_latlon(&p);
        assert!(close(&from_latlon(la, lo).unwrap().coords(), &p.coords(), 1e-12));
    }

    #[test]
    fn frames_are_orthonormal_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = uniform_sample(&mut rng);
            assert!((dot(&p.v, &p.v) - 1.0).abs() <= 1e-12);
            let [e1, e2] = tangent_frame(&p);
            assert!(dot(&e1, &p.v).abs() <= 1e-12 && dot(&e2, &p.v).abs() <= 1e-12);
            assert!((dot(&e1, &e1) - 1.0).abs() <= 1e-12 && (dot(&e2, &e2) - 1.0).abs() <= 1e-12);
            assert!(dot(&e1, &e2).abs() <= 1e-12);
            for i in 0..3 {
                for j in 0..3 {
                    let proj = e1[i] * e1[j] + e2[i] * e2[j];
                    let want = if i == j { 1.0 } else { 0.0 } - p.v[i] * p.v[j];
                    assert!((proj - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn geodesic_examples() {
        let n = SpherePoint::north();
        assert_eq!(geodesic_step(&n, &[0.0; 3], 1.0).unwrap(), n);
        let q = geodesic_step(&n, &[1.0, 0.0, 0.0], PI / 2.0).unwrap();
        assert!(close(&q.coords(), &[1.0, 0.0, 0.0], 1e-12));
        let p = SpherePoint::new(0.3, -0.4, 0.5).unwrap();
        let [e1, _] = tangent_frame(&p);
        let q = geodesic_step(&p, &e1, 0.7).unwrap();
        let back = geodesic_step(&q, &[0, 1, 2].map(|i| -(e1[i] * 0.7f64.cos() - p.v[i] * 0.7f64.sin())), 0.7)
            .unwrap();
        assert!(close(&back.coords(), &p.coords(), 1e-12));
    }

    #[test]
    fn rotation_examples_and_commutation() {
        let x = SpherePoint::new(1.0, 0.0, 0.0).unwrap();
        assert!(close(&rotate_z(&x, PI / 2.0).coords(), &[0.0, 1.0, 0.0], 1e-15));
        let p = SpherePoint::new(0.2, 0.5, -0.7).unwrap();
        assert_eq!(rotate_z(&p, 0.0), p);
        assert_eq!(rotate_z(&p, 1.234).z(), p.z());
        let [e1, e2] = tangent_frame(&p);
        let v = [0, 1, 2].map(|i| 0.3 * e1[i] - 0.8 * e2[i]);
        let a = rotate_z(&geodesic_step(&p, &v, 0.9).unwrap(), 0.77);
        let b = geodesic_step(&rotate_z(&p, 0.77), &rotate_z_vec(&v, 0.77), 0.9).unwrap();
        assert!(close(&a.coords(), &b.coords(), 1e-12));
        let (r1, r2) = (rotate_z_vec(&e1, 0.77), rotate_z_vec(&v, 0.77));
        assert!((dot(&r1, &r2) - dot(&e1, &v)).abs() <= 1e-12);
    }

    #[test]
    fn rodrigues_matches_great_circle() {
        let p = SpherePoint::new(0.1, 0.9, 0.2).unwrap();
        let [e1, _] = tangent_frame(&p);
        let omega = cross(&p.v, &e1).map(|x| x * 0.6);
        let r = rotate_generic(&p.v, &omega);
        let g = geodesic_step(&p, &e1, 0.6).unwrap();
        assert!(close(&r, &g.coords(), 1e-14));
        let tiny = omega.map(|x| x * 1e-6);
        let r = rotate_generic(&p.v, &tiny);
        let g = geodesic_step(&p, &e1, 0.6e-6).unwrap();
        assert!(close(&r, &g.coords(), 1e-15));
    }
}
