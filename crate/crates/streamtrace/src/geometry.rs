//! Core streamline mathematics: arc length, arc-length resampling, reversal,
//! affine application, and conversion between 3D step vectors and spherical
//! angles.
//!
//! Spherical convention (physics): zenith is measured from +z, azimuth from
//! +x toward +y. Labels and predictions share this convention throughout the
//! crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TAU: f64 = std::f64::consts::TAU;

/// A point in world coordinates, millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sub(&self, o: &Point3) -> [f64; 3] {
        [self.x - o.x, self.y - o.y, self.z - o.z]
    }

    pub fn add_scaled(&self, dir: &[f64; 3], t: f64) -> Point3 {
        Point3::new(self.x + dir[0] * t, self.y + dir[1] * t, self.z + dir[2] * t)
    }

    pub fn dist(&self, o: &Point3) -> f64 {
        let d = self.sub(o);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    pub fn lerp(&self, o: &Point3, t: f64) -> Point3 {
        Point3::new(
            self.x + (o.x - self.x) * t,
            self.y + (o.y - self.y) * t,
            self.z + (o.z - self.z) * t,
        )
    }
}

/// One streamline: an ordered polyline of world-space points plus the index
/// of the point it was seeded from.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<Point3>,
    seed_index: usize,
}

impl Streamline {
    /// Build a streamline, validating the module invariants: at least two
    /// points, finite coordinates, no zero-length segment, seed in range.
    pub fn new(points: Vec<Point3>, seed_index: usize) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidStreamline(format!(
                "needs at least 2 points, got {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("point {i}")));
            }
        }
        for i in 0..points.len() - 1 {
            if points[i].dist(&points[i + 1]) == 0.0 {
                return Err(Error::ZeroLengthSegment(i));
            }
        }
        if seed_index >= points.len() {
            return Err(Error::InvalidStreamline(format!(
                "seed_index {} out of range for {} points",
                seed_index,
                points.len()
            )));
        }
        Ok(Streamline { points, seed_index })
    }

    /// Build from raw points, collapsing consecutive duplicates. Used at load
    /// time so degenerate zero-length segments in external data do not error
    /// mid-pipeline. Returns `None` if fewer than 2 distinct points remain.
    pub fn from_raw(points: Vec<Point3>, seed_index: usize) -> Option<Self> {
        let seed = seed_index.min(points.len().saturating_sub(1));
        let mut out: Vec<Point3> = Vec::with_capacity(points.len());
        let mut remapped = 0usize;
        for (i, p) in points.into_iter().enumerate() {
            if out.last().is_some_and(|last: &Point3| last.dist(&p) == 0.0) {
                // duplicate collapsed; the seed keeps pointing at the kept copy
                continue;
            }
            if i <= seed {
                remapped = out.len();
            }
            out.push(p);
        }
        if out.len() < 2 {
            return None;
        }
        let seed = remapped.min(out.len() - 1);
        Streamline::new(out, seed).ok()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        false // invariant: length >= 2
    }

    pub fn seed_index(&self) -> usize {
        self.seed_index
    }

    pub fn seed_point(&self) -> Point3 {
        self.points[self.seed_index]
    }
}

/// A step direction in spherical coordinates: azimuth in [0, 2pi), zenith in
/// [0, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalStep {
    pub azimuth: f64,
    pub zenith: f64,
}

/// 3x3 linear part plus translation, world millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// Row-major 3x3 linear part.
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Affine {
    pub fn identity() -> Self {
        Affine {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn scale_translate(scale: [f64; 3], translation: [f64; 3]) -> Self {
        Affine {
            linear: [
                [scale[0], 0.0, 0.0],
                [0.0, scale[1], 0.0],
                [0.0, 0.0, scale[2]],
            ],
            translation,
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.linear;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let m = &self.linear;
        let t = &self.translation;
        Point3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + t[0],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + t[1],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + t[2],
        )
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Other("affine is not invertible".into()));
        }
        let m = &self.linear;
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        let t = &self.translation;
        let nt = [
            -(inv[0][0] * t[0] + inv[0][1] * t[1] + inv[0][2] * t[2]),
            -(inv[1][0] * t[0] + inv[1][1] * t[1] + inv[1][2] * t[2]),
            -(inv[2][0] * t[0] + inv[2][1] * t[1] + inv[2][2] * t[2]),
        ];
        Ok(Affine {
            linear: inv,
            translation: nt,
        })
    }

    /// self after `first`: (self . first)(p) = self(first(p)).
    pub fn compose(&self, first: &Affine) -> Affine {
        let a = &self.linear;
        let b = &first.linear;
        let mut linear = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, row) in b.iter().enumerate() {
                    linear[i][j] += a[i][k] * row[j];
                }
            }
        }
        let bt = &first.translation;
        let translation = [
            a[0][0] * bt[0] + a[0][1] * bt[1] + a[0][2] * bt[2] + self.translation[0],
            a[1][0] * bt[0] + a[1][1] * bt[1] + a[1][2] * bt[2] + self.translation[1],
            a[2][0] * bt[0] + a[2][1] * bt[1] + a[2][2] * bt[2] + self.translation[2],
        ];
        Affine {
            linear,
            translation,
        }
    }
}

/// Sum of Euclidean segment lengths, millimeters.
pub fn arc_length(s: &Streamline) -> f64 {
    s.points()
        .windows(2)
        .map(|w| w[0].dist(&w[1]))
        .sum()
}

/// Cumulative arc length at each point; `out[0] = 0`.
fn cumulative_lengths(points: &[Point3]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in points.windows(2) {
        acc += w[0].dist(&w[1]);
        cum.push(acc);
    }
    cum
}

/// Resample to exactly `n` points at equal arc-length spacing along the input
/// polyline. Endpoints are preserved bit-exact; the seed index is remapped to
/// the new point nearest the original seed by arc length.
pub fn resample(s: &Streamline, n: usize) -> Result<Streamline> {
    assert!(n >= 2, "resample target must be at least 2 points");
    let points = s.points();
    let cum = cumulative_lengths(points);
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return Err(Error::DegenerateStreamline);
    }

    let mut out = Vec::with_capacity(n);
    out.push(points[0]);
    let mut seg = 0usize;
    for i in 1..n - 1 {
        let target = total * i as f64 / (n - 1) as f64;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 {
            (target - cum[seg]) / seg_len
        } else {
            0.0
        };
        out.push(points[seg].lerp(&points[seg + 1], t));
    }
    out.push(*points.last().unwrap());

    // Remap seed by arc length: nearest new sample position to the seed's
    // original arc-length position.
    let seed_arc = cum[s.seed_index()];
    let spacing = total / (n - 1) as f64;
    let new_seed = ((seed_arc / spacing).round() as usize).min(n - 1);

    // Resampling very close points can produce coincident neighbors at
    // floating-point resolution; collapse them rather than fail.
    Streamline::from_raw(out, new_seed).ok_or(Error::DegenerateStreamline)
}

/// Per-step unit direction converted to spherical angles. Output is one
/// shorter than the input streamline.
pub fn steps_to_spherical(s: &Streamline) -> Result<Vec<SphericalStep>> {
    let mut out = Vec::with_capacity(s.len() - 1);
    for (i, w) in s.points().windows(2).enumerate() {
        let d = w[1].sub(&w[0]);
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroLengthSegment(i));
        }
        let u = [d[0] / norm, d[1] / norm, d[2] / norm];
        out.push(unit_to_spherical(&u));
    }
    Ok(out)
}

/// Spherical angles of a unit vector: azimuth = atan2(y, x) wrapped to
/// [0, 2pi), zenith = acos(z).
pub fn unit_to_spherical(u: &[f64; 3]) -> SphericalStep {
    let mut azimuth = u[1].atan2(u[0]);
    if azimuth < 0.0 {
        azimuth += TAU;
    }
    if azimuth >= TAU {
        azimuth = 0.0;
    }
    let zenith = u[2].clamp(-1.0, 1.0).acos();
    SphericalStep { azimuth, zenith }
}

/// Unit vector for spherical angles: (sin z cos a, sin z sin a, cos z).
/// Angles outside the canonical ranges are accepted; the trigonometric map
/// wraps them naturally.
pub fn spherical_to_unit(a: &SphericalStep) -> Result<[f64; 3]> {
    if !a.azimuth.is_finite() || !a.zenith.is_finite() {
        return Err(Error::NonFinite("spherical step".into()));
    }
    let (sz, cz) = a.zenith.sin_cos();
    let (sa, ca) = a.azimuth.sin_cos();
    Ok([sz * ca, sz * sa, cz])
}

/// Reverse point order; the seed index flips with it.
pub fn flip(s: &Streamline) -> Streamline {
    let mut points = s.points().to_vec();
    points.reverse();
    let seed = s.len() - 1 - s.seed_index();
    Streamline::new(points, seed).expect("flip preserves validity")
}

/// Map every point through an affine transform.
pub fn apply_affine(s: &Streamline, t: &Affine) -> Streamline {
    let points = s.points().iter().map(|p| t.apply(p)).collect();
    Streamline::new(points, s.seed_index()).expect("affine of valid streamline")
}

/// Minimum distance from `p` to the segment (a, b).
pub fn point_segment_distance(p: &Point3, a: &Point3, b: &Point3) -> f64 {
    let ab = b.sub(a);
    let ap = p.sub(a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0);
    p.dist(&a.add_scaled(&ab, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(points: &[(f64, f64, f64)]) -> Streamline {
        Streamline::new(
            points.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn arc_length_unit_segment() {
        assert_eq!(arc_length(&line(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)])), 1.0);
    }

    #[test]
    fn arc_length_collinear_additivity() {
        let s = line(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0)]);
        assert_eq!(arc_length(&s), 2.0);
    }

    #[test]
    fn arc_length_quarter_circle_chord_sum() {
        // 100-point quarter circle of radius 10mm; the oracle is the exact
        // chord sum: 99 chords of 2*r*sin(theta/2), theta = (pi/2)/99.
        let n = 100;
        let r = 10.0;
        let pts: Vec<Point3> = (0..n)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / (n - 1) as f64;
                Point3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let s = Streamline::new(pts, 0).unwrap();
        let theta = std::f64::consts::FRAC_PI_2 / 99.0;
        let oracle = 99.0 * 2.0 * r * (theta / 2.0).sin();
        assert!((arc_length(&s) - oracle).abs() < 1e-9);
        // and the chord sum is near (but below) the true arc length
        assert!((arc_length(&s) - 15.707963).abs() < 0.01);
        assert!(arc_length(&s) < 10.0 * std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn resample_line_uniform() {
        let s = line(&[(0.0, 0.0, 0.0), (9.0, 0.0, 0.0)]);
        let r = resample(&s, 10).unwrap();
        assert_eq!(r.len(), 10);
        for (i, p) in r.points().iter().enumerate() {
            assert!((p.x - i as f64).abs() < 1e-12);
            assert_eq!(p.y, 0.0);
        }
    }

    #[test]
    fn resample_idempotent_on_equispaced() {
        let s = line(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0), (3.0, 0.0, 0.0)]);
        let r = resample(&s, 4).unwrap();
        for (a, b) in r.points().iter().zip(s.points()) {
            assert!(a.dist(b) < 1e-9);
        }
    }

    #[test]
    fn resample_l_shape_corner_midpoint() {
        // Arc-length midpoint of the L is exactly the corner.
        let s = line(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 1.0, 0.0)]);
        let r = resample(&s, 3).unwrap();
        assert!(r.points()[1].dist(&Point3::new(1.0, 0.0, 0.0)) < 1e-12);
        assert_eq!(r.points()[0], Point3::new(0.0, 0.0, 0.0));
        assert_eq!(r.points()[2], Point3::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn resample_endpoints_bit_exact() {
        let s = line(&[(0.3, 0.7, 1.1), (2.2, -1.0, 0.5), (4.0, 0.0, 0.0)]);
        let r = resample(&s, 17).unwrap();
        assert_eq!(r.points()[0], s.points()[0]);
        assert_eq!(*r.points().last().unwrap(), *s.points().last().unwrap());
    }

    #[test]
    fn resample_degenerate_rejected() {
        // Zero-length overall input cannot be constructed through new();
        // from_raw collapses it to nothing.
        assert!(Streamline::from_raw(
            vec![Point3::new(1.0, 1.0, 1.0), Point3::new(1.0, 1.0, 1.0)],
            0
        )
        .is_none());
    }

    #[test]
    fn spherical_pole_and_equator() {
        let s = line(&[(0.0, 0.0, 0.0), (0.0, 0.0, 1.0)]);
        let a = steps_to_spherical(&s).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].azimuth, 0.0);
        assert!(a[0].zenith.abs() < 1e-12);

        let s = line(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)]);
        let a = steps_to_spherical(&s).unwrap();
        assert!(a[0].azimuth.abs() < 1e-12);
        assert!((a[0].zenith - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn spherical_diagonal() {
        let v = 1.0 / 2f64.sqrt();
        let s = line(&[(0.0, 0.0, 0.0), (v, v, 0.0)]);
        let a = steps_to_spherical(&s).unwrap();
        assert!((a[0].azimuth - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((a[0].zenith - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn spherical_to_unit_cases() {
        let u = spherical_to_unit(&SphericalStep { azimuth: 0.0, zenith: 0.0 }).unwrap();
        assert!((u[0]).abs() < 1e-15 && (u[1]).abs() < 1e-15 && (u[2] - 1.0).abs() < 1e-15);
        let u = spherical_to_unit(&SphericalStep {
            azimuth: std::f64::consts::PI,
            zenith: std::f64::consts::FRAC_PI_2,
        })
        .unwrap();
        assert!((u[0] + 1.0).abs() < 1e-12 && u[1].abs() < 1e-12 && u[2].abs() < 1e-12);
    }

    #[test]
    fn spherical_nonfinite_rejected() {
        assert!(spherical_to_unit(&SphericalStep {
            azimuth: f64::NAN,
            zenith: 0.0
        })
        .is_err());
    }

    #[test]
    fn flip_reverses_and_remaps_seed() {
        let s = Streamline::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
            ],
            1,
        )
        .unwrap();
        let f = flip(&s);
        assert_eq!(f.points()[0], Point3::new(2.0, 0.0, 0.0));
        assert_eq!(f.seed_index(), 1);
        let s2 = Streamline::new(s.points().to_vec(), 0).unwrap();
        assert_eq!(flip(&s2).seed_index(), 2);
        assert_eq!(flip(&flip(&s)), s);
        assert_eq!(arc_length(&flip(&s)), arc_length(&s));
    }

    #[test]
    fn affine_identity_and_translation() {
        let s = line(&[(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)]);
        assert_eq!(apply_affine(&s, &Affine::identity()), s);
        let t = Affine::scale_translate([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]);
        let m = apply_affine(&s, &t);
        assert_eq!(m.points()[0], Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn affine_inverse_roundtrip() {
        let t = Affine {
            linear: [[2.0, 0.5, 0.0], [0.0, 1.5, 0.3], [0.1, 0.0, 1.0]],
            translation: [3.0, -2.0, 7.0],
        };
        let s = line(&[(0.2, 0.4, 0.8), (5.0, -3.0, 2.0)]);
        let back = apply_affine(&apply_affine(&s, &t), &t.inverse().unwrap());
        for (a, b) in back.points().iter().zip(s.points()) {
            assert!(a.dist(b) < 1e-9);
        }
    }

    #[test]
    fn point_segment_distance_interior_crossing() {
        // Endpoints away from origin but the segment passes through it.
        let a = Point3::new(-2.0, 0.1, 0.0);
        let b = Point3::new(2.0, 0.1, 0.0);
        let d = point_segment_distance(&Point3::new(0.0, 0.0, 0.0), &a, &b);
        assert!((d - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn steps_len_is_input_minus_one(n in 2usize..40, seed in 0u64..1000) {
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
            let mut pts = vec![Point3::new(0.0, 0.0, 0.0)];
            for _ in 1..n {
                let last = *pts.last().unwrap();
                pts.push(Point3::new(
                    last.x + rng.uniform(0.1, 1.0),
                    last.y + rng.uniform(-1.0, 1.0),
                    last.z + rng.uniform(-1.0, 1.0),
                ));
            }
            let s = Streamline::new(pts, 0).unwrap();
            prop_assert_eq!(steps_to_spherical(&s).unwrap().len(), n - 1);
        }

        #[test]
        fn spherical_unit_norm(az in -10.0f64..10.0, zen in -10.0f64..10.0) {
            let u = spherical_to_unit(&SphericalStep { azimuth: az, zenith: zen }).unwrap();
            let norm = (u[0]*u[0] + u[1]*u[1] + u[2]*u[2]).sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn spherical_roundtrip(seed in 0u64..2000) {
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
            let v = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let n = (v[0]*v[0] + v[1]*v[1] + v[2]*v[2]).sqrt();
            prop_assume!(n > 1e-3);
            let u = [v[0]/n, v[1]/n, v[2]/n];
            let back = spherical_to_unit(&unit_to_spherical(&u)).unwrap();
            for i in 0..3 {
                prop_assert!((back[i] - u[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn resample_preserves_length_on_fine_polylines(seed in 0u64..200) {
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
            // smooth-ish random walk with >= 20 points
            let mut pts = vec![Point3::new(0.0, 0.0, 0.0)];
            let mut dir = [1.0, 0.0, 0.0];
            for _ in 0..40 {
                dir[0] += rng.uniform(-0.04, 0.04);
                dir[1] += rng.uniform(-0.04, 0.04);
                dir[2] += rng.uniform(-0.04, 0.04);
                let n = (dir[0]*dir[0]+dir[1]*dir[1]+dir[2]*dir[2]).sqrt();
                let last = *pts.last().unwrap();
                pts.push(last.add_scaled(&[dir[0]/n, dir[1]/n, dir[2]/n], 1.0));
            }
            let s = Streamline::new(pts, 0).unwrap();
            let r = resample(&s, 120).unwrap();
            let rel = (arc_length(&r) - arc_length(&s)).abs() / arc_length(&s);
            prop_assert!(rel < 1e-3);
            prop_assert_eq!(r.points()[0], s.points()[0]);
            prop_assert_eq!(*r.points().last().unwrap(), *s.points().last().unwrap());
        }

        #[test]
        fn affine_composition(seed in 0u64..500) {
            let mut rng = crate::rng::Xoshiro256StarStar::seed_from_u64(seed);
            let mut mk = |scale: f64| {
                let mut t = Affine::identity();
                for row in t.linear.iter_mut() {
                    for v in row.iter_mut() {
                        *v += rng.uniform(-0.2, 0.2) * scale;
                    }
                }
                t.translation = [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)];
                t
            };
            let t1 = mk(1.0);
            let t2 = mk(1.0);
            prop_assume!(t1.determinant().abs() > 1e-3 && t2.determinant().abs() > 1e-3);
            let s = line(&[(0.5, 1.0, -2.0), (3.0, 0.0, 1.0), (4.0, 4.0, 4.0)]);
            let a = apply_affine(&apply_affine(&s, &t1), &t2);
            let b = apply_affine(&s, &t2.compose(&t1));
            for (p, q) in a.points().iter().zip(b.points()) {
                prop_assert!(p.dist(q) < 1e-9);
            }
        }
    }
}
