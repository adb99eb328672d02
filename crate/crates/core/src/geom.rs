//! Core geometric types and SIM(3) group operations.
//!
//! A similarity transform `T = (R, t, s)` acts on points as `x ↦ s·R·x + t`.
//! Free vectors transform without the translation, unit directions pick up
//! the rotation only, and scalars are untouched. Every equivariance test in
//! this crate is phrased in terms of these four field kinds.

use thiserror::Error;

/// Orthonormality / group-law tolerance for 64-bit arithmetic.
pub const GROUP_TOL: f64 = 1e-9;

/// Unit-norm tolerance accepted for direction fields.
pub const DIRECTION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("rotation matrix is not orthonormal (max |RᵀR - I| = {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation matrix has det {0:.6} (expected +1)")]
    NotProperRotation(f64),
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("direction not normalized (norm = {0})")]
    DirectionNotNormalized(f64),
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// How a 3-vector (or scalar) field responds to a similarity transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FieldKind {
    /// `x ↦ s·R·x + t`
    Point,
    /// `v ↦ s·R·v` (offsets, velocities)
    Vector,
    /// `d ↦ R·d` (unit norm preserved)
    Direction,
    /// unchanged
    Scalar,
}

// ---------------------------------------------------------------------------
// Vec3
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3 { x: a[0], y: a[1], z: a[2] }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Result<Vec3, GeomError> {
        let n = self.norm();
        if n <= 0.0 || !n.is_finite() {
            return Err(GeomError::NonFinite("normalization of zero/non-finite vector"));
        }
        Ok(self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

// ---------------------------------------------------------------------------
// Mat3
// ---------------------------------------------------------------------------

/// Row-major 3×3 matrix. Rotations are stored raw; validity is checked at
/// the [`Sim3`] boundary rather than per operation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Mat3 { m: [r0, r1, r2] }
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3::from_rows(
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        )
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[i][k] * o.m[k][j]).sum();
            }
        }
        Mat3 { m: out }
    }

    /// Max absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((g.m[i][j] - want).abs());
            }
        }
        err
    }

    pub fn rot_x(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::from_rows([1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c])
    }

    pub fn rot_y(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::from_rows([c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c])
    }

    pub fn rot_z(angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        Mat3::from_rows([c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0])
    }

    /// Rotation matrix of a unit quaternion (w, x, y, z).
    pub fn from_quat(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
        Mat3::from_rows(
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        )
    }
}

// ---------------------------------------------------------------------------
// PointCloud
// ---------------------------------------------------------------------------

/// Ordered, non-empty list of finite 3D points.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeomError::NonFinite("point cloud"));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self
            .points
            .iter()
            .fold(Vec3::ZERO, |acc, &p| acc + p);
        sum * (1.0 / self.points.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Sim3
// ---------------------------------------------------------------------------

/// A SIM(3) element `(R, t, s)`: proper rotation, translation and positive
/// uniform scale. Construction validates the group invariants.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sim3 {
    r: Mat3,
    t: Vec3,
    s: f64,
}

impl Sim3 {
    pub fn new(r: Mat3, t: Vec3, s: f64) -> Result<Self, GeomError> {
        let ortho = r.orthonormality_error();
        if ortho > GROUP_TOL {
            return Err(GeomError::NotOrthonormal(ortho));
        }
        let det = r.det();
        if (det - 1.0).abs() > GROUP_TOL {
            return Err(GeomError::NotProperRotation(det));
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(GeomError::NonPositiveScale(s));
        }
        if !t.is_finite() {
            return Err(GeomError::NonFinite("translation"));
        }
        Ok(Sim3 { r, t, s })
    }

    pub fn identity() -> Sim3 {
        Sim3 { r: Mat3::IDENTITY, t: Vec3::ZERO, s: 1.0 }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation(&self) -> Vec3 {
        self.t
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    /// `x ↦ s·R·x + t`
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.r.mul_vec(p) * self.s + self.t
    }

    /// `v ↦ s·R·v`
    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        self.r.mul_vec(v) * self.s
    }

    /// `d ↦ R·d`; the input must be unit norm within [`DIRECTION_TOL`].
    pub fn apply_direction(&self, d: Vec3) -> Result<Vec3, GeomError> {
        let n = d.norm();
        if (n - 1.0).abs() > DIRECTION_TOL {
            return Err(GeomError::DirectionNotNormalized(n));
        }
        Ok(self.r.mul_vec(d))
    }

    /// Kind-dispatched action on a 3-vector field. `FieldKind::Scalar` does
    /// not apply to 3-vectors and is rejected.
    pub fn apply_kind(&self, v: Vec3, kind: FieldKind) -> Result<Vec3, GeomError> {
        match kind {
            FieldKind::Point => Ok(self.apply_point(v)),
            FieldKind::Vector => Ok(self.apply_vector(v)),
            FieldKind::Direction => self.apply_direction(v),
            FieldKind::Scalar => Err(GeomError::NonFinite("scalar field applied as vector")),
        }
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.iter().map(|&p| self.apply_point(p)).collect(),
        }
    }

    /// `self ∘ inner`: `apply(compose(T2, T1), x) = T2(T1(x))`.
    pub fn compose(&self, inner: &Sim3) -> Sim3 {
        Sim3 {
            r: self.r.mul_mat(&inner.r),
            t: self.apply_point(inner.t),
            s: self.s * inner.s,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let r_inv = self.r.transpose();
        let s_inv = 1.0 / self.s;
        Sim3 {
            r: r_inv,
            t: r_inv.mul_vec(-self.t) * s_inv,
            s: s_inv,
        }
    }
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// Counter-based splitmix64 generator. Identical seeds produce identical
/// streams on every platform; independent streams are obtained with
/// [`Rng::derive`], never by sharing a generator across workers.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rng {
    state: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from(seed: u64) -> Rng {
        Rng { state: seed }
    }

    /// Pure function of `(self.state, salt)`; does not advance `self`.
    pub fn derive(&self, salt: u64) -> Rng {
        Rng {
            state: mix64(self.state ^ mix64(salt.wrapping_mul(GAMMA) ^ 0x6A09_E667_F3BC_C909)),
        }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(state: u64) -> Rng {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` via multiply-shift (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller (two uniform draws per sample).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Uniform random rotation from a normalized 4D Gaussian quaternion.
pub fn random_rotation(rng: &mut Rng) -> Mat3 {
    loop {
        let (w, x, y, z) = (rng.normal(), rng.normal(), rng.normal(), rng.normal());
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n > 1e-6 {
            return Mat3::from_quat(w / n, x / n, y / n, z / n);
        }
    }
}

/// Random similarity transform for equivariance suites: uniform rotation,
/// log-uniform scale in `[0.5, 2]`, translation in `[-range, range]³`.
pub fn random_sim3(rng: &mut Rng, translation_range: f64) -> Sim3 {
    let r = random_rotation(rng);
    let s = (rng.range(0.5f64.ln(), 2.0f64.ln())).exp();
    let t = Vec3::new(
        rng.range(-translation_range, translation_range),
        rng.range(-translation_range, translation_range),
        rng.range(-translation_range, translation_range),
    );
    Sim3 { r, t, s }
}

/// In-plane similarity (rotation about z, translation with z = 0).
pub fn random_sim3_planar(rng: &mut Rng, translation_range: f64, s_lo: f64, s_hi: f64) -> Sim3 {
    let r = Mat3::rot_z(rng.range(0.0, std::f64::consts::TAU));
    let s = rng.range(s_lo, s_hi);
    let t = Vec3::new(
        rng.range(-translation_range, translation_range),
        rng.range(-translation_range, translation_range),
        0.0,
    );
    Sim3 { r, t, s }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // proptest's prelude re-exports a `Rng` trait; ours wins when explicit.
    use super::Rng;

    const TOL: f64 = 1e-9;

    fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
        assert!(
            (a - b).norm() <= tol,
            "vectors differ: {a:?} vs {b:?} (|Δ| = {:.3e})",
            (a - b).norm()
        );
    }

    /// Independent oracle: 4×4 homogeneous matrix of the transform, applied
    /// point-wise.
    fn homogeneous(t: &Sim3) -> [[f64; 4]; 4] {
        let mut h = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] = t.scale() * t.rotation().m[i][j];
            }
        }
        h[0][3] = t.translation().x;
        h[1][3] = t.translation().y;
        h[2][3] = t.translation().z;
        h[3][3] = 1.0;
        h
    }

    fn apply_homogeneous(h: &[[f64; 4]; 4], p: Vec3) -> Vec3 {
        let v = [p.x, p.y, p.z, 1.0];
        let mut out = [0.0; 4];
        for (i, row) in h.iter().enumerate() {
            out[i] = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        assert!((out[3] - 1.0).abs() < 1e-12);
        Vec3::new(out[0], out[1], out[2])
    }

    fn sim3_from_parts(rot: Mat3, t: Vec3, s: f64) -> Sim3 {
        Sim3::new(rot, t, s).expect("valid transform")
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let cloud =
            PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)]).unwrap();
        let out = Sim3::identity().apply_cloud(&cloud);
        assert_eq!(out, cloud);
    }

    #[test]
    fn pure_scaling_doubles_point() {
        let t = sim3_from_parts(Mat3::IDENTITY, Vec3::ZERO, 2.0);
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let out = t.apply_cloud(&cloud);
        assert_vec_close(out.points()[0], Vec3::new(2.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn translation_ignores_vectors() {
        let t = sim3_from_parts(Mat3::IDENTITY, Vec3::new(5.0, 5.0, 5.0), 1.0);
        let v = t.apply_vector(Vec3::new(1.0, 0.0, 0.0));
        assert_vec_close(v, Vec3::new(1.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn scale_ignores_directions() {
        let t = sim3_from_parts(Mat3::rot_z(std::f64::consts::FRAC_PI_2), Vec3::ZERO, 3.0);
        let d = t.apply_direction(Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_vec_close(d, Vec3::new(0.0, 1.0, 0.0), TOL);
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        let t = Sim3::identity();
        let err = t.apply_direction(Vec3::new(1.0, 1.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("direction not normalized"));
    }

    #[test]
    fn compose_with_identity_is_identity_law() {
        let mut rng = Rng::seed_from(7);
        let t = random_sim3(&mut rng, 10.0);
        let c = t.compose(&Sim3::identity());
        let p = Vec3::new(0.3, -1.0, 2.0);
        assert_vec_close(c.apply_point(p), t.apply_point(p), TOL);
    }

    #[test]
    fn inverse_of_pure_translation_negates() {
        let t = sim3_from_parts(Mat3::IDENTITY, Vec3::new(1.0, -2.0, 3.0), 1.0);
        let inv = t.inverse();
        assert_vec_close(inv.translation(), Vec3::new(-1.0, 2.0, -3.0), TOL);
        assert!((inv.scale() - 1.0).abs() < TOL);
    }

    #[test]
    fn scalar_kind_is_not_a_vector_action() {
        let t = Sim3::identity();
        assert!(t.apply_kind(Vec3::ZERO, FieldKind::Scalar).is_err());
    }

    #[test]
    fn random_rotation_is_in_so3() {
        let mut rng = Rng::seed_from(42);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            assert!(r.orthonormality_error() < TOL);
            assert!((r.det() - 1.0).abs() < TOL);
        }
    }

    #[test]
    fn random_rotation_is_reproducible() {
        let a = random_rotation(&mut Rng::seed_from(9001));
        let b = random_rotation(&mut Rng::seed_from(9001));
        assert_eq!(a, b);
    }

    #[test]
    fn random_rotation_monte_carlo_uniformity() {
        // Mean image of a fixed axis over many uniform rotations is ~0.
        let mut rng = Rng::seed_from(3);
        let mut mean = Vec3::ZERO;
        let n = 10_000;
        for _ in 0..n {
            mean = mean + random_rotation(&mut rng).mul_vec(Vec3::new(0.0, 0.0, 1.0));
        }
        mean = mean * (1.0 / n as f64);
        assert!(mean.norm() < 0.05, "mean = {:?}", mean);
    }

    #[test]
    fn rng_streams_are_deterministic_and_distinct() {
        let mut a = Rng::seed_from(5);
        let mut b = Rng::seed_from(5);
        assert_eq!(
            (0..8).map(|_| a.next_u64()).collect::<Vec<_>>(),
            (0..8).map(|_| b.next_u64()).collect::<Vec<_>>()
        );
        let mut c = Rng::seed_from(5).derive(1);
        let mut d = Rng::seed_from(5).derive(2);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn rng_normal_moments_are_sane() {
        let mut rng = Rng::seed_from(11);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(PointCloud::new(vec![]), Err(GeomError::EmptyCloud)));
    }

    #[test]
    fn invalid_rotations_are_rejected() {
        let skew = Mat3::from_rows([1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        assert!(Sim3::new(skew, Vec3::ZERO, 1.0).is_err());
        let reflect = Mat3::from_rows([-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        assert!(Sim3::new(reflect, Vec3::ZERO, 1.0).is_err());
        assert!(Sim3::new(Mat3::IDENTITY, Vec3::ZERO, 0.0).is_err());
        assert!(Sim3::new(Mat3::IDENTITY, Vec3::ZERO, -2.0).is_err());
    }

    fn arb_seed() -> impl Strategy<Value = u64> {
        any::<u64>()
    }

    fn arb_point() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn point_action_matches_homogeneous_oracle(seed in arb_seed(), p in arb_point()) {
            let mut rng = Rng::seed_from(seed);
            let t = random_sim3(&mut rng, 10.0);
            let h = homogeneous(&t);
            assert_vec_close(t.apply_point(p), apply_homogeneous(&h, p), 1e-9 * (1.0 + p.norm()));
        }

        #[test]
        fn cloud_action_matches_homogeneous_oracle(seed in arb_seed()) {
            let mut rng = Rng::seed_from(seed);
            let t = random_sim3(&mut rng, 10.0);
            let points: Vec<Vec3> = (0..16)
                .map(|_| Vec3::new(rng.range(-5.0, 5.0), rng.range(-5.0, 5.0), rng.range(-5.0, 5.0)))
                .collect();
            let cloud = PointCloud::new(points).unwrap();
            let h = homogeneous(&t);
            let out = t.apply_cloud(&cloud);
            for (o, &p) in out.iter().zip(cloud.iter()) {
                assert_vec_close(*o, apply_homogeneous(&h, p), 1e-8);
            }
        }

        #[test]
        fn compose_matches_sequential_application(seed in arb_seed(), p in arb_point()) {
            let mut rng = Rng::seed_from(seed);
            let t1 = random_sim3(&mut rng, 10.0);
            let t2 = random_sim3(&mut rng, 10.0);
            let composed = t2.compose(&t1).apply_point(p);
            let sequential = t2.apply_point(t1.apply_point(p));
            assert_vec_close(composed, sequential, 1e-9 * (1.0 + sequential.norm()));
        }

        #[test]
        fn inverse_round_trips_points(seed in arb_seed(), p in arb_point()) {
            let mut rng = Rng::seed_from(seed);
            let t = random_sim3(&mut rng, 10.0);
            let back = t.inverse().apply_point(t.apply_point(p));
            assert_vec_close(back, p, 1e-9 * (1.0 + p.norm()));
        }

        #[test]
        fn direction_action_preserves_norm(seed in arb_seed()) {
            let mut rng = Rng::seed_from(seed);
            let t = random_sim3(&mut rng, 10.0);
            let d = loop {
                let v = Vec3::new(rng.normal(), rng.normal(), rng.normal());
                if v.norm() > 1e-3 {
                    break v.normalized().unwrap();
                }
            };
            let out = t.apply_direction(d).unwrap();
            prop_assert!((out.norm() - 1.0).abs() < 1e-9);
        }
    }
}
